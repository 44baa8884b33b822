//! Matrix and plan file formats.
//!
//! Two matrix encodings are accepted everywhere:
//! - CSV: one row per line, comma-separated decimal values;
//! - raw binary: two little-endian u64 dimensions followed by row-major
//!   little-endian f64 values.
//!
//! Files with a `.csv` extension are treated as CSV, everything else as raw
//! binary. Values written as CSV use the shortest decimal representation
//! that round-trips, so write-then-read is exact in both formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::types::{Error, Result, TransportPlan};

/// Entries at or below this magnitude are dropped from plan dumps.
pub const PLAN_DUMP_EPSILON: f64 = 1e-12;

/// Reads a matrix, dispatching on the `.csv` extension.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_matrix_csv(path)
    } else {
        read_matrix_bin(path)
    }
}

/// Writes a matrix, dispatching on the `.csv` extension.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_matrix_csv(path, m)
    } else {
        write_matrix_bin(path, m)
    }
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut data: Vec<f64> = Vec::new();
    let mut ncols: Option<usize> = None;
    let mut nrows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: Vec<f64> = trimmed
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    reason: format!("line {}: {e}", lineno + 1),
                })
            })
            .collect::<Result<_>>()?;
        match ncols {
            None => ncols = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    reason: format!(
                        "line {}: expected {n} columns, found {}",
                        lineno + 1,
                        row.len()
                    ),
                });
            }
            _ => {}
        }
        data.extend(row);
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        reason: "empty matrix file".into(),
    })?;
    Array2::from_shape_vec((nrows, ncols), data).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, |w| {
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    })
}

pub fn read_matrix_bin(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut dims = [0u8; 16];
    reader.read_exact(&mut dims)?;
    let nrows = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
    let ncols = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
    let count = nrows.checked_mul(ncols).ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        reason: "dimension overflow".into(),
    })?;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        reader.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Array2::from_shape_vec((nrows, ncols), data).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_matrix_bin(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, |w| {
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

/// Dumps a plan as `region,label,weight` rows, skipping entries at or
/// below [`PLAN_DUMP_EPSILON`].
pub fn write_plan_csv(path: &Path, plan: &TransportPlan) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "region,label,weight")?;
        for ((k, i), &v) in plan.matrix().indexed_iter() {
            if v > PLAN_DUMP_EPSILON {
                writeln!(w, "{k},{i},{v}")?;
            }
        }
        Ok(())
    })
}

/// Writes through a temp file in the same directory, then renames, so
/// readers never observe a partial file.
pub fn write_atomic<F>(path: &Path, write_fn: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let tmp = tmp_path(path);
    {
        let file = fs::File::create(&tmp)?;
        let mut writer = BufWriter::new(file);
        write_fn(&mut writer).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        writer.flush().inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = array![[0.1, -2.5e-13, 3.0], [f64::MIN_POSITIVE, 1.0 / 3.0, 9.99e299]];
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bin_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = array![[0.1, -2.5e-13], [1.0 / 3.0, -0.0]];
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.nrows(), 2);
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,abc\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn plan_dump_skips_tiny_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.csv");
        let plan =
            TransportPlan::from_entries(array![[0.5, 1e-15], [0.0, 0.5]]).unwrap();
        write_plan_csv(&path, &plan).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "region,label,weight");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,0,0.5");
        assert_eq!(lines[2], "1,1,0.5");
    }

    proptest! {
        #[test]
        fn round_trip_both_formats(
            vals in proptest::collection::vec(-1e12f64..1e12, 6),
            csv in proptest::bool::ANY,
        ) {
            let m = Array2::from_shape_vec((2, 3), vals).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(if csv { "m.csv" } else { "m.bin" });
            write_matrix(&path, &m).unwrap();
            let back = read_matrix(&path).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
