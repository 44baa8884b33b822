//! Everything the solver consumes: the reversed-softmax transport cost,
//! the label-presence marginal, the masked teacher plan and the
//! knowledge-transformed cost.

use ndarray::{Array1, Array2};

use crate::types::{
    cosine_similarity_matrix, row_softmax, CostMatrix, Error, FeatureSet, LabelSet, LabelVector,
    Marginal, Result, TransportPlan,
};

/// Transport cost between regions and labels: one minus the row-softmax of
/// cosine similarities at temperature `tau`. Entries lie in (0, 1) and each
/// row of (1 - C) sums to 1.
pub fn build_cost(visual: &FeatureSet, labels: &LabelSet, tau: f64) -> Result<CostMatrix> {
    let sims = cosine_similarity_matrix(visual, labels)?;
    let soft = row_softmax(&sims, tau)?;
    CostMatrix::new(soft.mapv(|p| 1.0 - p))
}

/// Unbalanced source marginal: softmax over regions of each region's best
/// label similarity at temperature `tau`. Regions whose best label response
/// is weak receive little mass.
pub fn lpd_marginal(visual: &FeatureSet, labels: &LabelSet, tau: f64) -> Result<Marginal> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tau",
            reason: format!("must be > 0, got {tau}"),
        });
    }
    let sims = cosine_similarity_matrix(visual, labels)?;
    let best: Vec<f64> = sims
        .rows()
        .into_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let column = Array2::from_shape_vec((1, best.len()), best).expect("shape");
    let soft = row_softmax(&column, tau)?;
    Marginal::new(Array1::from_iter(soft.row(0).iter().cloned()))
}

/// Teacher reference plan: the row-softmax of frozen-encoder similarities,
/// with every column of an absent label replaced by the global minimum of
/// the unmasked plan. The result is strictly positive and deliberately not
/// renormalized; the KL term it feeds tolerates an unnormalized reference.
pub fn teacher_plan(
    frozen_visual: &FeatureSet,
    frozen_labels: &LabelSet,
    y: &LabelVector,
    tau: f64,
) -> Result<TransportPlan> {
    if y.len() != frozen_labels.len() {
        return Err(Error::DimensionMismatch {
            context: "label vector vs label set",
            left: y.len(),
            right: frozen_labels.len(),
        });
    }
    let sims = cosine_similarity_matrix(frozen_visual, frozen_labels)?;
    let soft = row_softmax(&sims, tau)?;
    let global_min = soft.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut masked = soft;
    for ((_, i), v) in masked.indexed_iter_mut() {
        if !y.is_positive(i) {
            *v = global_min;
        }
    }
    TransportPlan::teacher(masked)
}

/// Knowledge-transformed cost: `C - lambda2 * ln(teacher)` elementwise.
/// Solving entropic OT on this cost with regularization `lambda1 + lambda2`
/// is equivalent to the original knowledge-constrained problem.
pub fn transform_cost(
    cost: &CostMatrix,
    teacher: &TransportPlan,
    lambda2: f64,
) -> Result<CostMatrix> {
    if !(lambda2 >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda2",
            reason: format!("must be >= 0, got {lambda2}"),
        });
    }
    if cost.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            context: "cost vs teacher plan",
            expected: cost.shape(),
            got: teacher.shape(),
        });
    }
    for ((r, c), &v) in teacher.matrix().indexed_iter() {
        if v <= 0.0 {
            return Err(Error::NonPositiveTeacherEntry { row: r, col: c });
        }
    }
    let mut out = cost.matrix().clone();
    for (o, &t) in out.iter_mut().zip(teacher.matrix().iter()) {
        *o -= lambda2 * t.ln();
    }
    CostMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{entropy, kl_divergence};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut rows = Array2::zeros((m, d));
        for mut row in rows.rows_mut() {
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
                norm += *v * *v;
            }
            let norm = norm.sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        rows
    }

    #[test]
    fn cost_single_label_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let visual = FeatureSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let labels = LabelSet::new(unit_rows(1, 4, &mut rng)).unwrap();
        let cost = build_cost(&visual, &labels, 0.5).unwrap();
        for v in cost.matrix().iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn cost_identical_labels_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let visual = FeatureSet::new(unit_rows(2, 4, &mut rng)).unwrap();
        let one = unit_rows(1, 4, &mut rng);
        let mut rows = Array2::zeros((4, 4));
        for mut r in rows.rows_mut() {
            r.assign(&one.row(0));
        }
        let labels = LabelSet::new(rows).unwrap();
        let cost = build_cost(&visual, &labels, 0.05).unwrap();
        for v in cost.matrix().iter() {
            assert_abs_diff_eq!(*v, 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn cost_matches_direct_formula_at_clip_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v_raw = unit_rows(3, 3, &mut rng);
        let l_raw = unit_rows(3, 3, &mut rng);
        let visual = FeatureSet::new(v_raw.clone()).unwrap();
        let labels = LabelSet::new(l_raw.clone()).unwrap();
        let tau = 0.01;
        let cost = build_cost(&visual, &labels, tau).unwrap();

        // Direct evaluation of the definition, per pair, including the
        // explicit exp-sum denominator (max-subtracted for the oracle too,
        // otherwise exp(1/0.01) overflows nothing here but loses accuracy).
        for k in 0..3 {
            let sims: Vec<f64> = (0..3)
                .map(|i| {
                    let dot: f64 = (0..3).map(|d| v_raw[[k, d]] * l_raw[[i, d]]).sum();
                    let nv: f64 = (0..3).map(|d| v_raw[[k, d]].powi(2)).sum::<f64>().sqrt();
                    let nl: f64 = (0..3).map(|d| l_raw[[i, d]].powi(2)).sum::<f64>().sqrt();
                    dot / (nv * nl)
                })
                .collect();
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| ((s - m) / tau).exp()).sum();
            for i in 0..3 {
                let expected = 1.0 - ((sims[i] - m) / tau).exp() / z;
                assert_abs_diff_eq!(cost.matrix()[[k, i]], expected, epsilon = 1e-12);
                assert!(cost.matrix()[[k, i]] > 0.0 && cost.matrix()[[k, i]] < 1.0);
            }
        }
    }

    #[test]
    fn cost_rows_of_one_minus_c_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let visual = FeatureSet::new(unit_rows(5, 6, &mut rng)).unwrap();
        let labels = LabelSet::new(unit_rows(4, 6, &mut rng)).unwrap();
        let cost = build_cost(&visual, &labels, 0.01).unwrap();
        for row in cost.matrix().rows() {
            let s: f64 = row.iter().map(|c| 1.0 - c).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn cost_invariant_to_similarity_shift() {
        // Adding a constant offset to every entry of a row in similarity
        // space cannot change the softmax; exercised via scaling one region
        // so all its cosines are unchanged (cosine is scale invariant).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = unit_rows(3, 4, &mut rng);
        let labels = LabelSet::new(unit_rows(4, 4, &mut rng)).unwrap();
        let scaled = {
            let mut s = rows.clone();
            for v in s.row_mut(1).iter_mut() {
                *v *= 7.5;
            }
            s
        };
        let c1 = build_cost(&FeatureSet::new(rows).unwrap(), &labels, 0.3).unwrap();
        let c2 = build_cost(&FeatureSet::new(scaled).unwrap(), &labels, 0.3).unwrap();
        assert_abs_diff_eq!(c1.matrix(), c2.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn lpd_identical_regions_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let one = unit_rows(1, 4, &mut rng);
        let mut rows = Array2::zeros((3, 4));
        for mut r in rows.rows_mut() {
            r.assign(&one.row(0));
        }
        let visual = FeatureSet::new(rows).unwrap();
        let labels = LabelSet::new(unit_rows(2, 4, &mut rng)).unwrap();
        let u = lpd_marginal(&visual, &labels, 0.01).unwrap();
        for w in u.weights().iter() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lpd_singleton_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let visual = FeatureSet::new(unit_rows(1, 4, &mut rng)).unwrap();
        let labels = LabelSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let u = lpd_marginal(&visual, &labels, 0.5).unwrap();
        assert_eq!(u.len(), 1);
        assert_abs_diff_eq!(u.weights()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn lpd_strongest_region_gets_most_mass() {
        // Region 1 aligns exactly with a label; the others are orthogonal
        // to every label, so region 1's max similarity is strictly largest.
        let visual = FeatureSet::new(array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0]
        ])
        .unwrap();
        let labels = LabelSet::new(array![[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let tau = 0.1;
        let u = lpd_marginal(&visual, &labels, tau).unwrap();
        // Direct evaluation: max sims are [0, 1, 0].
        let z = (0.0f64 / tau).exp() * 2.0 + (1.0f64 / tau).exp();
        assert_abs_diff_eq!(u.weights()[1], (1.0f64 / tau).exp() / z, epsilon = 1e-12);
        assert!(u.weights()[1] > u.weights()[0]);
        assert!(u.weights()[1] > u.weights()[2]);
        // Ordering matches the per-region max-similarity ordering.
        assert_abs_diff_eq!(u.weights()[0], u.weights()[2], epsilon = 1e-15);
    }

    #[test]
    fn lpd_invariant_under_label_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let visual = FeatureSet::new(unit_rows(4, 5, &mut rng)).unwrap();
        let l_raw = unit_rows(3, 5, &mut rng);
        let permuted = {
            let mut p = Array2::zeros((3, 5));
            p.row_mut(0).assign(&l_raw.row(2));
            p.row_mut(1).assign(&l_raw.row(0));
            p.row_mut(2).assign(&l_raw.row(1));
            p
        };
        let u1 = lpd_marginal(&visual, &LabelSet::new(l_raw).unwrap(), 0.05).unwrap();
        let u2 = lpd_marginal(&visual, &LabelSet::new(permuted).unwrap(), 0.05).unwrap();
        assert_eq!(u1.weights(), u2.weights());
    }

    #[test]
    fn teacher_all_positive_labels_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fv = FeatureSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let fl = LabelSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let y = LabelVector::new(vec![true, true, true]).unwrap();
        let teacher = teacher_plan(&fv, &fl, &y, 0.1).unwrap();
        let soft = row_softmax(&cosine_similarity_matrix(&fv, &fl).unwrap(), 0.1).unwrap();
        assert_eq!(teacher.matrix(), &soft);
        assert!(teacher.is_teacher());
    }

    #[test]
    fn teacher_all_negative_labels_is_constant_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fv = FeatureSet::new(unit_rows(2, 4, &mut rng)).unwrap();
        let fl = LabelSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let y = LabelVector::new(vec![false, false, false]).unwrap();
        let teacher = teacher_plan(&fv, &fl, &y, 0.1).unwrap();
        let soft = row_softmax(&cosine_similarity_matrix(&fv, &fl).unwrap(), 0.1).unwrap();
        let min = soft.iter().cloned().fold(f64::INFINITY, f64::min);
        for v in teacher.matrix().iter() {
            assert_eq!(*v, min);
        }
    }

    #[test]
    fn teacher_masks_only_negative_columns() {
        let fv = FeatureSet::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let fl = LabelSet::new(array![
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0]
        ])
        .unwrap();
        let y = LabelVector::new(vec![true, false, true]).unwrap();
        let tau = 0.2;
        let teacher = teacher_plan(&fv, &fl, &y, tau).unwrap();
        let soft = row_softmax(&cosine_similarity_matrix(&fv, &fl).unwrap(), tau).unwrap();
        let min = soft.iter().cloned().fold(f64::INFINITY, f64::min);
        for k in 0..2 {
            assert_eq!(teacher.matrix()[[k, 0]], soft[[k, 0]]);
            assert_eq!(teacher.matrix()[[k, 1]], min);
            assert_eq!(teacher.matrix()[[k, 2]], soft[[k, 2]]);
        }
        // Bounded by the unmasked plan's range.
        let max = soft.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in teacher.matrix().iter() {
            assert!(*v >= min && *v <= max);
        }
    }

    #[test]
    fn teacher_rejects_wrong_label_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fv = FeatureSet::new(unit_rows(2, 4, &mut rng)).unwrap();
        let fl = LabelSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let y = LabelVector::new(vec![true, false]).unwrap();
        assert!(teacher_plan(&fv, &fl, &y, 0.1).is_err());
    }

    #[test]
    fn transform_zero_lambda_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let visual = FeatureSet::new(unit_rows(3, 4, &mut rng)).unwrap();
        let labels = LabelSet::new(unit_rows(2, 4, &mut rng)).unwrap();
        let cost = build_cost(&visual, &labels, 0.1).unwrap();
        let teacher = TransportPlan::teacher(array![[0.1, 0.9], [0.4, 0.6], [0.5, 0.5]]).unwrap();
        let out = transform_cost(&cost, &teacher, 0.0).unwrap();
        for (a, b) in out.matrix().iter().zip(cost.matrix().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn transform_constant_teacher_is_constant_shift() {
        let cost = CostMatrix::new(array![[0.2, 0.8], [0.6, 0.4]]).unwrap();
        let p = 0.3;
        let teacher = TransportPlan::teacher(Array2::from_elem((2, 2), p)).unwrap();
        let lambda2 = 0.05;
        let out = transform_cost(&cost, &teacher, lambda2).unwrap();
        for (o, c) in out.matrix().iter().zip(cost.matrix().iter()) {
            assert_abs_diff_eq!(*o, c - lambda2 * p.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn transform_matches_elementwise_formula() {
        let cost = CostMatrix::new(array![[0.21, 0.74], [0.55, 0.13]]).unwrap();
        let teacher = TransportPlan::teacher(array![[0.42, 0.08], [0.33, 0.17]]).unwrap();
        let lambda2 = 0.05;
        let out = transform_cost(&cost, &teacher, lambda2).unwrap();
        for ((r, c), &v) in out.matrix().indexed_iter() {
            let expected = cost.matrix()[[r, c]] - lambda2 * teacher.matrix()[[r, c]].ln();
            assert_abs_diff_eq!(v, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn transform_rejects_shape_mismatch() {
        let cost = CostMatrix::new(array![[0.2, 0.8]]).unwrap();
        let teacher = TransportPlan::teacher(array![[0.5], [0.5]]).unwrap();
        assert!(transform_cost(&cost, &teacher, 0.05).is_err());
    }

    // The knowledge-constrained objective on (C, teacher) equals the plain
    // entropic objective on the transformed cost, for any strictly positive
    // plan. This identity is what makes the whole reduction sound.
    #[test]
    fn transform_preserves_objective_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let m = rng.random_range(1..6);
            let n = rng.random_range(1..6);
            let lambda1 = rng.random::<f64>() * 0.5 + 0.01;
            let lambda2 = rng.random::<f64>() * 0.3;
            let rand_pos = |rng: &mut ChaCha8Rng, lo: f64| {
                Array2::from_shape_fn((m, n), |_| rng.random::<f64>() * (1.0 - lo) + lo)
            };
            let p = rand_pos(&mut rng, 0.01);
            let c = CostMatrix::new(rand_pos(&mut rng, 0.0)).unwrap();
            let teacher = TransportPlan::teacher(rand_pos(&mut rng, 0.01)).unwrap();

            let transformed = transform_cost(&c, &teacher, lambda2).unwrap();

            let lhs = (&p * c.matrix()).sum() - lambda1 * entropy(&p)
                + lambda2 * kl_divergence(&p, teacher.matrix()).unwrap();
            let rhs = (&p * transformed.matrix()).sum() - (lambda1 + lambda2) * entropy(&p);
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                (lhs - rhs).abs() / scale < 1e-9,
                "identity violated: lhs={lhs} rhs={rhs}"
            );
        }
    }
}
