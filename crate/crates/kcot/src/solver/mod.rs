//! Entropic OT solvers: Sinkhorn scaling in standard and log domain, the
//! end-to-end knowledge-constrained solve, and exact combinatorial oracles
//! (min-cost flow, Hungarian assignment) used to validate them.

mod hungarian;
mod mincostflow;

pub use hungarian::{hungarian, Assignment};
pub use mincostflow::{exact_ot_oracle, ExactOtSolution};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::cost::{build_cost, lpd_marginal, teacher_plan, transform_cost};
use crate::types::{
    marginal_residual, CostMatrix, Error, FeatureSet, LabelSet, LabelVector, Marginal, Result,
    SolverConfig, TransportPlan,
};

/// Outcome of a Sinkhorn run: the plan, the diagnostics, and the final
/// diagonal scalings so the fixed-point structure can be checked.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub plan: TransportPlan,
    pub iterations_used: usize,
    pub final_marginal_residual: f64,
    pub converged: bool,
    pub scaling_row: Array1<f64>,
    pub scaling_col: Array1<f64>,
}

/// Shannon entropy of a nonnegative matrix, with 0·ln 0 taken as 0.
pub fn entropy(m: &Array2<f64>) -> f64 {
    -m.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Kullback-Leibler divergence Σ p·ln(p/q), with 0-mass cells contributing
/// nothing. Fails where p is positive but q is not.
pub fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            context: "kl divergence",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        if pv > 0.0 {
            if qv <= 0.0 {
                return Err(Error::LogDomainViolation {
                    context: "kl divergence reference",
                });
            }
            total += pv * (pv / qv).ln();
        } else if pv < 0.0 {
            return Err(Error::LogDomainViolation {
                context: "kl divergence argument",
            });
        }
    }
    Ok(total)
}

fn check_solver_shapes(cost: &CostMatrix, u: &Marginal, v: &Marginal) -> Result<()> {
    let (m, n) = cost.shape();
    if u.len() != m {
        return Err(Error::DimensionMismatch {
            context: "cost rows vs row marginal",
            left: m,
            right: u.len(),
        });
    }
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cost cols vs col marginal",
            left: n,
            right: v.len(),
        });
    }
    Ok(())
}

/// Sinkhorn iteration in the standard domain, exactly the multiplicative
/// update a = u/(K·b), b = v/(Kᵀ·a) on the Gibbs kernel K = exp(-C/λ),
/// starting from b = 1.
///
/// Convergence is declared when the max-norm violation of both marginal
/// constraints drops to `tol`; that check runs every iteration. When λ is
/// so small that a row or column of K underflows to zero, the solver
/// reports a regularization underflow instead of dividing by zero; the
/// log-domain variant handles that regime.
pub fn sinkhorn(
    cost: &CostMatrix,
    u: &Marginal,
    v: &Marginal,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SolveReport> {
    validate_sinkhorn_params(lambda, max_iter, tol)?;
    check_solver_shapes(cost, u, v)?;
    let kernel = cost.matrix().mapv(|c| (-c / lambda).exp());
    let row_dead = kernel
        .sum_axis(Axis(1))
        .iter()
        .any(|&s| s == 0.0 || !s.is_finite());
    let col_dead = kernel
        .sum_axis(Axis(0))
        .iter()
        .any(|&s| s == 0.0 || !s.is_finite());
    if row_dead || col_dead {
        return Err(Error::RegularizationUnderflow { lambda });
    }

    let uw = u.weights();
    let vw = v.weights();
    let mut a = Array1::<f64>::ones(uw.len());
    let mut b = Array1::<f64>::ones(vw.len());
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;

    for _ in 0..max_iter {
        iterations += 1;
        let kb = kernel.dot(&b);
        a = uw / &kb;
        let kta = kernel.t().dot(&a);
        b = vw / &kta;
        if !a.iter().all(|x| x.is_finite()) || !b.iter().all(|x| x.is_finite()) {
            return Err(Error::RegularizationUnderflow { lambda });
        }
        let plan = scaled_plan(&kernel, &a, &b);
        residual = marginal_residual(&plan, u, v);
        if residual <= tol {
            converged = true;
            break;
        }
    }

    let entries = scaled_plan(&kernel, &a, &b);
    let plan = TransportPlan::solved(entries, u.clone(), v.clone(), residual)?;
    Ok(SolveReport {
        plan,
        iterations_used: iterations,
        final_marginal_residual: residual,
        converged,
        scaling_row: a,
        scaling_col: b,
    })
}

/// Log-domain Sinkhorn: the same fixed point computed through dual
/// potentials and log-sum-exp, stable for small λ where exp(-C/λ)
/// underflows. Zero marginal entries map to -inf potentials and zero plan
/// rows, as in the standard domain.
pub fn sinkhorn_log(
    cost: &CostMatrix,
    u: &Marginal,
    v: &Marginal,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SolveReport> {
    validate_sinkhorn_params(lambda, max_iter, tol)?;
    check_solver_shapes(cost, u, v)?;
    let (m, n) = cost.shape();
    let c = cost.matrix();
    let log_u: Vec<f64> = u.weights().iter().map(|&w| w.ln()).collect();
    let log_v: Vec<f64> = v.weights().iter().map(|&w| w.ln()).collect();

    // f, g are scaled potentials: a = exp(f), b = exp(g).
    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;

    let build = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((m, n), |(k, i)| (f[k] + g[i] - c[[k, i]] / lambda).exp())
    };

    for _ in 0..max_iter {
        iterations += 1;
        for k in 0..m {
            let terms: Vec<f64> = (0..n).map(|i| g[i] - c[[k, i]] / lambda).collect();
            f[k] = log_u[k] - log_sum_exp(&terms);
        }
        for i in 0..n {
            let terms: Vec<f64> = (0..m).map(|k| f[k] - c[[k, i]] / lambda).collect();
            g[i] = log_v[i] - log_sum_exp(&terms);
        }
        let plan = build(&f, &g);
        residual = marginal_residual(&plan, u, v);
        if residual <= tol {
            converged = true;
            break;
        }
    }

    let entries = build(&f, &g);
    let plan = TransportPlan::solved(entries, u.clone(), v.clone(), residual)?;
    Ok(SolveReport {
        plan,
        iterations_used: iterations,
        final_marginal_residual: residual,
        converged,
        scaling_row: Array1::from_iter(f.iter().map(|x| x.exp())),
        scaling_col: Array1::from_iter(g.iter().map(|x| x.exp())),
    })
}

fn validate_sinkhorn_params(lambda: f64, max_iter: usize, tol: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be > 0, got {lambda}"),
        });
    }
    if max_iter == 0 {
        return Err(Error::InvalidParameter {
            name: "max_iter",
            reason: "must be positive".into(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: format!("must be > 0, got {tol}"),
        });
    }
    Ok(())
}

fn scaled_plan(kernel: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut plan = kernel.clone();
    for ((k, i), v) in plan.indexed_iter_mut() {
        *v *= a[k] * b[i];
    }
    plan
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Whether the run is a training solve (teacher knowledge available) or an
/// inference solve (label-presence marginal only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Train,
    Inference,
}

impl std::str::FromStr for SolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SolveMode::Train),
            "inference" => Ok(SolveMode::Inference),
            other => Err(Error::InvalidParameter {
                name: "mode",
                reason: format!("expected train|inference, got {other}"),
            }),
        }
    }
}

/// End-to-end knowledge-constrained solve.
///
/// Training composes the reversed-softmax cost, the teacher transform and
/// the label-presence marginal, then runs Sinkhorn at λ1+λ2 on the
/// transformed cost. Inference drops the teacher term entirely and runs at
/// λ1 on the untransformed cost; the label-presence marginal is kept.
/// Frozen features passed in train mode are used as-is; apply any locality
/// recovery to them beforehand.
pub fn solve_kcot(
    visual: &FeatureSet,
    labels: &LabelSet,
    frozen_visual: Option<&FeatureSet>,
    frozen_labels: Option<&LabelSet>,
    y: Option<&LabelVector>,
    cfg: &SolverConfig,
    mode: SolveMode,
) -> Result<SolveReport> {
    cfg.validate()?;
    let cost = build_cost(visual, labels, cfg.tau)?;
    let u = lpd_marginal(visual, labels, cfg.tau)?;
    let v = Marginal::uniform(labels.len())?;
    let (cost, lambda) = match mode {
        SolveMode::Inference => (cost, cfg.lambda1),
        SolveMode::Train => {
            let fv = frozen_visual.ok_or(Error::MissingTrainInput("frozen visual features"))?;
            let fl = frozen_labels.ok_or(Error::MissingTrainInput("frozen label features"))?;
            let y = y.ok_or(Error::MissingTrainInput("ground-truth label vector"))?;
            let teacher = teacher_plan(fv, fl, y, cfg.tau)?;
            let transformed = transform_cost(&cost, &teacher, cfg.lambda2)?;
            (transformed, cfg.lambda_tilde())
        }
    };
    run_sinkhorn(&cost, &u, &v, lambda, cfg)
}

/// Dispatches to the standard or log-domain kernel per configuration.
pub fn run_sinkhorn(
    cost: &CostMatrix,
    u: &Marginal,
    v: &Marginal,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if cfg.log_domain {
        sinkhorn_log(cost, u, v, lambda, cfg.max_iter, cfg.tol)
    } else {
        sinkhorn(cost, u, v, lambda, cfg.max_iter, cfg.tol)
    }
}

/// One independent problem instance for the batch API.
#[derive(Debug, Clone)]
pub struct KcotInstance {
    pub visual: FeatureSet,
    pub labels: LabelSet,
    pub frozen_visual: Option<FeatureSet>,
    pub frozen_labels: Option<LabelSet>,
    pub y: Option<LabelVector>,
}

/// Solves independent instances in parallel. Each solve is pure and
/// deterministic, and results come back in input order, so the output is
/// identical to a sequential loop.
pub fn solve_kcot_batch(
    instances: &[KcotInstance],
    cfg: &SolverConfig,
    mode: SolveMode,
) -> Vec<Result<SolveReport>> {
    instances
        .par_iter()
        .map(|inst| {
            solve_kcot(
                &inst.visual,
                &inst.labels,
                inst.frozen_visual.as_ref(),
                inst.frozen_labels.as_ref(),
                inst.y.as_ref(),
                cfg,
                mode,
            )
        })
        .collect()
}

/// The knowledge-constrained objective ⟨P,C⟩ − λ1·H(P) + λ2·KL(P‖teacher).
pub fn kcot_objective(
    plan: &TransportPlan,
    cost: &CostMatrix,
    teacher: &TransportPlan,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if plan.shape() != cost.shape() {
        return Err(Error::ShapeMismatch {
            context: "plan vs cost",
            expected: cost.shape(),
            got: plan.shape(),
        });
    }
    if plan.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            context: "plan vs teacher",
            expected: teacher.shape(),
            got: plan.shape(),
        });
    }
    let transport = (plan.matrix() * cost.matrix()).sum();
    let kl = if lambda2 == 0.0 {
        0.0
    } else {
        kl_divergence(plan.matrix(), teacher.matrix())?
    };
    Ok(transport - lambda1 * entropy(plan.matrix()) + lambda2 * kl)
}

/// Plain entropic objective ⟨P,C⟩ − λ·H(P) on whatever cost the plan was
/// solved against.
pub fn entropic_objective(plan: &TransportPlan, cost: &CostMatrix, lambda: f64) -> Result<f64> {
    if plan.shape() != cost.shape() {
        return Err(Error::ShapeMismatch {
            context: "plan vs cost",
            expected: cost.shape(),
            got: plan.shape(),
        });
    }
    Ok((plan.matrix() * cost.matrix()).sum() - lambda * entropy(plan.matrix()))
}
