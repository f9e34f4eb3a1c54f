//! Independent certification of every analytic gradient.
//!
//! Two oracles per loss: central finite differences of the loss value, and
//! the closed-form per-category gradient rows coded here from scratch on a
//! naive (unshifted) softmax. Both must agree with the analytic gradients
//! within tolerance. Cases are sampled from derived per-case seeds, so any
//! failure is reproducible in isolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    ali_loss, ce_loss, cce_loss, ckd_loss, focal_loss, kd_loss, pseudo_label,
    CategoryPartition, PixelContext,
};
use crate::numerics::Rng;
use crate::parallel;
use crate::replay::{cayley, cayley_backward, SkewParams};

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central finite differences of `f` at `point`, one coordinate at a time.
pub fn fd_gradient<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!((1e-8..=1e-3).contains(&eps), "eps out of supported range");
    let mut grad = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let hi = f(&probe);
        probe[i] = point[i] - eps;
        let lo = f(&probe);
        probe[i] = point[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Config(format!(
                "non-finite loss evaluation while perturbing coordinate {i}"
            )));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Loss terms covered by the gradient certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossId {
    Ce,
    Kd,
    Cce,
    Ckd,
    Ali,
    Fl,
}

impl LossId {
    pub fn all() -> [LossId; 6] {
        [LossId::Ce, LossId::Kd, LossId::Cce, LossId::Ckd, LossId::Ali, LossId::Fl]
    }

    pub fn name(self) -> &'static str {
        match self {
            LossId::Ce => "ce",
            LossId::Kd => "kd",
            LossId::Cce => "cce",
            LossId::Ckd => "ckd",
            LossId::Ali => "ali",
            LossId::Fl => "fl",
        }
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossId::Ce),
            "kd" => Ok(LossId::Kd),
            "cce" => Ok(LossId::Cce),
            "ckd" => Ok(LossId::Ckd),
            "ali" => Ok(LossId::Ali),
            "fl" => Ok(LossId::Fl),
            other => Err(Error::Config(format!("unknown loss id '{other}'"))),
        }
    }
}

/// The sampled inputs of the worst-offending case, kept for replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstCase {
    pub case_seed: u64,
    pub num_prev: usize,
    pub num_new: usize,
    pub logits: Vec<f64>,
    pub prev_probs: Vec<f64>,
    pub label: Option<usize>,
    pub rel_err: f64,
}

/// Outcome of one certification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub loss_id: String,
    pub num_cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_err_fd: f64,
    pub max_rel_err_closed_form: f64,
    pub max_abs_err: f64,
    pub worst_case: Option<WorstCase>,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_fd.max(self.max_rel_err_closed_form)
    }
}

/// Random incremental partition with 2..=8 previous and 1..=4 new categories.
pub fn sample_partition(rng: &mut Rng) -> CategoryPartition {
    let num_prev = rng.usize_range(2, 9);
    let num_new = rng.usize_range(1, 5);
    CategoryPartition::incremental(2, num_prev, num_prev + num_new)
}

/// Random pixel context: logits ~ N(0, 3); previous-model probabilities from
/// normalized exponentials (flat Dirichlet), covering skewed distributions.
pub fn sample_context(
    rng: &mut Rng,
    part: &CategoryPartition,
    labeled: Option<bool>,
) -> PixelContext {
    let logits: Vec<f64> = (0..part.num_all()).map(|_| rng.normal_with(0.0, 3.0)).collect();
    let mut prev: Vec<f64> = (0..part.prev().len())
        .map(|_| -rng.f64_unit().max(1e-12).ln())
        .collect();
    let sum: f64 = prev.iter().sum();
    for w in &mut prev {
        *w /= sum;
    }
    let labeled = labeled.unwrap_or_else(|| rng.usize_below(2) == 1);
    let label = if labeled {
        let new = part.new_ids();
        Some(new[rng.usize_below(new.len())])
    } else {
        None
    };
    PixelContext { logits, prev_probs: prev, label }
}

const FL_ALPHA: f64 = 2.0;

fn eval_loss(id: LossId, ctx: &PixelContext, part: &CategoryPartition) -> (f64, Vec<f64>) {
    let out = match id {
        LossId::Ce => ce_loss(ctx, part).expect("sampled labeled"),
        LossId::Kd => kd_loss(ctx, part),
        LossId::Cce => cce_loss(ctx, part).expect("valid context"),
        LossId::Ckd => ckd_loss(ctx, part).expect("bg in prev"),
        LossId::Ali => ali_loss(ctx, part).expect("sampled unlabeled"),
        LossId::Fl => {
            let target = pseudo_label(ctx, part);
            focal_loss(ctx, part, FL_ALPHA, target)
        }
    };
    (out.value, out.grad)
}

/// Naive softmax, intentionally shift-free: the oracle path must not share
/// numerics with the implementation under test.
fn naive_softmax(logits: &[f64], subset: &[usize]) -> Vec<f64> {
    let exps: Vec<f64> = subset.iter().map(|&i| logits[i].exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient rows as printed in the source tables, evaluated independently.
fn closed_form_grad(id: LossId, ctx: &PixelContext, part: &CategoryPartition) -> Vec<f64> {
    let n = part.num_all();
    let all: Vec<usize> = (0..n).collect();
    let p = naive_softmax(&ctx.logits, &all);
    let q_list = if part.prev().is_empty() {
        Vec::new()
    } else {
        naive_softmax(&ctx.logits, part.prev())
    };
    let mut q = vec![0.0; n];
    let mut prev_full = vec![0.0; n];
    for (slot, &c) in part.prev().iter().enumerate() {
        q[c] = q_list[slot];
        prev_full[c] = ctx.prev_probs[slot];
    }
    let labeled = ctx.in_labeled_region(part);
    let mut grad = vec![0.0; n];
    match id {
        LossId::Ce | LossId::Cce if labeled => {
            let target = ctx.label.expect("labeled");
            for c in 0..n {
                grad[c] = if c == target { p[c] - 1.0 } else { p[c] };
            }
        }
        LossId::Ce => unreachable!("CE cases are sampled labeled"),
        LossId::Cce => {
            for c in 0..n {
                grad[c] = if part.is_prev(c) { p[c] - q[c] } else { p[c] };
            }
        }
        LossId::Kd => {
            for &c in part.prev() {
                grad[c] = q[c] - prev_full[c];
            }
        }
        LossId::Ckd => {
            let pooled: f64 = p[0] + part.new_ids().iter().map(|&c| p[c]).sum::<f64>();
            for c in 0..n {
                if c == 0 || part.is_new(c) {
                    grad[c] = (pooled - prev_full[0]) * p[c] / pooled;
                } else {
                    grad[c] = p[c] - prev_full[c];
                }
            }
        }
        LossId::Ali => {
            for c in 0..n {
                grad[c] = if part.is_prev(c) { p[c] - prev_full[c] } else { p[c] };
            }
        }
        LossId::Fl => {
            // independent chain-rule route: dL/du * du/dz_c
            let target = pseudo_label(ctx, part);
            let u = p[target];
            let dl_du =
                FL_ALPHA * (1.0 - u).powf(FL_ALPHA - 1.0) * u.ln() - (1.0 - u).powf(FL_ALPHA) / u;
            for c in 0..n {
                let indicator = if c == target { 1.0 } else { 0.0 };
                grad[c] = dl_du * u * (indicator - p[c]);
            }
        }
    }
    grad
}

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const FD_EPS: f64 = 1e-5;

/// Certify one loss over `num_cases` random contexts: analytic vs finite
/// differences and analytic vs the independent closed-form rows.
pub fn verify_table(id: LossId, num_cases: usize, seed: u64) -> GradReport {
    verify_table_with_eps(id, num_cases, seed, FD_EPS)
}

pub fn verify_table_with_eps(id: LossId, num_cases: usize, seed: u64, eps: f64) -> GradReport {
    assert!(num_cases >= 1);
    let root = Rng::new(seed);
    let labeled = match id {
        LossId::Ce => Some(true),
        LossId::Ali => Some(false),
        _ => None,
    };

    struct CaseOut {
        case_seed: u64,
        fd_err: f64,
        closed_err: f64,
        abs_err: f64,
        ctx: PixelContext,
        part_sizes: (usize, usize),
    }

    let cases: Vec<CaseOut> = parallel::map_indices(num_cases, |i| {
        let mut rng = root.derive(i as u64);
        let case_seed = rng.seed();
        let part = sample_partition(&mut rng);
        let ctx = sample_context(&mut rng, &part, labeled);
        let (_, analytic) = eval_loss(id, &ctx, &part);
        let fd = fd_gradient(
            |z| {
                let probe = PixelContext {
                    logits: z.to_vec(),
                    prev_probs: ctx.prev_probs.clone(),
                    label: ctx.label,
                };
                eval_loss(id, &probe, &part).0
            },
            &ctx.logits,
            eps,
        )
        .expect("finite loss");
        let closed = closed_form_grad(id, &ctx, &part);
        let mut fd_err = 0.0f64;
        let mut closed_err = 0.0f64;
        let mut abs_err = 0.0f64;
        for c in 0..part.num_all() {
            fd_err = fd_err.max(rel_err(analytic[c], fd[c]));
            closed_err = closed_err.max(rel_err(analytic[c], closed[c]));
            abs_err = abs_err
                .max((analytic[c] - fd[c]).abs())
                .max((analytic[c] - closed[c]).abs());
        }
        CaseOut {
            case_seed,
            fd_err,
            closed_err,
            abs_err,
            ctx,
            part_sizes: (part.prev().len(), part.new_ids().len()),
        }
    });

    let mut report = GradReport {
        loss_id: id.name().to_string(),
        num_cases,
        seed,
        tolerance: GRAD_TOLERANCE,
        max_rel_err_fd: 0.0,
        max_rel_err_closed_form: 0.0,
        max_abs_err: 0.0,
        worst_case: None,
        pass: false,
    };
    let mut worst = -1.0f64;
    for case in &cases {
        report.max_rel_err_fd = report.max_rel_err_fd.max(case.fd_err);
        report.max_rel_err_closed_form = report.max_rel_err_closed_form.max(case.closed_err);
        report.max_abs_err = report.max_abs_err.max(case.abs_err);
        let case_worst = case.fd_err.max(case.closed_err);
        if case_worst > worst {
            worst = case_worst;
            report.worst_case = Some(WorstCase {
                case_seed: case.case_seed,
                num_prev: case.part_sizes.0,
                num_new: case.part_sizes.1,
                logits: case.ctx.logits.clone(),
                prev_probs: case.ctx.prev_probs.clone(),
                label: case.ctx.label,
                rel_err: case_worst,
            });
        }
    }
    report.pass = report.max_rel_err() <= GRAD_TOLERANCE;
    report
}

pub const CAYLEY_GRAD_TOLERANCE: f64 = 1e-5;

/// Certify the reverse-mode Cayley map against finite differences over the
/// skew parameters, using random linear functionals of the rotation matrix.
pub fn verify_cayley_grad(dim: usize, num_cases: usize, seed: u64) -> GradReport {
    assert!((2..=64).contains(&dim), "dim out of supported range");
    let root = Rng::new(seed);

    let errs: Vec<(u64, f64, f64)> = parallel::map_indices(num_cases, |i| {
        let mut rng = root.derive(i as u64);
        let case_seed = rng.seed();
        let n_params = dim * (dim - 1) / 2;
        let theta: Vec<f64> = (0..n_params).map(|_| rng.normal()).collect();
        let upstream: Vec<f64> = (0..dim * dim).map(|_| rng.normal()).collect();

        let functional = |params: &[f64]| {
            let skew = SkewParams::from_vec(dim, params.to_vec());
            let rot = cayley(&skew);
            rot.matrix()
                .data()
                .iter()
                .zip(&upstream)
                .map(|(r, g)| r * g)
                .sum()
        };

        let skew = SkewParams::from_vec(dim, theta.clone());
        let rot = cayley(&skew);
        let mut upstream_mat = crate::numerics::Matrix::zeros(dim, dim);
        upstream_mat.data_mut().copy_from_slice(&upstream);
        let analytic = cayley_backward(&upstream_mat, &skew, &rot);
        let fd = fd_gradient(functional, &theta, 1e-6).expect("finite functional");

        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (a, f) in analytic.params().iter().zip(&fd) {
            max_rel = max_rel.max(rel_err(*a, *f));
            max_abs = max_abs.max((a - f).abs());
        }
        (case_seed, max_rel, max_abs)
    });

    let mut report = GradReport {
        loss_id: format!("cayley_d{dim}"),
        num_cases,
        seed,
        tolerance: CAYLEY_GRAD_TOLERANCE,
        max_rel_err_fd: 0.0,
        max_rel_err_closed_form: 0.0,
        max_abs_err: 0.0,
        worst_case: None,
        pass: false,
    };
    let mut worst = -1.0f64;
    for (case_seed, rel, abs) in errs {
        report.max_rel_err_fd = report.max_rel_err_fd.max(rel);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > worst {
            worst = rel;
            report.worst_case = Some(WorstCase {
                case_seed,
                num_prev: dim,
                num_new: 0,
                logits: Vec::new(),
                prev_probs: Vec::new(),
                label: None,
                rel_err: rel,
            });
        }
    }
    report.pass = report.max_rel_err_fd <= CAYLEY_GRAD_TOLERANCE;
    report
}
