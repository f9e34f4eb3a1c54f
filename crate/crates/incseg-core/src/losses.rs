//! Per-pixel loss terms and their closed-form logit gradients.
//!
//! All terms operate on a [`PixelContext`] (current logits, previous-model
//! probabilities, label) under a [`CategoryPartition`] splitting the dense
//! category ids into previously-learned and newly-added sets. Gradients are
//! returned alongside values so training needs no autodiff; every closed form
//! here is certified against central finite differences by the `gradcheck`
//! module.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_subset, Matrix};

/// Probability floor applied inside logarithms. Guards against -inf while
/// incrementing the numerical warning counter.
pub const PROB_FLOOR: f64 = 1e-300;

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

fn clamped_ln(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Number of numerical warnings (probability clamps, skipped degenerate
/// terms) recorded since start or last reset.
pub fn warning_count() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

/// Record a numerical warning from another module.
pub fn note_numerical_warning() {
    CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
}

pub fn reset_warning_count() {
    CLAMP_WARNINGS.store(0, Ordering::Relaxed);
}

/// Disjoint previous/new category sets for one stage. Ids are dense in
/// `[0, num_all)`; id 0 is the background and sits in `prev` for every
/// incremental stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryPartition {
    stage: usize,
    prev: Vec<usize>,
    new: Vec<usize>,
}

impl CategoryPartition {
    pub fn new(stage: usize, prev: Vec<usize>, new: Vec<usize>) -> Result<Self> {
        let n = prev.len() + new.len();
        let mut seen = vec![false; n];
        for &c in prev.iter().chain(new.iter()) {
            if c >= n {
                return Err(Error::Config(format!(
                    "category id {c} not dense in [0, {n})"
                )));
            }
            if seen[c] {
                return Err(Error::Config(format!("category id {c} repeated")));
            }
            seen[c] = true;
        }
        Ok(Self { stage, prev, new })
    }

    /// Base-stage partition: no previous categories, ids `0..num_all` new.
    pub fn base(num_all: usize) -> Self {
        Self { stage: 1, prev: Vec::new(), new: (0..num_all).collect() }
    }

    /// Incremental partition: previous ids `0..num_prev`, new ids up to
    /// `num_all`.
    pub fn incremental(stage: usize, num_prev: usize, num_all: usize) -> Self {
        Self {
            stage,
            prev: (0..num_prev).collect(),
            new: (num_prev..num_all).collect(),
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn prev(&self) -> &[usize] {
        &self.prev
    }

    pub fn new_ids(&self) -> &[usize] {
        &self.new
    }

    pub fn num_all(&self) -> usize {
        self.prev.len() + self.new.len()
    }

    pub fn is_new(&self, c: usize) -> bool {
        self.new.contains(&c)
    }

    pub fn is_prev(&self, c: usize) -> bool {
        self.prev.contains(&c)
    }

    pub fn has_background_in_prev(&self) -> bool {
        self.prev.contains(&0)
    }
}

/// One pixel's view: current logits over all categories, previous-model
/// probabilities over the previous categories (ordered like
/// `partition.prev()`), and the ground-truth label if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelContext {
    pub logits: Vec<f64>,
    pub prev_probs: Vec<f64>,
    pub label: Option<usize>,
}

impl PixelContext {
    /// A pixel is in the labeled region iff its label is one of the
    /// current stage's new categories.
    pub fn in_labeled_region(&self, part: &CategoryPartition) -> bool {
        self.label.is_some_and(|c| part.is_new(c))
    }
}

/// Loss value plus gradient w.r.t. the full logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossResult {
    pub fn zeros(n: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; n] }
    }

    pub fn add_scaled(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += weight * o;
        }
    }
}

/// Softmax over all categories and softmax restricted to previous
/// categories. The second vector is ordered like `part.prev()` and is empty
/// at the base stage.
pub fn dual_probs(ctx: &PixelContext, part: &CategoryPartition) -> (Vec<f64>, Vec<f64>) {
    let all: Vec<usize> = (0..part.num_all()).collect();
    let p = softmax_subset(&ctx.logits, &all).expect("non-empty category set");
    let q = if part.prev.is_empty() {
        Vec::new()
    } else {
        softmax_subset(&ctx.logits, &part.prev).expect("non-empty prev set")
    };
    (p, q)
}

/// Cross-entropy against the ground-truth label. Defined on labeled pixels
/// only.
pub fn ce_loss(ctx: &PixelContext, part: &CategoryPartition) -> Result<LossResult> {
    if !ctx.in_labeled_region(part) {
        return Err(Error::CeOffLabeledRegion);
    }
    let target = ctx.label.expect("labeled pixel");
    let (p, _) = dual_probs(ctx, part);
    let value = -clamped_ln(p[target]);
    let mut grad = p;
    grad[target] -= 1.0;
    Ok(LossResult { value, grad })
}

/// Distillation of the previous model's probabilities into the
/// previous-category softmax. Gradient is `q_c - prev_c` on previous
/// categories and zero on new ones (the restricted softmax never sees new
/// logits).
pub fn kd_loss(ctx: &PixelContext, part: &CategoryPartition) -> LossResult {
    let n = part.num_all();
    if part.prev.is_empty() {
        return LossResult::zeros(n);
    }
    let q = softmax_subset(&ctx.logits, &part.prev).expect("non-empty prev set");
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (slot, &c) in part.prev.iter().enumerate() {
        value -= ctx.prev_probs[slot] * clamped_ln(q[slot]);
        grad[c] = q[slot] - ctx.prev_probs[slot];
    }
    LossResult { value, grad }
}

/// Cross-entropy calibrated for unlabeled regions: labeled pixels behave
/// exactly like [`ce_loss`]; unlabeled pixels target the pooled probability
/// of all previous categories.
pub fn cce_loss(ctx: &PixelContext, part: &CategoryPartition) -> Result<LossResult> {
    if ctx.in_labeled_region(part) {
        return ce_loss(ctx, part);
    }
    let (p, q) = dual_probs(ctx, part);
    let pooled: f64 = part.prev.iter().map(|&c| p[c]).sum();
    let value = -clamped_ln(pooled);
    let mut grad = p;
    for (slot, &c) in part.prev.iter().enumerate() {
        grad[c] -= q[slot];
    }
    Ok(LossResult { value, grad })
}

/// Distillation calibrated for the background shift: previous non-background
/// probabilities are matched directly, while the previous background
/// probability is matched by the pooled probability of background plus new
/// categories.
pub fn ckd_loss(ctx: &PixelContext, part: &CategoryPartition) -> Result<LossResult> {
    if !part.has_background_in_prev() {
        return Err(Error::Config("CKD requires background in prev".into()));
    }
    let (p, _) = dual_probs(ctx, part);
    let n = part.num_all();

    // background-or-new index set, in id order
    let mut pooled_set: Vec<usize> = vec![0];
    pooled_set.extend_from_slice(&part.new);
    let pooled: f64 = pooled_set.iter().map(|&c| p[c]).sum();
    // p_c / pooled computed as a restricted softmax: stable when pooled
    // underflows
    let within = softmax_subset(&ctx.logits, &pooled_set).expect("non-empty set");

    let prev_bg_slot = part.prev.iter().position(|&c| c == 0).expect("bg in prev");
    let prev_bg = ctx.prev_probs[prev_bg_slot];

    let mut value = -prev_bg * clamped_ln(pooled);
    let mut grad = vec![0.0; n];
    for (slot, &c) in part.prev.iter().enumerate() {
        if c == 0 {
            continue;
        }
        value -= ctx.prev_probs[slot] * clamped_ln(p[c]);
        grad[c] = p[c] - ctx.prev_probs[slot];
    }
    let pooled_gap = pooled - prev_bg;
    for (slot, &c) in pooled_set.iter().enumerate() {
        grad[c] = pooled_gap * within[slot];
    }
    Ok(LossResult { value, grad })
}

/// Adaptive logit regularizer for unlabeled pixels: log-sum-exp of all
/// logits minus the previous-model-weighted average of previous-category
/// logits. Nonnegative, shift-invariant, zero-sum gradient.
pub fn ali_loss(ctx: &PixelContext, part: &CategoryPartition) -> Result<LossResult> {
    if ctx.in_labeled_region(part) {
        return Err(Error::AliOnLabeledRegion);
    }
    let (p, _) = dual_probs(ctx, part);
    let lse = log_sum_exp(&ctx.logits)?;
    let weighted: f64 = part
        .prev
        .iter()
        .zip(&ctx.prev_probs)
        .map(|(&c, &w)| w * ctx.logits[c])
        .sum();
    let value = lse - weighted;
    let mut grad = p;
    for (slot, &c) in part.prev.iter().enumerate() {
        grad[c] -= ctx.prev_probs[slot];
    }
    Ok(LossResult { value, grad })
}

/// Pseudo-label for a pixel: the ground-truth label when present, otherwise
/// the previous model's most likely previous category (ties broken by the
/// lowest id).
pub fn pseudo_label(ctx: &PixelContext, part: &CategoryPartition) -> usize {
    if let Some(c) = ctx.label {
        if part.is_new(c) {
            return c;
        }
    }
    argmax_prev(&ctx.prev_probs, part)
}

/// Most likely previous category under the previous model; ties go to the
/// lowest category id.
pub fn argmax_prev(prev_probs: &[f64], part: &CategoryPartition) -> usize {
    assert!(!part.prev.is_empty(), "argmax over empty prev set");
    let mut best_slot = 0;
    for slot in 1..prev_probs.len() {
        if prev_probs[slot] > prev_probs[best_slot] {
            best_slot = slot;
        }
    }
    part.prev[best_slot]
}

/// Focal loss against `target`, with focusing exponent `alpha`.
///
/// The gradient closed form, derived from the chain rule through the
/// softmax and verified against finite differences:
/// `grad_c = (1-u)^(alpha-1) * (alpha*u*ln(u) - (1-u)) * (1[c=target] - p_c)`
/// where `u = p_target`.
pub fn focal_loss(
    ctx: &PixelContext,
    part: &CategoryPartition,
    alpha: f64,
    target: usize,
) -> LossResult {
    let all: Vec<usize> = (0..part.num_all()).collect();
    let p = softmax_subset(&ctx.logits, &all).expect("non-empty category set");
    let u = p[target];
    let one_minus = 1.0 - u;
    if one_minus <= 0.0 {
        // perfect prediction: the focusing factor kills value and gradient
        return LossResult::zeros(part.num_all());
    }
    let log_u = clamped_ln(u);
    let value = -one_minus.powf(alpha) * log_u;
    let scale = one_minus.powf(alpha - 1.0) * (alpha * u * log_u - one_minus);
    let mut grad = Vec::with_capacity(p.len());
    for (c, &pc) in p.iter().enumerate() {
        let indicator = if c == target { 1.0 } else { 0.0 };
        grad.push(scale * (indicator - pc));
    }
    LossResult { value, grad }
}

/// Memory replay cross-entropy: each stored feature is classified against
/// all current class weights. Returns the mean over items and the gradient
/// w.r.t. the classifier weights (features are frozen).
///
/// The per-item denominator pairs the item's own feature with every class
/// weight; pairing each class weight with that class's features instead
/// would not define a per-item probability distribution, so that reading is
/// rejected.
#[derive(Debug, Clone)]
pub struct MemLossResult {
    pub value: f64,
    pub grad_weights: Matrix,
}

pub fn mem_loss(items: &[(usize, &[f64])], classifier: &Matrix) -> Result<MemLossResult> {
    if items.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let classes = classifier.rows();
    let dim = classifier.cols();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(classes, dim);
    for &(category, feature) in items {
        if category >= classes {
            return Err(Error::LabelOutOfRange { label: category, classes });
        }
        if feature.len() != dim {
            return Err(Error::DimMismatch(format!(
                "memory row has dim {}, classifier expects {dim}",
                feature.len()
            )));
        }
        let logits = classifier.matvec(feature);
        let all: Vec<usize> = (0..classes).collect();
        let p = softmax_subset(&logits, &all).expect("non-empty class set");
        value -= clamped_ln(p[category]);
        for (c, &pc) in p.iter().enumerate() {
            let coeff = pc - if c == category { 1.0 } else { 0.0 };
            for (d, &fd) in feature.iter().enumerate() {
                grad[(c, d)] += coeff * fd;
            }
        }
    }
    let scale = 1.0 / items.len() as f64;
    value *= scale;
    for g in grad.data_mut() {
        *g *= scale;
    }
    Ok(MemLossResult { value, grad_weights: grad })
}

/// First-step objective: cross-entropy plus distillation on labeled pixels,
/// adaptive logit regularization on unlabeled ones.
pub fn step1_objective(
    ctx: &PixelContext,
    part: &CategoryPartition,
    lambda_ali: f64,
    lambda_kd: f64,
) -> Result<LossResult> {
    if lambda_ali < 0.0 {
        return Err(Error::NegativeWeight("lambda_ali".into()));
    }
    if lambda_kd < 0.0 {
        return Err(Error::NegativeWeight("lambda_kd".into()));
    }
    if ctx.in_labeled_region(part) {
        let mut out = ce_loss(ctx, part)?;
        if lambda_kd > 0.0 && !part.prev.is_empty() {
            out.add_scaled(&kd_loss(ctx, part), lambda_kd);
        }
        Ok(out)
    } else {
        let mut out = LossResult::zeros(part.num_all());
        if lambda_ali > 0.0 {
            out.add_scaled(&ali_loss(ctx, part)?, lambda_ali);
        }
        Ok(out)
    }
}

/// Third-step objective over a set of pixels plus the per-batch memory
/// term. Pixel terms are averaged over the pixels where each is defined
/// (focal: everywhere, with pseudo-labels off the labeled region; the
/// regularizer: unlabeled pixels only).
#[derive(Debug, Clone)]
pub struct Step3Result {
    pub value: f64,
    pub pixel_grads: Vec<Vec<f64>>,
    pub classifier_grad: Matrix,
}

#[allow(clippy::too_many_arguments)]
pub fn step3_objective(
    pixels: &[PixelContext],
    part: &CategoryPartition,
    lambda_ali: f64,
    lambda_mem: f64,
    alpha: f64,
    memory_items: &[(usize, &[f64])],
    classifier: &Matrix,
) -> Result<Step3Result> {
    if lambda_ali < 0.0 {
        return Err(Error::NegativeWeight("lambda_ali".into()));
    }
    if lambda_mem < 0.0 {
        return Err(Error::NegativeWeight("lambda_mem".into()));
    }
    let n = part.num_all();
    let num_pixels = pixels.len().max(1);
    let num_unlabeled = pixels
        .iter()
        .filter(|ctx| !ctx.in_labeled_region(part))
        .count()
        .max(1);

    let mut value = 0.0;
    let mut pixel_grads = Vec::with_capacity(pixels.len());
    for ctx in pixels {
        let mut grad = vec![0.0; n];
        let target = pseudo_label(ctx, part);
        let fl = focal_loss(ctx, part, alpha, target);
        let fl_w = 1.0 / num_pixels as f64;
        value += fl_w * fl.value;
        for (g, f) in grad.iter_mut().zip(&fl.grad) {
            *g += fl_w * f;
        }
        if lambda_ali > 0.0 && !ctx.in_labeled_region(part) && !part.prev.is_empty() {
            let ali = ali_loss(ctx, part)?;
            let w = lambda_ali / num_unlabeled as f64;
            value += w * ali.value;
            for (g, a) in grad.iter_mut().zip(&ali.grad) {
                *g += w * a;
            }
        }
        pixel_grads.push(grad);
    }

    let mut classifier_grad = Matrix::zeros(classifier.rows(), classifier.cols());
    if lambda_mem > 0.0 && !memory_items.is_empty() {
        let mem = mem_loss(memory_items, classifier)?;
        value += lambda_mem * mem.value;
        for (g, m) in classifier_grad.data_mut().iter_mut().zip(mem.grad_weights.data()) {
            *g += lambda_mem * m;
        }
    }
    Ok(Step3Result { value, pixel_grads, classifier_grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn part_12() -> CategoryPartition {
        // prev {0,1}, new {2}
        CategoryPartition::incremental(2, 2, 3)
    }

    fn ctx(logits: Vec<f64>, prev_probs: Vec<f64>, label: Option<usize>) -> PixelContext {
        PixelContext { logits, prev_probs, label }
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn dual_probs_uniform() {
        let (p, q) = dual_probs(&ctx(vec![0.0; 3], vec![0.5, 0.5], None), &part_12());
        for v in &p {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
        for v in &q {
            assert_close(*v, 0.5, 1e-15);
        }
    }

    #[test]
    fn dual_probs_q_exceeds_p() {
        let (p, q) = dual_probs(&ctx(vec![1.0, 0.0, 2.0], vec![0.5, 0.5], None), &part_12());
        assert_close(q[0], 0.731059, 1e-6);
        assert_close(p[0], 0.244728, 1e-6);
        assert!(q[0] > p[0] && q[1] > p[1]);
    }

    #[test]
    fn dual_probs_no_new_categories_collapses() {
        let part = CategoryPartition::new(2, vec![0, 1], vec![]).unwrap();
        let (p, q) = dual_probs(&ctx(vec![0.3, -0.7], vec![0.5, 0.5], None), &part);
        assert_eq!(p, q);
    }

    #[test]
    fn ce_matches_hand_values() {
        // logits chosen so softmax is [0.25, 0.25, 0.5]
        let logits = vec![0.25f64.ln(), 0.25f64.ln(), 0.5f64.ln()];
        let out = ce_loss(&ctx(logits, vec![0.5, 0.5], Some(2)), &part_12()).unwrap();
        assert_close(out.value, std::f64::consts::LN_2, 1e-12);
        assert_close(out.grad[2], -0.5, 1e-12);

        let out = ce_loss(&ctx(vec![0.0; 3], vec![0.5, 0.5], Some(2)), &part_12()).unwrap();
        assert_close(out.grad[0], 1.0 / 3.0, 1e-12);
        assert_close(out.grad[1], 1.0 / 3.0, 1e-12);
        assert_close(out.grad[2], -2.0 / 3.0, 1e-12);
    }

    #[test]
    fn ce_perfect_prediction_is_flat() {
        let out = ce_loss(&ctx(vec![-60.0, -60.0, 0.0], vec![0.5, 0.5], Some(2)), &part_12())
            .unwrap();
        assert!(out.value < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ce_rejects_unlabeled() {
        let err = ce_loss(&ctx(vec![0.0; 3], vec![0.5, 0.5], None), &part_12()).unwrap_err();
        assert_eq!(err.to_string(), "CE defined on R_new only");
    }

    #[test]
    fn kd_matches_hand_values() {
        // equal prev logits give q = [0.5, 0.5]
        let out = kd_loss(&ctx(vec![0.0, 0.0, 3.0], vec![0.6, 0.4], None), &part_12());
        assert_close(out.value, std::f64::consts::LN_2, 1e-12);
        assert_close(out.grad[0], -0.1, 1e-12);
        assert_close(out.grad[1], 0.1, 1e-12);
        assert_eq!(out.grad[2], 0.0);
    }

    #[test]
    fn kd_fixed_point_and_new_scope() {
        let logits = vec![1.2, -0.3, 5.0];
        let q = softmax_subset(&logits, &[0, 1]).unwrap();
        let out = kd_loss(&ctx(logits, q, None), &part_12());
        assert!(out.grad[0].abs() < 1e-12 && out.grad[1].abs() < 1e-12);
        assert_eq!(out.grad[2], 0.0);
    }

    #[test]
    fn cce_labeled_equals_ce() {
        let c = ctx(vec![0.4, -1.0, 0.9], vec![0.7, 0.3], Some(2));
        let part = part_12();
        assert_eq!(cce_loss(&c, &part).unwrap(), ce_loss(&c, &part).unwrap());
    }

    #[test]
    fn cce_unlabeled_hand_values() {
        let out = cce_loss(&ctx(vec![0.0; 3], vec![0.5, 0.5], None), &part_12()).unwrap();
        assert_close(out.value, -(2.0f64 / 3.0).ln(), 1e-12);
        assert_close(out.grad[0], -1.0 / 6.0, 1e-12);
        assert_close(out.grad[1], -1.0 / 6.0, 1e-12);
        assert_close(out.grad[2], 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn cce_pooled_limit() {
        // new logit pushed to -30: pooled previous probability approaches 1
        let out = cce_loss(&ctx(vec![0.0, 0.0, -30.0], vec![0.5, 0.5], None), &part_12())
            .unwrap();
        assert!(out.value < 1e-12);
        assert!(out.grad[0].abs() < 1e-12 && out.grad[1].abs() < 1e-12);
    }

    #[test]
    fn ckd_hand_values() {
        let out = ckd_loss(&ctx(vec![0.0; 3], vec![0.6, 0.4], None), &part_12()).unwrap();
        assert_close(out.value, 0.682724, 1e-6);
        assert_close(out.grad[0], 0.0333333, 1e-6);
        assert_close(out.grad[1], -0.0666667, 1e-6);
        assert_close(out.grad[2], 0.0333333, 1e-6);
        let sum: f64 = out.grad.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn ckd_fixed_point() {
        // current probabilities [0.5, 0.4, 0.1]: pooled = 0.6 = prev bg,
        // non-bg prev matches exactly
        let logits = vec![0.5f64.ln(), 0.4f64.ln(), 0.1f64.ln()];
        let out = ckd_loss(&ctx(logits, vec![0.6, 0.4], None), &part_12()).unwrap();
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ckd_sign_property() {
        let mut rng = Rng::new(99);
        let part = part_12();
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..3).map(|_| rng.normal_with(0.0, 3.0)).collect();
            let a = rng.f64_range(0.05, 0.95);
            let prev = vec![a, 1.0 - a];
            let c = ctx(logits, prev.clone(), None);
            let (p, _) = dual_probs(&c, &part);
            let pooled = p[0] + p[2];
            let gap = pooled - prev[0];
            let out = ckd_loss(&c, &part).unwrap();
            for &cat in &[0usize, 2] {
                if p[cat] > 0.0 && gap.abs() > 1e-12 {
                    assert_eq!(out.grad[cat].signum(), gap.signum());
                }
            }
        }
    }

    #[test]
    fn ali_hand_values() {
        let out = ali_loss(&ctx(vec![0.0; 3], vec![0.7, 0.3], None), &part_12()).unwrap();
        assert_close(out.value, 3.0f64.ln(), 1e-12);
        assert_close(out.grad[0], -0.3666667, 1e-6);
        assert_close(out.grad[1], 0.0333333, 1e-6);
        assert_close(out.grad[2], 0.3333333, 1e-6);
    }

    #[test]
    fn ali_distillation_fixed_point() {
        // no new categories and matching probabilities: gradient vanishes
        let part = CategoryPartition::new(2, vec![0, 1], vec![]).unwrap();
        let logits = vec![0.8, -0.2];
        let p = softmax_subset(&logits, &[0, 1]).unwrap();
        let out = ali_loss(&ctx(logits, p, None), &part).unwrap();
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ali_shift_invariance() {
        let part = part_12();
        let base = ctx(vec![0.4, -1.2, 2.0], vec![0.55, 0.45], None);
        let shifted = ctx(
            base.logits.iter().map(|z| z + 7.5).collect(),
            base.prev_probs.clone(),
            None,
        );
        let a = ali_loss(&base, &part).unwrap();
        let b = ali_loss(&shifted, &part).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ali_rejects_labeled() {
        let err = ali_loss(&ctx(vec![0.0; 3], vec![0.5, 0.5], Some(2)), &part_12()).unwrap_err();
        assert_eq!(err.to_string(), "ALI defined off R_new only");
    }

    #[test]
    fn kd_vs_ckd_discrepancy() {
        // q matches the previous probabilities: KD is inert while CKD still
        // pushes previous non-bg logits up
        let logits = vec![0.9, -0.4, 1.5];
        let q = softmax_subset(&logits, &[0, 1]).unwrap();
        let c = ctx(logits, q, None);
        let part = part_12();
        let kd = kd_loss(&c, &part);
        let ckd = ckd_loss(&c, &part).unwrap();
        assert!(kd.grad[1].abs() < 1e-12);
        assert!(ckd.grad[1] < 0.0);
    }

    #[test]
    fn focal_hand_values() {
        let part = part_12();
        // p_target = 1 numerically
        let out = focal_loss(&ctx(vec![-80.0, -80.0, 0.0], vec![0.5, 0.5], None), &part, 2.0, 2);
        assert!(out.value < 1e-12);
        // logits chosen so p_target = 0.5
        let logits = vec![0.25f64.ln(), 0.25f64.ln(), 0.5f64.ln()];
        let p = softmax_subset(&logits, &[0, 1, 2]).unwrap();
        assert_close(p[2], 0.5, 1e-13);
        let out = focal_loss(&ctx(logits, vec![0.5, 0.5], None), &part, 2.0, 2);
        assert_close(out.value, 0.25 * std::f64::consts::LN_2, 1e-12);
    }

    #[test]
    fn focal_alpha_zero_is_ce() {
        let part = part_12();
        let c = ctx(vec![0.3, -0.8, 1.1], vec![0.5, 0.5], Some(2));
        let fl = focal_loss(&c, &part, 0.0, 2);
        let ce = ce_loss(&c, &part).unwrap();
        assert_close(fl.value, ce.value, 1e-12);
        for (a, b) in fl.grad.iter().zip(&ce.grad) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn pseudo_label_tie_breaks_low() {
        let part = part_12();
        let c = ctx(vec![0.0; 3], vec![0.5, 0.5], None);
        assert_eq!(pseudo_label(&c, &part), 0);
        let labeled = ctx(vec![0.0; 3], vec![0.5, 0.5], Some(2));
        assert_eq!(pseudo_label(&labeled, &part), 2);
    }

    #[test]
    fn mem_loss_hand_values() {
        // one feature of dim 1 producing logits [2, 0, 0]
        let w = Matrix::from_rows(&[vec![2.0], vec![0.0], vec![0.0]]);
        let feature = [1.0];
        let out = mem_loss(&[(0, &feature)], &w).unwrap();
        assert_close(out.value, (1.0 + 2.0 * (-2.0f64).exp()).ln(), 1e-12);

        // scaled weights drive the value to zero
        let w10 = Matrix::from_rows(&[vec![40.0], vec![0.0], vec![0.0]]);
        assert!(mem_loss(&[(0, &feature)], &w10).unwrap().value < 1e-12);

        // symmetric two-class geometry gives a uniform posterior
        let w2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mid = [0.5, 0.5];
        let out = mem_loss(&[(0, &mid), (1, &mid)], &w2).unwrap();
        assert_close(out.value, std::f64::consts::LN_2, 1e-12);
    }

    #[test]
    fn mem_loss_rejects_empty() {
        let w = Matrix::identity(2);
        assert!(matches!(mem_loss(&[], &w), Err(Error::EmptyMemory)));
    }

    #[test]
    fn step1_degenerate_forms() {
        let part = part_12();
        let labeled = ctx(vec![0.2, -0.5, 0.8], vec![0.6, 0.4], Some(2));
        let s1 = step1_objective(&labeled, &part, 1.0, 0.0).unwrap();
        assert_eq!(s1, ce_loss(&labeled, &part).unwrap());

        let unlabeled = ctx(vec![0.2, -0.5, 0.8], vec![0.6, 0.4], None);
        let s1 = step1_objective(&unlabeled, &part, 1.0, 1.0).unwrap();
        assert_eq!(s1, ali_loss(&unlabeled, &part).unwrap());
    }

    #[test]
    fn step1_is_linear_combination() {
        let part = part_12();
        let labeled = ctx(vec![0.2, -0.5, 0.8], vec![0.6, 0.4], Some(2));
        let s1 = step1_objective(&labeled, &part, 1.0, 1.0).unwrap();
        let ce = ce_loss(&labeled, &part).unwrap();
        let kd = kd_loss(&labeled, &part);
        assert_close(s1.value, ce.value + kd.value, 1e-12);
        for i in 0..3 {
            assert_close(s1.grad[i], ce.grad[i] + kd.grad[i], 1e-12);
        }
    }

    #[test]
    fn step1_rejects_negative_weights() {
        let part = part_12();
        let c = ctx(vec![0.0; 3], vec![0.5, 0.5], Some(2));
        assert!(step1_objective(&c, &part, -1.0, 0.0).is_err());
        assert!(step1_objective(&c, &part, 0.0, -0.5).is_err());
    }

    #[test]
    fn zero_sum_gradients() {
        let mut rng = Rng::new(1234);
        let part = part_12();
        for _ in 0..200 {
            let logits: Vec<f64> = (0..3).map(|_| rng.normal_with(0.0, 3.0)).collect();
            let a = rng.f64_range(0.05, 0.95);
            let prev = vec![a, 1.0 - a];
            let labeled = ctx(logits.clone(), prev.clone(), Some(2));
            let unlabeled = ctx(logits, prev, None);
            let sums = [
                ce_loss(&labeled, &part).unwrap().grad.iter().sum::<f64>(),
                cce_loss(&unlabeled, &part).unwrap().grad.iter().sum::<f64>(),
                ckd_loss(&unlabeled, &part).unwrap().grad.iter().sum::<f64>(),
                ali_loss(&unlabeled, &part).unwrap().grad.iter().sum::<f64>(),
                focal_loss(&unlabeled, &part, 2.0, 1).grad.iter().sum::<f64>(),
            ];
            for s in sums {
                assert!(s.abs() < 1e-10, "gradient sum {s}");
            }
        }
    }
}
