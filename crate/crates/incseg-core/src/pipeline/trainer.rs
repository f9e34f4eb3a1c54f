//! Stage orchestration: base-stage supervised training, the incremental
//! three-step procedure (composite-loss training, rotation alignment with
//! feature memorization, classifier fine-tuning on replayed features), and
//! full-label evaluation.
//!
//! All randomness flows from one run stream through purpose-tagged derived
//! seeds, so repeated runs and different worker counts produce identical
//! results. The base stage is method-independent (plain supervised
//! cross-entropy), so one experiment trains it once per seed and shares it
//! across the method grid.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_scenario, Sample, Scenario};
use crate::error::Result;
use crate::losses::{self, CategoryPartition, PixelContext};
use crate::metrics::{iou_scores, ConfusionMatrix, IouReport, UNLABELED};
use crate::numerics::{softmax, Matrix, Rng};
use crate::optim::{poly_lr, sgd_step};
use crate::parallel;
use crate::pipeline::config::{BaseTerm, ExperimentConfig, KdKind, KdScope, MethodSpec};
use crate::replay::{
    cayley, correlation_scores, memorize_features, prototypes, rotate_memory, spatial_softmax,
    train_rotations, FeatureMemory, PrototypePair, RotationMatrix, RotationTrainConfig,
};
use crate::segmodel::{
    backward, classify_features, extend_classifier, forward, forward_cached, Field, ModelGrads,
    ModelParams, TrainMask,
};

const TAG_INIT: u64 = 0x11;
const TAG_EXTEND: u64 = 0x22;
const TAG_SHUFFLE: u64 = 0x33;
const TAG_MEMORIZE: u64 = 0x44;
const TAG_FINETUNE: u64 = 0x55;

/// Deterministic per-stage outcome written to the metric record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub method: String,
    pub seed_index: usize,
    pub stage: usize,
    pub num_classes: usize,
    pub metrics: IouReport,
    pub replay_categories: usize,
    pub replay_rotations: usize,
    pub replay_bytes: u64,
    /// Numerical warnings observed while computing this stage. The counter
    /// is process-wide, so the value is reproducible for a normal run (one
    /// experiment per process) but not when several experiments share a
    /// process concurrently.
    pub warnings: u64,
}

/// Wall-clock and loss diagnostics, kept apart from the metric records
/// because timings are not reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: String,
    pub seed_index: usize,
    pub stage: usize,
    pub seconds: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<StageRecord>,
    pub timings: Vec<TimingRecord>,
}

/// Loss plan for the first training step of a stage.
#[derive(Debug, Clone, Copy)]
struct Step1Plan {
    base: BaseTerm,
    lambda_ali: f64,
    lambda_kd: f64,
    kd_scope: KdScope,
    kd_kind: KdKind,
}

impl Step1Plan {
    fn base_stage() -> Self {
        Self {
            base: BaseTerm::Ce,
            lambda_ali: 0.0,
            lambda_kd: 0.0,
            kd_scope: KdScope::Off,
            kd_kind: KdKind::Standard,
        }
    }

    fn for_method(method: &MethodSpec, cfg: &ExperimentConfig) -> Self {
        Self {
            base: method.base,
            lambda_ali: if method.ali { cfg.losses.lambda_ali } else { 0.0 },
            lambda_kd: if method.kd_scope == KdScope::Off { 0.0 } else { cfg.losses.lambda_kd },
            kd_scope: method.kd_scope,
            kd_kind: method.kd_kind,
        }
    }
}

/// Per-pixel weights for each term, derived from the batch-level counts of
/// the pixels where the term is defined.
#[derive(Debug, Clone, Copy, Default)]
struct TermWeights {
    base_labeled: f64,
    base_unlabeled: f64,
    kd_labeled: f64,
    kd_unlabeled: f64,
    ali: f64,
}

fn term_weights(plan: &Step1Plan, n_labeled: usize, n_unlabeled: usize, n_prev: usize) -> TermWeights {
    let mut w = TermWeights::default();
    let n_all = n_labeled + n_unlabeled;
    match plan.base {
        BaseTerm::Ce => {
            if n_labeled > 0 {
                w.base_labeled = 1.0 / n_labeled as f64;
            }
        }
        BaseTerm::Cce => {
            if n_all > 0 {
                w.base_labeled = 1.0 / n_all as f64;
                w.base_unlabeled = 1.0 / n_all as f64;
            }
        }
    }
    if n_prev > 0 {
        if plan.lambda_kd > 0.0 {
            match plan.kd_scope {
                KdScope::Off => {}
                KdScope::Labeled if n_labeled > 0 => {
                    w.kd_labeled = plan.lambda_kd / n_labeled as f64;
                }
                KdScope::Unlabeled if n_unlabeled > 0 => {
                    w.kd_unlabeled = plan.lambda_kd / n_unlabeled as f64;
                }
                KdScope::All if n_all > 0 => {
                    w.kd_labeled = plan.lambda_kd / n_all as f64;
                    w.kd_unlabeled = plan.lambda_kd / n_all as f64;
                }
                _ => {}
            }
        }
        if plan.lambda_ali > 0.0 && n_unlabeled > 0 {
            w.ali = plan.lambda_ali / n_unlabeled as f64;
        }
    }
    w
}

fn add_weighted(grad_out: &mut [f64], term: &losses::LossResult, weight: f64) -> f64 {
    for (g, t) in grad_out.iter_mut().zip(&term.grad) {
        *g += weight * t;
    }
    weight * term.value
}

fn pixel_step1(
    ctx: &PixelContext,
    part: &CategoryPartition,
    plan: &Step1Plan,
    w: &TermWeights,
    grad_out: &mut [f64],
) -> Result<f64> {
    let mut value = 0.0;
    if ctx.in_labeled_region(part) {
        if w.base_labeled > 0.0 {
            value += add_weighted(grad_out, &losses::ce_loss(ctx, part)?, w.base_labeled);
        }
        if w.kd_labeled > 0.0 {
            let term = match plan.kd_kind {
                KdKind::Standard => losses::kd_loss(ctx, part),
                KdKind::Calibrated => losses::ckd_loss(ctx, part)?,
            };
            value += add_weighted(grad_out, &term, w.kd_labeled);
        }
    } else {
        if w.base_unlabeled > 0.0 {
            value += add_weighted(grad_out, &losses::cce_loss(ctx, part)?, w.base_unlabeled);
        }
        if w.ali > 0.0 {
            value += add_weighted(grad_out, &losses::ali_loss(ctx, part)?, w.ali);
        }
        if w.kd_unlabeled > 0.0 {
            let term = match plan.kd_kind {
                KdKind::Standard => losses::kd_loss(ctx, part),
                KdKind::Calibrated => losses::ckd_loss(ctx, part)?,
            };
            value += add_weighted(grad_out, &term, w.kd_unlabeled);
        }
    }
    Ok(value)
}

fn pixel_context(
    logits: &Field,
    prev_probs: Option<&Vec<f64>>,
    mask: &[u8],
    p: usize,
    n_all: usize,
    n_prev: usize,
) -> PixelContext {
    let label = match mask[p] {
        UNLABELED => None,
        m => Some(m as usize),
    };
    PixelContext {
        logits: logits.data[p * n_all..(p + 1) * n_all].to_vec(),
        prev_probs: prev_probs
            .map(|v| v[p * n_prev..(p + 1) * n_prev].to_vec())
            .unwrap_or_default(),
        label,
    }
}

fn per_image_step1(
    model: &ModelParams,
    sample: &Sample,
    prev_probs: Option<&Vec<f64>>,
    part: &CategoryPartition,
    plan: &Step1Plan,
    w: &TermWeights,
) -> Result<(ModelGrads, f64)> {
    let (logits, cache) = forward_cached(&sample.image, model)?;
    let n_all = part.num_all();
    let n_prev = part.prev().len();
    let mut grad_field = Field::zeros(logits.height, logits.width, n_all);
    let mut value = 0.0;
    for p in 0..logits.num_pixels() {
        let ctx = pixel_context(&logits, prev_probs, &sample.mask, p, n_all, n_prev);
        let grad_out = &mut grad_field.data[p * n_all..(p + 1) * n_all];
        value += pixel_step1(&ctx, part, plan, w, grad_out)?;
    }
    let grads = backward(&grad_field, &cache, model)?;
    Ok((grads, value))
}

#[allow(clippy::too_many_arguments)]
fn train_step1(
    model: &mut ModelParams,
    samples: &[Sample],
    prev_probs: Option<&[Vec<f64>]>,
    part: &CategoryPartition,
    plan: &Step1Plan,
    epochs: usize,
    lr0: f64,
    batch_size: usize,
    poly_power: f64,
    rng_root: &Rng,
) -> Result<f64> {
    let n = samples.len();
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = epochs * batches_per_epoch;
    if total_steps == 0 {
        return Ok(0.0);
    }
    let n_prev = part.prev().len();
    let mut step = 0usize;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng_root.derive(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut n_labeled = 0usize;
            let mut n_unlabeled = 0usize;
            for &idx in chunk {
                for &m in &samples[idx].mask {
                    if m == UNLABELED {
                        n_unlabeled += 1;
                    } else {
                        n_labeled += 1;
                    }
                }
            }
            let w = term_weights(plan, n_labeled, n_unlabeled, n_prev);
            let model_ref = &*model;
            let outs: Vec<Result<(ModelGrads, f64)>> = parallel::map(chunk, |&idx| {
                per_image_step1(
                    model_ref,
                    &samples[idx],
                    prev_probs.map(|p| &p[idx]),
                    part,
                    plan,
                    &w,
                )
            });
            let mut total = ModelGrads::zeros(model);
            let mut batch_loss = 0.0;
            for out in outs {
                let (g, v) = out?;
                total.add(&g);
                batch_loss += v;
            }
            let lr = poly_lr(lr0, step, total_steps, poly_power);
            sgd_step(model, &total, lr, TrainMask::all());
            step += 1;
            epoch_loss += batch_loss;
        }
        last_epoch_loss = epoch_loss / batches_per_epoch as f64;
        trace(|| format!("step1 stage={} epoch={epoch} loss={last_epoch_loss:.5}", part.stage()));
    }
    Ok(last_epoch_loss)
}

/// Optional stderr diagnostics, enabled by setting `INCSEG_TRACE`.
fn trace(msg: impl Fn() -> String) {
    if std::env::var_os("INCSEG_TRACE").is_some() {
        eprintln!("[trace] {}", msg());
    }
}

/// Previous-model probabilities for every pixel of every sample, flattened
/// per image. The previous model's class set is exactly the current stage's
/// previous-category set.
fn cache_prev_probs(samples: &[Sample], prev_model: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let outs: Vec<Result<Vec<f64>>> = parallel::map(samples, |s| {
        let (_, logits) = forward(&s.image, prev_model)?;
        let classes = logits.channels;
        let mut probs = Vec::with_capacity(logits.num_pixels() * classes);
        for p in 0..logits.num_pixels() {
            let row = &logits.data[p * classes..(p + 1) * classes];
            probs.extend(softmax(row).expect("non-empty class set"));
        }
        Ok(probs)
    });
    outs.into_iter().collect()
}

#[allow(clippy::too_many_arguments)]
fn finetune_classifier(
    model: &mut ModelParams,
    samples: &[Sample],
    prev_probs: &[Vec<f64>],
    part: &CategoryPartition,
    memory: &FeatureMemory,
    cfg: &ExperimentConfig,
    rng_root: &Rng,
) -> Result<f64> {
    let n = samples.len();
    let batch_size = cfg.optim.batch_size;
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = cfg.optim.epochs_finetune * batches_per_epoch;
    if total_steps == 0 {
        return Ok(0.0);
    }
    // the extractor is frozen here, so features are computed once
    let features: Vec<Field> = parallel::map(samples, |s| {
        forward(&s.image, model).map(|(f, _)| f)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let items = memory.items();
    let n_all = part.num_all();
    let n_prev = part.prev().len();
    let alpha = cfg.losses.focal_alpha;
    let lambda_ali = cfg.losses.lambda_ali;
    let lambda_mem = cfg.losses.lambda_mem;

    let mut step = 0usize;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.optim.epochs_finetune {
        let mut order: Vec<usize> = (0..n).collect();
        rng_root.derive(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut n_unlabeled = 0usize;
            let mut n_pixels = 0usize;
            for &idx in chunk {
                n_pixels += samples[idx].mask.len();
                n_unlabeled += samples[idx].mask.iter().filter(|&&m| m == UNLABELED).count();
            }
            let w_fl = 1.0 / n_pixels as f64;
            let w_ali = if n_unlabeled > 0 && n_prev > 0 {
                lambda_ali / n_unlabeled as f64
            } else {
                0.0
            };
            let classifier = model.classifier.clone();
            let bias = model.classifier_bias.clone();
            let outs: Vec<Result<(Matrix, Vec<f64>, f64)>> = parallel::map(chunk, |&idx| {
                let feats = &features[idx];
                let logits = classify_features(feats, &classifier, bias.as_deref());
                let mut grad_w = Matrix::zeros(n_all, classifier.cols());
                let mut grad_b = vec![0.0; if bias.is_some() { n_all } else { 0 }];
                let mut value = 0.0;
                for p in 0..logits.num_pixels() {
                    let ctx = pixel_context(
                        &logits,
                        Some(&prev_probs[idx]),
                        &samples[idx].mask,
                        p,
                        n_all,
                        n_prev,
                    );
                    let mut pixel_grad = vec![0.0; n_all];
                    let target = losses::pseudo_label(&ctx, part);
                    let fl = losses::focal_loss(&ctx, part, alpha, target);
                    value += add_weighted(&mut pixel_grad, &fl, w_fl);
                    if w_ali > 0.0 && !ctx.in_labeled_region(part) {
                        let ali = losses::ali_loss(&ctx, part)?;
                        value += add_weighted(&mut pixel_grad, &ali, w_ali);
                    }
                    let f = feats.pixel(p / feats.width, p % feats.width);
                    for (c, &g) in pixel_grad.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = grad_w.row_mut(c);
                        for (d, &fd) in f.iter().enumerate() {
                            row[d] += g * fd;
                        }
                        if bias.is_some() {
                            grad_b[c] += g;
                        }
                    }
                }
                Ok((grad_w, grad_b, value))
            });
            let mut grads = ModelGrads::zeros(model);
            let mut batch_loss = 0.0;
            for out in outs {
                let (gw, gb, v) = out?;
                for (a, b) in grads.classifier.data_mut().iter_mut().zip(gw.data()) {
                    *a += b;
                }
                if let Some(bias_grad) = grads.classifier_bias.as_mut() {
                    for (a, b) in bias_grad.iter_mut().zip(&gb) {
                        *a += b;
                    }
                }
                batch_loss += v;
            }
            if lambda_mem > 0.0 && !items.is_empty() {
                let mem = losses::mem_loss(&items, &model.classifier)?;
                batch_loss += lambda_mem * mem.value;
                for (a, b) in grads.classifier.data_mut().iter_mut().zip(mem.grad_weights.data())
                {
                    *a += lambda_mem * b;
                }
            }
            let lr = poly_lr(cfg.optim.lr_finetune, step, total_steps, cfg.optim.poly_power);
            sgd_step(model, &grads, lr, TrainMask::classifier_only());
            step += 1;
            epoch_loss += batch_loss;
        }
        last_epoch_loss = epoch_loss / batches_per_epoch as f64;
    }
    Ok(last_epoch_loss)
}

/// Attention-weighted prototype pairs for every memorized category,
/// averaged with equal weight over the stage's images.
pub fn compute_prototype_pairs(
    samples: &[Sample],
    prev_model: &ModelParams,
    curr_model: &ModelParams,
    memory: &FeatureMemory,
    tau: f64,
    normalize_scores: bool,
) -> Result<BTreeMap<usize, PrototypePair>> {
    let categories = memory.categories();
    let per_image: Vec<Result<Vec<PrototypePair>>> = parallel::map(samples, |s| {
        let (f_prev, _) = forward(&s.image, prev_model)?;
        let (f_curr, _) = forward(&s.image, curr_model)?;
        let mut pairs = Vec::with_capacity(categories.len());
        for &c in &categories {
            let rows = memory.rows(c);
            let mut scores = correlation_scores(&f_prev, rows);
            if normalize_scores && !rows.is_empty() {
                let inv = 1.0 / rows.len() as f64;
                for v in &mut scores {
                    *v *= inv;
                }
            }
            let sigma = spatial_softmax(&scores, tau);
            pairs.push(prototypes(&sigma, &f_prev, &f_curr));
        }
        Ok(pairs)
    });

    let dim_prev = prev_model.feature_dim;
    let dim_curr = curr_model.feature_dim;
    let mut sums: BTreeMap<usize, PrototypePair> = categories
        .iter()
        .map(|&c| (c, PrototypePair { prev: vec![0.0; dim_prev], curr: vec![0.0; dim_curr] }))
        .collect();
    let count = samples.len() as f64;
    for image_pairs in per_image {
        let image_pairs = image_pairs?;
        for (&c, pair) in categories.iter().zip(&image_pairs) {
            let acc = sums.get_mut(&c).expect("category present");
            for (a, v) in acc.prev.iter_mut().zip(&pair.prev) {
                *a += v / count;
            }
            for (a, v) in acc.curr.iter_mut().zip(&pair.curr) {
                *a += v / count;
            }
        }
    }
    Ok(sums)
}

/// Full-label evaluation over the categories seen so far. Evaluation-mask
/// labels for categories not yet learned are skipped.
pub fn evaluate(
    model: &ModelParams,
    eval_samples: &[Sample],
    num_classes: usize,
    base_ids: &[usize],
    new_ids: &[usize],
) -> Result<IouReport> {
    let confs: Vec<Result<ConfusionMatrix>> = parallel::map(eval_samples, |s| {
        let (_, logits) = forward(&s.image, model)?;
        let pred = logits.argmax_map();
        let gt: Vec<u8> = s
            .mask
            .iter()
            .map(|&m| if m != UNLABELED && (m as usize) < num_classes { m } else { UNLABELED })
            .collect();
        let mut conf = ConfusionMatrix::new(num_classes);
        conf.accumulate(&gt, &pred)?;
        Ok(conf)
    });
    let mut merged = ConfusionMatrix::new(num_classes);
    for conf in confs {
        merged.merge(&conf?);
    }
    Ok(iou_scores(&merged, base_ids, new_ids))
}

fn replay_accounting(
    memory: Option<&FeatureMemory>,
    rotations: usize,
) -> (usize, usize, u64) {
    match memory {
        None => (0, 0, 0),
        Some(m) => {
            let cats = m.categories().len();
            let dim = m.dim();
            let bytes = (cats * m.capacity() * dim * 8) as u64
                + (rotations * (dim * (dim - 1) / 2) * 8) as u64;
            (cats, rotations, bytes)
        }
    }
}

/// Run the full experiment grid: every configured seed and method over the
/// scenario, sharing the method-independent base stage within each seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    parallel::with_threads(cfg.threads, || run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let spec = cfg.scenario.spec();
    let scenario = generate_scenario(
        &spec,
        cfg.scenario.images_per_stage,
        cfg.scenario.eval_images,
        cfg.scenario.height,
        cfg.scenario.width,
    )?;
    let methods: Vec<MethodSpec> = cfg
        .methods
        .iter()
        .map(|m| MethodSpec::parse(m))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut timings = Vec::new();
    for seed_index in 0..cfg.seeds {
        let run_rng = Rng::new(cfg.seed).derive(seed_index as u64);

        let warn_before = losses::warning_count();
        let t0 = Instant::now();
        let (base_model, base_loss) = train_base_stage(&scenario, cfg, &run_rng)?;
        let base_part = spec.partition_of_stage(1);
        let base_ids: Vec<usize> = (0..base_part.num_all()).collect();
        let base_metrics = evaluate(
            &base_model,
            &scenario.eval.samples,
            base_part.num_all(),
            &base_ids,
            &[],
        )?;
        let base_seconds = t0.elapsed().as_secs_f64();
        let base_warnings = losses::warning_count() - warn_before;

        for method in &methods {
            run_method(
                &scenario,
                cfg,
                method,
                seed_index,
                &run_rng,
                &base_model,
                &base_metrics,
                base_warnings,
                &mut records,
                &mut timings,
            )?;
            timings.push(TimingRecord {
                method: method.name.clone(),
                seed_index,
                stage: 1,
                seconds: base_seconds,
                final_train_loss: base_loss,
            });
        }
    }
    Ok(ExperimentResult { records, timings })
}

fn train_base_stage(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    run_rng: &Rng,
) -> Result<(ModelParams, f64)> {
    let part = scenario.spec.partition_of_stage(1);
    let mut init_rng = run_rng.derive(TAG_INIT);
    let mut model = ModelParams::init(
        3,
        &cfg.model.hidden_channels,
        cfg.model.feature_dim,
        part.num_all(),
        cfg.model.classifier_bias,
        &mut init_rng,
    );
    let loss = train_step1(
        &mut model,
        &scenario.stages[0].samples,
        None,
        &part,
        &Step1Plan::base_stage(),
        cfg.optim.epochs_base,
        cfg.optim.lr_base,
        cfg.optim.batch_size,
        cfg.optim.poly_power,
        &run_rng.derive(TAG_SHUFFLE).derive(1),
    )?;
    Ok((model, loss))
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    seed_index: usize,
    run_rng: &Rng,
    base_model: &ModelParams,
    base_metrics: &IouReport,
    base_warnings: u64,
    records: &mut Vec<StageRecord>,
    timings: &mut Vec<TimingRecord>,
) -> Result<()> {
    let spec = &scenario.spec;
    let replay_active = method.replay && cfg.replay.capacity > 0;
    let num_base_classes = 1 + spec.base;
    let base_ids: Vec<usize> = (0..num_base_classes).collect();

    let mut model = base_model.clone();
    let mut memory: Option<FeatureMemory> = None;

    if replay_active {
        let part = spec.partition_of_stage(1);
        let mut mem_rng = run_rng.derive(TAG_MEMORIZE).derive(1);
        memory = Some(memorize_features(
            &scenario.stages[0].samples,
            &model,
            &part,
            cfg.replay.capacity,
            &mut mem_rng,
        )?);
    }
    let (cats, rots, bytes) = replay_accounting(memory.as_ref(), 0);
    records.push(StageRecord {
        method: method.name.clone(),
        seed_index,
        stage: 1,
        num_classes: num_base_classes,
        metrics: base_metrics.clone(),
        replay_categories: cats,
        replay_rotations: rots,
        replay_bytes: bytes,
        warnings: base_warnings,
    });

    for stage in 2..=spec.num_stages() {
        let warn_before = losses::warning_count();
        let t0 = Instant::now();
        let part = spec.partition_of_stage(stage);
        let stage_ds = &scenario.stages[stage - 1];

        let prev_model = model.clone();
        let mut ext_rng = run_rng.derive(TAG_EXTEND).derive(stage as u64);
        model = extend_classifier(
            &prev_model,
            part.new_ids().len(),
            cfg.model.new_row_init,
            &mut ext_rng,
        );

        let prev_probs = cache_prev_probs(&stage_ds.samples, &prev_model)?;

        let plan = Step1Plan::for_method(method, cfg);
        let mut train_loss = train_step1(
            &mut model,
            &stage_ds.samples,
            Some(&prev_probs),
            &part,
            &plan,
            cfg.optim.epochs_incremental,
            cfg.optim.lr_incremental,
            cfg.optim.batch_size,
            cfg.optim.poly_power,
            &run_rng.derive(TAG_SHUFFLE).derive(stage as u64),
        )?;

        let mut rotations_trained = 0usize;
        if replay_active {
            let mem = memory.as_mut().expect("replay memory present");

            // rotation alignment from the previous feature space to the
            // current one, per memorized category
            let pairs = compute_prototype_pairs(
                &stage_ds.samples,
                &prev_model,
                &model,
                mem,
                cfg.losses.tau,
                cfg.replay.normalize_scores,
            )?;
            let rot_cfg = RotationTrainConfig {
                lambda_rot: cfg.losses.lambda_rot,
                epochs: cfg.optim.epochs_rotation,
                steps_per_epoch: cfg.optim.rotation_steps_per_epoch,
                lr: cfg.optim.lr_rotation,
                poly_power: cfg.optim.poly_power,
            };
            let skews = train_rotations(&pairs, &model.classifier, &rot_cfg);
            let rotations: BTreeMap<usize, RotationMatrix> =
                skews.iter().map(|(&c, s)| (c, cayley(s))).collect();
            rotations_trained = rotations.len();

            // rotate stored features into the new space, fine-tune the
            // classifier on them, then memorize this stage's categories
            *mem = rotate_memory(mem, &rotations)?;
            train_loss = finetune_classifier(
                &mut model,
                &stage_ds.samples,
                &prev_probs,
                &part,
                mem,
                cfg,
                &run_rng.derive(TAG_FINETUNE).derive(stage as u64),
            )?;
            let mut mem_rng = run_rng.derive(TAG_MEMORIZE).derive(stage as u64);
            let fresh = memorize_features(
                &stage_ds.samples,
                &model,
                &part,
                cfg.replay.capacity,
                &mut mem_rng,
            )?;
            mem.merge_from(fresh)?;
        }

        let new_ids: Vec<usize> = (num_base_classes..part.num_all()).collect();
        let metrics = evaluate(
            &model,
            &scenario.eval.samples,
            part.num_all(),
            &base_ids,
            &new_ids,
        )?;
        let (cats, rots, bytes) = replay_accounting(memory.as_ref(), rotations_trained);
        records.push(StageRecord {
            method: method.name.clone(),
            seed_index,
            stage,
            num_classes: part.num_all(),
            metrics,
            replay_categories: cats,
            replay_rotations: rots,
            replay_bytes: bytes,
            warnings: losses::warning_count() - warn_before,
        });
        timings.push(TimingRecord {
            method: method.name.clone(),
            seed_index,
            stage,
            seconds: t0.elapsed().as_secs_f64(),
            final_train_loss: train_loss,
        });
    }
    Ok(())
}

/// Convenience wrapper used by tests and the bench suite: one method, one
/// seed, records returned without touching the filesystem.
pub fn run_single(cfg: &ExperimentConfig, method: &str) -> Result<Vec<StageRecord>> {
    let mut cfg = cfg.clone();
    cfg.methods = vec![method.to_string()];
    cfg.seeds = 1;
    Ok(run_experiment(&cfg)?.records)
}
