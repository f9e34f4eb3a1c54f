//! Feature rehearsal: per-category mean-feature memory, category-specific
//! rotation matrices parameterized by skew-symmetric matrices through the
//! Cayley map, and the alignment training that carries stored features from
//! one stage's feature space to the next.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::losses::CategoryPartition;
use crate::numerics::{dot, linear_solve, lu_det, norm2, softmax_subset, Matrix, Rng};
use crate::optim::AdamState;
use crate::parallel;
use crate::segmodel::{forward, Field, ModelParams};

/// Floor applied to vector norms before cosine normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Skew-symmetric matrix parameters for one category: the strict lower
/// triangle in row-major order. Parameter `k` at `(i, j)` (i > j) expands to
/// `S[i][j] = +theta_k`, `S[j][i] = -theta_k`, so `S = -S^T` holds by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewParams {
    dim: usize,
    params: Vec<f64>,
}

impl SkewParams {
    pub fn num_params(dim: usize) -> usize {
        dim * (dim - 1) / 2
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, params: vec![0.0; Self::num_params(dim)] }
    }

    pub fn from_vec(dim: usize, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), Self::num_params(dim));
        Self { dim, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut s = Matrix::zeros(self.dim, self.dim);
        let mut k = 0;
        for i in 1..self.dim {
            for j in 0..i {
                s[(i, j)] = self.params[k];
                s[(j, i)] = -self.params[k];
                k += 1;
            }
        }
        s
    }

    /// Lower-triangle extraction of `M[i][j] - M[j][i]`, the adjoint of
    /// [`Self::to_matrix`].
    pub fn from_matrix_grad(dim: usize, m: &Matrix) -> Self {
        let mut params = Vec::with_capacity(Self::num_params(dim));
        for i in 1..dim {
            for j in 0..i {
                params.push(m[(i, j)] - m[(j, i)]);
            }
        }
        Self { dim, params }
    }
}

/// Orthogonal matrix with determinant +1 produced by the Cayley map.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix(Matrix);

impl RotationMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.0.matvec(v)
    }

    pub fn identity(dim: usize) -> Self {
        Self(Matrix::identity(dim))
    }

    /// `max |R^T R - I|`, for invariant checks.
    pub fn orthogonality_defect(&self) -> f64 {
        let rtr = self.0.transpose().matmul(&self.0);
        let n = self.0.rows();
        let mut defect = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((rtr[(i, j)] - target).abs());
            }
        }
        defect
    }

    pub fn det(&self) -> f64 {
        lu_det(&self.0)
    }
}

/// Cayley transform `R = (I - S)(I + S)^{-1}`, evaluated as the solve
/// `(I + S) R = (I - S)` (the two factors commute). `I + S` is always
/// invertible for skew-symmetric `S`, so the solve cannot fail.
pub fn cayley(skew: &SkewParams) -> RotationMatrix {
    let d = skew.dim();
    let s = skew.to_matrix();
    let mut plus = Matrix::identity(d);
    let mut minus = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            plus[(i, j)] += s[(i, j)];
            minus[(i, j)] -= s[(i, j)];
        }
    }
    let r = linear_solve(&plus, &minus).expect("I + S is nonsingular for skew S");
    RotationMatrix(r)
}

/// Reverse-mode Cayley map: pull an upstream gradient w.r.t. `R` back to the
/// skew parameters. Uses `dR = -(I + R) dS (I + S)^{-1}`, so
/// `dL/dS = -(I + R)^T G (I - S)^{-1}`, evaluated with one solve against
/// `(I + S)` (the transpose of `I - S`).
pub fn cayley_backward(
    upstream: &Matrix,
    skew: &SkewParams,
    rot: &RotationMatrix,
) -> SkewParams {
    let d = skew.dim();
    let s = skew.to_matrix();
    let mut plus = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            plus[(i, j)] += s[(i, j)];
        }
    }
    // X = -(I + R)^T G
    let mut ir = rot.matrix().clone();
    for i in 0..d {
        ir[(i, i)] += 1.0;
    }
    let mut x = ir.transpose().matmul(upstream);
    for v in x.data_mut() {
        *v = -*v;
    }
    // grad_S = X (I - S)^{-1}  <=>  (I + S) grad_S^T = X^T
    let yt = linear_solve(&plus, &x.transpose()).expect("I + S is nonsingular");
    let grad_s = yt.transpose();
    SkewParams::from_matrix_grad(d, &grad_s)
}

/// Per-category feature store: up to `capacity` mean-feature rows per
/// category, tagged with the stage whose extractor produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMemory {
    dim: usize,
    capacity: usize,
    stage_tag: usize,
    rows: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl FeatureMemory {
    pub fn new(dim: usize, capacity: usize, stage_tag: usize) -> Self {
        Self { dim, capacity, stage_tag, rows: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stage_tag(&self) -> usize {
        self.stage_tag
    }

    pub fn set_stage_tag(&mut self, tag: usize) {
        self.stage_tag = tag;
    }

    pub fn categories(&self) -> Vec<usize> {
        self.rows.keys().copied().collect()
    }

    pub fn rows(&self, category: usize) -> &[Vec<f64>] {
        self.rows.get(&category).map_or(&[], Vec::as_slice)
    }

    pub fn num_rows(&self, category: usize) -> usize {
        self.rows(category).len()
    }

    pub fn is_full(&self, category: usize) -> bool {
        self.num_rows(category) >= self.capacity
    }

    /// Append a row unless the category is at capacity. Returns whether the
    /// row was stored.
    pub fn push_row(&mut self, category: usize, row: Vec<f64>) -> bool {
        assert_eq!(row.len(), self.dim);
        let rows = self.rows.entry(category).or_default();
        if rows.len() >= self.capacity {
            return false;
        }
        rows.push(row);
        true
    }

    /// All `(category, row)` items in category order, for the replay loss.
    pub fn items(&self) -> Vec<(usize, &[f64])> {
        let mut out = Vec::new();
        for (&c, rows) in &self.rows {
            for row in rows {
                out.push((c, row.as_slice()));
            }
        }
        out
    }

    /// Bytes charged to this memory at full capacity: `capacity * dim * 8`
    /// per stored category.
    pub fn account_bytes(&self) -> u64 {
        (self.rows.len() * self.capacity * self.dim * 8) as u64
    }

    /// Absorb another memory with the same dimensions and stage tag.
    /// Categories must not overlap.
    pub fn merge_from(&mut self, other: FeatureMemory) -> Result<()> {
        if other.dim != self.dim || other.capacity != self.capacity {
            return Err(Error::DimMismatch("memory layouts differ".into()));
        }
        if other.stage_tag != self.stage_tag {
            return Err(Error::Config(format!(
                "stage tag {} cannot merge into {}",
                other.stage_tag, self.stage_tag
            )));
        }
        for (c, rows) in other.rows {
            if self.rows.contains_key(&c) {
                return Err(Error::Config(format!("category {c} already memorized")));
            }
            self.rows.insert(c, rows);
        }
        Ok(())
    }
}

/// Harvest mean features for each of the stage's new categories, one row
/// per image containing that category, visiting images in a seeded shuffle
/// until each category holds `capacity` rows.
pub fn memorize_features(
    samples: &[crate::dataset::Sample],
    model: &ModelParams,
    part: &CategoryPartition,
    capacity: usize,
    rng: &mut Rng,
) -> Result<FeatureMemory> {
    let mut memory = FeatureMemory::new(model.feature_dim, capacity, part.stage());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);

    for &idx in &order {
        if part.new_ids().iter().all(|&c| memory.is_full(c)) {
            break;
        }
        let mask = &samples[idx].mask;
        let wanted: Vec<usize> = part
            .new_ids()
            .iter()
            .copied()
            .filter(|&c| !memory.is_full(c) && mask.iter().any(|&m| m as usize == c))
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let (features, _) = forward(&samples[idx].image, model)?;
        for c in wanted {
            let mut mean = vec![0.0; model.feature_dim];
            let mut count = 0usize;
            for (p, &m) in mask.iter().enumerate() {
                if m as usize == c {
                    let f = &features.data[p * model.feature_dim..(p + 1) * model.feature_dim];
                    for (acc, v) in mean.iter_mut().zip(f) {
                        *acc += v;
                    }
                    count += 1;
                }
            }
            for v in &mut mean {
                *v /= count as f64;
            }
            memory.push_row(c, mean);
        }
    }

    let uncovered: Vec<usize> = part
        .new_ids()
        .iter()
        .copied()
        .filter(|&c| memory.num_rows(c) == 0)
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::UncoveredCategories(uncovered));
    }
    Ok(memory)
}

/// Correlation of each position's feature with a category's stored rows:
/// `v(p) = sum_s relu(cos(f(p), m(s)))`, in `[0, S]`. Zero-norm vectors
/// contribute cosine 0.
pub fn correlation_scores(features: &Field, memory_rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = features.channels;
    let normalized: Vec<Option<Vec<f64>>> = memory_rows
        .iter()
        .map(|row| {
            let n = norm2(row);
            (n >= NORM_FLOOR).then(|| row.iter().map(|v| v / n).collect())
        })
        .collect();
    let mut scores = Vec::with_capacity(features.num_pixels());
    for p in 0..features.num_pixels() {
        let f = &features.data[p * dim..(p + 1) * dim];
        let fnorm = norm2(f);
        if fnorm < NORM_FLOOR {
            scores.push(0.0);
            continue;
        }
        let fhat: Vec<f64> = f.iter().map(|v| v / fnorm).collect();
        let mut v = 0.0;
        for row in normalized.iter().flatten() {
            let cos = dot(&fhat, row);
            if cos > 0.0 {
                v += cos;
            }
        }
        scores.push(v);
    }
    scores
}

/// Temperature-sharpened softmax over all positions of one image.
pub fn spatial_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = scores.iter().map(|v| tau * v).collect();
    let all: Vec<usize> = (0..scaled.len()).collect();
    softmax_subset(&scaled, &all).expect("non-empty image")
}

/// Attention-weighted prototypes of one category in the previous and current
/// feature spaces, sharing the same weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair {
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
}

pub fn prototypes(weights: &[f64], f_prev: &Field, f_curr: &Field) -> PrototypePair {
    assert_eq!(weights.len(), f_prev.num_pixels());
    assert_eq!(weights.len(), f_curr.num_pixels());
    let dim = f_prev.channels;
    let mut prev = vec![0.0; dim];
    let mut curr = vec![0.0; f_curr.channels];
    for (p, &w) in weights.iter().enumerate() {
        let fp = &f_prev.data[p * dim..(p + 1) * dim];
        for (acc, v) in prev.iter_mut().zip(fp) {
            *acc += w * v;
        }
        let fc = &f_curr.data[p * f_curr.channels..(p + 1) * f_curr.channels];
        for (acc, v) in curr.iter_mut().zip(fc) {
            *acc += w * v;
        }
    }
    PrototypePair { prev, curr }
}

/// Value and skew-parameter gradient of one loss term.
#[derive(Debug, Clone)]
pub struct TermResult {
    pub value: f64,
    pub grad: SkewParams,
}

fn outer_into(grad_rhat: &[f64], r_prev: &[f64]) -> Matrix {
    let d = grad_rhat.len();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = grad_rhat[i] * r_prev[j];
        }
    }
    m
}

/// Cosine misalignment of the rotated previous prototype against the
/// current one: `1 - cos(R r_prev, r_curr)`, in `[0, 2]`. Returns `None`
/// (category skipped) when either prototype has negligible norm.
pub fn fid_term(pair: &PrototypePair, skew: &SkewParams) -> Option<TermResult> {
    let rot = cayley(skew);
    fid_term_with_rot(pair, skew, &rot)
}

pub fn fid_term_with_rot(
    pair: &PrototypePair,
    skew: &SkewParams,
    rot: &RotationMatrix,
) -> Option<TermResult> {
    let rhat = rot.apply(&pair.prev);
    let rn = norm2(&rhat);
    let vn = norm2(&pair.curr);
    if rn < NORM_FLOOR || vn < NORM_FLOOR {
        crate::losses::note_numerical_warning();
        return None;
    }
    let cos = dot(&rhat, &pair.curr) / (rn * vn);
    let value = 1.0 - cos;
    // d(1 - cos)/d rhat = -(v_unit - cos * rhat_unit) / ||rhat||
    let grad_rhat: Vec<f64> = (0..rhat.len())
        .map(|i| -(pair.curr[i] / vn - cos * rhat[i] / rn) / rn)
        .collect();
    let upstream = outer_into(&grad_rhat, &pair.prev);
    let grad = cayley_backward(&upstream, skew, rot);
    Some(TermResult { value, grad })
}

/// Classifier-compatibility term: cross-entropy of the rotated prototype's
/// logits against its own category, under the frozen classifier. Gradients
/// flow only into the skew parameters through the rotated prototype.
pub fn reg_term(
    pair: &PrototypePair,
    skew: &SkewParams,
    rot: &RotationMatrix,
    classifier: &Matrix,
    category: usize,
) -> TermResult {
    let rhat = rot.apply(&pair.prev);
    let logits = classifier.matvec(&rhat);
    let all: Vec<usize> = (0..classifier.rows()).collect();
    let probs = softmax_subset(&logits, &all).expect("non-empty class set");
    let value = -probs[category].max(crate::losses::PROB_FLOOR).ln();
    let dim = rhat.len();
    let mut grad_rhat = vec![0.0; dim];
    for (c, &pc) in probs.iter().enumerate() {
        let coeff = pc - if c == category { 1.0 } else { 0.0 };
        let row = classifier.row(c);
        for d in 0..dim {
            grad_rhat[d] += coeff * row[d];
        }
    }
    let upstream = outer_into(&grad_rhat, &pair.prev);
    let grad = cayley_backward(&upstream, skew, rot);
    TermResult { value, grad }
}

/// Sum of fidelity terms over categories, with per-category skew gradients.
pub fn fid_loss(
    pairs: &BTreeMap<usize, PrototypePair>,
    skews: &BTreeMap<usize, SkewParams>,
) -> (f64, BTreeMap<usize, SkewParams>) {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (&c, pair) in pairs {
        let skew = &skews[&c];
        if let Some(term) = fid_term(pair, skew) {
            total += term.value;
            grads.insert(c, term.grad);
        }
    }
    (total, grads)
}

/// Sum of regularization terms over categories.
pub fn reg_loss(
    pairs: &BTreeMap<usize, PrototypePair>,
    skews: &BTreeMap<usize, SkewParams>,
    classifier: &Matrix,
) -> (f64, BTreeMap<usize, SkewParams>) {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (&c, pair) in pairs {
        let skew = &skews[&c];
        let rot = cayley(skew);
        let term = reg_term(pair, skew, &rot, classifier, c);
        total += term.value;
        grads.insert(c, term.grad);
    }
    (total, grads)
}

/// Alignment-training schedule for the rotation matrices.
#[derive(Debug, Clone, Copy)]
pub struct RotationTrainConfig {
    pub lambda_rot: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub poly_power: f64,
}

impl Default for RotationTrainConfig {
    fn default() -> Self {
        Self { lambda_rot: 0.5, epochs: 10, steps_per_epoch: 40, lr: 0.01, poly_power: 0.9 }
    }
}

/// Train one rotation per category against its prototype pair by Adam on
/// the blended fidelity/regularization objective, starting from the
/// identity (zero skew). Categories are independent and run in parallel;
/// results merge in category order.
pub fn train_rotations(
    pairs: &BTreeMap<usize, PrototypePair>,
    classifier: &Matrix,
    cfg: &RotationTrainConfig,
) -> BTreeMap<usize, SkewParams> {
    let categories: Vec<usize> = pairs.keys().copied().collect();
    let trained: Vec<(usize, SkewParams)> = parallel::map(&categories, |&c| {
        let pair = &pairs[&c];
        let dim = pair.prev.len();
        let mut skew = SkewParams::zeros(dim);
        let total_steps = cfg.epochs * cfg.steps_per_epoch;
        let mut adam = AdamState::new(skew.params().len());
        for step in 0..total_steps {
            let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64).powf(cfg.poly_power);
            let rot = cayley(&skew);
            let mut grad = vec![0.0; skew.params().len()];
            let mut any = false;
            if cfg.lambda_rot > 0.0 {
                if let Some(term) = fid_term_with_rot(pair, &skew, &rot) {
                    for (g, t) in grad.iter_mut().zip(term.grad.params()) {
                        *g += cfg.lambda_rot * t;
                    }
                    any = true;
                }
            }
            if cfg.lambda_rot < 1.0 {
                let term = reg_term(pair, &skew, &rot, classifier, c);
                for (g, t) in grad.iter_mut().zip(term.grad.params()) {
                    *g += (1.0 - cfg.lambda_rot) * t;
                }
                any = true;
            }
            if !any {
                break;
            }
            adam.step(skew.params_mut(), &grad, lr);
        }
        (c, skew)
    });
    trained.into_iter().collect()
}

/// Rotate every stored row by its category's matrix and advance the stage
/// tag. Errors when a stored category has no rotation.
pub fn rotate_memory(
    memory: &FeatureMemory,
    rotations: &BTreeMap<usize, RotationMatrix>,
) -> Result<FeatureMemory> {
    let mut out = FeatureMemory::new(memory.dim, memory.capacity, memory.stage_tag + 1);
    for (&c, rows) in &memory.rows {
        let rot = rotations.get(&c).ok_or(Error::MissingRotation(c))?;
        let rotated: Vec<Vec<f64>> = rows.iter().map(|row| rot.apply(row)).collect();
        out.rows.insert(c, rotated);
    }
    Ok(out)
}

const MEMORY_MAGIC: &[u8; 4] = b"IFMB";
const MEMORY_VERSION: u32 = 1;

pub fn save_memory(memory: &FeatureMemory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_memory(memory, &mut w)
}

pub fn write_memory<W: Write>(memory: &FeatureMemory, w: &mut W) -> Result<()> {
    binio::write_magic(w, MEMORY_MAGIC, MEMORY_VERSION)?;
    binio::write_u64(w, memory.stage_tag as u64)?;
    binio::write_u32(w, memory.dim as u32)?;
    binio::write_u32(w, memory.capacity as u32)?;
    binio::write_u32(w, memory.rows.len() as u32)?;
    for (&c, rows) in &memory.rows {
        binio::write_u32(w, c as u32)?;
        binio::write_u32(w, rows.len() as u32)?;
        for row in rows {
            binio::write_f64_slice(w, row)?;
        }
    }
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<FeatureMemory> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_memory(&mut r)
}

pub fn read_memory<R: Read>(r: &mut R) -> Result<FeatureMemory> {
    binio::check_magic(r, MEMORY_MAGIC, MEMORY_VERSION)?;
    let stage_tag = binio::read_u64(r)? as usize;
    let dim = binio::read_u32(r)? as usize;
    let capacity = binio::read_u32(r)? as usize;
    let n_categories = binio::read_u32(r)? as usize;
    let mut memory = FeatureMemory::new(dim, capacity, stage_tag);
    for _ in 0..n_categories {
        let c = binio::read_u32(r)? as usize;
        let n_rows = binio::read_u32(r)? as usize;
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            rows.push(binio::read_f64_vec(r, dim)?);
        }
        memory.rows.insert(c, rows);
    }
    Ok(memory)
}
