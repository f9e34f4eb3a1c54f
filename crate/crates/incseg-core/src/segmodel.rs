//! Small trainable segmentation model: a three-layer convolutional feature
//! extractor plus a per-pixel linear classifier, with hand-written
//! backpropagation in f64.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Pixel-major (HWC) field of f64 values; used for images, features, and
/// logits alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax over channels; ties go to the lowest channel.
    pub fn argmax_map(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_pixels());
        for p in 0..self.num_pixels() {
            let row = &self.data[p * self.channels..(p + 1) * self.channels];
            let mut best = 0usize;
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
        out
    }
}

/// One 3x3, stride-1, zero-padded convolution layer. Weight layout is
/// `[out_ch][ky][kx][in_ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl ConvLayer {
    pub fn init(in_ch: usize, out_ch: usize, relu: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / (9 * in_ch) as f64).sqrt();
        let weights = (0..out_ch * 9 * in_ch).map(|_| rng.normal_with(0.0, std)).collect();
        Self { in_ch, out_ch, weights, bias: vec![0.0; out_ch], relu }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Full model: feature extractor layers plus the linear classifier whose
/// row `c` holds the weight vector for category `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<ConvLayer>,
    pub classifier: Matrix,
    pub classifier_bias: Option<Vec<f64>>,
    pub feature_dim: usize,
    pub stage: usize,
}

impl ModelParams {
    /// Fresh model: hidden conv layers with ReLU, a linear final conv
    /// producing `feature_dim` channels, and a small-Gaussian classifier.
    pub fn init(
        in_channels: usize,
        hidden: &[usize],
        feature_dim: usize,
        num_classes: usize,
        classifier_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for &ch in hidden {
            layers.push(ConvLayer::init(prev, ch, true, rng));
            prev = ch;
        }
        // final feature layer stays linear so features span all of R^D
        layers.push(ConvLayer::init(prev, feature_dim, false, rng));

        let mut classifier = Matrix::zeros(num_classes, feature_dim);
        for v in classifier.data_mut() {
            *v = rng.normal_with(0.0, 0.01);
        }
        let bias = classifier_bias.then(|| vec![0.0; num_classes]);
        Self { layers, classifier, classifier_bias: bias, feature_dim, stage: 1 }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn num_params(&self) -> usize {
        let conv: usize = self.layers.iter().map(ConvLayer::num_params).sum();
        conv + self.classifier.data().len()
            + self.classifier_bias.as_ref().map_or(0, Vec::len)
    }
}

fn conv_forward(input: &Field, layer: &ConvLayer) -> (Field, Field) {
    assert_eq!(input.channels, layer.in_ch, "channel mismatch");
    let (h, w) = (input.height, input.width);
    let mut pre = Field::zeros(h, w, layer.out_ch);
    for y in 0..h {
        for x in 0..w {
            for oc in 0..layer.out_ch {
                let mut acc = layer.bias[oc];
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let wrow = &layer.weights
                            [((oc * 3 + ky) * 3 + kx) * layer.in_ch..][..layer.in_ch];
                        let irow = input.pixel(sy as usize, sx as usize);
                        for ic in 0..layer.in_ch {
                            acc += wrow[ic] * irow[ic];
                        }
                    }
                }
                *pre.at_mut(y, x, oc) = acc;
            }
        }
    }
    let out = if layer.relu {
        let mut out = pre.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    } else {
        pre.clone()
    };
    (pre, out)
}

/// Per-layer activations retained for the backward pass.
pub struct ForwardCache {
    inputs: Vec<Field>,
    pre_acts: Vec<Field>,
    features: Field,
}

/// Gradients with the same shape as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layer_weights: Vec<Vec<f64>>,
    pub layer_bias: Vec<Vec<f64>>,
    pub classifier: Matrix,
    pub classifier_bias: Option<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            layer_weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            layer_bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            classifier: Matrix::zeros(params.classifier.rows(), params.classifier.cols()),
            classifier_bias: params.classifier_bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.layer_weights.iter_mut().zip(&other.layer_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.layer_bias.iter_mut().zip(&other.layer_bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.classifier.data_mut().iter_mut().zip(other.classifier.data()) {
            *x += y;
        }
        if let (Some(a), Some(b)) = (self.classifier_bias.as_mut(), other.classifier_bias.as_ref())
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.layer_weights {
            for v in w {
                *v *= s;
            }
        }
        for b in &mut self.layer_bias {
            for v in b {
                *v *= s;
            }
        }
        for v in self.classifier.data_mut() {
            *v *= s;
        }
        if let Some(b) = self.classifier_bias.as_mut() {
            for v in b {
                *v *= s;
            }
        }
    }
}

/// Apply a linear classifier to a feature field: per-pixel dot products of
/// features against each class weight row.
pub fn classify_features(features: &Field, classifier: &Matrix, bias: Option<&[f64]>) -> Field {
    let classes = classifier.rows();
    let dim = classifier.cols();
    assert_eq!(features.channels, dim, "feature dim mismatch");
    let mut logits = Field::zeros(features.height, features.width, classes);
    for p in 0..features.num_pixels() {
        let f = &features.data[p * dim..(p + 1) * dim];
        let out = &mut logits.data[p * classes..(p + 1) * classes];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = bias.map_or(0.0, |b| b[c]);
            let row = classifier.row(c);
            for d in 0..dim {
                acc += row[d] * f[d];
            }
            *o = acc;
        }
    }
    logits
}

fn classify(features: &Field, params: &ModelParams) -> Field {
    classify_features(features, &params.classifier, params.classifier_bias.as_deref())
}

/// Feature field and logit field for one image. Deterministic in inputs.
pub fn forward(image: &Field, params: &ModelParams) -> Result<(Field, Field)> {
    let (features, logits, _) = forward_impl(image, params, false)?;
    Ok((features, logits))
}

/// Forward pass that also retains activations for [`backward`].
pub fn forward_cached(image: &Field, params: &ModelParams) -> Result<(Field, ForwardCache)> {
    let (_, logits, cache) = forward_impl(image, params, true)?;
    Ok((logits, cache.expect("cache requested")))
}

fn forward_impl(
    image: &Field,
    params: &ModelParams,
    keep_cache: bool,
) -> Result<(Field, Field, Option<ForwardCache>)> {
    let first = params.layers.first().expect("at least one layer");
    if image.channels != first.in_ch {
        return Err(Error::DimMismatch(format!(
            "image has {} channels, extractor expects {}",
            image.channels, first.in_ch
        )));
    }
    let mut inputs = Vec::new();
    let mut pre_acts = Vec::new();
    let mut current = image.clone();
    for layer in &params.layers {
        let (pre, out) = conv_forward(&current, layer);
        if keep_cache {
            inputs.push(current);
            pre_acts.push(pre);
        }
        current = out;
    }
    let features = current;
    let logits = classify(&features, params);
    let cache = keep_cache.then(|| ForwardCache {
        inputs,
        pre_acts,
        features: features.clone(),
    });
    Ok((features, logits, cache))
}

/// Backpropagate per-pixel logit gradients into parameter gradients.
/// Classifier row `c` receives `sum_p g_c(p) * f(p)`.
pub fn backward(
    logit_grads: &Field,
    cache: &ForwardCache,
    params: &ModelParams,
) -> Result<ModelGrads> {
    let classes = params.num_classes();
    if logit_grads.channels != classes {
        return Err(Error::DimMismatch(format!(
            "logit grads have {} channels, model has {classes} classes",
            logit_grads.channels
        )));
    }
    if logit_grads.num_pixels() != cache.features.num_pixels() {
        return Err(Error::DimMismatch("stale forward cache".into()));
    }
    let mut grads = ModelGrads::zeros(params);
    let dim = params.feature_dim;

    // classifier and feature gradients
    let mut dfeat = Field::zeros(cache.features.height, cache.features.width, dim);
    for p in 0..logit_grads.num_pixels() {
        let g = &logit_grads.data[p * classes..(p + 1) * classes];
        let f = &cache.features.data[p * dim..(p + 1) * dim];
        let df = &mut dfeat.data[p * dim..(p + 1) * dim];
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            let wrow = params.classifier.row(c);
            let grow = grads.classifier.row_mut(c);
            for d in 0..dim {
                grow[d] += gc * f[d];
                df[d] += gc * wrow[d];
            }
            if let Some(b) = grads.classifier_bias.as_mut() {
                b[c] += gc;
            }
        }
    }

    // convolution layers, last to first
    let mut dout = dfeat;
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let pre = &cache.pre_acts[idx];
        let input = &cache.inputs[idx];
        let (h, w) = (input.height, input.width);
        let mut dpre = dout;
        if layer.relu {
            for (v, p) in dpre.data.iter_mut().zip(&pre.data) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        let dw = &mut grads.layer_weights[idx];
        let db = &mut grads.layer_bias[idx];
        let mut din = Field::zeros(h, w, layer.in_ch);
        for y in 0..h {
            for x in 0..w {
                for oc in 0..layer.out_ch {
                    let g = dpre.at(y, x, oc);
                    if g == 0.0 {
                        continue;
                    }
                    db[oc] += g;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let base = ((oc * 3 + ky) * 3 + kx) * layer.in_ch;
                            let irow = input.pixel(sy as usize, sx as usize);
                            let dstart = (sy as usize * w + sx as usize) * layer.in_ch;
                            for ic in 0..layer.in_ch {
                                dw[base + ic] += g * irow[ic];
                                din.data[dstart + ic] += g * layer.weights[base + ic];
                            }
                        }
                    }
                }
            }
        }
        dout = din;
    }
    Ok(grads)
}

/// Initialization for classifier rows added at an incremental stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NewRowInit {
    /// Small Gaussian rows (sigma 1e-3).
    #[default]
    Gaussian,
    /// Copies of the background row, so each new category starts with the
    /// background's logit and the old background mass splits evenly.
    Background,
}

/// Copy a model into the next stage, appending freshly initialized
/// classifier rows for the new categories. Existing rows are preserved
/// bit-exactly.
pub fn extend_classifier(
    params: &ModelParams,
    new_categories: usize,
    init: NewRowInit,
    rng: &mut Rng,
) -> ModelParams {
    let old_rows = params.classifier.rows();
    let dim = params.feature_dim;
    let mut classifier = Matrix::zeros(old_rows + new_categories, dim);
    for r in 0..old_rows {
        classifier.row_mut(r).copy_from_slice(params.classifier.row(r));
    }
    for r in old_rows..old_rows + new_categories {
        match init {
            NewRowInit::Gaussian => {
                for v in classifier.row_mut(r) {
                    *v = rng.normal_with(0.0, 1e-3);
                }
            }
            NewRowInit::Background => {
                let bg = params.classifier.row(0).to_vec();
                classifier.row_mut(r).copy_from_slice(&bg);
            }
        }
    }
    let classifier_bias = params.classifier_bias.as_ref().map(|b| {
        let mut nb = b.clone();
        nb.extend(std::iter::repeat(0.0).take(new_categories));
        nb
    });
    ModelParams {
        layers: params.layers.clone(),
        classifier,
        classifier_bias,
        feature_dim: dim,
        stage: params.stage + 1,
    }
}

const MODEL_MAGIC: &[u8; 4] = b"ISMD";
const MODEL_VERSION: u32 = 1;

pub fn save_model(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(params, &mut w)
}

pub fn write_model<W: std::io::Write>(params: &ModelParams, w: &mut W) -> Result<()> {
    use crate::binio;
    binio::write_magic(w, MODEL_MAGIC, MODEL_VERSION)?;
    binio::write_u64(w, params.stage as u64)?;
    binio::write_u32(w, params.feature_dim as u32)?;
    binio::write_u32(w, params.layers.len() as u32)?;
    for layer in &params.layers {
        binio::write_u32(w, layer.in_ch as u32)?;
        binio::write_u32(w, layer.out_ch as u32)?;
        binio::write_u32(w, u32::from(layer.relu))?;
        binio::write_f64_slice(w, &layer.weights)?;
        binio::write_f64_slice(w, &layer.bias)?;
    }
    binio::write_u32(w, params.classifier.rows() as u32)?;
    binio::write_u32(w, params.classifier.cols() as u32)?;
    binio::write_f64_slice(w, params.classifier.data())?;
    match &params.classifier_bias {
        Some(bias) => {
            binio::write_u32(w, 1)?;
            binio::write_f64_slice(w, bias)?;
        }
        None => binio::write_u32(w, 0)?,
    }
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<ModelParams> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut r)
}

pub fn read_model<R: std::io::Read>(r: &mut R) -> Result<ModelParams> {
    use crate::binio;
    binio::check_magic(r, MODEL_MAGIC, MODEL_VERSION)?;
    let stage = binio::read_u64(r)? as usize;
    let feature_dim = binio::read_u32(r)? as usize;
    let n_layers = binio::read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_ch = binio::read_u32(r)? as usize;
        let out_ch = binio::read_u32(r)? as usize;
        let relu = binio::read_u32(r)? != 0;
        let weights = binio::read_f64_vec(r, out_ch * 9 * in_ch)?;
        let bias = binio::read_f64_vec(r, out_ch)?;
        layers.push(ConvLayer { in_ch, out_ch, weights, bias, relu });
    }
    let rows = binio::read_u32(r)? as usize;
    let cols = binio::read_u32(r)? as usize;
    let classifier = Matrix::from_vec(rows, cols, binio::read_f64_vec(r, rows * cols)?);
    let classifier_bias = if binio::read_u32(r)? != 0 {
        Some(binio::read_f64_vec(r, rows)?)
    } else {
        None
    };
    Ok(ModelParams { layers, classifier, classifier_bias, feature_dim, stage })
}

/// Which parameter groups receive updates during a training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask {
    pub update_extractor: bool,
    pub update_classifier: bool,
}

impl TrainMask {
    pub fn all() -> Self {
        Self { update_extractor: true, update_classifier: true }
    }

    pub fn classifier_only() -> Self {
        Self { update_extractor: false, update_classifier: true }
    }

    pub fn frozen() -> Self {
        Self { update_extractor: false, update_classifier: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;

    fn tiny_image(h: usize, w: usize, seed: u64) -> Field {
        let mut rng = Rng::new(seed);
        let mut img = Field::zeros(h, w, 3);
        for v in &mut img.data {
            *v = rng.f64_unit();
        }
        img
    }

    fn tiny_model(classes: usize, seed: u64) -> ModelParams {
        let mut rng = Rng::new(seed);
        ModelParams::init(3, &[4, 5], 6, classes, false, &mut rng)
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut model = tiny_model(3, 1);
        for v in model.classifier.data_mut() {
            *v = 0.0;
        }
        let (_, logits) = forward(&tiny_image(4, 4, 2), &model).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_classifier_reproduces_features() {
        let mut model = tiny_model(6, 3);
        model.classifier = Matrix::identity(6);
        let (features, logits) = forward(&tiny_image(5, 4, 4), &model).unwrap();
        assert_eq!(features.data, logits.data);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(3, 5);
        let img = tiny_image(6, 6, 6);
        let (_, a) = forward(&img, &model).unwrap();
        let (_, b) = forward(&img, &model).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_logit_grads_give_zero_param_grads() {
        let model = tiny_model(3, 7);
        let img = tiny_image(4, 4, 8);
        let (logits, cache) = forward_cached(&img, &model).unwrap();
        let grads = backward(
            &Field::zeros(logits.height, logits.width, logits.channels),
            &cache,
            &model,
        )
        .unwrap();
        assert!(grads.classifier.data().iter().all(|&v| v == 0.0));
        assert!(grads.layer_weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_pixel_classifier_grad_is_outer_product() {
        let model = tiny_model(3, 9);
        let img = tiny_image(1, 1, 10);
        let (logits, cache) = forward_cached(&img, &model).unwrap();
        let mut g = Field::zeros(1, 1, 3);
        *g.at_mut(0, 0, 1) = 2.5;
        let grads = backward(&g, &cache, &model).unwrap();
        let (features, _) = forward(&img, &model).unwrap();
        for d in 0..model.feature_dim {
            assert!((grads.classifier[(1, d)] - 2.5 * features.data[d]).abs() < 1e-14);
            assert_eq!(grads.classifier[(0, d)], 0.0);
        }
        let (h, w, c) = (logits.height, logits.width, logits.channels);
        assert_eq!((h, w, c), (1, 1, 3));
    }

    // full-model gradient check on a 4x4 image: scalar functional
    // L = sum_p sum_c (a_cp * z_cp + 0.5 * z_cp^2)
    #[test]
    fn whole_model_grads_match_finite_differences() {
        let model = tiny_model(3, 11);
        let img = tiny_image(4, 4, 12);
        let mut rng = Rng::new(13);
        let coeff: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.normal()).collect();

        let eval = |m: &ModelParams| -> f64 {
            let (_, logits) = forward(&img, m).unwrap();
            logits
                .data
                .iter()
                .zip(&coeff)
                .map(|(z, a)| a * z + 0.5 * z * z)
                .sum()
        };

        let (logits, cache) = forward_cached(&img, &model).unwrap();
        let mut lg = Field::zeros(4, 4, 3);
        for (i, v) in lg.data.iter_mut().enumerate() {
            *v = coeff[i] + logits.data[i];
        }
        let analytic = backward(&lg, &cache, &model).unwrap();

        let eps = 1e-5;
        let mut probe = model.clone();
        let mut checked = 0usize;
        // walk every parameter: conv weights, biases, classifier
        for li in 0..model.layers.len() {
            for wi in 0..model.layers[li].weights.len() {
                let orig = probe.layers[li].weights[wi];
                probe.layers[li].weights[wi] = orig + eps;
                let hi = eval(&probe);
                probe.layers[li].weights[wi] = orig - eps;
                let lo = eval(&probe);
                probe.layers[li].weights[wi] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                let err = rel_err(analytic.layer_weights[li][wi], fd);
                assert!(err < 1e-5, "layer {li} weight {wi}: rel err {err}");
                checked += 1;
            }
            for bi in 0..model.layers[li].bias.len() {
                let orig = probe.layers[li].bias[bi];
                probe.layers[li].bias[bi] = orig + eps;
                let hi = eval(&probe);
                probe.layers[li].bias[bi] = orig - eps;
                let lo = eval(&probe);
                probe.layers[li].bias[bi] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                assert!(rel_err(analytic.layer_bias[li][bi], fd) < 1e-5);
                checked += 1;
            }
        }
        for r in 0..3 {
            for d in 0..model.feature_dim {
                let orig = probe.classifier[(r, d)];
                probe.classifier[(r, d)] = orig + eps;
                let hi = eval(&probe);
                probe.classifier[(r, d)] = orig - eps;
                let lo = eval(&probe);
                probe.classifier[(r, d)] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                assert!(rel_err(analytic.classifier[(r, d)], fd) < 1e-5);
                checked += 1;
            }
        }
        assert_eq!(checked, model.num_params());
    }

    #[test]
    fn checkpoint_roundtrip_byte_exact() {
        let model = tiny_model(4, 30);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        let loaded = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded, model);
        let mut again = Vec::new();
        write_model(&loaded, &mut again).unwrap();
        assert_eq!(bytes, again);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'Z';
        assert!(read_model(&mut corrupt.as_slice()).is_err());
    }

    #[test]
    fn extend_preserves_old_rows_exactly() {
        let model = tiny_model(3, 20);
        let mut rng = Rng::new(21);
        let same = extend_classifier(&model, 0, NewRowInit::Gaussian, &mut rng);
        assert_eq!(same.classifier, model.classifier);
        assert_eq!(same.layers, model.layers);
        assert_eq!(same.stage, model.stage + 1);

        let grown = extend_classifier(&model, 2, NewRowInit::Gaussian, &mut rng);
        assert_eq!(grown.classifier.rows(), 5);
        for r in 0..3 {
            assert_eq!(grown.classifier.row(r), model.classifier.row(r));
        }
    }

    #[test]
    fn extended_model_predictions_match_on_prev_classes() {
        let model = tiny_model(3, 22);
        let mut rng = Rng::new(23);
        let grown = extend_classifier(&model, 2, NewRowInit::Gaussian, &mut rng);
        let img = tiny_image(5, 5, 24);
        let (_, old_logits) = forward(&img, &model).unwrap();
        let (_, new_logits) = forward(&img, &grown).unwrap();
        for p in 0..old_logits.num_pixels() {
            for c in 0..3 {
                let a = old_logits.data[p * 3 + c];
                let b = new_logits.data[p * 5 + c];
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn new_row_norms_are_small() {
        let mut model = tiny_model(3, 25);
        // give old rows realistic post-training norms
        for v in model.classifier.data_mut() {
            *v = 0.5;
        }
        let mut rng = Rng::new(26);
        let grown = extend_classifier(&model, 2, NewRowInit::Gaussian, &mut rng);
        let old_mean: f64 = (0..3)
            .map(|r| crate::numerics::norm2(grown.classifier.row(r)))
            .sum::<f64>()
            / 3.0;
        for r in 3..5 {
            let n = crate::numerics::norm2(grown.classifier.row(r));
            assert!(n <= 0.1 * old_mean, "new row norm {n} vs old mean {old_mean}");
        }
    }
}
