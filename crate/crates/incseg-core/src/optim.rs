//! Optimizers: vanilla SGD with the poly learning-rate schedule for model
//! training, Adam for the rotation parameters.

use crate::segmodel::{ModelGrads, ModelParams, TrainMask};

/// Poly schedule: `lr0 * (1 - step/total)^power`.
pub fn poly_lr(lr0: f64, step: usize, total_steps: usize, power: f64) -> f64 {
    assert!(step < total_steps, "step index past schedule end");
    lr0 * (1.0 - step as f64 / total_steps as f64).powf(power)
}

/// One SGD step `params <- params - lr * grads`, honoring the freeze mask.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelGrads, lr: f64, mask: TrainMask) {
    if mask.update_extractor {
        for (layer, (dw, db)) in params
            .layers
            .iter_mut()
            .zip(grads.layer_weights.iter().zip(&grads.layer_bias))
        {
            for (w, g) in layer.weights.iter_mut().zip(dw) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(db) {
                *b -= lr * g;
            }
        }
    }
    if mask.update_classifier {
        for (w, g) in params.classifier.data_mut().iter_mut().zip(grads.classifier.data()) {
            *w -= lr * g;
        }
        if let (Some(b), Some(gb)) = (params.classifier_bias.as_mut(), grads.classifier_bias.as_ref())
        {
            for (x, g) in b.iter_mut().zip(gb) {
                *x -= lr * g;
            }
        }
    }
}

/// Adam with bias correction over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::segmodel;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.5, 0, 10, 0.9), 0.5);
        let last = poly_lr(0.5, 9, 10, 0.9);
        assert!(last > 0.0 && last < 0.1);
        assert_eq!(poly_lr(1.0, 5, 10, 1.0), 0.5);
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let mut params = vec![1.0, -2.0, 3.0];
        let orig = params.clone();
        let mut adam = AdamState::new(3);
        for _ in 0..50 {
            adam.step(&mut params, &[0.0; 3], 0.1);
        }
        assert_eq!(params, orig);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // with constant gradient, bias correction makes the first update
        // lr * g / (|g| + eps) ~ lr * sign(g)
        let mut params = vec![0.0];
        let mut adam = AdamState::new(1);
        adam.step(&mut params, &[0.3], 0.01);
        assert!((params[0] + 0.01).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![0.5, -0.25];
            let mut adam = AdamState::new(2);
            for i in 0..20 {
                let g = [0.1 * (i as f64 % 3.0 - 1.0), -0.2];
                adam.step(&mut params, &g, 1e-2);
            }
            params
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sgd_respects_freeze_mask() {
        let mut rng = Rng::new(1);
        let model = segmodel::ModelParams::init(3, &[4], 5, 3, false, &mut rng);
        let mut grads = segmodel::ModelGrads::zeros(&model);
        for w in &mut grads.layer_weights {
            for v in w.iter_mut() {
                *v = 1.0;
            }
        }
        for v in grads.classifier.data_mut() {
            *v = 1.0;
        }

        let mut frozen = model.clone();
        sgd_step(&mut frozen, &grads, 0.1, TrainMask::frozen());
        assert_eq!(frozen, model);

        let mut cls_only = model.clone();
        sgd_step(&mut cls_only, &grads, 0.1, TrainMask::classifier_only());
        assert_eq!(cls_only.layers, model.layers);
        assert_ne!(cls_only.classifier, model.classifier);

        let mut all = model.clone();
        sgd_step(&mut all, &grads, 0.1, TrainMask::all());
        assert_ne!(all.layers, model.layers);
        assert_ne!(all.classifier, model.classifier);
    }
}
