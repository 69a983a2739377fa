//! Native linear/logistic classifier trained by mini-batch gradient
//! descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::seeds;

use super::{Loss, TrainHyperparams, TrainReport, WeightMap};

/// A multiclass linear classifier. Scores are `z_c = w_c . x + b_c`;
/// prediction is the argmax class with ties broken to the lowest id.
///
/// Weights live in two groups: `"coef"`, laid out class-major (class
/// `c`'s weights occupy `[c * n_features, (c+1) * n_features)`), and
/// `"bias"` of length `n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub n_features: usize,
    pub n_classes: usize,
    pub loss: Loss,
    pub weights: WeightMap,
}

impl LinearModel {
    /// Zero-initialized model; the deterministic default for sessions
    /// that do not supply an init file.
    pub fn zeros(n_features: usize, n_classes: usize, loss: Loss) -> Result<Self> {
        if n_features == 0 {
            return Err(FedError::Shape("n_features must be >= 1".into()));
        }
        if n_classes < 2 {
            return Err(FedError::Shape("n_classes must be >= 2".into()));
        }
        let mut weights = WeightMap::new();
        weights.insert("coef", vec![0.0; n_features * n_classes]);
        weights.insert("bias", vec![0.0; n_classes]);
        Ok(LinearModel { n_features, n_classes, loss, weights })
    }

    fn expected_shapes(&self) -> WeightMap {
        let mut w = WeightMap::new();
        w.insert("coef", vec![0.0; self.n_features * self.n_classes]);
        w.insert("bias", vec![0.0; self.n_classes]);
        w
    }

    /// Replaces the weights after checking shape compatibility and
    /// finiteness.
    pub fn set_weights(&mut self, weights: WeightMap) -> Result<()> {
        let expected = self.expected_shapes();
        if !expected.shape_compatible(&weights) {
            return Err(FedError::Shape(format!(
                "weight shapes {} do not match model {}",
                weights.shape_summary(),
                expected.shape_summary()
            )));
        }
        weights.validate_finite()?;
        self.weights = weights;
        Ok(())
    }

    fn coef(&self) -> &[f64] {
        self.weights.get("coef").expect("coef group present")
    }

    fn bias(&self) -> &[f64] {
        self.weights.get("bias").expect("bias group present")
    }

    /// Raw per-class scores for one row.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(FedError::Shape(format!(
                "row has {} features, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        let coef = self.coef();
        let bias = self.bias();
        Ok((0..self.n_classes)
            .map(|c| {
                let w = &coef[c * self.n_features..(c + 1) * self.n_features];
                w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + bias[c]
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean loss over the batch and its gradient with respect to every
    /// weight, in the same group layout as the weights themselves.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> Result<(f64, WeightMap)> {
        if batch.is_empty() {
            return Err(FedError::Shape("empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut g_coef = vec![0.0; self.n_features * self.n_classes];
        let mut g_bias = vec![0.0; self.n_classes];
        let mut total_loss = 0.0;

        for &(x, y) in batch {
            if y >= self.n_classes {
                return Err(FedError::Shape(format!(
                    "label {y} outside {} classes",
                    self.n_classes
                )));
            }
            let z = self.scores(x)?;
            // dz[c] = d(sample loss)/d z_c; shared accumulation below.
            let mut dz = vec![0.0; self.n_classes];
            match self.loss {
                Loss::Logistic => {
                    // Softmax cross-entropy via log-sum-exp for stability.
                    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum_exp: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
                    let log_sum = zmax + sum_exp.ln();
                    total_loss += log_sum - z[y];
                    for c in 0..self.n_classes {
                        let p = (z[c] - log_sum).exp();
                        dz[c] = p - if c == y { 1.0 } else { 0.0 };
                    }
                }
                Loss::Squared => {
                    // Sum of squared errors against the one-hot target.
                    for c in 0..self.n_classes {
                        let t = if c == y { 1.0 } else { 0.0 };
                        let d = z[c] - t;
                        total_loss += d * d;
                        dz[c] = 2.0 * d;
                    }
                }
            }
            for c in 0..self.n_classes {
                let row = &mut g_coef[c * self.n_features..(c + 1) * self.n_features];
                for (gf, &xf) in row.iter_mut().zip(x) {
                    *gf += dz[c] * xf;
                }
                g_bias[c] += dz[c];
            }
        }

        for g in g_coef.iter_mut().chain(g_bias.iter_mut()) {
            *g /= n;
        }
        let mut grad = WeightMap::new();
        grad.insert("coef", g_coef);
        grad.insert("bias", g_bias);
        Ok((total_loss / n, grad))
    }

    /// Mini-batch gradient descent over the dataset. Rows are shuffled
    /// each epoch with a seed derived from `(hp.seed, hp.epoch_offset +
    /// epoch)`, so a fixed seed reproduces identical weights. The trace
    /// records one mean per-sample loss per epoch, measured before each
    /// batch's update.
    pub fn fit(&mut self, ds: &Dataset, hp: &TrainHyperparams) -> Result<TrainReport> {
        hp.validate()?;
        if ds.is_empty() {
            return Err(FedError::Shape("cannot fit on an empty dataset".into()));
        }
        let rows = ds.numeric_rows()?;
        if rows[0].0.len() != self.n_features {
            return Err(FedError::Shape(format!(
                "dataset has {} features, model expects {}",
                rows[0].0.len(),
                self.n_features
            )));
        }
        if ds.schema.n_classes() != self.n_classes {
            return Err(FedError::Shape(format!(
                "dataset has {} classes, model expects {}",
                ds.schema.n_classes(),
                self.n_classes
            )));
        }

        let n = rows.len();
        let mut trace = Vec::with_capacity(hp.epochs as usize);
        for epoch in 0..hp.epochs as u64 {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix_index(
                hp.seed,
                hp.epoch_offset + epoch,
            ));
            idx.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for chunk in idx.chunks(hp.batch_size) {
                let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| rows[i]).collect();
                let (loss, grad) = self.loss_and_grad(&batch)?;
                loss_sum += loss * chunk.len() as f64;
                self.apply_step(&grad, hp.learning_rate)?;
            }
            let epoch_loss = loss_sum / n as f64;
            if !epoch_loss.is_finite() {
                return Err(FedError::Numeric(format!(
                    "loss diverged to {epoch_loss} at epoch {epoch}"
                )));
            }
            trace.push(epoch_loss);
        }
        Ok(TrainReport { loss_trace: trace, epochs_run: hp.epochs })
    }

    pub(super) fn from_json_body(v: &serde_json::Value) -> Result<LinearModel> {
        let get_usize = |key: &str| -> Result<usize> {
            v.get(key)
                .and_then(serde_json::Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| FedError::Format(format!("missing or invalid {key}")))
        };
        let loss_name = v
            .get("loss")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| FedError::Format("missing or invalid loss".into()))?;
        let loss = Loss::parse(loss_name).map_err(|e| FedError::Format(e.to_string()))?;
        let weights: WeightMap = serde_json::from_value(
            v.get("weights")
                .cloned()
                .ok_or_else(|| FedError::Format("missing weights".into()))?,
        )
        .map_err(|e| FedError::Format(format!("bad weights: {e}")))?;

        let mut model = LinearModel::zeros(get_usize("n_features")?, get_usize("n_classes")?, loss)
            .map_err(|e| FedError::Format(e.to_string()))?;
        model
            .set_weights(weights)
            .map_err(|e| FedError::Format(e.to_string()))?;
        Ok(model)
    }

    fn apply_step(&mut self, grad: &WeightMap, lr: f64) -> Result<()> {
        for (group, values) in self.weights.groups_mut() {
            let g = grad
                .get(group)
                .ok_or_else(|| FedError::Shape(format!("gradient missing group {group}")))?;
            for (w, gi) in values.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
        self.weights.validate_finite()
    }
}
