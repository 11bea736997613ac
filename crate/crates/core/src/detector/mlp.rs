//! Dense network internals for the detector head, in f32 throughout so that
//! saved parameters reproduce predictions bit-exactly after reload.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Dense {
    /// in_dim x out_dim.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

/// Fully connected ReLU stack ending in two class logits.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` runs input..output, e.g. `[2H, 1024, 256, 64, 16, 2]`.
    pub fn new_random(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f32).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| {
                        // Box-Muller in f32.
                        let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
                        let u2: f32 = rng.gen();
                        std * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f32::consts::PI * u2).cos()
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        dims.push(self.layers.last().expect("non-empty mlp").weight.ncols());
        dims
    }

    /// Batch forward. Returns the input of every layer plus the final logits.
    pub fn forward(&self, x: &Array2<f32>) -> (Vec<Array2<f32>>, Array2<f32>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(a.clone());
            let mut z = a.dot(&layer.weight) + &layer.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        (inputs, a)
    }

    /// Batch backward from `dlogits`. Returns per-layer gradients and the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        inputs: &[Array2<f32>],
        dlogits: Array2<f32>,
    ) -> (Vec<Dense>, Array2<f32>) {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect();
        let mut dz = dlogits;
        for i in (0..self.layers.len()).rev() {
            grads[i].weight = inputs[i].t().dot(&dz);
            grads[i].bias = dz.sum_axis(Axis(0));
            if i > 0 {
                let mut da = dz.dot(&self.layers[i].weight.t());
                // ReLU mask: inputs[i] is the post-activation input to layer i.
                da.zip_mut_with(&inputs[i], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = da;
            }
        }
        let dx = dz.dot(&self.layers[0].weight.t());
        (grads, dx)
    }
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Adam over flat f32 slices, one state pair per tensor.
pub struct AdamF32 {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamF32 {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, pairs: &mut [(&mut [f32], &[f32])]) {
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (params, grads)) in pairs.iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                params[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = ndarray::array![[1.0, 2.0], [-3.0, 0.5], [100.0, 100.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let mut rng = rng::stream(4, &["mlp-fd"]);
        let mut mlp = Mlp::new_random(&[3, 5, 2], &mut rng);
        let x = ndarray::array![[0.3f32, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let labels = [1usize, 0usize];

        let loss = |mlp: &Mlp| -> f32 {
            let (_, logits) = mlp.forward(&x);
            let p = softmax_rows(&logits);
            -labels
                .iter()
                .enumerate()
                .map(|(i, &y)| p[[i, y]].ln())
                .sum::<f32>()
                / labels.len() as f32
        };

        let (inputs, logits) = mlp.forward(&x);
        let mut dlogits = softmax_rows(&logits);
        for (i, &y) in labels.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v / labels.len() as f32);
        let (grads, _) = mlp.backward(&inputs, dlogits);

        let eps = 1e-3f32;
        for (li, idx) in [(0usize, 4usize), (0, 10), (1, 3)] {
            let analytic = grads[li].weight.as_slice().unwrap()[idx];
            let slice = mlp.layers[li].weight.as_slice_mut().unwrap();
            let orig = slice[idx];
            slice[idx] = orig + eps;
            let up = loss(&mlp);
            mlp.layers[li].weight.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = loss(&mlp);
            mlp.layers[li].weight.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() < 2e-2 * analytic.abs().max(numeric.abs()).max(0.1),
                "layer {li} idx {idx}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
