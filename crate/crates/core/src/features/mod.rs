//! Feature construction: max-pooled gradient reduction, projection to the
//! hidden dimension, L2 normalization, and hidden-first fusion.

mod store;

pub use store::{extract_features, read_store, write_store, FeatureStore, SkippedSample, StoreManifest};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::GradientBundle;

/// Non-overlapping window max-pooling over a 2-D matrix. The stride always
/// equals the window, and edge windows shrink to whatever remains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingSpec {
    /// (window height, window width).
    pub window: (usize, usize),
    pub mode: PoolMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Signed maximum of each window.
    Raw,
    /// Maximum absolute value of each window.
    Magnitude,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        Self {
            window: (10, 10),
            mode: PoolMode::Raw,
        }
    }
}

impl PoolingSpec {
    pub fn new(wh: usize, ww: usize, mode: PoolMode) -> Self {
        assert!(wh >= 1 && ww >= 1, "window must be at least 1x1");
        Self {
            window: (wh, ww),
            mode,
        }
    }

    /// Pooled length of one rows x cols matrix.
    pub fn pooled_len(&self, rows: usize, cols: usize) -> usize {
        rows.div_ceil(self.window.0) * cols.div_ceil(self.window.1)
    }
}

/// Total pooled dimension for a set of matrix shapes.
pub fn pooled_dim(shapes: &[(String, usize, usize)], spec: &PoolingSpec) -> usize {
    shapes
        .iter()
        .map(|(_, r, c)| spec.pooled_len(*r, *c))
        .sum()
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("extraction config is for model {config_model:?} but adapter is {adapter_model:?}")]
    FingerprintMismatch {
        config_model: String,
        adapter_model: String,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad feature store at {path}: {reason}")]
    BadStore { path: String, reason: String },
}

/// Pool a single matrix into its row-major window maxima.
pub fn pool_matrix(matrix: &Array2<f64>, spec: &PoolingSpec) -> Vec<f32> {
    let (wh, ww) = spec.window;
    let rows = matrix.nrows();
    let cols = matrix.ncols();
    let out_rows = rows.div_ceil(wh);
    let out_cols = cols.div_ceil(ww);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for br in 0..out_rows {
        for bc in 0..out_cols {
            let r0 = br * wh;
            let c0 = bc * ww;
            let r1 = (r0 + wh).min(rows);
            let c1 = (c0 + ww).min(cols);
            let mut best = f64::NEG_INFINITY;
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = match spec.mode {
                        PoolMode::Raw => matrix[[r, c]],
                        PoolMode::Magnitude => matrix[[r, c]].abs(),
                    };
                    if v > best {
                        best = v;
                    }
                }
            }
            out.push(best as f32);
        }
    }
    out
}

/// Reduce a gradient bundle to one flat vector: each matrix is pooled
/// independently and the results are concatenated in the bundle's declared
/// order (query, key, value, output).
pub fn maxpool_reduce(
    bundle: &GradientBundle,
    expected_shapes: &[(String, usize, usize)],
    spec: &PoolingSpec,
) -> Result<Vec<f32>, FeatureError> {
    if bundle.matrices.len() != expected_shapes.len() {
        return Err(FeatureError::ShapeMismatch {
            expected: format!("{} matrices", expected_shapes.len()),
            got: format!("{} matrices", bundle.matrices.len()),
        });
    }
    let mut out = Vec::with_capacity(pooled_dim(expected_shapes, spec));
    for ((name, matrix), (want_name, rows, cols)) in
        bundle.matrices.iter().zip(expected_shapes)
    {
        if name != want_name || matrix.nrows() != *rows || matrix.ncols() != *cols {
            return Err(FeatureError::ShapeMismatch {
                expected: format!("{want_name} {rows}x{cols}"),
                got: format!("{name} {}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        out.extend(pool_matrix(matrix, spec));
    }
    Ok(out)
}

/// L2-normalize. The all-zero vector maps to itself.
pub fn normalize(v: &[f32]) -> Vec<f32> {
    let norm_sq: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if norm_sq == 0.0 {
        return v.to_vec();
    }
    let inv = 1.0 / norm_sq.sqrt();
    v.iter().map(|&x| ((x as f64) * inv) as f32).collect()
}

/// Trainable linear map from the pooled gradient dimension to the hidden
/// dimension. Owned and trained by the detector. Kept bias-free so that
/// positive scaling of the input commutes with the projection and is then
/// absorbed exactly by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    /// grad_dim x hidden_dim.
    pub weight: Array2<f32>,
}

impl ProjectionParams {
    pub fn zeros(grad_dim: usize, hidden_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((grad_dim, hidden_dim)),
        }
    }
}

/// Apply the projection: `v . W`.
pub fn project(grad: &[f32], params: &ProjectionParams) -> Result<Vec<f32>, FeatureError> {
    if grad.len() != params.weight.nrows() {
        return Err(FeatureError::ShapeMismatch {
            expected: format!("gradient vector of {}", params.weight.nrows()),
            got: format!("{}", grad.len()),
        });
    }
    let v = ndarray::ArrayView1::from(grad);
    Ok(v.dot(&params.weight).to_vec())
}

/// Concatenate, hidden first. Both inputs must share one dimension.
pub fn fuse(hidden: &[f32], grad_projected: &[f32]) -> Result<Vec<f32>, FeatureError> {
    if hidden.len() != grad_projected.len() {
        return Err(FeatureError::ShapeMismatch {
            expected: format!("matching dims, hidden has {}", hidden.len()),
            got: format!("{}", grad_projected.len()),
        });
    }
    let mut out = Vec::with_capacity(hidden.len() * 2);
    out.extend_from_slice(hidden);
    out.extend_from_slice(grad_projected);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Independent re-implementation: enumerate every window by scanning all
    /// cells and bucketing them.
    fn brute_force_pool(m: &Array2<f64>, spec: &PoolingSpec) -> Vec<f32> {
        let (wh, ww) = spec.window;
        let out_rows = m.nrows().div_ceil(wh);
        let out_cols = m.ncols().div_ceil(ww);
        let mut buckets = vec![f64::NEG_INFINITY; out_rows * out_cols];
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let idx = (r / wh) * out_cols + (c / ww);
                let v = match spec.mode {
                    PoolMode::Raw => m[[r, c]],
                    PoolMode::Magnitude => m[[r, c]].abs(),
                };
                if v > buckets[idx] {
                    buckets[idx] = v;
                }
            }
        }
        buckets.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn single_window_takes_the_max() {
        let m = array![[1.0, 3.0], [2.0, 8.0]];
        let spec = PoolingSpec::new(2, 2, PoolMode::Raw);
        assert_eq!(pool_matrix(&m, &spec), vec![8.0]);
    }

    #[test]
    fn partial_edge_windows() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let spec = PoolingSpec::new(2, 2, PoolMode::Raw);
        assert_eq!(pool_matrix(&m, &spec), vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn magnitude_mode_uses_absolute_values() {
        let m = array![[-9.0, 1.0], [2.0, 3.0]];
        let spec = PoolingSpec::new(2, 2, PoolMode::Magnitude);
        assert_eq!(pool_matrix(&m, &spec), vec![9.0]);
    }

    #[test]
    fn matches_brute_force_on_assorted_shapes() {
        let mut rng = crate::rng::stream(5, &["pool-test"]);
        use rand::Rng;
        for case in 0..200 {
            let rows = rng.gen_range(1..=50);
            let cols = rng.gen_range(1..=50);
            let wh = rng.gen_range(1..=7);
            let ww = rng.gen_range(1..=7);
            let mode = if case % 2 == 0 { PoolMode::Raw } else { PoolMode::Magnitude };
            let m = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-10.0..10.0));
            let spec = PoolingSpec::new(wh, ww, mode);
            assert_eq!(
                pool_matrix(&m, &spec),
                brute_force_pool(&m, &spec),
                "case {case}: {rows}x{cols} window {wh}x{ww}"
            );
        }
    }

    #[test]
    fn pooled_dim_for_large_gqa_shapes() {
        // Grouped-query attention at 8B scale: full-width query/output
        // projections, narrower key/value.
        let shapes = vec![
            ("wq".to_string(), 4096, 4096),
            ("wk".to_string(), 4096, 1024),
            ("wv".to_string(), 4096, 1024),
            ("wo".to_string(), 4096, 4096),
        ];
        let spec = PoolingSpec::default();
        assert_eq!(pooled_dim(&shapes, &spec), 420_660);
    }

    #[test]
    fn normalize_matches_three_four_five() {
        let out = normalize(&[3.0, 4.0]);
        assert!((out[0] - 0.6).abs() < 1e-6);
        assert!((out[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn normalize_zero_vector_is_identity() {
        assert_eq!(normalize(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_zero_weights_give_zero() {
        let params = ProjectionParams::zeros(5, 3);
        assert_eq!(project(&[1.0; 5], &params).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_identity_passthrough() {
        let mut params = ProjectionParams::zeros(3, 3);
        for i in 0..3 {
            params.weight[[i, i]] = 1.0;
        }
        let out = project(&[1.5, -2.0, 0.25], &params).unwrap();
        assert_eq!(out, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn projection_matches_dense_multiply() {
        let mut rng = crate::rng::stream(6, &["proj-test"]);
        use rand::Rng;
        let g = 5;
        let h = 3;
        let params = ProjectionParams {
            weight: Array2::from_shape_fn((g, h), |_| rng.gen_range(-1.0..1.0)),
        };
        let x: Vec<f32> = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = project(&x, &params).unwrap();
        for j in 0..h {
            let mut want = 0.0f32;
            for i in 0..g {
                want += x[i] * params.weight[[i, j]];
            }
            assert!((got[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_is_hidden_first_and_invertible() {
        let fused = fuse(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(fused, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(&fused[..2], &[1.0, 0.0]);
        assert_eq!(&fused[2..], &[0.0, 1.0]);
        assert!(fuse(&[1.0], &[1.0, 2.0]).is_err());
    }
}
