//! Encoder trunk plus projection head.
//!
//! `flatten -> affine(hidden) -> ReLU -> affine(feature)` produces the
//! features; the head `affine(feature) -> ReLU -> affine(projection)` followed
//! by row-wise L2 normalization produces the projections.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, LayerStack, StackCache};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Rows whose norm falls below this map to the first basis vector.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

impl EncoderDims {
    pub fn new(input_dim: usize, hidden_dim: usize, feature_dim: usize, projection_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            feature_dim,
            projection_dim,
        }
    }

    /// Desk-scale default widths for a given flattened input size.
    pub fn with_input(input_dim: usize) -> Self {
        Self::new(input_dim, 256, 128, 64)
    }

    pub fn stack(&self) -> Result<LayerStack> {
        LayerStack::new(
            vec![
                self.input_dim,
                self.hidden_dim,
                self.feature_dim,
                self.feature_dim,
                self.projection_dim,
            ],
            vec![
                Activation::Relu,
                Activation::Identity,
                Activation::Relu,
                Activation::Identity,
            ],
        )
    }
}

/// All learnable encoder and head weights in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    stack: LayerStack,
    values: Vec<f64>,
}

/// Output of [`EncoderParams::forward`]; holds what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct EncoderForward {
    pub features: Array2<f64>,
    pub projections: Array2<f64>,
    cache: StackCache,
    /// Pre-normalization row norms.
    norms: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Result<Self> {
        let stack = dims.stack()?;
        let values = vec![0.0; stack.param_count()];
        Ok(Self { dims, stack, values })
    }

    /// He-normal weights, zero biases, drawn from a stream keyed by `seed`.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = rng::keyed(Stream::Init, seed, 0, 0);
        for l in 0..params.stack.num_layers() {
            let (wr, _) = params.stack.block_ranges(l);
            let std = (2.0 / params.stack.sizes()[l] as f64).sqrt();
            for v in &mut params.values[wr] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
        Ok(params)
    }

    pub fn from_values(dims: EncoderDims, values: Vec<f64>) -> Result<Self> {
        let stack = dims.stack()?;
        if values.len() != stack.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters for {:?}, got {}",
                stack.param_count(),
                dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter value".into()));
        }
        Ok(Self { dims, stack, values })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<EncoderForward> {
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in encoder input".into()));
        }
        let cache = self.stack.forward(&self.values, batch)?;
        let features = cache.layer_output(1).clone();
        let mut projections = cache.output.clone();
        let mut norms = Vec::with_capacity(projections.nrows());
        for mut row in projections.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            if n < ZERO_NORM {
                row.fill(0.0);
                row[0] = 1.0;
            } else {
                row /= n;
            }
        }
        Ok(EncoderForward {
            features,
            projections,
            cache,
            norms,
        })
    }

    /// Gradient of a loss with respect to every parameter given the loss
    /// gradient on the normalized projections.
    pub fn backward(&self, batch: ArrayView2<f64>, grad_projections: ArrayView2<f64>) -> Result<Vec<f64>> {
        let fwd = self.forward(batch)?;
        fwd.backward(self, grad_projections)
    }
}

impl EncoderForward {
    pub fn backward(&self, params: &EncoderParams, grad_projections: ArrayView2<f64>) -> Result<Vec<f64>> {
        if grad_projections.dim() != self.projections.dim() {
            return Err(Error::config(format!(
                "projection gradient shape {:?} does not match projections {:?}",
                grad_projections.dim(),
                self.projections.dim()
            )));
        }
        if grad_projections.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite projection gradient".into()));
        }
        // Jacobian of u -> u/|u|: (I - z z^T)/|u|.
        let mut grad_raw = Array2::<f64>::zeros(self.projections.dim());
        for (i, mut out) in grad_raw.axis_iter_mut(Axis(0)).enumerate() {
            let n = self.norms[i];
            if n < ZERO_NORM {
                continue;
            }
            let z = self.projections.row(i);
            let g = grad_projections.row(i);
            let zg = z.dot(&g);
            out.assign(&((&g - &(&z * zg)) / n));
        }
        let mut grads = vec![0.0; params.len()];
        params
            .stack
            .backward(&params.values, &self.cache, grad_raw, &mut grads, false)?;
        Ok(grads)
    }
}

/// `key <- m * key + (1 - m) * query`, element-wise.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if key.dims != query.dims {
        return Err(Error::config(format!(
            "momentum update between mismatched encoders {:?} and {:?}",
            key.dims, query.dims
        )));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::config(format!("momentum {m} outside [0, 1)")));
    }
    for (k, &q) in key.values.iter_mut().zip(&query.values) {
        *k = m * *k + (1.0 - m) * q;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_features_and_basis_projection() {
        let params = EncoderParams::zeros(EncoderDims::new(3, 4, 2, 3)).unwrap();
        let out = params.forward(array![[0.3, -0.2, 0.9], [1.0, 1.0, 1.0]].view()).unwrap();
        assert!(out.features.iter().all(|&v| v == 0.0));
        for row in out.projections.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn identity_one_by_one_layers() {
        let dims = EncoderDims::new(1, 1, 1, 1);
        // Every layer is w = 1, b = 0.
        let params = EncoderParams::from_values(dims, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = params.forward(array![[1.0]].view()).unwrap();
        assert_eq!(out.projections[[0, 0]], 1.0);
        assert_eq!(out.features[[0, 0]], 1.0);
    }

    /// Straight-line re-implementation: explicit loops over the flat buffer.
    fn oracle_forward(dims: EncoderDims, p: &[f64], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let sizes = [dims.input_dim, dims.hidden_dim, dims.feature_dim, dims.feature_dim, dims.projection_dim];
        let relu = [true, false, true, false];
        x.iter()
            .map(|row| {
                let mut cur = row.clone();
                let mut off = 0;
                for l in 0..4 {
                    let (fi, fo) = (sizes[l], sizes[l + 1]);
                    let mut next = vec![0.0; fo];
                    for (o, nv) in next.iter_mut().enumerate() {
                        let mut acc = p[off + fi * fo + o];
                        for (i, c) in cur.iter().enumerate() {
                            acc += c * p[off + i * fo + o];
                        }
                        *nv = if relu[l] { acc.max(0.0) } else { acc };
                    }
                    off += fi * fo + fo;
                    cur = next;
                }
                let n = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
                cur.iter().map(|v| v / n).collect()
            })
            .collect()
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let dims = EncoderDims::new(6, 5, 4, 3);
        let mut params = EncoderParams::init(dims, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in params.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch = Array2::from_shape_fn((4, 6), |(i, j)| x[i][j]);
        let out = params.forward(batch.view()).unwrap();
        let expect = oracle_forward(dims, params.values(), &x);
        for (i, row) in expect.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.projections[[i, j]] - v).abs() < 1e-6);
            }
            let n: f64 = out.projections.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let dims = EncoderDims::new(5, 6, 4, 3);
        let params = EncoderParams::init(dims, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let zero = params.backward(batch.view(), Array2::zeros((3, 3)).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let once = params.backward(batch.view(), g.view()).unwrap();
        let twice = params.backward(batch.view(), (&g * 2.0).view()).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn backward_rejects_non_finite_gradient() {
        let params = EncoderParams::init(EncoderDims::new(2, 2, 2, 2), 0).unwrap();
        let err = params.backward(array![[1.0, 0.5]].view(), array![[f64::NAN, 0.0]].view());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let params = EncoderParams::init(EncoderDims::new(2, 2, 2, 2), 0).unwrap();
        assert!(matches!(params.forward(array![[1.0, 0.5, 0.1]].view()), Err(Error::Config(_))));
    }

    #[test]
    fn momentum_update_cases() {
        let dims = EncoderDims::new(1, 1, 1, 1);
        let query = EncoderParams::from_values(dims, vec![0.0; 8]).unwrap();
        let mut key = EncoderParams::from_values(dims, vec![2.0; 8]).unwrap();
        momentum_update(&mut key, &query, 0.5).unwrap();
        assert!(key.values().iter().all(|&v| v == 1.0));

        let query = EncoderParams::init(EncoderDims::new(3, 4, 2, 2), 1).unwrap();
        let mut key = EncoderParams::init(EncoderDims::new(3, 4, 2, 2), 2).unwrap();
        let before = key.clone();
        momentum_update(&mut key, &query, 1.0 - 1e-12).unwrap();
        for (a, b) in key.values().iter().zip(before.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        momentum_update(&mut key, &query, 0.0).unwrap();
        assert_eq!(key.values(), query.values());

        let other = EncoderParams::zeros(EncoderDims::new(2, 2, 2, 2)).unwrap();
        assert!(momentum_update(&mut key, &other, 0.5).is_err());
    }
}
