//! Dense layer stacks over a flat parameter buffer.
//!
//! Layer `l` maps `sizes[l] -> sizes[l + 1]`; its weight block is stored
//! row-major as `[sizes[l] x sizes[l + 1]]` followed by a bias of length
//! `sizes[l + 1]`. Blocks are laid out consecutively, which is what makes the
//! parameters flat-addressable.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStack {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
}

/// Per-layer values kept from a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the batch.
    pub inputs: Vec<Array2<f64>>,
    /// Output of the last layer (after its activation).
    pub output: Array2<f64>,
}

impl StackCache {
    /// Post-activation output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Array2<f64> {
        if l + 1 < self.inputs.len() {
            &self.inputs[l + 1]
        } else {
            &self.output
        }
    }
}

impl LayerStack {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 || activations.len() + 1 != sizes.len() {
            return Err(Error::config(format!(
                "layer stack needs n+1 sizes for n activations, got {} and {}",
                sizes.len(),
                activations.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(Self { sizes, activations })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat ranges of the weight and bias blocks of layer `l`.
    pub fn block_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let start: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = start..start + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    fn weights<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (wr, br) = self.block_ranges(l);
        let w = ArrayView2::from_shape((self.sizes[l], self.sizes[l + 1]), &params[wr])
            .expect("weight block shape");
        let b = ArrayView1::from(&params[br]);
        (w, b)
    }

    fn check(&self, params: &[f64], batch_cols: usize) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "parameter buffer has {} values, layer stack needs {}",
                params.len(),
                self.param_count()
            )));
        }
        if batch_cols != self.input_dim() {
            return Err(Error::config(format!(
                "batch has {} columns, layer stack expects {}",
                batch_cols,
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], batch: ArrayView2<f64>) -> Result<StackCache> {
        self.check(params, batch.ncols())?;
        if batch.nrows() == 0 {
            return Err(Error::config("empty batch"));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut current = batch.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.weights(params, l);
            let mut next = current.dot(&w);
            next += &b;
            if self.activations[l] == Activation::Relu {
                next.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(current);
            current = next;
        }
        Ok(StackCache {
            inputs,
            output: current,
        })
    }

    /// Reverse pass. `grad_output` is dL/d(output of the last layer).
    /// Parameter gradients are accumulated into `grad_params`; the gradient
    /// with respect to the batch is returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &StackCache,
        grad_output: Array2<f64>,
        grad_params: &mut [f64],
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        if grad_params.len() != self.param_count() {
            return Err(Error::config("gradient buffer length mismatch"));
        }
        if grad_output.dim() != cache.output.dim() {
            return Err(Error::config(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                grad_output.dim(),
                cache.output.dim()
            )));
        }
        let mut grad = grad_output;
        for l in (0..self.num_layers()).rev() {
            if self.activations[l] == Activation::Relu {
                // The post-activation output is zero exactly where the unit was inactive.
                let out = cache.layer_output(l);
                grad.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let (wr, br) = self.block_ranges(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            {
                let (wslice, rest) = grad_params[wr.start..br.end].split_at_mut(wr.len());
                let mut dw = ArrayViewMut2::from_shape((fan_in, fan_out), wslice)
                    .expect("weight gradient shape");
                general_mat_mul(1.0, &cache.inputs[l].t(), &grad, 1.0, &mut dw);
                let mut db = ArrayViewMut1::from(rest);
                db += &grad.sum_axis(Axis(0));
            }
            if l > 0 || want_input_grad {
                let (w, _) = self.weights(params, l);
                grad = grad.dot(&w.t());
            }
        }
        Ok(if want_input_grad { Some(grad) } else { None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn block_ranges_tile_the_buffer() {
        let stack = LayerStack::new(vec![3, 4, 2], vec![Activation::Relu, Activation::Identity]).unwrap();
        assert_eq!(stack.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let (w0, b0) = stack.block_ranges(0);
        let (w1, b1) = stack.block_ranges(1);
        assert_eq!(w0, 0..12);
        assert_eq!(b0, 12..16);
        assert_eq!(w1, 16..24);
        assert_eq!(b1, 24..26);
    }

    #[test]
    fn single_affine_matches_hand_computation() {
        let stack = LayerStack::new(vec![2, 1], vec![Activation::Identity]).unwrap();
        let params = [2.0, -1.0, 0.5];
        let cache = stack.forward(&params, array![[1.0, 3.0]].view()).unwrap();
        assert_eq!(cache.output[[0, 0]], 2.0 - 3.0 + 0.5);
    }

    #[test]
    fn rejects_wrong_width() {
        let stack = LayerStack::new(vec![2, 1], vec![Activation::Identity]).unwrap();
        let err = stack.forward(&[0.0; 3], array![[1.0, 2.0, 3.0]].view());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
