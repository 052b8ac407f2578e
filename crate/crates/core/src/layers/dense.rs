use rand::Rng;

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Affine map `out = W x + b` applied row-wise to a `B x in` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `out x in`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, with_bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::gaussian("weight", &[output, input], input, rng),
            bias: with_bias.then(|| Tensor::zeros("bias", &[output])),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let (nin, nout) = (self.input_width(), self.output_width());
        if x.len() % nin != 0 {
            return Err(Error::mismatch("dense input width", nin, x.len()));
        }
        let mut out = Vec::with_capacity(x.len() / nin * nout);
        for row in x.chunks(nin) {
            for o in 0..nout {
                let w = &self.weight.data[o * nin..(o + 1) * nin];
                let mut acc: T = w.iter().zip(row).map(|(&a, &b)| a * b).sum();
                if let Some(b) = &self.bias {
                    acc += b.data[o];
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Returns `(param grads in params() order, input grad)`.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let (nin, nout) = (self.input_width(), self.output_width());
        let rows = x.len() / nin;
        if x.len() % nin != 0 || upstream.len() != rows * nout {
            return Err(Error::mismatch("dense upstream size", rows * nout, upstream.len()));
        }
        let mut gw = vec![T::zero(); nout * nin];
        let mut gb = vec![T::zero(); nout];
        let mut gx = vec![T::zero(); x.len()];
        for (r, (xr, gr)) in x.chunks(nin).zip(upstream.chunks(nout)).enumerate() {
            let gxr = &mut gx[r * nin..(r + 1) * nin];
            for (o, &g) in gr.iter().enumerate() {
                gb[o] += g;
                let w = &self.weight.data[o * nin..(o + 1) * nin];
                let gwo = &mut gw[o * nin..(o + 1) * nin];
                for i in 0..nin {
                    gwo[i] += g * xr[i];
                    gxr[i] += g * w[i];
                }
            }
        }
        let mut grads = vec![gw];
        if self.bias.is_some() {
            grads.push(gb);
        }
        Ok((grads, gx))
    }
}

impl<T: Real> Parameterized<T> for DenseLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}
