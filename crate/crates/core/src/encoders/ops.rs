//! Differentiable building blocks composed from candle primitives.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;

use crate::error::Result;

/// Large negative bias for masked attention scores; `exp` of it underflows
/// to exactly zero in f64.
pub(crate) const ATTENTION_MASK_BIAS: f64 = -1e9;

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `x @ w + b` over the last dimension of a tensor of any rank.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (in_dim, out_dim) = w.dims2()?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(w)?.broadcast_add(b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-scalar input") = out_dim;
    Ok(y.reshape(out_dims)?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub(crate) fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
    Ok(x.mul(&mask)?)
}

/// Shifts `[batch, seq, ch]` right along the sequence by `shift`, filling
/// with zeros: `out[t] = x[t - shift]`.
pub(crate) fn shift_right(x: &Tensor, shift: usize) -> Result<Tensor> {
    let (b, s, c) = x.dims3()?;
    if shift == 0 {
        return Ok(x.clone());
    }
    if shift >= s {
        return Ok(Tensor::zeros((b, s, c), x.dtype(), x.device())?);
    }
    Ok(x.pad_with_zeros(1, shift, 0)?.narrow(1, 0, s)?)
}

/// Rows `pos[i]` of each sequence of `[batch, seq, ch]`, giving `[batch, ch]`.
pub(crate) fn gather_positions(x: &Tensor, pos: &[usize]) -> Result<Tensor> {
    let (b, s, c) = x.dims3()?;
    let flat: Vec<u32> = pos
        .iter()
        .enumerate()
        .map(|(i, &p)| (i * s + p) as u32)
        .collect();
    let idx = Tensor::from_vec(flat, b, x.device())?;
    Ok(x.reshape((b * s, c))?.index_select(&idx, 0)?)
}

pub(crate) fn device() -> Device {
    Device::Cpu
}

pub(crate) const DTYPE: DType = DType::F64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, -1e9]], &device()).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[1][2], 0.0);
    }

    #[test]
    fn shift_and_gather() {
        let x = Tensor::new(&[[[1.0f64], [2.0], [3.0]]], &device()).unwrap();
        let y = shift_right(&x, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![0.0, 1.0, 2.0]);
        let g = gather_positions(&x, &[2]).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(g, vec![vec![3.0]]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &device()).unwrap();
        let g = Tensor::ones(4, DTYPE, &device()).unwrap();
        let b = Tensor::zeros(4, DTYPE, &device()).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
