//! Causal dilated convolutions with residual blocks.

use candle_core::{Tensor, D};

use super::ops::{gather_positions, linear, shift_right};
use super::params::{Init, ParamSpec, ParamStore};
use super::{EncoderConfig, Mode, SequenceBatch};
use crate::error::Result;

pub(crate) fn specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let (d, h, k) = (cfg.embed_dim, cfg.hidden_dim, cfg.kernel_size);
    let glorot = |i: usize, o: usize| Init::Uniform((6.0 / (i + o) as f64).sqrt());
    let mut s = vec![ParamSpec::new(
        "embed.token",
        &[cfg.token_count(), d],
        Init::Normal(0.02),
    )];
    for l in 0..cfg.num_layers {
        s.push(ParamSpec::new(format!("block{l}.conv1.weight"), &[k * d, h], glorot(k * d, h)));
        s.push(ParamSpec::new(format!("block{l}.conv1.bias"), &[h], Init::Zeros));
        s.push(ParamSpec::new(format!("block{l}.conv2.weight"), &[k * h, d], glorot(k * h, d)));
        s.push(ParamSpec::new(format!("block{l}.conv2.bias"), &[d], Init::Zeros));
    }
    s.push(ParamSpec::new("output.bias", &[cfg.n_classes], Init::Zeros));
    s
}

/// Tap `j` reads `x[t - j * dilation]`.
fn causal_conv(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    kernel: usize,
    dilation: usize,
) -> Result<Tensor> {
    let taps = (0..kernel)
        .map(|j| shift_right(x, j * dilation))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Tensor::cat(&taps, D::Minus1)?;
    linear(&stacked, w, b)
}

pub(crate) fn forward(
    cfg: &EncoderConfig,
    p: &ParamStore,
    batch: &SequenceBatch,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let (b, s, d) = (batch.batch, batch.seq_len, cfg.embed_dim);
    let mut x = p
        .get("embed.token")?
        .index_select(&batch.ids_tensor()?, 0)?
        .reshape((b, s, d))?;
    x = mode.dropout(&x, cfg.dropout)?;
    for l in 0..cfg.num_layers {
        let dilation = 1usize << l.min(16);
        let y = causal_conv(
            &x,
            p.get(&format!("block{l}.conv1.weight"))?,
            p.get(&format!("block{l}.conv1.bias"))?,
            cfg.kernel_size,
            dilation,
        )?
        .relu()?;
        let y = mode.dropout(&y, cfg.dropout)?;
        let y = causal_conv(
            &y,
            p.get(&format!("block{l}.conv2.weight"))?,
            p.get(&format!("block{l}.conv2.bias"))?,
            cfg.kernel_size,
            dilation,
        )?
        .relu()?;
        let y = mode.dropout(&y, cfg.dropout)?;
        x = (x + y)?.relu()?;
    }
    gather_positions(&x, &batch.predict_pos)
}
