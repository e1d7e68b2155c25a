//! Stacked gated recurrent units read left to right.

use candle_core::{Tensor, D};

use super::ops::{gather_positions, linear, sigmoid};
use super::params::{Init, ParamSpec, ParamStore};
use super::{EncoderConfig, Mode, SequenceBatch};
use crate::error::Result;

pub(crate) fn specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let a = 1.0 / (h as f64).sqrt();
    let mut s = vec![ParamSpec::new(
        "embed.token",
        &[cfg.token_count(), d],
        Init::Normal(0.02),
    )];
    for l in 0..cfg.num_layers {
        let input = if l == 0 { d } else { h };
        s.push(ParamSpec::new(format!("gru{l}.ih.weight"), &[input, 3 * h], Init::Uniform(a)));
        s.push(ParamSpec::new(format!("gru{l}.ih.bias"), &[3 * h], Init::Uniform(a)));
        s.push(ParamSpec::new(format!("gru{l}.hh.weight"), &[h, 3 * h], Init::Uniform(a)));
        s.push(ParamSpec::new(format!("gru{l}.hh.bias"), &[3 * h], Init::Uniform(a)));
    }
    let b = (6.0 / (h + d) as f64).sqrt();
    s.push(ParamSpec::new("proj.weight", &[h, d], Init::Uniform(b)));
    s.push(ParamSpec::new("proj.bias", &[d], Init::Zeros));
    s.push(ParamSpec::new("output.bias", &[cfg.n_classes], Init::Zeros));
    s
}

pub(crate) fn forward(
    cfg: &EncoderConfig,
    p: &ParamStore,
    batch: &SequenceBatch,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let (b, d, h) = (batch.batch, cfg.embed_dim, cfg.hidden_dim);
    // Positions past the last mask token never influence any output.
    let steps = batch.predict_pos.iter().max().map_or(1, |m| m + 1);
    let ids = Tensor::from_vec(
        (0..b)
            .flat_map(|r| batch.ids[r * batch.seq_len..r * batch.seq_len + steps].to_vec())
            .collect::<Vec<u32>>(),
        b * steps,
        &super::ops::device(),
    )?;
    let mut x = p
        .get("embed.token")?
        .index_select(&ids, 0)?
        .reshape((b, steps, d))?;
    x = mode.dropout(&x, cfg.dropout)?;

    for l in 0..cfg.num_layers {
        let w_hh = p.get(&format!("gru{l}.hh.weight"))?;
        let b_hh = p.get(&format!("gru{l}.hh.bias"))?;
        let xp = linear(
            &x,
            p.get(&format!("gru{l}.ih.weight"))?,
            p.get(&format!("gru{l}.ih.bias"))?,
        )?;
        let mut state = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = xp.narrow(1, t, 1)?.squeeze(1)?;
            let ht = state.matmul(w_hh)?.broadcast_add(b_hh)?;
            let r = sigmoid(&(xt.narrow(D::Minus1, 0, h)? + ht.narrow(D::Minus1, 0, h)?)?)?;
            let z = sigmoid(&(xt.narrow(D::Minus1, h, h)? + ht.narrow(D::Minus1, h, h)?)?)?;
            let n = (xt.narrow(D::Minus1, 2 * h, h)? + (r * ht.narrow(D::Minus1, 2 * h, h)?)?)?
                .tanh()?;
            // h' = n + z * (h - n)
            state = (&n + (z * (&state - &n)?)?)?;
            outputs.push(state.clone());
        }
        x = Tensor::stack(&outputs, 1)?;
        x = mode.dropout(&x, cfg.dropout)?;
    }
    let last = gather_positions(&x, &batch.predict_pos)?;
    linear(&last, p.get("proj.weight")?, p.get("proj.bias")?)
}
