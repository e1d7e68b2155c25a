//! Bidirectional self-attention encoder over a masked-item sequence.

use candle_core::Tensor;

use super::ops::{gather_positions, layer_norm, linear, softmax_last};
use super::params::{Init, ParamSpec, ParamStore};
use super::{EncoderConfig, Mode, SequenceBatch};
use crate::error::Result;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

fn push_ln(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros));
}

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, i: usize, o: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.weight"), &[i, o], Init::Normal(INIT_STD)));
    specs.push(ParamSpec::new(format!("{prefix}.bias"), &[o], Init::Zeros));
}

pub(crate) fn specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut s = vec![
        ParamSpec::new("embed.token", &[cfg.token_count(), d], Init::Normal(INIT_STD)),
        ParamSpec::new("embed.position", &[cfg.max_len, d], Init::Normal(INIT_STD)),
    ];
    push_ln(&mut s, "embed.ln", d);
    for l in 0..cfg.num_layers {
        for part in ["q", "k", "v", "o"] {
            push_linear(&mut s, &format!("layer{l}.attn.{part}"), d, d);
        }
        push_ln(&mut s, &format!("layer{l}.ln1"), d);
        push_linear(&mut s, &format!("layer{l}.ffn.up"), d, cfg.hidden_dim);
        push_linear(&mut s, &format!("layer{l}.ffn.down"), cfg.hidden_dim, d);
        push_ln(&mut s, &format!("layer{l}.ln2"), d);
    }
    push_linear(&mut s, "head.dense", d, d);
    push_ln(&mut s, "head.ln", d);
    s.push(ParamSpec::new("output.bias", &[cfg.n_classes], Init::Zeros));
    s
}

fn lin(p: &ParamStore, x: &Tensor, prefix: &str) -> Result<Tensor> {
    linear(
        x,
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
    )
}

fn ln(p: &ParamStore, x: &Tensor, prefix: &str) -> Result<Tensor> {
    layer_norm(
        x,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

/// Hidden state `[batch, embed_dim]` at each mask position.
pub(crate) fn forward(
    cfg: &EncoderConfig,
    p: &ParamStore,
    batch: &SequenceBatch,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let (b, s, d) = (batch.batch, batch.seq_len, cfg.embed_dim);
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = p
        .get("embed.token")?
        .index_select(&batch.ids_tensor()?, 0)?
        .reshape((b, s, d))?;
    let pos = p.get("embed.position")?.narrow(0, 0, s)?;
    let mut x = ln(p, &tok.broadcast_add(&pos)?, "embed.ln")?;
    x = mode.dropout(&x, cfg.dropout)?;
    let key_bias = batch.key_bias()?;

    let split = |t: Tensor| -> Result<Tensor> {
        Ok(t.reshape((b, s, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    for l in 0..cfg.num_layers {
        let q = split(lin(p, &x, &format!("layer{l}.attn.q"))?)?;
        let k = split(lin(p, &x, &format!("layer{l}.attn.k"))?)?;
        let v = split(lin(p, &x, &format!("layer{l}.attn.v"))?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&key_bias)?;
        let att = mode.dropout(&softmax_last(&scores)?, cfg.dropout)?;
        let ctx = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, d))?;
        let o = mode.dropout(&lin(p, &ctx, &format!("layer{l}.attn.o"))?, cfg.dropout)?;
        x = ln(p, &(x + o)?, &format!("layer{l}.ln1"))?;
        let up = lin(p, &x, &format!("layer{l}.ffn.up"))?.gelu_erf()?;
        let down = mode.dropout(&lin(p, &up, &format!("layer{l}.ffn.down"))?, cfg.dropout)?;
        x = ln(p, &(x + down)?, &format!("layer{l}.ln2"))?;
    }
    let h = gather_positions(&x, &batch.predict_pos)?;
    let h = lin(p, &h, "head.dense")?.gelu_erf()?;
    ln(p, &h, "head.ln")
}
