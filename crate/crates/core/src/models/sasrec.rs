use rand_chacha::ChaCha8Rng;

use super::{Bound, Init, ParamKind, ParamStore, SeqLayout, ATTENTION_MASK_FILL};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

const LN_EPS: Scalar = 1e-8;

#[derive(Clone, Debug)]
struct Block {
    ln_attn: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln_ffn: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Pre-norm causal self-attention stack with learned absolute positions.
#[derive(Clone, Debug)]
pub(crate) struct SasLayout {
    pos: usize,
    blocks: Vec<Block>,
    final_ln: (usize, usize),
    dim: usize,
}

fn layer_norm_params(params: &mut ParamStore, name: &str, d: usize) -> (usize, usize) {
    (
        params.add(format!("{}.gamma", name), ParamKind::Weight, Tensor::full(&[d], 1.0)),
        params.add(format!("{}.beta", name), ParamKind::Weight, Tensor::zeros(&[d])),
    )
}

impl SasLayout {
    pub(crate) fn init(params: &mut ParamStore, init: &mut Init, d: usize, max_len: usize, blocks: usize) -> Self {
        let pos = params.add("positional_embedding", ParamKind::Positional, init.embedding(max_len, d));
        let blocks = (0..blocks)
            .map(|k| {
                let p = format!("block{}", k);
                Block {
                    ln_attn: layer_norm_params(params, &format!("{}.ln_attn", p), d),
                    wq: params.add(format!("{}.wq", p), ParamKind::Weight, init.xavier(d, d)),
                    wk: params.add(format!("{}.wk", p), ParamKind::Weight, init.xavier(d, d)),
                    wv: params.add(format!("{}.wv", p), ParamKind::Weight, init.xavier(d, d)),
                    wo: params.add(format!("{}.wo", p), ParamKind::Weight, init.xavier(d, d)),
                    ln_ffn: layer_norm_params(params, &format!("{}.ln_ffn", p), d),
                    w1: params.add(format!("{}.ffn.w1", p), ParamKind::Weight, init.xavier(d, d)),
                    b1: params.add(format!("{}.ffn.b1", p), ParamKind::Weight, Tensor::zeros(&[d])),
                    w2: params.add(format!("{}.ffn.w2", p), ParamKind::Weight, init.xavier(d, d)),
                    b2: params.add(format!("{}.ffn.b2", p), ParamKind::Weight, Tensor::zeros(&[d])),
                }
            })
            .collect();
        let final_ln = layer_norm_params(params, "final_ln", d);
        SasLayout {
            pos,
            blocks,
            final_ln,
            dim: d,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: Var,
        layout: &SeqLayout,
        heads: usize,
        dropout: Scalar,
        rng: &mut ChaCha8Rng,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var, NumericsError> {
        let d = self.dim;
        let (b, w) = (layout.batch, layout.width);
        let dh = d / heads;
        let mut drop = |tape: &mut Tape, x: Var| if dropout > 0.0 { tape.dropout(x, dropout, rng) } else { Ok(x) };

        let positions: Vec<usize> = (layout.offset..layout.offset + w).collect();
        let pos = tape.gather(bound.var(self.pos), &positions)?;
        let x = tape.add_broadcast(seq, pos)?;
        let x = drop(tape, x)?;
        let mask3 = tape.constant(layout.mask3(d))?;
        let mut x = tape.mul(x, mask3)?;

        // future keys are always hidden; padding keys are hidden except on the
        // diagonal so that padding queries still have one finite logit
        let mut attn_mask = Vec::with_capacity(b * w * w);
        for u in 0..b {
            for i in 0..w {
                for j in 0..w {
                    attn_mask.push(j > i || (!layout.real[u * w + j] && j != i));
                }
            }
        }
        let inv_sqrt = 1.0 / (dh as Scalar).sqrt();

        for blk in &self.blocks {
            let q_in = tape.layer_norm(x, bound.var(blk.ln_attn.0), bound.var(blk.ln_attn.1), LN_EPS)?;
            let q = tape.matmul(q_in, bound.var(blk.wq))?;
            let k = tape.matmul(x, bound.var(blk.wk))?;
            let v = tape.matmul(x, bound.var(blk.wv))?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_last(q, h * dh, dh)?,
                        tape.slice_last(k, h * dh, dh)?,
                        tape.slice_last(v, h * dh, dh)?,
                    )
                };
                let logits = tape.bmm(qh, kh, true)?;
                let logits = tape.scale(logits, inv_sqrt)?;
                let logits = tape.masked_fill(logits, &attn_mask, ATTENTION_MASK_FILL)?;
                let weights = tape.softmax(logits)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(weights);
                }
                outs.push(tape.bmm(weights, vh, false)?);
            }
            let heads_out = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
            let attn = tape.matmul(heads_out, bound.var(blk.wo))?;
            let x1 = tape.add(q_in, attn)?;
            let y = tape.layer_norm(x1, bound.var(blk.ln_ffn.0), bound.var(blk.ln_ffn.1), LN_EPS)?;
            let hdn = tape.matmul(y, bound.var(blk.w1))?;
            let hdn = tape.add_broadcast(hdn, bound.var(blk.b1))?;
            let hdn = tape.relu(hdn)?;
            let hdn = drop(tape, hdn)?;
            let out = tape.matmul(hdn, bound.var(blk.w2))?;
            let out = tape.add_broadcast(out, bound.var(blk.b2))?;
            let out = drop(tape, out)?;
            let x2 = tape.add(y, out)?;
            x = tape.mul(x2, mask3)?;
        }
        let out = tape.layer_norm(x, bound.var(self.final_ln.0), bound.var(self.final_ln.1), LN_EPS)?;
        tape.mul(out, mask3)
    }
}
