use rand_chacha::ChaCha8Rng;

use super::{Bound, Init, ParamKind, ParamStore, SeqLayout};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

/// Single-layer GRU, gates ordered `[z | r | n]`:
///
/// ```text
/// z = s(x Wz + h Uz + bz)    r = s(x Wr + h Ur + br)
/// n = tanh(x Wn + r * (h Un) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub(crate) struct GruLayout {
    w_x: usize,
    w_h: usize,
    bias: usize,
    dim: usize,
}

impl GruLayout {
    pub(crate) fn init(params: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        let gates = |init: &mut Init, name: &str| {
            let parts: Vec<Tensor> = (0..3).map(|_| init.xavier(d, d)).collect();
            // each gate block gets its own fan, then the blocks sit side by side
            let mut data = Vec::with_capacity(3 * d * d);
            for r in 0..d {
                for p in &parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            (name.to_string(), Tensor::new(vec![d, 3 * d], data).expect("gate shape"))
        };
        let (nx, wx) = gates(init, "gru.w_x");
        let (nh, wh) = gates(init, "gru.w_h");
        GruLayout {
            w_x: params.add(nx, ParamKind::Weight, wx),
            w_h: params.add(nh, ParamKind::Weight, wh),
            bias: params.add("gru.bias", ParamKind::Weight, Tensor::zeros(&[3 * d])),
            dim: d,
        }
    }

    pub(crate) fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: Var,
        layout: &SeqLayout,
        dropout: Scalar,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NumericsError> {
        let d = self.dim;
        let (b, width) = (layout.batch, layout.width);
        let x = if dropout > 0.0 { tape.dropout(seq, dropout, rng)? } else { seq };
        let xp = tape.matmul(x, bound.var(self.w_x))?;
        let xp = tape.add_broadcast(xp, bound.var(self.bias))?;
        let w_h = bound.var(self.w_h);

        let mut h: Option<Var> = None;
        let mut states = Vec::with_capacity(width);
        for t in 0..width {
            let xt = tape.select1(xp, t)?;
            let xz = tape.slice_last(xt, 0, d)?;
            let xr = tape.slice_last(xt, d, d)?;
            let xn = tape.slice_last(xt, 2 * d, d)?;
            let next = match h {
                // h = 0: every recurrent term vanishes
                None => {
                    let z = tape.sigmoid(xz)?;
                    let n = tape.tanh(xn)?;
                    let zn = tape.mul(z, n)?;
                    tape.sub(n, zn)?
                }
                Some(h) => {
                    let hp = tape.matmul(h, w_h)?;
                    let hz = tape.slice_last(hp, 0, d)?;
                    let hr = tape.slice_last(hp, d, d)?;
                    let hn = tape.slice_last(hp, 2 * d, d)?;
                    let z = tape.add(xz, hz)?;
                    let z = tape.sigmoid(z)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.sigmoid(r)?;
                    let rh = tape.mul(r, hn)?;
                    let n = tape.add(xn, rh)?;
                    let n = tape.tanh(n)?;
                    let diff = tape.sub(h, n)?;
                    let zd = tape.mul(z, diff)?;
                    tape.add(n, zd)?
                }
            };
            // padding steps leave the state at zero
            let m: Vec<Scalar> = (0..b)
                .flat_map(|i| std::iter::repeat_n(if layout.real[i * width + t] { 1.0 } else { 0.0 }, d))
                .collect();
            let next = if m.iter().all(|&v| v == 1.0) {
                next
            } else {
                let mv = tape.constant(Tensor::new(vec![b, d], m)?)?;
                tape.mul(next, mv)?
            };
            states.push(next);
            h = Some(next);
        }
        let out = tape.stack1(&states)?;
        if dropout > 0.0 {
            tape.dropout(out, dropout, rng)
        } else {
            Ok(out)
        }
    }
}
