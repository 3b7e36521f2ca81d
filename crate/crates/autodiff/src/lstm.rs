//! Single-direction LSTM over `[batch, time, in]` with backpropagation through
//! time, and the bidirectional layer built from two of them.
//!
//! Gate rows of the stacked weights are ordered input, forget, cell, output:
//! `w_ih [4H, in]`, `w_hh [4H, H]`, `bias [4H]`.

use crate::graph::{axpy, dot, Graph, Op, Var};
use crate::tensor::{Real, Tensor};
use crate::{AutodiffError, Result};

/// Graph handles for one direction's weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

pub(crate) struct LstmSaved<T> {
    x: Var,
    w: LstmWeights,
    reverse: bool,
    hidden: usize,
    /// Post-activation gates per (batch, time): i, f, g, o.
    gates: Vec<T>,
    cell: Vec<T>,
    cell_tanh: Vec<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn lstm(&mut self, x: Var, w: &LstmWeights, reverse: bool) -> Result<Var> {
        let (sx, sih, shh, sb) =
            (self.shape(x), self.shape(w.w_ih), self.shape(w.w_hh), self.shape(w.bias));
        if sx.len() != 3 || sih.len() != 2 || shh.len() != 2 || sb.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "lstm: input {sx:?}, w_ih {sih:?}, w_hh {shh:?}, bias {sb:?}"
            )));
        }
        let (batch, time, d_in) = (sx[0], sx[1], sx[2]);
        let hidden = shh[1];
        if time == 0 {
            return Err(AutodiffError::Shape("lstm: sequence has no timesteps".into()));
        }
        if sih != [4 * hidden, d_in] || shh != [4 * hidden, hidden] || sb != [4 * hidden] {
            return Err(AutodiffError::Shape(format!(
                "lstm: for input width {d_in} and hidden {hidden} expected w_ih [{}, {d_in}], w_hh [{}, {hidden}], bias [{}]; got {sih:?}, {shh:?}, {sb:?}",
                4 * hidden,
                4 * hidden,
                4 * hidden
            )));
        }
        let xs = self.value(x).data();
        let (wih, whh, bias) =
            (self.value(w.w_ih).data(), self.value(w.w_hh).data(), self.value(w.bias).data());
        let h4 = 4 * hidden;
        let mut out = vec![T::zero(); batch * time * hidden];
        let mut gates = vec![T::zero(); batch * time * h4];
        let mut cell = vec![T::zero(); batch * time * hidden];
        let mut cell_tanh = vec![T::zero(); batch * time * hidden];
        let mut pre = vec![T::zero(); h4];
        let mut h = vec![T::zero(); hidden];
        let mut c = vec![T::zero(); hidden];

        for b in 0..batch {
            h.iter_mut().for_each(|v| *v = T::zero());
            c.iter_mut().for_each(|v| *v = T::zero());
            for step in 0..time {
                let t = if reverse { time - 1 - step } else { step };
                let xt = &xs[(b * time + t) * d_in..][..d_in];
                for r in 0..h4 {
                    pre[r] = bias[r]
                        + dot(&wih[r * d_in..(r + 1) * d_in], xt)
                        + dot(&whh[r * hidden..(r + 1) * hidden], &h);
                }
                let bt = b * time + t;
                let gt = &mut gates[bt * h4..(bt + 1) * h4];
                for j in 0..hidden {
                    let i = sigmoid(pre[j]);
                    let f = sigmoid(pre[hidden + j]);
                    let g = pre[2 * hidden + j].tanh();
                    let o = sigmoid(pre[3 * hidden + j]);
                    c[j] = f * c[j] + i * g;
                    let tc = c[j].tanh();
                    h[j] = o * tc;
                    gt[j] = i;
                    gt[hidden + j] = f;
                    gt[2 * hidden + j] = g;
                    gt[3 * hidden + j] = o;
                    cell[bt * hidden + j] = c[j];
                    cell_tanh[bt * hidden + j] = tc;
                }
                out[bt * hidden..(bt + 1) * hidden].copy_from_slice(&h);
            }
        }
        let value = Tensor::new(vec![batch, time, hidden], out)?;
        let needs = self.needs(x) || self.needs(w.w_ih) || self.needs(w.w_hh) || self.needs(w.bias);
        let saved = LstmSaved { x, w: *w, reverse, hidden, gates, cell, cell_tanh };
        Ok(self.push(value, Op::Lstm(saved), needs))
    }

    /// Forward and time-reversed LSTMs over the same input, outputs
    /// concatenated per timestep: `[batch, time, 2H]`.
    pub fn bilstm_layer(&mut self, x: Var, forward: &LstmWeights, backward: &LstmWeights) -> Result<Var> {
        let f = self.lstm(x, forward, false)?;
        let b = self.lstm(x, backward, true)?;
        self.concat_last(f, b)
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    saved: &LstmSaved<T>,
    output: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let sx = graph.shape(saved.x);
    let (batch, time, d_in) = (sx[0], sx[1], sx[2]);
    let hidden = saved.hidden;
    let h4 = 4 * hidden;
    let xs = graph.value(saved.x).data();
    let out = output.data();
    let (wih, whh) = (graph.value(saved.w.w_ih).data(), graph.value(saved.w.w_hh).data());

    let mut gx = vec![T::zero(); xs.len()];
    let mut gwih = vec![T::zero(); wih.len()];
    let mut gwhh = vec![T::zero(); whh.len()];
    let mut gb = vec![T::zero(); h4];
    let mut dh_next = vec![T::zero(); hidden];
    let mut dc_next = vec![T::zero(); hidden];
    let mut da = vec![T::zero(); h4];
    let zeros = vec![T::zero(); hidden];

    for b in 0..batch {
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        dc_next.iter_mut().for_each(|v| *v = T::zero());
        for step in (0..time).rev() {
            let t = if saved.reverse { time - 1 - step } else { step };
            let bt = b * time + t;
            // state entering this step
            let (h_prev, c_prev): (&[T], &[T]) = if step == 0 {
                (&zeros, &zeros)
            } else {
                let tp = if saved.reverse { t + 1 } else { t - 1 };
                let bp = b * time + tp;
                (&out[bp * hidden..(bp + 1) * hidden], &saved.cell[bp * hidden..(bp + 1) * hidden])
            };
            let gt = &saved.gates[bt * h4..(bt + 1) * h4];
            for j in 0..hidden {
                let (i, f, gg, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                let tc = saved.cell_tanh[bt * hidden + j];
                let dh = g[bt * hidden + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                let di = dc * gg;
                let dg = dc * i;
                let df = dc * c_prev[j];
                dc_next[j] = dc * f;
                da[j] = di * i * (T::one() - i);
                da[hidden + j] = df * f * (T::one() - f);
                da[2 * hidden + j] = dg * (T::one() - gg * gg);
                da[3 * hidden + j] = d_o * o * (T::one() - o);
            }
            let xt = &xs[bt * d_in..(bt + 1) * d_in];
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            let gxt = &mut gx[bt * d_in..(bt + 1) * d_in];
            for r in 0..h4 {
                let a = da[r];
                gb[r] += a;
                axpy(a, xt, &mut gwih[r * d_in..(r + 1) * d_in]);
                axpy(a, h_prev, &mut gwhh[r * hidden..(r + 1) * hidden]);
                axpy(a, &wih[r * d_in..(r + 1) * d_in], gxt);
                axpy(a, &whh[r * hidden..(r + 1) * hidden], &mut dh_next);
            }
        }
    }
    graph.accumulate(grads, saved.x, gx);
    graph.accumulate(grads, saved.w.w_ih, gwih);
    graph.accumulate(grads, saved.w.w_hh, gwhh);
    graph.accumulate(grads, saved.w.bias, gb);
}
