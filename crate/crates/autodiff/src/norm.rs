use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};
use crate::{AutodiffError, Mode, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the newest batch in the running estimates.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: 0.1, eps: 1e-5 }
    }
}

/// Per-channel running mean and (biased) variance used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

pub(crate) struct BatchNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) struct BatchNormEvalSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

fn check(sx: &[usize], sg: &[usize], sb: &[usize], channels: usize) -> Result<()> {
    if sx.len() != 3 || sg != [sx.get(1).copied().unwrap_or(0)] || sb != sg || channels != sg[0] {
        return Err(AutodiffError::Shape(format!(
            "batchnorm1d: input {sx:?}, gamma {sg:?}, beta {sb:?}, running stats for {channels} channels"
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// Batch normalization over `(batch, length)` for each channel of `[batch, ch, len]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `running`; eval mode normalizes with `running`, which must have been
    /// updated at least once.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: Mode,
        cfg: &BatchNormConfig,
    ) -> Result<Var> {
        check(self.shape(x), self.shape(gamma), self.shape(beta), running.mean.len())?;
        let s = self.shape(x);
        let (batch, ch, len) = (s[0], s[1], s[2]);
        let count = batch * len;
        let eps = T::of(cfg.eps);
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xs.len()];

        match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "batchnorm1d: train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let n = T::of(count as f64);
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut sum = T::zero();
                    for b in 0..batch {
                        sum += xs[(b * ch + c) * len..][..len].iter().copied().sum::<T>();
                    }
                    let m = sum / n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &xs[(b * ch + c) * len..][..len] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = sq / n;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); xs.len()];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * len;
                        for i in base..base + len {
                            xhat[i] = (xs[i] - mean[c]) * inv_std[c];
                            out[i] = gs[c] * xhat[i] + bs[c];
                        }
                    }
                }
                let momentum = T::of(cfg.momentum);
                for c in 0..ch {
                    if running.initialized {
                        running.mean[c] = (T::one() - momentum) * running.mean[c] + momentum * mean[c];
                        running.var[c] = (T::one() - momentum) * running.var[c] + momentum * var[c];
                    } else {
                        running.mean[c] = mean[c];
                        running.var[c] = var[c];
                    }
                }
                running.initialized = true;
                let value = Tensor::new(s.to_vec(), out)?;
                let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
                let saved = BatchNormSaved { x, gamma, beta, xhat, inv_std };
                Ok(self.push(value, Op::BatchNormTrain(saved), needs))
            }
            Mode::Eval => {
                if !running.initialized {
                    return Err(AutodiffError::Uninitialized(
                        "batchnorm1d: eval mode before any running-statistics update".into(),
                    ));
                }
                let inv_std: Vec<T> =
                    running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * len;
                        for i in base..base + len {
                            out[i] = gs[c] * (xs[i] - running.mean[c]) * inv_std[c] + bs[c];
                        }
                    }
                }
                let value = Tensor::new(s.to_vec(), out)?;
                let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
                let saved = BatchNormEvalSaved { x, gamma, beta, mean: running.mean.clone(), inv_std };
                Ok(self.push(value, Op::BatchNormEval(saved), needs))
            }
        }
    }
}

pub(crate) fn backward_train<T: Real>(
    graph: &Graph<T>,
    saved: &BatchNormSaved<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let s = graph.shape(saved.x);
    let (batch, ch, len) = (s[0], s[1], s[2]);
    let n = T::of((batch * len) as f64);
    let gs = graph.value(saved.gamma).data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for i in base..base + len {
                dgamma[c] += g[i] * saved.xhat[i];
                dbeta[c] += g[i];
            }
        }
    }
    if graph.needs(saved.x) {
        // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = g·gamma
        let mut gx = vec![T::zero(); g.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * len;
                let k = gs[c] * saved.inv_std[c] / n;
                for i in base..base + len {
                    gx[i] = k * (n * g[i] - dbeta[c] - saved.xhat[i] * dgamma[c]);
                }
            }
        }
        graph.accumulate(grads, saved.x, gx);
    }
    graph.accumulate(grads, saved.gamma, dgamma);
    graph.accumulate(grads, saved.beta, dbeta);
}

pub(crate) fn backward_eval<T: Real>(
    graph: &Graph<T>,
    saved: &BatchNormEvalSaved<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let s = graph.shape(saved.x);
    let (batch, ch, len) = (s[0], s[1], s[2]);
    let xs = graph.value(saved.x).data();
    let gs = graph.value(saved.gamma).data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    let mut gx = vec![T::zero(); g.len()];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for i in base..base + len {
                let xhat = (xs[i] - saved.mean[c]) * saved.inv_std[c];
                dgamma[c] += g[i] * xhat;
                dbeta[c] += g[i];
                gx[i] = g[i] * gs[c] * saved.inv_std[c];
            }
        }
    }
    graph.accumulate(grads, saved.x, gx);
    graph.accumulate(grads, saved.gamma, dgamma);
    graph.accumulate(grads, saved.beta, dbeta);
}
