use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};
use crate::{AutodiffError, Result};

pub(crate) struct Conv1dSaved {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
}

struct Dims {
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    kernel: usize,
    out_len: usize,
}

/// Range of output positions `t` for which `t·stride + k − padding` lands
/// inside `[0, len)`.
fn valid_range(k: usize, stride: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    // smallest t with t*stride + k >= padding
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    // largest t with t*stride + k - padding <= len - 1
    let hi = if len + padding > k {
        ((len - 1 + padding - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl<T: Real> Graph<T> {
    /// 1-D cross-correlation: `x [batch, in_ch, len]`, `w [out_ch, in_ch, kernel]`,
    /// `b [out_ch]`, zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); d.batch * d.out_ch * d.out_len];
        for bi in 0..d.batch {
            for o in 0..d.out_ch {
                let orow = &mut out[(bi * d.out_ch + o) * d.out_len..][..d.out_len];
                orow.iter_mut().for_each(|v| *v = bs[o]);
                for c in 0..d.in_ch {
                    let xrow = &xs[(bi * d.in_ch + c) * d.len..][..d.len];
                    for k in 0..d.kernel {
                        let wv = ws[(o * d.in_ch + c) * d.kernel + k];
                        let (lo, hi) = valid_range(k, stride, padding, d.len, d.out_len);
                        if lo >= hi {
                            continue;
                        }
                        if stride == 1 {
                            let src = &xrow[lo + k - padding..hi + k - padding];
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(src) {
                                *ov += wv * xv;
                            }
                        } else {
                            for t in lo..hi {
                                orow[t] += wv * xrow[t * stride + k - padding];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![d.batch, d.out_ch, d.out_len], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv1d(Conv1dSaved { x, w, b, stride, padding }), needs))
    }
}

fn conv_dims(sx: &[usize], sw: &[usize], sb: &[usize], stride: usize, padding: usize) -> Result<Dims> {
    if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
        return Err(AutodiffError::Shape(format!(
            "conv1d: input {sx:?}, weight {sw:?}, bias {sb:?} (expected [batch, in_ch, len], [out_ch, in_ch, kernel], [out_ch])"
        )));
    }
    if sx[1] != sw[1] {
        return Err(AutodiffError::Shape(format!(
            "conv1d: input has {} channels but weight expects {}",
            sx[1], sw[1]
        )));
    }
    if sb[0] != sw[0] {
        return Err(AutodiffError::Shape(format!(
            "conv1d: bias length {} does not match {} output channels",
            sb[0], sw[0]
        )));
    }
    if stride == 0 {
        return Err(AutodiffError::InvalidArgument("conv1d: stride must be ≥ 1".into()));
    }
    let (len, kernel) = (sx[2], sw[2]);
    if kernel == 0 || kernel > len + 2 * padding {
        return Err(AutodiffError::Shape(format!(
            "conv1d: kernel {kernel} does not fit length {len} with padding {padding}"
        )));
    }
    Ok(Dims {
        batch: sx[0],
        in_ch: sx[1],
        len,
        out_ch: sw[0],
        kernel,
        out_len: (len + 2 * padding - kernel) / stride + 1,
    })
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    saved: &Conv1dSaved,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let Conv1dSaved { x, w, b, stride, padding } = *saved;
    let d = conv_dims(graph.shape(x), graph.shape(w), graph.shape(b), stride, padding)
        .expect("validated in forward");
    let (xs, ws) = (graph.value(x).data(), graph.value(w).data());
    let want_x = graph.needs(x);
    let want_w = graph.needs(w);
    let mut gx = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); ws.len()] } else { Vec::new() };
    let mut gb = vec![T::zero(); d.out_ch];

    for bi in 0..d.batch {
        for o in 0..d.out_ch {
            let grow = &g[(bi * d.out_ch + o) * d.out_len..][..d.out_len];
            gb[o] += grow.iter().copied().sum::<T>();
            for c in 0..d.in_ch {
                let base_x = (bi * d.in_ch + c) * d.len;
                for k in 0..d.kernel {
                    let widx = (o * d.in_ch + c) * d.kernel + k;
                    let (lo, hi) = valid_range(k, stride, padding, d.len, d.out_len);
                    if want_w {
                        let mut acc = T::zero();
                        for t in lo..hi {
                            acc += grow[t] * xs[base_x + t * stride + k - padding];
                        }
                        gw[widx] += acc;
                    }
                    if want_x {
                        let wv = ws[widx];
                        for t in lo..hi {
                            gx[base_x + t * stride + k - padding] += wv * grow[t];
                        }
                    }
                }
            }
        }
    }
    if want_x {
        graph.accumulate(grads, x, gx);
    }
    if want_w {
        graph.accumulate(grads, w, gw);
    }
    graph.accumulate(grads, b, gb);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1usize..8 {
            for kernel in [1usize, 3, 5, 7] {
                for padding in 0..=kernel / 2 + 1 {
                    for stride in 1..4 {
                        let Some(span) = (len + 2 * padding).checked_sub(kernel) else { continue };
                        let out_len = span / stride + 1;
                        for k in 0..kernel {
                            let inside: Vec<usize> = (0..out_len)
                                .filter(|&t: &usize| (t * stride + k).checked_sub(padding).is_some_and(|i| i < len))
                                .collect();
                            let (lo, hi) = valid_range(k, stride, padding, len, out_len);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), inside, "len {len} k {k} pad {padding}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 7]));
        let w = g.input(t(&[2, 3, 3], &[0.7; 18]));
        let b = g.input(t(&[2], &[1.5, -0.25]));
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 7]);
        for (i, row) in g.value(y).data().chunks(7).enumerate() {
            let expect = if i % 2 == 0 { 1.5 } else { -0.25 };
            assert!(row.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.input(t(&[1, 3, 4], &data));
        let mut wd = vec![0.0; 9];
        for c in 0..3 {
            wd[c * 3 + c] = 1.0;
        }
        let w = g.input(t(&[3, 3, 1], &wd));
        let b = g.input(Tensor::zeros(vec![3]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn sliding_window_difference() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
        let w = g.input(t(&[1, 1, 3], &[1., 0., -1.]));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[-2., -2., -2.]);
    }

    #[test]
    fn strided_padded_output_length() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1, 1, 10], 1.0));
        let w = g.input(Tensor::full(vec![1, 1, 5], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b, 3, 2).unwrap();
        // floor((10 + 4 - 5)/3) + 1 = 4; windows start at -2, 1, 4, 7
        assert_eq!(g.value(y).data(), &[3., 5., 5., 3.]);
    }

    #[test]
    fn mismatched_channels_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 10]));
        let w = g.input(Tensor::zeros(vec![4, 3, 5]));
        let b = g.input(Tensor::zeros(vec![4]));
        let err = g.conv1d(x, w, b, 1, 2).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
        let w2 = g.input(Tensor::zeros(vec![4, 2, 15]));
        assert!(g.conv1d(x, w2, b, 1, 2).is_err());
    }
}
