use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};
use crate::{AutodiffError, Result};

pub(crate) struct WeightedCeSaved<T> {
    logits: Var,
    probs: Vec<T>,
    targets: Vec<usize>,
    /// Per-sample weight already divided by the total weight.
    coeff: Vec<T>,
}

impl<T: Real> Graph<T> {
    /// Class-weighted cross-entropy over rows of `logits [n, classes]`.
    ///
    /// Each row contributes `w[target]·(−log softmax)`, and the sum is divided
    /// by the total weight of the contributing rows. Rows with `mask[i] == false`
    /// contribute nothing.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[T],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "weighted_cross_entropy: logits must be [n, classes], got {s:?}"
            )));
        }
        let (n, classes) = (s[0], s[1]);
        if n == 0 {
            return Err(AutodiffError::EmptyBatch);
        }
        if targets.len() != n || class_weights.len() != classes || mask.is_some_and(|m| m.len() != n) {
            return Err(AutodiffError::Shape(format!(
                "weighted_cross_entropy: {n} rows of {classes} classes, {} targets, {} class weights",
                targets.len(),
                class_weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(AutodiffError::InvalidArgument(format!(
                "weighted_cross_entropy: target {bad} outside 0..{classes}"
            )));
        }
        if class_weights.iter().any(|&w| w < T::zero() || !w.is_finite()) {
            return Err(AutodiffError::InvalidArgument(
                "weighted_cross_entropy: class weights must be finite and non-negative".into(),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        let mut weights = Vec::with_capacity(n);
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let nll = lse - row[targets[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            let active = mask.map_or(true, |m| m[i]);
            let w = if active { class_weights[targets[i]] } else { T::zero() };
            loss += w * nll;
            total += w;
            weights.push(w);
        }
        if total <= T::zero() {
            return Err(AutodiffError::InvalidArgument(
                "weighted_cross_entropy: selected samples carry zero total weight".into(),
            ));
        }
        let coeff = weights.into_iter().map(|w| w / total).collect();
        let needs = self.needs(logits);
        let saved = WeightedCeSaved { logits, probs, targets: targets.to_vec(), coeff };
        Ok(self.push(Tensor::scalar(loss / total), Op::WeightedCe(saved), needs))
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    saved: &WeightedCeSaved<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let classes = graph.shape(saved.logits)[1];
    let mut gl = saved.probs.clone();
    for (i, row) in gl.chunks_mut(classes).enumerate() {
        let k = g[0] * saved.coeff[i];
        row[saved.targets[i]] -= T::one();
        row.iter_mut().for_each(|v| *v *= k);
    }
    graph.accumulate(grads, saved.logits, gl);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.input(Tensor::new(vec![rows.len(), c], data).unwrap())
    }

    fn nll(row: &[f64], t: usize) -> f64 {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[t]
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut g = Graph::new();
        let x = logits(&mut g, &[&[50.0, 0.0, 0.0], &[0.0, 0.0, 50.0]]);
        let l = g.weighted_cross_entropy(x, &[0, 2], &[1.0; 3], None).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_classes_for_any_weights() {
        let mut g = Graph::new();
        let x = logits(&mut g, &[&[0.3; 5], &[0.3; 5], &[0.3; 5]]);
        let l = g
            .weighted_cross_entropy(x, &[0, 3, 4], &[0.2, 1.0, 7.0, 2.5, 0.9], None)
            .unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_of_per_sample_nll() {
        let rows: [&[f64]; 2] = [&[0.2, -1.0], &[1.5, 0.4]];
        let (a, b) = (nll(rows[0], 0), nll(rows[1], 1));
        let mut g = Graph::new();
        let x = logits(&mut g, &rows);
        let l = g.weighted_cross_entropy(x, &[0, 1], &[1.0, 3.0], None).unwrap();
        assert!((g.value(l).item() - (a + 3.0 * b) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let rows: [&[f64]; 2] = [&[0.2, -1.0], &[1.5, 0.4]];
        let mut g = Graph::new();
        let x = logits(&mut g, &rows);
        let l = g
            .weighted_cross_entropy(x, &[0, 1], &[1.0, 3.0], Some(&[true, false]))
            .unwrap();
        assert!((g.value(l).item() - nll(rows[0], 0)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![0, 5]));
        assert!(matches!(
            g.weighted_cross_entropy(x, &[], &[1.0; 5], None),
            Err(AutodiffError::EmptyBatch)
        ));
    }

    #[test]
    fn invalid_targets_and_weights_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![1, 3]));
        assert!(g.weighted_cross_entropy(x, &[3], &[1.0; 3], None).is_err());
        assert!(g.weighted_cross_entropy(x, &[0], &[-1.0, 1.0, 1.0], None).is_err());
        assert!(g.weighted_cross_entropy(x, &[0], &[0.0, 1.0, 1.0], None).is_err());
    }
}
