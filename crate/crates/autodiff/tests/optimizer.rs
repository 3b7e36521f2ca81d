use autodiff::{adam_step, clip_gradients, Graph, OptimConfig, ParamStore, Tensor};
use proptest::prelude::*;

/// Hand-rolled scalar Adam recurrence.
fn adam_scalar(mut p: f64, grads: &[f64], cfg: &OptimConfig) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = m / (1.0 - cfg.adam_beta1.powi(t));
        let v_hat = v / (1.0 - cfg.adam_beta2.powi(t));
        p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
    }
    p
}

#[test]
fn two_constant_gradient_steps_match_recurrence() {
    let cfg = OptimConfig::pretrain();
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("p", Tensor::scalar(0.25));
    for _ in 0..2 {
        store.grad_mut(id)[0] = 0.8;
        adam_step(&mut store, &cfg);
    }
    let expect = adam_scalar(0.25, &[0.8, 0.8], &cfg);
    assert!((store.value(id).item() - expect).abs() < 1e-12);
}

#[test]
fn varying_gradients_match_recurrence() {
    let cfg = OptimConfig { learning_rate: 0.01, ..OptimConfig::pretrain() };
    let grads = [0.5, -1.2, 3.0, 0.0, 0.1];
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("p", Tensor::scalar(-1.0));
    for &g in &grads {
        store.grad_mut(id)[0] = g;
        adam_step(&mut store, &cfg);
    }
    assert!((store.value(id).item() - adam_scalar(-1.0, &grads, &cfg)).abs() < 1e-12);
}

fn train_steps(seed: u64, steps: usize) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let w = store.add_param("w", Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap());
    let b = store.add_param("b", Tensor::zeros(vec![3]));
    let x = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let cfg = OptimConfig::pretrain();
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let logits = g.linear(xv, wv, bv).unwrap();
        let mut drop_rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen());
        let d = g.dropout(logits, 0.2, true, &mut drop_rng).unwrap();
        let loss = g.weighted_cross_entropy(d, &[0, 1, 2, 1, 0], &[1.0, 2.0, 0.5], None).unwrap();
        store.zero_grad();
        g.backward(loss, &mut store).unwrap();
        clip_gradients(&mut store, cfg.max_grad_norm);
        adam_step(&mut store, &cfg);
    }
    store.snapshot().into_iter().flat_map(|t| t.into_data()).collect()
}

#[test]
fn identical_seeds_give_bit_identical_parameters() {
    let a = train_steps(42, 25);
    let b = train_steps(42, 25);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_ne!(a, train_steps(43, 25));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn clipping_shrinks_and_keeps_direction(
        grads in prop::collection::vec(-50.0f64..50.0, 1..40),
        max_norm in 0.1f64..20.0,
    ) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("p", Tensor::zeros(vec![grads.len()]));
        store.grad_mut(id).copy_from_slice(&grads);
        let factor = clip_gradients(&mut store, max_norm);
        prop_assert!(factor > 0.0 && factor <= 1.0);
        prop_assert!(store.grad_norm() <= max_norm * (1.0 + 1e-6) || factor == 1.0);
        for (after, before) in store.grad(id).iter().zip(&grads) {
            prop_assert!(after.abs() <= before.abs());
            prop_assert!((after - factor * before).abs() <= 1e-12 * before.abs().max(1.0));
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..20), step in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("p", Tensor::new(vec![values.len()], values.clone()).unwrap());
        store.set_step(step);
        adam_step(&mut store, &OptimConfig::pretrain());
        prop_assert_eq!(store.value(id).data(), &values[..]);
    }
}
