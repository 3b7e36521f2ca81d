//! CNN epoch encoder, stacked BiLSTM and per-timestep classification head.

use autodiff::{
    AutodiffError, BatchNormConfig, Graph, LstmWeights, Mode, ParamId, ParamStore, Real, RunningStats, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub samples_per_epoch: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub dropout_p: f64,
    pub feature_dim: usize,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub seq_len: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 7,
            samples_per_epoch: 3000,
            conv_filters: vec![64, 128, 128, 256],
            conv_kernel: 5,
            pool_window: 2,
            dropout_p: 0.5,
            feature_dim: 256,
            lstm_hidden: 128,
            lstm_layers: 2,
            seq_len: 20,
            n_classes: 5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn toy() -> Self {
        ModelConfig {
            n_channels: 2,
            samples_per_epoch: 64,
            conv_filters: vec![4, 8, 8, 16],
            feature_dim: 16,
            lstm_hidden: 8,
            seq_len: 4,
            ..Self::default()
        }
    }

    /// Conv padding that preserves length for odd kernels.
    pub fn conv_padding(&self) -> usize {
        self.conv_kernel / 2
    }

    /// Length of each conv block's output after pooling.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut len = self.samples_per_epoch;
        self.conv_filters
            .iter()
            .map(|_| {
                len = (len + 2 * self.conv_padding() + 1).saturating_sub(self.conv_kernel) / self.pool_window.max(1);
                len
            })
            .collect()
    }

    pub fn pooled_len(&self) -> usize {
        self.block_lengths().last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.conv_filters.len() != 4 {
            return bad(format!("conv_filters must have 4 entries, got {}", self.conv_filters.len()));
        }
        let dims = [
            ("n_channels", self.n_channels),
            ("samples_per_epoch", self.samples_per_epoch),
            ("conv_kernel", self.conv_kernel),
            ("pool_window", self.pool_window),
            ("feature_dim", self.feature_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("seq_len", self.seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.conv_filters.contains(&0) {
            return bad("conv filter counts must be positive".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.pooled_len() == 0 {
            return bad(format!(
                "{} samples per epoch collapse to length 0 after 4 poolings of width {}",
                self.samples_per_epoch, self.pool_window
            ));
        }
        Ok(())
    }

    /// Trainable parameter count; excludes batch-norm running statistics.
    pub fn param_count(&self) -> usize {
        let k = self.conv_kernel;
        let mut total = 0;
        let mut c_in = self.n_channels;
        for &f in &self.conv_filters {
            total += c_in * k * f + f; // conv
            total += 2 * f; // batch-norm scale and shift
            c_in = f;
        }
        total += c_in * self.pooled_len() * self.feature_dim + self.feature_dim;
        let h = self.lstm_hidden;
        let mut d_in = self.feature_dim;
        for _ in 0..self.lstm_layers {
            total += 2 * (4 * h * d_in + 4 * h * h + 4 * h);
            d_in = 2 * h;
        }
        total + 2 * h * self.n_classes + self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    initialized: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: Vec<ConvBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
    lstm: Vec<[LstmIds; 2]>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Model configuration plus every parameter and batch-norm buffer.
#[derive(Debug, Clone)]
pub struct SleepStager<T> {
    config: ModelConfig,
    layout: Layout,
    pub store: ParamStore<T>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// Builds the layout against `store`, drawing initial values from `rng`.
/// Parameter order is the declaration order used by checkpoints.
fn declare<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Layout {
    let k = config.conv_kernel;
    let mut c_in = config.n_channels;
    let mut blocks = Vec::new();
    for (i, &f) in config.conv_filters.iter().enumerate() {
        let fan_in = (c_in * k) as f64;
        let p = format!("block{i}");
        blocks.push(ConvBlock {
            weight: store.add_param(&format!("{p}.conv.weight"), uniform(rng, vec![f, c_in, k], (6.0 / fan_in).sqrt())),
            bias: store.add_param(&format!("{p}.conv.bias"), uniform(rng, vec![f], 1.0 / fan_in.sqrt())),
            gamma: store.add_param(&format!("{p}.bn.gamma"), Tensor::full(vec![f], T::one())),
            beta: store.add_param(&format!("{p}.bn.beta"), Tensor::zeros(vec![f])),
            running_mean: store.add_buffer(&format!("{p}.bn.running_mean"), Tensor::zeros(vec![f])),
            running_var: store.add_buffer(&format!("{p}.bn.running_var"), Tensor::full(vec![f], T::one())),
            initialized: store.add_buffer(&format!("{p}.bn.initialized"), Tensor::zeros(vec![1])),
        });
        c_in = f;
    }
    let flat = c_in * config.pooled_len();
    let fd = config.feature_dim;
    let bound = 1.0 / (flat as f64).sqrt();
    let proj_w = store.add_param("proj.weight", uniform(rng, vec![fd, flat], bound));
    let proj_b = store.add_param("proj.bias", uniform(rng, vec![fd], bound));

    let h = config.lstm_hidden;
    let lstm_bound = 1.0 / (h as f64).sqrt();
    let mut d_in = fd;
    let mut lstm = Vec::new();
    for layer in 0..config.lstm_layers {
        let mut dir = |name: &str| {
            let p = format!("lstm{layer}.{name}");
            let mut bias: Tensor<T> = uniform(rng, vec![4 * h], lstm_bound);
            // Gate order i, f, g, o: start with the forget gate open.
            bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b += T::one());
            LstmIds {
                w_ih: store.add_param(&format!("{p}.w_ih"), uniform(rng, vec![4 * h, d_in], lstm_bound)),
                w_hh: store.add_param(&format!("{p}.w_hh"), uniform(rng, vec![4 * h, h], lstm_bound)),
                bias: store.add_param(&format!("{p}.bias"), bias),
            }
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        lstm.push([fwd, bwd]);
        d_in = 2 * h;
    }
    let head_bound = 1.0 / (d_in as f64).sqrt();
    let head_w = store.add_param("head.weight", uniform(rng, vec![config.n_classes, d_in], head_bound));
    let head_b = store.add_param("head.bias", uniform(rng, vec![config.n_classes], head_bound));
    Layout { blocks, proj_w, proj_b, lstm, head_w, head_b }
}

impl<T: Real> SleepStager<T> {
    /// Seed-deterministic initialization. Batch-norm statistics start
    /// uninitialized.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = declare(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(SleepStager { config: config.clone(), layout, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> SleepStager<U> {
        let mut store = ParamStore::new();
        let layout = declare::<U>(&self.config, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for id in self.store.ids() {
            store.set_value(id, self.store.value(id).cast()).expect("identical layout");
        }
        SleepStager { config: self.config.clone(), layout, store }
    }

    /// Whether every batch-norm layer has running statistics.
    pub fn bn_initialized(&self) -> bool {
        self.layout.blocks.iter().all(|b| self.store.value(b.initialized).item() > T::zero())
    }

    /// Freezes or unfreezes the conv blocks and the epoch projection.
    pub fn freeze_feature_extractor(&mut self, frozen: bool) {
        let mut ids = vec![self.layout.proj_w, self.layout.proj_b];
        for b in &self.layout.blocks {
            ids.extend([b.weight, b.bias, b.gamma, b.beta]);
        }
        for id in ids {
            self.store.set_frozen(id, frozen);
        }
    }

    fn running(&self, store: &ParamStore<T>) -> Vec<RunningStats<T>> {
        self.layout
            .blocks
            .iter()
            .map(|b| RunningStats {
                mean: store.value(b.running_mean).data().to_vec(),
                var: store.value(b.running_var).data().to_vec(),
                initialized: store.value(b.initialized).item() > T::zero(),
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 4
            && shape[0] > 0
            && shape[1] == c.seq_len
            && shape[2] == c.n_channels
            && shape[3] == c.samples_per_epoch;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::Shape(format!(
                "model input {shape:?}, expected [batch, {}, {}, {}]",
                c.seq_len, c.n_channels, c.samples_per_epoch
            ))
            .into())
        }
    }

    /// Per-epoch feature vectors `[batch, seq, feature_dim]` taken from the
    /// projection output, before any temporal mixing.
    pub fn epoch_features<R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<RunningStats<T>>)> {
        self.check_input(g.shape(input))?;
        let c = &self.config;
        let (batch, seq) = (g.shape(input)[0], c.seq_len);
        let mut x = g.reshape(input, vec![batch * seq, c.n_channels, c.samples_per_epoch])?;
        let mut stats = self.running(store);
        let bn = BatchNormConfig::default();
        for (b, running) in self.layout.blocks.iter().zip(stats.iter_mut()) {
            let (w, bias) = (g.param(store, b.weight), g.param(store, b.bias));
            let conv = g.conv1d(x, w, bias, 1, c.conv_padding())?;
            let (gamma, beta) = (g.param(store, b.gamma), g.param(store, b.beta));
            let norm = g.batchnorm1d(conv, gamma, beta, running, mode, &bn)?;
            let act = g.relu(norm);
            x = g.maxpool1d(act, c.pool_window, c.pool_window)?;
        }
        let x = g.dropout(x, c.dropout_p, mode == Mode::Train, rng)?;
        let flat_len = g.value(x).numel() / (batch * seq);
        let flat = g.reshape(x, vec![batch * seq, flat_len])?;
        let (pw, pb) = (g.param(store, self.layout.proj_w), g.param(store, self.layout.proj_b));
        let feats = g.linear(flat, pw, pb)?;
        Ok((g.reshape(feats, vec![batch, seq, c.feature_dim])?, stats))
    }

    /// Logits `[batch, seq, n_classes]` computed from an explicit store. The
    /// returned statistics are the batch-norm running values after this pass.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<RunningStats<T>>)> {
        let (mut x, stats) = self.epoch_features(store, g, input, mode, rng)?;
        for [fwd, bwd] in &self.layout.lstm {
            let weights = |g: &mut Graph<T>, ids: &LstmIds| LstmWeights {
                w_ih: g.param(store, ids.w_ih),
                w_hh: g.param(store, ids.w_hh),
                bias: g.param(store, ids.bias),
            };
            let (f, b) = (weights(g, fwd), weights(g, bwd));
            x = g.bilstm_layer(x, &f, &b)?;
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, vec![s[0] * s[1], s[2]])?;
        let (hw, hb) = (g.param(store, self.layout.head_w), g.param(store, self.layout.head_b));
        let logits = g.linear(flat, hw, hb)?;
        Ok((g.reshape(logits, vec![s[0], s[1], self.config.n_classes])?, stats))
    }

    /// Forward pass against the model's own store. Train mode folds the
    /// batch statistics into the running buffers.
    pub fn forward<R: Rng + ?Sized>(&mut self, g: &mut Graph<T>, input: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let (logits, stats) = self.forward_with(&self.store, g, input, mode, rng)?;
        if mode == Mode::Train {
            for (b, s) in self.layout.blocks.iter().zip(stats) {
                self.store.value_mut(b.running_mean).data_mut().copy_from_slice(&s.mean);
                self.store.value_mut(b.running_var).data_mut().copy_from_slice(&s.var);
                self.store.value_mut(b.initialized).data_mut()[0] = T::one();
            }
        }
        Ok(logits)
    }

    /// Eval-mode logits for a `[batch, seq, channels, samples]` tensor.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let (logits, _) = self.forward_with(&self.store, &mut g, x, Mode::Eval, &mut unused)?;
        Ok(g.value(logits).clone())
    }

    /// Parameter and buffer names in declaration order.
    pub fn names(&self) -> Vec<String> {
        self.store.ids().map(|id| self.store.name(id).to_string()).collect()
    }
}
