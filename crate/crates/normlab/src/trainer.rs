//! Toy-scale causal-LM training: AdamW with decoupled weight decay, linear
//! warmup into cosine decay, global-norm gradient clipping, and deterministic
//! synthetic corpora. Divergence is a logged outcome, never a crash.

use crate::blocks::{
    init_params, loss_and_grads, save_checkpoint, ModelConfig, ModelError, ModelParams, ParamKind,
};
use crate::tensor::{splitmix64, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DatasetKind {
    /// Records of `prefix ++ delimiter ++ prefix`: the second half is exactly
    /// predictable from the first.
    Copy,
    /// Records of `a b (a+b mod vocab)` triples.
    ModularAdd,
    /// A bundled public-domain text excerpt tokenized as bytes.
    ByteText,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Copy => write!(f, "copy"),
            Self::ModularAdd => write!(f, "modular_add"),
            Self::ByteText => write!(f, "byte_text"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Self::Copy),
            "modular_add" => Ok(Self::ModularAdd),
            "byte_text" => Ok(Self::ByteText),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

/// Full training recipe over a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub eval_interval: u64,
    /// When false (the default), weight decay touches only linear weights,
    /// never gains or embeddings.
    pub decay_all: bool,
}

impl TrainConfig {
    /// Copy-task baseline at desk scale.
    pub fn toy_copy(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            lr_peak: 1e-3,
            lr_min: 1e-4,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            clip_threshold: 1.0,
            seed,
            dataset: DatasetKind::Copy,
            eval_interval: 100,
            decay_all: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        let err = |field, msg: String| Err(ModelError::InvalidConfig { field, msg });
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_peak) {
            return err("lr_min", format!("need 0 < lr_min ({}) <= lr_peak ({})", self.lr_min, self.lr_peak));
        }
        if self.warmup_steps > self.total_steps {
            return err(
                "warmup_steps",
                format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            );
        }
        if self.total_steps == 0 {
            return err("total_steps", "must be at least 1".into());
        }
        for (field, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return err(field, format!("{beta} not in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if !(self.clip_threshold > 0.0) {
            return err("clip_threshold", format!("{} must be positive", self.clip_threshold));
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay", format!("{} must be nonnegative", self.weight_decay));
        }
        if self.eval_interval == 0 {
            return err("eval_interval", "must be at least 1".into());
        }
        match self.dataset {
            DatasetKind::Copy => {
                if self.model.vocab < 3 {
                    return err("vocab", "copy task needs vocab >= 3".into());
                }
                if self.model.context < 3 {
                    return err("context", "copy task needs context >= 3".into());
                }
            }
            DatasetKind::ByteText => {
                if self.model.vocab < 256 {
                    return err("vocab", "byte_text needs vocab >= 256".into());
                }
            }
            DatasetKind::ModularAdd => {}
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then cosine decay
/// reaching `lr_min` at `total_steps` (and staying there after).
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Scales all gradients by threshold/g when the global Euclidean norm g
/// exceeds the threshold; returns the pre-clip norm.
pub fn clip_grads(grads: &mut [Matrix], threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            *g = g.scaled(scale);
        }
    }
    norm
}

/// AdamW first/second moments, shaped like the parameters, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> =
            params.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay update:
/// m←β₁m+(1−β₁)g; v←β₂v+(1−β₂)g²; θ←θ−lr·(m̂/(√v̂+1e−8)+wd·θ).
/// Weight decay applies to [`ParamKind::Linear`] slots unless `decay_all`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) {
    assert_eq!(grads.len(), params.values.len(), "one gradient per slot");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, slot) in params.layout.slots.iter().enumerate() {
        let wd = if cfg.decay_all || slot.kind == ParamKind::Linear {
            cfg.weight_decay
        } else {
            0.0
        };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.values[i].data_mut();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * theta[k]);
        }
    }
}

/// A token stream plus the alignment granularity training windows respect.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tokens: Vec<usize>,
    pub record: usize,
}

const BYTE_TEXT: &str = "Alice was beginning to get very tired of sitting by her sister on the \
bank, and of having nothing to do: once or twice she had peeped into the book her sister was \
reading, but it had no pictures or conversations in it, and what is the use of a book, thought \
Alice, without pictures or conversations? So she was considering in her own mind (as well as she \
could, for the hot day made her feel very sleepy and stupid), whether the pleasure of making a \
daisy-chain would be worth the trouble of getting up and picking the daisies, when suddenly a \
White Rabbit with pink eyes ran close by her. There was nothing so very remarkable in that; nor \
did Alice think it so very much out of the way to hear the Rabbit say to itself, Oh dear! Oh \
dear! I shall be late! (when she thought it over afterwards, it occurred to her that she ought \
to have wondered at this, but at the time it all seemed quite natural); but when the Rabbit \
actually took a watch out of its waistcoat-pocket, and looked at it, and then hurried on, Alice \
started to her feet, for it flashed across her mind that she had never before seen a rabbit with \
either a waistcoat-pocket, or a watch to take out of it, and burning with curiosity, she ran \
across the field after it, and fortunately was just in time to see it pop down a large \
rabbit-hole under the hedge.";

/// Deterministic token stream of exactly `length` tokens.
///
/// Copy records are `record` tokens long: a prefix drawn from [2, vocab),
/// the delimiter 1, the prefix again, delimiter padding. Modular-add emits
/// `a b (a+b mod vocab)` triples. Byte text repeats the bundled excerpt.
pub fn synthetic_dataset(
    kind: DatasetKind,
    seed: u64,
    length: usize,
    vocab: usize,
    record: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut tokens = Vec::with_capacity(length + record);
    match kind {
        DatasetKind::Copy => {
            assert!(vocab >= 3, "copy needs tokens above the delimiter");
            assert!(record >= 3, "copy record needs room for a prefix pair");
            let prefix_len = (record - 1) / 2;
            while tokens.len() < length {
                let prefix: Vec<usize> =
                    (0..prefix_len).map(|_| rng.random_range(2..vocab)).collect();
                tokens.extend_from_slice(&prefix);
                tokens.push(1);
                tokens.extend_from_slice(&prefix);
                while tokens.len() % record != 0 {
                    tokens.push(1);
                }
            }
            tokens.truncate(length);
            Dataset { tokens, record }
        }
        DatasetKind::ModularAdd => {
            while tokens.len() < length {
                let a = rng.random_range(0..vocab);
                let b = rng.random_range(0..vocab);
                tokens.extend_from_slice(&[a, b, (a + b) % vocab]);
            }
            tokens.truncate(length);
            Dataset { tokens, record: 3 }
        }
        DatasetKind::ByteText => {
            let bytes = BYTE_TEXT.as_bytes();
            tokens.extend(bytes.iter().cycle().take(length).map(|&b| b as usize));
            Dataset { tokens, record: 1 }
        }
    }
}

/// One record-aligned (tokens, targets) window.
fn sample_window(ds: &Dataset, context: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let max_start = (ds.tokens.len() - context - 1) / ds.record;
    let offset = ds.record * rng.random_range(0..=max_start);
    (
        ds.tokens[offset..offset + context].to_vec(),
        ds.tokens[offset + 1..offset + context + 1].to_vec(),
    )
}

/// Per-step training metrics, one row per executed step.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub diverged: bool,
}

/// Periodic held-out loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalMetrics {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalMetrics>,
}

/// Fixed CSV header for per-step metrics.
pub const METRICS_CSV_HEADER: &str = "step,lr,loss,grad_norm,diverged";

/// Fixed CSV header for eval metrics.
pub const EVAL_CSV_HEADER: &str = "step,loss";

impl MetricsLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.step, s.lr, s.loss, s.grad_norm, s.diverged
            ));
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for e in &self.evals {
            out.push_str(&format!("{},{}\n", e.step, e.loss));
        }
        out
    }
}

/// Everything a finished (or diverged) run leaves behind.
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub diverged_at: Option<u64>,
}

fn mean_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[(Vec<usize>, Vec<usize>)],
) -> Result<(f64, Vec<Matrix>, bool), ModelError> {
    let per_element: Vec<_> = batch
        .par_iter()
        .map(|(tokens, targets)| loss_and_grads(cfg, params, tokens, targets))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut diverged = false;
    let mut grads: Vec<Matrix> =
        params.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for lg in &per_element {
        diverged |= lg.diverged;
        loss += lg.loss * scale;
        for (acc, g) in grads.iter_mut().zip(&lg.grads) {
            *acc = acc.add(&g.scaled(scale));
        }
    }
    Ok((loss, grads, diverged || !loss.is_finite()))
}

fn eval_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[(Vec<usize>, Vec<usize>)],
) -> Result<f64, ModelError> {
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|(tokens, targets)| {
            let mut tm = crate::blocks::build_tape(cfg, params, tokens)?;
            let loss = tm.tape.cross_entropy(tm.logits, targets);
            Ok::<f64, ModelError>(tm.tape.value(loss).get(0, 0))
        })
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs the loop: sample batch → mean loss and gradients → clip → AdamW →
/// schedule. Stops early with the divergence step recorded on a non-finite
/// loss. Writes a final checkpoint (with optimizer state) when given a path.
pub fn train(
    cfg: &TrainConfig,
    checkpoint_path: Option<&std::path::Path>,
) -> Result<TrainOutcome, ModelError> {
    train_with_hook(cfg, checkpoint_path, |_, _, _| Ok(()))
}

/// [`train`] with an observer called at the top of every step, before that
/// step's update, with the current parameters and the step's batch.
pub fn train_with_hook(
    cfg: &TrainConfig,
    checkpoint_path: Option<&std::path::Path>,
    mut hook: impl FnMut(u64, &ModelParams, &[(Vec<usize>, Vec<usize>)]) -> Result<(), ModelError>,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let model = &cfg.model;
    let mut params = init_params(model, cfg.seed);
    let mut state = OptimizerState::new(&params);
    let record = match cfg.dataset {
        DatasetKind::Copy => model.context,
        DatasetKind::ModularAdd => 3,
        DatasetKind::ByteText => 1,
    };
    let length = 256 * model.context + record + 1;
    let ds = synthetic_dataset(cfg.dataset, splitmix64(cfg.seed ^ 0xda7a), length, model.vocab, record);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xba7c4));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xe7a1));
    let eval_batch: Vec<_> =
        (0..cfg.batch_size).map(|_| sample_window(&ds, model.context, &mut eval_rng)).collect();

    let mut metrics = MetricsLog::default();
    let mut diverged_at = None;
    for step in 1..=cfg.total_steps {
        let lr = lr_schedule(cfg, step);
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| sample_window(&ds, model.context, &mut batch_rng))
            .collect();
        hook(step, &params, &batch)?;
        let (loss, mut grads, diverged) = mean_loss_and_grads(model, &params, &batch)?;
        if diverged {
            metrics.steps.push(StepMetrics { step, lr, loss, grad_norm: f64::NAN, diverged: true });
            diverged_at = Some(step);
            break;
        }
        let grad_norm = clip_grads(&mut grads, cfg.clip_threshold);
        adamw_step(&mut params, &grads, &mut state, cfg, lr);
        metrics.steps.push(StepMetrics { step, lr, loss, grad_norm, diverged: false });
        if step % cfg.eval_interval == 0 {
            metrics.evals.push(EvalMetrics { step, loss: eval_loss(model, &params, &eval_batch)? });
        }
    }

    if let Some(path) = checkpoint_path {
        let last_step = metrics.steps.last().map_or(0, |s| s.step);
        save_checkpoint(
            path,
            model,
            cfg.seed,
            last_step,
            &params,
            Some((&state.m, &state.v, state.t)),
        )?;
    }
    Ok(TrainOutcome { metrics, params, optimizer: state, diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{load_checkpoint, BlockScheme};

    fn small_train_config(seed: u64) -> TrainConfig {
        let mut model = ModelConfig::toy(2, 16, 2, 16);
        model.context = 8;
        model.ffn_dim = 32;
        model.scheme = BlockScheme::HybridNorm;
        let mut cfg = TrainConfig::toy_copy(model, seed);
        cfg.total_steps = 40;
        cfg.warmup_steps = 5;
        cfg.eval_interval = 20;
        cfg
    }

    #[test]
    fn lr_schedule_hand_values() {
        let cfg = TrainConfig::toy_copy(ModelConfig::toy(1, 4, 1, 4), 0);
        // lr_peak 1e-3, lr_min 1e-4, warmup 50, total 500.
        assert_eq!(lr_schedule(&cfg, 0), 0.0);
        assert!((lr_schedule(&cfg, 25) - 5e-4).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 50) - 1e-3).abs() < 1e-15);
        // Midpoint of the decay phase: lr_min + (lr_peak − lr_min)/2.
        let mid = lr_schedule(&cfg, 50 + (500 - 50) / 2);
        assert!((mid - (1e-4 + (1e-3 - 1e-4) / 2.0)).abs() < 1e-15);
        assert_eq!(lr_schedule(&cfg, 500), 1e-4);
        assert_eq!(lr_schedule(&cfg, 700), 1e-4);
    }

    #[test]
    fn clip_grads_contract() {
        let mut grads = vec![Matrix::from_raw(1, 2, vec![3.0, 4.0])];
        let norm = clip_grads(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);

        let mut grads = vec![Matrix::from_raw(1, 1, vec![2.0])];
        let norm = clip_grads(&mut grads, 1.0);
        assert_eq!(norm, 2.0);
        assert!((grads[0].get(0, 0) - 1.0).abs() < 1e-12);

        let mut grads = vec![
            Matrix::from_raw(1, 2, vec![5.0, -2.0]),
            Matrix::from_raw(2, 1, vec![0.5, 7.0]),
        ];
        clip_grads(&mut grads, 1.0);
        let post: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(post <= 1.0 + 1e-12);
    }

    #[test]
    fn adamw_hand_examples() {
        let model = ModelConfig::toy(1, 4, 1, 4);
        let mut cfg = TrainConfig::toy_copy(model.clone(), 0);
        cfg.weight_decay = 0.0;
        let mut params = init_params(&model, 0);
        let idx = params.slot_index("layer0.w_q");
        let before = params.values[idx].get(0, 0);
        let mut state = OptimizerState::new(&params);
        let mut grads: Vec<Matrix> =
            params.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        grads[idx].set(0, 0, 1.0);
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1);
        // Bias correction makes m̂ = 1, v̂ = 1 at t = 1: update ≈ −0.1.
        let delta = params.values[idx].get(0, 0) - before;
        assert!((delta + 0.1).abs() < 1e-8, "delta {delta}");

        // Zero grad, wd 0.1, lr 0.1: linear weights shrink by (1 − 0.01),
        // gains do not decay.
        let mut cfg = TrainConfig::toy_copy(model.clone(), 0);
        cfg.weight_decay = 0.1;
        let mut params = init_params(&model, 0);
        let gain_idx = params.slot_index("layer0.ffn_norm");
        let w_before = params.values[idx].get(0, 1);
        let mut state = OptimizerState::new(&params);
        let zeros: Vec<Matrix> =
            params.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        adamw_step(&mut params, &zeros, &mut state, &cfg, 0.1);
        assert!((params.values[idx].get(0, 1) - w_before * 0.99).abs() < 1e-15);
        assert_eq!(params.values[gain_idx].get(0, 0), 1.0);

        // decay_all pulls gains toward zero too.
        cfg.decay_all = true;
        adamw_step(&mut params, &zeros, &mut state, &cfg, 0.1);
        assert!((params.values[gain_idx].get(0, 0) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn dataset_construction() {
        let ds = synthetic_dataset(DatasetKind::Copy, 9, 64, 8, 8);
        assert_eq!(ds.tokens.len(), 64);
        // Each record: 3-token prefix, delimiter, prefix, delimiter pad.
        for r in ds.tokens.chunks(8) {
            assert_eq!(r[3], 1);
            assert_eq!(&r[0..3], &r[4..7]);
            assert_eq!(r[7], 1);
            assert!(r[0] >= 2 && r[0] < 8);
        }
        let again = synthetic_dataset(DatasetKind::Copy, 9, 64, 8, 8);
        assert_eq!(ds.tokens, again.tokens);

        let ds = synthetic_dataset(DatasetKind::ModularAdd, 4, 30, 7, 3);
        for r in ds.tokens.chunks(3) {
            assert_eq!((r[0] + r[1]) % 7, r[2]);
            assert!(r.iter().all(|&t| t < 7));
        }

        let ds = synthetic_dataset(DatasetKind::ByteText, 0, 2000, 256, 1);
        assert!(ds.tokens.iter().all(|&t| t < 256));
        assert_eq!(&ds.tokens[0..5], &[b'A' as usize, b'l' as usize, b'i' as usize, b'c' as usize, b'e' as usize]);
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let cfg = small_train_config(1);
        let out = train(&cfg, None).unwrap();
        assert!(out.diverged_at.is_none());
        assert_eq!(out.metrics.steps.len(), 40);
        let first = out.metrics.steps[0].loss;
        let last = out.metrics.steps.last().unwrap().loss;
        assert!(last < first, "no learning: {first} -> {last}");
        for s in &out.metrics.steps {
            assert_eq!(s.lr, lr_schedule(&cfg, s.step));
            assert!(s.loss.is_finite());
        }
        assert_eq!(out.metrics.evals.len(), 2);

        let again = train(&cfg, None).unwrap();
        assert_eq!(out.metrics, again.metrics);
    }

    #[test]
    fn checkpoint_written_with_optimizer_roundtrip() {
        let cfg = small_train_config(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.ckpt");
        let out = train(&cfg, Some(&path)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 40);
        assert_eq!(loaded.config, cfg.model);
        for (a, b) in loaded.params.values.iter().zip(&out.params.values) {
            assert_eq!(a.data(), b.data());
        }
        let (m, v, t) = loaded.optimizer.unwrap();
        assert_eq!(t, out.optimizer.t);
        for (a, b) in m.iter().zip(&out.optimizer.m) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in v.iter().zip(&out.optimizer.v) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn divergence_is_logged_not_thrown() {
        let mut cfg = small_train_config(3);
        // A hopeless learning rate on a deep Post-Norm stack.
        cfg.model.scheme = BlockScheme::PostNorm;
        cfg.model.layers = 6;
        cfg.lr_peak = 1e6;
        cfg.lr_min = 1e5;
        cfg.warmup_steps = 0;
        cfg.total_steps = 30;
        let out = train(&cfg, None).unwrap();
        if let Some(at) = out.diverged_at {
            let last = out.metrics.steps.last().unwrap();
            assert_eq!(last.step, at);
            assert!(last.diverged);
            assert_eq!(out.metrics.steps.len() as u64, at);
        }
    }

    #[test]
    fn config_validation_messages() {
        let mut cfg = small_train_config(0);
        cfg.lr_min = 0.0;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::InvalidConfig { field: "lr_min", .. })
        ));
        let mut cfg = small_train_config(0);
        cfg.warmup_steps = 100;
        cfg.total_steps = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = small_train_config(0);
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_train_config(0);
        cfg.dataset = DatasetKind::ByteText;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::InvalidConfig { field: "vocab", .. })
        ));
    }
}
