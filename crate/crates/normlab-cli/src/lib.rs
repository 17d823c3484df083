//! Command implementations behind the `normlab` binary: flat key=value
//! configs with command-line overrides, one manifest per run, and exit-status
//! discipline (0 pass, 1 violated property, 2 usage or config error).

use normlab::attention::{
    attn_forward_single, attn_jacobians_prenorm, attn_jacobians_qk, attn_jacobians_qkv,
    AttentionWeights, AttnJacobians, BoundVariant,
};
use normlab::blocks::{BlockScheme, ModelConfig, ModelError};
use normlab::diagnostics::{
    attention_entropy, bound_campaign, cost_cross_check, cost_csv, cost_report, coupling_csv,
    diagnostics_csv, per_layer_grad_norms, slack_csv, token_cosine_similarity, CampaignDims,
    CampaignSummary, DiagnosticsRecord, MetricRow,
};
use normlab::tensor::{splitmix64, Matrix};
use normlab::trainer::{train_with_hook, TrainConfig};
use normlab::vecjac::{finite_diff_jacobian, Jacobian, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Bumped whenever an output format changes; recorded in every manifest.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Model(ModelError),
    #[error("{0}")]
    Attention(#[from] normlab::attention::AttentionError),
}

impl CliError {
    fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config { field: field.into(), msg: msg.into() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig { field, msg } => Self::Config { field: field.into(), msg },
            other => Self::Model(other),
        }
    }
}

/// Parses the flat key=value config format: one `key = value` per line,
/// `#` lines are comments, duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::field(format!("line {}", lineno + 1), format!("expected key=value, got `{line}`"))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(CliError::field(format!("line {}", lineno + 1), "empty key".to_string()));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::field(key, "duplicate config key".to_string()));
        }
    }
    Ok(map)
}

/// Applies `key=value` command-line overrides on top of file values.
pub fn apply_overrides(
    map: &mut BTreeMap<String, String>,
    overrides: &[String],
) -> Result<(), CliError> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::field(item.clone(), "override must be key=value".to_string()))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

/// Pulls typed values out of the flat map, materializing defaults, so the
/// manifest can record the full resolved config and unknown keys can be
/// rejected with their names.
struct Resolver<'a> {
    map: &'a BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> Self {
        Self { map, resolved: BTreeMap::new() }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        let value = match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| CliError::field(key, format!("cannot parse `{raw}`")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T, CliError> {
        let raw = self
            .map
            .get(key)
            .ok_or_else(|| CliError::field(key, "required (runs never seed from the clock)".to_string()))?;
        let value = raw
            .parse::<T>()
            .map_err(|_| CliError::field(key, format!("cannot parse `{raw}`")))?;
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Comma-separated list; the canonical joined form is recorded.
    fn get_list<T: FromStr + Display>(&mut self, key: &str, default: &str) -> Result<Vec<T>, CliError> {
        let raw = self.map.get(key).map_or(default, |s| s.as_str());
        let mut values = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            values.push(
                part.parse::<T>()
                    .map_err(|_| CliError::field(key, format!("cannot parse list item `{part}`")))?,
            );
        }
        if values.is_empty() {
            return Err(CliError::field(key, "list must not be empty".to_string()));
        }
        let canonical = values.iter().map(T::to_string).collect::<Vec<_>>().join(",");
        self.resolved.insert(key.to_string(), canonical);
        Ok(values)
    }

    /// `none` or a float, for the positional-encoding base.
    fn get_rope(&mut self, key: &str, default: Option<f64>) -> Result<Option<f64>, CliError> {
        let value = match self.map.get(key).map(|s| s.as_str()) {
            None => default,
            Some("none") => None,
            Some(raw) => Some(
                raw.parse::<f64>()
                    .map_err(|_| CliError::field(key, format!("cannot parse `{raw}`")))?,
            ),
        };
        let canonical = value.map_or("none".to_string(), |v| v.to_string());
        self.resolved.insert(key.to_string(), canonical);
        Ok(value)
    }

    /// Rejects config keys no knob consumed, then yields the resolved map.
    fn finish(self) -> Result<BTreeMap<String, String>, CliError> {
        for key in self.map.keys() {
            if !self.resolved.contains_key(key) {
                return Err(CliError::field(key, "unknown config key".to_string()));
            }
        }
        Ok(self.resolved)
    }
}

/// `model.*` keys over a baseline. Profile owns the scheme knob itself
/// (`profile.schemes`), so the scheme key is optional here.
fn resolve_model_fields(
    r: &mut Resolver,
    mut m: ModelConfig,
    with_scheme: bool,
) -> Result<ModelConfig, CliError> {
    m.layers = r.get("model.layers", m.layers)?;
    m.d_model = r.get("model.d_model", m.d_model)?;
    m.ffn_dim = r.get("model.ffn_dim", 4 * m.d_model)?;
    m.heads = r.get("model.heads", m.heads)?;
    m.kv_heads = r.get("model.kv_heads", m.heads)?;
    m.vocab = r.get("model.vocab", m.vocab)?;
    m.context = r.get("model.context", m.context)?;
    if with_scheme {
        m.scheme = r.get("model.scheme", m.scheme)?;
    }
    m.first_block = r.get("model.first_block", m.first_block)?;
    m.init = r.get("model.init", m.init)?;
    m.rope_theta = r.get_rope("model.rope_theta", m.rope_theta)?;
    m.tied_embeddings = r.get("model.tied_embeddings", m.tied_embeddings)?;
    m.causal = r.get("model.causal", m.causal)?;
    m.mix_ln_split = r.get("model.mix_ln_split", m.mix_ln_split)?;
    m.attn_out_norm = r.get("model.attn_out_norm", m.attn_out_norm)?;
    m.norm_eps = r.get("model.norm_eps", m.norm_eps)?;
    Ok(m)
}

fn resolve_model(r: &mut Resolver) -> Result<ModelConfig, CliError> {
    let mut base = ModelConfig::toy(4, 64, 4, 32);
    base.context = 32;
    let m = resolve_model_fields(r, base, true)?;
    m.validate()?;
    Ok(m)
}

fn resolve_train(r: &mut Resolver, model: ModelConfig, seed: u64) -> Result<TrainConfig, CliError> {
    let base = TrainConfig::toy_copy(model, seed);
    let cfg = TrainConfig {
        lr_peak: r.get("train.lr_peak", base.lr_peak)?,
        lr_min: r.get("train.lr_min", base.lr_min)?,
        warmup_steps: r.get("train.warmup_steps", base.warmup_steps)?,
        total_steps: r.get("train.total_steps", base.total_steps)?,
        batch_size: r.get("train.batch_size", base.batch_size)?,
        beta1: r.get("train.beta1", base.beta1)?,
        beta2: r.get("train.beta2", base.beta2)?,
        weight_decay: r.get("train.weight_decay", base.weight_decay)?,
        clip_threshold: r.get("train.clip_threshold", base.clip_threshold)?,
        dataset: r.get("train.dataset", base.dataset)?,
        eval_interval: r.get("train.eval_interval", base.eval_interval)?,
        decay_all: r.get("train.decay_all", base.decay_all)?,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_dims(r: &mut Resolver, key: &str, default: &str) -> Result<Vec<CampaignDims>, CliError> {
    let raw: Vec<DimsTriple> = r.get_list(key, default)?;
    Ok(raw.into_iter().map(|t| CampaignDims { s: t.0, d: t.1, d_k: t.2 }).collect())
}

/// `SxDxK` dimension triples as list items.
struct DimsTriple(usize, usize, usize);

impl FromStr for DimsTriple {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(format!("`{s}` is not SxDxK"));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| format!("`{p}` is not a number")))
            .collect::<Result<_, _>>()?;
        if nums.iter().any(|&n| n == 0) {
            return Err("dimensions must be positive".to_string());
        }
        Ok(Self(nums[0], nums[1], nums[2]))
    }
}

impl Display for DimsTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0, self.1, self.2)
    }
}

fn parse_variant(name: &str) -> Result<BoundVariant, CliError> {
    match name {
        "pre_norm" => Ok(BoundVariant::PreNorm),
        "pre_qk" => Ok(BoundVariant::PreQk),
        "qkv" => Ok(BoundVariant::Qkv),
        other => Err(CliError::field("variants", format!("unknown bound variant `{other}`"))),
    }
}

/// One JSON document per run: the full resolved config plus provenance, and
/// enough to re-run the command bit-identically (timestamps excluded).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub artifact_version: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
    pub passed: bool,
    pub summary: String,
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::field("manifest", format!("cannot parse {}: {e}", path.display())))
}

/// What a finished command hands back to the binary.
pub struct RunOutcome {
    pub passed: bool,
    pub summary: String,
    pub manifest: RunManifest,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Files a command produced, in deterministic order.
struct OutDir {
    dir: PathBuf,
    written: BTreeSet<String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: BTreeSet::new() })
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), text)?;
        self.written.insert(name.to_string());
        Ok(())
    }

    fn path_for(&mut self, name: &str) -> PathBuf {
        self.written.insert(name.to_string());
        self.dir.join(name)
    }
}

/// Dispatches one command with a fully merged config map, writing all outputs
/// plus `manifest.json` under `out_dir`.
pub fn run_command(
    command: &str,
    config: &BTreeMap<String, String>,
    inputs: Vec<String>,
    out_dir: &Path,
) -> Result<RunOutcome, CliError> {
    let started_at_ms = now_ms();
    let mut out = OutDir::create(out_dir)?;
    let (resolved, seed, passed, summary) = match command {
        "gradcheck" => cmd_gradcheck(config, &mut out)?,
        "bounds" => cmd_bounds(config, &mut out)?,
        "profile" => cmd_profile(config, &mut out)?,
        "flops" => cmd_flops(config, &mut out)?,
        "train" => cmd_train(config, &mut out)?,
        other => return Err(CliError::field("command", format!("unknown command `{other}`"))),
    };
    let manifest = RunManifest {
        command: command.to_string(),
        config: resolved,
        seed,
        artifact_version: ARTIFACT_VERSION,
        inputs,
        outputs: out.written.iter().cloned().collect(),
        started_at_ms,
        finished_at_ms: now_ms(),
        passed,
        summary: summary.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::field("manifest", e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), json + "\n")?;
    Ok(RunOutcome { passed, summary, manifest })
}

/// Re-runs the command recorded in a manifest into a fresh directory. The new
/// manifest matches the old one except for timestamps.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.artifact_version != ARTIFACT_VERSION {
        return Err(CliError::field(
            "artifact_version",
            format!("manifest has version {}, this binary writes {}", manifest.artifact_version, ARTIFACT_VERSION),
        ));
    }
    run_command(&manifest.command, &manifest.config, manifest.inputs.clone(), out_dir)
}

type CommandResult = Result<(BTreeMap<String, String>, u64, bool, String), CliError>;

const GRAD_ABS_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;

struct WorstError {
    abs: f64,
    rel: f64,
    seed: u64,
    dims: CampaignDims,
}

fn sample_attention_instance(rng: &mut ChaCha8Rng, dims: CampaignDims) -> (Matrix, AttentionWeights) {
    let CampaignDims { s, d, d_k } = dims;
    let mut mat = |r: usize, c: usize, scale: f64| {
        Matrix::from_raw(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
    };
    let x = mat(s, d, 1.0);
    let ws = 1.0 / (d as f64).sqrt();
    let w = AttentionWeights::new(
        mat(d, d_k, ws),
        mat(d, d_k, ws),
        mat(d, d_k, ws),
        mat(d_k, d, 1.0 / (d_k as f64).sqrt()),
    );
    (x, w)
}

fn compare_jacobian(analytic: &Jacobian, fd: &Jacobian) -> (f64, f64, bool) {
    let a = analytic.matrix();
    let f = fd.matrix();
    let mut worst_abs = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut pass = true;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let (av, fv) = (a.get(i, j), f.get(i, j));
            let abs = (av - fv).abs();
            let scale = av.abs().max(fv.abs());
            let rel = if scale > 1e-12 { abs / scale } else { 0.0 };
            worst_abs = worst_abs.max(abs);
            worst_rel = worst_rel.max(rel);
            if abs > GRAD_ABS_TOL.max(GRAD_REL_TOL * scale) {
                pass = false;
            }
        }
    }
    (worst_abs, worst_rel, pass)
}

fn cmd_gradcheck(config: &BTreeMap<String, String>, out: &mut OutDir) -> CommandResult {
    let mut r = Resolver::new(config);
    let seed: u64 = r.require("seed")?;
    let dims = parse_dims(&mut r, "gradcheck.dims", "3x4x2,5x8x4")?;
    let seeds: u64 = r.get("gradcheck.seeds", 20u64)?;
    let variant_names: Vec<String> = r.get_list("gradcheck.variants", "pre_norm,pre_qk,qkv")?;
    let inject_fault: bool = r.get("gradcheck.inject_fault", false)?;
    let resolved = r.finish()?;
    if seeds == 0 {
        return Err(CliError::field("gradcheck.seeds", "need at least one seed".to_string()));
    }
    let variants: Vec<BoundVariant> =
        variant_names.iter().map(|n| parse_variant(n)).collect::<Result<_, _>>()?;

    let mut worst: BTreeMap<(String, &'static str), WorstError> = BTreeMap::new();
    let mut failures: Vec<String> = Vec::new();
    let mut first_instance = true;
    for &variant in &variants {
        for &dim in &dims {
            for k in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ k));
                let (x, w) = sample_attention_instance(&mut rng, dim);
                let mut jac: AttnJacobians = match variant {
                    BoundVariant::PreNorm => attn_jacobians_prenorm(&x, &w)?,
                    BoundVariant::PreQk => attn_jacobians_qk(&x, &w)?,
                    BoundVariant::Qkv => attn_jacobians_qkv(&x, &w)?,
                };
                if inject_fault && first_instance {
                    let mut m = jac.d_wq.matrix().clone();
                    m.set(0, 0, m.get(0, 0) + 1e-3);
                    jac.d_wq = Jacobian::new(
                        (jac.d_wq.out_rows, jac.d_wq.out_cols),
                        (jac.d_wq.in_rows, jac.d_wq.in_cols),
                        m,
                    );
                    first_instance = false;
                }
                let weight_jacs: [(&'static str, &Jacobian); 4] = [
                    ("w_q", &jac.d_wq),
                    ("w_k", &jac.d_wk),
                    ("w_v", &jac.d_wv),
                    ("w_o", &jac.d_wo),
                ];
                for (name, analytic) in weight_jacs {
                    let f = |m: &Matrix| {
                        let mut wp = w.clone();
                        match name {
                            "w_q" => wp.w_q = m.clone(),
                            "w_k" => wp.w_k = m.clone(),
                            "w_v" => wp.w_v = m.clone(),
                            _ => wp.w_o = m.clone(),
                        }
                        attn_forward_single(variant, &x, &wp)
                    };
                    let base = match name {
                        "w_q" => &w.w_q,
                        "w_k" => &w.w_k,
                        "w_v" => &w.w_v,
                        _ => &w.w_o,
                    };
                    let fd = finite_diff_jacobian(&f, base, FD_STEP)
                        .map_err(|e| CliError::field("gradcheck", e.to_string()))?;
                    let (abs, rel, pass) = compare_jacobian(analytic, &fd);
                    let entry = worst
                        .entry((variant.name().to_string(), name))
                        .or_insert(WorstError { abs: -1.0, rel: 0.0, seed: 0, dims: dim });
                    if abs > entry.abs {
                        *entry = WorstError { abs, rel, seed: k, dims: dim };
                    }
                    if !pass {
                        failures.push(format!(
                            "variant={} weight={} seed={} dims={}x{}x{}: abs {abs:.3e} rel {rel:.3e}",
                            variant.name(),
                            name,
                            k,
                            dim.s,
                            dim.d,
                            dim.d_k
                        ));
                    }
                }
            }
        }
    }

    let mut csv = String::from("variant,weight,worst_abs,worst_rel,at_seed,at_dims\n");
    for ((variant, weight), e) in &worst {
        csv.push_str(&format!(
            "{},{},{},{},{},{}x{}x{}\n",
            variant, weight, e.abs, e.rel, e.seed, e.dims.s, e.dims.d, e.dims.d_k
        ));
    }
    out.write_text("report.csv", &csv)?;

    let passed = failures.is_empty();
    let summary = if passed {
        format!(
            "gradcheck: {} variants x {} dims x {} seeds within tolerance",
            variants.len(),
            dims.len(),
            seeds
        )
    } else {
        format!("gradcheck: {} mismatches; first: {}", failures.len(), failures[0])
    };
    Ok((resolved, seed, passed, summary))
}

/// Expected dS/dW_Q bound ratios when W_K is scaled x5 and W_V x10.
fn expected_coupling(variant: BoundVariant) -> [f64; 2] {
    match variant {
        BoundVariant::PreNorm => [5.0, 10.0],
        BoundVariant::PreQk => [1.0, 10.0],
        BoundVariant::Qkv => [1.0, 1.0],
    }
}

const COUPLING_TOL: f64 = 1e-9;

fn cmd_bounds(config: &BTreeMap<String, String>, out: &mut OutDir) -> CommandResult {
    let mut r = Resolver::new(config);
    let seed: u64 = r.require("seed")?;
    let trials: usize = r.get("bounds.trials", 100usize)?;
    let dims = parse_dims(&mut r, "bounds.dims", "4x8x4,6x12x6")?;
    let resolved = r.finish()?;
    if trials == 0 {
        return Err(CliError::field("bounds.trials", "need at least one trial".to_string()));
    }

    let mut summaries: Vec<CampaignSummary> = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    for variant in [BoundVariant::PreNorm, BoundVariant::PreQk, BoundVariant::Qkv] {
        let summary = bound_campaign(variant, trials, &dims, seed)?;
        if summary.violations > 0 {
            problems.push(format!("{}: {} bound violations", variant.name(), summary.violations));
        }
        for (row, expected) in summary.coupling.iter().zip(expected_coupling(variant)) {
            if (row.wq_bound_ratio - expected).abs() > COUPLING_TOL {
                problems.push(format!(
                    "{}: scaling {} x{} moved the w_q bound x{} (expected x{})",
                    variant.name(),
                    row.scaled_weight,
                    row.factor,
                    row.wq_bound_ratio,
                    expected
                ));
            }
        }
        summaries.push(summary);
    }
    out.write_text("slack.csv", &slack_csv(&summaries))?;
    out.write_text("coupling.csv", &coupling_csv(&summaries))?;

    for s in &summaries {
        println!("{}: {} trials, {} violations", s.variant.name(), s.trials, s.violations);
        for w in &s.per_weight {
            println!("  {}: max slack {:.6}, {} vacuous", w.weight, w.max_slack, w.vacuous);
        }
    }
    let passed = problems.is_empty();
    let summary = if passed {
        format!("bounds: {} trials per variant, zero violations, coupling exact", trials)
    } else {
        format!("bounds: {}", problems.join("; "))
    };
    Ok((resolved, seed, passed, summary))
}

fn scheme_file_name(scheme: BlockScheme) -> String {
    format!("{}.csv", scheme.to_string().replace(':', "_"))
}

fn cmd_profile(config: &BTreeMap<String, String>, out: &mut OutDir) -> CommandResult {
    let mut r = Resolver::new(config);
    let seed: u64 = r.require("seed")?;
    let schemes: Vec<BlockScheme> =
        r.get_list("profile.schemes", "pre_norm,post_norm,hybrid_norm")?;
    let mut steps: Vec<u64> = r.get_list("profile.steps", "1,100")?;
    steps.sort_unstable();
    steps.dedup();
    let mut base = ModelConfig::toy(8, 64, 4, 32);
    base.context = 32;
    let model = resolve_model_fields(&mut r, base, false)?;
    let last_snapshot = *steps.last().expect("non-empty steps");
    let mut train_cfg = {
        let base = TrainConfig::toy_copy(model.clone(), seed);
        TrainConfig {
            total_steps: r.get("train.total_steps", last_snapshot + 1)?,
            lr_peak: r.get("train.lr_peak", base.lr_peak)?,
            lr_min: r.get("train.lr_min", base.lr_min)?,
            warmup_steps: r.get("train.warmup_steps", base.warmup_steps.min(last_snapshot))?,
            batch_size: r.get("train.batch_size", base.batch_size)?,
            dataset: r.get("train.dataset", base.dataset)?,
            ..base
        }
    };
    let resolved = r.finish()?;
    // Snapshot s reports the model after s optimizer updates, measured on the
    // following step's batch, so the loop must run one step past the last
    // snapshot.
    if train_cfg.total_steps < last_snapshot + 1 {
        return Err(CliError::field(
            "profile.steps",
            format!(
                "snapshot step {last_snapshot} needs train.total_steps >= {}, got {}",
                last_snapshot + 1,
                train_cfg.total_steps
            ),
        ));
    }
    train_cfg.eval_interval = train_cfg.total_steps + 1;

    let mut notes = Vec::new();
    for &scheme in &schemes {
        let mut cfg = train_cfg.clone();
        cfg.model.scheme = scheme;
        cfg.validate()?;
        let mut records: Vec<DiagnosticsRecord> = Vec::new();
        let steps_wanted = steps.clone();
        let outcome = train_with_hook(&cfg, None, |hook_step, params, batch| {
            let step = hook_step - 1;
            if !steps_wanted.contains(&step) {
                return Ok(());
            }
            let mut rows: Vec<MetricRow> = Vec::new();
            let grads = per_layer_grad_norms(&cfg.model, params, batch)?;
            let tokens: Vec<Vec<usize>> = batch.iter().map(|(t, _)| t.clone()).collect();
            let cosine = token_cosine_similarity(&cfg.model, params, &tokens)?;
            let entropy = attention_entropy(&cfg.model, params, &tokens)?;
            for l in 0..cfg.model.layers {
                for (metric, value) in [
                    ("grad_norm", grads.values[l]),
                    ("cosine", cosine[l]),
                    ("entropy", entropy[l]),
                ] {
                    rows.push(MetricRow {
                        layer: l,
                        metric: metric.to_string(),
                        value,
                        diverged: grads.diverged,
                    });
                }
            }
            records.push(DiagnosticsRecord {
                run_id: format!("{scheme}-{step}"),
                scheme: scheme.to_string(),
                init: cfg.model.init.to_string(),
                seed: cfg.seed,
                step,
                rows,
            });
            Ok(())
        })?;
        if let Some(at) = outcome.diverged_at {
            records.push(DiagnosticsRecord {
                run_id: format!("{scheme}-diverged"),
                scheme: scheme.to_string(),
                init: cfg.model.init.to_string(),
                seed: cfg.seed,
                step: at,
                rows: vec![MetricRow {
                    layer: 0,
                    metric: "divergence".to_string(),
                    value: f64::NAN,
                    diverged: true,
                }],
            });
            notes.push(format!("{scheme} diverged at step {at}"));
        }
        out.write_text(&scheme_file_name(scheme), &diagnostics_csv(&records))?;
    }

    let summary = if notes.is_empty() {
        format!("profile: {} schemes, snapshots at {:?}", schemes.len(), steps)
    } else {
        format!("profile: {} schemes, snapshots at {:?}; {}", schemes.len(), steps, notes.join("; "))
    };
    Ok((resolved, seed, true, summary))
}

fn cmd_flops(config: &BTreeMap<String, String>, out: &mut OutDir) -> CommandResult {
    let mut r = Resolver::new(config);
    let seed: u64 = r.get("seed", 0u64)?;
    let schemes: Vec<BlockScheme> = r.get_list("flops.schemes", "pre_norm,hybrid_norm")?;
    let d: usize = r.get("flops.d", 1536usize)?;
    let s: usize = r.get("flops.s", 4096usize)?;
    let layers: usize = r.get("flops.layers", 28usize)?;
    let resolved = r.finish()?;

    let mut reports = Vec::new();
    let mut problems = Vec::new();
    for &scheme in &schemes {
        let report = cost_report(scheme, d as u128, s as u128, layers as u128)
            .map_err(|msg| CliError::field("flops.schemes", msg))?;
        // The integer cross-check instantiates a real layout, which needs an
        // integral 8d/3 FFN width.
        if (8 * d) % 3 == 0 {
            if let Err(msg) = cost_cross_check(&report) {
                problems.push(msg);
            }
        }
        reports.push(report);
    }
    out.write_text("cost.csv", &cost_csv(&reports))?;

    println!(
        "{:<12} {:>12} {:>14} {:>12} {:>16} {:>12} {:>12}",
        "scheme", "norm_params", "main_params", "norm_flops", "main_flops", "param_ratio", "flops_ratio"
    );
    for rep in &reports {
        println!(
            "{:<12} {:>12} {:>14} {:>12} {:>16} {:>12} {:>12}",
            rep.scheme.to_string(),
            rep.norm_params,
            rep.main_params,
            rep.norm_flops,
            rep.main_flops,
            rep.param_ratio.to_string(),
            rep.flops_ratio.to_string(),
        );
    }
    let passed = problems.is_empty();
    let summary = if passed {
        format!("flops: {} schemes at d={d} s={s} L={layers}", reports.len())
    } else {
        format!("flops: {}", problems.join("; "))
    };
    Ok((resolved, seed, passed, summary))
}

fn cmd_train(config: &BTreeMap<String, String>, out: &mut OutDir) -> CommandResult {
    let mut r = Resolver::new(config);
    let seed: u64 = r.require("seed")?;
    let model = resolve_model(&mut r)?;
    let cfg = resolve_train(&mut r, model, seed)?;
    let resolved = r.finish()?;

    let ckpt_path = out.path_for("checkpoint.bin");
    let outcome = normlab::trainer::train(&cfg, Some(&ckpt_path))?;
    out.write_text("metrics.csv", &outcome.metrics.steps_csv())?;
    out.write_text("eval.csv", &outcome.metrics.evals_csv())?;

    let summary = match outcome.diverged_at {
        Some(at) => format!("train: diverged at step {at} of {}", cfg.total_steps),
        None => {
            let last = outcome.metrics.steps.last().expect("at least one step");
            format!("train: {} steps, final loss {:.4}", cfg.total_steps, last.loss)
        }
    };
    Ok((resolved, seed, true, summary))
}
