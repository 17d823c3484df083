//! Analysis instruments: per-layer gradient-norm profiles, token cosine
//! similarity, attention entropy, gradient-bound sampling campaigns, and the
//! normalization parameter/FLOPs accounting.

use crate::attention::{gradient_bounds, AttentionError, AttentionWeights, BoundReport, BoundVariant};
use crate::blocks::{
    loss_and_grads, model_forward_traced, BlockScheme, ModelConfig, ModelError, ModelParams,
    ParamLayout,
};
use crate::tensor::{splitmix64, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;

/// One (layer, metric, value) observation; `diverged` tags values that came
/// from a non-finite loss.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricRow {
    pub layer: usize,
    pub metric: String,
    pub value: f64,
    pub diverged: bool,
}

/// Snapshot of the layer-wise instruments for one model at one step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiagnosticsRecord {
    pub run_id: String,
    pub scheme: String,
    pub init: String,
    pub seed: u64,
    pub step: u64,
    pub rows: Vec<MetricRow>,
}

/// Fixed CSV header for diagnostics emission.
pub const DIAGNOSTICS_CSV_HEADER: &str = "step,layer,metric,value,diverged";

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = String::from(DIAGNOSTICS_CSV_HEADER);
    out.push('\n');
    for rec in records {
        for row in &rec.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rec.step, row.layer, row.metric, row.value, row.diverged
            ));
        }
    }
    out
}

/// Per-layer scalars plus a divergence tag covering the whole batch.
#[derive(Debug, Clone)]
pub struct LayerMetrics {
    pub values: Vec<f64>,
    pub diverged: bool,
}

/// For each layer, the Euclidean norm of the concatenation of that layer's
/// parameter gradients, averaged over the batch elements whose loss was
/// finite. Fully divergent batches yield NaN values with the tag set.
pub fn per_layer_grad_norms(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[(Vec<usize>, Vec<usize>)],
) -> Result<LayerMetrics, ModelError> {
    let layers = cfg.layers;
    let mut sums = vec![0.0; layers];
    let mut used = 0usize;
    let mut diverged = false;
    for (tokens, targets) in batch {
        let lg = loss_and_grads(cfg, params, tokens, targets)?;
        if lg.diverged {
            diverged = true;
            continue;
        }
        for l in 0..layers {
            let mut sq = 0.0;
            for (slot, grad) in params.layout.slots.iter().zip(&lg.grads) {
                if slot.layer == Some(l) {
                    sq += grad.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
            sums[l] += sq.sqrt();
        }
        used += 1;
    }
    let values = if used == 0 {
        vec![f64::NAN; layers]
    } else {
        sums.into_iter().map(|s| s / used as f64).collect()
    };
    Ok(LayerMetrics { values, diverged })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity over all unordered token pairs of each layer's
/// output, averaged over the batch. Zero-norm vectors contribute 0.
pub fn token_cosine_similarity(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[Vec<usize>],
) -> Result<Vec<f64>, ModelError> {
    let mut sums = vec![0.0; cfg.layers];
    for tokens in batch {
        assert!(tokens.len() >= 2, "need at least two tokens for pairs");
        let trace = model_forward_traced(cfg, params, tokens)?;
        for (l, x) in trace.block_outputs.iter().enumerate() {
            let s = x.rows();
            let mut total = 0.0;
            for i in 0..s {
                for j in i + 1..s {
                    total += cosine(x.row(i), x.row(j));
                }
            }
            sums[l] += total / (s * (s - 1) / 2) as f64;
        }
    }
    Ok(sums.into_iter().map(|v| v / batch.len() as f64).collect())
}

/// Shannon entropy −Σ a·ln a of each attention row over its unmasked
/// positions, averaged over rows, heads, and batch, per layer.
pub fn attention_entropy(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[Vec<usize>],
) -> Result<Vec<f64>, ModelError> {
    let mut sums = vec![0.0; cfg.layers];
    for tokens in batch {
        let trace = model_forward_traced(cfg, params, tokens)?;
        for (l, heads) in trace.attn_probs.iter().enumerate() {
            let mut total = 0.0;
            let mut rows = 0usize;
            for a in heads {
                for i in 0..a.rows() {
                    let limit = if cfg.causal { i + 1 } else { a.cols() };
                    let h: f64 = a.row(i)[..limit]
                        .iter()
                        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                        .sum();
                    total += h;
                    rows += 1;
                }
            }
            sums[l] += total / rows as f64;
        }
    }
    Ok(sums.into_iter().map(|v| v / batch.len() as f64).collect())
}

/// Dimensions one campaign trial runs at.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CampaignDims {
    pub s: usize,
    pub d: usize,
    pub d_k: usize,
}

/// Worst observed slack for one weight across a campaign.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WeightSlack {
    pub weight: &'static str,
    pub max_slack: f64,
    pub vacuous: usize,
}

/// Bound ratio under rescaling one weight by a factor, read off the dS/dW_Q
/// bound.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CouplingRow {
    pub scaled_weight: &'static str,
    pub factor: f64,
    pub wq_bound_ratio: f64,
}

/// Aggregate of a sampling campaign for one bound variant.
#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub variant: BoundVariant,
    pub trials: usize,
    pub violations: usize,
    pub per_weight: Vec<WeightSlack>,
    pub coupling: Vec<CouplingRow>,
    /// One report per trial, in trial order.
    pub reports: Vec<BoundReport>,
}

fn sample_instance(rng: &mut ChaCha8Rng, dims: CampaignDims) -> (Matrix, AttentionWeights) {
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

/// Runs [`gradient_bounds`] over `trials` random instances (dimensions cycle
/// through `dims`, per-trial seeds derived as splitmix64(seed XOR trial)),
/// then measures the coupling contrast at a fixed instance: W_K ×5 and
/// W_V ×10 against the base dS/dW_Q bound.
pub fn bound_campaign(
    variant: BoundVariant,
    trials: usize,
    dims: &[CampaignDims],
    seed: u64,
) -> Result<CampaignSummary, AttentionError> {
    assert!(trials >= 1, "need at least one trial");
    assert!(!dims.is_empty(), "need at least one dimension triple");
    let reports: Vec<BoundReport> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ t as u64));
            let (x, w) = sample_instance(&mut rng, dims[t % dims.len()]);
            gradient_bounds(variant, &x, &w)
        })
        .collect::<Result<_, _>>()?;

    let mut violations = 0;
    let weights = ["w_o", "w_v", "w_q", "w_k"];
    let mut per_weight: Vec<WeightSlack> =
        weights.iter().map(|&w| WeightSlack { weight: w, max_slack: 0.0, vacuous: 0 }).collect();
    for report in &reports {
        violations += report.violations();
        for ws in per_weight.iter_mut() {
            let e = report.entry(ws.weight);
            if e.vacuous {
                ws.vacuous += 1;
            } else if e.slack > ws.max_slack {
                ws.max_slack = e.slack;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x636f_7570_6c65));
    let (x, w) = sample_instance(&mut rng, dims[0]);
    let base = gradient_bounds(variant, &x, &w)?.entry("w_q").bound;
    let mut coupling = Vec::new();
    for (name, factor) in [("w_k", 5.0), ("w_v", 10.0)] {
        let mut scaled = w.clone();
        match name {
            "w_k" => scaled.w_k = w.w_k.scaled(factor),
            _ => scaled.w_v = w.w_v.scaled(factor),
        }
        let bound = gradient_bounds(variant, &x, &scaled)?.entry("w_q").bound;
        coupling.push(CouplingRow { scaled_weight: name, factor, wq_bound_ratio: bound / base });
    }

    Ok(CampaignSummary { variant, trials, violations, per_weight, coupling, reports })
}

/// Fixed CSV header for per-trial slack rows.
pub const SLACK_CSV_HEADER: &str = "variant,weight,trial,s,d,d_k,measured,bound,slack,vacuous";

pub fn slack_csv(summaries: &[CampaignSummary]) -> String {
    let mut out = String::from(SLACK_CSV_HEADER);
    out.push('\n');
    for summary in summaries {
        for (t, report) in summary.reports.iter().enumerate() {
            for e in &report.entries {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    summary.variant.name(),
                    e.weight,
                    t,
                    report.s,
                    report.d,
                    report.d_k,
                    e.measured,
                    e.bound,
                    e.slack,
                    e.vacuous
                ));
            }
        }
    }
    out
}

/// Fixed CSV header for the coupling-contrast table.
pub const COUPLING_CSV_HEADER: &str = "variant,scaled_weight,factor,wq_bound_ratio";

pub fn coupling_csv(summaries: &[CampaignSummary]) -> String {
    let mut out = String::from(COUPLING_CSV_HEADER);
    out.push('\n');
    for summary in summaries {
        for row in &summary.coupling {
            out.push_str(&format!(
                "{},{},{},{}\n",
                summary.variant.name(),
                row.scaled_weight,
                row.factor,
                row.wq_bound_ratio
            ));
        }
    }
    out
}

/// Exact nonnegative rational, always stored reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Rational {
    pub num: u128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Rational {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Normalization-versus-main parameter and FLOPs accounting for one scheme.
/// Ratios are norm/main, exact.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostReport {
    pub scheme: BlockScheme,
    pub d: u128,
    pub s: u128,
    pub layers: u128,
    pub norm_params: u128,
    pub main_params: u128,
    pub norm_flops: u128,
    pub main_flops: u128,
    pub param_ratio: Rational,
    pub flops_ratio: Rational,
}

/// Closed-form accounting: per layer a Pre-Norm block carries 2d gain
/// parameters and 8sd normalization FLOPs against 12d² main parameters and
/// 24sd² + 4s²d main FLOPs; HybridNorm doubles the normalization side.
/// Embedding and output layers are outside the accounting scope.
pub fn cost_report(
    scheme: BlockScheme,
    d: u128,
    s: u128,
    layers: u128,
) -> Result<CostReport, String> {
    assert!(d > 0 && s > 0 && layers > 0, "positive dimensions required");
    let norm_per_layer = match scheme {
        BlockScheme::PreNorm => 2 * d,
        BlockScheme::HybridNorm => 4 * d,
        other => return Err(format!("cost accounting covers pre_norm and hybrid_norm, not {other}")),
    };
    let norm_params = norm_per_layer * layers;
    let main_params = 12 * d * d * layers;
    let norm_flops = 4 * s * norm_per_layer * layers;
    let main_flops = (24 * s * d * d + 4 * s * s * d) * layers;
    Ok(CostReport {
        scheme,
        d,
        s,
        layers,
        norm_params,
        main_params,
        norm_flops,
        main_flops,
        param_ratio: Rational::new(norm_params, main_params),
        flops_ratio: Rational::new(norm_flops, main_flops),
    })
}

/// Instantiates a parameter layout at the report's dimensions (all-query
/// heads, FFN width 8d/3) and checks the closed-form counts against the
/// actual per-layer gain and linear parameter totals.
pub fn cost_cross_check(report: &CostReport) -> Result<(), String> {
    let d = report.d as usize;
    if (8 * d) % 3 != 0 {
        return Err(format!("d = {d}: 8d/3 is not an integer FFN width"));
    }
    let mut cfg = ModelConfig::toy(report.layers as usize, d, 1, 2);
    cfg.scheme = report.scheme;
    cfg.ffn_dim = 8 * d / 3;
    cfg.validate().map_err(|e| e.to_string())?;
    let layout = ParamLayout::build(&cfg);
    if layout.layer_norm_param_count() != report.norm_params {
        return Err(format!(
            "norm params: layout has {}, closed form {}",
            layout.layer_norm_param_count(),
            report.norm_params
        ));
    }
    if layout.layer_linear_param_count() != report.main_params {
        return Err(format!(
            "main params: layout has {}, closed form {}",
            layout.layer_linear_param_count(),
            report.main_params
        ));
    }
    Ok(())
}

/// Fixed CSV header for cost reports.
pub const COST_CSV_HEADER: &str =
    "scheme,d,s,layers,norm_params,main_params,norm_flops,main_flops,param_ratio,flops_ratio";

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scheme,
            r.d,
            r.s,
            r.layers,
            r.norm_params,
            r.main_params,
            r.norm_flops,
            r.main_flops,
            r.param_ratio,
            r.flops_ratio
        ));
    }
    out
}
