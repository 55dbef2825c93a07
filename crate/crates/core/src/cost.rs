//! Exact parameter and multiply-accumulate counts per stage and layer.
//!
//! MACs cover matrix products only (linear layers, attention scores and
//! mixing, head convolutions as im2col products). Softmax, normalization,
//! activations and elementwise adds are not counted. These are the same
//! products an enabled [`crate::tensor::MacCounter`] tallies, so the
//! analytic and instrumented totals agree exactly.

use std::fmt::{self, Write as _};

use crate::bench::{bench_latency, BenchResult, BenchSettings};
use crate::config::{ModelConfig, Variant};
use crate::weights::{head_channels, WeightStore, HEAD_BRANCHES, HEAD_STAGES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Patch projection and positional tables (search-side MACs).
    PatchEmbed,
    /// One-time template pass; MACs only, its parameters are shared.
    TemplatePass,
    FeatureExtraction,
    Interaction,
    FinalNorm,
    Head,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PatchEmbed => "patch-embed",
            Stage::TemplatePass => "template-pass",
            Stage::FeatureExtraction => "FE",
            Stage::Interaction => "AI",
            Stage::FinalNorm => "final-norm",
            Stage::Head => "head",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCost {
    pub stage: Stage,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub index: usize,
    pub stage: Stage,
    pub params: u64,
    /// Search-side MACs of this layer for one frame.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub label: String,
    pub config: ModelConfig,
    pub include_template_pass: bool,
    pub stages: Vec<StageCost>,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    pub fn stage(&self, stage: Stage) -> StageCost {
        self.stages
            .iter()
            .copied()
            .find(|s| s.stage == stage)
            .unwrap_or(StageCost {
                stage,
                params: 0,
                macs: 0,
            })
    }

    /// Aligned text table of stages and layers.
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "variant {}  C={} heads={} mlp_ratio={} P={} template={}x{} search={}x{}  FE={} AI={}",
            self.label,
            c.embed_dim,
            c.num_heads,
            c.mlp_ratio,
            c.patch_size,
            c.template_size.0,
            c.template_size.1,
            c.search_size.0,
            c.search_size.1,
            c.fe_layers,
            c.ai_layers
        );
        let _ = writeln!(
            s,
            "MACs count matrix products only; template pass {}",
            if self.include_template_pass { "included" } else { "excluded" }
        );
        let _ = writeln!(s, "{:<16} {:>14} {:>16}", "stage", "params", "MACs");
        for st in &self.stages {
            let _ = writeln!(s, "{:<16} {:>14} {:>16}", st.stage.to_string(), st.params, st.macs);
        }
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:>14} {:>16}",
                format!("  layer {} ({})", l.index, l.stage),
                l.params,
                l.macs
            );
        }
        let _ = writeln!(s, "{:<16} {:>14} {:>16}", "total", self.total_params, self.total_macs);
        let _ = writeln!(
            s,
            "{:<16} {:>13.2}M {:>15.3}G",
            "",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        s
    }
}

/// Parameters of one encoder layer.
pub fn layer_params(config: &ModelConfig) -> u64 {
    let c = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    4 * (c * c + c) + (c * hidden + hidden) + (hidden * c + c) + 4 * c
}

/// MACs of a self-attention layer over `n` tokens.
pub fn self_layer_macs(config: &ModelConfig, n: u64) -> u64 {
    let c = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    3 * n * c * c + 2 * n * n * c + n * c * c + 2 * n * c * hidden
}

/// MACs of an interaction layer: `nx` queries over `nx + nz` keys/values.
pub fn interaction_layer_macs(config: &ModelConfig, nx: u64, nz: u64) -> u64 {
    let c = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    let kv = nx + nz;
    nx * c * c + 2 * kv * c * c + 2 * nx * kv * c + nx * c * c + 2 * nx * c * hidden
}

fn patch_macs(config: &ModelConfig, n: u64) -> u64 {
    let p = config.patch_size as u64;
    n * 3 * p * p * config.embed_dim as u64
}

fn head_costs(config: &ModelConfig) -> (u64, u64) {
    let positions = (config.score_size() * config.score_size()) as u64;
    let mut params = 0;
    let mut macs = 0;
    for (_, width) in HEAD_BRANCHES {
        for (stage, (cin, cout)) in head_channels(config.embed_dim, width).into_iter().enumerate() {
            let (cin, cout) = (cin as u64, cout as u64);
            params += cout * cin * 9 + cout;
            if stage + 1 < HEAD_STAGES {
                params += 2 * cout;
            }
            macs += cout * cin * 9 * positions;
        }
    }
    (params, macs)
}

/// Parameter and per-frame MAC counts enumerated from the configuration.
pub fn cost_report(config: &ModelConfig, include_template_pass: bool, label: impl Into<String>) -> CostReport {
    let c = config.embed_dim as u64;
    let p = config.patch_size as u64;
    let nx = config.search_tokens() as u64;
    let nz = config.template_tokens() as u64;
    let per_layer = layer_params(config);

    let layers: Vec<LayerCost> = (0..config.num_layers())
        .map(|i| {
            let (stage, macs) = if i < config.fe_layers {
                (Stage::FeatureExtraction, self_layer_macs(config, nx))
            } else {
                (Stage::Interaction, interaction_layer_macs(config, nx, nz))
            };
            LayerCost {
                index: i,
                stage,
                params: per_layer,
                macs,
            }
        })
        .collect();
    let sum = |stage: Stage| -> StageCost {
        let (params, macs) = layers
            .iter()
            .filter(|l| l.stage == stage)
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs));
        StageCost { stage, params, macs }
    };

    let template_macs = if include_template_pass {
        patch_macs(config, nz) + config.num_layers() as u64 * self_layer_macs(config, nz)
    } else {
        0
    };
    let (head_params, head_macs) = head_costs(config);
    let stages = vec![
        StageCost {
            stage: Stage::PatchEmbed,
            params: 3 * p * p * c + c + (nz + nx) * c,
            macs: patch_macs(config, nx),
        },
        StageCost {
            stage: Stage::TemplatePass,
            params: 0,
            macs: template_macs,
        },
        sum(Stage::FeatureExtraction),
        sum(Stage::Interaction),
        StageCost {
            stage: Stage::FinalNorm,
            params: 2 * c,
            macs: 0,
        },
        StageCost {
            stage: Stage::Head,
            params: head_params,
            macs: head_macs,
        },
    ];
    CostReport {
        label: label.into(),
        config: config.clone(),
        include_template_pass,
        total_params: stages.iter().map(|s| s.params).sum(),
        total_macs: stages.iter().map(|s| s.macs).sum(),
        stages,
        layers,
    }
}

pub fn count_params(config: &ModelConfig) -> CostReport {
    cost_report(config, false, "custom")
}

pub fn count_macs(config: &ModelConfig, include_template_pass: bool) -> CostReport {
    cost_report(config, include_template_pass, "custom")
}

fn rel_diff(ours: f64, theirs: f64) -> f64 {
    (ours - theirs) / theirs
}

/// Side-by-side comparison with the published table. Informational only.
pub fn published_comparison(reports: &[(Variant, CostReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>4} {:>4} {:>12} {:>12} {:>9} {:>12} {:>12} {:>9}",
        "variant", "FE", "AI", "MACs(G)", "table MACs", "rel", "Params(M)", "table Par", "rel"
    );
    for (v, r) in reports {
        let pubd = v.published();
        let macs = r.total_macs as f64 / 1e9;
        let params = r.total_params as f64 / 1e6;
        let _ = writeln!(
            s,
            "{:<8} {:>4} {:>4} {:>12.3} {:>12.2} {:>+8.1}% {:>12.2} {:>12.2} {:>+8.1}%",
            v.label(),
            r.config.fe_layers,
            r.config.ai_layers,
            macs,
            pubd.macs_g,
            100.0 * rel_diff(macs, pubd.macs_g),
            params,
            pubd.params_m,
            100.0 * rel_diff(params, pubd.params_m)
        );
    }
    s
}

/// One row of the CSV/aligned tables emitted by `bench` and `sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub variant: String,
    pub fe: usize,
    pub ai: usize,
    pub params: u64,
    pub macs: u64,
    pub median_ms: Option<f64>,
    pub p90_ms: Option<f64>,
}

pub const CSV_HEADER: &str = "variant,total_layers,fe,ai,params,macs,median_ms,p90_ms";

pub fn to_csv(rows: &[TableRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let ms = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.fe + r.ai,
            r.fe,
            r.ai,
            r.params,
            r.macs,
            ms(r.median_ms),
            ms(r.p90_ms)
        );
    }
    s
}

pub fn to_aligned(rows: &[TableRow]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>4} {:>4} {:>12} {:>14} {:>10} {:>10}\n",
        "variant", "layers", "FE", "AI", "params", "MACs", "median_ms", "p90_ms"
    );
    let ms = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>4} {:>4} {:>12} {:>14} {:>10} {:>10}",
            r.variant,
            r.fe + r.ai,
            r.fe,
            r.ai,
            r.params,
            r.macs,
            ms(r.median_ms),
            ms(r.p90_ms)
        );
    }
    s
}

/// FE/AI splits from the layer-ratio ablation, grouped by depth 8, 6, 4.
pub const ABLATION_ROWS: [(usize, usize); 7] = [(6, 2), (5, 3), (0, 8), (4, 2), (3, 3), (3, 1), (2, 2)];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub total_layers: usize,
    pub fe: usize,
    pub ai: usize,
    pub params: u64,
    pub macs: u64,
    pub latency: Option<BenchResult>,
    /// Callback value, or the reason this row failed.
    pub metric: Result<f64, String>,
}

impl SweepRow {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            variant: format!("{}+{}", self.fe, self.ai),
            fe: self.fe,
            ai: self.ai,
            params: self.params,
            macs: self.macs,
            median_ms: self.latency.as_ref().map(|b| b.median_ms()),
            p90_ms: self.latency.as_ref().map(|b| b.p90_ms()),
        }
    }
}

/// Evaluates top-down pruned configurations of `base`.
///
/// Each `(fe, ai)` row keeps the first `fe + ai` layers of `base`. A row
/// whose pruning, benchmark or callback fails is kept with the error in
/// `metric`; the sweep continues.
pub fn pruning_sweep<F, E>(
    base: &WeightStore,
    rows: &[(usize, usize)],
    bench: Option<&BenchSettings>,
    mut eval: F,
) -> Vec<SweepRow>
where
    F: FnMut(&ModelConfig, &WeightStore) -> Result<f64, E>,
    E: fmt::Display,
{
    rows.iter()
        .map(|&(fe, ai)| {
            let config = base.config().with_layers(fe, ai);
            let report = cost_report(&config, false, format!("{fe}+{ai}"));
            let mut row = SweepRow {
                total_layers: fe + ai,
                fe,
                ai,
                params: report.total_params,
                macs: report.total_macs,
                latency: None,
                metric: Err(String::new()),
            };
            row.metric = (|| {
                let store = base.pruned(fe, ai).map_err(|e| e.to_string())?;
                if let Some(settings) = bench {
                    row.latency = Some(bench_latency(&store, settings, format!("{fe}+{ai}")).map_err(|e| e.to_string())?);
                }
                eval(&config, &store).map_err(|e| e.to_string())
            })();
            row
        })
        .collect()
}
