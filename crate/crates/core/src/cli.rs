//! `litetrack` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_interleaved, BenchSettings};
use crate::config::{ModelConfig, Variant};
use crate::cost::{cost_report, published_comparison, pruning_sweep, to_aligned, to_csv, TableRow, ABLATION_ROWS};
use crate::encoder::{attention_probe, forward_search, Meter};
use crate::error::{Error, Result};
use crate::head::head_forward;
use crate::runtime::{
    format_results, init_track, list_frames, load_frame, make_crop, read_gt, track_frames, SEARCH_FACTOR,
};
use crate::verify::run_suite;
use crate::weights::WeightStore;

#[derive(Debug, Parser)]
#[command(name = "litetrack", version, about = "Layer-pruned ViT tracker, cost model and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track a sequence of numbered frames and write one box per frame.
    Track(TrackArgs),
    /// Per-frame latency of each variant, interleaved.
    Bench(BenchArgs),
    /// Parameter and MAC counts per stage and layer.
    Count(CountArgs),
    /// Cost and latency of the FE/AI layer-split ablation rows.
    Sweep(SweepArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
    /// Template-attention map of one interaction layer.
    AttnDump(AttnArgs),
    /// Write a seeded random weight file.
    GenWeights(GenArgs),
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// B4, B6, B8, B9 or custom (needs --config).
    #[arg(long)]
    variant: Option<String>,
    /// Weight file; generated from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// key=value model configuration for --variant custom.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the small test dimensions of the chosen variant.
    #[arg(long)]
    toy: bool,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of frames named by frame number.
    #[arg(long)]
    seq: PathBuf,
    /// First line gives the initial x,y,w,h; defaults to <seq>/groundtruth.txt.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Track only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Distinct synthetic frames cycled through.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    include_template_macs: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Measured runs per row; 0 skips timing.
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Toy dimensions only; skips the full-size cost check.
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Frame to probe; earlier frames are tracked to place the search crop.
    #[arg(long, default_value_t = 1)]
    frame: usize,
    /// 0-based encoder layer; must be an interaction layer.
    #[arg(long)]
    layer: usize,
    /// Graymap path; the CSV is written next to it with a .csv extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 bad input, 2 internal failure.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
    }
}

/// Returns `Ok(false)` when a command ran but found a broken invariant.
fn dispatch(command: Command, out: &mut impl std::io::Write) -> Result<bool> {
    let text = match command {
        Command::Track(a) => track(a)?,
        Command::Bench(a) => bench(a)?,
        Command::Count(a) => count(a)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Verify(a) => {
            let checks = run_suite(a.seed, !a.toy);
            let mut s = String::new();
            for c in &checks {
                let _ = writeln!(s, "{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            let _ = writeln!(s, "{} checks, {failed} failed", checks.len());
            write_stdout(out, &s)?;
            return Ok(failed == 0);
        }
        Command::AttnDump(a) => attn_dump(a)?,
        Command::GenWeights(a) => {
            let w = a.model.weights()?;
            w.save(&a.out)?;
            format!(
                "wrote {} ({} parameters, FE={} AI={})\n",
                a.out.display(),
                w.num_elements(),
                w.config().fe_layers,
                w.config().ai_layers
            )
        }
    };
    write_stdout(out, &text)?;
    Ok(true)
}

fn write_stdout(out: &mut impl std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl ModelArgs {
    /// The configuration named by --variant/--config/--toy, if any.
    fn requested_config(&self) -> Result<Option<ModelConfig>> {
        let Some(name) = self.variant.as_deref() else {
            return match &self.config {
                Some(_) => Err(Error::Input("--config is only used with --variant custom".into())),
                None => Ok(None),
            };
        };
        if name.eq_ignore_ascii_case("custom") {
            let path = self
                .config
                .as_ref()
                .ok_or_else(|| Error::Input("--variant custom requires --config".into()))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let config = ModelConfig::parse_kv(&text)?;
            config.validate()?;
            return Ok(Some(config));
        }
        if self.config.is_some() {
            return Err(Error::Input("--config is only used with --variant custom".into()));
        }
        let v: Variant = name.parse()?;
        Ok(Some(if self.toy { v.toy_config() } else { v.config() }))
    }

    fn config(&self) -> Result<ModelConfig> {
        self.requested_config()?
            .ok_or_else(|| Error::Input("--variant is required".into()))
    }

    fn label(&self) -> String {
        self.variant.clone().unwrap_or_else(|| "custom".into())
    }

    /// Loads --weights (checking it against any requested configuration) or
    /// generates weights from --seed.
    fn weights(&self) -> Result<WeightStore> {
        let requested = self.requested_config()?;
        match &self.weights {
            Some(path) => {
                let w = WeightStore::load(path)?;
                if let Some(c) = requested {
                    if &c != w.config() {
                        return Err(Error::Input(format!(
                            "{} holds a {}+{} layer model with C={}, not the requested {}+{} with C={}",
                            path.display(),
                            w.config().fe_layers,
                            w.config().ai_layers,
                            w.config().embed_dim,
                            c.fe_layers,
                            c.ai_layers,
                            c.embed_dim
                        )));
                    }
                }
                Ok(w)
            }
            None => WeightStore::generate(
                &requested.ok_or_else(|| Error::Input("either --variant or --weights is required".into()))?,
                self.seed,
            ),
        }
    }
}

fn gt_path(seq: &Path, gt: &Option<PathBuf>) -> PathBuf {
    gt.clone().unwrap_or_else(|| seq.join("groundtruth.txt"))
}

fn load_sequence(seq: &Path, limit: Option<usize>) -> Result<Vec<crate::tensor::Tensor>> {
    let mut paths = list_frames(seq)?;
    if let Some(n) = limit {
        if n == 0 {
            return Err(Error::Input("--frames must be at least 1".into()));
        }
        paths.truncate(n);
    }
    paths.iter().map(load_frame).collect()
}

fn track(a: TrackArgs) -> Result<String> {
    let weights = a.model.weights()?;
    let frames = load_sequence(&a.seq, a.frames)?;
    let gt = read_gt(gt_path(&a.seq, &a.gt))?;
    let records = track_frames(&frames, gt, &weights)?;
    write_file(&a.out, format_results(&records))?;
    Ok(format!("tracked {} frames -> {}\n", records.len(), a.out.display()))
}

fn bench_settings(runs: usize, warmup: usize, frames: usize, seed: u64) -> BenchSettings {
    BenchSettings {
        runs,
        warmup,
        frames,
        seed,
    }
}

fn bench(a: BenchArgs) -> Result<String> {
    let settings = bench_settings(a.runs, a.warmup, a.frames, a.model.seed);
    settings.validate()?;
    let all = a.model.weights.is_none() && a.model.variant.as_deref().is_none_or(|v| v.eq_ignore_ascii_case("all"));
    let stores: Vec<(String, WeightStore)> = if all {
        // One deep store pruned top-down, so the variants share their lower layers.
        let deepest = if a.model.toy { Variant::B9.toy_config() } else { Variant::B9.config() };
        let base = WeightStore::generate(&deepest, a.model.seed)?;
        Variant::ALL
            .iter()
            .rev()
            .map(|v| {
                let (fe, ai) = v.layers();
                Ok((v.label().to_string(), base.pruned(fe, ai)?))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(a.model.label(), a.model.weights()?)]
    };
    let models: Vec<(String, &WeightStore)> = stores.iter().map(|(l, w)| (l.clone(), w)).collect();
    let results = bench_interleaved(&models, &settings)?;
    let rows: Vec<TableRow> = stores
        .iter()
        .zip(&results)
        .map(|((label, w), r)| {
            let c = cost_report(w.config(), false, label.clone());
            TableRow {
                variant: label.clone(),
                fe: w.config().fe_layers,
                ai: w.config().ai_layers,
                params: c.total_params,
                macs: c.total_macs,
                median_ms: Some(r.median_ms()),
                p90_ms: Some(r.p90_ms()),
            }
        })
        .collect();
    if let Some(path) = &a.out {
        write_file(path, to_csv(&rows))?;
    }
    let first = &results[0];
    Ok(format!(
        "{}threads={} profile={} runs={} warmup={}\n",
        to_aligned(&rows),
        first.threads,
        first.profile,
        first.runs(),
        first.warmup
    ))
}

fn count(a: CountArgs) -> Result<String> {
    let mut s = String::new();
    let all = a.model.variant.as_deref().is_none_or(|v| v.eq_ignore_ascii_case("all"));
    if all {
        let mut reports = Vec::new();
        for v in Variant::ALL {
            let config = if a.model.toy { v.toy_config() } else { v.config() };
            let r = cost_report(&config, a.include_template_macs, v.label());
            s.push_str(&r.render());
            s.push('\n');
            reports.push((v, r));
        }
        if !a.model.toy {
            s.push_str("comparison with the published table (informational):\n");
            s.push_str(&published_comparison(&reports));
        }
    } else {
        let config = match &a.model.weights {
            Some(_) => a.model.weights()?.config().clone(),
            None => a.model.config()?,
        };
        let r = cost_report(&config, a.include_template_macs, a.model.label());
        s.push_str(&r.render());
        if let (Ok(v), false) = (a.model.label().parse::<Variant>(), a.model.toy) {
            s.push_str("comparison with the published table (informational):\n");
            s.push_str(&published_comparison(&[(v, r)]));
        }
    }
    Ok(s)
}

fn sweep(a: SweepArgs) -> Result<String> {
    let deepest = ABLATION_ROWS.iter().map(|(f, i)| f + i).max().unwrap_or(0);
    let base_config = match a.model.requested_config()? {
        Some(c) => c.with_layers(deepest, 0),
        None if a.model.toy => ModelConfig::toy(deepest, 0),
        None => ModelConfig::vit_base(deepest, 0),
    };
    let base = match &a.model.weights {
        Some(_) => a.model.weights()?,
        None => WeightStore::generate(&base_config, a.model.seed)?,
    };
    let settings = bench_settings(a.runs, a.warmup, a.frames, a.model.seed);
    let timed = a.runs > 0;
    if timed {
        settings.validate()?;
    }
    let rows = pruning_sweep(&base, &ABLATION_ROWS, timed.then_some(&settings), |config, store| {
        // instrumented MACs of one search pass, which must equal the analytic count
        let c = config;
        let search = crate::tensor::Tensor::zeros([3, c.search_size.0, c.search_size.1]);
        let z = crate::tensor::Tensor::zeros([c.template_tokens(), c.embed_dim]);
        let mut m = Meter::counting();
        let tokens = forward_search(&search, &z, store, &mut m)?;
        head_forward(&tokens, store, &mut m)?;
        Ok::<f64, Error>(m.total() as f64)
    });
    let table: Vec<TableRow> = rows.iter().map(|r| r.table_row()).collect();
    if let Some(path) = &a.out {
        write_file(path, to_csv(&table))?;
    }
    let mut s = to_aligned(&table);
    for r in &rows {
        match &r.metric {
            Ok(m) if *m as u64 == r.macs => {}
            Ok(m) => {
                let _ = writeln!(s, "row {}+{}: instrumented {m} MACs differ from {}", r.fe, r.ai, r.macs);
            }
            Err(e) => {
                let _ = writeln!(s, "row {}+{} failed: {e}", r.fe, r.ai);
            }
        }
    }
    Ok(s)
}

/// `P5` graymap scaled so the map's minimum is 0 and maximum 255; a constant
/// map is all zeros.
pub fn to_pgm(map: &crate::tensor::Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn to_map_csv(map: &crate::tensor::Tensor) -> Result<String> {
    let (h, _) = map.dims2()?;
    let mut s = String::new();
    for r in 0..h {
        let line: Vec<String> = map.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn attn_dump(a: AttnArgs) -> Result<String> {
    let weights = a.model.weights()?;
    let c = weights.config();
    if !(c.fe_layers..c.num_layers()).contains(&a.layer) {
        return Err(Error::Range(format!(
            "layer {} is not an interaction layer; valid layers are {:?}",
            a.layer,
            (c.fe_layers..c.num_layers()).collect::<Vec<_>>()
        )));
    }
    if a.frame == 0 {
        return Err(Error::Input("--frame must be at least 1; frame 0 holds the template".into()));
    }
    let frames = load_sequence(&a.seq, Some(a.frame + 1))?;
    if frames.len() <= a.frame {
        return Err(Error::Input(format!("sequence has only {} frames", frames.len())));
    }
    let gt = read_gt(gt_path(&a.seq, &a.gt))?;
    let mut state = init_track(&frames[0], gt, &weights)?;
    for f in &frames[1..a.frame] {
        state.track_frame(f)?;
    }
    let (search, _) = make_crop(&frames[a.frame], &state.prev_box(), SEARCH_FACTOR, c.search_size.0)?;
    let map = attention_probe(&search, &state.cache().features, &weights, a.layer)?;
    write_file(&a.out, to_pgm(&map)?)?;
    let csv = a.out.with_extension("csv");
    write_file(&csv, to_map_csv(&map)?)?;
    Ok(format!(
        "layer {} frame {}: {}x{} map -> {}, {}\n",
        a.layer,
        a.frame,
        map.shape()[0],
        map.shape()[1],
        a.out.display(),
        csv.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pgm_scaling() {
        let m = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, 0.5]).unwrap();
        let pgm = to_pgm(&m).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 64, 128, 255]);
        let flat = to_pgm(&Tensor::full([2, 3], 0.25)).unwrap();
        assert!(flat[flat.len() - 6..].iter().all(|&p| p == 0));
    }

    #[test]
    fn csv_has_one_cell_per_position() {
        let m = Tensor::from_fn([4, 4], |i| i as f32 / 16.0);
        let csv = to_map_csv(&m).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.split([',', '\n']).filter(|c| !c.is_empty()).count(), 16);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["litetrack", "count", "--bogus"]), 1);
        assert_eq!(run_cli(["litetrack"]), 1);
        assert_eq!(run_cli(["litetrack", "count", "--variant", "B7"]), 1);
        assert_eq!(run_cli(["litetrack", "count", "--variant", "custom"]), 1);
    }

    #[test]
    fn count_single_variant() {
        assert_eq!(run_cli(["litetrack", "count", "--variant", "B9"]), 0);
        assert_eq!(run_cli(["litetrack", "count", "--variant", "B4", "--toy"]), 0);
    }
}
