//! Self-check suite run by `litetrack verify`.
//!
//! Every check compares the engine against an independent reference: the
//! joint self-attention block, the recompute-every-frame tracker, the weight
//! file itself, finite differences, or closed-form identities.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::cost::{cost_report, pruning_sweep, ABLATION_ROWS};
use crate::encoder::{
    asym_block, extract_template, forward_search, interaction_attention, self_block, Meter, Op, Origin, TokenSeq,
};
use crate::error::{Error, Result};
use crate::head::{decode_at, head_forward, BBox, ScoreMaps};
use crate::objective::{giou, gt_cell, loss_grad, total_loss, LossConfig};
use crate::runtime::{hanning2d, init_track_with, TemplateMode};
use crate::synth::SyntheticSpec;
use crate::tensor::{patchify, softmax_rows, unpatchify, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<22} {} ({:.2}s)",
            if self.passed { "pass" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Interaction block against the search rows of joint attention.
pub fn slice_equivalence(trials: usize, seed: u64) -> Result<f32> {
    let config = ModelConfig::toy(0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for t in 0..trials {
        let w = WeightStore::generate(&config, seed.wrapping_add(t as u64))?;
        let lw = w.layer(0)?;
        let x = random_tensor(&mut rng, &[config.search_tokens(), config.embed_dim], 1.0);
        let z = random_tensor(&mut rng, &[config.template_tokens(), config.embed_dim], 1.0);
        let asym = asym_block(
            &TokenSeq::new(x.clone(), Origin::Search),
            &TokenSeq::new(z.clone(), Origin::Template),
            &lw,
            &config,
            &mut Meter::off(),
        )?;
        let joint = self_block(
            &TokenSeq::new(x.concat_rows(&z)?, Origin::Joint),
            &lw,
            &config,
            &mut Meter::off(),
        )?;
        let rows = joint.tokens.slice_rows(0..config.search_tokens())?;
        worst = worst.max(asym.tokens.max_abs_diff(&rows));
    }
    Ok(worst)
}

/// Largest coordinate difference between the cached tracker and the
/// recomputing one, plus the per-frame MAC saving and the template pass cost.
pub fn cache_soundness(weights: &WeightStore, frames: usize, seed: u64) -> Result<(f64, u64, u64)> {
    let side = weights.config().search_size.0 * 2;
    let seq = SyntheticSpec::moving(side, side, frames, side as f64 / 8.0, seed).generate();
    let mut cached = init_track_with(&seq.frames[0], seq.boxes[0], weights, TemplateMode::Cached)?;
    let mut reference = init_track_with(&seq.frames[0], seq.boxes[0], weights, TemplateMode::Recompute)?;
    let mut worst = 0.0f64;
    let mut saving = None;
    for f in &seq.frames[1..] {
        let (mut mc, mut mr) = (Meter::counting(), Meter::counting());
        let a = cached.track_frame_metered(f, &mut mc)?;
        let b = reference.track_frame_metered(f, &mut mr)?;
        for (p, q) in [(a.rect.x, b.rect.x), (a.rect.y, b.rect.y), (a.rect.w, b.rect.w), (a.rect.h, b.rect.h)] {
            worst = worst.max((p - q).abs());
        }
        saving.get_or_insert(mr.total() - mc.total());
    }
    let c = weights.config();
    let template_pass = cost_report(c, true, "").total_macs - cost_report(c, false, "").total_macs;
    Ok((worst, saving.unwrap_or(0), template_pass))
}

/// Instrumented totals for one frame: (search pass + head, template pass).
pub fn instrumented_macs(weights: &WeightStore, seed: u64) -> Result<(u64, u64)> {
    let c = weights.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = random_tensor(&mut rng, &[3, c.template_size.0, c.template_size.1], 1.0);
    let search = random_tensor(&mut rng, &[3, c.search_size.0, c.search_size.1], 1.0);
    let mut mt = Meter::counting();
    let z = extract_template(&template, weights, &mut mt)?;
    let mut ms = Meter::counting();
    let tokens = forward_search(&search, &z, weights, &mut ms)?;
    head_forward(&tokens, weights, &mut ms)?;
    Ok((ms.total(), mt.total()))
}

/// A valid small configuration drawn from `rng`.
pub fn random_toy_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let embed_dim = 8 * heads * rng.random_range(1..=3);
    let patch_size = [4, 8][rng.random_range(0..2)];
    let search = patch_size * rng.random_range(1..=4);
    let fe_layers = rng.random_range(0..=2);
    let ai_layers = rng.random_range(if fe_layers == 0 { 1 } else { 0 }..=2);
    ModelConfig {
        embed_dim,
        num_heads: heads,
        mlp_ratio: rng.random_range(1..=4),
        patch_size,
        template_size: (patch_size * rng.random_range(1..=3), patch_size * rng.random_range(1..=3)),
        search_size: (search, search),
        fe_layers,
        ai_layers,
    }
}

/// Checks analytic MACs and parameters against an instrumented run and the
/// generated weights; returns the first mismatch.
pub fn cost_oracle(config: &ModelConfig, seed: u64) -> Result<Option<String>> {
    let w = WeightStore::generate(config, seed)?;
    let (search, template) = instrumented_macs(&w, seed)?;
    let without = cost_report(config, false, "").total_macs;
    let with = cost_report(config, true, "").total_macs;
    let params = cost_report(config, false, "").total_params;
    Ok(if without != search {
        Some(format!("{config:?}: analytic {without} MACs, instrumented {search}"))
    } else if with != search + template {
        Some(format!(
            "{config:?}: analytic {with} MACs with template, instrumented {}",
            search + template
        ))
    } else if params != w.num_elements() {
        Some(format!("{config:?}: analytic {params} params, weight file {}", w.num_elements()))
    } else {
        None
    })
}

/// Random score maps and a ground-truth box on an `s × s` grid, with all
/// probabilities in `(0.1, 0.9)`.
pub fn random_loss_instance(rng: &mut impl Rng, s: usize) -> (ScoreMaps, BBox) {
    let mut map = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.1f32..0.9));
    let maps = ScoreMaps::new(map(&[s, s]), map(&[2, s, s]), map(&[2, s, s])).expect("shapes agree");
    let gt = BBox::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    );
    (maps, gt)
}

/// Whether the box losses are smooth within `margin` of the prediction at
/// the ground-truth cell. GIoU and L1 have kinks wherever a predicted edge
/// meets a ground-truth edge, and central differences straddling one are
/// meaningless.
pub fn clear_of_kinks(maps: &ScoreMaps, gt: &BBox, margin: f64) -> bool {
    let p = decode_at(maps, gt_cell(gt, maps.grid())).xyxy();
    let g = gt.xyxy();
    [(0, 2), (1, 3)].iter().all(|&(lo, hi)| {
        [(lo, lo), (hi, hi), (lo, hi), (hi, lo)]
            .iter()
            .all(|&(a, b)| (p[a] - g[b]).abs() > margin)
    })
}

/// `count` loss instances on an `s × s` grid that are [`clear_of_kinks`]
/// by `margin`, and how many draws were rejected to find them.
pub fn smooth_loss_instances(rng: &mut impl Rng, s: usize, count: usize, margin: f64) -> (Vec<(ScoreMaps, BBox)>, usize) {
    let mut out = Vec::with_capacity(count);
    let mut rejected = 0;
    while out.len() < count {
        let (maps, gt) = random_loss_instance(rng, s);
        if clear_of_kinks(&maps, &gt, margin) {
            out.push((maps, gt));
        } else {
            rejected += 1;
        }
    }
    (out, rejected)
}

/// Norm-wise relative error between the analytic gradient and central
/// differences with step `h`, taken over every map entry.
pub fn gradient_error(maps: &ScoreMaps, gt: &BBox, config: &LossConfig, h: f32) -> Result<f64> {
    let analytic = loss_grad(maps, gt, config)?;
    let mut diff2 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for which in 0..3 {
        let (base, grad) = match which {
            0 => (&maps.center, &analytic.center),
            1 => (&maps.offset, &analytic.offset),
            _ => (&maps.size, &analytic.size),
        };
        for i in 0..base.len() {
            let eval = |delta: f32| -> Result<(f64, f32)> {
                let mut v = base.to_vec();
                v[i] += delta;
                let p = v[i];
                let t = Tensor::new(base.shape().to_vec(), v)?;
                let m = match which {
                    0 => ScoreMaps::new(t, maps.offset.clone(), maps.size.clone())?,
                    1 => ScoreMaps::new(maps.center.clone(), t, maps.size.clone())?,
                    _ => ScoreMaps::new(maps.center.clone(), maps.offset.clone(), t)?,
                };
                Ok((total_loss(&m, gt, config)?.total, p))
            };
            let (lp, pp) = eval(h)?;
            let (lm, pm) = eval(-h)?;
            let numeric = (lp - lm) / (pp as f64 - pm as f64);
            let a = grad.data()[i] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom })
}

fn layer_trace(variant: Variant) -> Result<Option<String>> {
    let config = variant.toy_config();
    let w = WeightStore::generate(&config, 0)?;
    let mut m = Meter::tracing();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let template = random_tensor(&mut rng, &[3, config.template_size.0, config.template_size.1], 1.0);
    let search = random_tensor(&mut rng, &[3, config.search_size.0, config.search_size.1], 1.0);
    let z = extract_template(&template, &w, &mut m)?;
    m.clear();
    forward_search(&search, &z, &w, &mut m)?;
    let fe = m
        .events()
        .iter()
        .filter(|e| matches!(e.op, Op::SelfBlock { origin: Origin::Search, .. }))
        .count();
    let ai = m.events().iter().filter(|e| matches!(e.op, Op::AsymBlock { .. })).count();
    let (n, k) = variant.layers();
    Ok(((fe, ai) != (n, k)).then(|| format!("{variant}: traced {fe}+{ai}, expected {n}+{k}")))
}

/// Runs every check at toy dimensions. With `full_dims`, also checks the
/// cost oracle for the four presets at full size.
pub fn run_suite(seed: u64, full_dims: bool) -> Vec<Check> {
    let mut checks = vec![
        run("slice-equivalence", || {
            let worst = slice_equivalence(100, seed)?;
            Ok((worst <= 1e-6, format!("max |asym - joint| = {worst:.2e} over 100 trials")))
        }),
        run("cache-soundness", || {
            let w = WeightStore::generate(&ModelConfig::toy(2, 2), seed)?;
            let (worst, saving, template) = cache_soundness(&w, 20, seed)?;
            Ok((
                worst <= 1e-6 && saving == template,
                format!("max box diff {worst:.2e} over 20 frames; per-frame saving {saving} = template pass {template}"),
            ))
        }),
        run("cost-oracle", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let configs: Vec<ModelConfig> = Variant::ALL
                .iter()
                .map(|v| v.toy_config())
                .chain((0..20).map(|_| random_toy_config(&mut rng)))
                .collect();
            for c in &configs {
                if let Some(msg) = cost_oracle(c, seed)? {
                    return Ok((false, msg));
                }
            }
            Ok((true, format!("{} configurations exact", configs.len())))
        }),
        run("gradient-check", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (instances, rejected) = smooth_loss_instances(&mut rng, 8, 50, 2e-3);
            let mut worst = 0.0f64;
            for (maps, gt) in &instances {
                worst = worst.max(gradient_error(maps, gt, &LossConfig::default(), 1e-3)?);
            }
            Ok((
                worst <= 1e-4,
                format!("max relative error {worst:.2e} over 50 instances ({rejected} draws near a kink skipped)"),
            ))
        }),
        run("loss-identities", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10_000 {
                let mut b = || BBox::new(rng.random(), rng.random(), rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
                let (a, c) = (b(), b());
                let g = giou(&a, &c)?;
                if !(-1.0..=1.0).contains(&g) || (giou(&a, &a)? - 1.0).abs() > 1e-12 {
                    return Ok((false, format!("giou({a:?}, {c:?}) = {g}")));
                }
            }
            let (maps, gt) = random_loss_instance(&mut rng, 8);
            let l = total_loss(&maps, &gt, &LossConfig::default())?;
            let composed = l.focal + 2.0 * l.giou + 5.0 * l.l1;
            Ok((
                l.total == composed && l.focal >= 0.0,
                "giou in [-1, 1] on 10^4 pairs; total = focal + 2 giou + 5 l1".into(),
            ))
        }),
        run("numeric-invariants", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = softmax_rows(&random_tensor(&mut rng, &[16, 20], 10.0))?;
            let softmax_err = (0..16)
                .map(|r| (p.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            let w = WeightStore::generate(&ModelConfig::toy(1, 1), seed)?;
            let search = random_tensor(&mut rng, &[3, 64, 64], 1.0);
            let z = random_tensor(&mut rng, &[4, 64], 1.0);
            let attn = interaction_attention(&search, &z, &w, 1)?;
            let attn_err = (0..attn.rows())
                .map(|r| (attn.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            let hann = hanning2d(3);
            let one_hot = hann.data().iter().enumerate().all(|(i, &v)| v == if i == 4 { 1.0 } else { 0.0 });
            let image = random_tensor(&mut rng, &[3, 32, 48], 1.0);
            let round_trip = unpatchify(&patchify(&image, 16)?, 3, 32, 48, 16)? == image;
            Ok((
                softmax_err <= 1e-6 && attn_err <= 1e-6 && one_hot && round_trip,
                format!(
                    "softmax rows {softmax_err:.1e}, attention rows {attn_err:.1e}, hann(3) one-hot {one_hot}, patchify round-trip {round_trip}"
                ),
            ))
        }),
        run("layer-counts", || {
            for v in Variant::ALL {
                if let Some(msg) = layer_trace(v)? {
                    return Ok((false, msg));
                }
            }
            let base = WeightStore::generate(&ModelConfig::toy(8, 0), seed)?;
            let rows = pruning_sweep(&base, &ABLATION_ROWS, None, |c, _| {
                Ok::<f64, Error>(cost_report(c, false, "").total_macs as f64)
            });
            for r in &rows {
                if r.metric != Ok(r.macs as f64) {
                    return Ok((false, format!("sweep row {}+{}: {:?} vs {}", r.fe, r.ai, r.metric, r.macs)));
                }
            }
            let split: Vec<_> = rows.iter().map(|r| (r.fe, r.ai)).collect();
            Ok((
                split == ABLATION_ROWS,
                format!("traced splits match all presets; sweep rows {split:?}"),
            ))
        }),
        run("weight-determinism", || {
            let c = ModelConfig::toy(2, 1);
            let a = WeightStore::generate(&c, seed)?.to_bytes();
            let b = WeightStore::generate(&c, seed)?.to_bytes();
            let round = WeightStore::from_bytes(&a)?.to_bytes();
            Ok((a == b && a == round, format!("{} bytes, identical and round-trips", a.len())))
        }),
    ];
    if full_dims {
        checks.push(run("cost-oracle-full-dims", || {
            for v in Variant::ALL {
                if let Some(msg) = cost_oracle(&v.config(), seed)? {
                    return Ok((false, msg));
                }
            }
            Ok((true, "B9, B8, B6, B4 exact at full size".into()))
        }));
    }
    checks
}
