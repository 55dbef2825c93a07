//! Interleaved latency benchmark of the four presets at toy dims.
//! Pass `--full` for ViT-B dims (minutes on one core).

use litetrack::bench::{bench_interleaved, build_profile, BenchSettings};
use litetrack::config::Variant;
use litetrack::WeightStore;

fn main() -> litetrack::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let base_config = if full { Variant::B9.config() } else { Variant::B9.toy_config() };
    let base = WeightStore::generate(&base_config, 0)?;
    let stores: Vec<(String, WeightStore)> = Variant::ALL
        .iter()
        .rev()
        .map(|v| {
            let (fe, ai) = v.layers();
            Ok((v.label().to_string(), base.pruned(fe, ai)?))
        })
        .collect::<litetrack::Result<_>>()?;
    let models: Vec<(String, &WeightStore)> = stores.iter().map(|(l, w)| (l.clone(), w)).collect();
    let settings = BenchSettings::default();
    for r in bench_interleaved(&models, &settings)? {
        println!("{:<4} median {:>9.3} ms  p90 {:>9.3} ms", r.label, r.median_ms(), r.p90_ms());
    }
    println!("threads=1 profile={} runs={} warmup={}", build_profile(), settings.runs, settings.warmup);
    Ok(())
}
