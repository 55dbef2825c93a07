//! Tracking with a cached template against re-extracting it every frame:
//! identical boxes, fewer MACs per frame.

use litetrack::encoder::Meter;
use litetrack::runtime::{init_track_with, TemplateMode};
use litetrack::synth::SyntheticSpec;
use litetrack::{ModelConfig, WeightStore};

fn main() -> litetrack::Result<()> {
    let weights = WeightStore::generate(&ModelConfig::toy(2, 2), 11)?;
    let seq = SyntheticSpec::moving(160, 120, 10, 20.0, 2).generate();
    let mut cached = init_track_with(&seq.frames[0], seq.boxes[0], &weights, TemplateMode::Cached)?;
    let mut fresh = init_track_with(&seq.frames[0], seq.boxes[0], &weights, TemplateMode::Recompute)?;
    let (mut worst, mut saved) = (0.0f64, 0u64);
    for f in &seq.frames[1..] {
        let (mut ma, mut mb) = (Meter::counting(), Meter::counting());
        let a = cached.track_frame_metered(f, &mut ma)?;
        let b = fresh.track_frame_metered(f, &mut mb)?;
        worst = worst.max((a.rect.x - b.rect.x).abs()).max((a.rect.w - b.rect.w).abs());
        saved = mb.total() - ma.total();
    }
    println!("max box difference over {} frames: {worst:.2e} px", seq.frames.len() - 1);
    println!("MACs saved per frame by the cache: {saved}");
    Ok(())
}
