//! Generates a synthetic sequence on disk, tracks it and prints the boxes.
//!
//! cargo run --release --example track_synthetic [out_dir]

use litetrack::runtime::{format_results, list_frames, load_frame, read_gt, track_frames};
use litetrack::synth::{plant_centered_head, SyntheticSpec};
use litetrack::{ModelConfig, WeightStore};

fn main() -> litetrack::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/synthetic_seq".into());
    SyntheticSpec::stationary(192, 144, 15, 28.0, 5).generate().write_to(&dir)?;

    let frames = list_frames(&dir)?
        .iter()
        .map(load_frame)
        .collect::<litetrack::Result<Vec<_>>>()?;
    let gt = read_gt(format!("{dir}/groundtruth.txt"))?;
    // random weights track nothing; a planted head predicts the crop center
    let weights = plant_centered_head(&WeightStore::generate(&ModelConfig::toy(2, 2), 1)?, 0.25)?;
    let records = track_frames(&frames, gt, &weights)?;
    print!("{}", format_results(&records));
    println!("sequence written to {dir}");
    Ok(())
}
