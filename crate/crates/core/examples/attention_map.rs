//! Template attention of each search token at an interaction layer, written
//! as a PGM image.

use litetrack::cli::to_pgm;
use litetrack::encoder::{attention_probe, extract_template, Meter};
use litetrack::runtime::make_crop;
use litetrack::synth::SyntheticSpec;
use litetrack::{ModelConfig, WeightStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = WeightStore::generate(&ModelConfig::toy(1, 2), 6)?;
    let c = weights.config().clone();
    let seq = SyntheticSpec::stationary(160, 120, 2, 24.0, 3).generate();
    let (template, _) = make_crop(&seq.frames[0], &seq.boxes[0], 2.0, c.template_size.0)?;
    let (search, _) = make_crop(&seq.frames[1], &seq.boxes[0], 4.0, c.search_size.0)?;
    let z = extract_template(&template, &weights, &mut Meter::off())?;
    for layer in c.fe_layers..c.num_layers() {
        let map = attention_probe(&search, &z, &weights, layer)?;
        let path = format!("target/attention_layer{layer}.pgm");
        std::fs::write(&path, to_pgm(&map)?)?;
        println!("layer {layer}: {:?} map, max {:.4}, written to {path}", map.shape(), map.data().iter().cloned().fold(0.0f32, f32::max));
    }
    Ok(())
}
