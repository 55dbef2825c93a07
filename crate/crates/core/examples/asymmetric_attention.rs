//! Search tokens attending to `[search; template]` give the same result as
//! the search rows of full joint attention.

use litetrack::encoder::{asym_block, self_block, Meter, Origin, TokenSeq};
use litetrack::{ModelConfig, Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> litetrack::Result<()> {
    let config = ModelConfig::toy(0, 1);
    let weights = WeightStore::generate(&config, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = config.embed_dim;
    let (nx, nz) = (config.search_tokens(), config.template_tokens());
    let x = Tensor::from_fn([nx, c], |_| rng.random_range(-1.0..1.0));
    let z = Tensor::from_fn([nz, c], |_| rng.random_range(-1.0..1.0));

    let mut meter = Meter::counting();
    let asym = asym_block(
        &TokenSeq::new(x.clone(), Origin::Search),
        &TokenSeq::new(z.clone(), Origin::Template),
        &weights.layer(0)?,
        &config,
        &mut meter,
    )?;
    let asym_macs = meter.total();

    let mut meter = Meter::counting();
    let joint = self_block(
        &TokenSeq::new(x.concat_rows(&z)?, Origin::Joint),
        &weights.layer(0)?,
        &config,
        &mut meter,
    )?;
    let head = joint.tokens.slice_rows(0..nx)?;
    println!("N_x={nx} N_z={nz} C={c}");
    println!("max |asym - joint[..N_x]| = {:.3e}", asym.tokens.max_abs_diff(&head));
    println!("MACs: asymmetric {asym_macs}, joint {}", meter.total());
    Ok(())
}
