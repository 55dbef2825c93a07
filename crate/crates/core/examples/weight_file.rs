//! Deterministic weight generation, the on-disk format and pruning.

use litetrack::config::Variant;
use litetrack::WeightStore;

fn hex(d: [u8; 32]) -> String {
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Variant::B9.toy_config();
    let w = WeightStore::generate(&config, 42)?;
    let path = std::env::temp_dir().join("litetrack_b9_toy.bin");
    w.save(&path)?;
    let back = WeightStore::load(&path)?;
    println!("{} tensors, {} elements, digest {}", w.names().count(), w.num_elements(), hex(w.digest()));
    println!("reloaded digest {}", hex(back.digest()));

    let pruned = w.pruned(2, 2)?;
    let direct = WeightStore::generate(&Variant::B4.toy_config(), 42)?;
    println!("B9 pruned to 2+2 equals B4 generated directly: {}", pruned.digest() == direct.digest());
    std::fs::remove_file(path)?;
    Ok(())
}
