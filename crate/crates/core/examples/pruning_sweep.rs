//! Layer-split sweep over an 8-layer base. Each row reuses the base weights
//! pruned to the requested split and reports measured MACs.

use litetrack::cost::{pruning_sweep, to_aligned, ABLATION_ROWS};
use litetrack::encoder::{extract_template, forward_search, Meter};
use litetrack::head::head_forward;
use litetrack::{ModelConfig, Tensor, WeightStore};

fn main() -> litetrack::Result<()> {
    let base = WeightStore::generate(&ModelConfig::toy(8, 0), 0)?;
    let rows = pruning_sweep(&base, &ABLATION_ROWS, None, |c, w| -> litetrack::Result<f64> {
        let z = extract_template(&Tensor::zeros([3, c.template_size.0, c.template_size.1]), w, &mut Meter::off())?;
        let mut meter = Meter::counting();
        let x = forward_search(&Tensor::zeros([3, c.search_size.0, c.search_size.1]), &z, w, &mut meter)?;
        head_forward(&x, w, &mut meter)?;
        Ok(meter.total() as f64)
    });
    let table: Vec<_> = rows.iter().map(|r| r.table_row()).collect();
    print!("{}", to_aligned(&table));
    Ok(())
}
