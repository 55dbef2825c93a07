//! Per-stage MACs and params for every preset, plus the comparison with the
//! published table.

use litetrack::config::Variant;
use litetrack::cost::{count_macs, published_comparison};

fn main() {
    let include_template = std::env::args().any(|a| a == "--include-template-macs");
    let reports: Vec<_> = Variant::ALL
        .iter()
        .map(|&v| (v, count_macs(&v.config(), include_template)))
        .collect();
    println!("{}", reports[0].1.render());
    println!("{}", published_comparison(&reports));
}
