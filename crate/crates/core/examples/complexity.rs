//! Per-module MACs and parameters for the default model.
//!
//!     cargo run --release --example complexity -- [height] [width]

use treecodec::eval::complexity::complexity_report;
use treecodec::model::ModelConfig;

fn main() -> treecodec::Result<()> {
    let dims: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (h, w) = (dims.first().copied().unwrap_or(256), dims.get(1).copied().unwrap_or(256));
    let report = complexity_report(&ModelConfig::default(), h, w)?;
    print!("{}", report.to_table());
    Ok(())
}
