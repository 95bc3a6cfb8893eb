//! Train one model. Arguments are `key=value` training config entries plus
//! `out=<dir>`; with no `data_dir` a small synthetic corpus is generated.
//!
//!     cargo run --release --example train -- pair=3 steps=300 crop=64 batch=8 out=runs/p3

use std::path::PathBuf;

use treecodec::config::KeyValues;
use treecodec::synth;
use treecodec::train::{train_loop, TrainConfig};

fn main() -> treecodec::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut kv = KeyValues::parse(&std::env::args().skip(1).collect::<Vec<_>>().join("\n"))?;
    let out: PathBuf = kv.take("out")?.unwrap_or_else(|| PathBuf::from("runs/example"));
    let mut cfg = TrainConfig {
        crop: 64,
        ..TrainConfig::default()
    };
    let explicit_data = kv.contains("data_dir");
    cfg.apply(&mut kv)?;
    kv.finish()?;
    if !explicit_data {
        cfg.data_dir = out.join("corpus");
        synth::write_corpus(&cfg.data_dir, 32, cfg.crop, cfg.crop, 1000)?;
    }
    print!("{}", cfg.to_text());
    let path = train_loop(&cfg, &out, None)?;
    println!("final checkpoint: {}", path.display());
    Ok(())
}
