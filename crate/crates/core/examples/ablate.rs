//! Selective and accumulative propagation of the four latents, written as
//! images next to `out/`.
//!
//!     cargo run --release --example ablate -- model.tnwt image.png out

use std::path::Path;

use treecodec::interp::write_ablations;
use treecodec::model::Checkpoint;

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 3 {
        eprintln!("usage: ablate <model.tnwt> <image> <out_dir>");
        std::process::exit(1);
    }
    let ck = Checkpoint::load(Path::new(&args[0]))?;
    for p in write_ablations(&ck.model, Path::new(&args[1]), Path::new(&args[2]))? {
        println!("{}", p.display());
    }
    Ok(())
}
