//! Bit-allocation maps of each latent for one image.
//!
//!     cargo run --release --example bitmap -- model.tnwt image.png out

use std::path::Path;

use treecodec::interp::write_bitmaps;
use treecodec::model::Checkpoint;

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 3 {
        eprintln!("usage: bitmap <model.tnwt> <image> <out_dir>");
        std::process::exit(1);
    }
    let ck = Checkpoint::load(Path::new(&args[0]))?;
    for p in write_bitmaps(&ck.model, Path::new(&args[1]), Path::new(&args[2]), &[1, 2, 3, 4])? {
        println!("{}", p.display());
    }
    Ok(())
}
