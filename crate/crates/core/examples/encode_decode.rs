//! Encode one image to a bitstream and decode it back. Uses the checkpoint
//! given as the first argument, or a freshly initialised model.
//!
//!     cargo run --release --example encode_decode -- [model.tnwt] [image.png]

use std::path::Path;

use treecodec::coder::{decode_image, encode_image};
use treecodec::eval::metrics::{psnr, to_8bit};
use treecodec::model::{Checkpoint, ModelConfig, TreeCodec};
use treecodec::{image_io, synth};

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, lambda_index) = match args.first() {
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p))?;
            (ck.model, ck.lambda_index)
        }
        None => (TreeCodec::new(ModelConfig::default(), 0)?, 0),
    };
    let img = match args.get(1) {
        Some(p) => image_io::load(Path::new(p))?,
        None => synth::generate(7, 200, 300),
    };

    let enc = encode_image(&model, &img, lambda_index)?;
    println!("{} bytes, {:.4} bpp", enc.bytes.len(), enc.bpp());
    println!("estimated payload {:.0} bits, coded {:.0} bits", enc.inference.rate_bits(), enc.payload_bits());

    let dec = decode_image(&model, &enc.bytes)?;
    let x_hat = dec.image()?;
    assert_eq!(x_hat, enc.inference.image()?, "decoder disagrees with encoder");
    println!("decoded {}x{}, psnr {:.2} dB", dec.header.width, dec.header.height, psnr(&to_8bit(&img), &to_8bit(&x_hat))?);
    Ok(())
}
