//! PSNR and MS-SSIM between two images of the same size. Without arguments
//! a synthetic image is compared with a noisy copy.
//!
//!     cargo run --release --example metrics -- a.png b.png

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treecodec::eval::metrics::{ms_ssim, psnr, to_8bit};
use treecodec::{image_io, synth};

fn main() -> treecodec::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (a, b) = if args.len() == 2 {
        (image_io::load(Path::new(&args[0]))?, image_io::load(Path::new(&args[1]))?)
    } else {
        let a = synth::generate(3, 256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += rng.gen_range(-0.03..0.03);
        }
        (a, b)
    };
    let (a, b) = (to_8bit(&a), to_8bit(&b));
    println!("psnr    {:.4} dB", psnr(&a, &b)?);
    println!("ms-ssim {:.6}", ms_ssim(&a, &b, 255.0)?);
    Ok(())
}
