//! Train (or reuse) the four desk-scale models and print their rate and
//! distortion on the held-out synthetic images. The first run takes hours
//! on one core; results are cached under `target/desk`.
//!
//! The test images match the 64x64 corpus, which is below the MS-SSIM
//! minimum, so only bpp, PSNR and MSE are reported.
//!
//!     cargo run --release --example desk_rd

use std::path::Path;

use treecodec::coder::{decode_image, encode_image};
use treecodec::desk::DeskSetup;
use treecodec::eval::metrics::{mse, psnr, to_8bit};
use treecodec::image_io;
use treecodec::model::Checkpoint;

fn main() -> treecodec::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/desk");
    let setup = DeskSetup::default();
    let models = setup.models(&root)?;
    let test = image_io::list_images(&setup.test_images(&root)?)?;
    println!("pair,bpp,psnr,mse");
    for (i, path) in models.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let (mut bpp, mut q, mut err) = (0.0, 0.0, 0.0);
        for p in &test {
            let img = image_io::load(p)?;
            let enc = encode_image(&ck.model, &img, ck.lambda_index)?;
            let dec = decode_image(&ck.model, &enc.bytes)?.image()?;
            let (a, b) = (to_8bit(&img), to_8bit(&dec));
            bpp += enc.bpp();
            q += psnr(&a, &b)?;
            err += mse(&a, &b)?;
        }
        let n = test.len() as f64;
        println!("{i},{:.4},{:.2},{:.2}", bpp / n, q / n, err / n);
    }
    Ok(())
}
