//! Per-image rate and quality over a directory of images.

use std::path::Path;

use rayon::prelude::*;

use super::bd::RdPoint;
use super::metrics::{ms_ssim, psnr, to_8bit};
use crate::coder::encode_image;
use crate::error::{Error, Result};
use crate::image_io;
use crate::model::TreeCodec;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image: String,
    /// `None` when the image could not be read or coded; the reason is in `error`.
    pub point: Option<RdPoint>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEval {
    pub images: Vec<ImageResult>,
}

impl CorpusEval {
    /// Arithmetic means over successfully evaluated images.
    pub fn mean(&self) -> Option<RdPoint> {
        let ok: Vec<&RdPoint> = self.images.iter().filter_map(|r| r.point.as_ref()).collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        Some(RdPoint {
            bpp: ok.iter().map(|p| p.bpp).sum::<f64>() / n,
            psnr: ok.iter().map(|p| p.psnr).sum::<f64>() / n,
            msssim: ok.iter().map(|p| p.msssim).sum::<f64>() / n,
        })
    }

    /// `image,bpp,psnr,msssim`; failed images have empty value fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,bpp,psnr,msssim\n");
        for r in &self.images {
            match &r.point {
                Some(p) => s += &format!("{},{},{},{}\n", r.image, p.bpp, p.psnr, p.msssim),
                None => s += &format!("{},,,\n", r.image),
            }
        }
        s
    }
}

/// Encode one image and score the reconstruction at 8 bits.
pub fn evaluate_image(model: &TreeCodec<f32>, img: &crate::tensor::Tensor<f32>, lambda_index: u8) -> Result<RdPoint> {
    let enc = encode_image(model, img, lambda_index)?;
    let recon = to_8bit(&enc.inference.image()?);
    let orig = to_8bit(img);
    Ok(RdPoint {
        bpp: enc.bpp(),
        psnr: psnr(&orig, &recon)?,
        msssim: ms_ssim(&orig, &recon, 255.0)?,
    })
}

/// Evaluate every PNG/PPM in `dir` using `jobs` worker threads.
pub fn evaluate_corpus(model: &TreeCodec<f32>, dir: &Path, lambda_index: u8, jobs: usize) -> Result<CorpusEval> {
    let files = image_io::list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let images = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let image = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let res = image_io::load::<f32>(path).and_then(|img| evaluate_image(model, &img, lambda_index));
                match res {
                    Ok(p) => ImageResult {
                        image,
                        point: Some(p),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        ImageResult {
                            image,
                            point: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    Ok(CorpusEval { images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn single_image_mean_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        image_io::save(&dir.path().join("a.png"), &crate::synth::generate(0, 192, 192)).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let cfg = ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 4,
            ..ModelConfig::default()
        };
        let m = TreeCodec::new(cfg, 0).unwrap();
        let ev = evaluate_corpus(&m, dir.path(), 0, 2).unwrap();
        assert_eq!(ev.images.len(), 2);
        let good = ev.images.iter().find(|r| r.image == "a.png").unwrap().point.unwrap();
        assert_eq!(ev.mean().unwrap(), good);
        assert!(ev.to_csv().contains("broken.png,,,"));
    }
}
