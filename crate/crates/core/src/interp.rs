//! Latent ablations: decode from a subset of the four latents, and map
//! where the bits of each latent are spent.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io;
use crate::model::{CodecInference, LatentSet, TreeCodec, LATENTS};
use crate::tensor::{Real, Tensor};

/// Latent to image upscaling factor.
pub const BITMAP_SCALE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// Only latent `i` (1-based).
    Selective(usize),
    /// Latents `1..=i`.
    Accumulative(usize),
}

impl Propagation {
    pub fn index(self) -> usize {
        match self {
            Propagation::Selective(i) | Propagation::Accumulative(i) => i,
        }
    }

    pub fn validate(self) -> Result<()> {
        let i = self.index();
        if !(1..=LATENTS).contains(&i) {
            return Err(Error::InvalidArgument(format!("latent index {i} is outside 1..={LATENTS}")));
        }
        Ok(())
    }

    /// Whether zero-based slot `k` is kept.
    pub fn keeps(self, k: usize) -> bool {
        match self {
            Propagation::Selective(i) => k + 1 == i,
            Propagation::Accumulative(i) => k < i,
        }
    }

    /// File name suffix: `sp<i>` or `ac<i>`.
    pub fn tag(self) -> String {
        match self {
            Propagation::Selective(i) => format!("sp{i}"),
            Propagation::Accumulative(i) => format!("ac{i}"),
        }
    }
}

/// Synthesis from the kept latents, dropped slots set to zero. Returns the
/// padded-size, unclamped output.
pub fn propagate<T: Real>(model: &TreeCodec<T>, latents: &LatentSet<T>, spec: Propagation) -> Result<Tensor<T>> {
    spec.validate()?;
    model.reconstruct(&latents.retain(|k| spec.keeps(k)))
}

/// Channel-mean bits per latent position, before and after upscaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    /// `(h, w)` of the latent grid.
    pub grid_hw: (usize, usize),
    pub grid: Vec<f64>,
    pub channels: usize,
}

impl Bitmap {
    /// From the coding likelihoods of one latent.
    pub fn from_likelihood<T: Real>(likelihood: &Tensor<T>) -> Bitmap {
        let s = likelihood.shape();
        let mut grid = vec![0.0; s.h * s.w];
        for c in 0..s.c {
            for (g, p) in grid.iter_mut().zip(likelihood.plane(0, c)) {
                *g -= p.f64().log2();
            }
        }
        for g in &mut grid {
            *g /= s.c as f64;
        }
        Bitmap {
            grid_hw: (s.h, s.w),
            grid,
            channels: s.c,
        }
    }

    pub fn total_bits(&self) -> f64 {
        self.grid.iter().sum::<f64>() * self.channels as f64
    }

    /// Nearest-neighbour upscaling by [`BITMAP_SCALE`]; row-major `(H, W)`.
    pub fn upscaled(&self) -> (usize, usize, Vec<f64>) {
        let (h, w) = self.grid_hw;
        let (uh, uw) = (h * BITMAP_SCALE, w * BITMAP_SCALE);
        let data = (0..uh * uw)
            .map(|i| self.grid[(i / uw / BITMAP_SCALE) * w + (i % uw) / BITMAP_SCALE])
            .collect();
        (uh, uw, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.grid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Upscaled map normalised to 0..255 (all zeros when the map is flat).
    pub fn to_gray(&self) -> (usize, usize, Vec<u8>) {
        let (lo, hi) = self.min_max();
        let (h, w, data) = self.upscaled();
        let px = data
            .into_iter()
            .map(|v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
            .collect();
        (h, w, px)
    }
}

/// Bitmap of latent `i` (1-based).
pub fn bitmap<T: Real>(inference: &CodecInference<T>, i: usize) -> Result<Bitmap> {
    Propagation::Selective(i).validate()?;
    Ok(Bitmap::from_likelihood(&inference.latents[i - 1].y_likelihood))
}

fn stem(image: &Path) -> String {
    image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Write `<image>_sp<i>.png` and `<image>_ac<i>.png` for all four indices.
/// Outputs are cropped to the original size.
pub fn write_ablations(model: &TreeCodec<f32>, image: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let img = image_io::load::<f32>(image)?;
    let inf = model.infer(&img)?;
    let set = inf.y_hat();
    let (h, w) = inf.original;
    let name = stem(image);
    let mut written = Vec::new();
    for i in 1..=LATENTS {
        for spec in [Propagation::Selective(i), Propagation::Accumulative(i)] {
            let out = propagate(model, &set, spec)?.crop(h, w)?;
            let path = out_dir.join(format!("{name}_{}.png", spec.tag()));
            image_io::save(&path, &out)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Write `<image>_bitmap<i>.png` and its `.minmax.txt` sidecar for each index.
pub fn write_bitmaps(model: &TreeCodec<f32>, image: &Path, out_dir: &Path, indices: &[usize]) -> Result<Vec<PathBuf>> {
    let img = image_io::load::<f32>(image)?;
    let inf = model.infer(&img)?;
    let name = stem(image);
    let mut written = Vec::new();
    for &i in indices {
        let map = bitmap(&inf, i)?;
        let (h, w, px) = map.to_gray();
        let path = out_dir.join(format!("{name}_bitmap{i}.png"));
        image_io::save_gray(&path, w, h, px)?;
        let (lo, hi) = map.min_max();
        let side = out_dir.join(format!("{name}_bitmap{i}.minmax.txt"));
        std::fs::write(&side, format!("min_bits = {lo}\nmax_bits = {hi}\n"))?;
        written.push(path);
        written.push(side);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::Module;
    use crate::tensor::Shape;

    fn small() -> TreeCodec<f32> {
        let cfg = ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 4,
            ..ModelConfig::default()
        };
        TreeCodec::new(cfg, 2).unwrap()
    }

    #[test]
    fn index_validation_and_masks() {
        assert!(Propagation::Selective(0).validate().is_err());
        assert!(Propagation::Accumulative(5).validate().is_err());
        let kept: Vec<bool> = (0..4).map(|k| Propagation::Accumulative(2).keeps(k)).collect();
        assert_eq!(kept, vec![true, true, false, false]);
        let kept: Vec<bool> = (0..4).map(|k| Propagation::Selective(3).keeps(k)).collect();
        assert_eq!(kept, vec![false, false, true, false]);
    }

    #[test]
    fn full_accumulation_equals_decode() {
        let m = small();
        let inf = m.infer(&crate::synth::generate(1, 64, 64)).unwrap();
        assert_eq!(propagate(&m, &inf.y_hat(), Propagation::Accumulative(4)).unwrap(), inf.x_hat);
    }

    #[test]
    fn zero_bias_model_on_black_image_gives_black_outputs() {
        let mut m = small();
        for p in m.params_mut() {
            if p.name().ends_with(".bias") {
                let s = p.shape();
                p.set_value(Tensor::zeros(s)).unwrap();
            }
        }
        let inf = m.infer(&Tensor::zeros(Shape::new(1, 3, 64, 64))).unwrap();
        for i in 1..=4 {
            let out = propagate(&m, &inf.y_hat(), Propagation::Selective(i)).unwrap();
            assert!(out.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn bitmap_sums_to_latent_bits_and_blocks_are_constant() {
        let m = small();
        let inf = m.infer(&crate::synth::generate(3, 64, 128)).unwrap();
        for i in 1..=4 {
            let map = bitmap(&inf, i).unwrap();
            let bits = inf.latents[i - 1].y_bits();
            assert!((map.total_bits() - bits).abs() <= 1e-6 * bits.max(1.0));
            let (h, w, up) = map.upscaled();
            assert_eq!((h, w), (64, 128));
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(up[r * w + c], up[(r / 16 * 16) * w + c / 16 * 16]);
                }
            }
        }
        let flat = Bitmap::from_likelihood(&Tensor::<f32>::full(Shape::new(1, 4, 2, 3), 0.25));
        assert!(flat.grid.iter().all(|v| *v == 2.0));
        assert!(flat.to_gray().2.iter().all(|v| *v == 0));
    }
}
