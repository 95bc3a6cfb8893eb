//! PSNR and MS-SSIM. The f64 functions score 8-bit images for evaluation;
//! [`ms_ssim_tape`] is the differentiable training surrogate.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

pub const PSNR_CAP: f64 = 100.0;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Smallest side accepted by the 5-scale metric.
pub const MSSSIM_MIN_SIDE: usize = 176;

/// Normalised 1-D Gaussian; its outer product is the 2-D window.
pub fn gaussian_window() -> Vec<f64> {
    let mid = (WINDOW as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Quantize `[0, 1]` values to 8-bit levels (as stored in PNG).
pub fn to_8bit<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    t.map(|v| T::of((v.f64().clamp(0.0, 1.0) * 255.0).round())).cast()
}

fn check_same(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// PSNR of two images on the 0..255 scale, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same("mse", a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// One plane, row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn blur(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (h, w) = (self.h - n + 1, self.w - n + 1);
        let mut tmp = vec![0.0; self.h * w];
        for r in 0..self.h {
            for c in 0..w {
                tmp[r * w + c] = (0..n).map(|i| k[i] * self.v[r * self.w + c + i]).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                v[r * w + c] = (0..n).map(|i| k[i] * tmp[(r + i) * w + c]).sum();
            }
        }
        Plane { h, w, v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// 2x2 mean pooling; odd sides are first extended by mirroring the last row/column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |r: usize, c: usize| self.v[r.min(self.h - 1) * self.w + c.min(self.w - 1)];
        let mut v = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                v[r * w + c] =
                    (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1)) / 4.0;
            }
        }
        Plane { h, w, v }
    }
}

/// `(mean ssim, mean contrast-structure)` for one plane pair at one scale.
fn ssim_terms(x: &Plane, y: &Plane, k: &[f64], peak: f64) -> (f64, f64) {
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let mx = x.blur(k);
    let my = y.blur(k);
    let xy = x.zip(y, |a, b| a * b).blur(k);
    let xx_yy = x.zip(y, |a, b| a * a + b * b).blur(k);
    let mut ssim = 0.0;
    let mut cs = 0.0;
    for i in 0..mx.v.len() {
        let num0 = 2.0 * mx.v[i] * my.v[i];
        let den0 = mx.v[i] * mx.v[i] + my.v[i] * my.v[i];
        let lum = (num0 + c1) / (den0 + c1);
        let c = (2.0 * xy.v[i] - num0 + c2) / (xx_yy.v[i] - den0 + c2);
        ssim += lum * c;
        cs += c;
    }
    let n = mx.v.len() as f64;
    (ssim / n, cs / n)
}

/// Five-scale MS-SSIM of two `(1, C, H, W)` images with the given peak value,
/// averaged over channels.
pub fn ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    check_same("ms_ssim", a, b)?;
    let s = a.shape();
    if s.h < MSSSIM_MIN_SIDE || s.w < MSSSIM_MIN_SIDE {
        return Err(Error::ImageTooSmall {
            height: s.h,
            width: s.w,
            scales: MSSSIM_WEIGHTS.len(),
            min: MSSSIM_MIN_SIDE,
        });
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut x = Plane {
                h: s.h,
                w: s.w,
                v: a.plane(n, c).to_vec(),
            };
            let mut y = Plane {
                h: s.h,
                w: s.w,
                v: b.plane(n, c).to_vec(),
            };
            let mut value = 1.0;
            for (scale, wgt) in MSSSIM_WEIGHTS.iter().enumerate() {
                let (ssim, cs) = ssim_terms(&x, &y, &k, peak);
                let term = if scale + 1 == MSSSIM_WEIGHTS.len() { ssim } else { cs };
                value *= term.max(0.0).powf(*wgt);
                if scale + 1 < MSSSIM_WEIGHTS.len() {
                    x = x.downsample();
                    y = y.downsample();
                }
            }
            total += value;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Number of scales that fit an `h x w` image for the windowed metric.
pub fn scales_that_fit(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MSSSIM_WEIGHTS.len() && h >= WINDOW && w >= WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Differentiable MS-SSIM over `(B, C, H, W)` images in `[0, 1]`, mean over
/// images and channels. Uses as many scales as fit, with the standard
/// weights renormalised to sum to one.
pub fn ms_ssim_tape<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if y.shape() != s {
        return Err(Error::shape("ms_ssim", format!("{} vs {}", s, y.shape())));
    }
    let scales = scales_that_fit(s.h, s.w);
    if scales == 0 {
        return Err(Error::ImageTooSmall {
            height: s.h,
            width: s.w,
            scales: 1,
            min: WINDOW,
        });
    }
    let norm: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut product: Option<Var<'t, T>> = None;
    for scale in 0..scales {
        let mx = a.blur_valid(&k)?;
        let my = b.blur_valid(&k)?;
        let num0 = mx.mul(&my)?.scale(2.0)?;
        let den0 = mx.square()?.add(&my.square()?)?;
        let num1 = a.mul(&b)?.blur_valid(&k)?.scale(2.0)?;
        let den1 = a.square()?.add(&b.square()?)?.blur_valid(&k)?;
        let cs = num1.sub(&num0)?.add_scalar(c2)?.div(&den1.sub(&den0)?.add_scalar(c2)?)?;
        let last = scale + 1 == scales;
        let term = if last {
            let lum = num0.add_scalar(c1)?.div(&den0.add_scalar(c1)?)?;
            lum.mul(&cs)?.global_avg_pool()?
        } else {
            cs.global_avg_pool()?
        };
        let weighted = term.relu()?.powf(MSSSIM_WEIGHTS[scale] / norm)?;
        product = Some(match product {
            None => weighted,
            Some(p) => p.mul(&weighted)?,
        });
        if !last {
            a = a.avg_pool2x2()?;
            b = b.avg_pool2x2()?;
        }
    }
    product.expect("at least one scale").mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, side, side), |_, c, y, x| {
            let base = 120.0 + 60.0 * ((x as f64 * 0.07 + c as f64).sin() + (y as f64 * 0.05).cos());
            (base + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0).round()
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = image(0, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let mut b = a.clone();
        // MSE exactly 1: every value differs by one level.
        for v in b.data_mut() {
            *v += if *v < 255.0 { 1.0 } else { -1.0 };
        }
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-4);
        let dark = Tensor::full(Shape::new(1, 3, 4, 4), 10.0);
        let off = dark.map(|v| v + 16.0);
        assert!((psnr(&dark, &off).unwrap() - 24.048404).abs() < 1e-5);
    }

    #[test]
    fn ms_ssim_identity_and_inversion() {
        let a = image(1, 192);
        assert_eq!(ms_ssim(&a, &a, 255.0).unwrap(), 1.0);
        let inv = a.map(|v| 255.0 - v);
        assert!(ms_ssim(&a, &inv, 255.0).unwrap() < 0.5);
    }

    #[test]
    fn ms_ssim_is_symmetric_and_rejects_small_images() {
        let a = image(2, 176);
        let b = image(3, 176);
        let ab = ms_ssim(&a, &b, 255.0).unwrap();
        let ba = ms_ssim(&b, &a, 255.0).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        let small = image(4, 160);
        assert!(matches!(ms_ssim(&small, &small, 255.0), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn tape_version_matches_on_identical_inputs() {
        let tape = Tape::<f64>::inference();
        let a = tape.constant(image(5, 64).map(|v| v / 255.0));
        let v = ms_ssim_tape(&a, &a).unwrap();
        assert!((v.value().data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(scales_that_fit(64, 64), 3);
        assert_eq!(scales_that_fit(256, 256), 5);
    }
}
