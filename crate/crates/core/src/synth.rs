//! Seeded procedural images: smooth gradients, flat shapes, stripes and grain.
//! Feature sizes are in pixels, so small crops and large test images share statistics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_io;
use crate::tensor::{Shape, Tensor};

enum Shape2 {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { freq: f64, angle: f64, phase: f64 },
}

struct Layer {
    shape: Shape2,
    color: [f64; 3],
    alpha: f64,
}

/// One `(1, 3, h, w)` image in `[0, 1]`, fully determined by `seed`.
pub fn generate(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let tilt: f64 = rng.gen_range(-1.0..1.0);
    let area = (h * w) as f64;
    let count = 2 + (area / 1500.0 * rng.gen_range(0.5..1.5)) as usize;
    let layers: Vec<Layer> = (0..count.min(80))
        .map(|_| {
            let kind = rng.gen_range(0..10);
            let shape = match kind {
                0..=4 => Shape2::Disc {
                    cx: rng.gen_range(0.0..w as f64),
                    cy: rng.gen_range(0.0..h as f64),
                    r: rng.gen_range(3.0..30.0),
                },
                5..=8 => {
                    let x0 = rng.gen_range(-10.0..w as f64);
                    let y0 = rng.gen_range(-10.0..h as f64);
                    Shape2::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.gen_range(4.0..50.0),
                        y1: y0 + rng.gen_range(4.0..50.0),
                    }
                }
                _ => Shape2::Stripes {
                    freq: rng.gen_range(0.05..0.5),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    phase: rng.gen_range(0.0..6.3),
                },
            };
            Layer {
                shape,
                color: color(&mut rng),
                alpha: rng.gen_range(0.4..1.0),
            }
        })
        .collect();
    let grain: f64 = rng.gen_range(0.0..0.03);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = ((y as f64 + tilt * x as f64) / (h as f64 + w as f64)).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            for l in &layers {
                let cover = match l.shape {
                    Shape2::Disc { cx, cy, r } => {
                        let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                        (r - d + 0.5).clamp(0.0, 1.0)
                    }
                    Shape2::Rect { x0, y0, x1, y1 } => {
                        if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Shape2::Stripes { freq, angle, phase } => {
                        let u = fx * angle.cos() + fy * angle.sin();
                        0.5 * (0.5 + 0.5 * (u * freq + phase).sin())
                    }
                };
                let a = cover * l.alpha;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + l.color[c] * a;
                }
            }
            for (c, v) in px.iter().enumerate() {
                let g = noise.gen_range(-1.0..1.0) * grain;
                img.set(0, c, y, x, (v + g).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Write `count` PNGs named `img0000.png`, ... into `dir`; image `i` uses seed `seed + i`.
pub fn write_corpus(dir: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img{i:04}.png"));
            image_io::save(&path, &generate(seed + i as u64, h, w))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = generate(3, 40, 48);
        assert_eq!(a, generate(3, 40, 48));
        assert_ne!(a, generate(4, 40, 48));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
