//! Per-latent entropy bottleneck: quantization, a factorized prior for the
//! hyper-latent, a Gaussian conditional for the latent, and the two-pass
//! checkerboard context.

mod bottleneck;
mod factorized;
mod gaussian;

pub use bottleneck::{pass_indices, BottleneckInference, BottleneckTrain, EntropyBottleneck};
pub use factorized::{FactorizedPrior, PriorEvaluator};
pub use gaussian::{gaussian_bin_probability, gaussian_likelihood, normal_cdf, SCALE_FLOOR};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor, Var};

/// Likelihoods are bounded below by this before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in [-0.5, 0.5), the training surrogate.
    Noise,
    Round,
    /// Round the residual to a mean, then add the mean back.
    RoundAroundMean,
}

/// Ties go to the even neighbour: `round(-2.5) = -2`.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

pub fn quantize<'t, T: Real>(
    y: &Var<'t, T>,
    mode: QuantMode,
    mean: Option<&Var<'t, T>>,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    let tape = y.tape();
    match mode {
        QuantMode::Noise => {
            let noise = Tensor::from_fn(y.shape(), |_, _, _, _| T::of(rng.gen_range(-0.5..0.5)));
            y.add(&tape.constant(noise))
        }
        QuantMode::Round => Ok(tape.constant(y.value().map(|v| T::of(round_half_even(v.f64()))))),
        QuantMode::RoundAroundMean => {
            let mu = mean.ok_or(Error::MissingMean)?;
            if mu.shape() != y.shape() {
                return Err(Error::shape("quantize", format!("mean {} for {}", mu.shape(), y.shape())));
            }
            let data = y
                .value()
                .data()
                .iter()
                .zip(mu.value().data())
                .map(|(v, m)| T::of(round_half_even((*v - *m).f64())) + *m)
                .collect();
            Ok(tape.constant(Tensor::from_vec(y.shape(), data)?))
        }
    }
}

/// Anchors of the checkerboard: positions with even `row + col`.
#[inline]
pub fn is_anchor(row: usize, col: usize) -> bool {
    (row + col) % 2 == 0
}

/// `1` on anchors, `0` elsewhere, shape `(1, 1, h, w)`.
pub fn anchor_mask<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, r, c| if is_anchor(r, c) { T::one() } else { T::zero() })
}

pub fn non_anchor_mask<T: Real>(h: usize, w: usize) -> Tensor<T> {
    anchor_mask::<T>(h, w).map(|v| T::one() - v)
}

/// Copy of `t` with every non-anchor position set to `+0`.
pub fn keep_anchors<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, r, col| if is_anchor(r, col) { t.at(n, c, r, col) } else { T::zero() })
}

/// Kernel mask for the context convolution: only taps at odd `dr + dc`
/// offsets, which are exactly the anchor neighbours of a non-anchor.
pub fn context_kernel_mask<T: Real>(cout: usize, cin: usize, k: usize) -> Tensor<T> {
    let r = k / 2;
    Tensor::from_fn(Shape::new(cout, cin, k, k), |_, _, i, j| {
        let d = i.abs_diff(r) + j.abs_diff(r);
        if d % 2 == 1 {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_convention() {
        assert_eq!(round_half_even(2.4), 2.0);
        assert_eq!(round_half_even(-2.5), -2.0);
        assert_eq!(round_half_even(3.5), 4.0);
    }

    #[test]
    fn quantizer_modes() {
        let tape = Tape::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.constant(Tensor::from_fn(Shape::new(1, 2, 8, 8), |_, c, h, w| (c * 64 + h * 8 + w) as f64 * 0.37 - 9.0));
        let noisy = quantize(&y, QuantMode::Noise, None, &mut rng).unwrap();
        for (a, b) in noisy.value().data().iter().zip(y.value().data()) {
            assert!((a - b).abs() <= 0.5);
        }
        let r = quantize(&y, QuantMode::Round, None, &mut rng).unwrap();
        assert!(r.value().data().iter().all(|v| v.fract() == 0.0));
        assert!(matches!(
            quantize(&y, QuantMode::RoundAroundMean, None, &mut rng),
            Err(Error::MissingMean)
        ));
        let y1 = tape.constant(Tensor::scalar(2.4));
        let mu = tape.constant(Tensor::scalar(0.3));
        let q = quantize(&y1, QuantMode::RoundAroundMean, Some(&mu), &mut rng).unwrap();
        assert!((q.value().data()[0] - 2.3).abs() < 1e-12);
    }

    #[test]
    fn masks_partition_the_lattice() {
        let a = anchor_mask::<f32>(5, 7);
        let n = non_anchor_mask::<f32>(5, 7);
        assert_eq!(a.sum() + n.sum(), 35.0);
        assert!(a.data().iter().zip(n.data()).all(|(x, y)| x + y == 1.0));
    }

    #[test]
    fn context_kernel_keeps_odd_offsets() {
        let k = context_kernel_mask::<f32>(1, 1, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(k.at(0, 0, i, j) == 1.0, (i + j) % 2 == 1, "tap {i},{j}");
            }
        }
        assert_eq!(k.sum(), 12.0);
    }
}
