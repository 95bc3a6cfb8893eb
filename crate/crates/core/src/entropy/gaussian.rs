use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Smallest scale used by the conditional model.
pub const SCALE_FLOOR: f64 = 0.11;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Mass of the unit bin centred at `value` under N(mean, scale^2).
///
/// Evaluated on the lower tail by symmetry so small probabilities keep
/// their precision.
#[inline]
pub fn gaussian_bin_probability(value: f64, mean: f64, scale: f64) -> f64 {
    let v = (value - mean).abs();
    normal_cdf((0.5 - v) / scale) - normal_cdf((-0.5 - v) / scale)
}

/// Bin probabilities of `y` under N(mean, scale^2), differentiable in all three.
///
/// `scale` must already be floored; see [`SCALE_FLOOR`].
pub fn gaussian_likelihood<'t, T: Real>(y: &Var<'t, T>, mean: &Var<'t, T>, scale: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = y.shape();
    if mean.shape() != s || scale.shape() != s {
        return Err(Error::shape(
            "gaussian_likelihood",
            format!("y {s}, mean {}, scale {}", mean.shape(), scale.shape()),
        ));
    }
    let (yv, mv, sv) = (y.shared(), mean.shared(), scale.shared());
    let mut p = Vec::with_capacity(s.numel());
    for ((a, m), sc) in yv.data().iter().zip(mv.data()).zip(sv.data()) {
        p.push(T::of(gaussian_bin_probability(a.f64(), m.f64(), sc.f64())));
    }
    let value = Tensor::from_vec(s, p)?;
    y.tape().custom("gaussian_likelihood", &[y, mean, scale], value, move |g| {
        let mut dy = Vec::with_capacity(s.numel());
        let mut ds = Vec::with_capacity(s.numel());
        for i in 0..s.numel() {
            let u = yv.data()[i].f64() - mv.data()[i].f64();
            let sc = sv.data()[i].f64();
            let v = u.abs();
            let a = (0.5 - v) / sc;
            let b = (-0.5 - v) / sc;
            let (pa, pb) = (normal_pdf(a), normal_pdf(b));
            let gi = g.data()[i].f64();
            let dv = (pb - pa) / sc;
            dy.push(T::of(gi * u.signum() * dv));
            ds.push(T::of(gi * -(a * pa - b * pb) / sc));
        }
        let dy = Tensor::from_vec(s, dy).expect("shape");
        let dm = dy.map(|v| -v);
        vec![Some(dy), Some(dm), Some(Tensor::from_vec(s, ds).expect("shape"))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_bin_at_zero() {
        // Phi(0.5) - Phi(-0.5)
        assert!((gaussian_bin_probability(0.0, 0.0, 1.0) - 0.382_924_922_548_026).abs() < 1e-12);
    }

    #[test]
    fn bins_sum_to_one() {
        for (mu, sigma) in [(0.3f64, 1.7f64), (-4.2, 0.11), (12.5, 6.0)] {
            let lo = (mu - 10.0 * sigma).floor() as i64 - 1;
            let hi = (mu + 10.0 * sigma).ceil() as i64 + 1;
            let total: f64 = (lo..=hi).map(|k| gaussian_bin_probability(k as f64, mu, sigma)).sum();
            assert!((total - 1.0).abs() < 1e-6, "{mu} {sigma}: {total}");
        }
    }

    #[test]
    fn centred_bin_is_the_most_likely() {
        let best = gaussian_bin_probability(2.0, 2.0, SCALE_FLOOR);
        for k in -3..8 {
            assert!(gaussian_bin_probability(k as f64, 2.0, SCALE_FLOOR) <= best);
        }
        assert!(best > 0.99);
    }
}
