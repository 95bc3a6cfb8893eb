//! Bjøntegaard delta rate: log-rate fitted as a cubic in the quality
//! metric, averaged over the overlapping quality range.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    MsSsim,
}

impl Metric {
    pub fn of(self, p: &RdPoint) -> f64 {
        match self {
            Metric::Psnr => p.psnr,
            Metric::MsSsim => p.msssim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::MsSsim => "msssim",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "msssim" | "ms-ssim" | "ms_ssim" => Ok(Metric::MsSsim),
            other => Err(format!("unknown metric `{other}` (psnr, msssim)")),
        }
    }
}

/// Operating points of one codec, sorted by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub codec: String,
    pub points: Vec<RdPoint>,
}

pub const CURVE_HEADER: &str = "codec,bpp,psnr,msssim";

impl RdCurve {
    pub fn new(codec: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite() && p.msssim.is_finite()) {
                return Err(Error::BdRate(format!("invalid point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::BdRate("duplicate bpp values".into()));
        }
        Ok(RdCurve {
            codec: codec.into(),
            points,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for p in &self.points {
            s += &format!("{},{},{},{}\n", self.codec, p.bpp, p.psnr, p.msssim);
        }
        s
    }

    /// Parse a `codec,bpp,psnr,msssim` file; the codec name comes from the first row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::BdRate(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != CURVE_HEADER.split(',').collect::<Vec<_>>() {
            return Err(Error::BdRate(format!("expected header `{CURVE_HEADER}`")));
        }
        let mut codec = None;
        let mut points = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::BdRate(e.to_string()))?;
            let num = |k: usize| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| Error::BdRate(format!("row {}: `{}`: {e}", i + 2, &rec[k])))
            };
            codec.get_or_insert_with(|| rec[0].to_string());
            points.push(RdPoint {
                bpp: num(1)?,
                psnr: num(2)?,
                msssim: num(3)?,
            });
        }
        RdCurve::new(codec.unwrap_or_default(), points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdResult {
    /// Average rate change of the test curve relative to the base, in percent.
    pub percent: f64,
    /// Metric interval covered by both curves, over which log-rates were compared.
    pub metric_range: (f64, f64),
    pub metric: Metric,
}

/// Least-squares cubic `c0 + c1 x + c2 x^2 + c3 x^3`.
fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(x.len(), 4, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::BdRate(format!("cubic fit failed: {e}")))?;
    let c = [sol[0], sol[1], sol[2], sol[3]];
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::BdRate("cubic fit is not finite".into()));
    }
    Ok(c)
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

pub fn bd_rate(base: &RdCurve, test: &RdCurve, metric: Metric) -> Result<BdResult> {
    for c in [base, test] {
        if c.points.len() < 4 {
            return Err(Error::BdRate(format!("curve `{}` has {} points, need 4", c.codec, c.points.len())));
        }
    }
    let prep = |c: &RdCurve| -> Result<(Vec<f64>, Vec<f64>)> {
        let q: Vec<f64> = c.points.iter().map(|p| metric.of(p)).collect();
        let mut sorted = q.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::BdRate(format!("curve `{}` repeats a {} value", c.codec, metric.name())));
        }
        Ok((q, c.points.iter().map(|p| p.bpp.log10()).collect()))
    };
    let (qa, ra) = prep(base)?;
    let (qb, rb) = prep(test)?;
    let range = |q: &[f64]| (q.iter().copied().fold(f64::INFINITY, f64::min), q.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (a_lo, a_hi) = range(&qa);
    let (b_lo, b_hi) = range(&qb);
    let (lo, hi) = (a_lo.max(b_lo), a_hi.min(b_hi));
    if !(hi > lo) {
        return Err(Error::BdRate(format!(
            "{} ranges do not overlap: [{a_lo}, {a_hi}] vs [{b_lo}, {b_hi}]",
            metric.name()
        )));
    }
    // Fit in the overlap mapped to [-1, 1]; raw metric powers are badly conditioned.
    let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    let unit = |q: &[f64]| q.iter().map(|v| (v - mid) / half).collect::<Vec<_>>();
    let fa = fit_cubic(&unit(&qa), &ra)?;
    let fb = fit_cubic(&unit(&qb), &rb)?;
    let avg = (integral(&fb, -1.0, 1.0) - integral(&fa, -1.0, 1.0)) / 2.0;
    Ok(BdResult {
        percent: (10f64.powf(avg) - 1.0) * 100.0,
        metric_range: (lo, hi),
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curve(scale: f64) -> RdCurve {
        let pts = [(0.1, 28.0, 0.90), (0.2, 30.5, 0.94), (0.4, 33.0, 0.965), (0.8, 35.2, 0.98)];
        RdCurve::new(
            "c",
            pts.iter()
                .map(|&(b, p, m)| RdPoint {
                    bpp: b * scale,
                    psnr: p,
                    msssim: m,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn closed_form_cases() {
        let a = curve(1.0);
        for m in [Metric::Psnr, Metric::MsSsim] {
            assert!(bd_rate(&a, &a, m).unwrap().percent.abs() < 1e-9);
            assert!((bd_rate(&a, &curve(2.0), m).unwrap().percent - 100.0).abs() < 0.1);
            assert!((bd_rate(&a, &curve(0.5), m).unwrap().percent + 50.0).abs() < 0.1);
        }
    }

    #[test]
    fn antisymmetry_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let random = |rng: &mut ChaCha8Rng| {
            let mut bpp = rng.gen_range(0.05..0.2);
            let mut q = rng.gen_range(25.0..30.0);
            let pts = (0..rng.gen_range(4..7))
                .map(|_| {
                    bpp *= rng.gen_range(1.3..2.2);
                    q += rng.gen_range(0.8..3.0);
                    RdPoint {
                        bpp,
                        psnr: q,
                        msssim: 1.0 - 0.1 / q,
                    }
                })
                .collect();
            RdCurve::new("r", pts).unwrap()
        };
        let mut checked = 0;
        while checked < 50 {
            let (a, b) = (random(&mut rng), random(&mut rng));
            let (Ok(ab), Ok(ba)) = (bd_rate(&a, &b, Metric::Psnr), bd_rate(&b, &a, Metric::Psnr)) else {
                continue;
            };
            let predicted = -ba.percent / (1.0 + ba.percent / 100.0);
            assert!((ab.percent - predicted).abs() <= 1e-3 * predicted.abs().max(1.0));
            checked += 1;
        }
    }

    #[test]
    fn errors() {
        let a = curve(1.0);
        let mut far = curve(1.0);
        for p in &mut far.points {
            p.psnr += 50.0;
        }
        assert!(matches!(bd_rate(&a, &far, Metric::Psnr), Err(Error::BdRate(_))));
        let short = RdCurve::new("s", a.points[..3].to_vec()).unwrap();
        assert!(bd_rate(&a, &short, Metric::Psnr).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let a = curve(1.0);
        assert_eq!(RdCurve::from_csv(&a.to_csv()).unwrap(), a);
        assert!(RdCurve::from_csv("x,y\n1,2").is_err());
    }
}
