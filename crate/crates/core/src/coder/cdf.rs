//! Integer CDF tables over `[-L, L]` plus an escape bin, and integer coding
//! with escapes for out-of-range values.

use super::range::{RangeDecoder, RangeEncoder};
use crate::entropy::{gaussian_bin_probability, PriorEvaluator};
use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;

/// Largest alphabet bound written to a segment; larger values are escaped.
pub const MAX_BOUND: u32 = 64;

/// Cumulative counts for symbols `-L..=L` followed by the escape bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    bound: u32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// From probabilities of `-L..=L`; the escape bin takes the leftover
    /// mass. Every symbol gets at least one count and the total is `2^16`.
    pub fn from_probabilities(bound: u32, probs: &[f64]) -> Self {
        assert_eq!(probs.len(), 2 * bound as usize + 1, "one probability per in-range symbol");
        let n = probs.len() + 1;
        let spare = (TOTAL as usize - n) as f64;
        let inside: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let escape = (1.0 - inside).max(0.0);
        let mut freq: Vec<u32> = probs
            .iter()
            .copied()
            .chain(std::iter::once(escape))
            .map(|p| 1 + (p.clamp(0.0, 1.0) * spare).floor() as u32)
            .collect();
        let sum: i64 = freq.iter().map(|&f| f as i64).sum();
        // Settle the rounding difference on the most probable symbol (first on ties).
        let mode = (0..n).fold(0, |best, i| if freq[i] > freq[best] { i } else { best });
        let fixed = freq[mode] as i64 + TOTAL as i64 - sum;
        assert!(fixed >= 1, "rounding cannot exhaust the mode");
        freq[mode] = fixed as u32;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for f in freq {
            cum.push(cum.last().expect("non-empty") + f);
        }
        CdfTable { bound, cum }
    }

    /// Residual `round(y - mean)` under a zero-mean Gaussian of the given scale.
    pub fn gaussian(bound: u32, scale: f64) -> Self {
        let b = bound as i64;
        let probs: Vec<f64> = (-b..=b).map(|q| gaussian_bin_probability(q as f64, 0.0, scale)).collect();
        Self::from_probabilities(bound, &probs)
    }

    /// One hyper-latent channel under the factorized prior.
    pub fn prior(bound: u32, prior: &PriorEvaluator, channel: usize) -> Self {
        let b = bound as i64;
        let probs: Vec<f64> = (-b..=b).map(|v| prior.probability(channel, v as f64)).collect();
        Self::from_probabilities(bound, &probs)
    }

    pub fn bound(&self) -> u32 {
        self.bound
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    fn escape_index(&self) -> usize {
        2 * self.bound as usize + 1
    }

    /// Counts out of `2^16` for value `v`, or for the escape bin when out of range.
    pub fn frequency(&self, v: i32) -> u32 {
        let i = self.index(v).unwrap_or(self.escape_index());
        self.cum[i + 1] - self.cum[i]
    }

    fn index(&self, v: i32) -> Option<usize> {
        (v.unsigned_abs() <= self.bound).then(|| (v + self.bound as i32) as usize)
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i32) {
        match self.index(v) {
            Some(i) => enc.encode(self.cum[i], self.cum[i + 1] - self.cum[i], PRECISION),
            None => {
                let e = self.escape_index();
                enc.encode(self.cum[e], self.cum[e + 1] - self.cum[e], PRECISION);
                let z = zigzag(v);
                let len = 32 - z.leading_zeros();
                enc.encode_bits(len - 1, 5);
                enc.encode_bits(z, len);
            }
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let s = dec.decode(&self.cum, PRECISION)?;
        if s < self.escape_index() {
            return Ok(s as i32 - self.bound as i32);
        }
        let len = dec.decode_bits(5) + 1;
        let z = dec.decode_bits(len);
        let v = unzigzag(z);
        if v.unsigned_abs() <= self.bound {
            return Err(Error::Bitstream(format!("escaped value {v} is inside the alphabet")));
        }
        Ok(v)
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

/// Alphabet bound for a set of values: `max |v| + 2`, capped at [`MAX_BOUND`].
pub fn bound_for(values: &[i32]) -> u32 {
    (values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) + 2).min(MAX_BOUND)
}

pub fn write_varint(out: &mut Vec<u8>, mut v: u32) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Returns the value and the number of bytes read.
pub fn read_varint(buf: &[u8]) -> Result<(u32, usize)> {
    let mut v = 0u32;
    for (i, b) in buf.iter().enumerate().take(5) {
        v |= ((b & 0x7f) as u32) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((v, i + 1));
        }
    }
    Err(Error::Bitstream("truncated or oversized varint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tables_are_strictly_increasing_and_total_2_16() {
        for (bound, scale) in [(0, 0.11), (3, 0.11), (10, 2.0), (64, 50.0), (64, 1e6)] {
            let t = CdfTable::gaussian(bound, scale);
            assert_eq!(t.cumulative().len(), 2 * bound as usize + 3);
            assert_eq!(*t.cumulative().last().unwrap(), TOTAL);
            assert!(t.cumulative().windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn random_symbols_round_trip_with_escapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<(CdfTable, i32)> = (0..100_000)
            .map(|i| {
                let bound = rng.gen_range(0..8);
                let scale = rng.gen_range(0.11..6.0);
                let v = if i % 97 == 0 { rng.gen_range(-100_000..100_000) } else { rng.gen_range(-10..=10) };
                (CdfTable::gaussian(bound, scale), v)
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for (t, v) in &items {
            t.encode(&mut enc, *v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for (t, v) in &items {
            assert_eq!(t.decode(&mut dec).unwrap(), *v);
        }
    }

    #[test]
    fn extreme_values_escape() {
        let t = CdfTable::gaussian(2, 1.0);
        let mut enc = RangeEncoder::new();
        for v in [i32::MIN, i32::MAX, -3, 3, 0] {
            t.encode(&mut enc, v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for v in [i32::MIN, i32::MAX, -3, 3, 0] {
            assert_eq!(t.decode(&mut dec).unwrap(), v);
        }
    }

    #[test]
    fn varints() {
        for v in [0, 1, 127, 128, 300, u32::MAX] {
            let mut b = Vec::new();
            write_varint(&mut b, v);
            assert_eq!(read_varint(&b).unwrap(), (v, b.len()));
        }
        assert!(read_varint(&[0x80]).is_err());
        assert_eq!(bound_for(&[0, -5, 3]), 7);
        assert_eq!(bound_for(&[1000]), MAX_BOUND);
    }
}
