//! Byte-oriented range coder with carry propagation through a cached byte.
//! Frequencies are given against a power-of-two total of at most 2^16.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xff00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xff;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00ff_ffff) << 8;
    }

    /// Code the interval `[start, start + freq)` out of `1 << total_bits`.
    pub fn encode(&mut self, start: u32, freq: u32, total_bits: u32) {
        debug_assert!(freq > 0 && total_bits <= 16 && start + freq <= 1 << total_bits);
        let unit = self.range >> total_bits;
        self.low += unit as u64 * start as u64;
        self.range = unit * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// `bits` raw bits of `value` (at most 32), in 16-bit chunks.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        let mut left = bits;
        while left > 0 {
            let take = left.min(16);
            left -= take;
            self.encode((value >> left) & ((1 << take) - 1), 1, take);
        }
    }

    /// Pick the value in the final interval with the most trailing zero
    /// bytes, emit it, and drop the zero bytes the decoder will infer.
    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range as u64;
        for shift in (0..=32).rev() {
            let mask = (1u64 << shift) - 1;
            let v = (self.low + mask) & !mask;
            if v < hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        // The first byte is always the initial empty cache.
        let mut out = self.out.split_off(1);
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    /// Bytes past the end read as zero (the encoder strips them).
    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed so far, including implicit trailing zeros.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Decode against cumulative counts `cum` (`cum[0] = 0`,
    /// `cum[n] = 1 << total_bits`); returns the symbol index.
    pub fn decode(&mut self, cum: &[u32], total_bits: u32) -> Result<usize> {
        let unit = self.range >> total_bits;
        let target = (self.code / unit).min((1 << total_bits) - 1);
        // Last index with cum[s] <= target.
        let s = cum.partition_point(|&c| c <= target).saturating_sub(1);
        if s + 1 >= cum.len() || cum[s + 1] <= cum[s] {
            return Err(Error::Bitstream(format!("no symbol for target {target}")));
        }
        self.consume(cum[s], cum[s + 1] - cum[s], unit);
        Ok(s)
    }

    fn consume(&mut self, start: u32, freq: u32, unit: u32) {
        self.code -= unit * start;
        self.range = unit * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode_bits(&mut self, bits: u32) -> u32 {
        let mut value = 0u32;
        let mut left = bits;
        while left > 0 {
            let take = left.min(16);
            left -= take;
            let unit = self.range >> take;
            let v = (self.code / unit).min((1 << take) - 1);
            self.consume(v, 1, unit);
            value = (value << take) | v;
        }
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_bytes_cost_one_byte_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let symbols: Vec<u32> = (0..4096).map(|_| rng.gen_range(0..256)).collect();
        let cum: Vec<u32> = (0..=256).map(|i| i * 256).collect();
        let mut enc = RangeEncoder::new();
        for s in &symbols {
            enc.encode(s * 256, 256, 16);
        }
        let bytes = enc.finish();
        assert!((bytes.len() as i64 - 4096).abs() <= 34, "{} bytes", bytes.len());
        let mut dec = RangeDecoder::new(&bytes);
        for s in &symbols {
            assert_eq!(dec.decode(&cum, 16).unwrap(), *s as usize);
        }
    }

    #[test]
    fn skewed_and_raw_bits_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cum = [0u32, 1, 60000, 65535, 65536];
        let items: Vec<(usize, u32)> = (0..20000)
            .map(|_| (if rng.gen_bool(0.9) { 1 } else { rng.gen_range(0..4) }, rng.gen::<u32>()))
            .collect();
        let mut enc = RangeEncoder::new();
        for (s, raw) in &items {
            enc.encode(cum[*s], cum[s + 1] - cum[*s], 16);
            enc.encode_bits(*raw, 32);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for (s, raw) in &items {
            assert_eq!(dec.decode(&cum, 16).unwrap(), *s);
            assert_eq!(dec.decode_bits(32), *raw);
        }
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(RangeEncoder::new().finish().is_empty());
    }
}
