//! `TNBS` container: a fixed header, four hyper-latent segments, then four
//! latent segments. Each segment is a varint alphabet bound followed by
//! range-coded symbols.

use std::collections::HashMap;

use super::cdf::{bound_for, read_varint, write_varint, CdfTable};
use super::range::{RangeDecoder, RangeEncoder};
use crate::entropy::{pass_indices, BottleneckInference, EntropyBottleneck};
use crate::error::{Error, Result};
use crate::model::{CodecInference, LatentSet, TreeCodec, LATENTS, PAD_MULTIPLE};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TNBS";
/// Version 1: anchors are the positions with even `row + col`.
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 8 * LATENTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub config_id: u8,
    pub lambda_index: u8,
    /// `(z bytes, y bytes)` per latent.
    pub segments: [(u32, u32); LATENTS],
}

impl Header {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.config_id);
        out.push(self.lambda_index);
        for (z, y) in self.segments {
            out.extend_from_slice(&z.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    pub fn parse(buf: &[u8]) -> Result<Header> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("{} bytes is shorter than the header", buf.len())));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if buf[4] != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", buf[4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let mut segments = [(0, 0); LATENTS];
        for (k, s) in segments.iter_mut().enumerate() {
            *s = (u32_at(15 + 8 * k), u32_at(19 + 8 * k));
        }
        let h = Header {
            width: u32_at(5),
            height: u32_at(9),
            config_id: buf[13],
            lambda_index: buf[14],
            segments,
        };
        if h.width == 0 || h.height == 0 {
            return Err(Error::Bitstream(format!("bad image size {}x{}", h.width, h.height)));
        }
        Ok(h)
    }

    /// Segment byte counts in file order: four z segments, then four y segments.
    pub fn segment_lengths(&self) -> [usize; 2 * LATENTS] {
        let mut out = [0; 2 * LATENTS];
        for k in 0..LATENTS {
            out[k] = self.segments[k].0 as usize;
            out[LATENTS + k] = self.segments[k].1 as usize;
        }
        out
    }

    pub fn payload_bytes(&self) -> usize {
        self.segment_lengths().iter().sum()
    }
}

/// Model identity byte stored in the header (low byte of the weight fingerprint).
pub fn config_id<T: crate::tensor::Real>(model: &TreeCodec<T>) -> u8 {
    (model.fingerprint() & 0xff) as u8
}

pub struct Encoded {
    pub bytes: Vec<u8>,
    pub header: Header,
    pub inference: CodecInference<f32>,
}

impl Encoded {
    /// Bits over the original pixel count, header included.
    pub fn bpp(&self) -> f64 {
        self.bytes.len() as f64 * 8.0 / (self.header.width as f64 * self.header.height as f64)
    }

    pub fn payload_bits(&self) -> f64 {
        self.header.payload_bytes() as f64 * 8.0
    }
}

/// Caches tables by scale bit pattern; scales repeat often near the floor.
struct ScaleTables {
    bound: u32,
    tables: HashMap<u32, CdfTable>,
}

impl ScaleTables {
    fn new(bound: u32) -> Self {
        ScaleTables {
            bound,
            tables: HashMap::new(),
        }
    }

    fn get(&mut self, scale: f32) -> &CdfTable {
        let bound = self.bound;
        self.tables
            .entry(scale.to_bits())
            .or_insert_with(|| CdfTable::gaussian(bound, scale as f64))
    }
}

fn prior_tables(eb: &EntropyBottleneck<f32>, bound: u32) -> Vec<CdfTable> {
    let ev = eb.prior_evaluator();
    (0..ev.channels()).map(|c| CdfTable::prior(bound, &ev, c)).collect()
}

fn encode_z(eb: &EntropyBottleneck<f32>, lat: &BottleneckInference<f32>) -> Vec<u8> {
    let bound = bound_for(&lat.z_symbols);
    let tables = prior_tables(eb, bound);
    let plane = lat.z_shape.plane();
    let mut enc = RangeEncoder::new();
    for (i, v) in lat.z_symbols.iter().enumerate() {
        tables[(i / plane) % lat.z_shape.c].encode(&mut enc, *v);
    }
    let mut out = Vec::new();
    write_varint(&mut out, bound);
    out.extend(enc.finish());
    out
}

fn encode_y(lat: &BottleneckInference<f32>) -> Vec<u8> {
    let bound = bound_for(&lat.y_symbols);
    let mut tables = ScaleTables::new(bound);
    let mut enc = RangeEncoder::new();
    let s = lat.y_hat.shape();
    for anchors in [true, false] {
        for i in pass_indices(s, anchors) {
            tables.get(lat.scale.data()[i]).encode(&mut enc, lat.y_symbols[i]);
        }
    }
    let mut out = Vec::new();
    write_varint(&mut out, bound);
    out.extend(enc.finish());
    out
}

/// Pad, analyse, quantize and entropy-code one `(1, 3, H, W)` image.
pub fn encode_image(model: &TreeCodec<f32>, img: &Tensor<f32>, lambda_index: u8) -> Result<Encoded> {
    let inference = model.infer(img)?;
    let (h, w) = inference.original;
    let mut z_segments = Vec::with_capacity(LATENTS);
    let mut y_segments = Vec::with_capacity(LATENTS);
    for (eb, lat) in model.bottlenecks.iter().zip(&inference.latents) {
        z_segments.push(encode_z(eb, lat));
        y_segments.push(encode_y(lat));
    }
    let mut segments = [(0, 0); LATENTS];
    for k in 0..LATENTS {
        segments[k] = (z_segments[k].len() as u32, y_segments[k].len() as u32);
    }
    let header = Header {
        width: w as u32,
        height: h as u32,
        config_id: config_id(model),
        lambda_index,
        segments,
    };
    let mut bytes = header.to_bytes();
    for seg in z_segments.iter().chain(&y_segments) {
        bytes.extend_from_slice(seg);
    }
    Ok(Encoded {
        bytes,
        header,
        inference,
    })
}

pub struct Decoded {
    pub header: Header,
    pub latents: Vec<BottleneckInference<f32>>,
    /// Reconstruction at the padded size, unclamped.
    pub x_hat: Tensor<f32>,
}

impl Decoded {
    pub fn y_hat(&self) -> LatentSet<f32> {
        LatentSet::full(self.latents.iter().map(|l| l.y_hat.clone()).collect()).expect("four latents")
    }

    /// Cropped to the original size and clamped to `[0, 1]`.
    pub fn image(&self) -> Result<Tensor<f32>> {
        let x = self.x_hat.crop(self.header.height as usize, self.header.width as usize)?;
        Ok(x.map(|v| v.clamp(0.0, 1.0)))
    }
}

fn segment_err(segment: usize, e: Error) -> Error {
    match e {
        Error::CorruptSegment { .. } => e,
        other => Error::CorruptSegment {
            segment,
            reason: other.to_string(),
        },
    }
}

/// Split off the varint bound and check the payload was fully consumed.
fn with_segment<R>(
    segment: usize,
    bytes: &[u8],
    f: impl FnOnce(u32, &mut RangeDecoder<'_>) -> Result<R>,
) -> Result<R> {
    let (bound, used) = read_varint(bytes)?;
    if bound > super::cdf::MAX_BOUND {
        return Err(Error::Bitstream(format!("alphabet bound {bound} too large")));
    }
    let payload = &bytes[used..];
    let mut dec = RangeDecoder::new(payload);
    let r = f(bound, &mut dec).map_err(|e| segment_err(segment, e))?;
    if dec.position() < payload.len() {
        return Err(Error::CorruptSegment {
            segment,
            reason: format!("{} unread bytes", payload.len() - dec.position()),
        });
    }
    Ok(r)
}

/// Decode a stream produced by [`encode_image`] with the same weights.
pub fn decode_image(model: &TreeCodec<f32>, bytes: &[u8]) -> Result<Decoded> {
    let header = Header::parse(bytes)?;
    if header.config_id != config_id(model) {
        return Err(Error::Bitstream(format!(
            "stream was written by model {:#04x}, loaded model is {:#04x}",
            header.config_id,
            config_id(model)
        )));
    }
    let mut segs: Vec<&[u8]> = Vec::with_capacity(2 * LATENTS);
    let mut pos = HEADER_LEN;
    for (k, len) in header.segment_lengths().into_iter().enumerate() {
        if pos + len > bytes.len() {
            return Err(Error::CorruptSegment {
                segment: k,
                reason: format!("needs {len} bytes at offset {pos}, stream has {}", bytes.len()),
            });
        }
        segs.push(&bytes[pos..pos + len]);
        pos += len;
    }
    if pos != bytes.len() {
        return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let cfg = model.config();
    let ph = (header.height as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let pw = (header.width as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let y_shape = Shape::new(1, cfg.latent_channels, ph / 16, pw / 16);
    let z_shape = Shape::new(1, cfg.hyper_channels, ph / 64, pw / 64);
    let mut latents = Vec::with_capacity(LATENTS);
    for (k, eb) in model.bottlenecks.iter().enumerate() {
        let z_symbols = with_segment(k, segs[k], |bound, dec| {
            let tables = prior_tables(eb, bound);
            let plane = z_shape.plane();
            (0..z_shape.numel())
                .map(|i| tables[(i / plane) % z_shape.c].decode(dec))
                .collect::<Result<Vec<i32>>>()
        })?;
        let lat = with_segment(LATENTS + k, segs[LATENTS + k], |bound, dec| {
            let mut tables = ScaleTables::new(bound);
            eb.two_pass(z_shape, z_symbols, y_shape, |_, _, scale| tables.get(scale).decode(dec))
        })?;
        latents.push(lat);
    }
    let set = LatentSet::full(latents.iter().map(|l| l.y_hat.clone()).collect())?;
    let x_hat = model.reconstruct(&set)?;
    Ok(Decoded {
        header,
        latents,
        x_hat,
    })
}
