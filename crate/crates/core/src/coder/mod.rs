//! Range coding, CDF tables and the image bitstream.

pub mod bitstream;
pub mod cdf;
pub mod range;

pub use bitstream::{decode_image, encode_image, Decoded, Encoded, Header};
