use std::sync::OnceLock;

use proptest::prelude::*;

use treecodec::coder::cdf::{read_varint, write_varint, CdfTable, PRECISION};
use treecodec::coder::range::{RangeDecoder, RangeEncoder};
use treecodec::coder::{decode_image, encode_image, Header};
use treecodec::config::KeyValues;
use treecodec::eval::bd::{bd_rate, Metric, RdCurve, RdPoint};
use treecodec::interp::Bitmap;
use treecodec::model::{ModelConfig, TreeCodec};
use treecodec::tensor::{Shape, Tensor};
use treecodec::train::TrainConfig;
use treecodec::{synth, Error};

fn table_and_values() -> impl Strategy<Value = (u32, Vec<f64>, Vec<i32>)> {
    (1u32..24).prop_flat_map(|bound| {
        let n = 2 * bound as usize + 1;
        (
            Just(bound),
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(prop_oneof![9 => -(bound as i32)..=bound as i32, 1 => -5000i32..5000], 0..400),
        )
    })
}

proptest! {
    #[test]
    fn range_coder_round_trips((bound, weights, values) in table_and_values()) {
        let sum: f64 = weights.iter().sum::<f64>() + 1e-3;
        let probs: Vec<f64> = weights.iter().map(|w| 0.98 * w / sum).collect();
        let table = CdfTable::from_probabilities(bound, &probs);
        let mut enc = RangeEncoder::new();
        for &v in &values {
            table.encode(&mut enc, v);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &values {
            prop_assert_eq!(table.decode(&mut dec).unwrap(), v);
        }
    }

    #[test]
    fn cdf_tables_are_complete(bound in 1u32..64, scale in 0.11f64..40.0) {
        let table = CdfTable::gaussian(bound, scale);
        let cum = table.cumulative();
        prop_assert_eq!(cum[0], 0);
        prop_assert_eq!(*cum.last().unwrap(), 1 << PRECISION);
        prop_assert!(cum.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(table.frequency(bound as i32 + 1) >= 1);
    }

    #[test]
    fn varints_round_trip(v in any::<u32>()) {
        let mut buf = Vec::new();
        write_varint(&mut buf, v);
        prop_assert_eq!(read_varint(&buf).unwrap(), (v, buf.len()));
    }

    #[test]
    fn headers_round_trip(w in 1u32.., h in 1u32.., config_id in any::<u8>(), lambda_index in any::<u8>(), seg in any::<[(u32, u32); 4]>()) {
        let header = Header { width: w, height: h, config_id, lambda_index, segments: seg };
        prop_assert_eq!(Header::parse(&header.to_bytes()).unwrap(), header);
    }

    #[test]
    fn bd_rate_of_a_rate_scaled_curve_is_the_scale(k in 0.3f64..3.0, steps in prop::collection::vec((1.3f64..2.5, 0.5f64..4.0), 4)) {
        let (mut b, mut q) = (0.1, 28.0);
        let mut pts = Vec::new();
        for (rb, dq) in steps {
            pts.push(RdPoint { bpp: b, psnr: q, msssim: 1.0 - 1.0 / q });
            b *= rb;
            q += dq;
        }
        let base = RdCurve::new("a", pts.clone()).unwrap();
        let test = RdCurve::new("b", pts.iter().map(|p| RdPoint { bpp: p.bpp * k, ..*p }).collect()).unwrap();
        let r = bd_rate(&base, &test, Metric::Psnr).unwrap();
        prop_assert!((r.percent - (k - 1.0) * 100.0).abs() < 1e-6, "{} vs {}", r.percent, (k - 1.0) * 100.0);
    }

    #[test]
    fn bitmap_bits_equal_likelihood_bits(c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lik = Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| rng.gen_range(1e-9f64..1.0));
        let bits: f64 = lik.data().iter().map(|p| -p.log2()).sum();
        let map = Bitmap::from_likelihood(&lik);
        prop_assert!((map.total_bits() - bits).abs() <= 1e-9 * bits.max(1.0));
    }

    #[test]
    fn train_config_text_round_trips(pair in 0usize..4, batch in 1usize..64, crop in 1usize..8, seed in any::<u32>(), steps in 0u64..10_000) {
        let mut cfg = TrainConfig::for_pair(pair);
        cfg.batch = batch;
        cfg.crop = crop * 64;
        cfg.seed = seed as u64;
        cfg.max_steps = (steps > 0).then_some(steps);
        let mut kv = KeyValues::parse(&cfg.to_text()).unwrap();
        let mut back = TrainConfig::for_pair(0);
        back.apply(&mut kv).unwrap();
        kv.finish().unwrap();
        prop_assert_eq!(back, cfg);
    }
}

struct Fixture {
    model: TreeCodec<f32>,
    bytes: Vec<u8>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 8,
            aff_reduction: 2,
            context_kernel: 5,
        };
        let model = TreeCodec::new(cfg, 3).unwrap();
        let bytes = encode_image(&model, &synth::generate(3, 70, 90), 0).unwrap().bytes;
        Fixture { model, bytes }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn damaged_bitstreams_fail_cleanly(cut in 0usize..10_000, flips in prop::collection::vec((any::<prop::sample::Index>(), 1u8..=255), 0..4)) {
        let f = fixture();
        let mut bytes = f.bytes.clone();
        for (at, mask) in flips {
            let i = at.index(bytes.len());
            bytes[i] ^= mask;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        // Any outcome but a panic is acceptable; truncation must be an error.
        let result = decode_image(&f.model, &bytes);
        if bytes.len() < f.bytes.len() {
            prop_assert!(result.is_err());
        }
    }
}

#[test]
fn truncation_names_the_segment() {
    let f = fixture();
    let header = Header::parse(&f.bytes).unwrap();
    let last = header.segment_lengths().iter().rposition(|&n| n > 0).unwrap();
    match decode_image(&f.model, &f.bytes[..f.bytes.len() - 1]) {
        Err(Error::CorruptSegment { segment, .. }) => assert_eq!(segment, last),
        other => panic!("expected a corrupt segment, got {:?}", other.map(|_| ())),
    }
}
