//! The analysis tree, the synthesis network and the assembled codec.

mod checkpoint;
mod synthesis;
mod tree;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use synthesis::{FinalNode, SynthesisLayer, SynthesisNet, LAYER_WIDTHS};
pub use tree::{AnalysisTree, LEAVES, NODES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{BottleneckInference, EntropyBottleneck};
use crate::error::{Error, Result};
use crate::nn::{Cost, Module};
use crate::tensor::{Parameter, Real, Shape, Tape, Tensor, Var};

/// Number of latents produced by the analysis tree.
pub const LATENTS: usize = 4;

/// Total spatial downsampling of the hyper-latent (16 for the tree, 4 for the hyper path).
pub const PAD_MULTIPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub channels: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub aff_reduction: usize,
    pub context_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            latent_channels: 32,
            hyper_channels: 32,
            aff_reduction: 4,
            context_kernel: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("channels", self.channels),
            ("latent_channels", self.latent_channels),
            ("hyper_channels", self.hyper_channels),
            ("aff_reduction", self.aff_reduction),
            ("context_kernel", self.context_kernel),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(Error::ConfigValue {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.channels % self.aff_reduction != 0 || self.latent_channels % self.aff_reduction != 0 {
            return Err(Error::ConfigValue {
                key: "aff_reduction".into(),
                reason: format!("must divide channels {} and latent_channels {}", self.channels, self.latent_channels),
            });
        }
        if self.context_kernel % 2 == 0 {
            return Err(Error::ConfigValue {
                key: "context_kernel".into(),
                reason: "must be odd".into(),
            });
        }
        Ok(())
    }
}

/// Up to four latents; a missing slot decodes as zeros.
#[derive(Clone, Debug)]
pub struct LatentSet<T: Real> {
    pub slots: [Option<Tensor<T>>; LATENTS],
}

impl<T: Real> LatentSet<T> {
    pub fn full(latents: Vec<Tensor<T>>) -> Result<Self> {
        let slots: [Option<Tensor<T>>; LATENTS] = latents
            .into_iter()
            .map(Some)
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|v: Vec<_>| Error::InvalidArgument(format!("expected {LATENTS} latents, got {}", v.len())))?;
        Ok(LatentSet { slots })
    }

    /// Keep only the slots for which `keep(i)` holds (`i` is zero-based).
    pub fn retain(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut slots = self.slots.clone();
        for (i, s) in slots.iter_mut().enumerate() {
            if !keep(i) {
                *s = None;
            }
        }
        LatentSet { slots }
    }

    pub fn shape(&self) -> Result<Shape> {
        let mut shape = None;
        for t in self.slots.iter().flatten() {
            match shape {
                None => shape = Some(t.shape()),
                Some(s) if s != t.shape() => {
                    return Err(Error::shape("latent_set", format!("{s} vs {}", t.shape())));
                }
                _ => {}
            }
        }
        shape.ok_or_else(|| Error::InvalidArgument("all four latent slots are absent".into()))
    }

    /// Dense slots with zeros for absent latents.
    pub fn materialise(&self) -> Result<Vec<Tensor<T>>> {
        let s = self.shape()?;
        Ok(self
            .slots
            .iter()
            .map(|t| t.clone().unwrap_or_else(|| Tensor::zeros(s)))
            .collect())
    }
}

/// Replicate-pad the right and bottom edges up to a multiple of `multiple`.
pub fn pad_to_multiple<T: Real>(img: &Tensor<T>, multiple: usize) -> (Tensor<T>, (usize, usize)) {
    let s = img.shape();
    let h = s.h.div_ceil(multiple) * multiple;
    let w = s.w.div_ceil(multiple) * multiple;
    if (h, w) == (s.h, s.w) {
        return (img.clone(), (s.h, s.w));
    }
    let padded = Tensor::from_fn(Shape { h, w, ..s }, |n, c, y, x| img.at(n, c, y.min(s.h - 1), x.min(s.w - 1)));
    (padded, (s.h, s.w))
}

/// Per-module costs at a reference resolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelCost {
    pub analysis: Cost,
    pub synthesis: Cost,
    pub hyper_analysis: Cost,
    pub hyper_synthesis: Cost,
    pub params_net: Cost,
    pub context: Cost,
}

/// Outputs of a noise-quantized training pass.
pub struct TrainForward<'t, T: Real> {
    pub x_hat: Var<'t, T>,
    pub y_likelihoods: Vec<Var<'t, T>>,
    pub z_likelihoods: Vec<Var<'t, T>>,
}

/// Outputs of a deterministic inference pass on a padded image.
#[derive(Clone, Debug)]
pub struct CodecInference<T: Real> {
    pub original: (usize, usize),
    pub latents: Vec<BottleneckInference<T>>,
    /// Reconstruction at the padded size, unclamped.
    pub x_hat: Tensor<T>,
}

impl<T: Real> CodecInference<T> {
    pub fn y_hat(&self) -> LatentSet<T> {
        LatentSet::full(self.latents.iter().map(|l| l.y_hat.clone()).collect()).expect("four latents")
    }

    pub fn rate_bits(&self) -> f64 {
        self.latents.iter().map(|l| l.y_bits() + l.z_bits()).sum()
    }

    /// Clamped and cropped to the original size.
    pub fn image(&self) -> Result<Tensor<T>> {
        let (h, w) = self.original;
        Ok(self.x_hat.crop(h, w)?.map(|v| v.max(T::zero()).min(T::one())))
    }
}

/// Tree analysis transform, four entropy bottlenecks and the synthesis network.
pub struct TreeCodec<T: Real> {
    config: ModelConfig,
    pub analysis: AnalysisTree<T>,
    pub synthesis: SynthesisNet<T>,
    pub bottlenecks: Vec<EntropyBottleneck<T>>,
}

impl<T: Real> TreeCodec<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let analysis = AnalysisTree::new(&config, &mut rng);
        let synthesis = SynthesisNet::new(&config, &mut rng);
        let bottlenecks = (0..LATENTS)
            .map(|i| {
                EntropyBottleneck::new(
                    &format!("eb{i}"),
                    config.latent_channels,
                    config.hyper_channels,
                    config.context_kernel,
                    &mut rng,
                )
            })
            .collect();
        Ok(TreeCodec {
            config,
            analysis,
            synthesis,
            bottlenecks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != 3 {
            return Err(Error::shape("analysis", format!("expected 3 channels, got {s}")));
        }
        if s.h % PAD_MULTIPLE != 0 || s.w % PAD_MULTIPLE != 0 {
            return Err(Error::shape(
                "analysis",
                format!("{s} is not a multiple of {PAD_MULTIPLE}; pad the image first"),
            ));
        }
        Ok(())
    }

    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward<'t, T>> {
        self.check_input(x.shape())?;
        let ys = self.analysis.forward(tape, x)?;
        let mut y_hats = Vec::with_capacity(LATENTS);
        let mut y_likelihoods = Vec::with_capacity(LATENTS);
        let mut z_likelihoods = Vec::with_capacity(LATENTS);
        for (eb, y) in self.bottlenecks.iter().zip(&ys) {
            let out = eb.forward_train(tape, y, rng)?;
            y_hats.push(out.y_hat);
            y_likelihoods.push(out.y_likelihood);
            z_likelihoods.push(out.z_likelihood);
        }
        let x_hat = self.synthesis.forward(tape, &y_hats)?;
        Ok(TrainForward {
            x_hat,
            y_likelihoods,
            z_likelihoods,
        })
    }

    /// Analysis transform on a padded image.
    pub fn analyse(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x.shape())?;
        let tape = Tape::inference();
        let ys = self.analysis.forward(&tape, &tape.constant(x.clone()))?;
        Ok(ys.into_iter().map(Var::into_tensor).collect())
    }

    /// Synthesis from (possibly partial) latents.
    pub fn reconstruct(&self, latents: &LatentSet<T>) -> Result<Tensor<T>> {
        let dense = latents.materialise()?;
        let tape = Tape::inference();
        let vars: Vec<Var<'_, T>> = dense.into_iter().map(|t| tape.constant(t)).collect();
        Ok(self.synthesis.forward(&tape, &vars)?.into_tensor())
    }

    /// Pad, analyse, quantize each latent as the coder would, and reconstruct.
    pub fn infer(&self, img: &Tensor<T>) -> Result<CodecInference<T>> {
        if img.shape().n != 1 {
            return Err(Error::shape("infer", format!("one image at a time, got {}", img.shape())));
        }
        let (padded, original) = pad_to_multiple(img, PAD_MULTIPLE);
        let ys = self.analyse(&padded)?;
        let latents = self
            .bottlenecks
            .iter()
            .zip(&ys)
            .map(|(eb, y)| eb.infer(y))
            .collect::<Result<Vec<_>>>()?;
        let set = LatentSet::full(latents.iter().map(|l| l.y_hat.clone()).collect())?;
        let x_hat = self.reconstruct(&set)?;
        Ok(CodecInference {
            original,
            latents,
            x_hat,
        })
    }

    pub fn cost(&self, (h, w): (usize, usize)) -> ModelCost {
        let (analysis, latent_hw) = self.analysis.cost((h, w));
        let synthesis = self.synthesis.cost(latent_hw).0;
        let mut out = ModelCost {
            analysis,
            synthesis,
            ..ModelCost::default()
        };
        for eb in &self.bottlenecks {
            let c = eb.cost(latent_hw);
            out.hyper_analysis += c.hyper_analysis;
            out.hyper_synthesis += c.hyper_synthesis;
            out.params_net += c.params_net;
            out.context += c.context;
        }
        out
    }

    /// Stable 64-bit FNV-1a digest of configuration and weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for v in [
            self.config.channels,
            self.config.latent_channels,
            self.config.hyper_channels,
            self.config.aff_reduction,
            self.config.context_kernel,
        ] {
            h.write(&(v as u32).to_le_bytes());
        }
        for p in self.params() {
            h.write(p.name().as_bytes());
            for v in p.value().data() {
                h.write(&(v.f64() as f32).to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name().to_string()).collect()
    }
}

impl<T: Real> Module<T> for TreeCodec<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.analysis.params();
        v.extend(self.synthesis.params());
        v.extend(self.bottlenecks.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.analysis.params_mut();
        v.extend(self.synthesis.params_mut());
        v.extend(self.bottlenecks.params_mut());
        v
    }
}

/// 64-bit FNV-1a.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_rounds_up_and_crops_back() {
        let img = Tensor::<f32>::from_fn(Shape::new(1, 3, 100, 130), |_, c, y, x| (c * 7 + y * 3 + x) as f32);
        let (p, dims) = pad_to_multiple(&img, 64);
        assert_eq!((p.shape().h, p.shape().w), (128, 192));
        assert_eq!(dims, (100, 130));
        assert_eq!(p.crop(100, 130).unwrap(), img);
        assert_eq!(p.at(0, 1, 127, 191), img.at(0, 1, 99, 129));
        let square = Tensor::<f32>::zeros(Shape::new(1, 3, 256, 256));
        assert_eq!(pad_to_multiple(&square, 64).0.shape(), square.shape());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            aff_reduction: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = TreeCodec::<f32>::new(ModelConfig::default(), 0).unwrap();
        let mut names = m.param_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn end_to_end_shapes() {
        let cfg = ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 8,
            ..ModelConfig::default()
        };
        let m = TreeCodec::<f32>::new(cfg, 1).unwrap();
        for (h, w) in [(64, 64), (64, 128)] {
            let x = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| ((c + y * x) % 17) as f32 / 17.0);
            let ys = m.analyse(&x).unwrap();
            assert_eq!(ys.len(), 4);
            assert!(ys.iter().all(|y| y.shape() == Shape::new(1, 8, h / 16, w / 16)));
            let out = m.infer(&x).unwrap();
            assert_eq!(out.x_hat.shape(), x.shape());
        }
    }

    #[test]
    fn all_absent_latents_is_an_error() {
        let set = LatentSet::<f32> {
            slots: [None, None, None, None],
        };
        assert!(set.materialise().is_err());
    }
}
