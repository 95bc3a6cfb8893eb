use rand_chacha::ChaCha8Rng;

use super::factorized::{FactorizedPrior, PriorEvaluator};
use super::gaussian::{gaussian_bin_probability, gaussian_likelihood, SCALE_FLOOR};
use super::{anchor_mask, context_kernel_mask, is_anchor, keep_anchors, non_anchor_mask, quantize, QuantMode};
use super::{round_half_even, LIKELIHOOD_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Cost, Module};
use crate::tensor::{Parameter, Real, Shape, Tape, Tensor, Var};

/// Hyper analysis/synthesis, checkerboard context and entropy-parameter
/// network for one latent.
pub struct EntropyBottleneck<T: Real> {
    pub hyper_analysis: Vec<Conv2d<T>>,
    pub hyper_synthesis: Vec<Conv2d<T>>,
    pub context: Conv2d<T>,
    pub params_net: Vec<Conv2d<T>>,
    pub prior: FactorizedPrior<T>,
    latent: usize,
    context_mask: Tensor<T>,
}

/// Training-mode outputs (noise quantization).
pub struct BottleneckTrain<'t, T: Real> {
    pub y_hat: Var<'t, T>,
    pub y_likelihood: Var<'t, T>,
    pub z_likelihood: Var<'t, T>,
}

/// Inference-mode outputs; exactly what the entropy coder transmits.
#[derive(Clone, Debug)]
pub struct BottleneckInference<T: Real> {
    pub z_symbols: Vec<i32>,
    pub z_shape: Shape,
    /// Integer residuals `round(y - mean)`.
    pub y_symbols: Vec<i32>,
    pub y_hat: Tensor<T>,
    pub mean: Tensor<T>,
    pub scale: Tensor<T>,
    pub y_likelihood: Tensor<T>,
    pub z_likelihood: Tensor<T>,
}

impl<T: Real> BottleneckInference<T> {
    pub fn y_bits(&self) -> f64 {
        bits(&self.y_likelihood)
    }

    pub fn z_bits(&self) -> f64 {
        bits(&self.z_likelihood)
    }
}

pub(crate) fn bits<T: Real>(likelihood: &Tensor<T>) -> f64 {
    likelihood.data().iter().map(|p| -p.f64().log2()).sum()
}

/// Per-part costs of one bottleneck at a given latent resolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct BottleneckCost {
    pub hyper_analysis: Cost,
    pub hyper_synthesis: Cost,
    pub params_net: Cost,
    pub context: Cost,
}

impl<T: Real> EntropyBottleneck<T> {
    pub fn new(name: &str, latent: usize, hyper: usize, context_kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = latent;
        let ha = [(m, hyper, 1), (hyper, hyper, 1), (hyper, hyper, 2), (hyper, hyper, 1), (hyper, hyper, 2)];
        let hyper_analysis = ha
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| Conv2d::new(&format!("{name}.ha{i}"), a, b, 3, s, rng))
            .collect();
        let hs = [(hyper, 2 * m), (2 * m, 3 * m), (3 * m, 3 * m), (3 * m, 2 * m), (2 * m, 2 * m)];
        let hyper_synthesis = hs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(&format!("{name}.hs{i}"), a, b, 3, 1, rng))
            .collect();
        let context = Conv2d::new(&format!("{name}.context"), m, 2 * m, context_kernel, 1, rng);
        let wide = 4 * m;
        let ep = [(wide, wide * 10 / 12), (wide * 10 / 12, wide * 8 / 12), (wide * 8 / 12, 2 * m)];
        let params_net = ep
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(&format!("{name}.ep{i}"), a, b, 1, 1, rng))
            .collect();
        let prior = FactorizedPrior::new(&format!("{name}.prior"), hyper, rng);
        EntropyBottleneck {
            hyper_analysis,
            hyper_synthesis,
            context,
            params_net,
            prior,
            latent,
            context_mask: context_kernel_mask(2 * m, m, context_kernel),
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent
    }

    pub fn hyper_channels(&self) -> usize {
        self.prior.channels()
    }

    pub fn prior_evaluator(&self) -> PriorEvaluator {
        self.prior.evaluator()
    }

    pub fn analyse<'t>(&self, tape: &'t Tape<T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = y.shape();
        if s.h % 4 != 0 || s.w % 4 != 0 || s.c != self.latent {
            return Err(Error::shape("hyper_analysis", format!("latent {s}")));
        }
        let mut h = y.clone();
        let last = self.hyper_analysis.len() - 1;
        for (i, conv) in self.hyper_analysis.iter().enumerate() {
            h = conv.forward(tape, &h)?;
            if i < last {
                h = h.leaky_relu()?;
            }
        }
        Ok(h)
    }

    /// Hyper-latent to `2 * latent` features at latent resolution.
    pub fn synthesise<'t>(&self, tape: &'t Tape<T>, z_hat: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = z_hat.clone();
        let last = self.hyper_synthesis.len() - 1;
        for (i, conv) in self.hyper_synthesis.iter().enumerate() {
            if i == 1 || i == 3 {
                h = h.upsample2x()?;
            }
            h = conv.forward(tape, &h)?;
            if i < last {
                h = h.leaky_relu()?;
            }
        }
        Ok(h)
    }

    /// Context features from a latent whose non-anchor positions are zero.
    pub fn context_features<'t>(&self, tape: &'t Tape<T>, y_anchors: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.context.forward_masked(tape, y_anchors, &self.context_mask)
    }

    /// `(mean, scale)` from hyper features and context features.
    pub fn entropy_params<'t>(
        &self,
        tape: &'t Tape<T>,
        hyper: &Var<'t, T>,
        context: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut h = tape.concat_channels(&[hyper, context])?;
        let last = self.params_net.len() - 1;
        for (i, conv) in self.params_net.iter().enumerate() {
            h = conv.forward(tape, &h)?;
            if i < last {
                h = h.leaky_relu()?;
            }
        }
        let mean = h.narrow_channels(0, self.latent)?;
        let scale = h.narrow_channels(self.latent, self.latent)?.softplus()?.lower_bound(SCALE_FLOOR)?;
        Ok((mean, scale))
    }

    /// Parameters for the anchor pass: the context input is all zeros.
    pub fn anchor_params<'t>(&self, tape: &'t Tape<T>, hyper: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let zeros = tape.constant(Tensor::zeros(hyper.shape().with_channels(2 * self.latent)));
        self.entropy_params(tape, hyper, &zeros)
    }

    pub fn non_anchor_params<'t>(
        &self,
        tape: &'t Tape<T>,
        hyper: &Var<'t, T>,
        y_anchors: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let ctx = self.context_features(tape, &tape.constant(y_anchors.clone()))?;
        self.entropy_params(tape, hyper, &ctx)
    }

    /// Noise-quantized forward pass for the rate term of the loss.
    ///
    /// A single parameter evaluation suffices here: masking the context
    /// output at anchors makes the pointwise parameter net see exactly the
    /// anchor-pass input there.
    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape<T>,
        y: &Var<'t, T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<BottleneckTrain<'t, T>> {
        let s = y.shape();
        let z = self.analyse(tape, y)?;
        let z_hat = quantize(&z, QuantMode::Noise, None, rng)?;
        let z_likelihood = self.prior.likelihood(&z_hat)?.lower_bound(LIKELIHOOD_FLOOR)?;
        let hyper = self.synthesise(tape, &z_hat)?;
        let y_hat = quantize(y, QuantMode::Noise, None, rng)?;
        let amask = tape.constant(anchor_mask(s.h, s.w));
        let nmask = tape.constant(non_anchor_mask(s.h, s.w));
        let ctx = self.context_features(tape, &y_hat.mul(&amask)?)?.mul(&nmask)?;
        let (mean, scale) = self.entropy_params(tape, &hyper, &ctx)?;
        let y_likelihood = gaussian_likelihood(&y_hat, &mean, &scale)?.lower_bound(LIKELIHOOD_FLOOR)?;
        Ok(BottleneckTrain {
            y_hat,
            y_likelihood,
            z_likelihood,
        })
    }

    /// Deterministic two-pass quantization of `y`, as the coder sees it.
    pub fn infer(&self, y: &Tensor<T>) -> Result<BottleneckInference<T>> {
        let tape = Tape::inference();
        let z = self.analyse(&tape, &tape.constant(y.clone()))?;
        let z_symbols: Vec<i32> = z.value().data().iter().map(|v| round_half_even(v.f64()) as i32).collect();
        self.two_pass(z.shape(), z_symbols, y.shape(), |i, mean, _| {
            Ok(round_half_even((y.data()[i] - mean).f64()) as i32)
        })
    }

    /// Rebuild `y_hat` from hyper-latent symbols and a source of residual
    /// symbols. `symbol(index, mean, scale)` is called for every anchor in
    /// raster order, then for every non-anchor; the encoder rounds `y`
    /// there and the decoder reads the bitstream.
    pub fn two_pass(
        &self,
        z_shape: Shape,
        z_symbols: Vec<i32>,
        y_shape: Shape,
        mut symbol: impl FnMut(usize, T, T) -> Result<i32>,
    ) -> Result<BottleneckInference<T>> {
        if z_shape.numel() != z_symbols.len() || y_shape.c != self.latent {
            return Err(Error::shape("two_pass", format!("z {z_shape}, y {y_shape}")));
        }
        let tape = Tape::inference();
        let z_hat = symbols_to_tensor(z_shape, &z_symbols);
        let hyper = self.synthesise(&tape, &tape.constant(z_hat))?;
        if hyper.shape().with_channels(y_shape.c) != y_shape {
            return Err(Error::shape("two_pass", format!("hyper {} vs y {y_shape}", hyper.shape())));
        }
        let mut y_symbols = vec![0i32; y_shape.numel()];
        let mut y_hat = Tensor::zeros(y_shape);
        let (mean_a, scale_a) = self.anchor_params(&tape, &hyper)?;
        fill_pass(mean_a.value(), scale_a.value(), true, &mut symbol, &mut y_symbols, &mut y_hat)?;
        let (mean_n, scale_n) = self.non_anchor_params(&tape, &hyper, &keep_anchors(&y_hat))?;
        fill_pass(mean_n.value(), scale_n.value(), false, &mut symbol, &mut y_symbols, &mut y_hat)?;

        let mean = merge_checkerboard(mean_a.value(), mean_n.value());
        let scale = merge_checkerboard(scale_a.value(), scale_n.value());
        let y_likelihood = residual_likelihood(&y_symbols, &scale);
        let z_likelihood = self.z_likelihood(z_shape, &z_symbols);
        Ok(BottleneckInference {
            z_symbols,
            z_shape,
            y_symbols,
            y_hat,
            mean,
            scale,
            y_likelihood,
            z_likelihood,
        })
    }

    pub fn z_likelihood(&self, shape: Shape, symbols: &[i32]) -> Tensor<T> {
        let ev = self.prior.evaluator();
        let plane = shape.plane();
        let data = symbols
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / plane) % shape.c;
                T::of(ev.probability(c, *v as f64).max(LIKELIHOOD_FLOOR))
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    pub fn cost(&self, (h, w): (usize, usize)) -> BottleneckCost {
        let mut out = BottleneckCost::default();
        let mut hw = (h, w);
        for conv in &self.hyper_analysis {
            let (c, next) = conv.cost(hw);
            out.hyper_analysis += c;
            hw = next;
        }
        for (i, conv) in self.hyper_synthesis.iter().enumerate() {
            if i == 1 || i == 3 {
                hw = (hw.0 * 2, hw.1 * 2);
            }
            out.hyper_synthesis += conv.cost(hw).0;
        }
        out.context = self.context.cost((h, w)).0;
        for conv in &self.params_net {
            out.params_net += conv.cost((h, w)).0;
        }
        // The factorized prior has no convolutions but does carry parameters.
        out.hyper_synthesis.params += self.prior.num_params() as u64;
        out
    }
}

pub(crate) fn symbols_to_tensor<T: Real>(shape: Shape, symbols: &[i32]) -> Tensor<T> {
    Tensor::from_vec(shape, symbols.iter().map(|v| T::of(*v as f64)).collect()).expect("shape")
}

/// Indices of one checkerboard parity class in raster order.
pub fn pass_indices(shape: Shape, anchors: bool) -> impl Iterator<Item = usize> {
    (0..shape.n * shape.c).flat_map(move |nc| {
        (0..shape.h).flat_map(move |r| {
            (0..shape.w)
                .filter(move |col| is_anchor(r, *col) == anchors)
                .map(move |col| (nc * shape.h + r) * shape.w + col)
        })
    })
}

fn fill_pass<T: Real>(
    mean: &Tensor<T>,
    scale: &Tensor<T>,
    anchors: bool,
    symbol: &mut impl FnMut(usize, T, T) -> Result<i32>,
    symbols: &mut [i32],
    y_hat: &mut Tensor<T>,
) -> Result<()> {
    for i in pass_indices(mean.shape(), anchors) {
        let mu = mean.data()[i];
        let q = symbol(i, mu, scale.data()[i])?;
        symbols[i] = q;
        y_hat.data_mut()[i] = T::of(q as f64) + mu;
    }
    Ok(())
}

/// Anchors from `a`, non-anchors from `b`.
pub(crate) fn merge_checkerboard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |n, c, r, col| if is_anchor(r, col) { a.at(n, c, r, col) } else { b.at(n, c, r, col) })
}

pub(crate) fn residual_likelihood<T: Real>(symbols: &[i32], scale: &Tensor<T>) -> Tensor<T> {
    let data = symbols
        .iter()
        .zip(scale.data())
        .map(|(q, s)| T::of(gaussian_bin_probability(*q as f64, 0.0, s.f64()).max(LIKELIHOOD_FLOOR)))
        .collect();
    Tensor::from_vec(scale.shape(), data).expect("shape")
}

impl<T: Real> Module<T> for EntropyBottleneck<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.hyper_analysis.params();
        v.extend(self.hyper_synthesis.params());
        v.extend(self.context.params());
        v.extend(self.params_net.params());
        v.extend(self.prior.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.hyper_analysis.params_mut();
        v.extend(self.hyper_synthesis.params_mut());
        v.extend(self.context.params_mut());
        v.extend(self.params_net.params_mut());
        v.extend(self.prior.params_mut());
        v
    }
}
