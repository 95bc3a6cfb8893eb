use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, LATENTS};
use crate::error::{Error, Result};
use crate::nn::{AffBlock, Conv2d, Cost, Module, ResidualUnit, ResidualUpBlock};
use crate::tensor::{Parameter, Real, Tape, Var};

/// Upsample nodes per synthesis layer; each layer also has `n - 1` fusion nodes.
pub const LAYER_WIDTHS: [usize; 3] = [3, 2, 1];

pub struct SynthesisLayer<T: Real> {
    pub ups: Vec<ResidualUpBlock<T>>,
    pub fuse: Vec<AffBlock<T>>,
}

/// Last upsampling to full resolution, one refinement unit and an RGB head.
pub struct FinalNode<T: Real> {
    pub up: ResidualUpBlock<T>,
    pub refine: ResidualUnit<T>,
    pub head: Conv2d<T>,
}

pub struct SynthesisNet<T: Real> {
    pub layers: Vec<SynthesisLayer<T>>,
    pub last: FinalNode<T>,
}

impl<T: Real> SynthesisNet<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let layers = LAYER_WIDTHS
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let cin = if l == 0 { 2 * cfg.latent_channels } else { c };
                SynthesisLayer {
                    ups: (0..n).map(|k| ResidualUpBlock::new(&format!("gs.l{l}.up{k}"), cin, c, rng)).collect(),
                    fuse: (0..n - 1)
                        .map(|k| AffBlock::new(&format!("gs.l{l}.fuse{k}"), c, cfg.aff_reduction, rng))
                        .collect(),
                }
            })
            .collect();
        let last = FinalNode {
            up: ResidualUpBlock::new("gs.final.up", c, c, rng),
            refine: ResidualUnit::new("gs.final.refine", c, rng),
            head: Conv2d::new("gs.final.head", c, 3, 3, 1, rng),
        };
        SynthesisNet { layers, last }
    }

    /// First-layer node `i` reads `concat(y_i, y_{i+1})`; deeper node `k`
    /// reads fusion output `k` of the previous layer, and fusion node `k`
    /// combines upsample outputs `k` and `k+1`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, latents: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if latents.len() != LATENTS {
            return Err(Error::InvalidArgument(format!("expected {LATENTS} latents, got {}", latents.len())));
        }
        let mut inputs: Vec<Var<'t, T>> = (0..LATENTS - 1)
            .map(|i| tape.concat_channels(&[&latents[i], &latents[i + 1]]))
            .collect::<Result<_>>()?;
        for layer in &self.layers {
            let ups: Vec<Var<'t, T>> = layer
                .ups
                .iter()
                .zip(&inputs)
                .map(|(node, x)| node.forward(tape, x))
                .collect::<Result<_>>()?;
            inputs = if layer.fuse.is_empty() {
                ups
            } else {
                layer
                    .fuse
                    .iter()
                    .enumerate()
                    .map(|(k, f)| f.forward(tape, &ups[k], &ups[k + 1]))
                    .collect::<Result<_>>()?
            };
        }
        let h = self.last.up.forward(tape, &inputs[0])?;
        let h = self.last.refine.forward(tape, &h)?;
        self.last.head.forward(tape, &h)
    }

    /// Number of x2 upsamplings on any latent-to-image path.
    pub fn upsamplings_per_path(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn cost(&self, latent_hw: (usize, usize)) -> (Cost, (usize, usize)) {
        let mut total = Cost::default();
        let mut hw = latent_hw;
        for layer in &self.layers {
            let mut out = hw;
            for node in &layer.ups {
                let (c, o) = node.cost(hw);
                total += c;
                out = o;
            }
            for f in &layer.fuse {
                total += f.cost(out).0;
            }
            hw = out;
        }
        let (c, out) = self.last.up.cost(hw);
        total += c;
        total += self.last.refine.cost(out).0;
        total += self.last.head.cost(out).0;
        (total, out)
    }
}

impl<T: Real> Module<T> for SynthesisLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.ups.params();
        v.extend(self.fuse.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.ups.params_mut();
        v.extend(self.fuse.params_mut());
        v
    }
}

impl<T: Real> Module<T> for FinalNode<T> {
    crate::collect_params!(self; up, refine, head);
}

impl<T: Real> Module<T> for SynthesisNet<T> {
    crate::collect_params!(self; layers, last);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;

    #[test]
    fn layer_counts_and_upsamplings() {
        let net = SynthesisNet::<f32>::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let counts: Vec<(usize, usize)> = net.layers.iter().map(|l| (l.ups.len(), l.fuse.len())).collect();
        assert_eq!(counts, vec![(3, 2), (2, 1), (1, 0)]);
        assert_eq!(net.upsamplings_per_path(), 4);
    }

    #[test]
    fn zero_latents_and_zero_weights_give_zero_image() {
        let cfg = ModelConfig {
            channels: 8,
            latent_channels: 8,
            ..ModelConfig::default()
        };
        let mut net = SynthesisNet::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for p in net.params_mut() {
            let s = p.shape();
            p.set_value(Tensor::zeros(s)).unwrap();
        }
        let tape = Tape::inference();
        let ys: Vec<_> = (0..4).map(|_| tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)))).collect();
        let x = net.forward(&tape, &ys).unwrap();
        assert_eq!(x.shape(), Shape::new(1, 3, 64, 64));
        assert!(x.value().data().iter().all(|v| *v == 0.0));
    }
}
