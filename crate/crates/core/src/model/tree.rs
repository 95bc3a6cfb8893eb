use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, LATENTS};
use crate::error::Result;
use crate::nn::{AffBlock, Cost, Module, ResidualDownBlock};
use crate::tensor::{Parameter, Real, Tape, Var};

/// Nodes of the perfect binary tree of height 3.
pub const NODES: usize = 15;
pub const LEAVES: usize = 8;
const FIRST_LEAF: usize = NODES - LEAVES;

/// Analysis transform: residual downsample nodes stored in heap order
/// (children of node `i` are `2i+1` and `2i+2`); each pair of sibling leaves
/// is fused into one latent.
pub struct AnalysisTree<T: Real> {
    pub nodes: Vec<ResidualDownBlock<T>>,
    pub fuse: Vec<AffBlock<T>>,
}

impl<T: Real> AnalysisTree<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let nodes = (0..NODES)
            .map(|i| {
                let cin = if i == 0 { 3 } else { cfg.channels };
                let cout = if i >= FIRST_LEAF { cfg.latent_channels } else { cfg.channels };
                ResidualDownBlock::new(&format!("ga.node{i}"), cin, cout, rng)
            })
            .collect();
        let fuse = (0..LATENTS)
            .map(|i| AffBlock::new(&format!("ga.fuse{i}"), cfg.latent_channels, cfg.aff_reduction, rng))
            .collect();
        AnalysisTree { nodes, fuse }
    }

    pub fn children(i: usize) -> Option<(usize, usize)> {
        (i < FIRST_LEAF).then_some((2 * i + 1, 2 * i + 2))
    }

    pub fn is_leaf(i: usize) -> bool {
        (FIRST_LEAF..NODES).contains(&i)
    }

    /// Depth of node `i`, root at 0.
    pub fn depth(i: usize) -> usize {
        (usize::BITS - 1 - (i + 1).leading_zeros()) as usize
    }

    /// Leaf node indices, left to right.
    pub fn leaves() -> std::ops::Range<usize> {
        FIRST_LEAF..NODES
    }

    /// Both children of a node read its output unchanged.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut outs: Vec<Option<Var<'t, T>>> = vec![None; NODES];
        outs[0] = Some(self.nodes[0].forward(tape, x)?);
        for i in 1..NODES {
            let parent = outs[(i - 1) / 2].as_ref().expect("parents precede children in heap order");
            outs[i] = Some(self.nodes[i].forward(tape, parent)?);
        }
        (0..LATENTS)
            .map(|k| {
                let a = outs[FIRST_LEAF + 2 * k].as_ref().expect("leaf");
                let b = outs[FIRST_LEAF + 2 * k + 1].as_ref().expect("leaf");
                self.fuse[k].forward(tape, a, b)
            })
            .collect()
    }

    /// Cost and latent resolution for an `(h, w)` input.
    pub fn cost(&self, hw: (usize, usize)) -> (Cost, (usize, usize)) {
        let mut total = Cost::default();
        let mut res = vec![(0, 0); NODES];
        for i in 0..NODES {
            let input = if i == 0 { hw } else { res[(i - 1) / 2] };
            let (c, out) = self.nodes[i].cost(input);
            total += c;
            res[i] = out;
        }
        let latent = res[FIRST_LEAF];
        for f in &self.fuse {
            total += f.cost(latent).0;
        }
        (total, latent)
    }
}

impl<T: Real> Module<T> for AnalysisTree<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.nodes.params();
        v.extend(self.fuse.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.nodes.params_mut();
        v.extend(self.fuse.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn heap_structure() {
        assert_eq!(AnalysisTree::<f32>::children(0), Some((1, 2)));
        assert_eq!(AnalysisTree::<f32>::children(6), Some((13, 14)));
        assert_eq!(AnalysisTree::<f32>::children(7), None);
        assert_eq!(AnalysisTree::<f32>::leaves().count(), LEAVES);
        assert_eq!((0..NODES).map(AnalysisTree::<f32>::depth).max(), Some(3));
        assert!(AnalysisTree::<f32>::leaves().all(|i| AnalysisTree::<f32>::depth(i) == 3));
    }

    #[test]
    fn perturbing_one_leaf_changes_one_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = AnalysisTree::<f32>::new(&small(), &mut rng);
        let x = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, _, _, _| rng.gen_range(0.0..1.0));
        let tape = Tape::inference();
        let before = tree.forward(&tape, &tape.constant(x.clone())).unwrap();
        let w = tree.nodes[FIRST_LEAF].conv2.weight.value_mut();
        w.data_mut()[0] += 0.5;
        let after = tree.forward(&tape, &tape.constant(x)).unwrap();
        assert_ne!(before[0].value(), after[0].value());
        for k in 1..LATENTS {
            assert_eq!(before[k].value(), after[k].value());
        }
    }
}
