//! Convolution layers and the three reusable blocks of the codec: residual
//! downsample, residual upsample and attentional feature fusion.

use std::ops::{Add, AddAssign};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Shape, Tape, Tensor, Var};

/// Exact multiply-accumulate and parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            params: self.params + o.params,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

impl Cost {
    /// Thousands of MACs per pixel of an `h x w` input image.
    pub fn kmacs_per_pixel(&self, h: usize, w: usize) -> f64 {
        self.macs as f64 / (h * w) as f64 / 1000.0
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Concatenate child parameter lists.
#[macro_export]
macro_rules! collect_params {
    ($self:ident; $($field:ident),* $(,)?) => {
        fn params(&self) -> Vec<&$crate::tensor::Parameter<T>> {
            let mut v = Vec::new();
            $( v.extend($crate::nn::Module::params(&self.$field)); )*
            v
        }
        fn params_mut(&mut self) -> Vec<&mut $crate::tensor::Parameter<T>> {
            let mut v = Vec::new();
            $( v.extend($crate::nn::Module::params_mut(&mut self.$field)); )*
            v
        }
    };
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.iter().flat_map(|m| m.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}

pub struct Conv2d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// Uniform fan-in initialisation, bound `1/sqrt(cin*k*k)` for weights and bias.
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let ws = Shape::new(cout, cin, k, k);
        let weight = Tensor::from_fn(ws, |_, _, _, _| T::of(rng.gen_range(-bound..bound)));
        let bias = Tensor::from_fn(Shape::new(1, cout, 1, 1), |_, _, _, _| T::of(rng.gen_range(-bound..bound)));
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            stride,
            pad: k / 2,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.shape().c
    }

    pub fn cout(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(&tape.param(&self.weight), Some(&tape.param(&self.bias)), self.stride, self.pad)
    }

    /// Convolution with an elementwise constant mask applied to the kernel.
    pub fn forward_masked<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
        let w = tape.param(&self.weight).mul(&tape.constant(mask.clone()))?;
        x.conv2d(&w, Some(&tape.param(&self.bias)), self.stride, self.pad)
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn cost(&self, input: (usize, usize)) -> (Cost, (usize, usize)) {
        let out = self.output_hw(input);
        let k = self.kernel();
        let macs = (k * k * self.cin() * self.cout() * out.0 * out.1) as u64;
        (
            Cost {
                macs,
                params: (self.weight.numel() + self.bias.numel()) as u64,
            },
            out,
        )
    }

    pub fn zero_(&mut self) {
        for p in [&mut self.weight, &mut self.bias] {
            let s = p.shape();
            p.set_value(Tensor::zeros(s)).expect("same shape");
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 3x3 stride-2 conv, activation, 3x3 conv, plus a 1x1 stride-2 projection skip.
pub struct ResidualDownBlock<T: Real> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub skip: Conv2d<T>,
}

impl<T: Real> ResidualDownBlock<T> {
    pub fn new(name: &str, cin: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualDownBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, c, 3, 2, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, rng),
            skip: Conv2d::new(&format!("{name}.skip"), cin, c, 1, 2, rng),
        }
    }

    pub fn main_path<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(tape, x)?.leaky_relu()?;
        self.conv2.forward(tape, &h)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape("res_down", format!("odd spatial size {s}; pad the image first")));
        }
        self.main_path(tape, x)?.add(&self.skip.forward(tape, x)?)
    }

    pub fn cost(&self, input: (usize, usize)) -> (Cost, (usize, usize)) {
        let (c1, out) = self.conv1.cost(input);
        let (c2, _) = self.conv2.cost(out);
        let (cs, _) = self.skip.cost(input);
        (c1 + c2 + cs, out)
    }
}

impl<T: Real> Module<T> for ResidualDownBlock<T> {
    collect_params!(self; conv1, conv2, skip);
}

/// Nearest 2x upsample shared by a 3x3/3x3 main path and a 1x1 skip.
pub struct ResidualUpBlock<T: Real> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub skip: Conv2d<T>,
}

impl<T: Real> ResidualUpBlock<T> {
    pub fn new(name: &str, cin: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualUpBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, c, 3, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, rng),
            skip: Conv2d::new(&format!("{name}.skip"), cin, c, 1, 1, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let up = x.upsample2x()?;
        let h = self.conv1.forward(tape, &up)?.leaky_relu()?;
        self.conv2.forward(tape, &h)?.add(&self.skip.forward(tape, &up)?)
    }

    pub fn cost(&self, (h, w): (usize, usize)) -> (Cost, (usize, usize)) {
        let up = (2 * h, 2 * w);
        let (c1, _) = self.conv1.cost(up);
        let (c2, _) = self.conv2.cost(up);
        let (cs, _) = self.skip.cost(up);
        (c1 + c2 + cs, up)
    }
}

impl<T: Real> Module<T> for ResidualUpBlock<T> {
    collect_params!(self; conv1, conv2, skip);
}

/// Two 3x3 convs with an identity skip, resolution preserving.
pub struct ResidualUnit<T: Real> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Real> ResidualUnit<T> {
    pub fn new(name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualUnit {
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(tape, x)?.leaky_relu()?;
        self.conv2.forward(tape, &h)?.add(x)
    }

    pub fn cost(&self, input: (usize, usize)) -> (Cost, (usize, usize)) {
        let (c1, _) = self.conv1.cost(input);
        let (c2, _) = self.conv2.cost(input);
        (c1 + c2, input)
    }
}

impl<T: Real> Module<T> for ResidualUnit<T> {
    collect_params!(self; conv1, conv2);
}

/// Attentional feature fusion: `m*x + (1-m)*y` with
/// `m = sigmoid(local(x+y) + global(x+y))`.
pub struct AffBlock<T: Real> {
    pub local1: Conv2d<T>,
    pub local2: Conv2d<T>,
    pub global1: Conv2d<T>,
    pub global2: Conv2d<T>,
}

impl<T: Real> AffBlock<T> {
    pub fn new(name: &str, c: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (c / reduction).max(1);
        AffBlock {
            local1: Conv2d::new(&format!("{name}.local1"), c, mid, 1, 1, rng),
            local2: Conv2d::new(&format!("{name}.local2"), mid, c, 1, 1, rng),
            global1: Conv2d::new(&format!("{name}.global1"), c, mid, 1, 1, rng),
            global2: Conv2d::new(&format!("{name}.global2"), mid, c, 1, 1, rng),
        }
    }

    /// Gate values in (0, 1), shaped like the inputs.
    pub fn gate<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape() != y.shape() {
            return Err(Error::shape("aff_fuse", format!("{} vs {}", x.shape(), y.shape())));
        }
        let s = x.add(y)?;
        let local = self.local2.forward(tape, &self.local1.forward(tape, &s)?.leaky_relu()?)?;
        let pooled = s.global_avg_pool()?;
        let global = self.global2.forward(tape, &self.global1.forward(tape, &pooled)?.leaky_relu()?)?;
        local.add(&global)?.sigmoid()
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        let m = self.gate(tape, x, y)?;
        // y + m*(x - y) keeps x == y an exact fixed point.
        y.add(&m.mul(&x.sub(y)?)?)
    }

    pub fn zero_attention(&mut self) {
        for c in [&mut self.local1, &mut self.local2, &mut self.global1, &mut self.global2] {
            c.zero_();
        }
    }

    pub fn cost(&self, input: (usize, usize)) -> (Cost, (usize, usize)) {
        let (l1, _) = self.local1.cost(input);
        let (l2, _) = self.local2.cost(input);
        let (g1, _) = self.global1.cost((1, 1));
        let (g2, _) = self.global2.cost((1, 1));
        (l1 + l2 + g1 + g2, input)
    }
}

impl<T: Real> Module<T> for AffBlock<T> {
    collect_params!(self; local1, local2, global1, global2);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_conv_cost_matches_hand_count() {
        let conv = Conv2d::<f32>::new("c", 3, 32, 3, 2, &mut rng());
        let (cost, out) = conv.cost((256, 256));
        assert_eq!(out, (128, 128));
        assert_eq!(cost.macs, 14_155_776);
        assert!((cost.kmacs_per_pixel(256, 256) - 0.216).abs() < 1e-9);
        let tiny = Conv2d::<f32>::new("t", 1, 1, 1, 1, &mut rng());
        assert_eq!(tiny.cost((1, 1)).0, Cost { macs: 1, params: 2 });
        assert_eq!(conv.cost((512, 512)).0.macs, 4 * cost.macs);
    }

    #[test]
    fn identity_kernel_and_ones_kernel() {
        let tape = Tape::<f32>::inference();
        let mut c = Conv2d::<f32>::new("c", 1, 1, 1, 1, &mut rng());
        c.weight.set_value(Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        c.bias.set_value(Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        let x = random(Shape::new(2, 1, 5, 4), 1);
        let y = c.forward(&tape, &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);

        let ones = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        assert_eq!(ones.conv2d(&k, None, 1, 0).unwrap().value().data(), &[9.0]);
    }

    #[test]
    fn down_and_up_shapes() {
        let tape = Tape::<f32>::inference();
        let down = ResidualDownBlock::<f32>::new("d", 3, 32, &mut rng());
        let y = down.forward(&tape, &tape.constant(random(Shape::new(1, 3, 64, 64), 2))).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 32, 32));
        let up = ResidualUpBlock::<f32>::new("u", 32, 32, &mut rng());
        let z = up.forward(&tape, &tape.constant(random(Shape::new(1, 32, 16, 16), 3))).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 32, 32, 32));
        let d2 = ResidualDownBlock::<f32>::new("d2", 32, 32, &mut rng());
        assert_eq!(d2.forward(&tape, &z).unwrap().shape(), Shape::new(1, 32, 16, 16));
    }

    #[test]
    fn odd_input_is_rejected() {
        let tape = Tape::<f32>::inference();
        let down = ResidualDownBlock::<f32>::new("d", 3, 8, &mut rng());
        let err = down.forward(&tape, &tape.constant(random(Shape::new(1, 3, 9, 8), 2)));
        assert!(matches!(err, Err(Error::Shape { op: "res_down", .. })));
    }

    #[test]
    fn down_block_is_main_plus_skip() {
        let tape = Tape::<f32>::inference();
        let down = ResidualDownBlock::<f32>::new("d", 3, 8, &mut rng());
        let x = tape.constant(random(Shape::new(1, 3, 8, 8), 4));
        let full = down.forward(&tape, &x).unwrap();
        let parts = down.main_path(&tape, &x).unwrap().add(&down.skip.forward(&tape, &x).unwrap()).unwrap();
        assert_eq!(full.value(), parts.value());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let tape = Tape::<f32>::inference();
        let mut down = ResidualDownBlock::<f32>::new("d", 3, 8, &mut rng());
        let mut up = ResidualUpBlock::<f32>::new("u", 8, 8, &mut rng());
        for c in [&mut down.conv1, &mut down.conv2, &mut down.skip, &mut up.conv1, &mut up.conv2, &mut up.skip] {
            c.zero_();
        }
        let x = tape.constant(random(Shape::new(1, 3, 8, 8), 5));
        let y = down.forward(&tape, &x).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
        assert!(up.forward(&tape, &y).unwrap().value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aff_zero_attention_averages() {
        let tape = Tape::<f64>::inference();
        let mut aff = AffBlock::<f64>::new("a", 8, 4, &mut rng());
        aff.zero_attention();
        let s = Shape::new(1, 8, 4, 4);
        let x = random(s, 6).cast::<f64>();
        let y = random(s, 7).cast::<f64>();
        let out = aff.forward(&tape, &tape.constant(x.clone()), &tape.constant(y.clone())).unwrap();
        for ((o, a), b) in out.value().data().iter().zip(x.data()).zip(y.data()) {
            assert!((o - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aff_is_convex_and_fixes_equal_inputs() {
        let tape = Tape::<f32>::inference();
        let aff = AffBlock::<f32>::new("a", 8, 4, &mut rng());
        let s = Shape::new(2, 8, 4, 4);
        let (x, y) = (random(s, 8), random(s, 9));
        let out = aff.forward(&tape, &tape.constant(x.clone()), &tape.constant(y.clone())).unwrap();
        for ((o, a), b) in out.value().data().iter().zip(x.data()).zip(y.data()) {
            assert!(*o >= a.min(*b) - 1e-6 && *o <= a.max(*b) + 1e-6);
        }
        let same = aff.forward(&tape, &tape.constant(x.clone()), &tape.constant(x.clone())).unwrap();
        assert_eq!(same.value(), &x);
        let m = aff.gate(&tape, &tape.constant(x.clone()), &tape.constant(y.clone())).unwrap();
        assert!(m.value().data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let m2 = aff.gate(&tape, &tape.constant(y), &tape.constant(x)).unwrap();
        assert_eq!(m.value(), m2.value());
    }

    #[test]
    fn aff_rejects_mismatched_inputs() {
        let tape = Tape::<f32>::inference();
        let aff = AffBlock::<f32>::new("a", 8, 4, &mut rng());
        let x = tape.constant(random(Shape::new(1, 8, 4, 4), 1));
        let y = tape.constant(random(Shape::new(1, 8, 4, 2), 2));
        assert!(aff.forward(&tape, &x, &y).is_err());
    }
}
