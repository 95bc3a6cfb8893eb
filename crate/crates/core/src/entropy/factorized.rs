use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Parameter, Real, Shape, Tensor, Var};

/// Hidden widths of the per-channel density network (input and output are 1).
const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = WIDTHS.len() - 1;
const INIT_SCALE: f64 = 2.0;

/// Channel-wise learned CDF built from monotone scalar layers:
/// `h <- softplus(M) h + b`, then `h <- h + tanh(a) * tanh(h)` on hidden layers.
pub struct FactorizedPrior<T: Real> {
    channels: usize,
    /// `(C, out, in, 1)` raw matrices, softplus-constrained at use.
    pub matrices: Vec<Parameter<T>>,
    /// `(C, out, 1, 1)`.
    pub biases: Vec<Parameter<T>>,
    /// `(C, out, 1, 1)`, one per hidden layer.
    pub factors: Vec<Parameter<T>>,
}

/// f64 snapshot of one channel's weights.
struct Channel {
    m: [Vec<f64>; LAYERS],
    b: [Vec<f64>; LAYERS],
    f: [Vec<f64>; LAYERS - 1],
}

/// Forward record for one evaluation of the cumulative logit.
struct Trace {
    h: [[f64; 3]; LAYERS + 1],
    pre: [[f64; 3]; LAYERS],
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Channel {
    fn logit(&self, x: f64) -> (f64, Trace) {
        let mut t = Trace {
            h: [[0.0; 3]; LAYERS + 1],
            pre: [[0.0; 3]; LAYERS],
        };
        t.h[0][0] = x;
        for l in 0..LAYERS {
            let (fi, fo) = (WIDTHS[l], WIDTHS[l + 1]);
            for o in 0..fo {
                let mut acc = self.b[l][o];
                for i in 0..fi {
                    acc += softplus(self.m[l][o * fi + i]) * t.h[l][i];
                }
                t.pre[l][o] = acc;
                t.h[l + 1][o] = if l < LAYERS - 1 {
                    acc + self.f[l][o].tanh() * acc.tanh()
                } else {
                    acc
                };
            }
        }
        (t.h[LAYERS][0], t)
    }

    /// Adds parameter gradients into `grads` and returns d/dx.
    fn logit_backward(&self, t: &Trace, dout: f64, grads: &mut Channel) -> f64 {
        let mut dh = [0.0f64; 3];
        dh[0] = dout;
        for l in (0..LAYERS).rev() {
            let (fi, fo) = (WIDTHS[l], WIDTHS[l + 1]);
            let mut dpre = [0.0f64; 3];
            for o in 0..fo {
                if l < LAYERS - 1 {
                    let ta = t.pre[l][o].tanh();
                    let tf = self.f[l][o].tanh();
                    dpre[o] = dh[o] * (1.0 + tf * (1.0 - ta * ta));
                    grads.f[l][o] += dh[o] * ta * (1.0 - tf * tf);
                } else {
                    dpre[o] = dh[o];
                }
                grads.b[l][o] += dpre[o];
            }
            let mut din = [0.0f64; 3];
            for o in 0..fo {
                for i in 0..fi {
                    let raw = self.m[l][o * fi + i];
                    grads.m[l][o * fi + i] += dpre[o] * t.h[l][i] * sigmoid(raw);
                    din[i] += softplus(raw) * dpre[o];
                }
            }
            dh = din;
        }
        dh[0]
    }

    fn zeros() -> Channel {
        Channel {
            m: std::array::from_fn(|l| vec![0.0; WIDTHS[l] * WIDTHS[l + 1]]),
            b: std::array::from_fn(|l| vec![0.0; WIDTHS[l + 1]]),
            f: std::array::from_fn(|l| vec![0.0; WIDTHS[l + 1]]),
        }
    }

    /// Bin probability of integer-centred `v` and its pieces for backward.
    fn likelihood(&self, v: f64) -> (f64, Trace, Trace, f64, f64) {
        let (lo, tl) = self.logit(v - 0.5);
        let (hi, th) = self.logit(v + 0.5);
        // Evaluate on whichever tail keeps the difference well conditioned.
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        let d = sigmoid(s * hi) - sigmoid(s * lo);
        (d.abs(), tl, th, s, d)
    }
}

impl<T: Real> FactorizedPrior<T> {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = INIT_SCALE.powf(1.0 / LAYERS as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for l in 0..LAYERS {
            let (fi, fo) = (WIDTHS[l], WIDTHS[l + 1]);
            let init = (1.0 / scale / fo as f64).exp_m1().ln();
            matrices.push(Parameter::new(
                format!("{name}.matrix{l}"),
                Tensor::full(Shape::new(channels, fo, fi, 1), T::of(init)),
            ));
            biases.push(Parameter::new(
                format!("{name}.bias{l}"),
                Tensor::from_fn(Shape::new(channels, fo, 1, 1), |_, _, _, _| T::of(rng.gen_range(-0.5..0.5))),
            ));
            if l < LAYERS - 1 {
                factors.push(Parameter::new(
                    format!("{name}.factor{l}"),
                    Tensor::zeros(Shape::new(channels, fo, 1, 1)),
                ));
            }
        }
        FactorizedPrior {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn snapshot_values(values: &[&Tensor<T>], channels: usize) -> Vec<Channel> {
        (0..channels)
            .map(|c| {
                let mut ch = Channel::zeros();
                for l in 0..LAYERS {
                    let m = values[l];
                    let per = m.len() / channels;
                    ch.m[l] = m.data()[c * per..(c + 1) * per].iter().map(|v| v.f64()).collect();
                    let b = values[LAYERS + l];
                    let per = b.len() / channels;
                    ch.b[l] = b.data()[c * per..(c + 1) * per].iter().map(|v| v.f64()).collect();
                    if l < LAYERS - 1 {
                        let f = values[2 * LAYERS + l];
                        ch.f[l] = f.data()[c * per..(c + 1) * per].iter().map(|v| v.f64()).collect();
                    }
                }
                ch
            })
            .collect()
    }

    fn snapshot(&self) -> Vec<Channel> {
        let values: Vec<&Tensor<T>> = self.params().into_iter().map(|p| p.value()).collect();
        Self::snapshot_values(&values, self.channels)
    }

    /// Per-channel evaluator for building coding tables.
    pub fn evaluator(&self) -> PriorEvaluator {
        PriorEvaluator {
            channels: self.snapshot(),
        }
    }

    /// Bin probabilities of `z`, differentiable in `z` and every prior weight.
    pub fn likelihood<'t>(&self, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.c != self.channels {
            return Err(Error::shape(
                "factorized_likelihood",
                format!("{s} for a {}-channel prior", self.channels),
            ));
        }
        let tape = z.tape();
        let params = self.params();
        let vars: Vec<Var<'t, T>> = params.iter().map(|p| tape.param(p)).collect();
        let shapes: Vec<Shape> = params.iter().map(|p| p.shape()).collect();
        let chans = self.snapshot();
        let zv = z.shared();
        let mut probs = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for (c, ch) in chans.iter().enumerate() {
                for v in zv.plane(n, c) {
                    probs.push(T::of(ch.likelihood(v.f64()).0));
                }
            }
        }
        let value = Tensor::from_vec(s, probs)?;
        let mut inputs: Vec<&Var<'t, T>> = vec![z];
        inputs.extend(vars.iter());
        let channels = self.channels;
        tape.custom("factorized_likelihood", &inputs, value, move |g| {
            let mut dz = Vec::with_capacity(s.numel());
            let mut grads: Vec<Channel> = (0..channels).map(|_| Channel::zeros()).collect();
            let plane = s.plane();
            for n in 0..s.n {
                for (c, ch) in chans.iter().enumerate() {
                    for (k, v) in zv.plane(n, c).iter().enumerate() {
                        let gi = g.data()[(n * channels + c) * plane + k].f64();
                        let (_, tl, th, sgn, d) = ch.likelihood(v.f64());
                        let outer = gi * d.signum() * sgn;
                        let dhi = outer * sigmoid(sgn * th.h[LAYERS][0]) * (1.0 - sigmoid(sgn * th.h[LAYERS][0]));
                        let dlo = -outer * sigmoid(sgn * tl.h[LAYERS][0]) * (1.0 - sigmoid(sgn * tl.h[LAYERS][0]));
                        let a = ch.logit_backward(&th, dhi, &mut grads[c]);
                        let b = ch.logit_backward(&tl, dlo, &mut grads[c]);
                        dz.push(T::of(a + b));
                    }
                }
            }
            let mut out = vec![Some(Tensor::from_vec(s, dz).expect("shape"))];
            for (idx, shape) in shapes.iter().enumerate() {
                let data = (0..channels)
                    .flat_map(|c| {
                        let gch = &grads[c];
                        let slice: &[f64] = if idx < LAYERS {
                            &gch.m[idx]
                        } else if idx < 2 * LAYERS {
                            &gch.b[idx - LAYERS]
                        } else {
                            &gch.f[idx - 2 * LAYERS]
                        };
                        slice.iter().map(|v| T::of(*v)).collect::<Vec<_>>()
                    })
                    .collect();
                out.push(Some(Tensor::from_vec(*shape, data).expect("shape")));
            }
            out
        })
    }

    /// Scan `[-range, range]` and fail if any channel's CDF decreases.
    pub fn check_monotone(&self, range: f64, steps: usize) -> Result<()> {
        for (c, ch) in self.snapshot().iter().enumerate() {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=steps {
                let x = -range + 2.0 * range * i as f64 / steps as f64;
                let v = ch.logit(x).0;
                if v < prev - 1e-9 {
                    return Err(Error::NonMonotoneCdf { channel: c });
                }
                prev = v;
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for FactorizedPrior<T> {
    /// Order: matrices, biases, factors.
    fn params(&self) -> Vec<&Parameter<T>> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.matrices
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(self.factors.iter_mut())
            .collect()
    }
}

/// Frozen f64 copy of a prior, used by the entropy coder.
pub struct PriorEvaluator {
    channels: Vec<Channel>,
}

impl PriorEvaluator {
    /// Probability of integer `v` in channel `c`.
    pub fn probability(&self, c: usize, v: f64) -> f64 {
        self.channels[c].likelihood(v).0
    }

    /// Cumulative probability at `x` in channel `c`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.channels[c].logit(x).0)
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fresh_prior_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = FactorizedPrior::<f32>::new("p", 4, &mut rng);
        prior.check_monotone(50.0, 1000).unwrap();
        let ev = prior.evaluator();
        for c in 0..4 {
            let total: f64 = (-30..=30).map(|k| ev.probability(c, k as f64)).sum();
            assert!(total <= 1.0 + 1e-12 && total >= 0.999, "channel {c}: {total}");
            assert!(ev.cdf(c, 1e4) > ev.cdf(c, -1e4));
        }
    }
}
