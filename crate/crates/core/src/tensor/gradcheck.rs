//! Central finite differences against tape gradients, in 64-bit.

use super::{Parameter, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::Module;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Central difference of `at` around `orig`; `at(v)` evaluates the function
/// with the probed coordinate set to `v`, and the caller restores it. A quotient that moves when the
/// step shrinks a hundredfold means a kink of a piecewise-linear activation
/// lies within the step; the smaller step is used there.
fn difference(orig: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let quotient = |at: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> {
        Ok((at(orig + h)? - at(orig - h)?) / (2.0 * h))
    };
    let coarse = quotient(&mut at, STEP)?;
    let fine = quotient(&mut at, STEP / 100.0)?;
    Ok(if (coarse - fine).abs() > 1e-5 * (1.0 + coarse.abs()) { fine } else { coarse })
}

/// Norm-wise relative error `|a - n| / max(|a| + |n|, tiny)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let an: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = an + nn;
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Worst relative error over all `inputs` and `params` of the scalar function `f`.
///
/// `f` receives the tape and one tracked leaf per input tensor; parameters
/// are read through `tape.param` inside `f`.
pub fn check<F>(inputs: &[Tensor<f64>], params: &mut [&mut Parameter<f64>], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>], &[&Parameter<f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |inputs: &[Tensor<f64>], params: &[&Parameter<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars, params)?.value().data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let (analytic_in, analytic_p) = {
        let views: Vec<&Parameter<f64>> = params.iter().map(|p| &**p).collect();
        let loss = f(&tape, &vars, &views)?;
        let g = tape.backward(&loss)?;
        let ai: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| g.wrt(v).map_or_else(|| vec![0.0; v.shape().numel()], |t| t.data().to_vec()))
            .collect();
        let ap: Vec<Vec<f64>> = views
            .iter()
            .map(|p| g.param(p.key()).map_or_else(|| vec![0.0; p.numel()], |t| t.data().to_vec()))
            .collect();
        (ai, ap)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, analytic) in analytic_in.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            let views: Vec<&Parameter<f64>> = params.iter().map(|p| &**p).collect();
            *slot = difference(orig, |v| {
                work[i].data_mut()[j] = v;
                eval(&work, &views)
            })?;
            work[i].data_mut()[j] = orig;
        }
        worst = worst.max(relative_error(analytic, &numeric));
    }
    for (k, analytic) in analytic_p.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params[k].value().data()[j];
            *slot = difference(orig, |v| {
                params[k].value_mut().data_mut()[j] = v;
                eval(inputs, &params.iter().map(|p| &**p).collect::<Vec<_>>())
            })?;
            params[k].value_mut().data_mut()[j] = orig;
        }
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}

/// Gradient check for a module that reads its own parameters.
///
/// Every input coordinate is probed. For parameters, tensors larger than
/// `max_coords` are probed at `max_coords` evenly spaced coordinates.
/// Returns the norm-wise relative error over all probed coordinates taken
/// together: deep inside a network many tensors have gradients near the
/// finite-difference noise floor, where a per-tensor ratio is meaningless.
pub fn check_module<M, F>(module: &mut M, inputs: &[Tensor<f64>], max_coords: usize, f: F) -> Result<f64>
where
    M: Module<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &M, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |module: &M, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, module, &vars)?.value().data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, module, &vars)?;
    let g = tape.backward(&loss)?;
    let analytic_in: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.wrt(v).map_or_else(|| vec![0.0; v.shape().numel()], |t| t.data().to_vec()))
        .collect();
    let analytic_p: Vec<Vec<f64>> = module
        .params()
        .iter()
        .map(|p| g.param(p.key()).map_or_else(|| vec![0.0; p.numel()], |t| t.data().to_vec()))
        .collect();
    drop(loss);
    drop(vars);

    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, analytic) in analytic_in.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            *slot = difference(orig, |v| {
                work[i].data_mut()[j] = v;
                eval(module, &work)
            })?;
            work[i].data_mut()[j] = orig;
        }
        all_analytic.extend_from_slice(analytic);
        all_numeric.extend(numeric);
    }
    for (k, analytic) in analytic_p.iter().enumerate() {
        let n = analytic.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = module.params()[k].value().data()[j];
            numeric.push(difference(orig, |v| {
                module.params_mut()[k].value_mut().data_mut()[j] = v;
                eval(module, inputs)
            })?);
            module.params_mut()[k].value_mut().data_mut()[j] = orig;
        }
        all_analytic.extend(coords.iter().map(|&j| analytic[j]));
        all_numeric.extend(numeric);
    }
    Ok(relative_error(&all_analytic, &all_numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn strided_conv_gradient_matches_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(Shape::new(2, 2, 5, 5), &mut rng);
            let w = random(Shape::new(3, 2, 3, 3), &mut rng);
            let b = random(Shape::new(1, 3, 1, 1), &mut rng);
            let probe = random(Shape::new(2, 3, 3, 3), &mut rng);
            let err = check(&[x, w, b], &mut [], |tape, v, _| {
                let y = v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?;
                assert_eq!(y.shape(), Shape::new(2, 3, 3, 3));
                y.mul(&tape.constant(probe.clone()))?.sum()
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn elementwise_and_pooling_ops_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(1, 2, 6, 6);
        let a = random(s, &mut rng);
        let b = random(Shape::new(1, 2, 1, 1), &mut rng).map(|v| v + 2.0);
        let err = check(&[a, b], &mut [], |_, v, _| {
            let t = v[0].tanh()?.add(&v[0].sigmoid()?)?.mul(&v[1])?;
            let u = t.softplus()?.div(&v[1])?.upsample2x()?.avg_pool2x2()?;
            let g = u.leaky_relu()?.global_avg_pool()?;
            let bl = u.blur_valid(&[0.25, 0.5, 0.25])?.square()?.add_scalar(0.1)?.powf(0.7)?;
            g.sum()?.add(&bl.mean()?)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
