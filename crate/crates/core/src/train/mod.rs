//! Rate-distortion training: loss, single steps, and the checkpointing loop.

mod data;

pub use data::DataPipeline;
pub(crate) use data::mix;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::metrics::ms_ssim_tape;
use crate::model::{Checkpoint, ModelConfig, OptimizerState, TreeCodec, PAD_MULTIPLE};
use crate::nn::Module;
use crate::tensor::{clip_grad_norm, Adam, Real, Tape, Tensor, Var};

/// `(λ1, λ2)` operating points, paired by index. Index 0 is the highest rate.
pub const LAMBDA_PAIRS: [(f64, f64); 4] = [(0.01, 2.4), (0.005, 1.2), (0.0025, 0.6), (0.00125, 0.3)];

pub const CLIP_NORM: f64 = 1.0;

/// MSE in the loss is measured on the 0..255 scale.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Stored in checkpoints and bitstream headers; 255 when the λs match no pair.
    pub lambda_index: u8,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many steps instead of `epochs` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_pair(0)
    }
}

impl TrainConfig {
    pub fn for_pair(index: usize) -> Self {
        let (lambda1, lambda2) = LAMBDA_PAIRS[index];
        TrainConfig {
            lambda1,
            lambda2,
            lambda_index: index as u8,
            batch: 16,
            crop: 256,
            lr: 1e-4,
            epochs: 50,
            max_steps: None,
            seed: 0,
            data_dir: PathBuf::from("data"),
            checkpoint_every: 500,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::ConfigValue {
            key: key.into(),
            reason: reason.into(),
        };
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(bad("lambda1", "λ values must be non-negative"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(bad("lambda1", "λ1 and λ2 cannot both be zero"));
        }
        if self.crop == 0 || self.crop % PAD_MULTIPLE != 0 {
            return Err(bad("crop", "must be a positive multiple of 64"));
        }
        if self.batch == 0 {
            return Err(bad("batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(bad("checkpoint_every", "must be positive"));
        }
        self.model.validate()
    }

    /// Apply keys from a config file. `pair = i` selects a λ pair; explicit
    /// `lambda1`/`lambda2` then override it.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        if let Some(i) = kv.take::<usize>("pair")? {
            if i >= LAMBDA_PAIRS.len() {
                return Err(Error::ConfigValue {
                    key: "pair".into(),
                    reason: format!("must be below {}", LAMBDA_PAIRS.len()),
                });
            }
            (self.lambda1, self.lambda2) = LAMBDA_PAIRS[i];
        }
        if let Some(v) = kv.take("lambda1")? {
            self.lambda1 = v;
        }
        if let Some(v) = kv.take("lambda2")? {
            self.lambda2 = v;
        }
        self.lambda_index = LAMBDA_PAIRS
            .iter()
            .position(|p| *p == (self.lambda1, self.lambda2))
            .map_or(255, |i| i as u8);
        macro_rules! field {
            ($($key:literal => $f:expr),* $(,)?) => {
                $(if let Some(v) = kv.take($key)? { $f = v; })*
            };
        }
        field! {
            "batch" => self.batch,
            "crop" => self.crop,
            "lr" => self.lr,
            "epochs" => self.epochs,
            "seed" => self.seed,
            "data_dir" => self.data_dir,
            "checkpoint_every" => self.checkpoint_every,
            "channels" => self.model.channels,
            "latent_channels" => self.model.latent_channels,
            "hyper_channels" => self.model.hyper_channels,
            "aff_reduction" => self.model.aff_reduction,
            "context_kernel" => self.model.context_kernel,
        }
        if let Some(v) = kv.take::<u64>("steps")? {
            self.max_steps = (v > 0).then_some(v);
        }
        Ok(())
    }

    /// Resolved configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "lambda1 = {}\nlambda2 = {}\nbatch = {}\ncrop = {}\nlr = {}\nepochs = {}\nsteps = {}\nseed = {}\ndata_dir = {}\ncheckpoint_every = {}\nchannels = {}\nlatent_channels = {}\nhyper_channels = {}\naff_reduction = {}\ncontext_kernel = {}\n",
            self.lambda1,
            self.lambda2,
            self.batch,
            self.crop,
            self.lr,
            self.epochs,
            self.max_steps.unwrap_or(0),
            self.seed,
            self.data_dir.display(),
            self.checkpoint_every,
            m.channels,
            m.latent_channels,
            m.hyper_channels,
            m.aff_reduction,
            m.context_kernel,
        )
    }

    /// Steps implied by `epochs` over a corpus of `images`, or `max_steps`.
    pub fn total_steps(&self, images: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * images).div_ceil(self.batch) as u64)
    }
}

/// Per-batch loss terms. `total = bpp_y + bpp_z + λ1·mse + λ2·msssim_term`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub bpp_y: f64,
    pub bpp_z: f64,
    /// On the 0..255 scale.
    pub mse: f64,
    /// `1 - MS-SSIM`.
    pub msssim_term: f64,
    pub total: f64,
}

impl LossReport {
    pub fn bpp(&self) -> f64 {
        self.bpp_y + self.bpp_z
    }

    /// `total` recomputed from the parts.
    pub fn recompose(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.bpp_y + self.bpp_z + lambda1 * self.mse + lambda2 * self.msssim_term
    }
}

fn scalar<T: Real>(v: &Var<'_, T>, name: &'static str) -> Result<f64> {
    let x = v.value().data()[0].f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss(name))
    }
}

fn sum_bits<'t, T: Real>(likelihoods: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for l in likelihoods {
        let b = l.neg_log2_sum()?;
        acc = Some(match acc {
            None => b,
            Some(a) => a.add(&b)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no likelihoods".into()))
}

/// Noise-quantized forward pass and the rate-distortion loss on a recorded tape.
pub fn loss_eval<'t, T: Real>(
    model: &TreeCodec<T>,
    tape: &'t Tape<T>,
    batch: &Tensor<T>,
    lambda1: f64,
    lambda2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t, T>, LossReport)> {
    let x = tape.constant(batch.clone());
    let out = model.forward_train(tape, &x, rng)?;
    let s = batch.shape();
    let pixels = (s.n * s.h * s.w) as f64;
    let bpp_y = sum_bits(&out.y_likelihoods)?.scale(1.0 / pixels)?;
    let bpp_z = sum_bits(&out.z_likelihoods)?.scale(1.0 / pixels)?;
    let mse = out.x_hat.sub(&x)?.square()?.mean()?.scale(MSE_SCALE)?;
    let mut total = bpp_y.add(&bpp_z)?.add(&mse.scale(lambda1)?)?;
    let msssim_term = if lambda2 != 0.0 {
        let term = ms_ssim_tape(&out.x_hat, &x)?.scale(-1.0)?.add_scalar(1.0)?;
        total = total.add(&term.scale(lambda2)?)?;
        scalar(&term, "msssim")?
    } else {
        1.0 - ms_ssim_tape(&out.x_hat.detach(), &x)?.value().data()[0].f64()
    };
    let report = LossReport {
        bpp_y: scalar(&bpp_y, "rate_y")?,
        bpp_z: scalar(&bpp_z, "rate_z")?,
        mse: scalar(&mse, "mse")?,
        msssim_term,
        total: scalar(&total, "total")?,
    };
    Ok((total, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// True when the gradient was non-finite and no update was made.
    pub skipped: bool,
}

/// One backward pass and Adam update with gradient clipping.
pub fn train_step<T: Real>(
    model: &mut TreeCodec<T>,
    batch: &Tensor<T>,
    cfg: &TrainConfig,
    adam: &Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let (loss, report) = loss_eval(model, &tape, batch, cfg.lambda1, cfg.lambda2, rng)?;
    let mut grads = tape.backward(&loss)?;
    drop(loss);
    drop(tape);
    for p in model.params_mut() {
        grads.assign(p);
    }
    let grad_norm = clip_grad_norm(model.params_mut(), CLIP_NORM);
    if !grad_norm.is_finite() {
        log::warn!("non-finite gradient norm; skipping update");
        for p in model.params_mut() {
            p.grad = None;
        }
        return Ok(StepOutcome {
            report,
            grad_norm,
            skipped: true,
        });
    }
    adam.step(model.params_mut())?;
    Ok(StepOutcome {
        report,
        grad_norm,
        skipped: false,
    })
}

/// Noise RNG for a given step; depends only on `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, 3, step]))
}

pub const LOG_HEADER: &str = "step,epoch,loss,bpp_y,bpp_z,mse,msssim_term,grad_norm,skipped";

/// Model, optimiser position and data stream of one training run.
pub struct Trainer {
    pub model: TreeCodec<f32>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub data: DataPipeline,
    adam: Adam,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: DataPipeline) -> Result<Self> {
        cfg.validate()?;
        let model = TreeCodec::new(cfg.model, cfg.seed)?;
        Ok(Trainer {
            adam: Adam::new(cfg.lr),
            model,
            cfg,
            step: 0,
            data,
        })
    }

    /// Continue from a checkpoint written with optimiser state.
    pub fn resume(cfg: TrainConfig, data: DataPipeline, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let ck = Checkpoint::load(checkpoint)?;
        if *ck.model.config() != cfg.model {
            return Err(Error::Checkpoint(format!(
                "{}: model config {:?} does not match {:?}",
                checkpoint.display(),
                ck.model.config(),
                cfg.model
            )));
        }
        let step = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint(format!("{}: no optimiser state to resume from", checkpoint.display())))?
            .step;
        Ok(Trainer {
            adam: Adam::new(cfg.lr),
            model: ck.model,
            cfg,
            step,
            data,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.step * self.cfg.batch as u64 / self.data.len() as u64
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.data.batch(self.step, self.cfg.batch);
        let mut rng = step_rng(self.cfg.seed, self.step);
        let out = train_step(&mut self.model, &batch, &self.cfg, &self.adam, &mut rng)?;
        self.step += 1;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::save(
            path,
            &self.model,
            self.cfg.lambda_index,
            Some(OptimizerState { step: self.step }),
        )
    }
}

pub fn log_row(step: u64, epoch: u64, o: &StepOutcome) -> String {
    let r = &o.report;
    format!(
        "{step},{epoch},{},{},{},{},{},{},{}",
        r.total, r.bpp_y, r.bpp_z, r.mse, r.msssim_term, o.grad_norm, o.skipped as u8
    )
}

/// Train until the configured step count, writing `train_log.csv`,
/// `step_NNNNNN.tnwt` every `checkpoint_every` steps and `final.tnwt` into
/// `out_dir`. Returns the final checkpoint path.
pub fn train_loop(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let data = DataPipeline::open(&cfg.data_dir, cfg.crop, cfg.seed)?;
    let total = cfg.total_steps(data.len());
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), data, p)?,
        None => Trainer::new(cfg.clone(), data)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    log::info!("training {} images for {total} steps from step {}", trainer.data.len(), trainer.step);
    while trainer.step < total {
        let epoch = trainer.epoch();
        let step = trainer.step;
        let out = trainer.step()?;
        writeln!(log, "{}", log_row(step, epoch, &out))?;
        if step % 50 == 0 {
            let r = &out.report;
            log::info!(
                "step {step} loss {:.4} bpp {:.4} mse {:.2} 1-msssim {:.4}",
                r.total,
                r.bpp(),
                r.mse,
                r.msssim_term
            );
        }
        if trainer.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            trainer.save(&out_dir.join(format!("step_{:06}.tnwt", trainer.step)))?;
        }
    }
    log.flush()?;
    let path = out_dir.join("final.tnwt");
    trainer.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch: 2,
            crop: 64,
            model: ModelConfig {
                channels: 8,
                latent_channels: 8,
                hyper_channels: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn pipeline() -> DataPipeline {
        DataPipeline::from_images((0..4).map(|i| crate::synth::generate(i, 64, 64)).collect(), 64, 0).unwrap()
    }

    #[test]
    fn config_validation_and_pairs() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = tiny();
        c.crop = 96;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.lambda1 = 0.0;
        c.lambda2 = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.apply(&mut KeyValues::parse("pair = 2").unwrap()).unwrap();
        assert_eq!((c.lambda1, c.lambda2, c.lambda_index), (0.0025, 0.6, 2));
        c.apply(&mut KeyValues::parse("lambda1 = 0.5").unwrap()).unwrap();
        assert_eq!(c.lambda_index, 255);
    }

    #[test]
    fn loss_decomposes_into_its_terms() {
        let cfg = tiny();
        let m = TreeCodec::<f32>::new(cfg.model, 0).unwrap();
        let tape = Tape::new();
        let batch = pipeline().batch(0, 2);
        let (_, r) = loss_eval(&m, &tape, &batch, cfg.lambda1, cfg.lambda2, &mut step_rng(0, 0)).unwrap();
        assert!((r.recompose(cfg.lambda1, cfg.lambda2) - r.total).abs() <= 1e-6 * r.total.abs().max(1.0));
        let (_, r0) = loss_eval(&m, &tape, &batch, 0.01, 0.0, &mut step_rng(0, 0)).unwrap();
        assert!((r0.total - (r0.bpp() + 0.01 * r0.mse)).abs() <= 1e-6 * r0.total.max(1.0));
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = || {
            let mut t = Trainer::new(tiny(), pipeline()).unwrap();
            (0..3).map(|_| t.step().unwrap().report.total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(tiny(), pipeline()).unwrap();
        a.step().unwrap();
        a.step().unwrap();
        let ck = dir.path().join("mid.tnwt");
        a.save(&ck).unwrap();
        let next_a = a.step().unwrap();
        let mut b = Trainer::resume(tiny(), pipeline(), &ck).unwrap();
        assert_eq!(b.step, 2);
        let next_b = b.step().unwrap();
        assert_eq!(next_a, next_b);
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
    }
}
