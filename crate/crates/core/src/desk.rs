//! The desk-scale experiment: a seeded synthetic corpus and four λ-pair
//! models trained on it, cached on disk by a hash of the setup.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::model::{Fnv, ModelConfig};
use crate::synth;
use crate::train::{train_loop, TrainConfig, LAMBDA_PAIRS};

#[derive(Clone, Debug, PartialEq)]
pub struct DeskSetup {
    pub images: usize,
    pub side: usize,
    pub corpus_seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for DeskSetup {
    fn default() -> Self {
        DeskSetup {
            images: 200,
            side: 64,
            corpus_seed: 1000,
            steps: 2000,
            batch: 16,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Held-out evaluation images, the same size as the corpus and with
/// disjoint seeds. Models trained on 64x64 images only ever see a 1x1
/// hyper-latent, so their prior does not carry over to larger inputs.
pub const TEST_SEEDS: std::ops::Range<u64> = 9000..9024;

impl DeskSetup {
    pub fn key(&self) -> String {
        let mut h = Fnv::new();
        h.write(format!("{self:?}").as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(format!("desk-{}", self.key()))
    }

    pub fn train_config(&self, pair: usize, data_dir: &Path) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            crop: self.side,
            max_steps: Some(self.steps),
            seed: self.seed,
            data_dir: data_dir.to_path_buf(),
            checkpoint_every: 500,
            model: self.model,
            ..TrainConfig::for_pair(pair)
        }
    }

    /// Corpus directory, written on first use.
    pub fn corpus(&self, root: &Path) -> Result<PathBuf> {
        let dir = self.dir(root).join("corpus");
        let done = dir.join(".complete");
        if !done.exists() {
            synth::write_corpus(&dir, self.images, self.side, self.side, self.corpus_seed)?;
            std::fs::write(&done, b"")?;
        }
        Ok(dir)
    }

    /// Final checkpoint for one λ pair, training it (or resuming the latest
    /// periodic checkpoint) when missing.
    pub fn model(&self, root: &Path, pair: usize) -> Result<PathBuf> {
        let out = self.dir(root).join(format!("pair{pair}"));
        let fin = out.join("final.tnwt");
        if fin.exists() {
            return Ok(fin);
        }
        let data = self.corpus(root)?;
        let cfg = self.train_config(pair, &data);
        let latest = std::fs::read_dir(&out)
            .ok()
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_") && n.ends_with(".tnwt")))
            .max();
        if let Some(p) = &latest {
            log::info!("resuming pair {pair} from {}", p.display());
        }
        train_loop(&cfg, &out, latest.as_deref())
    }

    pub fn models(&self, root: &Path) -> Result<Vec<PathBuf>> {
        (0..LAMBDA_PAIRS.len()).map(|i| self.model(root, i)).collect()
    }

    /// Whether all four final checkpoints are already on disk.
    pub fn is_trained(&self, root: &Path) -> bool {
        (0..LAMBDA_PAIRS.len()).all(|i| self.dir(root).join(format!("pair{i}/final.tnwt")).exists())
    }

    /// Held-out test images, written on first use.
    pub fn test_images(&self, root: &Path) -> Result<PathBuf> {
        let dir = self.dir(root).join("heldout");
        let done = dir.join(".complete");
        if !done.exists() {
            std::fs::create_dir_all(&dir)?;
            for s in TEST_SEEDS {
                crate::image_io::save(&dir.join(format!("test{s}.png")), &synth::generate(s, self.side, self.side))?;
            }
            std::fs::write(&done, b"")?;
        }
        Ok(dir)
    }
}
