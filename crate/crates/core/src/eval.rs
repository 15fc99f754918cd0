//! Episodic mIoU evaluation on held-out classes.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use symnet_tensor::Real;

use crate::data::{sample_episode, write_pgm, Dataset, Mode, SplitConfig};
use crate::error::{Error, Result};
use crate::metrics::{ClassIou, MiouAccumulator};
use crate::model::SymNet;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub rounds: usize,
    pub episodes: usize,
    /// Round `r` samples its episodes from `seed + r`.
    pub seed: u64,
    /// Writes predicted masks and priors as PGM when set.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub seed: u64,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rounds: Vec<RoundReport>,
    pub mean_miou: f64,
    /// Episodes dropped because the support foreground vanished on the feature grid.
    pub skipped: usize,
}

pub fn evaluate<T: Real>(model: &SymNet<T>, data: &Dataset, split: &SplitConfig, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.rounds == 0 || opts.episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one round and one episode".into()));
    }
    let mut rounds = Vec::with_capacity(opts.rounds);
    let mut skipped = 0;
    for r in 0..opts.rounds {
        let seed = opts.seed.wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = MiouAccumulator::new();
        for e in 0..opts.episodes {
            let ep = sample_episode::<T, _>(data, split, Mode::Test, opts.k, &mut rng)?;
            let pred = match model.predict(&ep) {
                Ok(p) => p,
                Err(Error::EmptyForeground(h, w)) => {
                    log::warn!("round {r} episode {e}: support foreground empty at {h}x{w}, skipped");
                    skipped += 1;
                    continue;
                }
                Err(err) => return Err(err),
            };
            acc.add(ep.class_id, &pred.mask, &ep.query_mask)?;
            if let Some(dir) = &opts.dump_dir {
                let dir = dir.join(format!("round{r}"));
                std::fs::create_dir_all(&dir)?;
                write_pgm(&dir.join(format!("ep{e:04}_pred.pgm")), &pred.mask)?;
                write_pgm(&dir.join(format!("ep{e:04}_prior.pgm")), &pred.prior.map)?;
            }
        }
        let report = acc.report()?;
        rounds.push(RoundReport {
            seed,
            miou: report.miou,
            per_class: report.per_class,
        });
    }
    let mean_miou = rounds.iter().map(|r| r.miou).sum::<f64>() / rounds.len() as f64;
    Ok(EvalReport {
        rounds,
        mean_miou,
        skipped,
    })
}
