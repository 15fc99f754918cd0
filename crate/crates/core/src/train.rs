//! Episodic SGD training with momentum and weight decay.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use symnet_tensor::{Real, Tape, Tensor, TensorError};

use crate::checkpoint::{Checkpoint, RngState, MOMENTUM_PREFIX, TEXT_RECORD};
use crate::config::Config;
use crate::data::{sample_episode, Dataset, Episode, Mode, SplitConfig};
use crate::encoder::TextEmbeddings;
use crate::error::{Error, Result};
use crate::model::SymNet;
use crate::params::ParamStore;

/// Episode-sampling stream is kept apart from the initialization stream.
const EPISODE_STREAM: u64 = 1;

/// `g += wd * p; v = mu * v + g; p -= lr * v`, the usual heavy-ball form.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            clip: 0.0,
            velocity: vec![None; n_params],
        }
    }

    /// Updates every trainable parameter; a missing gradient counts as zero.
    /// Returns the data-gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, mut grads: Vec<Option<Tensor<T>>>) -> f64 {
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let k = T::of(self.clip / norm);
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let mut g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
            for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
                *gi += wd * pi;
            }
            let v = v.get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        norm
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub class_id: usize,
    pub co_triple: f64,
    pub inter_seg: f64,
    pub final_seg: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Reason the episode was skipped without an update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: SymNet<T>,
    pub sgd: Sgd<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = SymNet::init(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(EPISODE_STREAM);
        Ok(Self::from_parts(model, rng, 0))
    }

    pub fn from_parts(model: SymNet<T>, rng: ChaCha8Rng, step: u64) -> Self {
        let cfg = &model.cfg;
        let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, model.store.len());
        sgd.clip = cfg.grad_clip;
        Self { model, sgd, rng, step }
    }

    /// Forward, backward and one optimizer update on `ep`.
    pub fn step_on(&mut self, ep: &Episode<T>) -> Result<StepMetrics> {
        self.step += 1;
        let (mut metrics, grads) = {
            let mut tape = Tape::new();
            let bound = self.model.store.bind(&mut tape)?;
            let (_, terms) = self.model.losses(&mut tape, &bound, ep)?;
            let scalar = |v| tape.value(v).item().to_f64_lossy();
            let metrics = StepMetrics {
                step: self.step,
                class_id: ep.class_id,
                co_triple: terms.co_triple.map_or(0.0, scalar),
                inter_seg: scalar(terms.inter),
                final_seg: scalar(terms.final_seg),
                total: scalar(terms.total),
                grad_norm: 0.0,
                skipped: None,
            };
            if !metrics.total.is_finite() {
                return Err(Error::Tensor(TensorError::NonFinite { op: "total_loss" }));
            }
            let mut g = tape.backward(terms.total)?;
            let grads: Vec<_> = self.model.store.ids().map(|id| g.take(bound.var(id))).collect();
            (metrics, grads)
        };
        metrics.grad_norm = self.sgd.step(&mut self.model.store, grads);
        Ok(metrics)
    }

    /// Samples and trains on `steps` episodes, reporting each to `sink`.
    ///
    /// Episodes whose support foreground vanishes at feature resolution are
    /// skipped and logged. A non-finite loss dumps the episode under `dump_dir`.
    pub fn run(
        &mut self,
        data: &Dataset,
        split: &SplitConfig,
        steps: u64,
        dump_dir: Option<&Path>,
        mut sink: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let k = self.model.cfg.k;
        for _ in 0..steps {
            let ep: Episode<T> = sample_episode(data, split, Mode::Train, k, &mut self.rng)?;
            let metrics = match self.step_on(&ep) {
                Ok(m) => m,
                Err(Error::EmptyForeground(h, w)) => {
                    log::warn!("step {}: support foreground empty at {h}x{w}, episode skipped", self.step);
                    StepMetrics {
                        step: self.step,
                        class_id: ep.class_id,
                        co_triple: 0.0,
                        inter_seg: 0.0,
                        final_seg: 0.0,
                        total: 0.0,
                        grad_norm: 0.0,
                        skipped: Some("empty support foreground".into()),
                    }
                }
                Err(Error::Tensor(TensorError::NonFinite { op })) => {
                    let dir = dump_dir.map_or_else(std::env::temp_dir, Path::to_path_buf);
                    let dump = dir.join(format!("nonfinite_step{}", self.step));
                    ep.dump(&dump)?;
                    log::error!("step {}: non-finite value in {op}; episode dumped to {}", self.step, dump.display());
                    return Err(Error::NonFiniteLoss { step: self.step, dump });
                }
                Err(e) => return Err(e),
            };
            sink(self, &metrics)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let store = &self.model.store;
        let mut records: Vec<(String, Tensor<T>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        records.push((TEXT_RECORD.to_string(), self.model.text.table()));
        for (id, v) in store.ids().zip(&self.sgd.velocity) {
            if let Some(v) = v {
                records.push((format!("{MOMENTUM_PREFIX}{}", store.name(id)), v.clone()));
            }
        }
        Checkpoint {
            config: self.model.cfg.clone(),
            step: self.step,
            class_names: self.model.text.names().to_vec(),
            rng: RngState::capture(&self.rng),
            records,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut t = Self::from_parts(model, ck.rng.restore(), ck.step);
        for (name, v) in &ck.records {
            if let Some(param) = name.strip_prefix(MOMENTUM_PREFIX) {
                let id = t
                    .model
                    .store
                    .id(param)
                    .ok_or_else(|| Error::NotFound(format!("momentum for unknown parameter {param}")))?;
                if v.shape() != t.model.store.get(id).shape() {
                    return Err(Error::InvalidArgument(format!("momentum {param} has shape {:?}", v.shape())));
                }
                let idx = t.model.store.ids().position(|i| i == id).expect("known id");
                t.sgd.velocity[idx] = Some(v.clone());
            }
        }
        Ok(t)
    }
}

/// Rebuilds a model and overwrites every parameter from the checkpoint.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<SymNet<T>> {
    let table = ck
        .record(TEXT_RECORD)
        .ok_or_else(|| Error::NotFound("checkpoint has no text embeddings".into()))?;
    let [n, d] = *table.shape() else {
        return Err(Error::InvalidArgument(format!("text table shape {:?}", table.shape())));
    };
    if ck.class_names.len() != n {
        return Err(Error::InvalidArgument(format!("{} class names for {n} embedding rows", ck.class_names.len())));
    }
    let rows = (0..n)
        .map(|i| Tensor::vector(table.data()[i * d..(i + 1) * d].to_vec()))
        .collect();
    let text = TextEmbeddings::from_rows(ck.class_names.clone(), rows)?;
    // initial values are overwritten below; any seed gives the same layout
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SymNet::with_text(&ck.config, text, &mut rng)?;
    let mut seen = 0;
    for (name, value) in &ck.records {
        if name == TEXT_RECORD || name.starts_with(MOMENTUM_PREFIX) {
            continue;
        }
        model.store.assign(name, value.clone())?;
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(Error::NotFound(format!(
            "checkpoint holds {seen} of the model's {} parameters",
            model.store.len()
        )));
    }
    Ok(model)
}

/// Training outputs written under the run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains from scratch (or resumes `trainer`) to `cfg.steps`, writing
/// `metrics.jsonl`, periodic `step_N.symn` and `final.symn` under `out`.
pub fn train_to_dir<T: Real>(trainer: &mut Trainer<T>, data: &Dataset, out: &Path) -> Result<RunPaths> {
    fs::create_dir_all(out)?;
    let cfg = trainer.model.cfg.clone();
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let metrics_path = out.join("metrics.jsonl");
    let file = if trainer.step == 0 {
        File::create(&metrics_path)?
    } else {
        File::options().append(true).create(true).open(&metrics_path)?
    };
    let mut log = BufWriter::new(file);
    let remaining = cfg.steps.saturating_sub(trainer.step);
    trainer.run(data, &split, remaining, Some(out), |t, m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        if cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            t.checkpoint().save(&out.join(format!("step_{}.symn", t.step)))?;
        }
        if t.step % 50 == 0 {
            log::info!("step {} total {:.4}", m.step, m.total);
        }
        Ok(())
    })?;
    log.flush()?;
    let final_checkpoint = out.join("final.symn");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(RunPaths {
        metrics: metrics_path,
        final_checkpoint,
    })
}
