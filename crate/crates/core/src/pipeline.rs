//! Training runs, inference and scoring over scene collections.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_scene, generate_suite, load_dataset, Scene, SceneConfig};
use crate::decode::{decode_instances, DecodeConfig, Decoded, Detection};
use crate::error::{Error, Result};
use crate::eval::{match_and_score, ApReport, EvalConfig};
use crate::losses::LossBreakdown;
use crate::model::{build_model, forward, ModelParams};
use crate::train::{batch_indices, TrainState};

/// Where training images come from.
pub enum TrainingData {
    /// Scene `i` is generated from seed `cfg.seed + i` when drawn.
    Synthetic { cfg: SceneConfig, count: usize },
    Fixed(Vec<Scene>),
}

impl TrainingData {
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        match &run.data.dataset {
            Some(dir) => {
                let scenes: Vec<Scene> = load_dataset(dir)?.collect::<Result<_>>()?;
                if scenes.is_empty() {
                    return Err(Error::Config(format!("dataset {} has no images", dir.display())));
                }
                Ok(TrainingData::Fixed(scenes))
            }
            None => Ok(TrainingData::Synthetic {
                cfg: run.data.scene.clone(),
                count: run.data.train_scenes,
            }),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainingData::Synthetic { count, .. } => *count,
            TrainingData::Fixed(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scenes(&self, indices: &[usize]) -> Result<Vec<std::borrow::Cow<'_, Scene>>> {
        use std::borrow::Cow;
        match self {
            TrainingData::Synthetic { cfg, .. } => indices
                .par_iter()
                .map(|&i| generate_scene(cfg, cfg.seed + i as u64).map(Cow::Owned))
                .collect(),
            TrainingData::Fixed(s) => Ok(indices.iter().map(|&i| Cow::Borrowed(&s[i])).collect()),
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub skipped: usize,
}

pub struct Trainer {
    pub run: RunConfig,
    pub state: TrainState,
    data: TrainingData,
    metrics: Option<BufWriter<fs::File>>,
}

impl Trainer {
    /// Fresh parameters from `run.seed`.
    pub fn new(run: RunConfig, data: TrainingData) -> Result<Self> {
        run.validate()?;
        if data.is_empty() {
            return Err(Error::Config("no training data".into()));
        }
        let params = build_model(run.model.clone(), run.seed)?;
        let state = TrainState::new(params, &run.optim);
        Ok(Trainer {
            run,
            state,
            data,
            metrics: None,
        })
    }

    /// Continues from a checkpoint with optimizer state.
    pub fn resume(path: &Path, data: TrainingData) -> Result<Self> {
        let (run, state) = checkpoint::load(path)?.into_state()?;
        run.validate()?;
        Ok(Trainer {
            run,
            state,
            data,
            metrics: None,
        })
    }

    /// Appends one record per step to `path`.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.metrics = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.state.params
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.run.optim.steps
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let idx = batch_indices(self.run.seed, step, self.data.len(), self.run.optim.batch_size);
        let scenes = self.data.scenes(&idx)?;
        let batch: Vec<_> = scenes.iter().map(|s| (&s.image, &s.instances[..])).collect();
        let lr = self.run.optim.lr_at(step);
        let (loss, skipped) = self.state.step(&batch, &self.run.loss, &self.run.optim)?;
        let rec = StepRecord {
            step,
            lr,
            loss,
            skipped,
        };
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_state(path, &self.run, &self.state)
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.ckpt"))
}

/// Summary of a finished `train` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub heldout: ApReport,
}

/// Trains to `run.optim.steps`, checkpointing on the configured cadence, then
/// scores a held-out synthetic range. A non-finite loss stops the run and
/// leaves the last good checkpoint in place.
pub fn train_run(mut trainer: Trainer) -> Result<TrainSummary> {
    let out = trainer.run.out_dir.clone();
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::write(out.join("config.toml"), trainer.run.to_toml()?)?;
    trainer.log_to(&out.join("metrics.jsonl"))?;
    let every = trainer.run.optim.checkpoint_every;
    let started = std::time::Instant::now();
    while !trainer.done() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                log::error!("step {} failed: {e}; last good checkpoint kept", trainer.state.step);
                return Err(e);
            }
        };
        let done = trainer.state.step;
        if done.is_multiple_of(trainer.run.optim.log_every) || done == 1 {
            log::info!(
                "step {done}/{} loss {:.4} (center {:.4} mask {:.4}) {:.1}s",
                trainer.run.optim.steps,
                rec.loss.l_seg,
                rec.loss.l_p,
                rec.loss.l_mask,
                started.elapsed().as_secs_f64()
            );
        }
        if done.is_multiple_of(every) {
            trainer.save(&checkpoint_path(&out, done))?;
        }
    }
    let final_checkpoint = out.join("final.ckpt");
    trainer.save(&final_checkpoint)?;

    let run = &trainer.run;
    let heldout = if run.data.eval_scenes > 0 {
        let cfg = SceneConfig {
            seed: run.data.scene.seed + run.data.eval_seed_offset,
            ..run.data.scene.clone()
        };
        let scenes = generate_suite(&cfg, run.data.eval_scenes)?;
        evaluate(trainer.params(), &scenes, &run.decode, &run.eval)?.0
    } else {
        evaluate(trainer.params(), &[], &run.decode, &run.eval)?.0
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&heldout)?)?;
    Ok(TrainSummary {
        steps: trainer.state.step,
        final_checkpoint,
        heldout,
    })
}

/// Decoded instances for one image.
pub fn infer(params: &ModelParams<f32>, scene_image: &crate::tensor::Tensor<f32>, cfg: &DecodeConfig) -> Result<Decoded> {
    let out = forward(params, scene_image)?;
    decode_instances(&out, params.config(), cfg)
}

/// Runs inference over `scenes` and scores the result against their
/// instances.
pub fn evaluate(
    params: &ModelParams<f32>,
    scenes: &[Scene],
    decode: &DecodeConfig,
    eval: &EvalConfig,
) -> Result<(ApReport, Vec<Vec<Detection>>)> {
    let dets: Vec<Vec<Detection>> = scenes
        .par_iter()
        .map(|s| infer(params, &s.image, decode).map(|d| d.detections))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    let report = match_and_score(&dets, &gts, params.config().num_classes, eval)?;
    Ok((report, dets))
}
