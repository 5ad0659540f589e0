//! Shape-only vs saliency-only vs assembled masks on low- and high-overlap
//! synthetic suites.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_suite, Scene, SceneConfig};
use crate::decode::Detection;
use crate::error::Result;
use crate::eval::ApReport;
use crate::losses::Ablation;
use crate::model::{ModelParams, SaliencyMode};
use crate::pipeline::{evaluate, train_run, Trainer, TrainingData};
use crate::render::{overlay, save_png, side_by_side};
use crate::checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training setup shared by all modes; its ablation field is overridden.
    pub run: RunConfig,
    pub test_scenes: usize,
    pub low_overlap: SceneConfig,
    pub high_overlap: SceneConfig,
    /// High-overlap scenes drawn as side-by-side overlays.
    pub overlays: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.model.saliency_mode = SaliencyMode::ClassAgnostic;
        // Objects here span 5-13 feature cells, so S=32 would be finer than
        // the saliency grid. S=8 keeps the local shape the coarse branch.
        run.model.shape_size = 8;
        run.data.scene.overlap_level = 0.5;
        run.data.scene.num_objects = (1, 5);
        run.data.eval_scenes = 0;
        let low_overlap = SceneConfig {
            overlap_level: 0.0,
            num_objects: (1, 3),
            seed: 2_000_000,
            ..SceneConfig::default()
        };
        let high_overlap = SceneConfig {
            overlap_level: 0.9,
            num_objects: (3, 5),
            seed: 3_000_000,
            ..SceneConfig::default()
        };
        AblationConfig {
            run,
            test_scenes: 200,
            low_overlap,
            high_overlap,
            overlays: 4,
        }
    }
}

impl AblationConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))
    }

    fn run_for(&self, mode: Ablation, out_dir: &Path) -> RunConfig {
        let mut run = self.run.clone();
        run.loss.ablation = mode;
        run.decode.ablation = mode;
        run.out_dir = out_dir.join(mode.name());
        run
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Ablation,
    pub suite: String,
    pub report: ApReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, mode: Ablation, suite: &str) -> Option<&ApReport> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.suite == suite)
            .map(|r| &r.report)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| suite | mode | AP | AP50 | AP75 |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let o = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
            s += &format!(
                "| {} | {} | {:.4} | {} | {} |\n",
                r.suite,
                r.mode.name(),
                r.report.ap,
                o(r.report.ap50),
                o(r.report.ap75)
            );
        }
        s
    }
}

/// Trains one mode, or loads `<out_dir>/<mode>/final.ckpt` when present and
/// `reuse` is set.
pub fn train_mode(cfg: &AblationConfig, mode: Ablation, out_dir: &Path, reuse: bool) -> Result<ModelParams<f32>> {
    let run = cfg.run_for(mode, out_dir);
    let existing = run.out_dir.join("final.ckpt");
    if reuse && existing.exists() {
        log::info!("reusing {}", existing.display());
        return Ok(checkpoint::load(&existing)?.params);
    }
    let data = TrainingData::from_run(&run)?;
    let trainer = Trainer::new(run.clone(), data)?;
    let summary = train_run(trainer)?;
    Ok(checkpoint::load(&summary.final_checkpoint)?.params)
}

fn gt_detections(scene: &Scene) -> Vec<Detection> {
    scene
        .instances
        .iter()
        .map(|g| Detection {
            class_id: g.class_id,
            score: 1.0,
            center: g.center,
            bbox: g.bbox,
            mask: g.mask.clone(),
        })
        .collect()
}

/// Scores already-trained models on both suites and writes the table,
/// JSON report and overlays under `out_dir`.
pub fn compare(cfg: &AblationConfig, models: &[(Ablation, ModelParams<f32>)], out_dir: &Path) -> Result<AblationReport> {
    fs::create_dir_all(out_dir.join("overlays"))?;
    let suites = [
        ("low-overlap", generate_suite(&cfg.low_overlap, cfg.test_scenes)?),
        ("high-overlap", generate_suite(&cfg.high_overlap, cfg.test_scenes)?),
    ];
    let mut rows = Vec::new();
    let mut panels: Vec<Vec<image::RgbImage>> = Vec::new();
    for (suite, scenes) in &suites {
        for (mode, params) in models {
            let mut decode = cfg.run.decode.clone();
            decode.ablation = *mode;
            let (report, dets) = evaluate(params, scenes, &decode, &cfg.run.eval)?;
            log::info!("{suite} {}: AP {:.4} AP50 {:?}", mode.name(), report.ap, report.ap50);
            if *suite == "high-overlap" {
                for (i, scene) in scenes.iter().take(cfg.overlays).enumerate() {
                    if panels.len() <= i {
                        let n = params.config().num_classes;
                        panels.push(vec![overlay(&scene.image, &gt_detections(scene), n, 0.0)]);
                    }
                    panels[i].push(overlay(&scene.image, &dets[i], params.config().num_classes, 0.3));
                }
            }
            rows.push(AblationRow {
                mode: *mode,
                suite: suite.to_string(),
                report,
            });
        }
    }
    for (i, p) in panels.iter().enumerate() {
        save_png(&side_by_side(p), &out_dir.join("overlays").join(format!("high-{i:02}.png")))?;
    }
    let report = AblationReport { rows };
    fs::write(out_dir.join("ablation.md"), report.to_markdown())?;
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Trains (or reuses) all three modes and compares them.
pub fn run_ablation(cfg: &AblationConfig, out_dir: &Path, reuse: bool) -> Result<AblationReport> {
    let mut models = Vec::new();
    for mode in Ablation::ALL {
        models.push((mode, train_mode(cfg, mode, out_dir, reuse)?));
    }
    compare(cfg, &models, out_dir)
}

pub fn overlay_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("overlays")
}
