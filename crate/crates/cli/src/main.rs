use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use centermask::ablation::{run_ablation, AblationConfig};
use centermask::checkpoint;
use centermask::config::RunConfig;
use centermask::data::{export_dataset, generate_suite, load_dataset, load_image, Scene};
use centermask::decode::{read_detections, write_detections, DetectionRecord};
use centermask::eval::match_and_score;
use centermask::losses::Ablation;
use centermask::model::SaliencyMode;
use centermask::pipeline::{infer, train_run, Trainer, TrainingData};
use centermask::render::{overlay, save_png};

#[derive(Parser)]
#[command(name = "centermask", version, about = "Single-shot instance segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and score it on held-out scenes.
    Train(TrainArgs),
    /// Decode detections for images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a detections file against a dataset.
    Eval(EvalArgs),
    /// Train shape-only, saliency-only and full models and compare them.
    Ablate(AblateArgs),
    /// Draw ground truth or detections over dataset images.
    Render(RenderArgs),
    /// Export synthetic scenes as a dataset directory.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    ShapeOnly,
    SaliencyOnly,
}

impl From<ModeArg> for Ablation {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Ablation::Full,
            ModeArg::ShapeOnly => Ablation::ShapeOnly,
            ModeArg::SaliencyOnly => Ablation::SaliencyOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SaliencyArg {
    Agnostic,
    Specific,
}

#[derive(Args)]
struct RunOverrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum)]
    ablation: Option<ModeArg>,
    #[arg(long, value_enum)]
    saliency_mode: Option<SaliencyArg>,
    #[arg(long)]
    shape_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunOverrides {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(s) = self.steps {
            run.optim.steps = s;
        }
        if let Some(a) = self.ablation {
            run.loss.ablation = a.into();
            run.decode.ablation = a.into();
        }
        if let Some(m) = self.saliency_mode {
            run.model.saliency_mode = match m {
                SaliencyArg::Agnostic => SaliencyMode::ClassAgnostic,
                SaliencyArg::Specific => SaliencyMode::ClassSpecific,
            };
        }
        if let Some(s) = self.shape_size {
            run.model.shape_size = s;
        }
        if let Some(o) = &self.out {
            run.out_dir = o.clone();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory, directory of PNGs, or a single image.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "infer-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 0.4)]
    mask_threshold: f64,
    #[arg(long, value_enum)]
    ablation: Option<ModeArg>,
    /// Also write PNG overlays.
    #[arg(long)]
    overlays: bool,
    /// Minimum score drawn in overlays.
    #[arg(long, default_value_t = 0.3)]
    overlay_score: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML ablation configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    shape_size: Option<usize>,
    #[arg(long, default_value = "ablation-out")]
    out: PathBuf,
    /// Reuse finished checkpoints under the output directory.
    #[arg(long)]
    reuse: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Draw these detections instead of the ground truth.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value = "render-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    min_score: f64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let trainer = match &args.resume {
        Some(ckpt) => {
            let run = checkpoint::load(ckpt)?.run;
            let data = TrainingData::from_run(&run)?;
            let mut t = Trainer::resume(ckpt, data)?;
            args.run.apply(&mut t.run);
            t.run.validate()?;
            t
        }
        None => {
            let mut run = load_run(args.run.config.as_deref())?;
            args.run.apply(&mut run);
            run.validate()?;
            let data = TrainingData::from_run(&run)?;
            Trainer::new(run, data)?
        }
    };
    let summary = train_run(trainer)?;
    println!("trained {} steps -> {}", summary.steps, summary.final_checkpoint.display());
    println!("{}", summary.heldout);
    Ok(())
}

/// Named images: a dataset directory, a directory of PNGs, or one file.
fn load_inputs(path: &Path) -> Result<Vec<(String, centermask::Tensor<f32>)>> {
    if path.join("annotations.jsonl").exists() {
        return load_dataset(path)?
            .map(|s| s.map(|s| (s.id, s.image)).map_err(Into::into))
            .collect();
    }
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, load_image(&p).with_context(|| format!("reading {}", p.display()))?))
        })
        .collect()
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut decode = ck.run.decode.clone();
    decode.top_k = args.top_k;
    decode.mask_threshold = args.mask_threshold;
    if let Some(a) = args.ablation {
        decode.ablation = a.into();
    }
    decode.validate()?;
    let inputs = load_inputs(&args.images)?;
    fs::create_dir_all(&args.out)?;
    if args.overlays {
        fs::create_dir_all(args.out.join("overlays"))?;
    }
    let mut records = Vec::new();
    let n_classes = ck.params.config().num_classes;
    for (id, image) in &inputs {
        let decoded = infer(&ck.params, image, &decode).with_context(|| format!("image {id}"))?;
        if decoded.dropped > 0 {
            log::info!("{id}: {} candidates outside the image dropped", decoded.dropped);
        }
        records.extend(decoded.detections.iter().map(|d| DetectionRecord::new(id, d)));
        if args.overlays {
            let img = overlay(image, &decoded.detections, n_classes, args.overlay_score);
            save_png(&img, &args.out.join("overlays").join(format!("{id}.png")))?;
        }
    }
    let path = args.out.join("detections.jsonl");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    write_detections(&mut w, &records)?;
    println!("{} detections for {} images -> {}", records.len(), inputs.len(), path.display());
    Ok(())
}

fn group_detections(
    records: Vec<DetectionRecord>,
    scenes: &[Scene],
) -> Result<Vec<Vec<centermask::decode::Detection>>> {
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out = vec![Vec::new(); scenes.len()];
    for r in records {
        let Some(&i) = index.get(r.image_id.as_str()) else {
            bail!("detection for unknown image `{}`", r.image_id);
        };
        out[i].push(r.to_detection()?);
    }
    Ok(out)
}

fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_detections(BufReader::new(f), path)?)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scenes: Vec<Scene> = load_dataset(&args.dataset)?.collect::<centermask::Result<_>>()?;
    let dets = group_detections(read_records(&args.detections)?, &scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    let num_classes = gts
        .iter()
        .flatten()
        .map(|g| g.class_id + 1)
        .chain(dets.iter().flatten().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(1);
    let report = match_and_score(&dets, &gts, num_classes, &Default::default())?;
    println!("{report}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => AblationConfig::from_toml_file(p)?,
        None => AblationConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.run.optim.steps = s;
    }
    if let Some(s) = args.shape_size {
        cfg.run.model.shape_size = s;
    }
    cfg.run.validate()?;
    let report = run_ablation(&cfg, &args.out, args.reuse)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let scenes: Vec<Scene> = load_dataset(&args.dataset)?.collect::<centermask::Result<_>>()?;
    let dets = match &args.detections {
        Some(p) => group_detections(read_records(p)?, &scenes)?,
        None => scenes
            .iter()
            .map(|s| {
                s.instances
                    .iter()
                    .map(|g| centermask::decode::Detection {
                        class_id: g.class_id,
                        score: 1.0,
                        center: g.center,
                        bbox: g.bbox,
                        mask: g.mask.clone(),
                    })
                    .collect()
            })
            .collect(),
    };
    let n_classes = scenes
        .iter()
        .flat_map(|s| &s.instances)
        .map(|g| g.class_id + 1)
        .max()
        .unwrap_or(1);
    fs::create_dir_all(&args.out)?;
    for (scene, d) in scenes.iter().zip(&dets) {
        let img = overlay(&scene.image, d, n_classes, args.min_score);
        save_png(&img, &args.out.join(format!("{}.png", scene.id)))?;
    }
    println!("{} overlays -> {}", scenes.len(), args.out.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut run = load_run(args.config.as_deref())?;
    if let Some(s) = args.seed {
        run.data.scene.seed = s;
    }
    let scenes = generate_suite(&run.data.scene, args.count)?;
    export_dataset(&scenes, &args.out)?;
    println!("{} scenes -> {}", scenes.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = centermask::init_threads_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Render(a) => cmd_render(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
