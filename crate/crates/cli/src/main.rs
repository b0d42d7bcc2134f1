//! `mvad` — multi-view anomaly detection for point clouds.
//!
//! Subcommands cover the whole pipeline: synthesize a benchmark, render
//! depth views, train prompts, score clouds, evaluate splits, sweep the
//! view count and export colored visualizations. Every run writes a
//! reproducibility stamp (config hash + seed) next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mvad_core::data;
use mvad_core::encoder::Checkpoint;
use mvad_core::geometry::normalize_cloud;
use mvad_core::pipeline::{self, ModelState};
use mvad_core::rendering::{coverage, export_views_png, render_all};
use mvad_core::training;
use mvad_core::RunConfig;

#[derive(Parser)]
#[command(name = "mvad", version, about = "Zero-shot point cloud anomaly detection via multi-view depth projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text config file of `key = value` lines (# comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set views=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic zero-shot benchmark on disk.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render clouds to per-view depth/mask PNGs.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Cloud files (.ply/.xyz).
        #[arg(required = true)]
        clouds: Vec<PathBuf>,
    },
    /// Train prompt parameters on the train split of a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest (as written by `synth`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one cloud with a trained checkpoint.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate (train|test).
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric/coverage/runtime table across view counts.
    SweepViews {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated view counts, e.g. 1,3,5,7,9.
        #[arg(long, default_value = "1,3,5,7,9")]
        views: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a cloud as colored PLY from a score file.
    Viz {
        #[arg(long)]
        cloud: PathBuf,
        /// Per-point scores, one per line.
        #[arg(long)]
        scores: PathBuf,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_synth(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let split = data::generate(&cfg.seeded_synth())?;
    let manifest = data::save_dataset(&split, out)?;
    cfg.write_stamp(out)?;
    println!(
        "wrote {} train + {} test clouds; manifest at {}",
        split.train.len(),
        split.test.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_render(config: &ConfigArgs, out: &Path, clouds: &[PathBuf]) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let rig = cfg.settings.rig(&cfg.encoder)?;
    let mut manifest = String::from("# cloud\tviews\tcoverage\n");
    for path in clouds {
        let cloud = data::load_cloud(path)?;
        let normalized = normalize_cloud(&cloud);
        let rendered = render_all(&normalized, &rig, cfg.settings.splat_radius)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cloud")
            .to_string();
        export_views_png(&rendered, out, &id)?;
        manifest.push_str(&format!(
            "{id}\t{}\t{:.6}\n",
            rendered.n_views(),
            coverage(&rendered, cloud.len())
        ));
    }
    write_atomic(&out.join("render_manifest.tsv"), manifest.as_bytes())?;
    cfg.write_stamp(out)?;
    println!("rendered {} cloud(s) into {}", clouds.len(), out.display());
    Ok(())
}

fn cmd_train(config: &ConfigArgs, data_path: &Path, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let split = data::load_dataset(data_path)?;
    if split.train.is_empty() {
        bail!("dataset at {} has no train split", data_path.display());
    }
    let state = cfg.init_model()?;
    let result = training::train(
        &split.train,
        &state.backbone,
        &state.banks,
        &cfg.settings,
        &cfg.seeded_train(),
    )?;

    let mut log = String::from("# step iou focal ce total\n");
    for (step, l) in &result.step_log {
        log.push_str(&format!("{step} {} {} {} {}\n", l.iou, l.focal, l.ce, l.total));
    }
    write_atomic(&out.join("train_log.txt"), log.as_bytes())?;

    for (epoch, banks) in result.epoch_banks.iter().enumerate() {
        let ckpt = Checkpoint {
            config: cfg.encoder.clone(),
            backbone_seed: cfg.backbone_seed,
            banks: banks.clone(),
        };
        ckpt.save(&out.join(format!("epoch_{epoch}.ckpt")))?;
    }
    let final_ckpt = Checkpoint {
        config: cfg.encoder.clone(),
        backbone_seed: cfg.backbone_seed,
        banks: result.banks.clone(),
    };
    final_ckpt.save(&out.join("model.ckpt"))?;
    cfg.write_stamp(out)?;
    println!(
        "trained {} epochs on {} clouds; final mean loss {:.6}",
        cfg.train.epochs,
        split.train.len(),
        result.epoch_mean_loss.last().unwrap()
    );
    Ok(())
}

fn cmd_score(config: &ConfigArgs, checkpoint: &Path, cloud_path: &Path, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = ModelState::from_checkpoint(&ckpt)?;
    let cloud = data::load_cloud(cloud_path)?;
    let result = pipeline::score_cloud(&state, &cfg.settings, &cloud)?;

    let mut scores = String::with_capacity(result.map.len() * 20);
    for v in &result.map {
        scores.push_str(&format!("{v}\n"));
    }
    write_atomic(&out.join("scores.txt"), scores.as_bytes())?;
    let summary = format!(
        "object_score = {}\npoints = {}\ncloud = {}\n",
        result.score,
        result.map.len(),
        cloud_path.display()
    );
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    cfg.write_stamp(out)?;
    println!("object score {:.6} over {} points", result.score, result.map.len());
    Ok(())
}

fn load_split_clouds(
    data_path: &Path,
    split: &str,
) -> Result<Vec<mvad_core::geometry::PointCloud>> {
    let ds = data::load_dataset(data_path)?;
    Ok(match split {
        "train" => ds.train,
        "test" => ds.test,
        other => bail!("unknown split `{other}` (expected train|test)"),
    })
}

fn cmd_eval(
    config: &ConfigArgs,
    checkpoint: &Path,
    data_path: &Path,
    split: &str,
    out: &Path,
) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = ModelState::from_checkpoint(&ckpt)?;
    let clouds = load_split_clouds(data_path, split)?;
    if clouds.is_empty() {
        bail!("split `{split}` of {} is empty", data_path.display());
    }
    let report = pipeline::evaluate_split(&state, &cfg.settings, &clouds)?;
    write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
    write_atomic(&out.join("report.kv"), report.to_kv().as_bytes())?;
    cfg.write_stamp(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_sweep(
    config: &ConfigArgs,
    checkpoint: &Path,
    data_path: &Path,
    views: &str,
    out: &Path,
) -> Result<()> {
    let cfg = config.load()?;
    ensure_dir(out)?;
    let k_list: Vec<usize> = views
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad view count `{s}`")))
        .collect::<Result<_>>()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = ModelState::from_checkpoint(&ckpt)?;
    let clouds = load_split_clouds(data_path, "test")?;
    let rows = pipeline::sweep_views(&state, &cfg.settings, &clouds, &k_list)?;
    let table = pipeline::sweep_table(&rows);
    write_atomic(&out.join("sweep.txt"), table.as_bytes())?;
    cfg.write_stamp(out)?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(cloud_path: &Path, scores_path: &Path, out: &Path) -> Result<()> {
    let cloud = data::load_cloud(cloud_path)?;
    let text = fs::read_to_string(scores_path)
        .with_context(|| format!("reading {}", scores_path.display()))?;
    let map: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().with_context(|| format!("bad score `{l}`")))
        .collect::<Result<_>>()?;
    data::export_colored(&cloud, &map, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    pipeline::init_thread_pool_from_env();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { config, out } => cmd_synth(config, out),
        Command::Render { config, out, clouds } => cmd_render(config, out, clouds),
        Command::Train { config, data, out } => cmd_train(config, data, out),
        Command::Score {
            config,
            checkpoint,
            cloud,
            out,
        } => cmd_score(config, checkpoint, cloud, out),
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(config, checkpoint, data, split, out),
        Command::SweepViews {
            config,
            checkpoint,
            data,
            views,
            out,
        } => cmd_sweep(config, checkpoint, data, views, out),
        Command::Viz { cloud, scores, out } => cmd_viz(cloud, scores, out),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
