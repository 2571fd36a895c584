use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use kpr::checkpoint::{self, LoadedModel};
use kpr::config::RunConfig;
use kpr::datamodel::io::{load_dataset, save_dataset};
use kpr::datamodel::sequence::{crossing_sequence, CrossingConfig};
use kpr::datamodel::{generate_synthetic_dataset, DatasetSplit, SplitName};
use kpr::retrieval::{prompt_robustness_sweep, write_sweep_csv, EvalReport, GalleryIndex};
use kpr::tracker::io::{
    group_by_frame, read_detections, read_ground_truth, write_detections, write_ground_truth, write_keypoint_sidecar,
    write_mot_csv,
};
use kpr::tracker::{as_labeled, track_sequence, tracking_metrics, Frame, TrackerConfig};
use kpr::train::{ablate, evaluate_split, train, Axis};

#[derive(Parser)]
#[command(name = "kpr", version, about = "Keypoint-promptable re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset, optionally with crossing sequences for tracking.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of two-person crossing sequences to write under OUT/crossings.
        #[arg(long, default_value_t = 0)]
        crossings: usize,
    },
    /// Train a model; writes the checkpoint, step log and an evaluation report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; a synthetic dataset is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rank-1 and mAP as query prompt keypoints are randomly removed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        fractions: Vec<f64>,
    },
    /// Train and evaluate the full model plus one model per removed component.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of pbh, msf, pos_prompt, neg_prompt, bipo.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
    },
    /// Track people through a sequence directory (frames/, detections.jsonl,
    /// optional gt.csv).
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Embed detections without their keypoint prompts.
        #[arg(long)]
        no_prompts: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<DatasetSplit> {
    match data.or(cfg.dataset_root.as_deref()) {
        Some(root) => Ok(load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?),
        None => {
            log::info!("no dataset given; generating one from the configuration");
            Ok(generate_synthetic_dataset(&cfg.synth_config())?)
        }
    }
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(c.out.clone())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    checkpoint::load(path, DType::F32).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_report(r: &EvalReport) {
    println!(
        "rank-1 {:.3}  rank-5 {:.3}  mAP {:.3}  multi-person rank-1 {:.3}  ({} queries)",
        r.rank1, r.rank5, r.map, r.multi_person.rank1, r.num_queries
    );
}

fn synth(common: &Common, crossings: usize) -> Result<()> {
    let cfg = run_config(common)?;
    let out = out_dir(common)?;
    let data = generate_synthetic_dataset(&cfg.synth_config())?;
    save_dataset(&data, &out)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    if crossings == 0 {
        return Ok(());
    }
    let ids: Vec<u32> = data.identities(SplitName::Query).into_iter().collect();
    if ids.len() < 2 {
        bail!("crossing sequences need at least two query identities");
    }
    let ccfg = CrossingConfig { appearance_seed: cfg.seed, ..CrossingConfig::default() };
    for s in 0..crossings {
        let (a, b) = (ids[(2 * s) % ids.len()], ids[(2 * s + 1) % ids.len()]);
        let seq = crossing_sequence(&ccfg, a, b, cfg.seed.wrapping_add(100 + s as u64))?;
        let dir = out.join("crossings").join(format!("seq_{s:03}"));
        let frames = dir.join("frames");
        fs::create_dir_all(&frames)?;
        for (t, img) in seq.frames.iter().enumerate() {
            img.save(frames.join(format!("{t:06}.png")))?;
        }
        let dets: Vec<_> = seq.detections.iter().flatten().cloned().collect();
        write_detections(&dets, fs::File::create(dir.join("detections.jsonl"))?)?;
        write_ground_truth(&seq.ground_truth, fs::File::create(dir.join("gt.csv"))?)?;
    }
    println!("wrote {crossings} crossing sequences to {}", out.join("crossings").display());
    Ok(())
}

fn train_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = run_config(common)?;
    let out = out_dir(common)?;
    let split = dataset(&cfg, data)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let outcome = train(&cfg, &split.train, Some(&out))?;
    if let Some(last) = outcome.epoch_means.last() {
        println!("trained {} epochs, final epoch mean loss {last:.4}", outcome.epoch_means.len());
    }
    let report = evaluate_split(&outcome.model, &split, cfg.batch_size)?;
    write_json(&out.join("eval.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn eval_cmd(common: &Common, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let out = out_dir(common)?;
    let m = load_model(ckpt)?;
    let split = dataset(&m.meta.config, data)?;
    let report = evaluate_split(&m.model, &split, m.meta.config.batch_size)?;
    write_json(&out.join("eval.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn sweep_cmd(common: &Common, ckpt: &Path, data: Option<&Path>, fractions: &[f64]) -> Result<()> {
    let out = out_dir(common)?;
    let m = load_model(ckpt)?;
    let split = dataset(&m.meta.config, data)?;
    let bs = m.meta.config.batch_size;
    let index = GalleryIndex::build(&m.model, &split.gallery, bs)?;
    let seed = common.seed.unwrap_or(m.meta.config.seed);
    let rows = prompt_robustness_sweep(&m.model, &split.query, &index, fractions, seed, bs)?;
    write_sweep_csv(&rows, out.join("sweep.csv"))?;
    for r in &rows {
        println!("dropout {:.2}: rank-1 {:.3}  mAP {:.3}", r.fraction, r.rank1, r.map);
    }
    Ok(())
}

fn ablate_cmd(common: &Common, data: Option<&Path>, axes: &[String]) -> Result<()> {
    let cfg = run_config(common)?;
    let axes = axes.iter().filter(|a| !a.trim().is_empty()).map(|a| a.trim().parse()).collect::<kpr::Result<Vec<Axis>>>()?;
    let out = out_dir(common)?;
    let split = dataset(&cfg, data)?;
    let rows = ablate(&cfg, &axes, &split)?;
    write_json(&out.join("ablation.json"), &rows)?;
    println!("{:<14} {:>7} {:>7} {:>9}", "row", "rank-1", "mAP", "mp rank-1");
    for r in &rows {
        println!("{:<14} {:>7.3} {:>7.3} {:>9.3}", r.label, r.rank1, r.map, r.multi_person_rank1);
    }
    Ok(())
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn track_cmd(common: &Common, ckpt: &Path, seq: &Path, no_prompts: bool) -> Result<()> {
    let out = out_dir(common)?;
    let m = load_model(ckpt)?;
    let paths = frame_paths(&seq.join("frames"))?;
    let images = paths
        .iter()
        .map(|p| Ok(image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8()))
        .collect::<Result<Vec<_>>>()?;
    let dets = group_by_frame(read_detections(seq.join("detections.jsonl"))?, images.len())?;
    let frames: Vec<Frame> = images
        .iter()
        .zip(&dets)
        .enumerate()
        .map(|(index, (image, detections))| Frame { index, image, detections })
        .collect();
    let tcfg = TrackerConfig { prompts: !no_prompts, ..TrackerConfig::default() };
    let result = track_sequence(&m.model, &frames, &tcfg)?;
    write_mot_csv(&result, fs::File::create(out.join("tracks.csv"))?)?;
    write_keypoint_sidecar(&result, fs::File::create(out.join("keypoints.jsonl"))?)?;
    let gt_path = seq.join("gt.csv");
    if gt_path.exists() {
        let gt = read_ground_truth(&gt_path, images.len())?;
        let metrics = tracking_metrics(&as_labeled(&result), &gt)?;
        write_json(&out.join("metrics.json"), &metrics)?;
        println!(
            "HOTA {:.3}  DetA {:.3}  AssA {:.3}  IDs {}",
            metrics.hota, metrics.det_a, metrics.ass_a, metrics.id_switches
        );
    }
    println!("tracked {} frames into {}", images.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { common, crossings } => synth(&common, crossings),
        Command::Train { common, data } => train_cmd(&common, data.as_deref()),
        Command::Eval { common, checkpoint, data } => eval_cmd(&common, &checkpoint, data.as_deref()),
        Command::Sweep { common, checkpoint, data, fractions } => {
            sweep_cmd(&common, &checkpoint, data.as_deref(), &fractions)
        }
        Command::Ablate { common, data, axes } => ablate_cmd(&common, data.as_deref(), &axes),
        Command::Track { common, checkpoint, sequence, no_prompts } => {
            track_cmd(&common, &checkpoint, &sequence, no_prompts)
        }
        Command::Serve { port, host, checkpoint, index } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(kpr_server::serve(kpr_server::ServeOptions { host, port, checkpoint, index }))
        }
    }
}
