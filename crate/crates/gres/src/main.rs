use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gres::ablate::{ablate, table, Arm};
use gres::checkpoint;
use gres::dataset::{read_split, write_split};
use gres::evaluate::{evaluate, Predictor};
use gres::train::{train_until, LogEvent, TrainState};
use gres::viz::{viz_attention, viz_query_clusters};
use gres::RunConfig;
use gres_core::synth::{generate_dataset, SampleRecord, Split};

#[derive(Parser)]
#[command(name = "gres", version, about = "Generalized referring segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model/training seed (the dataset seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Dataset root written by gen-data (generated in memory when omitted).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits as PNG + JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint.bin and log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the val split and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every arm over every seed and write a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated arms (overrides the config).
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Comma-separated seeds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export cross-attention heatmaps of one decoder layer for a val sample.
    VizAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the val split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 2)]
        layer: usize,
    },
    /// Cluster final-layer mask embeddings and write a region raster.
    VizClusters {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn load_splits(cfg: &RunConfig, data: &DataArg) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    match &data.data {
        Some(root) => Ok((read_split(&root.join("train"))?, read_split(&root.join("val"))?)),
        None => {
            let spec = cfg.dataset_spec();
            let train = generate_dataset(&spec, cfg.data.train_count, cfg.data.seed, Split::Train)?;
            let val = generate_dataset(&spec, cfg.data.val_count, cfg.data.seed, Split::Val)?;
            Ok((train, val))
        }
    }
}

fn pick(val: &[SampleRecord], index: usize) -> Result<&SampleRecord> {
    val.get(index).with_context(|| format!("sample {} out of range ({} val samples)", index, val.len()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let spec = cfg.dataset_spec();
            for (split, count) in [(Split::Train, cfg.data.train_count), (Split::Val, cfg.data.val_count)] {
                let samples = generate_dataset(&spec, count, cfg.data.seed, split)?;
                let m = write_split(&common.out.join(split.name()), split, cfg.data.seed, &samples)?;
                println!("{}: {} samples {:?}", split.name(), m.count, m.classes);
            }
        }
        Command::Train { common, data, resume } => {
            let (cfg, mut state) = match &resume {
                Some(p) => checkpoint::load(p)?,
                None => {
                    let cfg = load_config(&common)?;
                    let state = TrainState::new(&cfg)?;
                    (cfg, state)
                }
            };
            let (train_set, val) = load_splits(&cfg, &data)?;
            create_out(&common.out)?;
            let log_path = common.out.join("log.jsonl");
            let mut log = BufWriter::new(
                fs::OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(&log_path)?,
            );
            let mut sink = |e: &LogEvent| {
                let line = serde_json::to_string(e).expect("log event serializes");
                if let LogEvent::Eval { epoch, metrics, .. } = e {
                    eprintln!("epoch {epoch}: gIoU {:.4} cIoU {:.4} N-acc {:?}", metrics.giou, metrics.ciou, metrics.n_acc);
                }
                let _ = writeln!(log, "{line}");
            };
            let result = train_until(&mut state, &cfg, &train_set, Some(&val), u64::MAX, &mut sink);
            log.flush()?;
            result?;
            checkpoint::save(&common.out.join("checkpoint.bin"), &cfg, &state)?;
            fs::write(common.out.join("config.toml"), cfg.to_toml())?;
        }
        Command::Eval { common, data, checkpoint } => {
            let (cfg, model) = checkpoint::load_model(&checkpoint)?;
            let (_, val) = load_splits(&cfg, &data)?;
            let report = evaluate(Predictor::Model(&model), &val)?;
            create_out(&common.out)?;
            write_json(&common.out.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { common, data, arms, seeds } => {
            let cfg = load_config(&common)?;
            let arm_names = arms.unwrap_or_else(|| cfg.ablation.arms.clone());
            let arms = arm_names.iter().map(|a| Arm::parse(a)).collect::<gres::Result<Vec<_>>>()?;
            let seeds = seeds.unwrap_or_else(|| cfg.ablation.seeds.clone());
            let (train_set, val) = load_splits(&cfg, &data)?;
            create_out(&common.out)?;
            let mut log = BufWriter::new(fs::File::create(common.out.join("log.jsonl"))?);
            let results = ablate(&cfg, &arms, &seeds, &train_set, &val, &mut |arm, seed, e| {
                let line = serde_json::json!({ "arm": arm, "seed": seed, "record": e });
                let _ = writeln!(log, "{line}");
            })?;
            log.flush()?;
            let md = table(&results);
            fs::write(common.out.join("table.md"), &md)?;
            write_json(&common.out.join("results.json"), &results)?;
            print!("{md}");
        }
        Command::VizAttn { common, data, checkpoint, sample, layer } => {
            let (cfg, model) = checkpoint::load_model(&checkpoint)?;
            let (_, val) = load_splits(&cfg, &data)?;
            let s = pick(&val, sample)?;
            let (images, summary) = viz_attention(&model, s, layer)?;
            create_out(&common.out)?;
            for (b, img) in images.iter().enumerate() {
                img.save(common.out.join(format!("attn_layer{layer}_block{b}.png")))?;
            }
            write_json(&common.out.join(format!("attn_layer{layer}.json")), &summary)?;
            for b in &summary.blocks {
                println!("block {}: uniformity {:.4}", b.block, b.mean_uniformity);
            }
        }
        Command::VizClusters { common, data, checkpoint, sample, k } => {
            let (cfg, model) = checkpoint::load_model(&checkpoint)?;
            let (_, val) = load_splits(&cfg, &data)?;
            let s = pick(&val, sample)?;
            let raster = viz_query_clusters(&model, s, k, common.seed.unwrap_or(0))?;
            create_out(&common.out)?;
            raster.image.save(common.out.join("clusters.png"))?;
            write_json(&common.out.join("clusters.json"), &raster.result.assignments)?;
            println!("{}x{} grid, assignments {:?}", raster.grid_side, raster.grid_side, raster.result.assignments);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
