use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sfcam::bench::{
    ablation_csv, activation_report, class_set_gains, decompose_weights, evaluate, median, median_miou,
    pseudo_masks, run_ablation, world_for_seed, Inference, Setting,
};
use sfcam::camgen::{classifier_weight_cam, extract_prototypes, final_cam, prototype_cam};
use sfcam::classifier::{read_checkpoint, write_checkpoint};
use sfcam::codec::labels_to_pgm;
use sfcam::sfc::train;
use sfcam::synthworld::{class_counts, count_terciles, export_dataset, import_dataset};
use sfcam::{ClassifierState, Dataset, ExperimentConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "sfcam", version, about = "Calibrated class activation maps on a synthetic long-tailed world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write it as a dataset directory.
    Gen(Common),
    /// Train a classifier and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `gen`; regenerated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Decode pseudo-masks with a checkpoint and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Stack::Final)]
        inference: Stack,
        /// Also write every scene's activation stacks as PGM.
        #[arg(long)]
        export_cams: bool,
    },
    /// Weight decomposition and activation report as JSON.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyze; a classification-only model is trained when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run every ablation setting over the config's seeds (or `--seed`).
    Ablate(Common),
    /// Print the default experiment config.
    Config,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    config: PathBuf,
    /// Overrides the world and training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stack {
    Weight,
    Prototype,
    Final,
}

impl From<Stack> for Inference {
    fn from(s: Stack) -> Self {
        match s {
            Stack::Weight => Inference::Weight,
            Stack::Prototype => Inference::Prototype,
            Stack::Final => Inference::Final,
        }
    }
}

struct Session {
    config: ExperimentConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Session> {
        let config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        let seed = self.seed.unwrap_or(config.world.seed);
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(Session {
            config,
            seed,
            out_dir: self.out_dir.clone(),
        })
    }
}

impl Session {
    fn dataset(&self, dir: Option<&Path>) -> Result<Dataset> {
        match dir {
            Some(d) => import_dataset(d).with_context(|| format!("importing dataset {}", d.display())),
            None => Ok(world_for_seed(&self.config.world, self.config.depth, self.seed)?),
        }
    }

    fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..base.clone()
        }
    }

    fn write_json(&self, name: &str, value: serde_json::Value) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(&value)?).with_context(|| format!("writing {}", path.display()))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn load_checkpoint(path: &Path) -> Result<ClassifierState> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(read_checkpoint(&mut r)?)
}

fn gen(common: &Common) -> Result<()> {
    let ctx = common.load()?;
    let ds = ctx.dataset(None)?;
    export_dataset(&ds, &ctx.out_dir)?;
    println!("{} scenes, counts {:?} -> {}", ds.len(), class_counts(&ds), ctx.out_dir.display());
    Ok(())
}

fn train_cmd(common: &Common, dataset: Option<&Path>) -> Result<()> {
    let ctx = common.load()?;
    let ds = ctx.dataset(dataset)?;
    let cfg = ctx.train_config(&ctx.config.train);
    let (state, log) = train(&ds, &cfg)?;
    let mut w = BufWriter::new(File::create(ctx.out_dir.join("checkpoint.bin"))?);
    write_checkpoint(&mut w, &state)?;
    w.flush()?;
    ctx.write_text("train_log.csv", &log.to_csv())?;
    ctx.write_json("dc.json", serde_json::to_value(&log.dc)?)?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} total loss {:.6}", last.epoch, last.total);
    }
    Ok(())
}

fn eval_cmd(common: &Common, checkpoint: &Path, dataset: Option<&Path>, inference: Stack, export_cams: bool) -> Result<()> {
    let ctx = common.load()?;
    let ds = ctx.dataset(dataset)?;
    let state = load_checkpoint(checkpoint)?;
    if state.class_count() != ds.class_count() || state.depth() != ds.basis.depth {
        bail!(
            "checkpoint is {} classes x {} dims, dataset is {} x {}",
            state.class_count(),
            state.depth(),
            ds.class_count(),
            ds.basis.depth
        );
    }
    let use_pcm = ctx.config.train.use_pcm;
    let report = evaluate(&state, &ds, inference.into(), use_pcm)?;
    ctx.write_json("eval.json", serde_json::to_value(&report)?)?;

    let masks_dir = ctx.out_dir.join("masks");
    fs::create_dir_all(&masks_dir)?;
    for (i, mask) in pseudo_masks(&state, &ds, inference.into(), use_pcm)?.iter().enumerate() {
        let mut f = BufWriter::new(File::create(masks_dir.join(format!("scene_{i:05}.pgm")))?);
        labels_to_pgm(&mut f, mask, ds.class_count())?;
    }
    if export_cams {
        let cams_dir = ctx.out_dir.join("cams");
        for (i, scene) in ds.scenes.iter().enumerate() {
            let w = classifier_weight_cam(&state, scene, use_pcm)?;
            let protos = extract_prototypes(&state, scene, &w)?;
            let p = prototype_cam(&state, scene, &protos)?;
            let f = final_cam(&w, &p)?;
            let tau = state.proto_threshold;
            w.export(&cams_dir, &format!("scene_{i:05}_weight"), tau)?;
            p.export(&cams_dir, &format!("scene_{i:05}_prototype"), tau)?;
            f.export(&cams_dir, &format!("scene_{i:05}_final"), tau)?;
        }
    }
    println!("mIoU {:.4}", report.miou);
    Ok(())
}

fn analyze(common: &Common, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let ctx = common.load()?;
    let ds = ctx.dataset(dataset)?;
    let state = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => train(&ds, &ctx.train_config(&TrainConfig::cls_only()))?.0,
    };
    let decomposition = decompose_weights(&state, &ds.basis);
    let activation = activation_report(&state, &ds, ctx.config.train.use_pcm)?;
    ctx.write_json(
        "analysis.json",
        serde_json::json!({
            "seed": ctx.seed,
            "counts": class_counts(&ds),
            "decomposition": decomposition,
            "activation": activation,
        }),
    )?;
    let (h, t) = (activation.head, activation.tail);
    println!(
        "shared coefficient head {:+.3} tail {:+.3}",
        decomposition.shared(h),
        decomposition.shared(t)
    );
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let ctx = common.load()?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => ctx.config.seeds.clone(),
    };
    if seeds.is_empty() {
        bail!("no seeds to run");
    }
    let rows = run_ablation(&ctx.config.world, ctx.config.depth, &ctx.config.train, &seeds, &Setting::ALL)?;
    ctx.write_text("ablation.csv", &ablation_csv(&rows))?;

    let medians: serde_json::Map<String, serde_json::Value> = Setting::ALL
        .iter()
        .filter_map(|&s| median_miou(&rows, s).map(|m| (s.name().to_string(), m.into())))
        .collect();
    let mut gains = Vec::new();
    for &seed in &seeds {
        let pick = |s| rows.iter().find(|r| r.seed == seed && r.setting == s);
        if let (Some(base), Some(full)) = (pick(Setting::Base), pick(Setting::V)) {
            let counts = &ctx.config.world.counts;
            gains.push((seed, class_set_gains(&base.report, &full.report, counts)?));
        }
    }
    let mut few: Vec<f64> = gains.iter().map(|(_, g)| g.few).collect();
    let mut medium: Vec<f64> = gains.iter().map(|(_, g)| g.medium).collect();
    let mut many: Vec<f64> = gains.iter().map(|(_, g)| g.many).collect();
    ctx.write_json(
        "ablation_summary.json",
        serde_json::json!({
            "seeds": seeds,
            "median_miou": medians,
            "class_sets": count_terciles(&ctx.config.world.counts),
            "median_gain_v_over_base": {
                "many": median(&mut many),
                "medium": median(&mut medium),
                "few": median(&mut few),
            },
            "per_seed_gains": gains.iter().map(|(s, g)| serde_json::json!({"seed": s, "gains": g})).collect::<Vec<_>>(),
        }),
    )?;
    for (name, m) in &medians {
        println!("{name:>5} {:.4}", m.as_f64().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(common) => gen(&common),
        Command::Train { common, dataset } => train_cmd(&common, dataset.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            inference,
            export_cams,
        } => eval_cmd(&common, &checkpoint, dataset.as_deref(), inference, export_cams),
        Command::Analyze {
            common,
            checkpoint,
            dataset,
        } => analyze(&common, checkpoint.as_deref(), dataset.as_deref()),
        Command::Ablate(common) => ablate(&common),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default_long_tail())?);
            Ok(())
        }
    }
}
