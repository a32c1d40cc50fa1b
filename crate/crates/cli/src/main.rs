use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpstn_core::pipeline::{self, EpochLog, Stage};
use rpstn_core::{checkpoint, gradsuite, pgm, pseq, synth};
use rpstn_core::{Ablation, Dataset, Error, ExperimentConfig, Norm, PoseSequenceSample, Result, Subset};

#[derive(Parser)]
#[command(name = "rpstn", version, about = "Relation-based pose propagation on synthetic skeleton videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a PSEQ1 dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mask joints of frames 2..T with this probability.
        #[arg(long)]
        occlude: Option<f64>,
        /// Overrides `samples` from the config.
        #[arg(long)]
        samples: Option<usize>,
        /// Overrides `data_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// no_jre, no_jrpsp or no_init.
        #[arg(long)]
        ablate: Option<String>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset scored after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Print a PCK report as one JSON line.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        gamma: f64,
        #[arg(long, default_value = "bbox")]
        norm: String,
        /// visible, occluded or all.
        #[arg(long, default_value = "visible")]
        subset: String,
    },
    /// Write per-frame heatmap PGMs and decoded joints.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dump_dir: PathBuf,
    },
    /// Write the joint relation matrix of every frame as a PGM.
    DumpRelations {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dump_dir: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn gen_data(config: &Path, out: &Path, occlude: Option<f64>, samples: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(n) = samples {
        cfg.data.samples = n;
    }
    let seed = seed.unwrap_or(cfg.data.data_seed);
    let mut data = synth::generate(&cfg.model, &cfg.data, seed)?;
    let rate = occlude.unwrap_or(cfg.data.occlude_rate);
    if rate > 0.0 {
        data = synth::occlude_dataset(&data, rate, synth::occluder_side(&cfg.model), seed.wrapping_add(1))?;
    }
    pseq::write(out, &data)?;
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn print_epoch(e: &EpochLog, total: usize) {
    let stage = match e.stage {
        Stage::Pretrain => "pretrain",
        Stage::Sequence => "sequence",
    };
    let val = e.val_mpck.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{stage} epoch {}/{total} lr {:.2e} loss {:.6} val_mpck {val}",
        e.epoch, e.lr, e.loss
    );
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    ablate: Option<&str>,
    seed: Option<u64>,
    val: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(name) = ablate {
        cfg.model.ablation = Ablation::parse(name)?;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    let train_set = pseq::read(data)?;
    let val_set = val.map(pseq::read).transpose()?;
    let (pre, seq) = (cfg.model.pretrain_epochs, cfg.model.epochs);
    let trained = pipeline::train(&cfg.model, &train_set, val_set.as_ref(), &mut |e| {
        print_epoch(e, if e.stage == Stage::Pretrain { pre } else { seq })
    })?;
    checkpoint::save(out, &trained.model, true)?;
    eprintln!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, gamma: f64, norm: &str, subset: &str) -> Result<()> {
    let norm: Norm = norm.parse()?;
    let subset: Subset = subset.parse()?;
    let mut model = checkpoint::load(ckpt)?;
    let data = pseq::read(data)?;
    let report = pipeline::evaluate(&mut model, &data, gamma, norm, subset)?;
    println!("{}", report.to_json());
    Ok(())
}

fn load_pair(ckpt: &Path, data: &Path, dump_dir: &Path) -> Result<(rpstn_core::Model, Dataset)> {
    let model = checkpoint::load(ckpt)?;
    let data = pseq::read(data)?;
    fs::create_dir_all(dump_dir)?;
    Ok((model, data))
}

fn infer(ckpt: &Path, data: &Path, dump_dir: &Path) -> Result<()> {
    let (mut model, data) = load_pair(ckpt, data, dump_dir)?;
    let names = pipeline::joint_names(data.joints);
    let mut text = String::from("# sample frame joint x y visible\n");
    for (i, sample) in data.samples.iter().enumerate() {
        let out = model.rollout(&[sample])?;
        for (t, maps) in out.refined.iter().enumerate() {
            let [_, k, h, w] = [maps.shape()[0], maps.shape()[1], maps.shape()[2], maps.shape()[3]];
            let tiles: Vec<&[f32]> = (0..k).map(|j| &maps.data()[j * h * w..(j + 1) * h * w]).collect();
            let img = pgm::tile_horizontally(&tiles, w, h);
            pgm::write(&dump_dir.join(format!("heatmaps_s{i:04}_t{t}.pgm")), k * w, h, &img)?;
            let decoded = rpstn_core::heatmap::decode(&rpstn_core::JointHeatmaps {
                maps: maps.clone(),
                stride: model.config.stride,
            });
            for (j, (xy, vis)) in decoded[0].coords.iter().zip(&decoded[0].visible).enumerate() {
                let _ = writeln!(text, "{i} {t} {} {} {} {}", names[j], xy[0], xy[1], *vis as u8);
            }
        }
    }
    fs::write(dump_dir.join("joints.txt"), text)?;
    eprintln!("wrote {} samples to {}", data.len(), dump_dir.display());
    Ok(())
}

fn dump_relations(ckpt: &Path, data: &Path, dump_dir: &Path) -> Result<()> {
    let (mut model, data) = load_pair(ckpt, data, dump_dir)?;
    if model.config.ablation.no_jre {
        return Err(Error::Config("checkpoint was trained without the relation branch".into()));
    }
    for (i, sample) in data.samples.iter().enumerate() {
        let out = model.rollout(&[sample as &PoseSequenceSample])?;
        for (t, rel) in out.relations.iter().enumerate() {
            let rel = rel.as_ref().expect("relation branch enabled");
            let k = rel.shape()[1];
            pgm::write(&dump_dir.join(format!("relations_s{i:04}_t{t}.pgm")), k, k, rel.data())?;
        }
    }
    eprintln!("wrote relation matrices for {} samples to {}", data.len(), dump_dir.display());
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let results = gradsuite::run(gradsuite::TRIALS, gradsuite::SEED)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{} {:<36} max relative error {:.3e}",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_error
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            config,
            out,
            occlude,
            samples,
            seed,
        } => gen_data(&config, &out, occlude, samples, seed)?,
        Command::Train {
            config,
            data,
            out,
            ablate,
            seed,
            val,
        } => train(&config, &data, &out, ablate.as_deref(), seed, val.as_deref())?,
        Command::Eval {
            ckpt,
            data,
            gamma,
            norm,
            subset,
        } => eval(&ckpt, &data, gamma, &norm, &subset)?,
        Command::Infer { ckpt, data, dump_dir } => infer(&ckpt, &data, &dump_dir)?,
        Command::DumpRelations { ckpt, data, dump_dir } => dump_relations(&ckpt, &data, &dump_dir)?,
        Command::Gradcheck => return gradcheck(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
