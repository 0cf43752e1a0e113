//! The `scda` command line: `generate`, `train`, `eval`, `cam`, `gradcheck`.
//!
//! Every subcommand writes its artifacts into `--out` and is byte-for-byte
//! repeatable for identical inputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, concentration, pgm_name, upsample_nearest, write_pgm};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions};
use crate::objectives::Ablation;
use crate::synth::{self, file_name, generate, Domain, Split, SynthConfig};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, run_many, steps_csv, RunData, RunOutput, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "scda", version, about = "Semantic-concentration domain adaptation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON file with `synth` and/or `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of every config section.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the four benchmark datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Trains on datasets written by `generate`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding the `.scd` files.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Comma-separated: no_mi, no_pdd_ss, no_pdd_st, no_pdd.
        #[arg(long)]
        ablate: Option<String>,
        /// Weight of the domain-adversarial term; > 0 enables the discriminator.
        #[arg(long)]
        gamma: Option<f64>,
        /// Number of consecutive training seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker threads for multi-seed sweeps.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Accuracy and confusion matrix of a checkpoint on a labelled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Class activation maps as PGM images plus a concentration table.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated sample indices.
        #[arg(long, default_value = "0")]
        samples: String,
        /// Integer upsampling factor of the written images.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Checks every loss gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_grl_fault: bool,
    },
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        if let Some(s) = seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Outcome of a subcommand that completed without an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The work ran but a check did not pass.
    Failed,
}

pub fn cmd_generate(common: &Common) -> Result<Vec<PathBuf>> {
    let cfg = FileConfig::load(common.config.as_deref(), common.seed)?;
    create_dir(&common.out)?;
    let mut written = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Eval] {
            let data = generate(&cfg.synth, split, domain)?;
            let path = common.out.join(file_name(split, domain));
            synth::save(&data, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub ablate: Option<String>,
    pub gamma: Option<f64>,
    pub seeds: u64,
    pub jobs: usize,
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("report.json"), to_json(&out.report)?)?;
    write(&dir.join("losses.csv"), steps_csv(&out.steps))?;
    let mut intervals =
        String::from("step,ce,pdd_ss,pdd_st,mi,adv,total,target_acc,mean_concentration\n");
    for i in &out.report.intervals {
        intervals.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i.step, i.ce, i.pdd_ss, i.pdd_st, i.mi, i.adv, i.total, i.target_acc, i.mean_concentration
        ));
    }
    write(&dir.join("intervals.csv"), intervals)?;
    checkpoint::save(&out.model, &dir.join("checkpoint.json"))
}

pub fn cmd_train(common: &Common, args: &TrainArgs) -> Result<Vec<RunOutput>> {
    let cfg = FileConfig::load(common.config.as_deref(), common.seed)?;
    let mut train = cfg.train;
    if let Some(list) = &args.ablate {
        train.ablation = Ablation::parse_list(list)?;
    }
    if let Some(g) = args.gamma {
        train.gamma = g;
    }
    train.validate()?;
    let load = |split, domain| synth::load(&args.data.join(file_name(split, domain)));
    let source = load(Split::Train, Domain::Source)?;
    let target = load(Split::Train, Domain::Target)?;
    let eval = load(Split::Eval, Domain::Target)?;
    let data = RunData {
        source_train: &source,
        target_train: &target,
        target_eval: &eval,
    };
    let configs: Vec<TrainConfig> = (0..args.seeds.max(1))
        .map(|k| TrainConfig {
            seed: train.seed + k,
            ..train.clone()
        })
        .collect();
    let outputs = run_many(&configs, data, args.jobs)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if outputs.len() == 1 {
        write_run(&common.out, &outputs[0])?;
    } else {
        for out in &outputs {
            write_run(&common.out.join(format!("seed_{}", out.report.config.seed)), out)?;
        }
    }
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_concentration: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn cmd_eval(common: &Common, checkpoint_path: &Path, dataset: &Path) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = synth::load(dataset)?;
    let result = evaluate(&model, &data)?;
    let report = EvalReport {
        checkpoint: checkpoint_path.display().to_string(),
        dataset: dataset.display().to_string(),
        samples: data.len(),
        accuracy: result.accuracy,
        mean_concentration: result.mean_concentration,
        confusion: result.confusion,
    };
    create_dir(&common.out)?;
    write(&common.out.join("eval.json"), to_json(&report)?)?;
    let mut csv = String::from("true\\pred");
    for c in 0..report.confusion.len() {
        csv.push_str(&format!(",{c}"));
    }
    csv.push('\n');
    for (r, row) in report.confusion.iter().enumerate() {
        csv.push_str(&r.to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write(&common.out.join("confusion.csv"), csv)?;
    Ok(report)
}

/// One row of `concentration.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CamRow {
    pub sample: usize,
    pub class: usize,
    pub label: Option<usize>,
    pub ratio: f64,
    pub degenerate: bool,
    pub cam_logit: f64,
    pub eval_logit: f64,
}

pub fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("invalid sample index {t:?}")))
        })
        .collect()
}

pub fn cmd_cam(
    common: &Common,
    checkpoint_path: &Path,
    dataset: &Path,
    samples: &[usize],
    scale: usize,
) -> Result<Vec<CamRow>> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = synth::load(dataset)?;
    if scale == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    if let Some(&bad) = samples.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!(
            "sample {bad} out of range for {} samples",
            data.len()
        )));
    }
    create_dir(&common.out)?;
    let (acts, logits) = model.activations_and_logits(&data.images(samples))?;
    let (f, h, w) = (acts.shape()[1], acts.shape()[2], acts.shape()[3]);
    let per = f * h * w;
    let mut rows = Vec::new();
    for (k, &s) in samples.iter().enumerate() {
        let a = Tensor::new(vec![f, h, w], acts.data()[k * per..(k + 1) * per].to_vec())?;
        let cam = compute_cam(&a, &model.classifier.weight)?;
        for class in 0..cam.classes() {
            let map = upsample_nearest(&cam.map(class), h * scale, w * scale)?;
            write_pgm(&map, &common.out.join(pgm_name(s, class)))?;
            let score = concentration(&cam, class, &data.samples[s].mask)?;
            rows.push(CamRow {
                sample: s,
                class,
                label: data.samples[s].label,
                ratio: score.ratio,
                degenerate: score.degenerate,
                cam_logit: cam.logits[class],
                eval_logit: logits.row(k)[class],
            });
        }
    }
    let mut csv = String::from("sample,class,label,ratio,degenerate,cam_logit,eval_logit\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample,
            r.class,
            r.label.map_or(String::new(), |l| l.to_string()),
            r.ratio,
            r.degenerate,
            r.cam_logit,
            r.eval_logit
        ));
    }
    write(&common.out.join("concentration.csv"), csv)?;
    Ok(rows)
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate { common } => {
            for p in cmd_generate(&common)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            common,
            data,
            ablate,
            gamma,
            seeds,
            jobs,
        } => {
            let args = TrainArgs {
                data,
                ablate,
                gamma,
                seeds,
                jobs,
            };
            for out in cmd_train(&common, &args)? {
                let r = &out.report;
                println!(
                    "seed {} {}: target accuracy {:.4}, concentration {:.4}",
                    r.config.seed, r.variant, r.target_acc, r.mean_concentration
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let r = cmd_eval(&common, &checkpoint, &dataset)?;
            println!("accuracy {:.4} on {} samples", r.accuracy, r.samples);
        }
        Command::Cam {
            common,
            checkpoint,
            dataset,
            samples,
            scale,
        } => {
            let rows = cmd_cam(&common, &checkpoint, &dataset, &parse_indices(&samples)?, scale)?;
            println!("wrote {} maps to {}", rows.len(), common.out.display());
        }
        Command::Gradcheck {
            common,
            inject_grl_fault,
        } => {
            let report = gradcheck(common.seed.unwrap_or(0), GradcheckOptions { inject_grl_fault })?;
            create_dir(&common.out)?;
            write(&common.out.join("gradcheck.json"), to_json(&report)?)?;
            print!("{}", report.to_text());
            if !report.passed {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Success)
}

/// Entry point of the binary.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
