//! `kws` command-line tool.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kws_core::data::{Split, SynthConfig};
use kws_core::model::{LgNetConfig, ModelPreset};
use kws_core::train::LossMode;

use crate::anchor_file::load_anchors;
use crate::checkpoint::Checkpoint;
use crate::config::{validate_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::pipeline::{self, FINAL_CKPT};
use crate::report::{report_json, report_text};
use crate::synthetic::write_synthetic;

#[derive(Debug, Parser)]
#[command(name = "kws", version, about = "LG-Net keyword spotting with text-anchor metric learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Speech Commands style corpus, anchors and config.
    GenSynthetic(GenArgs),
    /// Train stage 1 (metric learning without silence) then stage 2 (head finetuning).
    Train(TrainArgs),
    /// Report accuracy and FRR at a target FAR on one split.
    Eval(EvalArgs),
    /// Print per-class scores and the predicted label for one WAV file.
    Infer(InferArgs),
    /// Write eval-mode speech embeddings of one split as CSV.
    ExportEmbeddings(ExportArgs),
    /// Check an anchor file, optionally against a dataset's words.
    AnchorsValidate(AnchorsArgs),
    /// Print the inference parameter count of a model.
    CountParams(CountArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LossArg {
    Ce,
    CeSt,
    CeTt,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossMode::Ce,
            LossArg::CeSt => LossMode::CeSt,
            LossArg::CeTt => LossMode::CeTt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Lgnet3,
    Lgnet6,
    Custom,
}

impl From<ModelArg> for ModelPreset {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lgnet3 => ModelPreset::Lgnet3,
            ModelArg::Lgnet6 => ModelPreset::Lgnet6,
            ModelArg::Custom => ModelPreset::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Flags shared by the commands that read an experiment config.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `training.loss_mode`.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Override `model.preset`.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Override `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threads for feature extraction.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Use a single worker regardless of `--workers`.
    #[arg(long)]
    pub deterministic: bool,
}

impl RunFlags {
    fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }

    /// Loads the config, applies overrides and re-validates.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = validate_config(&self.config).or_else(|e| match e {
            // overrides may fix what the file alone gets wrong
            Error::Config(_) => {
                let text = fs::read_to_string(&self.config).map_err(|e| Error::io(&self.config, e))?;
                let mut c = ExperimentConfig::parse(&text).map_err(Error::Config)?;
                c.resolve_paths(self.config.parent().unwrap_or(Path::new(".")));
                Ok(c)
            }
            other => Err(other),
        })?;
        if let Some(s) = self.seed {
            cfg.training.seed = s;
        }
        if let Some(l) = self.loss {
            cfg.training.loss_mode = l.into();
        }
        if let Some(m) = self.model {
            cfg.model.preset = m.into();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        let problems = cfg.problems();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of keyword classes.
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Utterances per word, split 80/10/10.
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    /// Extra words that map to the unknown class.
    #[arg(long, default_value_t = 0)]
    pub unknown_words: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Model to evaluate [default: <output_dir>/final.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target false-alarm rate [default: `eval.far`, 0.005].
    #[arg(long)]
    pub far: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// 16 kHz WAV file.
    pub wav: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Model to use [default: <output_dir>/final.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// CSV destination [default: <output_dir>/embeddings_<split>.csv].
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    /// Anchor JSON file.
    pub path: PathBuf,
    /// Words that must be present (`silence` is always exempt).
    #[arg(long, value_delimiter = ',')]
    pub words: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, value_enum, default_value = "lgnet3")]
    pub model: ModelArg,
    /// Output classes (12 for v1, 16 for v2).
    #[arg(long, default_value_t = 12)]
    pub classes: usize,
    /// Config holding the block list of a custom model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn checkpoint_path(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output_dir.join(FINAL_CKPT))
}

/// Runs one command, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => {
            let synth = SynthConfig {
                num_classes: a.classes,
                samples_per_class: a.per_class,
                unknown_words: a.unknown_words,
                seed: a.seed,
                ..Default::default()
            };
            let cfg = write_synthetic(&a.out, &synth).map_err(|e| match e {
                Error::Core(kws_core::Error::Config(m)) => Error::Config(vec![m]),
                other => other,
            })?;
            println!("{}", cfg.display());
        }
        Command::Train(a) => {
            let cfg = a.run.load()?;
            let out = pipeline::run_training(&cfg, a.resume.as_deref(), a.run.workers(), &mut |l| {
                println!(
                    "stage {} epoch {:>3}  loss {:.5}  ce {:.5}  tri {}  lr {:.6}  valid_acc {:.4}",
                    l.stage,
                    l.epoch,
                    l.loss,
                    l.loss_ce,
                    l.loss_tri.map_or("-".to_string(), |t| format!("{t:.5}")),
                    l.lr,
                    l.valid_acc
                );
            })?;
            println!("wrote {}", out.final_path.display());
        }
        Command::Eval(a) => {
            let cfg = a.run.load()?;
            let far = a.far.unwrap_or(cfg.eval.far);
            if !(0.0..=1.0).contains(&far) {
                return Err(Error::Config(vec!["--far out of [0,1]".into()]));
            }
            let ck = Checkpoint::load(&checkpoint_path(&cfg, &a.checkpoint))?;
            let split = a.split.into();
            let data = pipeline::load_split(&cfg, &ck, split, a.run.workers())?;
            let report = pipeline::evaluate_split(&ck, &data, split, far)?;
            print!("{}", report_text(&report));
            if let Some(p) = &a.json {
                fs::write(p, report_json(&report)).map_err(|e| Error::io(p, e))?;
            }
        }
        Command::Infer(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let (scores, best) = pipeline::infer_wav(&ck, &a.wav)?;
            for (name, s) in ck.labels.classes().iter().zip(&scores) {
                println!("{name}\t{s:.6}");
            }
            println!("prediction\t{}", ck.labels.name(best));
        }
        Command::ExportEmbeddings(a) => {
            let cfg = a.run.load()?;
            let ck = Checkpoint::load(&checkpoint_path(&cfg, &a.checkpoint))?;
            let split: Split = a.split.into();
            let data = pipeline::load_split(&cfg, &ck, split, a.run.workers())?;
            let path = a.csv.clone().unwrap_or_else(|| cfg.output_dir.join(format!("embeddings_{}.csv", split.name())));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let n = pipeline::write_embeddings(&ck.model, &data, split, BufWriter::new(file))?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::AnchorsValidate(a) => {
            let store = load_anchors(&a.path)?;
            store.require(&a.words)?;
            println!("{}: {} words, dim {}, source {:?}", a.path.display(), store.len(), store.dim(), store.source());
        }
        Command::CountParams(a) => {
            let preset: ModelPreset = a.model.into();
            let cfg = match (LgNetConfig::preset(preset, a.classes), &a.config) {
                (Some(c), None) => c,
                (_, Some(p)) => {
                    let mut e = validate_config(p)?;
                    e.model.preset = preset;
                    e.model.build(a.classes)?
                }
                (None, None) => return Err(Error::Config(vec!["--model custom needs --config with model.blocks".into()])),
            };
            println!("{}", cfg.count_params());
        }
    }
    Ok(())
}

/// Process exit code for an outcome: 0 ok, 2 invalid configuration, 1 any
/// other failure.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_every_shared_flag() {
        let mut cmd = Cli::command();
        let train = cmd.find_subcommand_mut("train").unwrap();
        let help = train.render_long_help().to_string();
        for flag in ["--config", "--seed", "--loss", "--model", "--out", "--workers", "--deterministic", "--resume"] {
            assert!(help.contains(flag), "{flag} missing");
        }
        let eval = cmd.find_subcommand_mut("eval").unwrap().render_long_help().to_string();
        assert!(eval.contains("--far"));
    }

    #[test]
    fn parses_loss_and_model_values() {
        let cli = Cli::try_parse_from(["kws", "train", "--config", "c.toml", "--loss", "ce_st", "--model", "lgnet6"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.run.loss, Some(LossArg::CeSt));
        assert_eq!(t.run.model, Some(ModelArg::Lgnet6));
        assert!(Cli::try_parse_from(["kws", "train", "--config", "c", "--loss", "triplet"]).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::Config(vec!["x".into()]))), 2);
        assert_eq!(exit_code(&Err(Error::Dataset("x".into()))), 1);
    }
}
