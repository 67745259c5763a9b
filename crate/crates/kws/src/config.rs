//! TOML experiment configuration.
//!
//! ```toml
//! output_dir = "runs/v1-lgnet3"
//!
//! [model]
//! preset = "lgnet3"          # lgnet3 | lgnet6 | custom (then give `blocks`)
//!
//! [training]
//! loss_mode = "ce_tt"        # ce | ce_st | ce_tt
//! seed = 1
//!
//! [data]
//! root = "/data/speech_commands_v0.01"
//! version = "v1"             # v1 | v2 | custom (then give `keywords`)
//!
//! [anchors]
//! path = "anchors/bert-layer-1.json"   # or: fallback_seed = 7
//! ```
//!
//! Omitted fields take their defaults; [`ExperimentConfig::to_toml`]
//! writes the fully resolved file. Relative paths are resolved against the
//! directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use kws_core::data::{DatasetVersion, LabelMap};
use kws_core::frontend::MfccConfig;
use kws_core::model::{LgBlockConfig, LgNetConfig, ModelPreset};
use kws_core::train::{LossMode, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Block list for `preset = "custom"`.
    pub blocks: Vec<LgBlockConfig>,
    pub embedding_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub mfcc: MfccConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = LgNetConfig::lgnet3(2);
        Self {
            preset: ModelPreset::Lgnet3,
            blocks: Vec::new(),
            embedding_dim: base.embedding_dim,
            bn_eps: base.bn_eps,
            bn_momentum: base.bn_momentum,
            mfcc: base.mfcc,
        }
    }
}

impl ModelSection {
    /// Full network description for `num_classes` outputs.
    pub fn build(&self, num_classes: usize) -> Result<LgNetConfig> {
        let blocks = match LgNetConfig::preset(self.preset, num_classes) {
            Some(p) if self.blocks.is_empty() => p.blocks,
            Some(_) => return Err(Error::Config(vec!["model.blocks is only allowed with preset = \"custom\"".into()])),
            None if self.blocks.is_empty() => {
                return Err(Error::Config(vec!["model.blocks is required with preset = \"custom\"".into()]))
            }
            None => self.blocks.clone(),
        };
        let mut c = LgNetConfig::from_blocks(blocks, num_classes);
        c.input_channels = self.mfcc.n_coeffs;
        c.embedding_dim = self.embedding_dim;
        c.bn_eps = self.bn_eps;
        c.bn_momentum = self.bn_momentum;
        c.mfcc = self.mfcc.clone();
        c.validate().map_err(|e| Error::Config(vec![format!("model: {e}")]))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Speech Commands style directory.
    pub root: PathBuf,
    #[serde(default = "default_version")]
    pub version: DatasetVersion,
    /// Keyword list for `version = "custom"`.
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Generate silence clips from `_background_noise_`.
    #[serde(default = "yes")]
    pub silence: bool,
    /// Directory for cached MFCCs; no caching when absent.
    #[serde(default)]
    pub feature_cache: Option<PathBuf>,
}

fn default_version() -> DatasetVersion {
    DatasetVersion::V1
}

fn yes() -> bool {
    true
}

impl DataSection {
    pub fn labels(&self) -> Result<LabelMap> {
        if self.version != DatasetVersion::Custom && !self.keywords.is_empty() {
            return Err(Error::Config(vec!["data.keywords is only allowed with version = \"custom\"".into()]));
        }
        LabelMap::for_version(self.version, &self.keywords).map_err(|e| Error::Config(vec![format!("data: {e}")]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorsSection {
    /// Anchor JSON file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Seed for generated unit-norm anchors when no file is given.
    #[serde(default)]
    pub fallback_seed: Option<u64>,
    /// Dimension of generated anchors.
    #[serde(default = "default_anchor_dim")]
    pub dim: usize,
}

fn default_anchor_dim() -> usize {
    768
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// False-alarm rate at which the false-reject rate is reported.
    pub far: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { far: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorsSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Parses TOML without semantic checks.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        toml::from_str(text).map_err(|e| vec![e.to_string().trim_end().to_string()])
    }

    /// Every semantic problem, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.training.problems();
        if let Err(Error::Config(p)) = self.data.labels() {
            out.extend(p);
        }
        let classes = self.data.labels().map(|l| l.len()).unwrap_or(2);
        if let Err(Error::Config(p)) = self.model.build(classes) {
            out.extend(p);
        }
        if !self.data.root.is_dir() {
            out.push(format!("data.root `{}` is not a directory", self.data.root.display()));
        }
        match &self.anchors {
            None if self.training.loss_mode == LossMode::CeTt => {
                out.push("training.loss_mode = \"ce_tt\" requires an [anchors] section".into())
            }
            None => {}
            Some(a) => {
                match (&a.path, a.fallback_seed) {
                    (Some(_), Some(_)) => out.push("anchors: give either path or fallback_seed, not both".into()),
                    (None, None) => out.push("anchors: one of path or fallback_seed is required".into()),
                    (Some(p), None) if !p.is_file() => out.push(format!("anchors.path `{}` does not exist", p.display())),
                    _ => {}
                }
                if a.dim == 0 {
                    out.push("anchors.dim must be positive".into());
                }
            }
        }
        if !(self.eval.far >= 0.0 && self.eval.far <= 1.0) {
            out.push("eval.far out of [0,1]".into());
        }
        out
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.root);
        if let Some(c) = self.data.feature_cache.as_mut() {
            fix(c);
        }
        if let Some(p) = self.anchors.as_mut().and_then(|a| a.path.as_mut()) {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn labels(&self) -> Result<LabelMap> {
        self.data.labels()
    }

    pub fn model_config(&self) -> Result<LgNetConfig> {
        self.model.build(self.labels()?.len())
    }
}

/// Reads, resolves and fully validates a config file. All problems are
/// reported together.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(Error::Config)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("kws.toml");
        fs::write(&p, body).unwrap();
        p
    }

    fn problems_of(body: &str) -> Vec<String> {
        let dir = tempfile::tempdir().unwrap();
        match validate_config(&write(dir.path(), body)) {
            Err(Error::Config(p)) => p,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_echoes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[data]\nroot = \".\"\n[anchors]\nfallback_seed = 3\n");
        let cfg = validate_config(&p).unwrap();
        assert_eq!(cfg.training, TrainingConfig::default());
        assert_eq!(cfg.model.preset, ModelPreset::Lgnet3);
        assert_eq!(cfg.data.version, DatasetVersion::V1);
        assert_eq!(cfg.eval.far, 0.005);
        assert_eq!(cfg.anchors.as_ref().unwrap().dim, 768);
        assert_eq!(cfg.output_dir, dir.path().join("runs"));
        let echoed = cfg.to_toml().unwrap();
        for key in ["batch_size = 256", "lr_init = 0.01", "momentum = 0.9", "beta = 0.5", "loss_mode = \"ce_tt\"", "preset = \"lgnet3\""] {
            assert!(echoed.contains(key), "{key} missing from\n{echoed}");
        }
        assert_eq!(ExperimentConfig::parse(&echoed).unwrap(), cfg);
        assert_eq!(cfg.model_config().unwrap(), LgNetConfig::lgnet3(12));
    }

    #[test]
    fn beta_out_of_range() {
        let p = problems_of("[training]\nbeta = 1.5\n[data]\nroot = \".\"\n[anchors]\nfallback_seed = 3\n");
        assert_eq!(p, vec!["training.beta out of [0,1]".to_string()]);
    }

    #[test]
    fn text_anchors_need_an_anchor_section() {
        let p = problems_of("[data]\nroot = \".\"\n");
        assert_eq!(p.len(), 1);
        assert!(p[0].contains("[anchors]"), "{p:?}");
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "[training]\nloss_mode = \"ce\"\n[data]\nroot = \".\"\n");
        assert!(validate_config(&ok).is_ok());
    }

    #[test]
    fn every_problem_is_reported() {
        let p = problems_of(
            "[training]\nbeta = -1\nmomentum = 1.0\n[data]\nroot = \"nope\"\nversion = \"custom\"\n\
             [anchors]\npath = \"missing.json\"\n[eval]\nfar = 2\n",
        );
        for want in ["training.beta", "training.momentum", "data: ", "data.root", "anchors.path", "eval.far"] {
            assert!(p.iter().any(|m| m.contains(want)), "{want} not in {p:?}");
        }
    }

    #[test]
    fn structural_errors_name_the_field() {
        let p = problems_of("[training]\nbeta = \"high\"\n[data]\nroot = \".\"\n");
        assert!(p[0].contains("beta"), "{p:?}");
        let p = problems_of("[training]\nbeat = 0.1\n[data]\nroot = \".\"\n");
        assert!(p[0].contains("beat"), "{p:?}");
        let p = problems_of("output_dir = \"x\"\n");
        assert!(p[0].contains("data"), "{p:?}");
    }

    #[test]
    fn custom_models() {
        let mut m = ModelSection { preset: ModelPreset::Custom, ..Default::default() };
        assert!(m.build(4).is_err());
        m.blocks = vec![LgBlockConfig::new(40, 16, 2), LgBlockConfig::new(16, 24, 2)];
        let c = m.build(4).unwrap();
        assert_eq!(c.last_channels(), 24);
        m.blocks[1].in_channels = 15;
        assert!(m.build(4).is_err());
        let preset_with_blocks = ModelSection { blocks: vec![LgBlockConfig::new(40, 8, 1)], ..Default::default() };
        assert!(preset_with_blocks.build(4).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        let p = write(dir.path(), "[data]\nroot = \".\"\nfeature_cache = \"cache\"\n[anchors]\npath = \"a.json\"\n");
        let cfg = validate_config(&p).unwrap();
        assert_eq!(cfg.anchors.unwrap().path.unwrap(), dir.path().join("a.json"));
        assert_eq!(cfg.data.feature_cache.unwrap(), dir.path().join("cache"));
    }
}
