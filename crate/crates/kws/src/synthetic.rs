//! Writes the synthetic corpus to disk in Speech Commands layout, with a
//! matching anchor file and a ready-to-train config.

use std::fs;
use std::path::{Path, PathBuf};

use kws_core::data::{synth_dataset, DatasetVersion, Split, SynthConfig};

use crate::anchor_file::save_anchors;
use crate::config::{AnchorsSection, DataSection, ExperimentConfig, ModelSection};
use crate::error::{Error, Result};
use crate::gscd::{NOISE_DIR, TESTING_LISTS, VALIDATION_LISTS};
use crate::wav::write_wav;

pub const ANCHOR_FILE: &str = "anchors.json";
pub const CONFIG_FILE: &str = "kws.toml";

/// Mini-batch size written into generated configs.
pub const SYNTH_BATCH_SIZE: usize = 32;

/// Generates the corpus under `out` and returns the path of the config.
/// Silence is left to the loader, which cuts it from the noise files.
pub fn write_synthetic(out: &Path, synth: &SynthConfig) -> Result<PathBuf> {
    let ds = synth_dataset(&SynthConfig { silence: false, ..synth.clone() })?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out)?;
    for (id, wave) in &ds.audio {
        let p = out.join(id);
        mkdir(p.parent().expect("ids are word/file"))?;
        write_wav(&p, wave)?;
    }
    mkdir(&out.join(NOISE_DIR))?;
    for (name, wave) in &ds.noise {
        write_wav(&out.join(NOISE_DIR).join(name), wave)?;
    }
    let list = |s: Split| ds.split.part(s).iter().map(|u| format!("{}\n", u.id)).collect::<String>();
    for (name, s) in [(VALIDATION_LISTS[0], Split::Valid), (TESTING_LISTS[0], Split::Test)] {
        let p = out.join(name);
        fs::write(&p, list(s)).map_err(|e| Error::io(&p, e))?;
    }
    save_anchors(&out.join(ANCHOR_FILE), &ds.anchors)?;

    let mut cfg = ExperimentConfig {
        output_dir: "runs".into(),
        model: ModelSection::default(),
        training: Default::default(),
        data: DataSection {
            root: ".".into(),
            version: DatasetVersion::Custom,
            keywords: ds.split.labels.keywords().to_vec(),
            silence: true,
            feature_cache: None,
        },
        anchors: Some(AnchorsSection { path: Some(ANCHOR_FILE.into()), fallback_seed: None, dim: ds.anchors.dim() }),
        eval: Default::default(),
    };
    cfg.training.batch_size = SYNTH_BATCH_SIZE;
    cfg.training.seed = synth.seed;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use kws_core::data::LabelMap;

    use super::*;
    use crate::anchor_file::load_anchors;
    use crate::config::validate_config;
    use crate::gscd::scan_dataset;

    #[test]
    fn written_corpus_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig { num_classes: 3, samples_per_class: 10, unknown_words: 1, clip_samples: 4000, seed: 2, ..Default::default() };
        let cfg_path = write_synthetic(dir.path(), &synth).unwrap();
        let cfg = validate_config(&cfg_path).unwrap();
        assert_eq!(cfg.training.batch_size, SYNTH_BATCH_SIZE);
        let labels = cfg.labels().unwrap();
        assert_eq!(labels, LabelMap::custom(&["alpha", "bravo", "charlie"]).unwrap());
        let split = scan_dataset(dir.path(), DatasetVersion::Custom, &labels).unwrap();
        let reference = synth_dataset(&synth).unwrap().split;
        for s in Split::ALL {
            assert_eq!(split.part(s), reference.part(s), "{s:?}");
        }
        let anchors = load_anchors(&dir.path().join(ANCHOR_FILE)).unwrap();
        anchors.require(&split.words()).unwrap();
    }
}
