//! Speech Commands directory layout.
//!
//! ```text
//! root/
//!   yes/0a7c2a8d_nohash_0.wav
//!   ...
//!   _background_noise_/white_noise.wav
//!   validation_list.txt     (or validation.list)
//!   testing_list.txt        (or testing.list)
//! ```
//!
//! List files hold one `word/file.wav` path per line. Files named in the
//! testing list form the test split, those in the validation list the
//! validation split, and everything else is training data.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use kws_core::data::{DatasetSplit, DatasetVersion, LabelMap, Split, Utterance};
use kws_core::frontend::Waveform;

use crate::error::{Error, Result};
use crate::wav::read_wav;

pub const NOISE_DIR: &str = "_background_noise_";
pub const VALIDATION_LISTS: [&str; 2] = ["validation_list.txt", "validation.list"];
pub const TESTING_LISTS: [&str; 2] = ["testing_list.txt", "testing.list"];

fn find_list(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_file())
}

fn read_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().replace('\\', "/")).filter(|l| !l.is_empty()).collect())
}

fn sorted_dir(path: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Builds the three splits from the list files. Every word directory not
/// starting with `_` contributes; non-keywords become `unknown`.
pub fn scan_dataset(root: &Path, version: DatasetVersion, labels: &LabelMap) -> Result<DatasetSplit> {
    let mut missing = Vec::new();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("`{}` is not a directory", root.display())));
    }
    let valid_list = find_list(root, &VALIDATION_LISTS);
    let test_list = find_list(root, &TESTING_LISTS);
    if valid_list.is_none() {
        missing.push(VALIDATION_LISTS.join(" or "));
    }
    if test_list.is_none() {
        missing.push(TESTING_LISTS.join(" or "));
    }
    for k in labels.keywords() {
        if !root.join(k).is_dir() {
            missing.push(format!("{k}/"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("{} is missing: {}", root.display(), missing.join(", "))));
    }
    let valid = read_list(&valid_list.unwrap())?;
    let test = read_list(&test_list.unwrap())?;

    let mut split = DatasetSplit { version, labels: labels.clone(), train: vec![], valid: vec![], test: vec![] };
    for dir in sorted_dir(root)? {
        let word = dir.file_name().to_string_lossy().into_owned();
        if word.starts_with('_') || word.starts_with('.') || !dir.path().is_dir() {
            continue;
        }
        for f in sorted_dir(&dir.path())? {
            let name = f.file_name().to_string_lossy().into_owned();
            if !name.to_ascii_lowercase().ends_with(".wav") {
                continue;
            }
            let id = format!("{word}/{name}");
            let part = if test.contains(&id) {
                Split::Test
            } else if valid.contains(&id) {
                Split::Valid
            } else {
                Split::Train
            };
            split.part_mut(part).push(Utterance::new(id, word.as_str(), labels));
        }
    }
    Ok(split)
}

/// Every WAV in `_background_noise_`, sorted by file name.
pub fn load_noise(root: &Path) -> Result<Vec<(String, Waveform)>> {
    let dir = root.join(NOISE_DIR);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is missing: {NOISE_DIR}/", root.display())));
    }
    let mut out = Vec::new();
    for f in sorted_dir(&dir)? {
        let name = f.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".wav") {
            out.push((name, read_wav(&f.path())?));
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{} holds no WAV files", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wav::write_wav;

    fn touch(root: &Path, id: &str) {
        let p = root.join(id);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        write_wav(&p, &Waveform::new(vec![0.0; 400], 16_000)).unwrap();
    }

    fn layout(root: &Path, with_lists: bool) {
        for w in kws_core::data::V1_KEYWORDS {
            touch(root, &format!("{w}/a_nohash_0.wav"));
            touch(root, &format!("{w}/b_nohash_0.wav"));
            touch(root, &format!("{w}/c_nohash_0.wav"));
        }
        touch(root, "cat/d_nohash_0.wav");
        touch(root, "_background_noise_/white_noise.wav");
        if with_lists {
            fs::write(root.join("validation_list.txt"), "yes/b_nohash_0.wav\ncat/d_nohash_0.wav\n").unwrap();
            fs::write(root.join("testing.list"), "yes/c_nohash_0.wav\nno/c_nohash_0.wav\n").unwrap();
        }
    }

    #[test]
    fn splits_follow_the_lists() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), true);
        let s = scan_dataset(dir.path(), DatasetVersion::V1, &LabelMap::v1()).unwrap();
        assert_eq!(s.len(), 31);
        let ids = |p: Split| s.part(p).iter().map(|u| u.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(Split::Test), ["no/c_nohash_0.wav", "yes/c_nohash_0.wav"]);
        assert_eq!(ids(Split::Valid), ["cat/d_nohash_0.wav", "yes/b_nohash_0.wav"]);
        assert!(!ids(Split::Train).iter().any(|i| i.contains("_background_")));
        s.check_disjoint().unwrap();
        let cat = &s.valid[0];
        assert_eq!((cat.class, cat.speaker.as_str()), (10, "d"));
        assert_eq!(load_noise(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn missing_pieces_are_all_named() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), false);
        fs::remove_dir_all(dir.path().join("go")).unwrap();
        fs::remove_dir_all(dir.path().join("up")).unwrap();
        let err = scan_dataset(dir.path(), DatasetVersion::V1, &LabelMap::v1()).unwrap_err().to_string();
        for want in ["validation_list.txt", "testing_list.txt", "go/", "up/"] {
            assert!(err.contains(want), "{want} not in {err}");
        }
        let err = scan_dataset(dir.path(), DatasetVersion::V2, &LabelMap::v2()).unwrap_err().to_string();
        assert!(err.contains("learn/"), "{err}");
    }

    #[test]
    fn noise_directory_required() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_noise(dir.path()).unwrap_err().to_string().contains(NOISE_DIR));
    }
}
