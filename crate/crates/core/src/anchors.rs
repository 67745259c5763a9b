//! Per-word text anchor vectors.

use alloc::collections::BTreeMap;
use alloc::fmt;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, SplitMix64};

pub const SILENCE: &str = "silence";
pub const ANCHOR_FORMAT_VERSION: u32 = 1;

/// Borrowed view of one stored anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextAnchor<'a> {
    pub word: &'a str,
    pub vector: &'a [f64],
    pub source: &'a str,
}

/// Validated, immutable word → vector map of a single dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStore {
    dim: usize,
    source: String,
    anchors: BTreeMap<String, Vec<f64>>,
}

impl AnchorStore {
    /// Builds a store, rejecting empty or non-lowercase words, duplicates,
    /// wrong lengths and non-finite values.
    pub fn new<I>(dim: usize, source: impl Into<String>, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        if dim == 0 {
            return Err(Error::Anchor("dimension must be positive".into()));
        }
        let mut anchors = BTreeMap::new();
        for (word, vector) in entries {
            if word.is_empty() || word.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::Anchor(format!("word `{word}` must be a lowercase token")));
            }
            if vector.len() != dim {
                return Err(Error::Anchor(format!("`{word}` has {} values, expected {dim}", vector.len())));
            }
            if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Anchor(format!("`{word}` has a non-finite value at offset {i}")));
            }
            if anchors.contains_key(&word) {
                return Err(Error::Anchor(format!("duplicate word `{word}`")));
            }
            anchors.insert(word, vector);
        }
        Ok(Self { dim, source: source.into(), anchors })
    }

    /// Seeded unit-norm Gaussian vectors. Each word's vector depends only on
    /// `(seed, word)`: a SplitMix64 stream keyed by `seed ^ fnv1a(word)`
    /// feeds Box–Muller normals, which are then scaled to unit L2 norm.
    pub fn fallback<W: AsRef<str>>(words: &[W], dim: usize, seed: u64) -> Result<Self> {
        let entries = words
            .iter()
            .map(|w| w.as_ref())
            .filter(|w| *w != SILENCE)
            .map(|w| (w.to_string(), fallback_vector(w, dim, seed)));
        Self::new(dim, "fallback", entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.anchors.keys().map(String::as_str)
    }

    pub fn get(&self, word: &str) -> Result<TextAnchor<'_>> {
        if word == SILENCE {
            return Err(Error::SilenceAnchor);
        }
        let (word, vector) = self.anchors.get_key_value(word).ok_or_else(|| Error::MissingAnchor(word.to_string()))?;
        Ok(TextAnchor { word, vector, source: &self.source })
    }

    /// Checks that every word except `silence` has an anchor, listing all
    /// that are missing.
    pub fn require<W: AsRef<str>>(&self, words: &[W]) -> Result<()> {
        let missing: Vec<&str> =
            words.iter().map(|w| w.as_ref()).filter(|w| *w != SILENCE && !self.anchors.contains_key(*w)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Anchor(format!("missing anchors for: {}", missing.join(", "))))
        }
    }

    pub fn to_file(&self) -> AnchorFile {
        AnchorFile {
            format_version: ANCHOR_FORMAT_VERSION,
            dim: self.dim,
            source: self.source.clone(),
            anchors: AnchorEntries(self.anchors.iter().map(|(w, v)| (w.clone(), v.clone())).collect()),
        }
    }

    pub fn from_file(file: AnchorFile) -> Result<Self> {
        if file.format_version != ANCHOR_FORMAT_VERSION {
            return Err(Error::Anchor(format!("unsupported format_version {}", file.format_version)));
        }
        Self::new(file.dim, file.source, file.anchors.0)
    }
}

fn fallback_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut g = SplitMix64::new(seed ^ fnv1a(word.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| g.next_normal()).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// On-disk layout of an anchor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub format_version: u32,
    pub dim: usize,
    pub source: String,
    pub anchors: AnchorEntries,
}

/// Anchor entries in file order. Deserialising keeps repeated keys so
/// validation can report them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorEntries(pub Vec<(String, Vec<f64>)>);

impl Serialize for AnchorEntries {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> core::result::Result<Ser::Ok, Ser::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for AnchorEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = AnchorEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from word to an array of numbers")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> core::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(AnchorEntries(out))
            }
        }
        d.deserialize_map(EntriesVisitor)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;

    fn words() -> Vec<&'static str> {
        vec!["yes", "no", "up", "down"]
    }

    #[test]
    fn fallback_is_deterministic_unit_and_distinct() {
        let a = AnchorStore::fallback(&words(), 768, 17).unwrap();
        let b = AnchorStore::fallback(&words(), 768, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source(), "fallback");
        for w in words() {
            let v = a.get(w).unwrap().vector;
            let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_ne!(a.get("yes").unwrap().vector, a.get("no").unwrap().vector);
        let c = AnchorStore::fallback(&words(), 768, 18).unwrap();
        assert_ne!(a.get("yes").unwrap().vector, c.get("yes").unwrap().vector);
    }

    #[test]
    fn fallback_vector_depends_only_on_word() {
        let a = AnchorStore::fallback(&["yes", "no"], 16, 3).unwrap();
        let b = AnchorStore::fallback(&["go", "yes"], 16, 3).unwrap();
        assert_eq!(a.get("yes").unwrap().vector, b.get("yes").unwrap().vector);
    }

    #[test]
    fn fallback_first_value_is_pinned() {
        // Box–Muller on SplitMix64 keyed by 0 ^ fnv1a("yes")
        let mut g = SplitMix64::new(fnv1a(b"yes"));
        let raw: Vec<f64> = (0..4).map(|_| g.next_normal()).collect();
        let norm = libm::sqrt(raw.iter().map(|x| x * x).sum::<f64>());
        let s = AnchorStore::fallback(&["yes"], 4, 0).unwrap();
        assert_eq!(s.get("yes").unwrap().vector[0], raw[0] / norm);
    }

    #[test]
    fn lookups() {
        let s = AnchorStore::fallback(&words(), 8, 1).unwrap();
        assert_eq!(s.get("silence"), Err(Error::SilenceAnchor));
        assert_eq!(s.get("cat"), Err(Error::MissingAnchor("cat".into())));
        let empty = AnchorStore::new(8, "x", Vec::new()).unwrap();
        assert!(matches!(empty.get("yes"), Err(Error::MissingAnchor(_))));
        assert!(s.require(&["yes", "silence"]).is_ok());
        let err = s.require(&["yes", "cat", "dog"]).unwrap_err();
        assert!(format!("{err}").contains("cat, dog"));
    }

    #[test]
    fn fallback_skips_silence() {
        let s = AnchorStore::fallback(&["yes", "silence"], 4, 1).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn validation_errors_name_the_word() {
        let bad_len = AnchorStore::new(3, "t", vec![("yes".into(), vec![1.0, 2.0])]).unwrap_err();
        assert!(format!("{bad_len}").contains("`yes`"));
        let nan = AnchorStore::new(2, "t", vec![("no".into(), vec![1.0, f64::NAN])]).unwrap_err();
        assert!(format!("{nan}").contains("offset 1"));
        let dup = AnchorStore::new(1, "t", vec![("go".into(), vec![1.0]), ("go".into(), vec![2.0])]).unwrap_err();
        assert!(format!("{dup}").contains("duplicate"));
        assert!(AnchorStore::new(1, "t", vec![("Go".into(), vec![1.0])]).is_err());
        assert!(AnchorStore::new(0, "t", Vec::new()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let s = AnchorStore::fallback(&words(), 5, 9).unwrap();
        let back = AnchorStore::from_file(s.to_file()).unwrap();
        assert_eq!(back, s);
        let mut f = s.to_file();
        f.format_version = 2;
        assert!(AnchorStore::from_file(f).is_err());
    }
}
