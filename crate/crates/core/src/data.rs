//! Label maps, dataset splits, synthetic data, silence crops and batching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorStore, SILENCE};
use crate::error::{Error, Result};
use crate::frontend::{MfccMatrix, Waveform};
use crate::rng::{self, SplitMix64};

pub const UNKNOWN: &str = "unknown";

pub const V1_KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const V2_EXTRA_KEYWORDS: [&str; 4] = ["backward", "forward", "follow", "learn"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVersion {
    V1,
    V2,
    /// Caller-supplied keyword list (synthetic data).
    Custom,
}

/// Class names in index order: keywords, then `unknown`, then `silence`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    classes: Vec<String>,
}

impl LabelMap {
    /// 12 classes.
    pub fn v1() -> Self {
        Self::build(V1_KEYWORDS.iter().copied())
    }

    /// 16 classes.
    pub fn v2() -> Self {
        Self::build(V1_KEYWORDS.iter().chain(&V2_EXTRA_KEYWORDS).copied())
    }

    pub fn custom<W: AsRef<str>>(keywords: &[W]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for k in keywords.iter().map(|k| k.as_ref()) {
            if k.is_empty() || k == UNKNOWN || k == SILENCE || k.starts_with('_') {
                return Err(Error::Config(format!("`{k}` cannot be a keyword")));
            }
            if !seen.insert(k) {
                return Err(Error::Config(format!("keyword `{k}` listed twice")));
            }
        }
        if keywords.is_empty() {
            return Err(Error::Config("keyword list is empty".into()));
        }
        Ok(Self::build(keywords.iter().map(|k| k.as_ref())))
    }

    pub fn for_version<W: AsRef<str>>(version: DatasetVersion, keywords: &[W]) -> Result<Self> {
        match version {
            DatasetVersion::V1 => Ok(Self::v1()),
            DatasetVersion::V2 => Ok(Self::v2()),
            DatasetVersion::Custom => Self::custom(keywords),
        }
    }

    fn build<'a>(keywords: impl Iterator<Item = &'a str>) -> Self {
        let mut classes: Vec<String> = keywords.map(str::to_string).collect();
        classes.push(UNKNOWN.to_string());
        classes.push(SILENCE.to_string());
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn keywords(&self) -> &[String] {
        &self.classes[..self.classes.len() - 2]
    }

    pub fn num_keywords(&self) -> usize {
        self.classes.len() - 2
    }

    pub fn unknown(&self) -> usize {
        self.classes.len() - 2
    }

    pub fn silence(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn is_keyword(&self, class: usize) -> bool {
        class < self.num_keywords()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Keyword index for target words, `silence` for silence and `unknown`
    /// for everything else.
    pub fn class_of_word(&self, word: &str) -> usize {
        if word == SILENCE {
            return self.silence();
        }
        self.keywords().iter().position(|k| k == word).unwrap_or(self.unknown())
    }
}

/// One audio clip and its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Path relative to the dataset root, or a generator id.
    pub id: String,
    pub word: String,
    pub class: usize,
    pub speaker: String,
}

impl Utterance {
    pub fn new(id: impl Into<String>, word: impl Into<String>, labels: &LabelMap) -> Self {
        let id = id.into();
        let word = word.into();
        let class = labels.class_of_word(&word);
        let speaker = speaker_of(&id).to_string();
        Self { id, word, class, speaker }
    }
}

/// Speaker hash of a `word/<speaker>_nohash_<n>.wav` path.
pub fn speaker_of(id: &str) -> &str {
    let file = id.rsplit('/').next().unwrap_or(id);
    file.split("_nohash_").next().unwrap_or(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub version: DatasetVersion,
    pub labels: LabelMap,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl DatasetSplit {
    pub fn part(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn part_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted distinct words over all splits.
    pub fn words(&self) -> Vec<String> {
        let set: BTreeSet<&str> = Split::ALL.iter().flat_map(|&s| self.part(s)).map(|u| u.word.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Fails if any id appears in two splits (or twice in one).
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in Split::ALL {
            for u in self.part(s) {
                if !seen.insert(u.id.as_str()) {
                    return Err(Error::Dataset(format!("`{}` appears more than once across splits", u.id)));
                }
            }
        }
        Ok(())
    }

    /// Silence clips per split: the average keyword-class count of that
    /// split, rounded.
    pub fn silence_counts(&self) -> [usize; 3] {
        let k = self.labels.num_keywords().max(1);
        Split::ALL.map(|s| {
            let n = self.part(s).iter().filter(|u| self.labels.is_keyword(u.class)).count();
            (n + k / 2) / k
        })
    }

    /// Appends silence clips cut from `noise` to every split and returns
    /// their audio keyed by utterance id.
    pub fn add_silence(&mut self, noise: &[Waveform], duration: usize, seed: u64) -> Result<BTreeMap<String, Waveform>> {
        let counts = self.silence_counts();
        let mut audio = BTreeMap::new();
        for (s, count) in Split::ALL.into_iter().zip(counts) {
            let mut r = rng::stream(seed, "silence", s as u64);
            let crops = make_silence_samples(noise, count, duration, &mut r)?;
            for (i, w) in crops.into_iter().enumerate() {
                let id = format!("{SILENCE}/{}_{i:05}", s.name());
                let u = Utterance { id: id.clone(), word: SILENCE.into(), class: self.labels.silence(), speaker: String::new() };
                self.part_mut(s).push(u);
                audio.insert(id, w);
            }
        }
        Ok(audio)
    }
}

/// `count` crops of `duration` samples from randomly chosen noise clips at
/// random offsets, each scaled by a random factor in `[0, 1]`. Clips
/// shorter than `duration` are never chosen.
pub fn make_silence_samples<R: Rng>(noise: &[Waveform], count: usize, duration: usize, rng: &mut R) -> Result<Vec<Waveform>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<&Waveform> = noise.iter().filter(|w| w.len() >= duration).collect();
    if usable.is_empty() {
        return Err(Error::Dataset(format!("no background noise clip has at least {duration} samples")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let clip = usable[rng.gen_range(0..usable.len())];
        let start = rng.gen_range(0..=clip.len() - duration);
        let gain: f32 = rng.gen_range(0.0..=1.0);
        let samples = clip.samples[start..start + duration].iter().map(|v| v * gain).collect();
        out.push(Waveform::new(samples, clip.sample_rate));
    }
    Ok(out)
}

/// Settings of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Extra pseudo-words that map to `unknown`.
    pub unknown_words: usize,
    pub silence: bool,
    pub snr_db: f64,
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 40,
            unknown_words: 0,
            silence: false,
            snr_db: 20.0,
            sample_rate: 16_000,
            clip_samples: 16_000,
            seed: 0,
        }
    }
}

const PSEUDO_WORDS: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
];

fn pseudo_word(i: usize) -> String {
    PSEUDO_WORDS.get(i).map_or_else(|| format!("word{i:03}"), |w| w.to_string())
}

/// Generated utterances, their audio, background noise and matching
/// fallback anchors.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub split: DatasetSplit,
    pub audio: BTreeMap<String, Waveform>,
    pub noise: Vec<(String, Waveform)>,
    pub anchors: AnchorStore,
}

/// Noise-free signature of pseudo-word `k`: three sinusoids, each under its
/// own Gaussian envelope, all derived from `(seed, k)`.
pub fn signature(seed: u64, k: usize, len: usize, sample_rate: u32) -> Vec<f32> {
    let mut g = SplitMix64::new(rng::derive_seed(seed, "synth-word", k as u64));
    let sr = sample_rate as f64;
    let dur = len as f64 / sr;
    let parts: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = 200.0 * libm::pow(2.0, g.next_open01() * 4.5);
            let center = dur * (0.2 + 0.6 * g.next_open01());
            let width = dur * (0.06 + 0.14 * g.next_open01());
            let phase = core::f64::consts::TAU * g.next_open01();
            (freq, center, width, phase)
        })
        .collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let v: f64 = parts
                .iter()
                .map(|&(f, c, w, p)| {
                    let e = libm::exp(-0.5 * ((t - c) / w) * ((t - c) / w));
                    0.3 * e * libm::sin(core::f64::consts::TAU * f * t + p)
                })
                .sum();
            v as f32
        })
        .collect()
}

fn background_noise(seed: u64, len: usize, sample_rate: u32) -> Vec<(String, Waveform)> {
    let kinds = ["white_noise", "pink_noise", "brown_noise"];
    kinds
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut g = SplitMix64::new(rng::derive_seed(seed, "synth-noise-bed", i as u64));
            let mut state = 0.0f64;
            // leaky integration darkens the spectrum
            let leak = [0.0, 0.9, 0.99][i];
            let gain = libm::sqrt(1.0 - leak * leak);
            let samples = (0..len)
                .map(|_| {
                    state = leak * state + g.next_normal() * gain;
                    (0.1 * state) as f32
                })
                .collect();
            (format!("{name}.wav"), Waveform::new(samples, sample_rate))
        })
        .collect()
}

/// Builds the synthetic corpus. Every utterance of a word is that word's
/// signature plus white Gaussian noise at `snr_db`; each word's utterances
/// are split 80/10/10.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_classes < 2 || cfg.samples_per_class == 0 {
        return Err(Error::Config("synthetic data needs at least 2 classes and 1 sample per class".into()));
    }
    if cfg.clip_samples == 0 || cfg.sample_rate == 0 || !cfg.snr_db.is_finite() {
        return Err(Error::Config("synthetic clip length, sample rate and SNR must be valid".into()));
    }
    let keywords: Vec<String> = (0..cfg.num_classes).map(pseudo_word).collect();
    let labels = LabelMap::custom(&keywords)?;
    let mut split = DatasetSplit { version: DatasetVersion::Custom, labels, train: vec![], valid: vec![], test: vec![] };
    let mut audio = BTreeMap::new();
    let n = cfg.samples_per_class;
    let n_train = n * 8 / 10;
    let n_valid = (n - n_train) / 2;
    let mut words = keywords.clone();
    for k in 0..cfg.num_classes + cfg.unknown_words {
        let word = pseudo_word(k);
        if k >= cfg.num_classes {
            words.push(word.clone());
        }
        let clean = signature(cfg.seed, k, cfg.clip_samples, cfg.sample_rate);
        let power = clean.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / clean.len() as f64;
        let sigma = libm::sqrt(power / libm::pow(10.0, cfg.snr_db / 10.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "synth-split", k as u64));
        for (rank, &i) in order.iter().enumerate() {
            let speaker = format!("{:08x}", rng::derive_seed(cfg.seed, &word, i as u64) as u32);
            let id = format!("{word}/{speaker}_nohash_{i}.wav");
            let mut g = SplitMix64::new(rng::derive_seed(cfg.seed, "synth-noise", (k * n + i) as u64));
            let samples = clean.iter().map(|&c| c + (sigma * g.next_normal()) as f32).collect();
            audio.insert(id.clone(), Waveform::new(samples, cfg.sample_rate));
            let u = Utterance::new(id, word.clone(), &split.labels);
            let part = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            split.part_mut(part).push(u);
        }
    }
    for s in Split::ALL {
        split.part_mut(s).sort_by(|a, b| a.id.cmp(&b.id));
    }
    let noise = background_noise(cfg.seed, 4 * cfg.clip_samples, cfg.sample_rate);
    if cfg.silence {
        let clips: Vec<Waveform> = noise.iter().map(|(_, w)| w.clone()).collect();
        audio.extend(split.add_silence(&clips, cfg.clip_samples, cfg.seed)?);
    }
    let anchors = AnchorStore::fallback(&words, 768, cfg.seed)?;
    Ok(SynthDataset { split, audio, noise, anchors })
}

/// A featurised utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Index into [`FeatureSet::words`].
    pub word: usize,
    pub class: usize,
    pub features: MfccMatrix<f32>,
}

/// Featurised splits plus the word vocabulary they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub labels: LabelMap,
    pub words: Vec<String>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl FeatureSet {
    /// Runs `featurize` over every utterance, in split order.
    pub fn build<F>(split: &DatasetSplit, mut featurize: F) -> Result<Self>
    where
        F: FnMut(&Utterance) -> Result<MfccMatrix<f32>>,
    {
        let words = split.words();
        let mut run = |part: &[Utterance]| -> Result<Vec<Example>> {
            part.iter()
                .map(|u| {
                    let word = words.binary_search(&u.word).expect("word collected from the split");
                    Ok(Example { word, class: u.class, features: featurize(u)? })
                })
                .collect()
        };
        let train = run(&split.train)?;
        let valid = run(&split.valid)?;
        let test = run(&split.test)?;
        Ok(Self { labels: split.labels.clone(), words, train, valid, test })
    }

    pub fn part(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn is_silence(&self, e: &Example) -> bool {
        e.class == self.labels.silence()
    }

    /// Indices of `part`, optionally without silence.
    pub fn indices(&self, split: Split, drop_silence: bool) -> Vec<usize> {
        let part = self.part(split);
        (0..part.len()).filter(|&i| !(drop_silence && self.is_silence(&part[i]))).collect()
    }
}

/// Shuffles `indices` with the `(seed, epoch)` stream and cuts them into
/// batches; only the last batch may be short.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
