//! Featurisation with an optional on-disk MFCC cache.
//!
//! Cache records live in one file per utterance, named by the SHA-256 of
//! the front-end settings and the conditioned samples. A record is
//! `KWSF`, frame count and coefficient count (`u32` LE), then the matrix as
//! `f32` LE. Unreadable records are recomputed and overwritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use kws_core::frontend::{Mfcc, MfccConfig, MfccMatrix, Waveform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const RECORD_MAGIC: &[u8; 4] = b"KWSF";

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
    config_hash: [u8; 32],
}

impl FeatureCache {
    pub fn new(dir: &Path, cfg: &MfccConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_vec(cfg).expect("front-end settings always serialise");
        Ok(Self { dir: dir.to_path_buf(), config_hash: Sha256::digest(json).into() })
    }

    pub fn key(&self, w: &Waveform) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash);
        h.update(w.sample_rate.to_le_bytes());
        for s in &w.samples {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.mfcc"))
    }

    pub fn get(&self, key: &str) -> Option<MfccMatrix<f32>> {
        let bytes = fs::read(self.path(key)).ok()?;
        if bytes.len() < 12 || &bytes[..4] != RECORD_MAGIC {
            return None;
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let coeffs = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * frames * coeffs {
            return None;
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Some(MfccMatrix { frames, coeffs, data })
    }

    pub fn put(&self, key: &str, m: &MfccMatrix<f32>) -> Result<()> {
        let path = self.path(key);
        let parent = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let mut out = Vec::with_capacity(12 + 4 * m.data.len());
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&(m.frames as u32).to_le_bytes());
        out.extend_from_slice(&(m.coeffs as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Pads or crops to the configured clip length, then computes (or looks
/// up) the MFCC matrix.
#[derive(Debug, Clone)]
pub struct Featurizer {
    mfcc: Mfcc,
    cache: Option<FeatureCache>,
}

impl Featurizer {
    pub fn new(cfg: &MfccConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let cache = cache_dir.map(|d| FeatureCache::new(d, cfg)).transpose()?;
        Ok(Self { mfcc: Mfcc::new(cfg.clone())?, cache })
    }

    pub fn config(&self) -> &MfccConfig {
        self.mfcc.config()
    }

    pub fn features(&self, w: &Waveform) -> Result<MfccMatrix<f32>> {
        let w = w.pad_or_crop(self.mfcc.config().clip_samples);
        let Some(cache) = &self.cache else {
            return Ok(self.mfcc.compute(&w)?);
        };
        let key = cache.key(&w);
        if let Some(m) = cache.get(&key) {
            return Ok(m);
        }
        let m = self.mfcc.compute(&w)?;
        cache.put(&key, &m)?;
        Ok(m)
    }

    /// Featurises `n` clips fetched by `load`, on up to `workers` threads.
    /// The result is in index order whatever the worker count.
    pub fn features_all<F>(&self, n: usize, workers: usize, load: F) -> Result<Vec<MfccMatrix<f32>>>
    where
        F: Fn(usize) -> Result<Waveform> + Sync,
    {
        let workers = workers.clamp(1, n.max(1));
        if workers == 1 {
            return (0..n).map(|i| self.features(&load(i)?)).collect();
        }
        let results: Vec<Vec<(usize, Result<MfccMatrix<f32>>)>> = thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let load = &load;
                    s.spawn(move || (w..n).step_by(workers).map(|i| (i, load(i).and_then(|x| self.features(&x)))).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("feature worker panicked")).collect()
        });
        let mut out: Vec<Option<MfccMatrix<f32>>> = (0..n).map(|_| None).collect();
        for (i, r) in results.into_iter().flatten() {
            out[i] = Some(r?);
        }
        Ok(out.into_iter().map(|m| m.expect("every index featurised")).collect())
    }
}
