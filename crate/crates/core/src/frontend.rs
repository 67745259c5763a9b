//! Audio front-end: waveform conditioning and MFCC extraction.
//!
//! Per frame the pipeline is pre-emphasis, Hamming window, power spectrum
//! from a real FFT, triangular mel filterbank, log with a floor, and an
//! orthonormal DCT-II. Every frame is processed independently, so shifting
//! the input by one hop shifts the output by exactly one row.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Scales signed 16-bit PCM by 1/32768.
    pub fn from_pcm16(pcm: &[i16], sample_rate: u32) -> Self {
        Self { samples: pcm.iter().map(|&s| s as f32 / 32768.0).collect(), sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Zero-pads at the end when short, keeps the centred `target` samples
    /// when long.
    pub fn pad_or_crop(&self, target: usize) -> Waveform {
        let n = self.samples.len();
        let samples = if n >= target {
            let start = (n - target) / 2;
            self.samples[start..start + target].to_vec()
        } else {
            let mut s = self.samples.clone();
            s.resize(target, 0.0);
            s
        };
        Waveform { samples, sample_rate: self.sample_rate }
    }
}

/// Front-end parameters. Defaults give 25 ms / 10 ms framing and 40
/// coefficients from 40 mel bands at 16 kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub preemphasis: f64,
    pub log_floor: f64,
    /// Samples per utterance after padding / cropping.
    pub clip_samples: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            n_coeffs: 40,
            f_min: 20.0,
            f_max: 7600.0,
            preemphasis: 0.97,
            log_floor: 1e-10,
            clip_samples: 16_000,
        }
    }
}

impl MfccConfig {
    pub fn win_len(&self) -> usize {
        libm::round(self.sample_rate as f64 * self.win_ms / 1000.0) as usize
    }

    pub fn hop_len(&self) -> usize {
        libm::round(self.sample_rate as f64 * self.hop_ms / 1000.0) as usize
    }

    /// `1 + floor((len − win) / hop)`, or `None` when shorter than a window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let win = self.win_len();
        (len >= win).then(|| 1 + (len - win) / self.hop_len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mfcc: {m}")));
        if self.sample_rate == 0 || self.win_len() == 0 || self.hop_len() == 0 {
            return bad("sample rate, window and hop must be positive");
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.win_len() {
            return bad("n_fft must be a power of two no shorter than the window");
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return bad("need 0 < n_coeffs <= n_mels");
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

/// Per-utterance feature matrix, `frames × coeffs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix<S = f32> {
    pub frames: usize,
    pub coeffs: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> MfccMatrix<S> {
    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.coeffs..(t + 1) * self.coeffs]
    }

    pub fn cast<T: Scalar>(&self) -> MfccMatrix<T> {
        MfccMatrix { frames: self.frames, coeffs: self.coeffs, data: self.data.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    /// Channels-first copy (`coeffs × frames`), the layout the temporal
    /// convolution consumes.
    pub fn channels_first(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.data.len()];
        for t in 0..self.frames {
            for c in 0..self.coeffs {
                out[c * self.frames + t] = self.data[t * self.coeffs + c];
            }
        }
        out
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Precomputed MFCC extractor.
#[derive(Debug, Clone)]
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)`.
    filters: Vec<f64>,
    centers_hz: Vec<f64>,
    /// `n_coeffs × n_mels`.
    dct: Vec<f64>,
    twiddle_re: Vec<f64>,
    twiddle_im: Vec<f64>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.win_len();
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * libm::cos(2.0 * PI * n as f64 / (win as f64 - 1.0).max(1.0)))
            .collect();

        let bins = cfg.n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters[m * bins + k] = w;
            }
        }
        let centers_hz = edges[1..=cfg.n_mels].to_vec();

        let n = cfg.n_mels as f64;
        let mut dct = vec![0.0; cfg.n_coeffs * cfg.n_mels];
        for k in 0..cfg.n_coeffs {
            let norm = if k == 0 { libm::sqrt(1.0 / n) } else { libm::sqrt(2.0 / n) };
            for j in 0..cfg.n_mels {
                dct[k * cfg.n_mels + j] = norm * libm::cos(PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n));
            }
        }

        let half = cfg.n_fft / 2;
        let twiddle_re = (0..half).map(|i| libm::cos(-2.0 * PI * i as f64 / cfg.n_fft as f64)).collect();
        let twiddle_im = (0..half).map(|i| libm::sin(-2.0 * PI * i as f64 / cfg.n_fft as f64)).collect();

        Ok(Self { cfg, window, filters, centers_hz, dct, twiddle_re, twiddle_im })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Centre frequency of each mel filter.
    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn check(&self, w: &Waveform) -> Result<usize> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::Input(format!(
                "waveform is {} Hz, front-end expects {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        self.cfg.num_frames(w.len()).ok_or_else(|| {
            Error::Input(format!("{} samples is shorter than one {}-sample window", w.len(), self.cfg.win_len()))
        })
    }

    /// Mel filterbank energies, `frames × n_mels`, before the log.
    pub fn mel_energies(&self, w: &Waveform) -> Result<Vec<f64>> {
        let frames = self.check(w)?;
        let (win, hop, nfft) = (self.cfg.win_len(), self.cfg.hop_len(), self.cfg.n_fft);
        let bins = nfft / 2 + 1;
        let a = self.cfg.preemphasis;
        let mut re = vec![0.0; nfft];
        let mut im = vec![0.0; nfft];
        let mut power = vec![0.0; bins];
        let mut out = vec![0.0; frames * self.cfg.n_mels];
        for f in 0..frames {
            let x = &w.samples[f * hop..f * hop + win];
            re.fill(0.0);
            im.fill(0.0);
            for n in 0..win {
                let prev = if n == 0 { x[0] } else { x[n - 1] };
                re[n] = (x[n] as f64 - a * prev as f64) * self.window[n];
            }
            self.fft(&mut re, &mut im);
            for k in 0..bins {
                power[k] = re[k] * re[k] + im[k] * im[k];
            }
            for m in 0..self.cfg.n_mels {
                let fw = &self.filters[m * bins..(m + 1) * bins];
                out[f * self.cfg.n_mels + m] = fw.iter().zip(&power).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// MFCC matrix of a waveform.
    pub fn compute<S: Scalar>(&self, w: &Waveform) -> Result<MfccMatrix<S>> {
        let mel = self.mel_energies(w)?;
        let n_mels = self.cfg.n_mels;
        let frames = mel.len() / n_mels;
        let mut data = Vec::with_capacity(frames * self.cfg.n_coeffs);
        let mut logmel = vec![0.0; n_mels];
        for f in 0..frames {
            for (l, &e) in logmel.iter_mut().zip(&mel[f * n_mels..(f + 1) * n_mels]) {
                *l = libm::log(e.max(self.cfg.log_floor));
            }
            for k in 0..self.cfg.n_coeffs {
                let row = &self.dct[k * n_mels..(k + 1) * n_mels];
                data.push(S::of(row.iter().zip(&logmel).map(|(a, b)| a * b).sum()));
            }
        }
        Ok(MfccMatrix { frames, coeffs: self.cfg.n_coeffs, data })
    }

    /// In-place iterative radix-2 FFT.
    fn fft(&self, re: &mut [f64], im: &mut [f64]) {
        let n = re.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.twiddle_re[k * step], self.twiddle_im[k * step]);
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), 16_000)
    }

    fn mfcc() -> Mfcc {
        Mfcc::new(MfccConfig::default()).unwrap()
    }

    #[test]
    fn one_second_gives_98_by_40() {
        let m = mfcc().compute::<f32>(&noise(16_000, 1)).unwrap();
        assert_eq!((m.frames, m.coeffs), (98, 40));
        assert_eq!(m.data.len(), 98 * 40);
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(matches!(mfcc().compute::<f32>(&noise(399, 1)), Err(Error::Input(_))));
        assert_eq!(mfcc().compute::<f32>(&noise(400, 1)).unwrap().frames, 1);
    }

    #[test]
    fn fft_matches_direct_dft() {
        let m = mfcc();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 512];
        m.fft(&mut re, &mut im);
        for k in [0usize, 1, 17, 255, 256] {
            let (mut r, mut i) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / 512.0;
                r += v * libm::cos(ang);
                i += v * libm::sin(ang);
            }
            assert!((r - re[k]).abs() < 1e-9 && (i - im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn dc_input_gives_identical_rows() {
        let w = Waveform::new(vec![0.25; 16_000], 16_000);
        let m = mfcc().compute::<f64>(&w).unwrap();
        for t in 1..m.frames {
            assert_eq!(m.row(t), m.row(0));
        }
    }

    #[test]
    fn sine_peaks_at_nearest_filter() {
        let f = mfcc();
        let w = Waveform::new(
            (0..16_000).map(|n| (0.5 * libm::sin(2.0 * PI * 1000.0 * n as f64 / 16_000.0)) as f32).collect(),
            16_000,
        );
        let mel = f.mel_energies(&w).unwrap();
        let nearest = f
            .filter_centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        for t in 1..97 {
            let row = &mel[t * 40..(t + 1) * 40];
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn amplitude_scaling_only_moves_c0() {
        let f = mfcc();
        let w = noise(4000, 9);
        let s = 0.3f32;
        let ws = Waveform::new(w.samples.iter().map(|v| v * s).collect(), 16_000);
        let (a, b) = (f.compute::<f64>(&w).unwrap(), f.compute::<f64>(&ws).unwrap());
        let shift = 2.0 * libm::log(s as f64) * libm::sqrt(40.0);
        for t in 0..a.frames {
            // f32 samples: s·x is rounded, so allow a little slack on c0
            assert!((b.row(t)[0] - a.row(t)[0] - shift).abs() < 1e-4);
            for k in 1..40 {
                assert!((b.row(t)[k] - a.row(t)[k]).abs() < 1e-6, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn hop_shift_shifts_rows() {
        let f = mfcc();
        let w = noise(6000, 4);
        let mut shifted = noise(160, 5).samples;
        shifted.extend_from_slice(&w.samples);
        let a = f.compute::<f64>(&w).unwrap();
        let b = f.compute::<f64>(&Waveform::new(shifted, 16_000)).unwrap();
        for t in 0..a.frames {
            assert_eq!(a.row(t), b.row(t + 1));
        }
    }

    #[test]
    fn pad_or_crop_examples() {
        let w = Waveform::new((0..18_000).map(|i| i as f32).collect(), 16_000);
        let c = w.pad_or_crop(16_000);
        assert_eq!(c.samples[0], 1000.0);
        assert_eq!(*c.samples.last().unwrap(), 16_999.0);
        let short = Waveform::new(vec![1.0; 15_000], 16_000).pad_or_crop(16_000);
        assert_eq!(short.len(), 16_000);
        assert!(short.samples[15_000..].iter().all(|&v| v == 0.0));
        let exact = Waveform::new(vec![0.5; 16_000], 16_000);
        assert_eq!(exact.pad_or_crop(16_000), exact);
    }

    #[test]
    fn silence_is_finite() {
        let m = mfcc().compute::<f32>(&Waveform::new(vec![0.0; 16_000], 16_000)).unwrap();
        assert!(m.data.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn frame_count_formula(len in 400usize..20_000) {
            let m = mfcc().compute::<f32>(&noise(len, len as u64)).unwrap();
            prop_assert_eq!(m.frames, 1 + (len - 400) / 160);
            prop_assert!(m.data.iter().all(|v| v.is_finite()));
        }
    }
}
