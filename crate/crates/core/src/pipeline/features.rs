//! Windows of per-link amplitudes and the 11 window features.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::LinkId;

pub const FEATURE_COUNT: usize = 11;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "nbvi",
    "amp_variance",
    "mad",
    "iqr",
    "peak_to_peak",
    "spectral_entropy",
    "lag1_autocorr",
    "mean_subcarrier_corr",
    "snr_proxy",
    "mean_amplitude",
    "amp_skewness",
];

/// Default cap on the SNR proxy, applied when the mean-amplitude series is
/// (near) constant.
pub const SNR_CAP: f64 = 1e4;

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("window needs at least {min} packets, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("packet {index} has {got} subcarriers, expected {expected}")]
    Ragged { index: usize, expected: usize, got: usize },
    #[error("timestamps must be non-decreasing")]
    Unordered,
    #[error("amplitudes must be finite and non-negative")]
    BadAmplitude,
}

/// `W` consecutive amplitude vectors of one link.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiWindow {
    pub link: LinkId,
    pub timestamps_us: Vec<u64>,
    /// Row-major `W x K`.
    pub amplitudes: Vec<f64>,
    pub subcarriers: usize,
}

impl CsiWindow {
    pub fn new(link: LinkId, timestamps_us: Vec<u64>, rows: &[Vec<f64>]) -> Result<Self, WindowError> {
        let k = rows.first().map_or(0, Vec::len);
        let mut amplitudes = Vec::with_capacity(rows.len() * k);
        for (index, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(WindowError::Ragged { index, expected: k, got: r.len() });
            }
            amplitudes.extend_from_slice(r);
        }
        Self::from_flat(link, timestamps_us, amplitudes, k)
    }

    pub fn from_flat(link: LinkId, timestamps_us: Vec<u64>, amplitudes: Vec<f64>, subcarriers: usize) -> Result<Self, WindowError> {
        if subcarriers == 0 || amplitudes.len() != timestamps_us.len() * subcarriers {
            return Err(WindowError::Ragged { index: 0, expected: subcarriers, got: amplitudes.len() / timestamps_us.len().max(1) });
        }
        if timestamps_us.windows(2).any(|w| w[0] > w[1]) {
            return Err(WindowError::Unordered);
        }
        if amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(WindowError::BadAmplitude);
        }
        Ok(Self { link, timestamps_us, amplitudes, subcarriers })
    }

    /// A window with synthetic 1 s spaced timestamps, for fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, WindowError> {
        let ts = (0..rows.len() as u64).map(|i| i * 1_000_000).collect();
        Self::new(LinkId { tx: 0, rx: 1 }, ts, rows)
    }

    pub fn len(&self) -> usize {
        self.timestamps_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_us.is_empty()
    }

    pub fn start_us(&self) -> u64 {
        self.timestamps_us.first().copied().unwrap_or(0)
    }

    pub fn end_us(&self) -> u64 {
        self.timestamps_us.last().copied().unwrap_or(0)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.amplitudes[t * self.subcarriers..(t + 1) * self.subcarriers]
    }

    fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.amplitudes.iter().skip(k).step_by(self.subcarriers).copied()
    }

    /// Per-packet mean amplitude across subcarriers.
    pub fn mean_series(&self) -> Vec<f64> {
        (0..self.len()).map(|t| self.row(t).iter().sum::<f64>() / self.subcarriers as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub nbvi: f64,
    pub amp_variance: f64,
    pub mad: f64,
    pub iqr: f64,
    pub peak_to_peak: f64,
    pub spectral_entropy: f64,
    pub lag1_autocorr: f64,
    pub mean_subcarrier_corr: f64,
    pub snr_proxy: f64,
    pub mean_amplitude: f64,
    pub amp_skewness: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.nbvi,
            self.amp_variance,
            self.mad,
            self.iqr,
            self.peak_to_peak,
            self.spectral_entropy,
            self.lag1_autocorr,
            self.mean_subcarrier_corr,
            self.snr_proxy,
            self.mean_amplitude,
            self.amp_skewness,
        ]
    }

    pub fn from_array(a: [f64; FEATURE_COUNT]) -> Self {
        Self {
            nbvi: a[0],
            amp_variance: a[1],
            mad: a[2],
            iqr: a[3],
            peak_to_peak: a[4],
            spectral_entropy: a[5],
            lag1_autocorr: a[6],
            mean_subcarrier_corr: a[7],
            snr_proxy: a[8],
            mean_amplitude: a[9],
            amp_skewness: a[10],
        }
    }
}

/// Conditions met while computing a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureFlags {
    /// Some subcarrier had zero mean; NBVI used epsilon in its place.
    pub nbvi_guarded: bool,
    /// SNR proxy hit the cap.
    pub snr_capped: bool,
}

impl FeatureFlags {
    pub fn bits(&self) -> u8 {
        self.nbvi_guarded as u8 | (self.snr_capped as u8) << 1
    }

    pub fn from_bits(b: u8) -> Self {
        Self { nbvi_guarded: b & 1 != 0, snr_capped: b & 2 != 0 }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// Mean over subcarriers of `sigma_k / mu_k` (population sigma). Zero means
/// are replaced by `epsilon`; the second value reports whether that happened.
pub fn nbvi_guarded(window: &CsiWindow, epsilon: f64) -> (f64, bool) {
    let mut guarded = false;
    let total: f64 = (0..window.subcarriers)
        .map(|k| {
            let col: Vec<f64> = window.column(k).collect();
            let mu = mean(&col);
            let sigma = variance(&col).sqrt();
            if mu == 0.0 {
                guarded = true;
                sigma / epsilon
            } else {
                sigma / mu
            }
        })
        .sum();
    (total / window.subcarriers as f64, guarded)
}

pub fn nbvi(window: &CsiWindow) -> f64 {
    nbvi_guarded(window, 1e-8).0
}

/// Mean over subcarriers of the population variance of `|H_k|`.
pub fn amplitude_variance(window: &CsiWindow) -> f64 {
    (0..window.subcarriers).map(|k| variance(&window.column(k).collect::<Vec<_>>())).sum::<f64>() / window.subcarriers as f64
}

/// Computes feature vectors; holds a cached FFT plan per window length.
pub struct FeatureExtractor {
    epsilon: f64,
    snr_cap: f64,
    plans: Vec<(usize, Arc<dyn Fft<f64>>)>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("epsilon", &self.epsilon).field("snr_cap", &self.snr_cap).finish()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(1e-8, SNR_CAP)
    }
}

impl FeatureExtractor {
    pub fn new(epsilon: f64, snr_cap: f64) -> Self {
        Self { epsilon, snr_cap, plans: Vec::new() }
    }

    fn plan(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        if let Some((_, p)) = self.plans.iter().find(|(len, _)| *len == n) {
            return p.clone();
        }
        let p = FftPlanner::new().plan_fft_forward(n);
        self.plans.push((n, p.clone()));
        p
    }

    /// Shannon entropy (bits) of the normalized periodogram of `series`
    /// over the non-DC bins `1..=n/2`. Zero when the series has no power.
    pub fn spectral_entropy(&mut self, series: &[f64]) -> f64 {
        let n = series.len();
        let m = mean(series);
        let mut buf: Vec<Complex<f64>> = series.iter().map(|x| Complex::new(x - m, 0.0)).collect();
        self.plan(n).process(&mut buf);
        let power: Vec<f64> = buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = power.iter().sum();
        // relative floor so rounding residue of a constant series counts as silence
        let scale: f64 = series.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if total <= scale * n as f64 * 1e-24 {
            return 0.0;
        }
        -power.iter().filter(|&&p| p > 0.0).map(|p| p / total).map(|q| q * q.log2()).sum::<f64>()
    }

    pub fn extract(&mut self, window: &CsiWindow) -> Result<(FeatureVector, FeatureFlags), WindowError> {
        let w = window.len();
        if w < 4 {
            return Err(WindowError::TooShort { min: 4, got: w });
        }
        let k = window.subcarriers;
        let mut flags = FeatureFlags::default();

        let mut nbvi_sum = 0.0;
        let mut var_sum = 0.0;
        // standardized columns summed over subcarriers, for the pairwise correlation
        let mut z_sum = vec![0.0; w];
        let mut z_sq = 0.0;
        let mut col = vec![0.0; w];
        for kk in 0..k {
            for (t, c) in col.iter_mut().enumerate() {
                *c = window.amplitudes[t * k + kk];
            }
            let mu = mean(&col);
            let var = variance(&col);
            let sigma = var.sqrt();
            if mu == 0.0 {
                flags.nbvi_guarded = true;
                nbvi_sum += sigma / self.epsilon;
            } else {
                nbvi_sum += sigma / mu;
            }
            var_sum += var;
            if sigma > 1e-12 * mu.abs().max(1.0) {
                for (t, c) in col.iter().enumerate() {
                    let z = (c - mu) / sigma;
                    z_sum[t] += z;
                    z_sq += z * z;
                }
            }
        }

        let m = window.mean_series();
        let mbar = mean(&m);
        let mvar = variance(&m);
        let msd = mvar.sqrt();
        let flat = msd <= 1e-12 * mbar.abs().max(1.0);

        let mut sorted = m.clone();
        sorted.sort_by(f64::total_cmp);
        let med = quantile_sorted(&sorted, 0.5);
        let mad = median(&m.iter().map(|x| (x - med).abs()).collect::<Vec<_>>());
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let peak_to_peak = sorted[w - 1] - sorted[0];

        let (lag1, skew) = if flat {
            (0.0, 0.0)
        } else {
            let d: Vec<f64> = m.iter().map(|x| x - mbar).collect();
            let num: f64 = d.windows(2).map(|p| p[0] * p[1]).sum();
            let den: f64 = d.iter().map(|x| x * x).sum();
            let m3 = d.iter().map(|x| x * x * x).sum::<f64>() / w as f64;
            (num / den, m3 / mvar.powf(1.5))
        };

        let corr = if k < 2 {
            0.0
        } else {
            let total: f64 = z_sum.iter().map(|z| z * z).sum();
            let pairs = (k * (k - 1) / 2) as f64;
            ((total - z_sq) / (2.0 * w as f64) / pairs).clamp(-1.0, 1.0)
        };

        let snr = if flat {
            flags.snr_capped = true;
            self.snr_cap
        } else {
            let r = mbar / msd;
            if r.abs() > self.snr_cap {
                flags.snr_capped = true;
                self.snr_cap.copysign(r)
            } else {
                r
            }
        };

        let entropy = if flat { 0.0 } else { self.spectral_entropy(&m) };

        Ok((
            FeatureVector {
                nbvi: nbvi_sum / k as f64,
                amp_variance: var_sum / k as f64,
                mad,
                iqr,
                peak_to_peak,
                spectral_entropy: entropy,
                lag1_autocorr: lag1,
                mean_subcarrier_corr: corr,
                snr_proxy: snr,
                mean_amplitude: mbar,
                amp_skewness: skew,
            },
            flags,
        ))
    }
}

/// Convenience wrapper with a fresh extractor.
pub fn extract_features(window: &CsiWindow) -> Result<FeatureVector, WindowError> {
    FeatureExtractor::default().extract(window).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn alternating(k: usize, w: usize) -> CsiWindow {
        let rows: Vec<Vec<f64>> = (0..w).map(|t| vec![if t % 2 == 0 { 1.0 } else { 3.0 }; k]).collect();
        CsiWindow::from_rows(&rows).unwrap()
    }

    fn random_window(rng: &mut ChaCha8Rng, w: usize, k: usize) -> CsiWindow {
        let rows: Vec<Vec<f64>> = (0..w).map(|_| (0..k).map(|_| rng.random_range(0.1..5.0)).collect()).collect();
        CsiWindow::from_rows(&rows).unwrap()
    }

    /// Pearson correlation computed directly, zero for constant inputs.
    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    }

    /// Direct DFT periodogram entropy.
    fn entropy_oracle(x: &[f64]) -> f64 {
        let n = x.len();
        let m = mean(x);
        let p: Vec<f64> = (1..=n / 2)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -std::f64::consts::TAU * (f * t) as f64 / n as f64;
                    re += (v - m) * a.cos();
                    im += (v - m) * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let s: f64 = p.iter().sum();
        -p.iter().filter(|&&v| v > 0.0).map(|v| v / s * (v / s).log2()).sum::<f64>()
    }

    #[test]
    fn hand_computed_fixtures() {
        let w = alternating(1, 50);
        assert_eq!(nbvi(&w), 0.5);
        assert_eq!(amplitude_variance(&w), 1.0);
        // sigma/mu of 0.5 and 0.25
        let rows: Vec<Vec<f64>> = (0..50).map(|t| if t % 2 == 0 { vec![1.0, 3.0] } else { vec![3.0, 5.0] }).collect();
        assert_eq!(nbvi(&CsiWindow::from_rows(&rows).unwrap()), 0.375);
    }

    #[test]
    fn constant_window_conventions() {
        let rows = vec![vec![2.5; 8]; 50];
        let (f, flags) = FeatureExtractor::default().extract(&CsiWindow::from_rows(&rows).unwrap()).unwrap();
        let expected = FeatureVector { snr_proxy: SNR_CAP, mean_amplitude: 2.5, ..FeatureVector::default() };
        assert_eq!(f, expected);
        assert!(flags.snr_capped && !flags.nbvi_guarded);
    }

    #[test]
    fn zero_mean_subcarrier_is_guarded() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![0.0, 1.0 + (t % 2) as f64]).collect();
        let (f, flags) = FeatureExtractor::new(1e-6, SNR_CAP).extract(&CsiWindow::from_rows(&rows).unwrap()).unwrap();
        assert!(flags.nbvi_guarded);
        assert!(f.nbvi.is_finite());
    }

    #[test]
    fn correlated_subcarriers() {
        let rows: Vec<Vec<f64>> = (0..50).map(|t| vec![1.0 + (t as f64 * 0.3).sin(), 4.0 + 2.0 * (t as f64 * 0.3).sin()]).collect();
        let f = extract_features(&CsiWindow::from_rows(&rows).unwrap()).unwrap();
        assert!((f.mean_subcarrier_corr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_has_lower_entropy_than_noise() {
        let mut ex = FeatureExtractor::default();
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let sine: Vec<Vec<f64>> = (0..50).map(|t| vec![5.0 + (std::f64::consts::TAU * t as f64 / 10.0).sin()]).collect();
            let noise: Vec<Vec<f64>> = (0..50).map(|_| vec![5.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng)]).collect();
            let hs = ex.extract(&CsiWindow::from_rows(&sine).unwrap()).unwrap().0.spectral_entropy;
            let hn = ex.extract(&CsiWindow::from_rows(&noise).unwrap()).unwrap().0.spectral_entropy;
            assert!(hs < hn, "trial {trial}: {hs} vs {hn}");
        }
    }

    #[test]
    fn too_short_window() {
        let w = CsiWindow::from_rows(&vec![vec![1.0]; 3]).unwrap();
        assert_eq!(extract_features(&w), Err(WindowError::TooShort { min: 4, got: 3 }));
    }

    #[test]
    fn quantile_is_linear_interpolation() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.75), 3.25);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
    }

    #[test]
    fn matches_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ex = FeatureExtractor::default();
        for _ in 0..50 {
            let w = random_window(&mut rng, 50, 6);
            let f = ex.extract(&w).unwrap().0;
            let m = w.mean_series();
            assert!((f.spectral_entropy - entropy_oracle(&m)).abs() < 1e-9);
            let cols: Vec<Vec<f64>> = (0..6).map(|k| w.column(k).collect()).collect();
            let mut acc = 0.0;
            for a in 0..6 {
                for b in a + 1..6 {
                    acc += pearson(&cols[a], &cols[b]);
                }
            }
            assert!((f.mean_subcarrier_corr - acc / 15.0).abs() < 1e-9);
            let mm = mean(&m);
            let lag: f64 = m.windows(2).map(|p| (p[0] - mm) * (p[1] - mm)).sum::<f64>() / m.iter().map(|x| (x - mm).powi(2)).sum::<f64>();
            assert!((f.lag1_autocorr - lag).abs() < 1e-12);
            assert!((f.snr_proxy - mm / variance(&m).sqrt()).abs() < 1e-9);
        }
    }

    fn check_invariants(f: &FeatureVector, w: usize) {
        assert!(f.to_array().iter().all(|v| v.is_finite()));
        assert!(f.nbvi >= 0.0 && f.amp_variance >= 0.0 && f.iqr >= 0.0 && f.peak_to_peak >= 0.0);
        assert!(f.spectral_entropy >= 0.0 && f.spectral_entropy <= (w as f64).log2() + 1e-12);
    }

    proptest! {
        #[test]
        fn scale_laws(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_window(&mut rng, 20, 5);
            let mut scaled = w.clone();
            scaled.amplitudes.iter_mut().for_each(|a| *a *= c);
            let (n0, n1) = (nbvi(&w), nbvi(&scaled));
            prop_assert!((n0 - n1).abs() <= 1e-9 * n0.max(1.0));
            let (v0, v1) = (amplitude_variance(&w), amplitude_variance(&scaled));
            prop_assert!((v1 - c * c * v0).abs() <= 1e-9 * (c * c * v0).max(1.0));
        }

        #[test]
        fn subcarrier_permutation_invariance(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_window(&mut rng, 30, 8);
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = (0..30).map(|t| perm.iter().map(|&k| w.row(t)[k]).collect()).collect();
            let a = extract_features(&w).unwrap().to_array();
            let b = extract_features(&CsiWindow::from_rows(&rows).unwrap()).unwrap().to_array();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn features_are_finite_and_bounded(seed in any::<u64>(), w in 4usize..80, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let win = random_window(&mut rng, w, k);
            check_invariants(&extract_features(&win).unwrap(), w);
        }
    }
}
