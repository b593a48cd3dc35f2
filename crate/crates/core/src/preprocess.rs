//! Band-pass filtering, epoching with baseline correction and distance
//! exclusion, global standardisation, and train-time augmentation.

use std::cell::Cell;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{electrode_distance, Epochs, PatientRecord, ResponseTensor};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub band_low: f64,
    pub band_high: f64,
    /// seconds relative to onset
    pub baseline_window: (f64, f64),
    pub epoch_start: f64,
    pub epoch_end: f64,
    /// millimetres, inclusive
    pub exclusion_radius: f64,
    pub noise_sd: f64,
    pub channel_drop_range: (f64, f64),
    pub filter_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low: 1.0,
            band_high: 150.0,
            baseline_window: (-1.0, -0.1),
            epoch_start: 0.009,
            epoch_end: 1.0,
            exclusion_radius: 13.0,
            noise_sd: 0.1,
            channel_drop_range: (0.0, 0.5),
            filter_order: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.band_low > 0.0 && self.band_low < self.band_high) {
            return bad(format!("band {}–{} Hz is not increasing", self.band_low, self.band_high));
        }
        if !(self.band_high < fs / 2.0) {
            return bad(format!("band_high {} Hz needs fs > {} Hz, got {fs}", self.band_high, 2.0 * self.band_high));
        }
        let (b0, b1) = self.baseline_window;
        if !(b0 < b1 && b1 <= 0.0) {
            return bad("baseline window must precede the stimulus".into());
        }
        if !(0.0 <= self.epoch_start && self.epoch_start < self.epoch_end) {
            return bad("epoch_start must precede epoch_end".into());
        }
        if self.filter_order == 0 || self.filter_order % 2 != 0 {
            return bad("filter order must be even and positive".into());
        }
        let (d0, d1) = self.channel_drop_range;
        if !(0.0 <= d0 && d0 <= d1 && d1 <= 0.5) {
            return bad("channel_drop_range must lie inside [0, 0.5]".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        Ok(())
    }

    /// Sample offsets relative to onset: baseline `[lo, hi]` and epoch
    /// `[start, end]`, all inclusive.
    pub fn windows(&self, fs: f64) -> Windows {
        let ceil = |s: f64| (s * fs).ceil() as isize;
        let floor = |s: f64| (s * fs).floor() as isize;
        Windows {
            baseline: (ceil(self.baseline_window.0), floor(self.baseline_window.1)),
            epoch: (ceil(self.epoch_start), floor(self.epoch_end)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub baseline: (isize, isize),
    pub epoch: (isize, isize),
}

impl Windows {
    pub fn epoch_len(&self) -> usize {
        (self.epoch.1 - self.epoch.0 + 1) as usize
    }
}

/// Cascade of biquads `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<[f64; 6]>,
}

impl Sos {
    /// Butterworth high-pass at `low` cascaded with low-pass at `high`,
    /// each of `order`, via the bilinear transform with frequency prewarping.
    pub fn butterworth_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Self {
        let mut sections = Vec::with_capacity(order);
        for (fc, highpass) in [(low, true), (high, false)] {
            let k = (std::f64::consts::PI * fc / fs).tan();
            for i in 0..order / 2 {
                // analog pole pair at angle θ: s² + q s + 1, q = −2 cos θ
                let theta = std::f64::consts::PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
                let q = -2.0 * theta.cos();
                let a0 = 1.0 + q * k + k * k;
                let a1 = 2.0 * (k * k - 1.0) / a0;
                let a2 = (1.0 - q * k + k * k) / a0;
                let (b0, b1, b2) = if highpass {
                    (1.0 / a0, -2.0 / a0, 1.0 / a0)
                } else {
                    let g = k * k / a0;
                    (g, 2.0 * g, g)
                };
                sections.push([b0, b1, b2, 1.0, a1, a2]);
            }
        }
        Self { sections }
    }

    /// Steady-state transposed-direct-form state for a unit step.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [b0, b1, b2, _, a1, a2] = *s;
                let h = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let z2 = b2 - a2 * h;
                let z = [scale * (b1 - a1 * h + z2), scale * z2];
                scale *= h;
                z
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], init: &[[f64; 2]], x0: f64) {
        for (s, z0) in self.sections.iter().zip(init) {
            let [b0, b1, b2, _, a1, a2] = *s;
            let (mut z1, mut z2) = (z0[0] * x0, z0[1] * x0);
            for v in x.iter_mut() {
                let xi = *v;
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                *v = y;
            }
        }
    }

    /// Single forward pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let zero = vec![[0.0; 2]; self.sections.len()];
        self.run(&mut y, &zero, 0.0);
        y
    }

    /// Zero-phase forward-backward filtering with odd extension of
    /// `3·(2·sections + 1)` samples and step-matched initial states.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.step_state();
        let x0 = ext[0];
        self.run(&mut ext, &zi, x0);
        ext.reverse();
        let y0 = ext[0];
        self.run(&mut ext, &zi, y0);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase band-pass of every channel in a channel-major block.
pub fn bandpass<T: Float>(signal: &[T], n_samples: usize, fs: f64, config: &PreprocessConfig) -> Result<Vec<T>> {
    config.validate(fs)?;
    if n_samples == 0 || signal.len() % n_samples != 0 {
        return Err(CoreError::Input(format!(
            "{} values do not split into channels of {n_samples}",
            signal.len()
        )));
    }
    let sos = Sos::butterworth_bandpass(config.filter_order, config.band_low, config.band_high, fs);
    let mut out = Vec::with_capacity(signal.len());
    let mut buf = vec![0.0; n_samples];
    for ch in signal.chunks(n_samples) {
        for (b, v) in buf.iter_mut().zip(ch) {
            *b = v.to_f64().unwrap_or(f64::NAN);
        }
        out.extend(sos.filtfilt(&buf).into_iter().map(|v| T::from(v).unwrap_or_else(T::nan)));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    /// trials too close to either end of the recording
    pub dropped_trials: usize,
    /// stimulation sites that kept no trial
    pub dropped_sites: Vec<String>,
}

/// Cuts baseline-corrected epochs for every stimulation site of a filtered
/// record. The stimulated channel and every channel within
/// `exclusion_radius` of it are excluded.
pub fn epoch_record<T: Float>(
    record: &PatientRecord,
    filtered: &[T],
    config: &PreprocessConfig,
) -> Result<(Vec<Epochs<T>>, EpochReport)> {
    let fs = record.sampling_rate;
    config.validate(fs)?;
    let w = config.windows(fs);
    let ns = record.n_samples;
    let t_len = w.epoch_len();
    let mut report = EpochReport::default();
    let mut out = Vec::new();
    for ev in &record.stim_events {
        let s = record
            .electrode_index(&ev.stim_id)
            .ok_or_else(|| CoreError::Integrity(format!("stim electrode {} not in montage", ev.stim_id)))?;
        let stim = &record.electrodes[s];
        let (mut keep, mut excluded) = (Vec::new(), Vec::new());
        for (i, e) in record.electrodes.iter().enumerate() {
            if i == s || electrode_distance(stim, e) <= config.exclusion_radius {
                excluded.push(e.id.clone());
            } else {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            return Err(CoreError::MissingData(format!(
                "{}: every channel is excluded for stimulation at {}",
                record.patient_id, ev.stim_id
            )));
        }
        let lo = -w.baseline.0.min(w.epoch.0);
        let hi = w.epoch.1.max(w.baseline.1);
        let onsets: Vec<usize> = ev
            .onsets
            .iter()
            .copied()
            .filter(|&o| (o as isize) >= lo && (o as isize) + hi < ns as isize)
            .collect();
        report.dropped_trials += ev.onsets.len() - onsets.len();
        if onsets.is_empty() {
            report.dropped_sites.push(ev.stim_id.clone());
            continue;
        }
        let mut values = Vec::with_capacity(onsets.len() * keep.len() * t_len);
        for &o in &onsets {
            let o = o as isize;
            for &c in &keep {
                let row = &filtered[c * ns..(c + 1) * ns];
                let base = &row[(o + w.baseline.0) as usize..=(o + w.baseline.1) as usize];
                let mean = base.iter().fold(T::zero(), |a, &v| a + v) / T::from(base.len()).unwrap();
                values.extend(row[(o + w.epoch.0) as usize..=(o + w.epoch.1) as usize].iter().map(|&v| v - mean));
            }
        }
        out.push(Epochs {
            stim_electrode_id: ev.stim_id.clone(),
            data: ResponseTensor::new(onsets.len(), keep.len(), t_len, values)?,
            channel_ids: keep.iter().map(|&i| record.electrodes[i].id.clone()).collect(),
            excluded_channel_ids: excluded,
        });
    }
    Ok((out, report))
}

/// Running count, mean and sum of squared deviations; mergeable so that
/// per-site summaries combine into a partition-wide one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn of<T: Float>(xs: &[T]) -> Self {
        let mut m = Self::default();
        for x in xs {
            m.push(x.to_f64().unwrap_or(f64::NAN));
        }
        m
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        Self {
            count: n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
        }
    }

    pub fn population_sd(&self) -> f64 {
        (self.m2 / self.count as f64).sqrt()
    }
}

/// One scalar mean and population SD for the whole training partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: f64,
    pub sd: f64,
}

impl StandardizationStats {
    pub fn from_moments(m: &Moments) -> Result<Self> {
        if m.count == 0 {
            return Err(CoreError::Input("no training values to standardise on".into()));
        }
        let sd = m.population_sd();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(CoreError::Degenerate("training data has zero variance".into()));
        }
        Ok(Self { mean: m.mean, sd })
    }

    pub fn apply<T: Float>(&self, x: T) -> T {
        let mean = T::from(self.mean).unwrap();
        let sd = T::from(self.sd).unwrap();
        (x - mean) / sd
    }
}

pub fn fit_standardization<'a, T: Float + 'a>(
    train: impl IntoIterator<Item = &'a Epochs<T>>,
) -> Result<StandardizationStats> {
    let m = train
        .into_iter()
        .fold(Moments::default(), |acc, e| acc.merge(&Moments::of(e.data.values())));
    StandardizationStats::from_moments(&m)
}

pub fn apply_standardization<T: Float>(epochs: &[Epochs<T>], stats: &StandardizationStats) -> Result<Vec<Epochs<T>>> {
    epochs
        .iter()
        .map(|e| {
            let (n, c, t) = e.data.shape();
            Ok(Epochs {
                data: ResponseTensor::new(n, c, t, e.data.values().iter().map(|&v| stats.apply(v)).collect())?,
                ..e.clone()
            })
        })
        .collect()
}

thread_local! {
    static NOISE_CALLS: Cell<usize> = const { Cell::new(0) };
    static DROP_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// `(augment_noise, drop_channels)` calls made on this thread so far.
pub fn augmentation_calls() -> (usize, usize) {
    (NOISE_CALLS.with(Cell::get), DROP_CALLS.with(Cell::get))
}

/// Adds `N(0, sd²)` to every element.
pub fn augment_noise<T: Float, R: Rng + ?Sized>(sample: &mut [T], sd: f64, rng: &mut R) {
    NOISE_CALLS.with(|c| c.set(c.get() + 1));
    if sd == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sd).expect("finite sd");
    for v in sample.iter_mut() {
        *v = *v + T::from(normal.sample(rng)).unwrap();
    }
}

/// Channels removed for drop proportion `p`.
pub fn drop_count(c: usize, p: f64) -> usize {
    (p * c as f64).floor() as usize
}

/// Draws `p ~ U[range]` and returns the indices of the surviving channels,
/// in their original order. A single channel is never dropped.
pub fn drop_channels<R: Rng + ?Sized>(c: usize, range: (f64, f64), rng: &mut R) -> Vec<usize> {
    DROP_CALLS.with(|k| k.set(k.get() + 1));
    if c < 2 {
        return (0..c).collect();
    }
    let p = if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    };
    let k = drop_count(c, p);
    let mut gone = vec![false; c];
    for i in rand::seq::index::sample(rng, c, k) {
        gone[i] = true;
    }
    (0..c).filter(|&i| !gone[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn index_rules() {
        let cfg = PreprocessConfig::default();
        let w = cfg.windows(2048.0);
        assert_eq!(w.epoch, (19, 2048));
        assert_eq!(w.epoch_len(), 2030);
        assert_eq!(w.baseline, (-2048, -205));
        assert_eq!(cfg.windows(512.0).epoch_len(), 508);
    }

    #[test]
    fn low_rate_rejected() {
        let cfg = PreprocessConfig::default();
        assert!(matches!(bandpass(&[0.0f64; 10], 10, 256.0, &cfg), Err(CoreError::Config(_))));
    }

    #[test]
    fn zero_in_zero_out() {
        let y = bandpass(&[0.0f32; 300], 100, 2048.0, &PreprocessConfig::default()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_state_is_steady() {
        let sos = Sos::butterworth_bandpass(4, 1.0, 150.0, 2048.0);
        let zi = sos.step_state();
        let mut x = vec![1.0; 50];
        sos.run(&mut x, &zi, 1.0);
        // a band-pass passes no DC, so a step seen as already-settled stays at 0
        assert!(x.iter().all(|v| v.abs() < 1e-9), "{:?}", &x[..4]);
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..97).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let whole = Moments::of(&xs);
        let merged = Moments::of(&xs[..40]).merge(&Moments::of(&xs[40..]));
        assert_eq!(whole.count, merged.count);
        assert!((whole.mean - merged.mean).abs() < 1e-12);
        assert!((whole.m2 - merged.m2).abs() < 1e-9);
    }

    #[test]
    fn drop_floor_arithmetic() {
        assert_eq!(10 - drop_count(10, 0.0), 10);
        assert_eq!(10 - drop_count(10, 0.5), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_channels(1, (0.0, 0.5), &mut rng), vec![0]);
        assert_eq!(drop_channels(10, (0.5, 0.5), &mut rng).len(), 5);
    }

    #[test]
    fn noise_zero_sd_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = vec![1.5f32, -2.0, 3.25];
        augment_noise(&mut x, 0.0, &mut rng);
        assert_eq!(x, vec![1.5, -2.0, 3.25]);
    }
}
