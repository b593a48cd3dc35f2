//! Synthetic SPES cohorts with a planted, tunable SOZ signal.
//!
//! Each trial at recording electrode `r` for stimulation at `s` is
//!
//! ```text
//! noise + A · ccep(t − latency_sr) [+ delayed spike if r is SOZ]
//! A = ccep_amplitude · patient_gain · pair_gain_sr · (1 + separation·soz_r) · exp(−d_sr / 20 mm)
//! ```
//!
//! so only the recording electrode's label moves the response (the
//! convergent asymmetry). Delayed spikes land uniformly in 100 ms–1 s,
//! only at SOZ recording sites, with amplitude proportional to `separation`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{self, distance, Electrode, Lobe, Outcome, PatientRecord, StimEvent};
use crate::error::{CoreError, Result};

pub const GRID_SPACING_MM: f64 = 10.0;
pub const POSITION_JITTER_MM: f64 = 0.3;
pub const DECAY_LENGTH_MM: f64 = 20.0;
/// N1 rise/decay and P2 rise/decay, seconds
pub const N1_TAU: (f64, f64) = (0.003, 0.012);
pub const P2_TAU: (f64, f64) = (0.030, 0.120);
pub const P2_RELATIVE: f64 = 0.5;
/// per-pair CCEP latency range, seconds
pub const LATENCY_RANGE: (f64, f64) = (0.005, 0.015);
pub const DELAYED_WINDOW: (f64, f64) = (0.1, 1.0);
pub const SPIKE_SD: f64 = 0.008;
pub const INTER_TRIAL: f64 = 2.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SozLayout {
    /// nearest neighbours of a random seed electrode
    Cluster,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub electrodes_per_patient: usize,
    pub soz_fraction: f64,
    pub trials_per_stim: usize,
    pub sampling_rate: f64,
    pub separation: f64,
    pub delayed_response_rate: f64,
    /// µV
    pub noise_sd: f64,
    pub seed: u64,
    pub stimulated_fraction: f64,
    pub soz_layout: SozLayout,
    /// µV at zero distance, before gains
    pub ccep_amplitude: f64,
    pub spike_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 35,
            electrodes_per_patient: 59,
            soz_fraction: 0.144,
            trials_per_stim: 10,
            sampling_rate: 2048.0,
            separation: 2.0,
            delayed_response_rate: 0.3,
            noise_sd: 20.0,
            seed: 0,
            stimulated_fraction: 1.0,
            soz_layout: SozLayout::Cluster,
            ccep_amplitude: 100.0,
            spike_amplitude: 40.0,
        }
    }
}

impl SynthConfig {
    /// 12 patients × 30 electrodes × 10 trials at 512 Hz.
    pub fn desk() -> Self {
        Self {
            n_patients: 12,
            electrodes_per_patient: 30,
            soz_fraction: 0.15,
            sampling_rate: 512.0,
            // at the default noise the convergent models separate perfectly
            noise_sd: 150.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.n_patients == 0 || self.electrodes_per_patient == 0 {
            return bad("need at least one patient and one electrode");
        }
        if self.trials_per_stim == 0 {
            return bad("trials_per_stim must be positive");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return bad("sampling_rate must be positive");
        }
        for (name, p) in [
            ("soz_fraction", self.soz_fraction),
            ("delayed_response_rate", self.delayed_response_rate),
            ("stimulated_fraction", self.stimulated_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be non-negative");
        }
        if !(self.noise_sd >= 0.0) || !(self.ccep_amplitude >= 0.0) || !(self.spike_amplitude >= 0.0) {
            return bad("amplitudes must be non-negative");
        }
        Ok(())
    }

    pub fn patient_id(&self, index: usize) -> String {
        let width = self.n_patients.to_string().len().max(2);
        format!("P{:0width$}", index + 1)
    }
}

/// SOZ electrodes per patient: `round(f · N_total)` spread evenly, the
/// first `remainder` patients taking one extra.
pub fn soz_allocation(config: &SynthConfig) -> Vec<usize> {
    let n = config.electrodes_per_patient;
    let total = (config.soz_fraction * (config.n_patients * n) as f64).round() as usize;
    let base = total / config.n_patients;
    let extra = total % config.n_patients;
    (0..config.n_patients).map(|i| (base + usize::from(i < extra)).min(n)).collect()
}

/// Multiplier applied to the CCEP at distance `d_mm` from the stimulation
/// site, before patient and pair gains.
pub fn ccep_gain(d_mm: f64, soz_recording: bool, separation: f64) -> f64 {
    let boost = if soz_recording { 1.0 + separation } else { 1.0 };
    boost * (-d_mm / DECAY_LENGTH_MM).exp()
}

fn diff_exp(t: f64, (rise, decay): (f64, f64)) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let peak_t = rise * decay / (decay - rise) * (decay / rise).ln();
    let norm = (-peak_t / decay).exp() - (-peak_t / rise).exp();
    ((-t / decay).exp() - (-t / rise).exp()) / norm
}

/// Unit CCEP waveform at `t` seconds after the response latency: a sharp
/// negative N1 (peak −1) followed by a slower positive P2.
pub fn ccep_template(t: f64) -> f64 {
    -diff_exp(t, N1_TAU) + P2_RELATIVE * diff_exp(t, P2_TAU)
}

fn grid_layout(n: usize, rng: &mut ChaCha8Rng) -> Vec<([f64; 3], Lobe)> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mut j = || rng.random_range(-POSITION_JITTER_MM..=POSITION_JITTER_MM);
            let pos = [
                c as f64 * GRID_SPACING_MM + j(),
                r as f64 * GRID_SPACING_MM + j(),
                j(),
            ];
            let fx = (c as f64 + 0.5) / cols as f64;
            let upper = (r as f64 + 0.5) / (rows as f64) < 0.5;
            let lobe = match (fx, upper) {
                (x, _) if x < 1.0 / 3.0 => Lobe::Frontal,
                (x, true) if x < 2.0 / 3.0 => Lobe::Central,
                (x, false) if x < 2.0 / 3.0 => Lobe::Temporal,
                (_, true) => Lobe::Parietal,
                (_, false) => Lobe::Occipital,
            };
            (pos, lobe)
        })
        .collect()
}

/// Generates patient `index`; depends only on `(config, index)`.
pub fn generate_patient(config: &SynthConfig, index: usize) -> Result<PatientRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let n = config.electrodes_per_patient;
    let fs = config.sampling_rate;
    let layout = grid_layout(n, &mut rng);
    let width = n.to_string().len().max(2);
    let mut electrodes: Vec<Electrode> = layout
        .into_iter()
        .enumerate()
        .map(|(i, (position, lobe))| Electrode {
            id: format!("E{:0width$}", i + 1),
            position,
            soz: false,
            lobe,
        })
        .collect();

    let n_soz = soz_allocation(config)[index];
    let soz_idx: Vec<usize> = match config.soz_layout {
        SozLayout::Cluster => {
            let seed_e = rng.random_range(0..n);
            let mut order: Vec<usize> = (0..n).collect();
            let p0 = electrodes[seed_e].position;
            order.sort_by(|&a, &b| {
                distance(&electrodes[a].position, &p0).total_cmp(&distance(&electrodes[b].position, &p0))
            });
            order.truncate(n_soz);
            order
        }
        SozLayout::Uniform => rand::seq::index::sample(&mut rng, n, n_soz).into_vec(),
    };
    for i in soz_idx {
        electrodes[i].soz = true;
    }
    let outcome = if rng.random_bool(0.5) {
        Outcome::SeizureFree
    } else {
        Outcome::NotSeizureFree
    };

    let n_stim = ((config.stimulated_fraction * n as f64).round() as usize).clamp(1, n);
    let mut stim_sites: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_stim).into_vec();
    stim_sites.sort_unstable();
    let mut order = stim_sites.clone();
    order.shuffle(&mut rng);

    let lead = (1.1 * fs).ceil() as usize;
    let isi = (INTER_TRIAL * fs).ceil() as usize;
    let n_trials = n_stim * config.trials_per_stim;
    let n_samples = lead + n_trials * isi;
    let resp_len = fs.floor() as usize + 1;

    let patient_gain = (rng.random_range((0.5f64).ln()..=(2.0f64).ln())).exp();
    let dist: Vec<Vec<f64>> = electrodes
        .iter()
        .map(|a| electrodes.iter().map(|b| dataset::electrode_distance(a, b)).collect())
        .collect();

    let mut signal = vec![0.0f32; n * n_samples];
    if config.noise_sd > 0.0 {
        let normal = Normal::new(0.0, config.noise_sd).expect("finite sd");
        for v in signal.iter_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }

    let mut stim_events = Vec::with_capacity(n_stim);
    let mut trial = 0usize;
    for &s in &order {
        let paired = (0..n)
            .filter(|&j| j != s)
            .min_by(|&a, &b| dist[s][a].total_cmp(&dist[s][b]))
            .map(|j| electrodes[j].id.clone());
        // fixed per pair: gain and latency
        let pair: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|r| {
                let gain = rng.random_range(0.5..=1.5);
                let latency = rng.random_range(LATENCY_RANGE.0..=LATENCY_RANGE.1);
                let amp = config.ccep_amplitude
                    * patient_gain
                    * gain
                    * ccep_gain(dist[s][r], electrodes[r].soz, config.separation);
                let wave = (0..resp_len).map(|k| amp * ccep_template(k as f64 / fs - latency)).collect();
                (amp, wave)
            })
            .collect();
        let mut onsets = Vec::with_capacity(config.trials_per_stim);
        for _ in 0..config.trials_per_stim {
            let onset = lead + trial * isi;
            trial += 1;
            onsets.push(onset);
            for r in 0..n {
                if r == s {
                    continue;
                }
                let row = &mut signal[r * n_samples..(r + 1) * n_samples];
                for (k, w) in pair[r].1.iter().enumerate() {
                    row[onset + k] += *w as f32;
                }
                if electrodes[r].soz && config.separation > 0.0 && rng.random_bool(config.delayed_response_rate) {
                    let lat = rng.random_range(DELAYED_WINDOW.0..=DELAYED_WINDOW.1);
                    let amp = -config.separation
                        * config.spike_amplitude
                        * patient_gain
                        * (-dist[s][r] / DECAY_LENGTH_MM).exp();
                    let lo = (DELAYED_WINDOW.0 * fs).ceil() as usize;
                    let hi = (DELAYED_WINDOW.1 * fs).floor() as usize;
                    for k in lo..=hi {
                        let z = (k as f64 / fs - lat) / SPIKE_SD;
                        if z.abs() < 5.0 {
                            row[onset + k] += (amp * (-0.5 * z * z).exp()) as f32;
                        }
                    }
                }
            }
        }
        stim_events.push(StimEvent {
            stim_id: electrodes[s].id.clone(),
            onsets,
            current_ma: 4.0,
            paired_with: paired,
        });
    }
    // events listed by electrode, not delivery order
    stim_events.sort_by(|a, b| a.stim_id.cmp(&b.stim_id));

    let record = PatientRecord {
        patient_id: config.patient_id(index),
        electrodes,
        sampling_rate: fs,
        stim_events,
        signal,
        n_samples,
        outcome,
    };
    record.validate()?;
    Ok(record)
}

pub fn generate_cohort(config: &SynthConfig) -> Result<Vec<PatientRecord>> {
    config.validate()?;
    (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, i))
        .collect()
}

/// Generates and writes patient by patient so only one signal is resident
/// per worker.
pub fn write_synthetic_cohort(dir: &Path, config: &SynthConfig) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let entries = (0..config.n_patients)
        .into_par_iter()
        .map(|i| dataset::write_patient(dir, &generate_patient(config, i)?))
        .collect::<Result<Vec<_>>>()?;
    dataset::write_manifest(dir, entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSummary {
    pub patients: usize,
    pub electrodes: usize,
    pub soz: usize,
    pub soz_fraction: f64,
    pub stim_sites: usize,
    pub trials: usize,
}

pub fn describe_cohort(cohort: &[PatientRecord]) -> CohortSummary {
    let electrodes: usize = cohort.iter().map(|p| p.electrodes.len()).sum();
    let soz = cohort.iter().flat_map(|p| &p.electrodes).filter(|e| e.soz).count();
    CohortSummary {
        patients: cohort.len(),
        electrodes,
        soz,
        soz_fraction: if electrodes == 0 { 0.0 } else { soz as f64 / electrodes as f64 },
        stim_sites: cohort.iter().map(|p| p.stim_events.len()).sum(),
        trials: cohort.iter().flat_map(|p| &p.stim_events).map(|s| s.onsets.len()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_patients: 2,
            electrodes_per_patient: 6,
            trials_per_stim: 2,
            sampling_rate: 512.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn template_peaks() {
        let fs = 20_000.0;
        let (mut lo, mut lo_t) = (0.0f64, 0.0);
        for k in 0..(0.2 * fs) as usize {
            let t = k as f64 / fs;
            let v = ccep_template(t);
            if v < lo {
                lo = v;
                lo_t = t;
            }
        }
        // P2 overlaps N1 slightly, so the trough is a little shallower than −1
        assert!(lo < -0.8 && lo > -1.0, "{lo}");
        assert!(lo_t > 0.004 && lo_t < 0.008, "{lo_t}");
        assert_eq!(ccep_template(-0.001), 0.0);
    }

    #[test]
    fn allocation_rule() {
        let c = SynthConfig {
            n_patients: 12,
            electrodes_per_patient: 30,
            soz_fraction: 0.15,
            ..SynthConfig::default()
        };
        let a = soz_allocation(&c);
        assert_eq!(a.iter().sum::<usize>(), 54);
        assert!(a.iter().all(|&k| k == 4 || k == 5));
    }

    #[test]
    fn config_errors() {
        for c in [
            SynthConfig { electrodes_per_patient: 0, ..tiny() },
            SynthConfig { trials_per_stim: 0, ..tiny() },
            SynthConfig { soz_fraction: 1.5, ..tiny() },
            SynthConfig { separation: -1.0, ..tiny() },
        ] {
            assert!(matches!(generate_cohort(&c), Err(CoreError::Config(_))));
        }
    }

    #[test]
    fn cluster_is_contiguous() {
        let c = SynthConfig {
            n_patients: 1,
            electrodes_per_patient: 25,
            soz_fraction: 0.2,
            trials_per_stim: 1,
            ..tiny()
        };
        let p = generate_patient(&c, 0).unwrap();
        let soz: Vec<&Electrode> = p.electrodes.iter().filter(|e| e.soz).collect();
        assert_eq!(soz.len(), 5);
        // every SOZ electrode has a SOZ grid neighbour
        for a in &soz {
            assert!(soz
                .iter()
                .any(|b| a.id != b.id && dataset::electrode_distance(a, b) < GRID_SPACING_MM + 1.0));
        }
    }

    #[test]
    fn patients_come_from_independent_substreams() {
        let cohort = generate_cohort(&tiny()).unwrap();
        assert_eq!(cohort[1], generate_patient(&tiny(), 1).unwrap());
        assert_ne!(cohort[0].signal, cohort[1].signal);
    }
}
