//! Per-patient banks of averaged responses and divergent / convergent
//! sample assembly.
//!
//! A bank keeps, for every stimulation site, the trial-averaged response at
//! each retained channel plus the trial-level [`Moments`] needed to fit
//! standardisation without going back to single trials. Banks persist as
//!
//! ```text
//! bank.json                   {format_version, patients: [...]}
//! <PATIENT>/averages.bin      little-endian f32 rows, site after site
//! <PATIENT>/sites.tsv         stim_id n_trials channels excluded count mean m2
//! <PATIENT>/electrodes.tsv    as in the cohort format
//! ```

use std::fs;
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    electrode_distance, electrodes_tsv, read_electrodes, AveragedResponse, Electrode, Epochs, Outcome, PatientRecord,
    ResponseTensor,
};
use crate::error::{CoreError, Result};
use crate::preprocess::{bandpass, epoch_record, EpochReport, Moments, PreprocessConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Divergent,
    Convergent,
}

pub fn average_trials<T: Float>(x: &ResponseTensor<T>) -> AveragedResponse<T> {
    let (n, c, t) = x.shape();
    let mut acc = vec![T::zero(); c * t];
    for i in 0..n {
        for (a, &v) in acc.iter_mut().zip(x.trial(i)) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::from(n).unwrap();
    AveragedResponse {
        c,
        t,
        values: acc.into_iter().map(|v| v * inv).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteResponses<T> {
    /// electrode index of the stimulation site
    pub stim: usize,
    /// electrode indices of the rows of `average`
    pub channels: Vec<usize>,
    pub excluded: Vec<usize>,
    pub n_trials: usize,
    pub average: AveragedResponse<T>,
    /// over every trial-level value of this site
    pub moments: Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientBank<T> {
    pub patient_id: String,
    pub electrodes: Vec<Electrode>,
    pub outcome: Outcome,
    pub t: usize,
    pub sites: Vec<SiteResponses<T>>,
}

/// One assembled model input.
#[derive(Clone, Debug, PartialEq)]
pub struct ParadigmSample<T> {
    pub target_electrode_id: String,
    pub paradigm: Paradigm,
    /// `channel_ids.len() × t`, row-major
    pub channels: Vec<T>,
    pub t: usize,
    pub channel_ids: Vec<String>,
    pub distances: Vec<f64>,
    pub label: bool,
}

impl<T: Copy> ParadigmSample<T> {
    pub fn n_channels(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.channels[i * self.t..(i + 1) * self.t]
    }

    /// Keeps rows `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            target_electrode_id: self.target_electrode_id.clone(),
            paradigm: self.paradigm,
            channels: keep.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            t: self.t,
            channel_ids: keep.iter().map(|&i| self.channel_ids[i].clone()).collect(),
            distances: keep.iter().map(|&i| self.distances[i]).collect(),
            label: self.label,
        }
    }
}

struct Row<'a, T> {
    electrode: usize,
    distance: f64,
    data: &'a [T],
}

impl<T: Float> PatientBank<T> {
    pub fn from_epochs(record: &PatientRecord, epochs: &[Epochs<T>]) -> Result<Self> {
        let index = |id: &str| {
            record
                .electrode_index(id)
                .ok_or_else(|| CoreError::Integrity(format!("{}: unknown electrode {id}", record.patient_id)))
        };
        let mut t = None;
        let mut sites = Vec::with_capacity(epochs.len());
        for e in epochs {
            let (n, _, et) = e.data.shape();
            if *t.get_or_insert(et) != et {
                return Err(CoreError::Input("epochs of differing length".into()));
            }
            sites.push(SiteResponses {
                stim: index(&e.stim_electrode_id)?,
                channels: e.channel_ids.iter().map(|c| index(c)).collect::<Result<_>>()?,
                excluded: e.excluded_channel_ids.iter().map(|c| index(c)).collect::<Result<_>>()?,
                n_trials: n,
                average: average_trials(&e.data),
                moments: Moments::of(e.data.values()),
            });
        }
        Ok(Self {
            patient_id: record.patient_id.clone(),
            electrodes: record.electrodes.clone(),
            outcome: record.outcome,
            t: t.unwrap_or(0),
            sites,
        })
    }

    pub fn electrode_index(&self, id: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.id == id)
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        electrode_distance(&self.electrodes[a], &self.electrodes[b])
    }

    /// Stimulated electrodes with data under `paradigm`, in montage order.
    pub fn enumerate_targets(&self, paradigm: Paradigm) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .sites
            .iter()
            .map(|s| s.stim)
            .filter(|&e| paradigm == Paradigm::Divergent || self.sites.iter().any(|s| s.channels.contains(&e)))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn rows(&self, paradigm: Paradigm, target: usize) -> Result<Vec<Row<'_, T>>> {
        let id = &self.electrodes[target].id;
        let rows: Vec<Row<'_, T>> = match paradigm {
            Paradigm::Divergent => {
                let site = self.sites.iter().find(|s| s.stim == target).ok_or_else(|| {
                    CoreError::MissingData(format!("{}: no epochs for stimulation at {id}", self.patient_id))
                })?;
                site.channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Row {
                        electrode: c,
                        distance: self.distance(target, c),
                        data: site.average.row(i),
                    })
                    .collect()
            }
            Paradigm::Convergent => self
                .sites
                .iter()
                .filter(|s| s.stim != target)
                .filter_map(|s| {
                    s.channels.iter().position(|&c| c == target).map(|i| Row {
                        electrode: s.stim,
                        distance: self.distance(target, s.stim),
                        data: s.average.row(i),
                    })
                })
                .collect(),
        };
        if rows.is_empty() {
            return Err(CoreError::MissingData(format!(
                "{}: electrode {id} has no {paradigm:?} responses",
                self.patient_id
            )));
        }
        Ok(rows)
    }

    /// Rows available for `target` (0 when it has none).
    pub fn n_rows(&self, paradigm: Paradigm, target: usize) -> usize {
        self.rows(paradigm, target).map_or(0, |r| r.len())
    }

    /// Distance-sorted sample for `target`. With a `budget`, a random subset
    /// of that many rows (drawn with replacement only when fewer are
    /// available); without one, every row.
    pub fn assemble<R: Rng + ?Sized>(
        &self,
        paradigm: Paradigm,
        target: usize,
        budget: Option<usize>,
        rng: &mut R,
    ) -> Result<ParadigmSample<T>> {
        let rows = self.rows(paradigm, target)?;
        let mut pick: Vec<usize> = match budget {
            None => (0..rows.len()).collect(),
            Some(0) => return Err(CoreError::Config("channel budget must be positive".into())),
            Some(b) if b <= rows.len() => rand::seq::index::sample(rng, rows.len(), b).into_vec(),
            Some(b) => {
                let mut p: Vec<usize> = (0..rows.len()).collect();
                p.extend((rows.len()..b).map(|_| rng.random_range(0..rows.len())));
                p
            }
        };
        pick.sort_by(|&a, &b| rows[a].distance.total_cmp(&rows[b].distance));
        let t = self.t;
        let mut channels = Vec::with_capacity(pick.len() * t);
        for &i in &pick {
            channels.extend_from_slice(rows[i].data);
        }
        let label_electrode = &self.electrodes[target];
        Ok(ParadigmSample {
            target_electrode_id: label_electrode.id.clone(),
            paradigm,
            channels,
            t,
            channel_ids: pick.iter().map(|&i| self.electrodes[rows[i].electrode].id.clone()).collect(),
            distances: pick.iter().map(|&i| rows[i].distance).collect(),
            label: label_electrode.soz,
        })
    }

    pub fn assemble_divergent<R: Rng + ?Sized>(
        &self,
        stim_id: &str,
        budget: Option<usize>,
        rng: &mut R,
    ) -> Result<ParadigmSample<T>> {
        let i = self.require(stim_id)?;
        self.assemble(Paradigm::Divergent, i, budget, rng)
    }

    pub fn assemble_convergent<R: Rng + ?Sized>(
        &self,
        record_id: &str,
        budget: Option<usize>,
        rng: &mut R,
    ) -> Result<ParadigmSample<T>> {
        let i = self.require(record_id)?;
        self.assemble(Paradigm::Convergent, i, budget, rng)
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.electrode_index(id)
            .ok_or_else(|| CoreError::MissingData(format!("{}: unknown electrode {id}", self.patient_id)))
    }

    /// Trial-level moments over every site of the patient.
    pub fn moments(&self) -> Moments {
        self.sites.iter().fold(Moments::default(), |a, s| a.merge(&s.moments))
    }
}

/// Filters, epochs and averages one record into its bank.
pub fn bank_record(record: &PatientRecord, config: &PreprocessConfig) -> Result<(PatientBank<f32>, EpochReport)> {
    record.validate()?;
    let filtered = bandpass(&record.signal, record.n_samples, record.sampling_rate, config)?;
    let (epochs, report) = epoch_record::<f32>(record, &filtered, config)?;
    Ok((PatientBank::from_epochs(record, &epochs)?, report))
}

/// [`bank_record`] over a cohort, in cohort order.
pub fn bank_cohort(records: &[PatientRecord], config: &PreprocessConfig) -> Result<Vec<(PatientBank<f32>, EpochReport)>> {
    records.par_iter().map(|r| bank_record(r, config)).collect()
}

/// FNV-1a over the arguments; seeds the fixed per-target draw used when a
/// CNN is evaluated.
pub fn target_seed(seed: u64, patient_id: &str, target_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(patient_id.bytes())
        .chain([0xff])
        .chain(target_id.bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn inference_rng(seed: u64, patient_id: &str, target_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(target_seed(seed, patient_id, target_id))
}

pub const BANK_INDEX: &str = "bank.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankIndex {
    pub format_version: u32,
    pub t: usize,
    pub patients: Vec<String>,
}

fn ids(bank: &PatientBank<f32>, idx: &[usize]) -> String {
    idx.iter().map(|&i| bank.electrodes[i].id.as_str()).collect::<Vec<_>>().join(",")
}

pub fn write_banks(dir: &Path, banks: &[PatientBank<f32>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let t = banks.first().map_or(0, |b| b.t);
    for b in banks {
        if b.t != t {
            return Err(CoreError::Input("banks of differing epoch length".into()));
        }
        let pdir = dir.join(&b.patient_id);
        fs::create_dir_all(&pdir)?;
        fs::write(pdir.join("electrodes.tsv"), electrodes_tsv(&b.electrodes, b.outcome))?;

        let mut tsv = String::from("stim_id\tn_trials\tchannels\texcluded\tcount\tmean\tm2\n");
        let mut bytes = Vec::new();
        for s in &b.sites {
            tsv += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                b.electrodes[s.stim].id,
                s.n_trials,
                ids(b, &s.channels),
                ids(b, &s.excluded),
                s.moments.count,
                s.moments.mean,
                s.moments.m2
            );
            for v in &s.average.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(pdir.join("sites.tsv"), tsv)?;
        fs::write(pdir.join("averages.bin"), bytes)?;
    }
    let mut patients: Vec<String> = banks.iter().map(|b| b.patient_id.clone()).collect();
    patients.sort();
    let index = BankIndex {
        format_version: crate::dataset::FORMAT_VERSION,
        t,
        patients,
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(dir.join(BANK_INDEX), text + "\n")?;
    Ok(())
}

pub fn load_banks(dir: &Path) -> Result<Vec<PatientBank<f32>>> {
    let path = dir.join(BANK_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    let index: BankIndex =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    let bad = |m: String| CoreError::Format(m);
    let mut out = Vec::new();
    for pid in &index.patients {
        let pdir = dir.join(pid);
        let (electrodes, outcome) = read_electrodes(&pdir.join("electrodes.tsv"))?;
        let lookup = |id: &str| {
            electrodes
                .iter()
                .position(|e| e.id == id)
                .ok_or_else(|| bad(format!("{pid}: unknown electrode {id}")))
        };
        let list = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(lookup).collect()
        };
        let bytes = fs::read(pdir.join("averages.bin"))?;
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tsv = fs::read_to_string(pdir.join("sites.tsv"))?;
        let mut sites = Vec::new();
        let mut offset = 0;
        for line in tsv.lines().skip(1).filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(bad(format!("{pid}: malformed sites row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("{pid}: bad number {s:?}")));
            let channels = list(cols[2])?;
            let n = channels.len() * index.t;
            let values = floats
                .get(offset..offset + n)
                .ok_or_else(|| bad(format!("{pid}: averages.bin too short")))?
                .to_vec();
            offset += n;
            sites.push(SiteResponses {
                stim: lookup(cols[0])?,
                excluded: list(cols[3])?,
                n_trials: cols[1].parse().map_err(|_| bad(format!("{pid}: bad trial count")))?,
                average: AveragedResponse {
                    c: channels.len(),
                    t: index.t,
                    values,
                },
                channels,
                moments: Moments {
                    count: cols[4].parse().map_err(|_| bad(format!("{pid}: bad count")))?,
                    mean: num(cols[5])?,
                    m2: num(cols[6])?,
                },
            });
        }
        if offset != floats.len() {
            return Err(bad(format!("{pid}: averages.bin has trailing data")));
        }
        out.push(PatientBank {
            patient_id: pid.clone(),
            electrodes,
            outcome,
            t: index.t,
            sites,
        });
    }
    Ok(out)
}
