//! Domain types and the on-disk cohort format.
//!
//! A cohort is a directory:
//!
//! ```text
//! manifest.json            index of patients (see `Manifest`)
//! <PATIENT>/signal.bin     little-endian f32, channel-major, rows in electrodes.tsv order
//! <PATIENT>/events.tsv     stim_id  onset_sample  current_ma  paired_with     (one row per trial)
//! <PATIENT>/electrodes.tsv id  x  y  z  soz  lobe  outcome                    (outcome on the first row only)
//! ```
//!
//! Positions are millimetres, `soz` is `0`/`1`, `paired_with` may be empty.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lobe {
    Frontal,
    Temporal,
    Parietal,
    Occipital,
    Central,
    Other,
}

impl Lobe {
    pub const ALL: [Lobe; 6] = [
        Lobe::Frontal,
        Lobe::Temporal,
        Lobe::Parietal,
        Lobe::Occipital,
        Lobe::Central,
        Lobe::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Lobe::Frontal => "frontal",
            Lobe::Temporal => "temporal",
            Lobe::Parietal => "parietal",
            Lobe::Occipital => "occipital",
            Lobe::Central => "central",
            Lobe::Other => "other",
        }
    }
}

impl FromStr for Lobe {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Lobe::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CoreError::Format(format!("unknown lobe {s:?}")))
    }
}

impl fmt::Display for Lobe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    SeizureFree,
    NotSeizureFree,
    #[default]
    Unknown,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::SeizureFree => "seizure_free",
            Outcome::NotSeizureFree => "not_seizure_free",
            Outcome::Unknown => "unknown",
        }
    }
}

impl FromStr for Outcome {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seizure_free" => Ok(Outcome::SeizureFree),
            "not_seizure_free" => Ok(Outcome::NotSeizureFree),
            "unknown" | "" => Ok(Outcome::Unknown),
            _ => Err(CoreError::Format(format!("unknown outcome {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Electrode {
    pub id: String,
    /// millimetres
    pub position: [f64; 3],
    pub soz: bool,
    pub lobe: Lobe,
}

/// Euclidean distance in millimetres.
pub fn electrode_distance(a: &Electrode, b: &Electrode) -> f64 {
    distance(&a.position, &b.position)
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// All trials delivered at one site. Paired-contact stimulation is recorded
/// under the first contact, with the second in `paired_with`.
#[derive(Clone, Debug, PartialEq)]
pub struct StimEvent {
    pub stim_id: String,
    pub onsets: Vec<usize>,
    pub current_ma: f64,
    pub paired_with: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub electrodes: Vec<Electrode>,
    pub sampling_rate: f64,
    pub stim_events: Vec<StimEvent>,
    /// channel-major, `electrodes.len() × n_samples`, microvolts
    pub signal: Vec<f32>,
    pub n_samples: usize,
    pub outcome: Outcome,
}

impl PatientRecord {
    pub fn channel(&self, i: usize) -> &[f32] {
        &self.signal[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn electrode_index(&self, id: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let pid = &self.patient_id;
        if self.electrodes.is_empty() {
            return Err(CoreError::Integrity(format!("{pid}: no electrodes")));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(CoreError::Integrity(format!("{pid}: sampling rate must be positive")));
        }
        let mut seen = HashSet::new();
        for e in &self.electrodes {
            if !seen.insert(e.id.as_str()) {
                return Err(CoreError::Integrity(format!("{pid}: duplicate electrode id {}", e.id)));
            }
            if e.position.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Integrity(format!("{pid}: electrode {} has a non-finite position", e.id)));
            }
        }
        if self.signal.len() != self.electrodes.len() * self.n_samples {
            return Err(CoreError::Integrity(format!(
                "{pid}: signal has {} values, expected {} channels × {} samples",
                self.signal.len(),
                self.electrodes.len(),
                self.n_samples
            )));
        }
        for ev in &self.stim_events {
            if !seen.contains(ev.stim_id.as_str()) {
                return Err(CoreError::Integrity(format!("{pid}: stim electrode {} not in montage", ev.stim_id)));
            }
            if let Some(p) = &ev.paired_with {
                if !seen.contains(p.as_str()) {
                    return Err(CoreError::Integrity(format!("{pid}: paired contact {p} not in montage")));
                }
            }
            if let Some(&o) = ev.onsets.iter().find(|&&o| o >= self.n_samples) {
                return Err(CoreError::Integrity(format!("{pid}: onset {o} beyond recording end")));
            }
        }
        Ok(())
    }
}

/// Trial-resolved responses, `n × c × t`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseTensor<T> {
    n: usize,
    c: usize,
    t: usize,
    values: Vec<T>,
}

impl<T: Float> ResponseTensor<T> {
    pub fn new(n: usize, c: usize, t: usize, values: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || t == 0 || values.len() != n * c * t {
            return Err(CoreError::Input(format!(
                "response tensor {n}×{c}×{t} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Input("response tensor has non-finite values".into()));
        }
        Ok(Self { n, c, t, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.c, self.t)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn trial(&self, i: usize) -> &[T] {
        &self.values[i * self.c * self.t..(i + 1) * self.c * self.t]
    }
}

/// Trial mean, `c × t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedResponse<T> {
    pub c: usize,
    pub t: usize,
    pub values: Vec<T>,
}

impl<T: Copy> AveragedResponse<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.t..(i + 1) * self.t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Epochs<T> {
    pub stim_electrode_id: String,
    pub data: ResponseTensor<T>,
    pub channel_ids: Vec<String>,
    pub excluded_channel_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LobeDistribution {
    pub lobes: Vec<Lobe>,
    pub all: Vec<f64>,
    pub soz: Vec<f64>,
    /// set when the cohort has no SOZ electrodes; `soz` is then all zero
    pub no_soz: bool,
}

pub fn lobe_distribution(cohort: &[PatientRecord]) -> Result<LobeDistribution> {
    let electrodes: Vec<&Electrode> = cohort.iter().flat_map(|p| &p.electrodes).collect();
    if electrodes.is_empty() {
        return Err(CoreError::Input("empty cohort".into()));
    }
    let n_soz = electrodes.iter().filter(|e| e.soz).count();
    let mut all = Vec::new();
    let mut soz = Vec::new();
    for lobe in Lobe::ALL {
        let here = electrodes.iter().filter(|e| e.lobe == lobe);
        all.push(here.clone().count() as f64 / electrodes.len() as f64);
        soz.push(if n_soz == 0 {
            0.0
        } else {
            here.filter(|e| e.soz).count() as f64 / n_soz as f64
        });
    }
    Ok(LobeDistribution {
        lobes: Lobe::ALL.to_vec(),
        all,
        soz,
        no_soz: n_soz == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub sampling_rate: f64,
    pub n_channels: usize,
    pub n_samples: usize,
    pub signal: String,
    /// byte offset of the first sample inside `signal`
    pub signal_offset: u64,
    pub electrodes: String,
    pub events: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub patients: Vec<ManifestEntry>,
}

fn fmt_err(path: &Path, msg: impl fmt::Display) -> CoreError {
    CoreError::Format(format!("{}: {msg}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| fmt_err(path, e))
}

pub fn electrodes_tsv(electrodes: &[Electrode], outcome: Outcome) -> String {
    let mut el = String::from("id\tx\ty\tz\tsoz\tlobe\toutcome\n");
    for (i, e) in electrodes.iter().enumerate() {
        let outcome = if i == 0 { outcome.as_str() } else { "" };
        el += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id, e.position[0], e.position[1], e.position[2], e.soz as u8, e.lobe, outcome
        );
    }
    el
}

pub fn write_patient(dir: &Path, p: &PatientRecord) -> Result<ManifestEntry> {
    p.validate()?;
    let pdir = dir.join(&p.patient_id);
    fs::create_dir_all(&pdir)?;

    let mut bytes = Vec::with_capacity(p.signal.len() * 4);
    for v in &p.signal {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(pdir.join("signal.bin"), bytes)?;

    fs::write(pdir.join("electrodes.tsv"), electrodes_tsv(&p.electrodes, p.outcome))?;

    let mut ev = String::from("stim_id\tonset_sample\tcurrent_ma\tpaired_with\n");
    for s in &p.stim_events {
        for o in &s.onsets {
            ev += &format!(
                "{}\t{}\t{}\t{}\n",
                s.stim_id,
                o,
                s.current_ma,
                s.paired_with.as_deref().unwrap_or("")
            );
        }
    }
    fs::write(pdir.join("events.tsv"), ev)?;

    Ok(ManifestEntry {
        patient_id: p.patient_id.clone(),
        sampling_rate: p.sampling_rate,
        n_channels: p.electrodes.len(),
        n_samples: p.n_samples,
        signal: format!("{}/signal.bin", p.patient_id),
        signal_offset: 0,
        electrodes: format!("{}/electrodes.tsv", p.patient_id),
        events: format!("{}/events.tsv", p.patient_id),
    })
}

pub fn write_manifest(dir: &Path, mut entries: Vec<ManifestEntry>) -> Result<()> {
    entries.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let m = Manifest {
        format_version: FORMAT_VERSION,
        patients: entries,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

pub fn write_cohort(dir: &Path, cohort: &[PatientRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = cohort.iter().map(|p| write_patient(dir, p)).collect::<Result<Vec<_>>>()?;
    write_manifest(dir, entries)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(fmt_err(&path, "manifest missing"));
    }
    let m: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| fmt_err(&path, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(fmt_err(&path, format!("unsupported format_version {}", m.format_version)));
    }
    Ok(m)
}

fn tsv_rows<'a>(path: &Path, text: &'a str, header: &[&str]) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    if head != header {
        return Err(fmt_err(path, format!("expected columns {header:?}, found {head:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != header.len() {
                return Err(fmt_err(path, format!("row {l:?} has {} columns", cols.len())));
            }
            Ok(cols)
        })
        .collect()
}

fn parse<T: FromStr>(path: &Path, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| fmt_err(path, format!("bad {what} {s:?}")))
}

/// Parses an `electrodes.tsv` sidecar; a missing SOZ flag is a label error.
pub fn read_electrodes(el_path: &Path) -> Result<(Vec<Electrode>, Outcome)> {
    let el_text = read_text(el_path)?;
    let rows = tsv_rows(el_path, &el_text, &["id", "x", "y", "z", "soz", "lobe", "outcome"])?;
    let mut electrodes = Vec::with_capacity(rows.len());
    let mut outcome = Outcome::Unknown;
    for (i, r) in rows.iter().enumerate() {
        let soz = match r[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CoreError::Label(format!(
                    "{}: electrode {} has no SOZ label ({other:?})",
                    el_path.display(), r[0]
                )))
            }
        };
        if i == 0 {
            outcome = r[6].parse()?;
        }
        electrodes.push(Electrode {
            id: r[0].to_string(),
            position: [
                parse(el_path, r[1], "x")?,
                parse(el_path, r[2], "y")?,
                parse(el_path, r[3], "z")?,
            ],
            soz,
            lobe: r[5].parse()?,
        });
    }
    Ok((electrodes, outcome))
}

pub fn load_patient(dir: &Path, entry: &ManifestEntry) -> Result<PatientRecord> {
    let el_path = dir.join(&entry.electrodes);
    let (electrodes, outcome) = read_electrodes(&el_path)?;
    if electrodes.len() != entry.n_channels {
        return Err(fmt_err(
            &el_path,
            format!("{} electrodes, manifest says {}", electrodes.len(), entry.n_channels),
        ));
    }

    let ev_path = dir.join(&entry.events);
    let ev_text = read_text(&ev_path)?;
    let rows = tsv_rows(&ev_path, &ev_text, &["stim_id", "onset_sample", "current_ma", "paired_with"])?;
    let mut stim_events: Vec<StimEvent> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for r in rows {
        let onset: usize = parse(&ev_path, r[1], "onset")?;
        let current: f64 = parse(&ev_path, r[2], "current")?;
        let paired = (!r[3].is_empty()).then(|| r[3].to_string());
        match slot.get(r[0]) {
            Some(&i) => {
                let ev = &mut stim_events[i];
                if ev.current_ma != current || ev.paired_with != paired {
                    return Err(fmt_err(&ev_path, format!("inconsistent rows for stim site {}", r[0])));
                }
                ev.onsets.push(onset);
            }
            None => {
                slot.insert(r[0].to_string(), stim_events.len());
                stim_events.push(StimEvent {
                    stim_id: r[0].to_string(),
                    onsets: vec![onset],
                    current_ma: current,
                    paired_with: paired,
                });
            }
        }
    }

    let sig_path = dir.join(&entry.signal);
    let bytes = fs::read(&sig_path).map_err(|e| fmt_err(&sig_path, e))?;
    let n = entry.n_channels * entry.n_samples;
    let start = entry.signal_offset as usize;
    let body = bytes
        .get(start..start + n * 4)
        .ok_or_else(|| fmt_err(&sig_path, format!("expected {n} samples from byte {start}")))?;
    let signal = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let record = PatientRecord {
        patient_id: entry.patient_id.clone(),
        electrodes,
        sampling_rate: entry.sampling_rate,
        stim_events,
        signal,
        n_samples: entry.n_samples,
        outcome,
    };
    record.validate()?;
    Ok(record)
}

/// Loads and validates every patient, ordered by patient id.
pub fn load_cohort(dir: &Path) -> Result<Vec<PatientRecord>> {
    let m = read_manifest(dir)?;
    let mut ids = BTreeMap::new();
    for e in &m.patients {
        if ids.insert(e.patient_id.clone(), ()).is_some() {
            return Err(CoreError::Integrity(format!("duplicate patient {}", e.patient_id)));
        }
    }
    let mut out = m.patients.iter().map(|e| load_patient(dir, e)).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(out)
}
