//! Patient-level repeated k-fold orchestration: fold plans, the training
//! loop with best-validation checkpointing, random-search tuning and the
//! resumable multi-run suite.
//!
//! Randomness derives from one seed through ChaCha8 substreams:
//!
//! ```text
//! folds      seed_from_u64(plan seed),   stream (1 << 32) | repeat
//! training   seed_from_u64(config seed), stream (2 << 32) | repeat·1000 + fold
//! tuning     seed_from_u64(search seed), stream  3 << 32
//! CNN eval   inference_rng(config seed, patient, target)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spes_nn::{adamw_step, loss::auto_pos_weight, AdamWConfig, AdamWState, Checkpoint, Model, ModelSpec, Session, Tensor};

use crate::error::{CoreError, Result};
use crate::evaluation::{
    auroc, fit_threshold_rule, patient_metrics, MetricsReport, PatientMetrics, PatientScores, RuleFit, RunMetrics,
    ThresholdRule,
};
use crate::paradigm::{inference_rng, Paradigm, ParadigmSample, PatientBank};
use crate::preprocess::{augment_noise, drop_channels, Moments, StandardizationStats};

const FOLD_DOMAIN: u64 = 1;
const TRAIN_DOMAIN: u64 = 2;
const TUNE_DOMAIN: u64 = 3;

pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 32) | index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CnnDivergent,
    CnnConvergent,
    CnnTransformer,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::CnnDivergent, Family::CnnConvergent, Family::CnnTransformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::CnnDivergent => "cnn_divergent",
            Family::CnnConvergent => "cnn_convergent",
            Family::CnnTransformer => "cnn_transformer",
        }
    }

    pub fn paradigm(self) -> Paradigm {
        match self {
            Family::CnnDivergent => Paradigm::Divergent,
            Family::CnnConvergent | Family::CnnTransformer => Paradigm::Convergent,
        }
    }

    pub fn is_cnn(self) -> bool {
        self != Family::CnnTransformer
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown model family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PosWeight {
    /// negatives / positives over the training targets
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub learning_rate: f64,
    /// CNN input rows per sample
    pub channel_budget: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    /// encoder layers (Transformer only)
    pub num_layers: usize,
    /// ResNet channel width
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub pos_weight: PosWeight,
    pub weight_decay: f64,
    pub noise_sd: f64,
    /// channel-drop proportion range (Transformer only)
    pub drop_range: (f64, f64),
    pub seed: u64,
}

impl TrainConfig {
    /// Tuned values of the reference study with full-size networks.
    pub fn paper(family: Family) -> Self {
        let (learning_rate, dropout, channel_budget) = match family {
            Family::CnnDivergent => (4.0e-3, 0.22, 49),
            Family::CnnConvergent => (1.3e-3, 0.44, 37),
            Family::CnnTransformer => (1.5e-4, 0.46, 37),
        };
        Self {
            family,
            learning_rate,
            channel_budget,
            dropout,
            embedding_dim: 16,
            num_layers: 2,
            base_width: 64,
            epochs: 50,
            batch_size: 32,
            pos_weight: PosWeight::Auto,
            weight_decay: 0.01,
            noise_sd: 0.1,
            drop_range: (0.0, 0.5),
            seed: 0,
        }
    }

    /// Narrow networks and short schedules that train in seconds on the
    /// desk-scale synthetic cohort. CNN budgets keep the reference ratio of
    /// budget to montage size (49/59, 37/59) at 30 electrodes; the
    /// Transformer needs a larger step than its reference value to converge
    /// in 20 epochs.
    pub fn desk(family: Family) -> Self {
        let mut c = Self::paper(family);
        c.base_width = 4;
        c.num_layers = 1;
        c.epochs = 20;
        c.batch_size = 16;
        match family {
            Family::CnnDivergent => c.channel_budget = 25,
            Family::CnnConvergent => c.channel_budget = 19,
            Family::CnnTransformer => {
                c.learning_rate = 1e-3;
                c.dropout = 0.2;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("{}: {m}", self.family)));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.family.is_cnn() && self.channel_budget == 0 {
            return bad("channel_budget must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        let (lo, hi) = self.drop_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad("drop range must satisfy 0 ≤ min ≤ max < 1");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be finite and non-negative");
        }
        if let PosWeight::Fixed(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("pos_weight must be positive");
            }
        }
        self.model_spec().validate().map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.family {
            Family::CnnTransformer => {
                ModelSpec::transformer(self.base_width, self.embedding_dim, self.num_layers, self.dropout)
            }
            _ => ModelSpec::cnn(self.channel_budget, self.base_width, self.embedding_dim, self.dropout),
        }
    }

    fn budget(&self) -> Option<usize> {
        self.family.is_cnn().then_some(self.channel_budget)
    }

    /// `key=value` lines; the format read by [`TrainConfig::parse`].
    pub fn to_kv(&self) -> String {
        let pw = match self.pos_weight {
            PosWeight::Auto => "auto".to_string(),
            PosWeight::Fixed(w) => w.to_string(),
        };
        [
            format!("family={}", self.family),
            format!("learning_rate={}", self.learning_rate),
            format!("channel_budget={}", self.channel_budget),
            format!("dropout={}", self.dropout),
            format!("embedding_dim={}", self.embedding_dim),
            format!("num_layers={}", self.num_layers),
            format!("base_width={}", self.base_width),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("pos_weight={pw}"),
            format!("weight_decay={}", self.weight_decay),
            format!("noise_sd={}", self.noise_sd),
            format!("drop_min={}", self.drop_range.0),
            format!("drop_max={}", self.drop_range.1),
            format!("seed={}", self.seed),
        ]
        .join("\n")
            + "\n"
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| CoreError::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "family" => self.family = value.parse()?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "channel_budget" => self.channel_budget = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "pos_weight" => {
                self.pos_weight = if value == "auto" {
                    PosWeight::Auto
                } else {
                    PosWeight::Fixed(num(key, value)?)
                }
            }
            "weight_decay" => self.weight_decay = num(key, value)?,
            "noise_sd" => self.noise_sd = num(key, value)?,
            "drop_min" => self.drop_range.0 = num(key, value)?,
            "drop_max" => self.drop_range.1 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(CoreError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected key=value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Desk defaults for the family named in `text` (or `family`), then the
    /// lines of `text`.
    pub fn parse(text: &str, family: Family) -> Result<Self> {
        let mut c = Self::desk(family);
        c.apply_kv(text)?;
        if c.family != family {
            let f = c.family;
            c = Self::desk(f);
            c.apply_kv(text)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// FNV-1a of the canonical text form.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_kv().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Run {
    pub repeat: usize,
    pub fold: usize,
}

impl fmt::Display for Run {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}-f{}", self.repeat, self.fold)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// sorted patient ids
    pub patients: Vec<String>,
    /// `assignments[repeat][i]` is the fold of `patients[i]`
    pub assignments: Vec<Vec<usize>>,
}

pub fn plan_folds(patient_ids: &[String], k: usize, repeats: usize, seed: u64) -> Result<FoldPlan> {
    let mut patients = patient_ids.to_vec();
    patients.sort();
    patients.dedup();
    if patients.len() != patient_ids.len() {
        return Err(CoreError::Config("duplicate patient ids".into()));
    }
    if k < 3 {
        return Err(CoreError::Config(format!("k = {k}: need separate train, validation and test folds")));
    }
    if repeats == 0 {
        return Err(CoreError::Config("repeats must be positive".into()));
    }
    if patients.len() < k {
        return Err(CoreError::Config(format!("{} patients cannot fill {k} folds", patients.len())));
    }
    let assignments = (0..repeats)
        .map(|r| {
            let mut order: Vec<usize> = (0..patients.len()).collect();
            order.shuffle(&mut substream(seed, FOLD_DOMAIN, r as u64));
            let mut fold = vec![0; patients.len()];
            for (pos, &i) in order.iter().enumerate() {
                fold[i] = pos % k;
            }
            fold
        })
        .collect();
    Ok(FoldPlan {
        k,
        repeats,
        seed,
        patients,
        assignments,
    })
}

impl FoldPlan {
    pub fn runs(&self) -> Vec<Run> {
        (0..self.repeats)
            .flat_map(|repeat| (0..self.k).map(move |fold| Run { repeat, fold }))
            .collect()
    }

    pub fn fold_of(&self, repeat: usize, patient_id: &str) -> Option<usize> {
        let i = self.patients.iter().position(|p| p == patient_id)?;
        Some(self.assignments[repeat][i])
    }

    /// Test fold `run.fold`, validation fold `run.fold + 1 (mod k)`, the rest
    /// train. Panics if the roles overlap.
    pub fn roles(&self, run: Run) -> Roles {
        assert!(run.repeat < self.repeats && run.fold < self.k, "run {run} outside the plan");
        let val = (run.fold + 1) % self.k;
        let mut roles = Roles {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (p, &f) in self.patients.iter().zip(&self.assignments[run.repeat]) {
            let bucket = if f == run.fold {
                &mut roles.test
            } else if f == val {
                &mut roles.validation
            } else {
                &mut roles.train
            };
            bucket.push(p.clone());
        }
        assert_no_leakage(&roles);
        roles
    }

    /// Mean patient counts per run `(train, test)`.
    pub fn mean_partition_sizes(&self) -> (f64, f64) {
        let runs = self.runs();
        let (mut tr, mut te) = (0usize, 0usize);
        for &r in &runs {
            let roles = self.roles(r);
            tr += roles.train.len();
            te += roles.test.len();
        }
        (tr as f64 / runs.len() as f64, te as f64 / runs.len() as f64)
    }
}

pub fn assert_no_leakage(roles: &Roles) {
    let mut seen = BTreeSet::new();
    for id in roles.train.iter().chain(&roles.validation).chain(&roles.test) {
        assert!(seen.insert(id.as_str()), "patient {id} appears in two roles");
    }
}

fn select_banks<'a>(banks: &'a [PatientBank<f32>], ids: &[String]) -> Result<Vec<&'a PatientBank<f32>>> {
    ids.iter()
        .map(|id| {
            banks
                .iter()
                .find(|b| &b.patient_id == id)
                .ok_or_else(|| CoreError::MissingData(format!("no bank for patient {id}")))
        })
        .collect()
}

/// Mean and SD over every trial-level value of the given banks.
pub fn fit_bank_standardization(banks: &[&PatientBank<f32>]) -> Result<StandardizationStats> {
    let m = banks.iter().fold(Moments::default(), |a, b| a.merge(&b.moments()));
    StandardizationStats::from_moments(&m)
}

pub fn standardize_bank(bank: &PatientBank<f32>, stats: &StandardizationStats) -> PatientBank<f32> {
    let mut out = bank.clone();
    for s in &mut out.sites {
        for v in &mut s.average.values {
            *v = stats.apply(*v);
        }
    }
    out
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn to_tensor(sample: ParadigmSample<f32>) -> Result<Tensor<f32>> {
    let c = sample.n_channels();
    Ok(Tensor::from_vec(&[c, sample.t], sample.channels)?)
}

/// Which rows of a Transformer input to keep at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Subset {
    All,
    /// random `n` rows per target, drawn from `seed`; all rows when fewer
    Random { n: usize, seed: u64 },
}

/// Eval-mode scores for every target of one standardised bank. CNN inputs
/// use the fixed per-target draw seeded by `config.seed`.
pub fn score_bank(
    model: &Model<f32>,
    config: &TrainConfig,
    bank: &PatientBank<f32>,
    subset: Subset,
) -> Result<PatientScores> {
    let paradigm = config.family.paradigm();
    let targets = bank.enumerate_targets(paradigm);
    let mut scores = PatientScores {
        patient_id: bank.patient_id.clone(),
        electrode_ids: Vec::with_capacity(targets.len()),
        scores: Vec::with_capacity(targets.len()),
        labels: Vec::with_capacity(targets.len()),
        outcome: bank.outcome,
    };
    for &target in &targets {
        let id = &bank.electrodes[target].id;
        let mut rng = inference_rng(config.seed, &bank.patient_id, id);
        let mut sample = bank.assemble(paradigm, target, config.budget(), &mut rng)?;
        if let Subset::Random { n, seed } = subset {
            if n < sample.n_channels() {
                let mut r = inference_rng(seed, &bank.patient_id, id);
                let mut keep = rand::seq::index::sample(&mut r, sample.n_channels(), n).into_vec();
                keep.sort_unstable();
                sample = sample.select(&keep);
            }
        }
        scores.labels.push(sample.label);
        let z = model.predict_logit(&to_tensor(sample)?)?;
        scores.scores.push(sigmoid64(z as f64));
        scores.electrode_ids.push(id.clone());
    }
    Ok(scores)
}

fn mean_auroc(scores: &[PatientScores]) -> Option<f64> {
    let v: Vec<f64> = scores.iter().filter_map(|p| auroc(&p.scores, &p.labels)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: Family,
    pub run: Run,
    pub config_hash: String,
    pub roles: Roles,
    pub pos_weight: f64,
    pub standardization: (f64, f64),
    pub history: Vec<EpochLog>,
    /// 1-based; 0 when no epoch produced a validation AUROC and the last
    /// epoch was kept
    pub best_epoch: usize,
    pub best_validation_auroc: Option<f64>,
    pub rule_n: f64,
    /// no validation patient was usable; the threshold is the median
    pub rule_fallback: bool,
    pub rule_skipped: Vec<String>,
    pub test_scores: Vec<PatientScores>,
    pub test_metrics: Vec<PatientMetrics>,
    /// mean over test patients with both classes
    pub mean_test_auroc: Option<f64>,
}

impl RunRecord {
    pub fn run_metrics(&self) -> RunMetrics {
        RunMetrics {
            repeat: self.run.repeat,
            fold: self.run.fold,
            patients: self.test_metrics.clone(),
        }
    }
}

pub struct TrainedRun {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

impl TrainedRun {
    pub fn stats(&self) -> StandardizationStats {
        StandardizationStats {
            mean: self.record.standardization.0,
            sd: self.record.standardization.1,
        }
    }
}

struct Prepared {
    stats: StandardizationStats,
    train: Vec<PatientBank<f32>>,
    validation: Vec<PatientBank<f32>>,
    test: Vec<PatientBank<f32>>,
}

fn prepare(banks: &[PatientBank<f32>], roles: &Roles) -> Result<Prepared> {
    if roles.train.is_empty() {
        return Err(CoreError::Config("empty training partition".into()));
    }
    let train = select_banks(banks, &roles.train)?;
    let stats = fit_bank_standardization(&train)?;
    let std = |ids: &[String]| -> Result<Vec<_>> {
        Ok(select_banks(banks, ids)?
            .into_iter()
            .map(|b| standardize_bank(b, &stats))
            .collect())
    };
    Ok(Prepared {
        stats,
        train: std(&roles.train)?,
        validation: std(&roles.validation)?,
        test: std(&roles.test)?,
    })
}

/// Result of the fitting phase: the best-validation model and its log.
pub struct Fitted {
    pub model: Model<f32>,
    pub optimizer: AdamWState<f32>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_validation_auroc: Option<f64>,
    pub pos_weight: f64,
}

fn fit(
    config: &TrainConfig,
    train: &[PatientBank<f32>],
    validation: &[PatientBank<f32>],
    rng: &mut ChaCha8Rng,
) -> Result<Fitted> {
    config.validate()?;
    let paradigm = config.family.paradigm();
    let items: Vec<(usize, usize, bool)> = train
        .iter()
        .enumerate()
        .flat_map(|(b, bank)| {
            bank.enumerate_targets(paradigm)
                .into_iter()
                .map(move |t| (b, t, bank.electrodes[t].soz))
        })
        .collect();
    if items.is_empty() {
        return Err(CoreError::Config("training partition has no targets".into()));
    }
    let pos_weight = match config.pos_weight {
        PosWeight::Fixed(w) => w,
        PosWeight::Auto => auto_pos_weight(items.iter().map(|i| i.2)).unwrap_or(1.0),
    };
    let pw = pos_weight as f32;
    let mut model = Model::<f32>::new(&config.model_spec(), rng)?;
    let n_params = model.params.len();
    let mut opt = AdamWState::new(n_params);
    let adamw = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::with_lr(config.learning_rate)
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0f32; n_params];
            for &i in batch {
                let (b, target, _) = items[i];
                let bank = &train[b];
                let mut sample = bank.assemble(paradigm, target, config.budget(), rng)?;
                if !config.family.is_cnn() {
                    let keep = drop_channels(sample.n_channels(), config.drop_range, rng);
                    sample = sample.select(&keep);
                }
                augment_noise(&mut sample.channels, config.noise_sd, rng);
                let label = sample.label;
                let x = to_tensor(sample)?;
                let mut s = Session::train(&model.params, rng);
                let l = model.loss(&mut s, &x, label, pw)?;
                let lv = s.tape.value(l).data()[0];
                if !lv.is_finite() {
                    return Err(CoreError::Training(format!(
                        "{}: non-finite loss at epoch {epoch}, patient {}, target {}",
                        config.family, bank.patient_id, bank.electrodes[target].id
                    )));
                }
                loss_sum += lv as f64;
                let g = s.tape.backward(l, &model.params).map_err(|e| {
                    CoreError::Training(format!(
                        "{}: epoch {epoch}, patient {}, target {}: {e}",
                        config.family, bank.patient_id, bank.electrodes[target].id
                    ))
                })?;
                for (a, v) in grad.iter_mut().zip(&g.flat) {
                    *a += v;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            adamw_step(model.params.flat_mut(), &grad, &mut opt, &adamw)
                .map_err(|e| CoreError::Training(format!("{}: epoch {epoch}: {e}", config.family)))?;
        }
        let val_scores = validation
            .iter()
            .map(|b| score_bank(&model, config, b, Subset::All))
            .collect::<Result<Vec<_>>>()?;
        let validation_auroc = mean_auroc(&val_scores);
        if let Some(a) = validation_auroc {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, epoch, model.params.flat().to_vec()));
            }
        }
        history.push(EpochLog {
            epoch,
            mean_loss: loss_sum / items.len() as f64,
            validation_auroc,
        });
    }
    let (best_epoch, best_validation_auroc) = match best {
        Some((a, e, params)) => {
            model.params.set_flat(params)?;
            (e, Some(a))
        }
        None => (0, None),
    };
    Ok(Fitted {
        model,
        optimizer: opt,
        history,
        best_epoch,
        best_validation_auroc,
        pos_weight,
    })
}

/// Trains one run and evaluates it: rule on validation, metrics on test.
pub fn train(banks: &[PatientBank<f32>], plan: &FoldPlan, run: Run, config: &TrainConfig) -> Result<TrainedRun> {
    train_roles(banks, plan.roles(run), run, config)
}

/// [`train`] with explicit roles; `run` only labels the record and picks
/// the random substream.
pub fn train_roles(banks: &[PatientBank<f32>], roles: Roles, run: Run, config: &TrainConfig) -> Result<TrainedRun> {
    assert_no_leakage(&roles);
    let data = prepare(banks, &roles)?;
    let mut rng = substream(config.seed, TRAIN_DOMAIN, (run.repeat * 1000 + run.fold) as u64);
    let fitted = fit(config, &data.train, &data.validation, &mut rng)?;

    let score_all = |bs: &[PatientBank<f32>]| -> Result<Vec<PatientScores>> {
        bs.iter().map(|b| score_bank(&fitted.model, config, b, Subset::All)).collect()
    };
    let (rule, rule_fallback) = match fit_threshold_rule(&score_all(&data.validation)?) {
        Ok(r) => (r, false),
        Err(CoreError::Rule(_)) => (
            RuleFit {
                rule: ThresholdRule { n: 0.0 },
                multipliers: Vec::new(),
                skipped: roles.validation.clone(),
            },
            true,
        ),
        Err(e) => return Err(e),
    };
    // test partition touched once, after training
    let test_scores = score_all(&data.test)?;
    let test_metrics: Vec<PatientMetrics> = test_scores.iter().map(|p| patient_metrics(p, &rule.rule)).collect();

    let record = RunRecord {
        family: config.family,
        run,
        config_hash: config.hash(),
        roles,
        pos_weight: fitted.pos_weight,
        standardization: (data.stats.mean, data.stats.sd),
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        best_validation_auroc: fitted.best_validation_auroc,
        rule_n: rule.rule.n,
        rule_fallback,
        rule_skipped: rule.skipped,
        mean_test_auroc: mean_auroc(&test_scores),
        test_scores,
        test_metrics,
    };
    let mut checkpoint = Checkpoint::from_model(&fitted.model);
    checkpoint.optimizer = Some(fitted.optimizer);
    let meta = [
        ("family", config.family.to_string()),
        ("repeat", run.repeat.to_string()),
        ("fold", run.fold.to_string()),
        ("best_epoch", record.best_epoch.to_string()),
        ("config_hash", record.config_hash.clone()),
        ("std_mean", data.stats.mean.to_string()),
        ("std_sd", data.stats.sd.to_string()),
    ];
    for (k, v) in meta {
        checkpoint.metadata.insert(k.into(), v);
    }
    Ok(TrainedRun { record, checkpoint })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// log-uniform
    pub learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    /// inclusive integer range, CNN families
    pub channel_budget: (usize, usize),
    pub embedding_dim: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub trials: usize,
    pub epochs: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: (1e-4, 1e-2),
            dropout: (0.0, 0.5),
            channel_budget: (20, 80),
            embedding_dim: vec![16, 32, 64],
            num_layers: vec![1, 2],
            trials: 10,
            epochs: 10,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.learning_rate.0
            && self.learning_rate.0 <= self.learning_rate.1
            && self.dropout.0 <= self.dropout.1
            && self.channel_budget.0 >= 1
            && self.channel_budget.0 <= self.channel_budget.1
            && !self.embedding_dim.is_empty()
            && !self.num_layers.is_empty()
            && self.trials > 0
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config("malformed search space".into()))
        }
    }

    pub fn sample_lr<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.learning_rate.0.ln(), self.learning_rate.1.ln());
        if hi > lo {
            rng.random_range(lo..hi).exp()
        } else {
            self.learning_rate.0
        }
    }

    /// `base` with the searched hyperparameters of its family redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, base: &TrainConfig, rng: &mut R) -> TrainConfig {
        let mut c = base.clone();
        c.epochs = self.epochs;
        c.learning_rate = self.sample_lr(rng);
        c.dropout = if self.dropout.1 > self.dropout.0 {
            rng.random_range(self.dropout.0..self.dropout.1)
        } else {
            self.dropout.0
        };
        if base.family.is_cnn() {
            c.channel_budget = rng.random_range(self.channel_budget.0..=self.channel_budget.1);
        } else {
            c.embedding_dim = self.embedding_dim[rng.random_range(0..self.embedding_dim.len())];
            c.num_layers = self.num_layers[rng.random_range(0..self.num_layers.len())];
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    /// best validation AUROC; `None` if training diverged or never scored
    pub validation_auroc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    /// winning trial's config with the base epoch count restored
    pub best: TrainConfig,
    pub trials: Vec<Trial>,
}

/// Trains every candidate on run (0, 0) and keeps the one with the highest
/// validation AUROC (first on ties).
pub fn tune_candidates(
    banks: &[PatientBank<f32>],
    plan: &FoldPlan,
    candidates: &[TrainConfig],
    final_epochs: usize,
) -> Result<TuneResult> {
    let run = Run { repeat: 0, fold: 0 };
    let data = prepare(banks, &plan.roles(run))?;
    let trials: Vec<Trial> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = substream(c.seed, TUNE_DOMAIN, i as u64);
            match fit(c, &data.train, &data.validation, &mut rng) {
                Ok(f) => Trial {
                    config: c.clone(),
                    validation_auroc: f.best_validation_auroc,
                    error: None,
                },
                Err(e) => Trial {
                    config: c.clone(),
                    validation_auroc: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut best: Option<(f64, usize)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Some(a) = t.validation_auroc {
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, i));
            }
        }
    }
    let Some((_, i)) = best else {
        let listing: Vec<String> = trials
            .iter()
            .map(|t| format!("lr={} -> {}", t.config.learning_rate, t.error.as_deref().unwrap_or("no validation AUROC")))
            .collect();
        return Err(CoreError::Training(format!("every tuning trial failed: {}", listing.join("; "))));
    };
    let mut chosen = trials[i].config.clone();
    chosen.epochs = final_epochs;
    Ok(TuneResult { best: chosen, trials })
}

/// Random search: `space.trials` configs drawn from a generator seeded
/// independently of the folds.
pub fn tune(
    banks: &[PatientBank<f32>],
    plan: &FoldPlan,
    base: &TrainConfig,
    space: &SearchSpace,
    search_seed: u64,
) -> Result<TuneResult> {
    space.validate()?;
    let mut rng = substream(search_seed, TUNE_DOMAIN, 0);
    let candidates: Vec<TrainConfig> = (0..space.trials).map(|_| space.sample(base, &mut rng)).collect();
    tune_candidates(banks, plan, &candidates, base.epochs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LedgerEntry {
    Completed { record: Box<RunRecord> },
    Failed { family: Family, run: Run, config_hash: String, error: String },
}

pub const LEDGER: &str = "ledger.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out: &Path, family: Family, run: Run) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("{family}-{run}.ckpt"))
}

/// Entries of `out/ledger.jsonl` in file order; a missing ledger is empty.
/// A torn final line (interrupted write) is ignored.
pub fn read_ledger(out: &Path) -> Result<Vec<LedgerEntry>> {
    let path = out.join(LEDGER);
    let f = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => return Err(CoreError::Format(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Latest completed record per (family, run) whose config hash matches.
pub fn completed_runs(entries: &[LedgerEntry]) -> BTreeMap<(Family, Run), RunRecord> {
    let mut out = BTreeMap::new();
    for e in entries {
        if let LedgerEntry::Completed { record } = e {
            out.insert((record.family, record.run), (**record).clone());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// ledger and checkpoints; nothing persisted without it
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// retrain runs already in the ledger
    pub force: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            out: None,
            jobs: 1,
            force: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: Family,
    pub config: TrainConfig,
    /// sorted by (repeat, fold)
    pub runs: Vec<RunRecord>,
    pub metrics: MetricsReport,
}

impl FamilyReport {
    pub fn per_run_auroc(&self) -> Vec<Option<f64>> {
        self.runs.iter().map(|r| r.mean_test_auroc).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub plan: FoldPlan,
    pub families: Vec<FamilyReport>,
    /// runs taken from the ledger rather than trained
    pub resumed: usize,
}

impl SuiteReport {
    pub fn family(&self, f: Family) -> Option<&FamilyReport> {
        self.families.iter().find(|r| r.family == f)
    }
}

struct Ledger {
    file: Option<Mutex<File>>,
}

impl Ledger {
    fn open(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
                Some(Mutex::new(OpenOptions::new().create(true).append(true).open(dir.join(LEDGER))?))
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn append(&self, e: &LedgerEntry) -> Result<()> {
        if let Some(f) = &self.file {
            let line = serde_json::to_string(e).map_err(|e| CoreError::Format(e.to_string()))? + "\n";
            let mut f = f.lock().expect("ledger lock");
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Trains and evaluates every (family, run) job on a pool of
/// `options.jobs` workers. Completed runs found in the ledger with the
/// same config are reused unless `force`.
pub fn run_suite(
    banks: &[PatientBank<f32>],
    plan: &FoldPlan,
    configs: &[TrainConfig],
    options: &SuiteOptions,
) -> Result<SuiteReport> {
    for c in configs {
        c.validate()?;
    }
    let done = match (&options.out, options.force) {
        (Some(out), false) => completed_runs(&read_ledger(out)?),
        _ => BTreeMap::new(),
    };
    let ledger = Ledger::open(options.out.as_deref())?;
    let jobs: Vec<(&TrainConfig, Run)> = configs
        .iter()
        .flat_map(|c| plan.runs().into_iter().map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| CoreError::Config(e.to_string()))?;
    let results: Vec<Result<(RunRecord, bool)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(config, run)| {
                if let Some(rec) = done.get(&(config.family, run)) {
                    let ckpt_ok = options
                        .out
                        .as_ref()
                        .is_none_or(|o| checkpoint_path(o, config.family, run).exists());
                    if rec.config_hash == config.hash() && rec.roles == plan.roles(run) && ckpt_ok {
                        return Ok((rec.clone(), true));
                    }
                }
                match train(banks, plan, run, config) {
                    Ok(t) => {
                        if let Some(out) = &options.out {
                            t.checkpoint.save(checkpoint_path(out, config.family, run))?;
                        }
                        ledger.append(&LedgerEntry::Completed {
                            record: Box::new(t.record.clone()),
                        })?;
                        Ok((t.record, false))
                    }
                    Err(e) => {
                        ledger.append(&LedgerEntry::Failed {
                            family: config.family,
                            run,
                            config_hash: config.hash(),
                            error: e.to_string(),
                        })?;
                        Err(e)
                    }
                }
            })
            .collect()
    });
    let mut resumed = 0;
    let mut by_family: BTreeMap<Family, Vec<RunRecord>> = BTreeMap::new();
    for r in results {
        let (rec, reused) = r?;
        resumed += reused as usize;
        by_family.entry(rec.family).or_default().push(rec);
    }
    let families = configs
        .iter()
        .map(|c| {
            let mut runs = by_family.remove(&c.family).unwrap_or_default();
            runs.sort_by_key(|r| r.run);
            let metrics = MetricsReport::from_runs(
                c.family.as_str(),
                &runs.iter().map(RunRecord::run_metrics).collect::<Vec<_>>(),
            );
            FamilyReport {
                family: c.family,
                config: c.clone(),
                runs,
                metrics,
            }
        })
        .collect();
    Ok(SuiteReport {
        plan: plan.clone(),
        families,
        resumed,
    })
}

/// Reloads a run's model from its checkpoint.
pub fn load_trained(out: &Path, record: &RunRecord) -> Result<TrainedRun> {
    let checkpoint = Checkpoint::load(checkpoint_path(out, record.family, record.run))?;
    Ok(TrainedRun {
        record: record.clone(),
        checkpoint,
    })
}
