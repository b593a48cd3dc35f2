use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spes_core::dataset::load_cohort;
use spes_core::evaluation::{channel_sensitivity, CurvePoint, MetricsReport, TTest};
use spes_core::experiment::{
    load_trained, plan_folds, run_suite, tune, Family, SearchSpace, SuiteOptions, TrainConfig, CHECKPOINT_DIR, LEDGER,
};
use spes_core::paradigm::{bank_cohort, load_banks, write_banks, PatientBank, BANK_INDEX};
use spes_core::preprocess::PreprocessConfig;
use spes_core::report::{ablation_series, box_series, metrics_table, paired_comparison, render_summary, roc_series, summarize_ledger};
use spes_core::synth::{write_synthetic_cohort, SynthConfig};

use crate::manifest::{self, hash_bytes, hash_dir, RunManifest, Versions};
use crate::{AblateArgs, Cli, Command, Common, PlanArgs, PreprocessArgs, ResultsArgs, SynthArgs, TrainArgs, TuneArgs};

type Res<T> = Result<T, Box<dyn Error>>;

const UP_TO_DATE: &str = "up to date";

pub fn dispatch(cli: Cli) -> Res<String> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

/// Bookkeeping shared by every command: skip when up to date, otherwise
/// run `body` and record a manifest.
struct Job<'a> {
    command: &'static str,
    common: &'a Common,
    fingerprint: String,
    config_hash: Option<String>,
    cohort_hash: Option<String>,
}

impl Job<'_> {
    fn run(self, body: impl FnOnce() -> Res<(Vec<String>, String)>) -> Res<String> {
        let out = &self.common.out;
        if !self.common.force && manifest::up_to_date(out, self.command, &self.fingerprint) {
            return Ok(format!("{}: {UP_TO_DATE} ({})", self.command, out.display()));
        }
        let started = manifest::now_unix();
        let (outputs, message) = body()?;
        manifest::write(
            out,
            &RunManifest {
                command: self.command.into(),
                argv: std::env::args().collect(),
                fingerprint: self.fingerprint,
                config_hash: self.config_hash,
                cohort_hash: self.cohort_hash,
                seed: self.common.seed,
                versions: Versions::current(),
                started_unix: started,
                finished_unix: manifest::now_unix(),
                outputs,
            },
        )?;
        Ok(message)
    }
}

fn write_text(out: &Path, rel: &str, text: &str, outputs: &mut Vec<String>) -> Res<()> {
    let path = out.join(rel);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    outputs.push(rel.to_string());
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, rel: &str, value: &T, outputs: &mut Vec<String>) -> Res<()> {
    write_text(out, rel, &(serde_json::to_string_pretty(value)? + "\n"), outputs)
}

fn listing(out: &Path, sub: &str) -> Res<Vec<String>> {
    let mut v = Vec::new();
    if let Ok(rd) = fs::read_dir(out.join(sub)) {
        for e in rd {
            v.push(format!("{sub}/{}", e?.file_name().to_string_lossy()));
        }
    }
    v.sort();
    Ok(v)
}

fn synth(a: SynthArgs) -> Res<String> {
    let mut cfg = if a.desk { SynthConfig::desk() } else { SynthConfig::default() };
    cfg.seed = a.common.seed;
    macro_rules! over {
        ($($field:ident <- $arg:ident),*) => { $(if let Some(v) = a.$arg { cfg.$field = v; })* };
    }
    over!(n_patients <- patients, electrodes_per_patient <- electrodes, trials_per_stim <- trials,
        soz_fraction <- soz_fraction, sampling_rate <- sampling_rate, separation <- separation,
        delayed_response_rate <- delayed_rate, noise_sd <- noise_sd);
    cfg.validate()?;
    let settings = format!("{cfg:?}");
    let out = a.common.out.clone();
    Job {
        command: "synth",
        common: &a.common,
        fingerprint: hash_bytes(&[b"synth", settings.as_bytes()]),
        config_hash: Some(hash_bytes(&[settings.as_bytes()])),
        cohort_hash: None,
    }
    .run(|| {
        write_synthetic_cohort(&out, &cfg)?;
        let mut outputs = vec![spes_core::dataset::MANIFEST.to_string()];
        outputs.extend((0..cfg.n_patients).map(|i| cfg.patient_id(i)));
        let hash = hash_dir(&out)?;
        fs::write(out.join(manifest::COHORT_DIGEST), format!("{hash}\n"))?;
        outputs.push(manifest::COHORT_DIGEST.into());
        Ok((outputs, format!("synth: {} patients written to {} (cohort {hash})", cfg.n_patients, out.display())))
    })
}

fn preprocess(a: PreprocessArgs) -> Res<String> {
    let cfg = PreprocessConfig::default();
    let cohort_hash = hash_dir(&a.cohort)?;
    let out = a.common.out.clone();
    Job {
        command: "preprocess",
        common: &a.common,
        fingerprint: hash_bytes(&[b"preprocess", cohort_hash.as_bytes(), format!("{cfg:?}").as_bytes()]),
        config_hash: Some(hash_bytes(&[format!("{cfg:?}").as_bytes()])),
        cohort_hash: Some(cohort_hash),
    }
    .run(|| {
        let records = load_cohort(&a.cohort)?;
        let banked = bank_cohort(&records, &cfg)?;
        let banks: Vec<PatientBank<f32>> = banked.iter().map(|(b, _)| b.clone()).collect();
        write_banks(&out, &banks)?;
        let mut outputs = vec![BANK_INDEX.to_string()];
        outputs.extend(banks.iter().map(|b| b.patient_id.clone()));
        let mut tsv = String::from("patient_id\tsites\tdropped_trials\tdropped_sites\n");
        for (b, r) in &banked {
            tsv += &format!(
                "{}\t{}\t{}\t{}\n",
                b.patient_id,
                b.sites.len(),
                r.dropped_trials,
                r.dropped_sites.join(",")
            );
        }
        write_text(&out, "epoch_report.tsv", &tsv, &mut outputs)?;
        Ok((outputs, format!("preprocess: {} banks written to {}", banks.len(), out.display())))
    })
}

fn load_any(dir: &Path) -> Res<Vec<PatientBank<f32>>> {
    if dir.join(BANK_INDEX).exists() {
        return Ok(load_banks(dir)?);
    }
    let records = load_cohort(dir)?;
    Ok(bank_cohort(&records, &PreprocessConfig::default())?
        .into_iter()
        .map(|(b, _)| b)
        .collect())
}

fn families(names: &[String]) -> Res<Vec<Family>> {
    if names.is_empty() {
        return Ok(Family::ALL.to_vec());
    }
    let mut v: Vec<Family> = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

/// Desk defaults, the seed, then every config file. A file containing a
/// `family=` line applies only to that family; `<family>.<key>=` lines apply
/// only to the named family.
fn configs(fams: &[Family], files: &[PathBuf], seed: u64) -> Res<Vec<TrainConfig>> {
    let texts: Vec<String> = files.iter().map(fs::read_to_string).collect::<Result<_, _>>()?;
    fams.iter()
        .map(|&f| {
            let mut c = TrainConfig::desk(f);
            c.seed = seed;
            for text in &texts {
                let mut scope = None;
                let mut lines = Vec::new();
                for line in text.lines() {
                    let body = line.split('#').next().unwrap_or("").trim();
                    let Some((k, v)) = body.split_once('=') else {
                        if !body.is_empty() {
                            lines.push(body.to_string());
                        }
                        continue;
                    };
                    let k = k.trim();
                    if k == "family" {
                        scope = Some(v.trim().parse::<Family>()?);
                    } else if let Some((fam, key)) = k.split_once('.') {
                        if fam.parse::<Family>()? == f {
                            lines.push(format!("{key}={}", v.trim()));
                        }
                    } else {
                        lines.push(format!("{k}={}", v.trim()));
                    }
                }
                if scope.is_none_or(|s| s == f) {
                    c.apply_kv(&lines.join("\n"))?;
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

fn plan_for(banks: &[PatientBank<f32>], plan: &PlanArgs, seed: u64) -> Res<spes_core::experiment::FoldPlan> {
    let ids: Vec<String> = banks.iter().map(|b| b.patient_id.clone()).collect();
    Ok(plan_folds(&ids, plan.folds, plan.repeats, seed)?)
}

fn train(a: TrainArgs) -> Res<String> {
    let fams = families(&a.family)?;
    let cfgs = configs(&fams, &a.config, a.common.seed)?;
    let kv: String = cfgs.iter().map(TrainConfig::to_kv).collect::<Vec<_>>().join("\n");
    let cohort_hash = hash_dir(&a.cohort)?;
    let plan_text = format!("{} {} {}", a.plan.folds, a.plan.repeats, a.common.seed);
    let out = a.common.out.clone();
    let (jobs, force) = (a.common.jobs, a.common.force);
    Job {
        command: "train",
        common: &a.common,
        fingerprint: hash_bytes(&[b"train", cohort_hash.as_bytes(), kv.as_bytes(), plan_text.as_bytes()]),
        config_hash: Some(hash_bytes(&[kv.as_bytes()])),
        cohort_hash: Some(cohort_hash),
    }
    .run(|| {
        let banks = load_any(&a.cohort)?;
        let plan = plan_for(&banks, &a.plan, a.common.seed)?;
        let mut outputs = Vec::new();
        for c in &cfgs {
            write_text(&out, &format!("configs/{}.conf", c.family), &c.to_kv(), &mut outputs)?;
        }
        let suite = run_suite(
            &banks,
            &plan,
            &cfgs,
            &SuiteOptions {
                out: Some(out.clone()),
                jobs,
                force,
            },
        )?;
        write_json(&out, "plan.json", &plan, &mut outputs)?;
        let reports: Vec<MetricsReport> = suite.families.iter().map(|f| f.metrics.clone()).collect();
        let table = metrics_table(&reports);
        write_text(&out, "table.txt", &table, &mut outputs)?;
        outputs.push(LEDGER.into());
        outputs.extend(listing(&out, CHECKPOINT_DIR)?);
        let runs: usize = suite.families.iter().map(|f| f.runs.len()).sum();
        Ok((
            outputs,
            format!("train: {runs} runs ({} resumed from the ledger)\n{table}", suite.resumed),
        ))
    })
}

fn tune_cmd(a: TuneArgs) -> Res<String> {
    let fams = families(&a.family)?;
    let cfgs = configs(&fams, &a.config, a.common.seed)?;
    let kv: String = cfgs.iter().map(TrainConfig::to_kv).collect::<Vec<_>>().join("\n");
    let cohort_hash = hash_dir(&a.cohort)?;
    let space = SearchSpace {
        trials: a.trials,
        epochs: a.tune_epochs,
        ..SearchSpace::default()
    };
    let settings = format!("{space:?} {} {} {}", a.plan.folds, a.plan.repeats, a.common.seed);
    let out = a.common.out.clone();
    Job {
        command: "tune",
        common: &a.common,
        fingerprint: hash_bytes(&[b"tune", cohort_hash.as_bytes(), kv.as_bytes(), settings.as_bytes()]),
        config_hash: Some(hash_bytes(&[kv.as_bytes()])),
        cohort_hash: Some(cohort_hash),
    }
    .run(|| {
        let banks = load_any(&a.cohort)?;
        let plan = plan_for(&banks, &a.plan, a.common.seed)?;
        let mut outputs = Vec::new();
        let mut msg = String::from("tune:");
        for base in &cfgs {
            let r = tune(&banks, &plan, base, &space, a.common.seed)?;
            let f = base.family;
            write_text(&out, &format!("tuned/{f}.conf"), &r.best.to_kv(), &mut outputs)?;
            write_json(&out, &format!("tuned/{f}.trials.json"), &r.trials, &mut outputs)?;
            let best = r
                .trials
                .iter()
                .filter_map(|t| t.validation_auroc)
                .fold(f64::NEG_INFINITY, f64::max);
            msg += &format!("\n  {f}: best validation AUROC {best:.3} -> tuned/{f}.conf");
        }
        Ok((outputs, msg))
    })
}

fn ledger_hash(out: &Path) -> String {
    let bytes = fs::read(out.join(LEDGER)).unwrap_or_default();
    hash_bytes(&[&bytes])
}

#[derive(Serialize)]
struct Comparison {
    a: Family,
    b: Family,
    test: TTest,
}

fn evaluate(a: ResultsArgs) -> Res<String> {
    let out = a.common.out.clone();
    Job {
        command: "evaluate",
        common: &a.common,
        fingerprint: hash_bytes(&[b"evaluate", ledger_hash(&out).as_bytes()]),
        config_hash: None,
        cohort_hash: None,
    }
    .run(|| {
        let summary = summarize_ledger(&out)?;
        let mut outputs = Vec::new();
        let comparisons: Vec<Comparison> = [
            (Family::CnnTransformer, Family::CnnConvergent),
            (Family::CnnConvergent, Family::CnnDivergent),
            (Family::CnnTransformer, Family::CnnDivergent),
        ]
        .into_iter()
        .filter_map(|(x, y)| paired_comparison(&summary, x, y).map(|test| Comparison { a: x, b: y, test }))
        .collect();
        write_json(
            &out,
            "metrics.json",
            &serde_json::json!({ "reports": summary.reports, "comparisons": comparisons }),
            &mut outputs,
        )?;
        let text = render_summary(&summary);
        write_text(&out, "evaluation.txt", &text, &mut outputs)?;
        Ok((outputs, text.trim_end().to_string()))
    })
}

fn ablate(a: AblateArgs) -> Res<String> {
    let out = a.common.out.clone();
    let cohort_hash = hash_dir(&a.cohort)?;
    let settings = format!("{:?} {} {}", a.sizes, a.draws, a.common.seed);
    Job {
        command: "ablate",
        common: &a.common,
        fingerprint: hash_bytes(&[
            b"ablate",
            ledger_hash(&out).as_bytes(),
            cohort_hash.as_bytes(),
            settings.as_bytes(),
        ]),
        config_hash: None,
        cohort_hash: Some(cohort_hash),
    }
    .run(|| {
        let summary = summarize_ledger(&out)?;
        let records = summary
            .records
            .get(&Family::CnnTransformer)
            .ok_or("no completed cnn_transformer runs in the ledger")?;
        let runs = records
            .iter()
            .map(|r| load_trained(&out, r))
            .collect::<Result<Vec<_>, _>>()?;
        let banks = load_any(&a.cohort)?;
        let curve: Vec<CurvePoint> = channel_sensitivity(&runs, &banks, &a.sizes, a.draws, a.common.seed)?;
        let mut outputs = Vec::new();
        write_json(&out, "ablation.json", &curve, &mut outputs)?;
        write_text(&out, "series/ablation.tsv", &ablation_series(&curve), &mut outputs)?;
        let lines: Vec<String> = curve
            .iter()
            .map(|p| {
                format!(
                    "  n = {:>3}: AUROC {:.3} [{:.3}, {:.3}]{}",
                    p.n,
                    p.mean_auroc,
                    p.ci_lo,
                    p.ci_hi,
                    if p.clamped { " (clamped)" } else { "" }
                )
            })
            .collect();
        Ok((outputs, format!("ablate:\n{}", lines.join("\n"))))
    })
}

fn report(a: ResultsArgs) -> Res<String> {
    let out = a.common.out.clone();
    let ablation = fs::read(out.join("ablation.json")).unwrap_or_default();
    Job {
        command: "report",
        common: &a.common,
        fingerprint: hash_bytes(&[b"report", ledger_hash(&out).as_bytes(), &ablation]),
        config_hash: None,
        cohort_hash: None,
    }
    .run(|| {
        let summary = summarize_ledger(&out)?;
        let mut outputs = Vec::new();
        let text = render_summary(&summary);
        write_text(&out, "report.txt", &text, &mut outputs)?;
        for (f, recs) in &summary.records {
            write_text(&out, &format!("series/roc_{f}.tsv"), &roc_series(recs), &mut outputs)?;
        }
        for r in &summary.reports {
            write_text(&out, &format!("series/outcome_{}.tsv", r.model), &box_series(&r.outcome), &mut outputs)?;
        }
        if !ablation.is_empty() {
            let curve: Vec<CurvePoint> = serde_json::from_slice(&ablation)?;
            write_text(&out, "series/ablation.tsv", &ablation_series(&curve), &mut outputs)?;
        }
        Ok((outputs, text.trim_end().to_string()))
    })
}
