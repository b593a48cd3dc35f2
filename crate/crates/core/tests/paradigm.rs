use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spes_core::dataset::{Electrode, Epochs, Lobe, Outcome, PatientRecord, ResponseTensor, StimEvent};
use spes_core::paradigm::*;
use spes_core::preprocess::PreprocessConfig;
use spes_core::synth::{generate_patient, SynthConfig};

#[test]
fn averaging() {
    let x = ResponseTensor::new(2, 1, 2, vec![1.0f64, 3.0, 3.0, 5.0]).unwrap();
    assert_eq!(average_trials(&x).values, vec![2.0, 4.0]);

    let same = ResponseTensor::new(3, 2, 2, [0.5f64, -1.0, 2.0, 7.0].repeat(3)).unwrap();
    assert_eq!(average_trials(&same).values, vec![0.5, -1.0, 2.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, c, t) = (7, 5, 11);
    let v: Vec<f64> = (0..n * c * t).map(|_| rng.random_range(-10.0..10.0)).collect();
    let avg = average_trials(&ResponseTensor::new(n, c, t, v.clone()).unwrap());
    for ch in 0..c {
        for k in 0..t {
            let mut s = 0.0;
            for i in 0..n {
                s += v[i * c * t + ch * t + k];
            }
            assert!((avg.row(ch)[k] - s / n as f64).abs() < 1e-12);
        }
    }
}

fn bank(electrodes: usize, stimulated_fraction: f64) -> PatientBank<f32> {
    let cfg = SynthConfig {
        n_patients: 1,
        electrodes_per_patient: electrodes,
        trials_per_stim: 1,
        sampling_rate: 512.0,
        stimulated_fraction,
        seed: 5,
        ..SynthConfig::default()
    };
    bank_record(&generate_patient(&cfg, 0).unwrap(), &PreprocessConfig::default()).unwrap().0
}

fn nondecreasing(d: &[f64]) -> bool {
    d.windows(2).all(|w| w[0] <= w[1])
}

#[test]
fn divergent_budgets() {
    let b = bank(59, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target = &b.electrodes[0].id;
    let all = b.assemble_divergent(target, None, &mut rng).unwrap();
    assert!(all.n_channels() >= 49);
    assert!(nondecreasing(&all.distances));
    let big = b.assemble_divergent(target, Some(all.n_channels()), &mut rng).unwrap();
    assert_eq!(big.channel_ids, all.channel_ids);

    let s = b.assemble_divergent(target, Some(49), &mut rng).unwrap();
    assert_eq!(s.n_channels(), 49);
    assert!(nondecreasing(&s.distances));
    assert_eq!(s.channel_ids.iter().collect::<BTreeSet<_>>().len(), 49);
    assert!(!s.channel_ids.contains(target));

    let again = |seed| b.assemble_divergent(target, Some(49), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(again(3), again(3));
}

#[test]
fn convergent_budget() {
    let b = bank(59, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = b.assemble_convergent(&b.electrodes[10].id, Some(37), &mut rng).unwrap();
    assert_eq!(s.n_channels(), 37);
    assert!(nondecreasing(&s.distances));
    assert_eq!(s.channel_ids.iter().collect::<BTreeSet<_>>().len(), 37);
}

#[test]
fn short_rows_fill_with_replacement() {
    let b = bank(12, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = &b.electrodes[0].id;
    let n = b.assemble_convergent(id, None, &mut rng).unwrap().n_channels();
    let s = b.assemble_convergent(id, Some(n + 5), &mut rng).unwrap();
    assert_eq!(s.n_channels(), n + 5);
    assert_eq!(s.channel_ids.iter().collect::<BTreeSet<_>>().len(), n);
    assert!(b.assemble_convergent(id, Some(0), &mut rng).is_err());
}

#[test]
fn cross_indexing_and_labels() {
    let b = bank(20, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for a in &b.electrodes {
        let div = b.assemble_divergent(&a.id, None, &mut rng).unwrap();
        assert_eq!(div.label, a.soz);
        for (i, other) in div.channel_ids.iter().enumerate() {
            let conv = b.assemble_convergent(other, None, &mut rng).unwrap();
            assert_eq!(conv.label, b.electrodes[b.electrode_index(other).unwrap()].soz);
            let j = conv.channel_ids.iter().position(|c| c == &a.id).unwrap();
            assert_eq!(div.row(i), conv.row(j));
            assert_eq!(div.distances[i], conv.distances[j]);
        }
    }
}

#[test]
fn targets_are_stimulated_electrodes() {
    let b = bank(59, 40.0 / 59.0);
    for p in [Paradigm::Divergent, Paradigm::Convergent] {
        let targets = b.enumerate_targets(p);
        assert_eq!(targets.len(), 40);
        let stims: BTreeSet<usize> = b.sites.iter().map(|s| s.stim).collect();
        assert_eq!(targets.iter().copied().collect::<BTreeSet<_>>(), stims);
    }
    let full = bank(12, 1.0);
    assert_eq!(full.enumerate_targets(Paradigm::Convergent).len(), 12);
}

fn hand_record() -> PatientRecord {
    let e = |id: &str, x: f64, soz: bool| Electrode {
        id: id.into(),
        position: [x, 0.0, 0.0],
        soz,
        lobe: Lobe::Other,
    };
    PatientRecord {
        patient_id: "T".into(),
        electrodes: vec![e("A", 0.0, true), e("B", 20.0, false)],
        sampling_rate: 512.0,
        stim_events: vec![],
        signal: vec![0.0; 2 * 2048],
        n_samples: 2048,
        outcome: Outcome::Unknown,
    }
}

fn one_row(stim: &str, channel: &str, values: Vec<f32>) -> Epochs<f32> {
    Epochs {
        stim_electrode_id: stim.into(),
        data: ResponseTensor::new(1, 1, values.len(), values).unwrap(),
        channel_ids: vec![channel.into()],
        excluded_channel_ids: vec![stim.into()],
    }
}

#[test]
fn two_electrode_montage() {
    let mut rec = hand_record();
    rec.stim_events = vec![StimEvent {
        stim_id: "A".into(),
        onsets: vec![1000],
        current_ma: 4.0,
        paired_with: None,
    }];
    let epochs = vec![one_row("A", "B", vec![1.0, 2.0, 3.0]), one_row("B", "A", vec![-4.0, 5.0, 6.0])];
    let b = PatientBank::from_epochs(&rec, &epochs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let conv = b.assemble_convergent("A", None, &mut rng).unwrap();
    assert_eq!(conv.channel_ids, vec!["B"]);
    assert_eq!(conv.channels, vec![-4.0, 5.0, 6.0]);
    assert!(conv.label);
    assert_eq!(conv.distances, vec![20.0]);

    let div = b.assemble_divergent("B", None, &mut rng).unwrap();
    assert_eq!(div.channels, vec![-4.0, 5.0, 6.0]);
    assert!(!div.label);

    let only_a = PatientBank::from_epochs(&rec, &epochs[..1]).unwrap();
    assert!(only_a.assemble_divergent("B", None, &mut rng).is_err());
    assert!(only_a.assemble_convergent("A", None, &mut rng).is_err());
}
