//! Freezing, cloning, ensembling, evaluation and reproducibility of training.

use std::collections::BTreeMap;

use gridcast::checkpoint::{Checkpoint, Phase};
use gridcast::data::{synth_city_with, FrameMode, Profile, Strategy, SynthConfig};
use gridcast::model::{DualUNet, ModelConfig};
use gridcast::nn::{spatial_dropout, Mode};
use gridcast::optim::OptimConfig;
use gridcast::params::Group;
use gridcast::trainer::{
    clone_for_targets, ensemble_forward, ensemble_mean, evaluate, finetune, train_phase, Dataset, DatasetSpec,
    FinetunePlan, PhasePlan, PhaseSettings, RunReport, TargetPlan, TrainPlan,
};
use gridcast::{data, rng, Error, Tensor};

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig::core().with_encoder_widths([2, 3, 2]).with_seed(seed)
}

fn dataset(seed: u64, profile: Profile, windows: usize) -> Dataset {
    let city = synth_city_with(&SynthConfig::new(seed, 8, 8, 1, profile)).unwrap();
    Dataset::new(vec![city], Strategy::Nonoverlap, FrameMode::Six).unwrap().limit(windows)
}

fn settings(name: &str, epochs: u64) -> PhaseSettings {
    PhaseSettings::new(name, epochs)
        .with_optimizer(OptimConfig::lamb().with_lr(0.01))
        .with_batch_size(2)
}

fn fresh(seed: u64) -> Checkpoint<f32> {
    Checkpoint::new(DualUNet::build(&small_model(seed)).unwrap())
}

#[test]
fn finetune_leaves_phi_untouched() {
    let mut ck = fresh(1);
    let phi = ck.model.store.fingerprint(Some(Group::EncoderPhi));
    let others = [Group::EncoderTheta, Group::DecoderTheta, Group::Head].map(|g| ck.model.store.fingerprint(Some(g)));
    finetune(&mut ck, &settings("ft", 2), &dataset(3, Profile::Pre, 4), None, 5, &mut RunReport::default()).unwrap();
    assert_eq!(ck.model.store.fingerprint(Some(Group::EncoderPhi)), phi);
    let after = [Group::EncoderTheta, Group::DecoderTheta, Group::Head].map(|g| ck.model.store.fingerprint(Some(g)));
    for (a, b) in others.iter().zip(after) {
        assert_ne!(*a, b);
    }
    assert_eq!(ck.phase, Phase::Finetuned);
    assert!(ck.model.store.is_frozen(Group::EncoderPhi));
}

#[test]
fn clones_are_independent() {
    let base = fresh(2);
    let before = base.model.store.fingerprint(None);
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let mut clones = clone_for_targets(&base, &names).unwrap();
    finetune(&mut clones[0], &settings("ft", 1), &dataset(4, Profile::Pre, 2), None, 1, &mut RunReport::default())
        .unwrap();
    assert_ne!(clones[0].model.store.fingerprint(None), before);
    assert_eq!(clones[1].model.store.fingerprint(None), before);
    assert_eq!(clones[2].model.store.fingerprint(None), before);
    assert_eq!(base.model.store.fingerprint(None), before);
    assert!(!clones[1].model.store.is_frozen(Group::EncoderPhi));
    for (a, b) in base.model.store.entries().iter().zip(clones[1].model.store.entries()) {
        assert!(!a.value.same_storage(&b.value));
    }
    assert!(clone_for_targets(&base, &[]).is_err());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn ensemble_mean_ignores_member_order() {
    let models: Vec<DualUNet<f32>> = (0..4).map(|s| DualUNet::build(&small_model(10 + s)).unwrap()).collect();
    let x = dataset(5, Profile::Pre, 1).pair::<f32>(0).unwrap().input;
    let reference: Vec<u32> = {
        let refs: Vec<&DualUNet<f32>> = models.iter().collect();
        ensemble_forward(&refs, &x, None).unwrap().data().iter().map(|v| v.to_bits()).collect()
    };
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    for p in perms {
        let refs: Vec<&DualUNet<f32>> = p.iter().map(|&i| &models[i]).collect();
        let bits: Vec<u32> = ensemble_forward(&refs, &x, None).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, reference, "{p:?}");
    }
    let single = ensemble_forward(&[&models[0]], &x, None).unwrap();
    assert_eq!(single.data(), models[0].predict(&x).unwrap().data());
}

#[test]
fn ensemble_mean_arithmetic() {
    let a = Tensor::from_f64s(&[0.0, 1.0, 0.5], &[3]).unwrap();
    let b = Tensor::from_f64s(&[1.0, 1.0, 0.25], &[3]).unwrap();
    let m: Tensor<f64> = ensemble_mean(&[a.clone(), b]).unwrap();
    assert_eq!(m.to_vec(), vec![0.5, 1.0, 0.375]);
    assert_eq!(ensemble_mean(std::slice::from_ref(&a)).unwrap().to_vec(), a.to_vec());
    assert!(ensemble_mean::<f64>(&[]).is_err());
}

#[test]
fn evaluate_matches_direct_computation() {
    let model = DualUNet::<f64>::build(&small_model(6)).unwrap();
    let ds = dataset(7, Profile::Covid, 3);
    let ev = evaluate(&[&model], &ds, None).unwrap();
    let mut mse = 0.0;
    for i in 0..ds.len() {
        let pair = ds.pair::<f64>(i).unwrap();
        let pred = model.predict(&pair.input).unwrap();
        let sq: f64 = pred.data().iter().zip(pair.target.data()).map(|(p, t)| (p - t).powi(2)).sum();
        mse += sq / pred.numel() as f64;
    }
    assert!((ev.mse - mse / 3.0).abs() < 1e-12);
    assert_eq!(ev.samples, 3);

    // Rounding to bytes moves every element by at most half a level.
    let one = ds.clone().limit(1);
    let ev = evaluate(&[&model], &one, None).unwrap();
    assert!((ev.score.sqrt() - 255.0 * ev.mse.sqrt()).abs() <= 0.5 + 1e-9);
}

#[test]
fn masked_evaluation_zeroes_off_road_pixels() {
    let model = DualUNet::<f64>::build(&small_model(8)).unwrap();
    let ds = dataset(9, Profile::Pre, 2);
    let mask = data::derive_mask(&ds.movies[0].frames, data::MaskSource::Test).unwrap();
    let masked = evaluate(&[&model], &ds, Some(&mask)).unwrap();
    let plain = evaluate(&[&model], &ds, None).unwrap();
    assert!(masked.mse < plain.mse);
    let x = ds.pair::<f64>(0).unwrap().input;
    let out = ensemble_forward(&[&model], &x, Some(&mask)).unwrap();
    for (i, v) in out.data().iter().enumerate() {
        let pixel = (i / 8) % 64;
        if mask.data[pixel] == 0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn split_phase_resume_equals_unsplit() {
    let train = dataset(11, Profile::Pre, 4);
    let val = dataset(11, Profile::Covid, 2);
    let mut straight = fresh(3);
    train_phase(&mut straight, &settings("pre", 4), &train, Some(&val), 9, &mut RunReport::default()).unwrap();

    let mut first = fresh(3);
    let mut report = RunReport::default();
    train_phase(&mut first, &settings("pre", 2), &train, Some(&val), 9, &mut report).unwrap();
    let mut resumed = Checkpoint::<f32>::from_bytes(&first.to_bytes().unwrap()).unwrap();
    train_phase(&mut resumed, &settings("pre", 4), &train, Some(&val), 9, &mut report).unwrap();

    assert_eq!(resumed.to_bytes().unwrap(), straight.to_bytes().unwrap());
    assert_eq!(report.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert_eq!(resumed.history, vec![("pre".to_string(), 4)]);
}

#[test]
fn divergence_rolls_back() {
    let train = dataset(12, Profile::Pre, 4);
    let mut ck = fresh(4);
    train_phase(&mut ck, &settings("pre", 1), &train, None, 0, &mut RunReport::default()).unwrap();
    let good = ck.to_bytes().unwrap();
    let wild = PhaseSettings::new("pre", 3).with_optimizer(OptimConfig::lamb().with_lr(1e38)).with_batch_size(1);
    let err = train_phase(&mut ck, &wild, &train, None, 0, &mut RunReport::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    let after = ck.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&after).unwrap();
    assert!(back.model.store.entries().iter().all(|e| e.value.data().iter().all(|v| v.is_finite())));
    // Rolled back to the end of the last good epoch, which may be the first
    // epoch of the wild phase if it stayed finite.
    if back.history.last().unwrap().1 == 1 {
        assert_eq!(back.model.store.fingerprint(None), Checkpoint::<f32>::from_bytes(&good).unwrap().model.store.fingerprint(None));
    }
}

fn synth(seed: u64, profile: Profile) -> DatasetSpec {
    DatasetSpec {
        max_samples: Some(3),
        ..DatasetSpec::synthetic(vec![SynthConfig::new(seed, 8, 8, 1, profile)])
    }
}

fn plan() -> TrainPlan {
    let opt = OptimConfig::lamb().with_lr(0.02);
    let mut datasets = BTreeMap::new();
    datasets.insert("aux".to_string(), synth(21, Profile::Pre));
    datasets.insert("a".to_string(), synth(22, Profile::Pre));
    datasets.insert("b".to_string(), synth(23, Profile::Pre));
    datasets.insert("test".to_string(), synth(22, Profile::Covid));
    TrainPlan {
        name: "repro".into(),
        seed: 17,
        model: ModelConfig::core().with_encoder_widths([2, 3, 2]),
        datasets,
        phases: vec![PhasePlan {
            name: "pretrain".into(),
            epochs: 2,
            batch_size: 2,
            optimizer: opt,
            freeze: Vec::new(),
            unfreeze: Vec::new(),
            train: "aux".into(),
            validation: Some("test".into()),
        }],
        finetune: Some(FinetunePlan {
            targets: ["a", "b"]
                .map(|t| TargetPlan { name: t.into(), train: t.into(), validation: None })
                .to_vec(),
            epochs: 1,
            batch_size: 2,
            optimizer: opt,
        }),
        evaluate: Some("test".into()),
    }
}

fn no_files(p: &str) -> gridcast::Result<Vec<std::path::PathBuf>> {
    Err(Error::Config(format!("unexpected glob {p}")))
}

#[test]
fn fixed_seed_pipeline_is_reproducible() {
    let p = plan();
    let ds = p.load_datasets(&no_files).unwrap();
    let a = p.run::<f32>(&ds, None, 1).unwrap();
    let b = p.run::<f32>(&ds, None, 2).unwrap();
    assert_eq!(a.pretrained.to_bytes().unwrap(), b.pretrained.to_bytes().unwrap());
    assert_eq!(a.finetuned.len(), 2);
    for ((na, ca), (nb, cb)) in a.finetuned.iter().zip(&b.finetuned) {
        assert_eq!(na, nb);
        assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());
    }
    assert_eq!(a.report.to_csv_untimed(), b.report.to_csv_untimed());
    assert_eq!(a.report.evaluations, b.report.evaluations);
    let names: Vec<&str> = a.report.evaluations.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["a", "b", "ensemble"]);
}

#[test]
fn plan_resumes_from_pretrained_checkpoint() {
    let full = plan();
    let ds = full.load_datasets(&no_files).unwrap();
    let unsplit = full.run::<f32>(&ds, None, 1).unwrap();

    let mut early = full.clone();
    early.phases[0].epochs = 1;
    early.finetune = None;
    early.evaluate = None;
    let partial = early.run::<f32>(&ds, None, 1).unwrap();
    let start = Checkpoint::from_bytes(&partial.pretrained.to_bytes().unwrap()).unwrap();
    let resumed = full.run::<f32>(&ds, Some(start), 1).unwrap();

    assert_eq!(resumed.pretrained.to_bytes().unwrap(), unsplit.pretrained.to_bytes().unwrap());
    for ((_, a), (_, b)) in resumed.finetuned.iter().zip(&unsplit.finetuned) {
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }
}

#[test]
fn dropout_contracts() {
    let x = Tensor::<f64>::full(&[40, 3, 2], 1.0);
    let mut r = rng::stream(1, &[]);
    assert_eq!(spatial_dropout(&x, 0.5, Mode::Eval, &mut r).unwrap().to_vec(), x.to_vec());
    assert_eq!(spatial_dropout(&x, 0.0, Mode::Train, &mut r).unwrap().to_vec(), x.to_vec());
    let y = spatial_dropout(&x, 0.25, Mode::Train, &mut r).unwrap();
    let mut dropped = 0;
    for map in y.data().chunks(6) {
        let first = map[0];
        assert!(map.iter().all(|&v| v == first), "maps drop as a whole");
        assert!(first == 0.0 || (first - 1.0 / 0.75).abs() < 1e-12);
        dropped += usize::from(first == 0.0);
    }
    assert!(dropped > 0 && dropped < 40);
    let replay = {
        let mut r = rng::stream(1, &[]);
        spatial_dropout(&x, 0.5, Mode::Eval, &mut r).unwrap();
        spatial_dropout(&x, 0.0, Mode::Train, &mut r).unwrap();
        spatial_dropout(&x, 0.25, Mode::Train, &mut r).unwrap()
    };
    assert_eq!(replay.to_vec(), y.to_vec());
    assert!(spatial_dropout(&x, 1.0, Mode::Train, &mut r).is_err());
}
