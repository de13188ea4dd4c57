mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use wimuse::csi_data::*;
use wimuse::losses::*;
use wimuse::model_zoo::{argmax, build_model, ModelKind, ModelVariant};
use wimuse::net_blocks::{Classifier, Geometry, Module, Tensor};
use wimuse::trainer::{fit, lr_at, TrainConfig};

fn dataset(n: usize, classes: usize, p: usize, seed: u64) -> CsiDataset {
    let tasks = vec![TaskSpec::numbered(GR, "g", classes).unwrap(), TaskSpec::numbered(IL, "l", 2).unwrap()];
    let meta = DatasetMeta {
        tasks,
        links: 1,
        subcarriers: 2,
        packets: p,
        sampling_rate_hz: None,
        duration_s: None,
        source: DataSource::Synth,
    };
    let mut r = common::rng(seed);
    let samples = (0..n)
        .map(|i| {
            let amp = common::uniform(&mut r, 2 * p, 0.0, 5.0).into_iter().map(|v| v as f32).collect();
            let labels = BTreeMap::from([(GR.to_string(), i % classes), (IL.to_string(), (i / classes) % 2)]);
            CsiSample::new(format!("s{i:04}"), [1, 2, p], amp, labels).unwrap()
        })
        .collect();
    CsiDataset::new(meta, samples).unwrap()
}

fn perturbed(m: &ModelVariant, prefix: &str, seed: u64) -> ModelVariant {
    let mut m = m.clone();
    let mut r = common::rng(seed);
    m.visit_mut("", &mut |n, p| {
        if n.starts_with(prefix) {
            for v in &mut p.value {
                *v += rand::Rng::random_range(&mut r, -0.5f32..0.5);
            }
        }
    });
    m
}

fn two_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::numbered(GR, "g", 3).unwrap(), TaskSpec::numbered(IL, "l", 4).unwrap()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_partitions(n in 2usize..80, ratio in 0.05f64..0.95, seed in 0u64..1000, classes in 2usize..5) {
        let ds = dataset(n, classes, 8, seed);
        let (train, test) = split_dataset(&ds, ratio, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert_eq!(train.len(), (ratio * n as f64).round() as usize);
        let a: BTreeSet<_> = train.samples.iter().map(|s| &s.sample_id).collect();
        let b: BTreeSet<_> = test.samples.iter().map(|s| &s.sample_id).collect();
        prop_assert!(a.is_disjoint(&b));
        let all: BTreeSet<_> = ds.samples.iter().map(|s| &s.sample_id).collect();
        prop_assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), all);
    }

    #[test]
    fn write_load_round_trip(n in 1usize..12, p in 2usize..20, seed in 0u64..1000) {
        let ds = dataset(n, 2, p, seed);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(&back.meta, &ds.meta);
        prop_assert_eq!(&back.samples, &ds.samples);
        prop_assert_eq!(dataset_digest(&back), dataset_digest(&ds));
    }

    #[test]
    fn resample_keeps_monotone_envelope(p in 2usize..40, target in 2usize..80, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let mut acc = 0.0f32;
        let series: Vec<f32> = (0..p).map(|_| { acc += rand::Rng::random_range(&mut r, 0.0f32..1.0); acc }).collect();
        let s = CsiSample::new("x", [1, 1, p], series.clone(), BTreeMap::new()).unwrap();
        let y = resample_time(&s, target).unwrap().amplitude;
        prop_assert_eq!(y.len(), target);
        let step = series.windows(2).map(|w| w[1] - w[0]).fold(0.0f32, f32::max);
        let eps = 1e-5 * acc.max(1.0);
        prop_assert!((y[0] - series[0]).abs() <= eps && (y[target - 1] - series[p - 1]).abs() <= eps);
        for w in y.windows(2) {
            prop_assert!(w[1] + eps >= w[0]);
        }
        prop_assert!(y.iter().all(|v| *v >= series[0] - eps - step && *v <= series[p - 1] + eps + step));
    }

    #[test]
    fn cross_entropy_nonnegative_and_zero_only_when_certain(z in prop::collection::vec(-30.0f64..30.0, 2..8), y in 0usize..8) {
        let y = y % z.len();
        let p = softmax(&z);
        let l = cross_entropy(&p, y);
        prop_assert!(l >= 0.0);
        let mut onehot = vec![0.0; z.len()];
        onehot[y] = 1.0;
        prop_assert_eq!(cross_entropy(&onehot, y), 0.0);
        prop_assert_eq!(argmax(&z.iter().map(|v| *v as f32).collect::<Vec<_>>()), argmax(&p.iter().map(|v| *v as f32).collect::<Vec<_>>()));
    }

    #[test]
    fn multitask_ce_is_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, d in -1.0f64..1.0, wa in 0.0f64..3.0, wb in 0.1f64..3.0) {
        let w = BTreeMap::from([("a".to_string(), wa), ("b".to_string(), wb)]);
        let f = |x: f64| multitask_ce(&BTreeMap::from([("a".to_string(), x), ("b".to_string(), b)]), &w).unwrap();
        prop_assert!((f(a + d) - f(a) - wa * d).abs() < 1e-12);
    }

    #[test]
    fn self_distillation_is_entropy(z in prop::collection::vec(-50.0f64..50.0, 2..12), tau in 0.05f64..20.0) {
        let p = softmax(&z.iter().map(|v| v / tau).collect::<Vec<_>>());
        let h: f64 = -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let kd = logits_kd_loss(&z, &z, tau, KdDirection::AsWritten).unwrap().loss;
        prop_assert!((kd - h).abs() <= 1e-9);
    }

    #[test]
    fn classifier_ignores_length_for_constant_features(t in 3usize..30, k in 2usize..5, seed in 0u64..100) {
        let c = 4;
        let cls = Classifier::new(c, 3, seed, "h").unwrap();
        let x = |len: usize| {
            let mut d = Vec::with_capacity(c * len);
            for ch in 0..c {
                d.extend(std::iter::repeat_n(0.3 * ch as f32 - 0.4, len));
            }
            Tensor::from_vec([1, c, len], d)
        };
        let a = cls.forward_eval(&x(t)).unwrap();
        let b = cls.forward_eval(&x(t * k)).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            prop_assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0));
        }
    }

    #[test]
    fn counts_ignore_parameter_values(seed in 0u64..1000) {
        let g = Geometry::new(1, 3, 64);
        let m = build_model(ModelKind::Wimuse, g, &two_tasks(), 0).unwrap();
        let q = perturbed(&m, "", seed);
        prop_assert_eq!(m.inference_parameters(), q.inference_parameters());
        prop_assert_eq!(m.count_multiadds(4).unwrap(), q.count_multiadds(4).unwrap());
    }

    #[test]
    fn heads_and_adaptors_are_isolated(seed in 0u64..1000) {
        let g = Geometry::new(1, 3, 64);
        let m = build_model(ModelKind::Wimuse, g, &two_tasks(), 1).unwrap();
        let x = Tensor::from_vec([2, 3, 64], common::uniform(&mut common::rng(seed), 384, 0.0, 1.0).iter().map(|v| *v as f32).collect());
        let base = m.forward_eval(&x, false).unwrap();
        prop_assert_eq!(&base.common_feature, &m.forward_eval(&x, false).unwrap().common_feature);
        for prefix in ["head.GR", "ra.GR"] {
            let o = perturbed(&m, prefix, seed).forward_eval(&x, false).unwrap();
            prop_assert_eq!(&o.logits[IL], &base.logits[IL]);
            prop_assert_ne!(&o.logits[GR], &base.logits[GR]);
            prop_assert_eq!(&o.common_feature, &base.common_feature);
        }
    }

    #[test]
    fn schedule_takes_halving_values(initial in 1e-5f64..1e-1) {
        let cfg = TrainConfig { initial_lr: initial, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        let allowed = [1.0, 0.5, 0.25, 0.125].map(|f| f * initial);
        let mut seen = BTreeSet::new();
        for e in 0..cfg.epochs {
            let lr = lr_at(e, &cfg);
            prop_assert!(lr <= prev);
            let i = allowed.iter().position(|a| (a - lr).abs() <= 1e-15 * initial);
            prop_assert!(i.is_some(), "lr {} at epoch {}", lr, e);
            seen.insert(i.unwrap());
            prev = lr;
        }
        prop_assert_eq!(seen.len(), 4);
    }
}

#[test]
fn synthetic_amplitudes_stay_nonnegative_under_heavy_noise() {
    let ds = synth_dataset(&SynthConfig {
        num_gestures: 2,
        num_locations: 2,
        num_users: 2,
        samples_per_combo: 2,
        subcarriers: 4,
        packets: 32,
        noise_sigma: 5.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let values: Vec<f32> = ds.samples.iter().flat_map(|s| s.amplitude.iter().copied()).collect();
    assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(values.contains(&0.0), "heavy noise should clamp some values");
}

#[test]
fn training_loss_falls_on_synthetic_data() {
    let ds = common::tiny_synth(4).select_tasks(&[GR, IL]).unwrap();
    for seed in 0..2 {
        let m = build_model(ModelKind::Nmts, common::geometry_of(&ds), &ds.meta.tasks, seed).unwrap();
        let out = fit(m, &ds, None, &common::quick_cfg(20, seed)).unwrap();
        let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.loss).collect();
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
