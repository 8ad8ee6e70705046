use std::collections::BTreeMap;

use posedn::data::{Dataset, SceneSpec, Skeleton};
use posedn::geometry::KsParams;
use posedn::losses::LossConfig;
use posedn::model::{ModelConfig, PoseModel, Preset};
use posedn::numeric::Tensor;
use posedn::train::{model_grad_check, train_loop, AdamW, TraceRecord, TrainConfig};
use posedn::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        num_keypoints: 5,
        num_queries: 6,
        ..Preset::Tiny.config()
    }
}

fn scenes(num: usize, seed: u64) -> Dataset {
    let spec = SceneSpec::new(64, 3, Skeleton::star5(), seed).unwrap();
    Dataset::generate(&spec, num).unwrap()
}

fn ks() -> KsParams {
    KsParams::uniform(5, 0.1).unwrap()
}

fn run(model: &mut PoseModel, cfg: &TrainConfig, data: &Dataset, seed: u64) -> posedn::Result<Vec<TraceRecord>> {
    train_loop(
        model,
        cfg,
        &LossConfig::default(),
        &ks(),
        data,
        Some(data),
        seed,
        |_| Ok(()),
    )
}

fn bits(model: &PoseModel) -> Vec<u32> {
    model
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn zero_iterations_keep_weights() {
    let data = scenes(2, 1);
    let mut model = PoseModel::new(small_config(), 3).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    assert!(run(&mut model, &cfg, &data, 0).unwrap().is_empty());
    assert_eq!(model.params, before);
}

#[test]
fn same_seed_same_trace() {
    let data = scenes(3, 2);
    let cfg = TrainConfig {
        iterations: 3,
        batch_size: 2,
        lr: 1e-3,
        log_every: 1,
        eval_every: 2,
        ..TrainConfig::default()
    };
    let go = |seed| {
        let mut model = PoseModel::new(small_config(), 4).unwrap();
        let trace = run(&mut model, &cfg, &data, seed).unwrap();
        (serde_json::to_string(&trace).unwrap(), bits(&model))
    };
    let (a, wa) = go(5);
    let (b, wb) = go(5);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let (c, _) = go(6);
    assert_ne!(a, c);

    let trace: Vec<TraceRecord> = {
        let mut model = PoseModel::new(small_config(), 4).unwrap();
        run(&mut model, &cfg, &data, 5).unwrap()
    };
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(trace[0].eval.is_none() && trace[1].eval.is_some() && trace[2].eval.is_some());
    assert_eq!(trace[0].loss.layers.len(), 3);
}

#[test]
fn trace_record_fields() {
    let data = scenes(2, 3);
    let cfg = TrainConfig {
        iterations: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut model = PoseModel::new(small_config(), 5).unwrap();
    let trace = run(&mut model, &cfg, &data, 1).unwrap();
    let v: serde_json::Value = serde_json::to_value(&trace[0]).unwrap();
    for key in [
        "iteration",
        "grad_norm",
        "layers",
        "encoder",
        "total",
        "AP",
        "AP50",
        "AP75",
        "AR",
    ] {
        assert!(v.get(key).is_some(), "missing {key} in {v}");
    }
    for key in ["ksvf", "keypoint_l1", "oks_term", "dn_ksvf", "dn_keypoint_l1"] {
        assert!(v["layers"][0].get(key).is_some(), "missing {key}");
    }
    let back: TraceRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, trace[0]);
}

#[test]
fn loss_falls_on_the_overfit_set() {
    let data = scenes(8, 4);
    let cfg = TrainConfig {
        iterations: 101,
        lr: 1e-3,
        log_every: 100,
        ..TrainConfig::default()
    };
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..3 {
        let mut model = PoseModel::new(small_config(), seed).unwrap();
        let trace = run(&mut model, &cfg, &data, seed).unwrap();
        first.push(trace.first().unwrap().loss.total);
        last.push(trace.last().unwrap().loss.total);
        assert_eq!(trace.last().unwrap().iteration, 100);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (a, b) = (median(&mut first), median(&mut last));
    assert!(b < a, "loss {a} -> {b}");
}

#[test]
fn non_finite_weights_abort() {
    let data = scenes(2, 5);
    let mut model = PoseModel::new(small_config(), 6).unwrap();
    let name = model.params.names().next().unwrap().clone();
    model.params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        iterations: 2,
        ..TrainConfig::default()
    };
    assert!(matches!(run(&mut model, &cfg, &data, 0), Err(Error::Numeric(_))));
}

#[test]
fn config_is_validated() {
    let data = scenes(1, 6);
    let mut model = PoseModel::new(small_config(), 7).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(run(&mut model, &cfg, &data, 0), Err(Error::Config(_))));
    }
    let empty = Dataset::default();
    let cfg = TrainConfig::default();
    assert!(matches!(run(&mut model, &cfg, &empty, 0), Err(Error::Argument(_))));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 3, "bogus": 1}"#).is_err());
    assert_eq!(
        serde_json::from_str::<TrainConfig>(r#"{"iterations": 3}"#)
            .unwrap()
            .iterations,
        3
    );
}

#[test]
fn adamw_first_steps_match_hand_computation() {
    let mut model = PoseModel::new(small_config(), 8).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let matrix = names
        .iter()
        .find(|n| model.params.get(n).unwrap().shape().len() == 2)
        .unwrap()
        .clone();
    let vector = names
        .iter()
        .find(|n| model.params.get(n).unwrap().shape().len() == 1)
        .unwrap()
        .clone();
    let cfg = TrainConfig {
        lr: 0.01,
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let mut grads = BTreeMap::new();
    let gm: Vec<f32> = (0..model.params.get(&matrix).unwrap().numel())
        .map(|i| i as f32 * 0.1 - 0.3)
        .collect();
    let gv: Vec<f32> = vec![2.0; model.params.get(&vector).unwrap().numel()];
    grads.insert(matrix.clone(), gm.clone());
    grads.insert(vector.clone(), gv.clone());
    let m0: Tensor<f32> = model.params.get(&matrix).unwrap().clone();
    let v0: Tensor<f32> = model.params.get(&vector).unwrap().clone();
    let others: Vec<(String, Tensor<f32>)> = model
        .params
        .iter()
        .filter(|(n, _)| **n != matrix && **n != vector)
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();

    let mut opt = AdamW::new(&model);
    opt.update(&mut model, &grads, &cfg);
    // first step: the bias-corrected moments reduce to g and g^2
    for (i, (&p, &g)) in m0.data().iter().zip(&gm).enumerate() {
        let (p, g) = (p as f64, g as f64);
        let expect = p - 0.01 * (g / (g.abs() + 1e-8) + 0.1 * p);
        let got = model.params.get(&matrix).unwrap().data()[i] as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }
    for (i, &p) in v0.data().iter().enumerate() {
        let expect = p as f64 - 0.01 * (2.0 / (2.0 + 1e-8));
        assert!((model.params.get(&vector).unwrap().data()[i] as f64 - expect).abs() < 1e-6);
    }
    for (n, t) in &others {
        assert_eq!(model.params.get(n).unwrap(), t);
    }

    // second step with the same gradient: m and v are unchanged after
    // correction, so the move repeats
    let m1 = model.params.get(&vector).unwrap().clone();
    opt.update(&mut model, &grads, &cfg);
    for (i, &p) in m1.data().iter().enumerate() {
        let expect = p as f64 - 0.01 * (2.0 / (2.0 + 1e-8));
        assert!((model.params.get(&vector).unwrap().data()[i] as f64 - expect).abs() < 1e-6);
    }
}

#[test]
fn model_grad_check_covers_every_block() {
    let cfg = ModelConfig {
        hidden_dim: 16,
        ffn_dim: 16,
        pos_freqs: 4,
        decoder_layers: 2,
        ..small_config()
    };
    let model = PoseModel::new(cfg, 9).unwrap();
    let data = scenes(1, 7);
    let gts = data.normalized(0).unwrap();
    let report = model_grad_check(
        &model,
        &data.images[0],
        &gts,
        1,
        &LossConfig::default(),
        &ks(),
        1,
        1e-5,
        3,
    )
    .unwrap();
    assert_eq!(report.len(), model.params.len());
    let worst = report.iter().map(|b| b.max_rel).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{report:?}");
}
