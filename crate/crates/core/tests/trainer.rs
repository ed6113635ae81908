use kediff::autodiff::{finite_difference_check, GradCheckConfig};
use kediff::conditioning::Vocabulary;
use kediff::config::TrainConfig;
use kediff::eval_synth::{generate_dataset, to_train_items};
use kediff::mode::{init_bank, route_step};
use kediff::rng::stream;
use kediff::schedule::NoiseSchedule;
use kediff::trainer::{
    adamw_step, checkpoint_path, decode_checkpoint, draw_item, encode_checkpoint, load_checkpoint, plain_ddpm_loss,
    save_checkpoint, train, training_graph, training_loss, AdamWConfig, LossSettings, OptimizerState, Storage,
    TrainItem, TrainOptions,
};
use kediff::{Error, Tensor};
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for kv in [
        "schedule.T=50",
        "data.count=24",
        "data.height=8",
        "data.width=8",
        "model.patch=4",
        "model.d=8",
        "model.d_text=8",
        "model.layers=1",
        "model.max_text_len=48",
        "mode.n=2",
        "train.batch=4",
        "train.steps=8",
        "train.warm_steps=3",
        "train.lr=1e-3",
        "train.log_every=1",
        "train.checkpoint_every=2",
        "sample.steps=10",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn items(cfg: &TrainConfig) -> Vec<TrainItem<f64>> {
    to_train_items(&generate_dataset::<f64>(&cfg.data, cfg.data.count, cfg.seed).unwrap()).unwrap()
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut cfg = tiny();
    cfg.apply_override("knowledge.p_know=1").unwrap();
    cfg.apply_override("knowledge.w_a=0.2").unwrap();
    cfg.apply_override("train.p_uncond=0.3").unwrap();
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let mut bank = init_bank::<f64, _>(cfg.bank_config(2, vocab.len()), None, &mut stream(&[1])).unwrap();
    // break the symmetric query initialization so every path carries gradient
    let names: Vec<String> = bank.params().names().filter(|n| n.ends_with(".q")).cloned().collect();
    for (k, n) in names.iter().enumerate() {
        let shape = bank.params().get(n).unwrap().shape().to_vec();
        *bank.params_mut().get_mut(n).unwrap() = Tensor::randn(&shape, &mut stream(&[2, k as u64])).scale(0.5);
    }
    let sched = NoiseSchedule::<f64>::from_spec(&cfg.schedule).unwrap();
    let batch: Vec<(usize, &TrainItem<f64>)> = (0..4).map(|i| (i, &data[i])).collect();
    let settings = LossSettings { knowledge: &cfg.knowledge, p_uncond: 0.3, vocab: &vocab, seed: 3, step: 1 };
    let mut lg = training_graph(&bank, &sched, &batch, &settings).unwrap();
    assert!(lg.items.iter().any(|i| i.augmentation.attention_strengthened));
    let report = finite_difference_check(&mut lg.graph, lg.root, bank.params(), &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn reduced_objective_is_the_plain_objective_bitwise() {
    let mut cfg = tiny();
    for kv in ["knowledge.w_a=0", "knowledge.w_l=0", "knowledge.p_know=0", "knowledge.p_cap=0", "mode.n=1"] {
        cfg.apply_override(kv).unwrap();
    }
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let bank = init_bank::<f64, _>(cfg.bank_config(1, vocab.len()), None, &mut stream(&[4])).unwrap();
    let sched = NoiseSchedule::<f64>::from_spec(&cfg.schedule).unwrap();
    let batch: Vec<(usize, &TrainItem<f64>)> = (0..8).map(|i| (i, &data[i])).collect();
    for step in 1..4 {
        let settings = LossSettings { knowledge: &cfg.knowledge, p_uncond: 0.1, vocab: &vocab, seed: 5, step };
        let a = training_loss(&bank, &sched, &batch, &settings).unwrap();
        let b = plain_ddpm_loss(&bank, &sched, &batch, &vocab, 0.1, 5, step).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (name, g) in &a.grads {
            assert!(g.bits_eq(&b.grads[name]), "{name}");
        }
    }
}

#[test]
fn batch_order_does_not_change_the_loss() {
    let cfg = tiny();
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let bank = init_bank::<f64, _>(cfg.bank_config(2, vocab.len()), None, &mut stream(&[6])).unwrap();
    let sched = NoiseSchedule::<f64>::from_spec(&cfg.schedule).unwrap();
    let settings = LossSettings { knowledge: &cfg.knowledge, p_uncond: 0.1, vocab: &vocab, seed: 7, step: 2 };
    let fwd: Vec<(usize, &TrainItem<f64>)> = [3, 9, 1, 14].iter().map(|&i| (i, &data[i])).collect();
    let rev: Vec<(usize, &TrainItem<f64>)> = fwd.iter().rev().copied().collect();
    let a = training_loss(&bank, &sched, &fwd, &settings).unwrap();
    let b = training_loss(&bank, &sched, &rev, &settings).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(matches!(training_loss(&bank, &sched, &[], &settings), Err(Error::EmptyBatch)));
    for tr in &a.items {
        assert_eq!(tr.expert, route_step(50, 2, tr.t).unwrap());
    }
}

#[test]
fn unconditional_fraction_matches_dropout_rate() {
    let n = 10_000;
    let dropped = (0..n).filter(|&i| draw_item::<f64>(1000, &[1], 0.1, 42, 1, i).unconditional).count();
    let frac = dropped as f64 / n as f64;
    assert!((frac - 0.1).abs() < 0.01, "{frac}");
}

#[test]
fn single_scalar_adamw_step_matches_hand_arithmetic() {
    let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let mut p = kediff::autodiff::ParamStore::new();
    p.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap());
    let mut grads = std::collections::BTreeMap::new();
    grads.insert("w".to_string(), Tensor::new(vec![1], vec![0.5]).unwrap());
    let mut state = OptimizerState::new();
    adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
    // decay, then m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
    let decayed: f64 = 2.0 - 0.1 * 0.01 * 2.0;
    let expected = decayed - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
    adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
    let m = 0.9 * 0.05 + 0.1 * 0.5;
    let v = 0.999 * 0.00025 + 0.001 * 0.25;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let expected = expected - 0.1 * 0.01 * expected - 0.1 * mh / (vh.sqrt() + 1e-8);
    assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let a = train(&cfg, &data, &vocab, TrainOptions::default()).unwrap();
    let b = train(&cfg, &data, &vocab, TrainOptions::default()).unwrap();
    assert_eq!(a.records, b.records);
    assert!(a.bank.params().bits_eq(b.bank.params()));
    assert_eq!(a.bank.experts(), 2);
    // warm phase runs one expert, then both are routed to
    assert_eq!(a.records[0].experts.len(), 1);
    assert_eq!(a.records[7].experts.len(), 2);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = tiny();
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &data, &vocab, TrainOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    for at in [2, 4] {
        let ck = load_checkpoint::<f64>(&checkpoint_path(dir.path(), at)).unwrap();
        assert_eq!(ck.header.step, at);
        let resumed = train(&cfg, &data, &vocab, TrainOptions { resume: Some(ck), ..Default::default() }).unwrap();
        assert_eq!(resumed.records[..], full.records[at..]);
        assert!(resumed.bank.params().bits_eq(full.bank.params()));
    }
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn checkpoints_roundtrip_and_reject_damage() {
    let cfg = tiny();
    let data = items(&cfg);
    let vocab = Vocabulary::default();
    let out = train(&cfg, &data, &vocab, TrainOptions { stop_after: Some(5), ..Default::default() }).unwrap();
    let ck = out.checkpoint(&cfg, &vocab);
    let bytes = encode_checkpoint(&ck, Storage::F64).unwrap();
    let back = decode_checkpoint::<f64>(&bytes).unwrap();
    assert!(back.bank.params().bits_eq(out.bank.params()));
    assert_eq!(back.header.partition, out.bank.partition());
    assert_eq!(back.header.schedule, cfg.schedule);
    for t in 1..=50 {
        assert_eq!(back.bank.route(t).unwrap(), out.bank.route(t).unwrap());
    }
    assert_eq!(back.optimizer, out.optimizer);

    let small = decode_checkpoint::<f32>(&encode_checkpoint(&ck, Storage::F32).unwrap()).unwrap();
    for (name, t) in out.bank.params().iter() {
        let s = small.bank.params().get(name).unwrap();
        assert!(t.data().iter().zip(s.data()).all(|(&a, &b)| (a as f32).to_bits() == b.to_bits()));
    }

    assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() / 2]), Err(Error::TruncatedFile)));
    assert!(matches!(decode_checkpoint::<f64>(&bytes[..3]), Err(Error::TruncatedFile)));
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 40;
    flipped[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint::<f64>(&flipped), Err(Error::ChecksumMismatch)));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint::<f64>(&magic), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint::<f64>(&version), Err(Error::VersionUnsupported(9))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ck, &path, Storage::F64).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn short_gaussian_run_lowers_the_loss() {
    let mut cfg = tiny();
    for kv in ["mode.n=1", "train.steps=200", "train.batch=8", "train.lr=3e-3"] {
        cfg.apply_override(kv).unwrap();
    }
    let gmm = kediff::eval_synth::Gmm2::default();
    // two-pixel images holding the mixture coordinates in the red channel
    let base = items(&cfg);
    let data: Vec<TrainItem<f64>> = gmm
        .train_items::<f64>(base.len(), 0)
        .iter()
        .zip(&base)
        .map(|(g, b)| {
            let mut img = Tensor::zeros(&[8, 8, 3]);
            img.data_mut()[0] = g.image.data()[0];
            img.data_mut()[3] = g.image.data()[1];
            TrainItem { image: img, caption: b.caption.clone() }
        })
        .collect();
    let out = train(&cfg, &data, &Vocabulary::default(), TrainOptions::default()).unwrap();
    let mean = |r: &[kediff::trainer::StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    assert!(mean(&out.records[180..]) < mean(&out.records[..20]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn loss_is_zero_when_prediction_is_exact(seed in any::<u64>()) {
        let eps = Tensor::<f64>::randn(&[4, 4, 3], &mut stream(&[seed]));
        let w = Tensor::full(&[4, 4, 3], 1.1);
        prop_assert_eq!(kediff::trainer::weighted_mse(&eps, &eps, Some(&w)).unwrap(), 0.0);
        prop_assert_eq!(kediff::trainer::weighted_mse(&eps, &eps, None).unwrap(), 0.0);
    }
}
