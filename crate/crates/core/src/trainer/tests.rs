use super::*;
use crate::model::ModelConfig;
use crate::selfaug::{masked_count, AugMode};
use crate::synthdata::{make_dataset, DatasetSpec};

fn tiny_config(stage1: u64, stage2: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetSpec { samples_per_cell: 3, ..DatasetSpec::default() };
    cfg.model = ModelConfig { latent_dim: 4, emb_dim: 4, hidden: 8, ref_channels: vec![8; 6] };
    cfg.train.batch_size = 8;
    cfg.train.stage1_steps = stage1;
    cfg.train.stage2_steps = stage2;
    cfg.train.lr_initial = 2e-3;
    cfg.train.stage2_lr = 5e-4;
    cfg.train.log_every = 1;
    cfg.train.eval_every = 0;
    cfg.self_augmentation = crate::selfaug::AugConfig { mode: AugMode::Enc, proportion: 0.5, seed: 3 };
    cfg
}

fn run(cfg: &RunConfig, ds: &Dataset, opts: TrainOptions<'_>) -> TrainOutput {
    train(cfg, ds, opts).unwrap().into_result().unwrap()
}

#[test]
fn decoupled_decay_examples() {
    let adam = AdamW { betas: [0.8, 0.99], weight_decay: 0.01 };
    let mut p = vec![Matrix::filled(1, 1, 1.0)];
    let zero = vec![Matrix::zeros(1, 1)];
    let mut opt = OptimizerState::new(&p);
    optimizer_step(&mut p, &zero, &mut opt, 2e-4, adam).unwrap();
    assert!((p[0].get(0, 0) - 0.999998).abs() < 1e-15);
    for k in 2..=10 {
        optimizer_step(&mut p, &zero, &mut opt, 2e-4, adam).unwrap();
        assert!((p[0].get(0, 0) - (1.0 - 2e-4 * 0.01f64).powi(k)).abs() < 1e-14);
    }

    let mut p = vec![Matrix::filled(2, 2, 0.7)];
    let mut opt = OptimizerState::new(&p);
    optimizer_step(&mut p, &[Matrix::zeros(2, 2)], &mut opt, 2e-4, AdamW { weight_decay: 0.0, ..adam }).unwrap();
    assert_eq!(p[0], Matrix::filled(2, 2, 0.7));

    let mut p = vec![Matrix::zeros(1, 3)];
    let mut opt = OptimizerState::new(&p);
    optimizer_step(&mut p, &[Matrix::filled(1, 3, 1.0)], &mut opt, 2e-4, adam).unwrap();
    for v in p[0].data() {
        assert!((v.abs() - 2e-4).abs() < 1e-11, "{v}");
    }
    assert_eq!(opt.step, 1);

    let err = optimizer_step(&mut p, &[Matrix::zeros(3, 1)], &mut opt, 2e-4, adam);
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(lr_at_epoch(&c, 0), 2e-4);
    assert!((lr_at_epoch(&c, 8) - 1.998e-4).abs() < 1e-15);
    let lrs: Vec<f64> = (0..100).map(|e| lr_at_epoch(&c, e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let c = TrainConfig { stage1_steps: 10, ..c };
    assert_eq!(lr_at_step(&c, 3, 9), lr_at_epoch(&c, 3));
    assert_eq!(lr_at_step(&c, 3, 10), 2e-5);
    assert!((lr_at_step(&c, 3, 13) - 2e-5 * c.lr_decay_per_epoch).abs() < 1e-20);
}

#[test]
fn clipping_bounds_norm() {
    let mut g = vec![Matrix::filled(1, 2, 3.0), Matrix::filled(1, 2, 4.0)];
    let n = clip_global_norm(&mut g, 5.0);
    assert!((n - 50f64.sqrt()).abs() < 1e-12);
    let after: f64 = g.iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((after - 5.0).abs() < 1e-12);
    let mut small = vec![Matrix::filled(1, 1, 0.5)];
    clip_global_norm(&mut small, 5.0);
    assert_eq!(small[0].get(0, 0), 0.5);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { lr_initial: 0.0, ..ok.clone() },
        TrainConfig { stage2_lr: 1e-3, ..ok.clone() },
        TrainConfig { betas: [1.0, 0.99], ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { lr_decay_per_epoch: 1.5, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn zero_steps_keep_initialization() {
    let cfg = tiny_config(0, 0);
    let ds = make_dataset(&cfg.dataset).unwrap();
    let out = run(&cfg, &ds, TrainOptions::default());
    assert_eq!(out.checkpoint, initial_checkpoint(&cfg, &ds).unwrap());
    assert!(out.history.is_empty());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny_config(3, 2);
    let ds = make_dataset(&cfg.dataset).unwrap();
    let ckpt = run(&cfg, &ds, TrainOptions::default()).checkpoint;
    let bytes = encode_checkpoint(&ckpt);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dkc");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

    for cut in [0, 6, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    match decode_checkpoint(&v2) {
        Err(Error::Format(msg)) => assert!(msg.contains('2') && msg.contains('1'), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn resume_is_bit_exact_across_stages() {
    let cfg = tiny_config(4, 4);
    let ds = make_dataset(&cfg.dataset).unwrap();
    let full = run(&cfg, &ds, TrainOptions::default());
    for k in [2, 4, 6] {
        let first = run(&cfg, &ds, TrainOptions { stop_after: Some(k), ..TrainOptions::default() });
        assert_eq!(first.checkpoint.step, k);
        let reloaded = decode_checkpoint(&encode_checkpoint(&first.checkpoint)).unwrap();
        let rest = run(&cfg, &ds, TrainOptions { resume: Some(reloaded), ..TrainOptions::default() });
        assert_eq!(rest.checkpoint, full.checkpoint, "split at {k}");
        let mut joined = first.history.clone();
        joined.extend(rest.history);
        assert_eq!(joined, full.history);
    }
    let again = run(&cfg, &ds, TrainOptions::default());
    assert_eq!(again.checkpoint, full.checkpoint);
}

#[test]
fn history_bookkeeping() {
    let cfg = tiny_config(3, 3);
    let ds = make_dataset(&cfg.dataset).unwrap();
    let out = run(&cfg, &ds, TrainOptions::default());
    let w = cfg.train.loss_weights.values();
    for step in 1..=6u64 {
        let rows: Vec<&HistoryRow> = out.history.iter().filter(|r| r.step == step).collect();
        let get = |m: &str| rows.iter().find(|r| r.metric == m).unwrap().value;
        let recomputed: f64 = LossTerms::NAMES.iter().zip(w).map(|(n, w)| w * get(n)).sum();
        assert!((recomputed - get("total")).abs() < 1e-12);
        let expected = if step <= 3 { 0 } else { masked_count(0.5, cfg.train.batch_size) };
        assert_eq!(get("synthetic_items"), expected as f64);
        assert_eq!(rows[0].stage, if step <= 3 { 1 } else { 2 });
    }
    assert_eq!(out.checkpoint.optimizer.step, 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    write_history(&out.history, &path).unwrap();
    assert_eq!(read_history(&path).unwrap(), out.history);
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("step,stage,metric,value\n"));
    write_history(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,stage,metric,value\n");
    assert!(read_history(&path).unwrap().is_empty());
}

#[test]
fn periodic_evaluation_is_logged() {
    let mut cfg = tiny_config(2, 0);
    cfg.train.eval_every = 2;
    let ds = make_dataset(&cfg.dataset).unwrap();
    let out = run(&cfg, &ds, TrainOptions::default());
    for m in ["cka_g_e", "lk_cka_speaker", "lk_cka_emotion", "secs", "eecs"] {
        assert!(out.history.iter().any(|r| r.step == 2 && r.metric == m), "{m}");
    }
}

#[test]
fn non_finite_loss_keeps_last_good_state() {
    let cfg = tiny_config(5, 0);
    let ds = make_dataset(&cfg.dataset).unwrap();
    let mut ckpt = run(&cfg, &ds, TrainOptions { stop_after: Some(2), ..TrainOptions::default() }).checkpoint;
    let id = *ckpt.state.params().group("decoder").last().unwrap();
    ckpt.state.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let poisoned = ckpt.clone();
    let out = train(&cfg, &ds, TrainOptions { resume: Some(ckpt), ..TrainOptions::default() }).unwrap();
    assert!(matches!(out.failure, Some(Error::NonFiniteLoss { step: 3 })), "{:?}", out.failure);
    assert_eq!(out.checkpoint.step, 2);
    assert_eq!(out.checkpoint.optimizer, poisoned.optimizer);
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    let mut cfg = tiny_config(200, 0);
    cfg.dataset.samples_per_cell = 4;
    let ds = make_dataset(&cfg.dataset).unwrap();
    let mut drops: Vec<f64> = (0..3)
        .map(|seed| {
            let cfg = cfg.clone().with_seed(seed);
            let out = run(&cfg, &ds, TrainOptions::default());
            let total = |s: u64| out.history.iter().find(|r| r.step == s && r.metric == "total").unwrap().value;
            total(1) - total(200)
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}
