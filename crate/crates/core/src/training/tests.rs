use super::*;
use crate::data::{char_vocab, grabo_schema, synth_generate, Manifest, SynthSpec};
use crate::error::Error;
use crate::layers::{Binder, ParamStore};
use crate::model::{Model, ModelConfig, TapPoint, Task, ENCODER_PREFIX};
use crate::numerics::{Tape, Tensor};

fn small(n_mels: usize) -> ModelConfig {
    ModelConfig {
        n_mels,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        conv_channels: [4, 4],
        n_enc_layers: 2,
        n_dec_layers: 3,
        vocab_size: char_vocab().len(),
        head_d_ff: 16,
        tap: TapPoint::asr(2),
        task: Task::Intent(grabo_schema()),
        slu_stop_gradient: false,
    }
}

fn meta(model: &ModelConfig) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        seed: 4,
        config_hash: config_hash(model).unwrap(),
        stage: "pretrain".into(),
        epoch: 0,
    }
}

fn grabo_small(reps: usize) -> Manifest {
    let spec = SynthSpec {
        n_mels: 12,
        ..SynthSpec::grabo(3)
    };
    synth_generate(&spec, reps).unwrap()
}

fn ctc_of(model: &Model<f32>, feats: &Tensor<f32>) -> Vec<f32> {
    model.encode_item(feats).unwrap().ctc_log_probs.data().to_vec()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(small(12), 4).unwrap();
    save_checkpoint(&path, &model, &meta(model.config())).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta.as_ref().unwrap(), &meta(model.config()));
    let restored: Model<f32> = model_from_checkpoint(&loaded).unwrap();
    let feats = grabo_small(1).utterances[0].features.clone();
    assert_eq!(ctc_of(&model, &feats), ctc_of(&restored, &feats));
    for ((na, a), (nb, b)) in model.params().iter().zip(restored.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = Model::<f32>::new(small(12), 4).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 9]),
        Err(Error::Corrupt(_))
    ));
    let mut flipped = bytes.clone();
    flipped[40] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&future), Err(Error::Version(7))));
    assert!(matches!(
        decode_checkpoint(b"nonsense bytes here"),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn mismatched_architecture_is_incompatible_and_untouched() {
    let big = Model::<f32>::new(
        ModelConfig {
            d_model: 32,
            ..small(12)
        },
        1,
    )
    .unwrap();
    let mut target = Model::<f32>::new(small(12), 2).unwrap();
    let before: Vec<Vec<f32>> = target.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let tensors = decode_checkpoint(&encode_checkpoint(&big).unwrap()).unwrap();
    match apply_checkpoint(&mut target, &tensors, None, true) {
        Err(Error::Incompatible(msg)) => assert!(msg.contains("encoder.")),
        other => panic!("expected incompatibility, got {other:?}"),
    }
    let after: Vec<Vec<f32>> = target.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn slu_head_may_be_skipped_when_loading() {
    let sentiment = Model::<f32>::new(
        ModelConfig {
            task: Task::Sentiment { n_classes: 3 },
            ..small(12)
        },
        1,
    )
    .unwrap();
    let mut intent = Model::<f32>::new(small(12), 2).unwrap();
    let tensors = decode_checkpoint(&encode_checkpoint(&sentiment).unwrap()).unwrap();
    assert!(apply_checkpoint(&mut intent, &tensors, None, true).is_err());
    apply_checkpoint(&mut intent, &tensors, Some(crate::model::SLU_PREFIX), false).unwrap();
    let feats = grabo_small(1).utterances[0].features.clone();
    assert_eq!(ctc_of(&intent, &feats), ctc_of(&sentiment, &feats));
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = config_hash(&small(12)).unwrap();
    assert_eq!(a, config_hash(&small(12)).unwrap());
    assert_eq!(a.len(), 64);
    assert_ne!(a, config_hash(&small(13)).unwrap());
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .insert("x", Tensor::new(&[3], vec![4.0, -3.0, 0.5]).unwrap())
        .unwrap();
    let target = [1.0, 2.0, -1.0];
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    for _ in 0..2000 {
        let g: Vec<f64> = store
            .get(id)
            .data()
            .iter()
            .zip(&target)
            .map(|(x, t)| 2.0 * (x - t))
            .collect();
        adam.step(&mut store, &[Some(g)], 0.05, None).unwrap();
    }
    for (x, t) in store.get(id).data().iter().zip(&target) {
        assert!((x - t).abs() < 1e-3, "{x} vs {t}");
    }
    assert_eq!(adam.steps(), 2000);
}

#[test]
fn adam_rejects_non_finite_gradients_and_clips() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    assert!(adam.step(&mut store, &[Some(vec![f64::NAN, 0.0])], 0.1, None).is_err());
    let norm = adam
        .step(&mut store, &[Some(vec![30.0, 40.0])], 0.1, Some(1.0))
        .unwrap();
    assert_eq!(norm, 50.0);
    // First Adam step moves every coordinate by about lr regardless of scale.
    for x in store.get(id).data() {
        assert!((x + 0.1).abs() < 1e-6);
    }
}

#[test]
fn noam_schedule_peaks_at_warmup() {
    let s = LrSchedule::Noam { warmup_steps: 100 };
    assert!((s.at(1.0, 50) - 0.5).abs() < 1e-12);
    assert!((s.at(1.0, 100) - 1.0).abs() < 1e-12);
    assert!((s.at(1.0, 400) - 0.5).abs() < 1e-12);
    assert_eq!(LrSchedule::Constant.at(0.3, 9), 0.3);
}

#[test]
fn frozen_encoder_stays_bitwise_identical() {
    let data = grabo_small(1);
    let model = Model::<f32>::new(small(12), 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let out = finetune_model(model.clone(), &cfg, &data, None, &char_vocab()).unwrap();
    let mut moved_slu = false;
    for ((name, a), (_, b)) in model.params().iter().zip(out.model.params().iter()) {
        if name.starts_with(ENCODER_PREFIX) {
            assert_eq!(a.data(), b.data(), "{name} changed");
        } else if name.starts_with(crate::model::SLU_PREFIX) && a.data() != b.data() {
            moved_slu = true;
        }
    }
    assert!(moved_slu);
    assert_eq!(out.epochs_run, 2);
    assert_eq!(out.log.rows.len(), 12);
}

#[test]
fn output_projection_does_not_feed_tap_ctc_or_slu() {
    let data = grabo_small(1);
    let utt = &data.utterances[0];
    let tokens = char_vocab().encode(&utt.transcript);
    let feats = Tensor::new(&[1, utt.features.shape()[0], 12], utt.features.data().to_vec()).unwrap();
    let run = |model: &Model<f32>| {
        let tape = Tape::new();
        let b = Binder::inference(&tape, model.params());
        let out = model
            .forward_train(&b, &feats, &[feats.shape()[1]], std::slice::from_ref(&tokens))
            .unwrap();
        (
            out.tapped.value().data().to_vec(),
            out.slu_logits.value().data().to_vec(),
            out.ctc_log_probs.value().data().to_vec(),
            out.dec_logits.value().data().to_vec(),
        )
    };
    let model = Model::<f32>::new(small(12), 6).unwrap();
    let mut corrupted = model.clone();
    let id = corrupted.params().lookup("asr.out.weight").unwrap();
    let shape = corrupted.params().get(id).shape().to_vec();
    corrupted
        .params_mut()
        .set(id, Tensor::from_fn(&shape, |i| i as f32))
        .unwrap();
    let (a, b) = (run(&model), run(&corrupted));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_ne!(a.3, b.3);
}

#[test]
fn pretraining_reduces_the_loss() {
    let spec = SynthSpec {
        n_mels: 12,
        ..SynthSpec::asr_pretrain(8)
    };
    let data = synth_generate(&spec, 24).unwrap();
    let cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = pretrain_asr::<f32>(small(12), &cfg, &data, None, &char_vocab()).unwrap();
    let losses = out.log.epoch_losses();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(out.log.rows.iter().all(|r| r.loss.slu.is_none()));
    let csv = out.log.to_csv();
    assert!(csv.starts_with("step,epoch,total,ctc,ce,slu,lr,grad_norm,val_metric,val_loss\n"));
    assert_eq!(csv.lines().count(), out.log.rows.len() + 1);
}

#[test]
fn training_is_deterministic() {
    let data = grabo_small(1);
    let val = grabo_small(1);
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 9,
        ..TrainConfig::default()
    };
    let run = || {
        finetune_model(
            Model::<f32>::new(small(12), 7).unwrap(),
            &cfg,
            &data,
            Some(&val),
            &char_vocab(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.best_val_metric, b.best_val_metric);
    assert!(a.best_val_metric.is_some());
}

#[test]
fn invalid_train_config_is_rejected() {
    let data = grabo_small(1);
    let bad = TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    };
    let model = Model::<f32>::new(small(12), 1).unwrap();
    assert!(matches!(
        finetune_model(model, &bad, &data, None, &char_vocab()),
        Err(Error::Config(_))
    ));
}
