use super::*;
use crate::error::Error;
use crate::numerics::gradcheck::gradcheck;
use crate::numerics::rng::Rng;
use crate::numerics::{Tape, Tensor};

/// Brute-force CTC likelihood: enumerate every frame labelling, collapse
/// repeats then drop blanks, and add up the paths that yield `target`.
fn brute_force_likelihood(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let (frames, classes) = (probs.len(), probs[0].len());
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &c in &path {
            if Some(c) != prev && c != 0 {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        let mut i = frames;
        loop {
            if i == 0 {
                return total;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}

fn random_log_probs(rng: &mut Rng, frames: usize, classes: usize) -> (Tensor<f64>, Vec<Vec<f64>>) {
    let mut probs = Vec::new();
    for _ in 0..frames {
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform(0.05, 1.0)).collect();
        let z: f64 = raw.iter().sum();
        probs.push(raw.into_iter().map(|p| p / z).collect::<Vec<_>>());
    }
    let lp = Tensor::from_fn(&[frames, classes], |i| probs[i / classes][i % classes].ln());
    (lp, probs)
}

fn dp_loss(lp: &Tensor<f64>, target: &[usize]) -> crate::Result<f64> {
    let tape = Tape::new();
    Ok(ctc_loss(&tape.constant(lp.clone()), target, 0)?.value().item())
}

#[test]
fn ctc_uniform_two_frames_single_label() {
    let lp = Tensor::<f64>::full(&[2, 2], 0.5f64.ln());
    let loss = dp_loss(&lp, &[1]).unwrap();
    assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((loss - 0.28768).abs() < 1e-5);
}

#[test]
fn ctc_repeat_needs_separator_frame() {
    let lp = Tensor::<f64>::full(&[2, 2], 0.5f64.ln());
    assert!(matches!(
        dp_loss(&lp, &[1, 1]),
        Err(Error::InfeasibleTarget { needed: 3, frames: 2 })
    ));
    assert_eq!(ctc_min_frames(&[1, 1, 2, 2, 2]), 8);
}

#[test]
fn ctc_matches_brute_force() {
    let mut rng = Rng::stream(0, "ctc-bf");
    let mut cases = 0;
    while cases < 200 {
        let frames = rng.int_range(1, 6);
        let classes = rng.int_range(2, 3);
        let len = rng.int_range(0, 3);
        let target: Vec<usize> = (0..len).map(|_| rng.int_range(1, classes - 1)).collect();
        if ctc_min_frames(&target) > frames {
            continue;
        }
        let (lp, probs) = random_log_probs(&mut rng, frames, classes);
        let expected = -brute_force_likelihood(&probs, &target).ln();
        let got = dp_loss(&lp, &target).unwrap();
        assert!(
            (got - expected).abs() < 1e-6,
            "T={frames} y={target:?}: {got} vs {expected}"
        );
        cases += 1;
    }
}

#[test]
fn ctc_label_sequence_probabilities_sum_to_one() {
    let mut rng = Rng::stream(1, "ctc-sum");
    for _ in 0..20 {
        let frames = rng.int_range(1, 6);
        let classes = rng.int_range(2, 3);
        let (lp, _) = random_log_probs(&mut rng, frames, classes);
        let mut total = 0.0;
        // Every label sequence over the non-blank classes up to length T.
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..=frames {
            let mut next = Vec::new();
            for y in &frontier {
                match dp_loss(&lp, y) {
                    Ok(l) => total += (-l).exp(),
                    Err(Error::InfeasibleTarget { .. }) => {}
                    Err(e) => panic!("{e}"),
                }
                for c in 1..classes {
                    let mut z = y.clone();
                    z.push(c);
                    next.push(z);
                }
            }
            frontier = next;
        }
        assert!((total - 1.0).abs() < 1e-6, "sum {total}");
    }
}

#[test]
fn ctc_gradcheck() {
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, "ctc-gc");
        let frames = rng.int_range(3, 6);
        let logits = Tensor::<f64>::from_fn(&[frames, 4], |_| rng.normal());
        let target: Vec<usize> = (0..rng.int_range(1, 2)).map(|_| rng.int_range(1, 3)).collect();
        let report = gradcheck(&[logits], 1e-3, |_, v| ctc_loss(&v[0].log_softmax(1)?, &target, 0)).unwrap();
        assert!(report.max_rel_err < 1e-3, "seed {seed}: {report:?}");
    }
}

#[test]
fn smoothed_ce_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::<f64>::zeros(&[3, 2]));
    let loss = smoothed_ce(&uniform, &[0, 1, 1], 0.1, None).unwrap().value().item();
    assert!((loss - 2f64.ln()).abs() < 1e-12);

    let mut rng = Rng::stream(2, "ce");
    let logits = Tensor::<f64>::from_fn(&[4, 5], |_| rng.normal() * 2.0);
    let targets = [0, 3, 1, 4];
    let x = tape.constant(logits.clone());
    let plain = smoothed_ce(&x, &targets, 0.0, None).unwrap().value().item();
    // Hand-computed standard CE.
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expected += lse - row[t];
    }
    assert!((plain - expected / 4.0).abs() < 1e-12);

    // (1-eps)·CE + eps·mean over classes of CE.
    let eps = 0.2;
    let smoothed = smoothed_ce(&x, &targets, eps, None).unwrap().value().item();
    let mut uniform_ce = 0.0;
    for r in 0..4 {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        uniform_ce += row.iter().map(|v| lse - v).sum::<f64>() / 5.0;
    }
    let decomposed = (1.0 - eps) * plain + eps * uniform_ce / 4.0;
    assert!((smoothed - decomposed).abs() < 1e-6);
}

#[test]
fn smoothed_ce_ignores_padding_and_rejects_all_padding() {
    let tape = Tape::new();
    let mut rng = Rng::stream(3, "ce-pad");
    let logits = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
    let x = tape.constant(logits.clone());
    let with_pad = smoothed_ce(&x, &[2, 1, 1], 0.1, Some(1)).unwrap().value().item();
    let only = tape.constant(Tensor::new(&[1, 4], logits.data()[..4].to_vec()).unwrap());
    let single = smoothed_ce(&only, &[2], 0.1, Some(1)).unwrap().value().item();
    assert!((with_pad - single).abs() < 1e-12);
    assert!(matches!(
        smoothed_ce(&x, &[1, 1, 1], 0.1, Some(1)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn smoothed_ce_is_at_least_target_entropy() {
    let mut rng = Rng::stream(4, "gibbs");
    for _ in 0..50 {
        let classes = rng.int_range(2, 6);
        let eps = rng.uniform(0.0, 0.5);
        let logits = Tensor::<f64>::from_fn(&[1, classes], |_| rng.normal() * 3.0);
        let target = rng.int_range(0, classes - 1);
        let tape = Tape::new();
        let loss = smoothed_ce(&tape.constant(logits), &[target], eps, None)
            .unwrap()
            .value()
            .item();
        let off = eps / classes as f64;
        let on = 1.0 - eps + off;
        let entropy = -(on * on.ln())
            - if off > 0.0 {
                (classes - 1) as f64 * off * off.ln()
            } else {
                0.0
            };
        assert!(loss >= entropy - 1e-12);
    }
}

#[test]
fn bce_examples() {
    let tape = Tape::new();
    let zeros = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let loss = multihot_bce(&zeros, &[1, 0, 0, 0, 1, 1]).unwrap().value().item();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    let bits = [1u8, 0, 1, 0];
    let sat = Tensor::<f64>::from_fn(&[1, 4], |i| if bits[i] == 1 { 50.0 } else { -50.0 });
    let loss = multihot_bce(&tape.constant(sat), &bits).unwrap().value().item();
    assert!(loss < 1e-20);
}

#[test]
fn bce_gradcheck() {
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, "bce-gc");
        let x = Tensor::<f64>::from_fn(&[2, 5], |_| rng.normal() * 3.0);
        let bits: Vec<u8> = (0..10).map(|_| (rng.next_u64() % 2) as u8).collect();
        let report = gradcheck(&[x], 1e-3, |_, v| multihot_bce(&v[0], &bits)).unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn smoothed_ce_gradcheck() {
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, "ce-gc");
        let x = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let report = gradcheck(&[x], 1e-3, |_, v| smoothed_ce(&v[0], &[3, 1, 0], 0.1, Some(1))).unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

mod joint {
    use super::super::*;
    use crate::data::{grabo_schema, Label};
    use crate::layers::Binder;
    use crate::model::{Model, ModelConfig, TapPoint, Task};
    use crate::numerics::rng::Rng;
    use crate::numerics::{Tape, Tensor};

    fn setup() -> (Model<f64>, Tensor<f64>, Vec<Vec<usize>>, Vec<Label>) {
        let schema = grabo_schema();
        let config = ModelConfig {
            n_mels: 10,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            conv_channels: [2, 2],
            n_enc_layers: 1,
            n_dec_layers: 3,
            vocab_size: 10,
            head_d_ff: 8,
            tap: TapPoint::asr(1),
            task: Task::Intent(schema.clone()),
            slu_stop_gradient: false,
        };
        let model = Model::new(config, 3).unwrap();
        let mut rng = Rng::stream(0, "joint");
        let feats = Tensor::from_fn(&[2, 24, 10], |_| rng.normal());
        let tokens = vec![vec![5, 6, 6], vec![7]];
        let labels = vec![
            Label::Intent(schema.intent_of_class(4)),
            Label::Intent(schema.intent_of_class(31)),
        ];
        (model, feats, tokens, labels)
    }

    fn total(w: LossWeights) -> crate::Result<(f64, LossBreakdown)> {
        let (model, feats, tokens, labels) = setup();
        let tape = Tape::new();
        let b = Binder::new(&tape, model.params());
        let out = model.forward_train(&b, &feats, &[24, 20], &tokens).unwrap();
        let schema = grabo_schema();
        let (t, parts) = joint_loss(&out, &tokens, &labels, Some(&schema), &w)?;
        Ok((t.value().item(), parts))
    }

    #[test]
    fn single_task_weightings() {
        let w = LossWeights {
            w_slu: 0.0,
            w_asr: 0.7,
            ..LossWeights::default()
        };
        let (t, p) = total(w).unwrap();
        assert_eq!(p.slu, None);
        assert_eq!(t, 0.7 * 0.3 * p.ctc + 0.7 * 0.7 * p.ce);

        let w = LossWeights {
            w_asr: 0.0,
            w_slu: 0.4,
            ..LossWeights::default()
        };
        let (t, p) = total(w).unwrap();
        assert_eq!(t, 0.4 * p.slu.unwrap());
    }

    #[test]
    fn linear_in_the_slu_weight() {
        let base = LossWeights::default();
        let (t1, p1) = total(base).unwrap();
        let (t2, _) = total(LossWeights { w_slu: 1.0, ..base }).unwrap();
        let asr = 0.5 * (0.3 * p1.ctc + 0.7 * p1.ce);
        assert!(((t2 - asr) - 2.0 * (t1 - asr)).abs() < 1e-12);
    }

    #[test]
    fn pure_ctc_leaves_the_decoder_without_gradient() {
        let (model, feats, tokens, labels) = setup();
        let tape = Tape::new();
        let b = Binder::new(&tape, model.params());
        let out = model.forward_train(&b, &feats, &[24, 20], &tokens).unwrap();
        let w = LossWeights {
            ctc_weight: 1.0,
            w_slu: 0.0,
            ..LossWeights::default()
        };
        let (t, _) = joint_loss(&out, &tokens, &labels, Some(&grabo_schema()), &w).unwrap();
        let grads = b.collect(t.backward().unwrap());
        let out_w = model.params().lookup("asr.out.weight").unwrap();
        assert!(grads[out_w.0].as_ref().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        let ctc_w = model.params().lookup("asr.ctc.weight").unwrap();
        assert!(grads[ctc_w.0].as_ref().unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights {
            w_slu: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(total(w), Err(crate::Error::Config(_))));
    }
}
