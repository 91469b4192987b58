//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use mtslu::data::{char_vocab, grabo_schema, synth_generate, Manifest, SynthSpec, Utterance};
use mtslu::decode::{evaluate, intent_accuracy, macro_f1, wer, EvalOptions};
use mtslu::error::Error;
use mtslu::harness::stats::{mean, sign_test, spearman};
use mtslu::harness::{run_cells, Arm, Cell, CurveRow, Experiment, HarnessConfig};
use mtslu::intent::{decode_intent, encode_intent, ArgumentGroup, Intent, IntentSchema};
use mtslu::layers::{Binder, ClassAttention, MultiHeadAttention, ParamStore, Scope};
use mtslu::losses::{ctc_loss, ctc_min_frames, multihot_bce, smoothed_ce};
use mtslu::model::{Model, ModelConfig, TapPoint, Task, ASR_PREFIX, ENCODER_PREFIX, SLU_PREFIX};
use mtslu::numerics::gradcheck::gradcheck;
use mtslu::numerics::rng::Rng;
use mtslu::training::{
    decode_checkpoint, encode_checkpoint, finetune_model, finetune_mtl, load_checkpoint, pretrain_asr, save_checkpoint,
    Checkpoint, CheckpointMeta, TrainConfig, FORMAT_VERSION,
};
use mtslu::{Tape, Tensor, Var};

type Outcome = (bool, String);

// ---------------------------------------------------------------- 1

const SEEDS: u64 = 20;
const H: f64 = 1e-3;
const OP_TOL: f64 = 1e-4;
const CTC_TOL: f64 = 1e-3;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(0.1, 1.0);
        if rng.uniform(0.0, 1.0) < 0.5 {
            -v
        } else {
            v
        }
    })
}

fn probe<'t>(v: &Var<'t, f64>) -> mtslu::Result<Var<'t, f64>> {
    let w = Tensor::from_fn(v.shape(), |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
    v.mul(&v.tape().constant(w)).map(|p| p.sum())
}

struct Worst {
    rel: f64,
    name: String,
    checks: usize,
    failures: Vec<String>,
}

impl Worst {
    fn record(&mut self, name: &str, seed: u64, rel: f64, tol: f64) {
        self.checks += 1;
        if rel > self.rel {
            self.rel = rel;
            self.name = name.to_string();
        }
        if rel.is_nan() || rel >= tol {
            self.failures.push(format!("{name}#{seed}={rel:.2e}"));
        }
    }

    fn check<F>(&mut self, name: &str, shapes: &[&[usize]], f: F)
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> mtslu::Result<Var<'t, f64>>,
    {
        for seed in 0..SEEDS {
            let mut rng = Rng::stream(seed, name);
            let inputs: Vec<_> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let rel = gradcheck(&inputs, H, &f).map_or(f64::INFINITY, |r| r.max_rel_err);
            self.record(name, seed, rel, OP_TOL);
        }
    }
}

fn gradcheck_suite() -> Outcome {
    let start = Instant::now();
    let mut w = Worst {
        rel: 0.0,
        name: String::new(),
        checks: 0,
        failures: Vec::new(),
    };
    w.check("matmul", &[&[4, 5], &[5, 3]], |_, v| probe(&v[0].matmul(&v[1])?));
    w.check("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |_, v| {
        probe(&v[0].matmul(&v[1])?)
    });
    w.check("matmul_shared_rhs", &[&[2, 3, 4], &[4, 2]], |_, v| {
        probe(&v[0].matmul(&v[1])?)
    });
    w.check("matmul_shared_lhs", &[&[3, 4], &[2, 4, 2]], |_, v| {
        probe(&v[0].matmul(&v[1])?)
    });
    w.check("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |_, v| {
        probe(&v[0].matmul_nt(&v[1])?)
    });
    w.check("matmul_nt_shared", &[&[2, 3, 4], &[5, 4]], |_, v| {
        probe(&v[0].matmul_nt(&v[1])?)
    });
    w.check("add", &[&[3, 4], &[4]], |_, v| probe(&v[0].add(&v[1])?));
    w.check("sub", &[&[3, 4], &[3, 4]], |_, v| probe(&v[0].sub(&v[1])?));
    w.check("mul", &[&[2, 3, 4], &[3, 4]], |_, v| probe(&v[0].mul(&v[1])?));
    w.check("div", &[&[3, 4], &[4]], |_, v| probe(&v[0].div(&v[1])?));
    w.check("neg", &[&[3, 4]], |_, v| probe(&v[0].neg()));
    w.check("relu", &[&[3, 4]], |_, v| probe(&v[0].relu()));
    w.check("gelu", &[&[3, 4]], |_, v| probe(&v[0].gelu()));
    w.check("sigmoid", &[&[3, 4]], |_, v| probe(&v[0].sigmoid()));
    w.check("tanh", &[&[3, 4]], |_, v| probe(&v[0].tanh()));
    w.check("exp", &[&[3, 4]], |_, v| probe(&v[0].exp()));
    w.check("ln", &[&[3, 4]], |_, v| probe(&v[0].mul(&v[0])?.ln()));
    w.check("softplus", &[&[3, 4]], |_, v| probe(&v[0].scale(3.0).softplus()));
    w.check("logaddexp", &[&[3, 4], &[3, 4]], |_, v| probe(&v[0].logaddexp(&v[1])?));
    w.check("scale_shift", &[&[5]], |_, v| probe(&v[0].scale(-1.5).add_scalar(2.0)));
    w.check("sum", &[&[3, 4]], |_, v| Ok(v[0].mul(&v[0])?.sum()));
    w.check("mean", &[&[3, 4]], |_, v| Ok(v[0].mul(&v[0])?.mean()));
    w.check("sum_axis", &[&[2, 3, 4]], |_, v| probe(&v[0].sum_axis(1)?));
    w.check("mean_axis", &[&[2, 3, 4]], |_, v| probe(&v[0].mean_axis(2)?));
    w.check("transpose", &[&[2, 3, 4]], |_, v| probe(&v[0].transpose(0, 2)?));
    w.check("permute", &[&[2, 3, 4, 2]], |_, v| probe(&v[0].permute(&[0, 2, 1, 3])?));
    w.check("reshape", &[&[2, 6]], |_, v| probe(&v[0].reshape(&[3, 4])?));
    w.check("concat", &[&[2, 3], &[2, 2]], |_, v| {
        probe(&Var::concat(&[v[0].clone(), v[1].clone()], 1)?)
    });
    w.check("slice", &[&[3, 5]], |_, v| probe(&v[0].slice(1, 1, 4)?));
    w.check("index_select", &[&[4, 3]], |_, v| {
        probe(&v[0].index_select(0, &[2, 0, 2])?)
    });
    w.check("embedding", &[&[5, 3]], |_, v| probe(&v[0].embedding(&[4, 1, 1, 0])?));
    w.check("masked_fill", &[&[2, 3]], |_, v| {
        probe(&v[0].masked_fill(&[true, false, false, true, false, true], 0.5)?)
    });
    w.check("softmax", &[&[3, 7]], |_, v| probe(&v[0].scale(2.0).softmax(1)?));
    w.check("softmax_axis0", &[&[3, 4]], |_, v| probe(&v[0].softmax(0)?));
    w.check("log_softmax", &[&[3, 7]], |_, v| {
        probe(&v[0].scale(2.0).log_softmax(1)?)
    });
    w.check("layer_norm", &[&[3, 6], &[6], &[6]], |_, v| {
        probe(&v[0].layer_norm(&v[1], &v[2], 1e-5)?)
    });
    w.check("conv2d", &[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]], |_, v| {
        probe(&v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?)
    });
    w.check("conv2d_stride1", &[&[1, 1, 4, 4], &[2, 1, 3, 3]], |_, v| {
        probe(&v[0].conv2d(&v[1], None, 1, 0)?)
    });

    // Attention layers with respect to their inputs, masks included.
    let mut store = ParamStore::<f64>::new();
    let mut scope = Scope::root(&mut store, 5);
    let mha = MultiHeadAttention::new(&mut scope.sub("mha"), 8, 2).unwrap();
    let head = ClassAttention::new(&mut scope.sub("head"), 8, 2, 16, 5).unwrap();
    w.check("mha_causal", &[&[2, 4, 8]], |tape, v| {
        let b = Binder::new(tape, &store);
        probe(&mha.forward(&b, &v[0], &v[0], Some(&[4, 3]), true)?)
    });
    w.check("mha_cross", &[&[2, 3, 8], &[2, 5, 8]], |tape, v| {
        let b = Binder::new(tape, &store);
        probe(&mha.forward(&b, &v[0], &v[1], Some(&[5, 2]), false)?)
    });
    w.check("class_attention", &[&[2, 5, 8]], |tape, v| {
        let b = Binder::new(tape, &store);
        probe(&head.forward(&b, &v[0], &[5, 3])?)
    });

    for seed in 0..SEEDS {
        let mut rng = Rng::stream(seed, "ctc-gc");
        let frames = rng.int_range(3, 6);
        let logits = Tensor::<f64>::from_fn(&[frames, 4], |_| rng.normal());
        let target: Vec<usize> = (0..rng.int_range(1, 2)).map(|_| rng.int_range(1, 3)).collect();
        let rel = gradcheck(&[logits], H, |_, v| ctc_loss(&v[0].log_softmax(1)?, &target, 0))
            .map_or(f64::INFINITY, |r| r.max_rel_err);
        w.record("ctc", seed, rel, CTC_TOL);

        let mut rng = Rng::stream(seed, "bce-gc");
        let x = Tensor::<f64>::from_fn(&[2, 5], |_| rng.normal() * 3.0);
        let bits: Vec<u8> = (0..10).map(|_| (rng.next_u64() % 2) as u8).collect();
        let rel = gradcheck(&[x], H, |_, v| multihot_bce(&v[0], &bits)).map_or(f64::INFINITY, |r| r.max_rel_err);
        w.record("bce", seed, rel, OP_TOL);

        let mut rng = Rng::stream(seed, "ce-gc");
        let x = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let rel = gradcheck(&[x], H, |_, v| smoothed_ce(&v[0], &[3, 1, 0], 0.1, Some(1)))
            .map_or(f64::INFINITY, |r| r.max_rel_err);
        w.record("smoothed_ce", seed, rel, OP_TOL);
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = w.failures.is_empty() && secs < 120.0;
    let mut detail = format!(
        "{} checks over {} seeds, worst rel err {:.2e} ({}), {:.1}s",
        w.checks, SEEDS, w.rel, w.name, secs
    );
    if !w.failures.is_empty() {
        detail += &format!(", failing: {}", w.failures.join(" "));
    }
    (pass, detail)
}

// ---------------------------------------------------------------- 2

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

fn dp_loss(lp: &Tensor<f64>, target: &[usize]) -> mtslu::Result<f64> {
    let tape = Tape::new();
    Ok(ctc_loss(&tape.constant(lp.clone()), target, 0)?.value().item())
}

fn ctc_oracle() -> Outcome {
    let mut rng = Rng::stream(0, "ctc-oracle");
    let (mut cases, mut worst_dp, mut worst_sum) = (0, 0.0f64, 0.0f64);
    while cases < 240 {
        let frames = rng.int_range(1, 6);
        // Blank plus up to three labels.
        let classes = rng.int_range(2, 4);
        let len = rng.int_range(0, 3);
        let target: Vec<usize> = (0..len).map(|_| rng.int_range(1, classes - 1)).collect();
        if ctc_min_frames(&target) > frames {
            continue;
        }
        let mut probs = Vec::new();
        for _ in 0..frames {
            let raw: Vec<f64> = (0..classes).map(|_| rng.uniform(0.05, 1.0)).collect();
            let z: f64 = raw.iter().sum();
            probs.push(raw.into_iter().map(|p| p / z).collect::<Vec<_>>());
        }
        let lp = Tensor::from_fn(&[frames, classes], |i| probs[i / classes][i % classes].ln());
        let expected = brute_force_likelihood(&probs, &target);
        let got = (-dp_loss(&lp, &target).unwrap()).exp();
        worst_dp = worst_dp
            .max((got - expected).abs())
            .max((got.ln() - expected.ln()).abs());

        // Total probability over every label sequence of length <= T.
        let mut total = 0.0;
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
        worst_sum = worst_sum.max((total - 1.0).abs());
        cases += 1;
    }
    (
        worst_dp < 1e-6 && worst_sum < 1e-6,
        format!("{cases} cases, max |dp - brute force| {worst_dp:.1e}, max |sum P(y) - 1| {worst_sum:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn tiny(tap: TapPoint) -> ModelConfig {
    ModelConfig {
        n_mels: 12,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        conv_channels: [4, 4],
        n_enc_layers: 2,
        n_dec_layers: 3,
        vocab_size: char_vocab().len(),
        head_d_ff: 16,
        tap,
        task: Task::Intent(grabo_schema()),
        slu_stop_gradient: false,
    }
}

fn features<T: mtslu::Real>(seed: u64, frames: usize) -> Tensor<T> {
    let mut rng = Rng::stream(seed, "acceptance-feat");
    Tensor::<f64>::from_fn(&[1, frames, 12], |_| rng.normal()).cast()
}

fn rows_diff(a: &Tensor<f64>, ai: usize, b: &Tensor<f64>, bi: usize, rows: usize) -> f64 {
    let width = *a.shape().last().unwrap();
    let (a_stride, b_stride) = (a.numel() / a.shape()[0], b.numel() / b.shape()[0]);
    let mut worst = 0.0f64;
    for r in 0..rows * width {
        worst = worst.max((a.data()[ai * a_stride + r] - b.data()[bi * b_stride + r]).abs());
    }
    worst
}

fn decoder_causality() -> (bool, String) {
    let model = Model::<f64>::new(tiny(TapPoint::asr(1)), 21).unwrap();
    let feats = features::<f64>(1, 36);
    let y: Vec<usize> = vec![7, 12, 5, 20, 9, 14];
    let run = |tokens: &[usize]| {
        let tape = Tape::new();
        let b = Binder::new(&tape, model.params());
        let out = model.forward_train(&b, &feats, &[36], &[tokens.to_vec()]).unwrap();
        (out.dec_logits.value().clone(), out.tapped.value().clone())
    };
    let (base_logits, base_tap) = run(&y);
    let width = base_logits.shape()[2];
    let d = base_tap.shape()[2];
    let mut ok = true;
    // Decoder input position p holds <sos> for p = 0 and y[p - 1] after.
    for p in 1..=y.len() {
        let mut other = y.clone();
        other[p - 1] = if y[p - 1] == 25 { 26 } else { 25 };
        let (logits, tap) = run(&other);
        ok &= logits.data()[..p * width] == base_logits.data()[..p * width];
        ok &= tap.data()[..p * d] == base_tap.data()[..p * d];
        ok &= logits.data()[p * width..(p + 1) * width] != base_logits.data()[p * width..(p + 1) * width];
    }
    (ok, "causal".into())
}

fn padding_invariance() -> (bool, f64) {
    let mut worst = 0.0f64;
    for tap in [TapPoint::asr(2), TapPoint::encoder(1)] {
        let model = Model::<f64>::new(tiny(tap), 22).unwrap();
        let (short, long) = (features::<f64>(2, 23), features::<f64>(3, 47));
        let ys = vec![vec![8, 9], vec![5, 6, 7, 8, 9, 10, 11]];
        let mut data = short.data().to_vec();
        data.resize(47 * 12, 0.0);
        data.extend_from_slice(long.data());
        let padded = Tensor::new(&[2, 47, 12], data).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, model.params());
        let batched = model.forward_train(&b, &padded, &[23, 47], &ys).unwrap();
        let single = model.forward_train(&b, &short, &[23], &ys[..1]).unwrap();
        worst = worst
            .max(rows_diff(
                batched.ctc_log_probs.value(),
                0,
                single.ctc_log_probs.value(),
                0,
                single.ctc_lengths[0],
            ))
            .max(rows_diff(
                batched.dec_logits.value(),
                0,
                single.dec_logits.value(),
                0,
                3,
            ))
            .max(rows_diff(
                batched.slu_logits.value(),
                0,
                single.slu_logits.value(),
                0,
                1,
            ));
    }
    (worst < 1e-6, worst)
}

fn class_attention_permutation() -> (bool, f64) {
    let mut store = ParamStore::<f64>::new();
    let head = ClassAttention::new(&mut Scope::root(&mut store, 9), 8, 2, 16, 6).unwrap();
    let mut rng = Rng::stream(4, "perm");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.int_range(1, 9);
        let memory = Tensor::<f64>::from_fn(&[1, len, 8], |_| rng.normal());
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        let permuted = Tensor::from_fn(&[1, len, 8], |i| memory.data()[order[i / 8] * 8 + i % 8]);
        let mut junk = memory.data().to_vec();
        junk.extend((0..3 * 8).map(|_| rng.normal() * 100.0));
        let padded = Tensor::new(&[1, len + 3, 8], junk).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let logits = |m: Tensor<f64>| head.forward(&b, &b.constant(m), &[len]).unwrap().value().clone();
        let base = logits(memory);
        worst = worst
            .max(base.max_abs_diff(&logits(permuted)))
            .max(base.max_abs_diff(&logits(padded)));
    }
    (worst < 1e-6, worst)
}

fn grabo_small(seed: u64, reps: usize) -> Manifest {
    synth_generate(
        &SynthSpec {
            n_mels: 12,
            ..SynthSpec::grabo(seed)
        },
        reps,
    )
    .unwrap()
}

fn freeze_contract() -> bool {
    let model = Model::<f32>::new(tiny(TapPoint::asr(2)), 23).unwrap();
    let data = grabo_small(5, 1);
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 12,
        freeze_encoder: true,
        eval: EvalOptions {
            max_decode_len: 4,
            ..EvalOptions::default()
        },
        ..TrainConfig::default()
    };
    let trained = finetune_model(model.clone(), &cfg, &data, None, &char_vocab())
        .unwrap()
        .model;
    let mut encoder_same = true;
    let mut heads_moved = false;
    for ((name, before), (_, after)) in model.params().iter().zip(trained.params().iter()) {
        if name.starts_with(ENCODER_PREFIX) {
            encoder_same &= before.bit_eq(after);
        } else {
            heads_moved |= !before.bit_eq(after);
        }
    }
    encoder_same && heads_moved
}

fn tap_equivalence() -> bool {
    let base = Model::<f32>::new(tiny(TapPoint::encoder(1)), 24).unwrap();
    let feats = features::<f32>(5, 40);
    let y = vec![vec![9, 10, 11]];
    let outputs = |m: &Model<f32>| {
        let tape = Tape::new();
        let b = Binder::new(&tape, m.params());
        let out = m.forward_train(&b, &feats, &[40], &y).unwrap();
        let greedy = m.forward_infer(&feats, &[40], 8).unwrap().remove(0).tokens;
        (
            out.ctc_log_probs.value().clone(),
            out.dec_logits.value().clone(),
            greedy,
        )
    };
    let (ctc, dec, greedy) = outputs(&base);
    [
        TapPoint::encoder(0),
        TapPoint::asr(0),
        TapPoint::asr(1),
        TapPoint::asr(2),
    ]
    .into_iter()
    .all(|tap| {
        let (c, d, g) = outputs(&base.with_tap(tap).unwrap());
        c.bit_eq(&ctc) && d.bit_eq(&dec) && g == greedy
    })
}

fn structural_invariants() -> Outcome {
    let (causal, _) = decoder_causality();
    let (padding, pad_err) = padding_invariance();
    let (perm, perm_err) = class_attention_permutation();
    let freeze = freeze_contract();
    let taps = tap_equivalence();
    let word = |b: bool| if b { "ok" } else { "FAILED" };
    (
        causal && padding && perm && freeze && taps,
        format!(
            "causality bitwise {}, padding {} ({pad_err:.1e}), class-attention permutation/padding {} ({perm_err:.1e}), \
             encoder freeze bitwise {}, tap equivalence bitwise {}",
            word(causal),
            word(padding),
            word(perm),
            word(freeze),
            word(taps)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn parameter_counts() -> Outcome {
    let model = Model::<f32>::new(ModelConfig::paper(Task::Intent(grabo_schema())), 0).unwrap();
    let enc = model.count_params(ENCODER_PREFIX) as f64;
    let asr = model.count_params(ASR_PREFIX) as f64;
    let slu = model.count_params(SLU_PREFIX) as f64;
    let asr_dev = asr / 13.3e6 - 1.0;
    let slu_dev = slu / 825e3 - 1.0;
    (
        enc < 18e6 && asr_dev.abs() < 0.15 && slu_dev.abs() < 0.25,
        format!(
            "encoder {:.2}M (< 18M), ASR head {:.2}M ({:+.1}% vs 13.3M), intent head {:.0}k ({:+.1}% vs 825k)",
            enc / 1e6,
            asr / 1e6,
            asr_dev * 100.0,
            slu / 1e3,
            slu_dev * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 8

fn metric_examples() -> Outcome {
    let mut fails = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let f1 = macro_f1(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap().macro_f1;
    expect("macro-F1 7/9", (f1 - 7.0 / 9.0).abs() < 1e-12);
    expect(
        "macro-F1 perfect",
        macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap().macro_f1 == 1.0,
    );

    let r = ["turn", "on", "the", "light"];
    expect("WER identical", wer(&r, &r).unwrap() == 0.0);
    expect("WER deletion", wer(&r, &["turn", "the", "light"]).unwrap() == 0.25);
    expect(
        "WER substitution",
        wer(&r, &["turn", "off", "the", "light"]).unwrap() == 0.25,
    );
    expect(
        "WER insertion",
        wer(&r, &["turn", "on", "the", "big", "light"]).unwrap() == 0.25,
    );
    expect("WER empty hypothesis", wer(&r, &[] as &[&str]).unwrap() == 1.0);
    expect("WER above one", wer(&["a"], &["b", "c", "d"]).unwrap() == 3.0);
    expect("WER empty reference", wer::<&str>(&[], &["a"]).is_err());

    let i = |action: usize, args: &[usize]| Intent {
        action,
        args: args.to_vec(),
    };
    let golds = [i(0, &[1, 2]), i(1, &[0, 0]), i(2, &[2, 1]), i(3, &[1, 1])];
    expect("accuracy perfect", intent_accuracy(&golds, &golds).unwrap() == 1.0);
    let preds = [i(0, &[1, 0]), i(1, &[0, 0]), i(1, &[2, 1]), i(3, &[1, 1])];
    expect(
        "accuracy partial credit is none",
        intent_accuracy(&preds, &golds).unwrap() == 0.5,
    );
    expect(
        "accuracy length mismatch",
        intent_accuracy(&preds[..2], &golds).is_err(),
    );

    // Every intent of several schemas survives encode then decode.
    let mut round_trips = 0;
    for (k, groups) in [
        (1, vec![]),
        (3, vec![2]),
        (4, vec![3, 3]),
        (4, vec![3, 2, 4]),
        (2, vec![1, 5]),
    ] {
        let schema = IntentSchema {
            actions: (0..k).map(|a| format!("a{a}")).collect(),
            arguments: groups
                .iter()
                .enumerate()
                .map(|(g, &n)| ArgumentGroup {
                    name: format!("g{g}"),
                    values: (0..n).map(|v| format!("v{v}")).collect(),
                })
                .collect(),
        };
        for (class, intent) in schema.all_intents().enumerate() {
            let bits = encode_intent(&schema, &intent).unwrap().bits;
            let logits: Vec<f32> = bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect();
            let ok = decode_intent(&schema, &logits).unwrap() == intent
                && schema.class_of(&intent) == class
                && bits.iter().map(|&b| b as usize).sum::<usize>() == 1 + groups.len();
            expect(&format!("round trip {k}x{groups:?} class {class}"), ok);
            round_trips += 1;
        }
    }
    let grabo = grabo_schema();
    for intent in grabo.all_intents() {
        let bits = encode_intent(&grabo, &intent).unwrap().bits;
        let logits: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
        expect("grabo round trip", decode_intent(&grabo, &logits).unwrap() == intent);
        round_trips += 1;
    }
    (
        fails.is_empty(),
        if fails.is_empty() {
            format!("macro-F1, WER and accuracy examples exact, {round_trips} multi-hot round trips")
        } else {
            format!("mismatches: {}", fails.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 4, 5, 6

fn desk() -> ModelConfig {
    ModelConfig::desk(Task::Intent(grabo_schema()))
}

fn finetune_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 20,
        patience: 5,
        eval: EvalOptions {
            max_decode_len: 24,
            ..EvalOptions::default()
        },
        ..TrainConfig::default()
    }
}

/// Pretrained ASR checkpoint shared by the data-efficiency criteria.
fn pretrained() -> Checkpoint {
    let start = Instant::now();
    let train = synth_generate(&SynthSpec::asr_pretrain(1), 560).unwrap();
    let val = synth_generate(&SynthSpec::asr_pretrain(2), 40).unwrap();
    let cfg = TrainConfig {
        max_epochs: 15,
        patience: 5,
        freeze_encoder: false,
        ..TrainConfig::default()
    };
    let outcome = pretrain_asr::<f32>(desk(), &cfg, &train, Some(&val), &char_vocab()).unwrap();
    let vrefs: Vec<&Utterance> = val.utterances.iter().collect();
    let report = evaluate(&outcome.model, &vrefs, &char_vocab(), &EvalOptions::default()).unwrap();
    eprintln!(
        "  pretraining: {} epochs, best {}, held-out WER ctc {:.3} attn {:.3}, {:.0}s",
        outcome.epochs_run,
        outcome.best_epoch,
        report.wer_ctc,
        report.wer_attn,
        start.elapsed().as_secs_f64()
    );
    Checkpoint {
        tensors: decode_checkpoint(&encode_checkpoint(&outcome.model).unwrap()).unwrap(),
        meta: None,
    }
}

fn overfit(checkpoint: &Checkpoint) -> Outcome {
    let start = Instant::now();
    let data = synth_generate(&SynthSpec::grabo(31), 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 50,
        ..finetune_config()
    };
    let vocab = char_vocab();
    let outcome = finetune_mtl::<f32>(desk(), &cfg, checkpoint, &data, Some(&data), &vocab).unwrap();
    let refs: Vec<&Utterance> = data.utterances.iter().collect();
    let report = evaluate(&outcome.model, &refs, &vocab, &cfg.eval).unwrap();
    let acc = report.accuracy.unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        acc >= 0.99 && report.wer_attn <= 0.05 && outcome.epochs_run <= 50 && secs < 600.0,
        format!(
            "{} utterances over {} classes: train accuracy {:.3}, train WER attn {:.3} (ctc {:.3}), selected epoch {} of {}, {:.0}s",
            data.len(),
            grabo_schema().n_classes(),
            acc,
            report.wer_attn,
            report.wer_ctc,
            outcome.best_epoch,
            outcome.epochs_run,
            secs
        ),
    )
}

struct Curves<'a> {
    exp: Experiment<'a>,
}

impl Curves<'_> {
    fn accuracies(&self, size: usize, arm: Arm, folds: usize) -> Vec<f64> {
        let cells: Vec<Cell> = (0..folds)
            .map(|fold| Cell {
                size,
                fold,
                arm,
                tap: TapPoint::asr(2),
            })
            .collect();
        let rows: Vec<CurveRow> = run_cells(&self.exp, &cells).unwrap();
        rows.into_iter()
            .filter(|r| r.metric == "accuracy")
            .map(|r| r.value)
            .collect()
    }
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn mtl_vs_slu_only(mtl: &[f64], slu: &[f64]) -> Outcome {
    let diffs: Vec<f64> = mtl.iter().zip(slu).map(|(a, b)| a - b).collect();
    let holds = diffs.iter().filter(|d| **d >= 0.0).count();
    let mean_diff = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let effect = if sd > 0.0 {
        format!("{:.2}", mean_diff / sd)
    } else {
        "undefined (constant differences)".into()
    };
    (
        holds >= 4 && mean(mtl) >= mean(slu),
        format!(
            "2/class, ASR.2: MTL mean {:.3} [{}] vs SLU-only {:.3} [{}], mean diff {:+.3}, paired d {}, sign holds on {}/{} folds",
            mean(mtl),
            fmt(mtl),
            mean(slu),
            fmt(slu),
            mean_diff,
            effect,
            holds,
            diffs.len()
        ),
    )
}

fn mtl_vs_pipeline(curves: &Curves<'_>, mtl_by_size: &[(usize, Vec<f64>)]) -> Outcome {
    let mtl1 = &mtl_by_size[0].1;
    let pipe = curves.accuracies(1, Arm::Pipeline, 5);
    let diffs: Vec<f64> = mtl1.iter().zip(&pipe).map(|(a, b)| a - b).collect();
    let test = sign_test(&diffs);
    let sizes: Vec<f64> = mtl_by_size.iter().map(|(s, _)| *s as f64).collect();
    let means: Vec<f64> = mtl_by_size.iter().map(|(_, v)| mean(v)).collect();
    let rho = spearman(&sizes, &means);
    let curve = mtl_by_size
        .iter()
        .map(|(s, v)| format!("{s}:{:.3}", mean(v)))
        .collect::<Vec<_>>()
        .join(" ");
    (
        mean(mtl1) > mean(&pipe) && test.p_value < 0.1 && rho > 0.0,
        format!(
            "1/class: MTL {:.3} [{}] vs pipeline {:.3} [{}], sign test {}+/{}-/{}= p={:.4}; MTL curve {} Spearman rho {:.3}",
            mean(mtl1),
            fmt(mtl1),
            mean(&pipe),
            fmt(&pipe),
            test.positive,
            test.negative,
            test.ties,
            test.p_value,
            curve,
            rho
        ),
    )
}

// ---------------------------------------------------------------- 9

fn end_to_end(root: &std::path::Path, tag: &str) -> (String, Vec<u8>, String) {
    let dir = root.join(tag);
    let vocab = char_vocab();
    let small = |spec: SynthSpec| SynthSpec { n_mels: 12, ..spec };
    synth_generate(&small(SynthSpec::asr_pretrain(1)), 60)
        .unwrap()
        .save(&dir.join("pre"))
        .unwrap();
    synth_generate(&small(SynthSpec::grabo(2)), 2)
        .unwrap()
        .save(&dir.join("grabo"))
        .unwrap();
    synth_generate(&small(SynthSpec::grabo(3)), 1)
        .unwrap()
        .save(&dir.join("test"))
        .unwrap();

    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 12,
        seed: 7,
        eval: EvalOptions {
            max_decode_len: 8,
            ..EvalOptions::default()
        },
        ..TrainConfig::default()
    };
    let meta = |model: &ModelConfig, stage: &str, epoch: usize| CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        seed: cfg.seed,
        config_hash: "acceptance".into(),
        stage: stage.into(),
        epoch,
    };
    let pre_data = Manifest::load(&dir.join("pre")).unwrap();
    let (train, val) = pre_data.utterances.split_at(54);
    let pre = pretrain_asr::<f32>(
        tiny(TapPoint::asr(2)),
        &cfg,
        &Manifest::new(train.to_vec()),
        Some(&Manifest::new(val.to_vec())),
        &vocab,
    )
    .unwrap();
    let pre_path = dir.join("pre.ckpt");
    save_checkpoint(
        &pre_path,
        &pre.model,
        &meta(pre.model.config(), "pretrain", pre.best_epoch),
    )
    .unwrap();

    let grabo = Manifest::load(&dir.join("grabo")).unwrap();
    let checkpoint = load_checkpoint(&pre_path).unwrap();
    let fine = finetune_mtl::<f32>(tiny(TapPoint::asr(2)), &cfg, &checkpoint, &grabo, None, &vocab).unwrap();
    let fine_path = dir.join("fine.ckpt");
    save_checkpoint(
        &fine_path,
        &fine.model,
        &meta(fine.model.config(), "train", fine.best_epoch),
    )
    .unwrap();

    let test = Manifest::load(&dir.join("test")).unwrap();
    let refs: Vec<&Utterance> = test.utterances.iter().collect();
    let model = mtslu::training::model_from_checkpoint::<f32>(&load_checkpoint(&fine_path).unwrap()).unwrap();
    let report = evaluate(&model, &refs, &vocab, &cfg.eval).unwrap();
    (
        serde_json::to_string_pretty(&report).unwrap(),
        std::fs::read(&fine_path).unwrap(),
        fine.log.to_csv() + &pre.log.to_csv(),
    )
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let a = end_to_end(root.path(), "a");
    let b = end_to_end(root.path(), "b");
    let same = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
    (
        same == (true, true, true),
        format!(
            "synth, pretrain, train, eval run twice: report identical {}, checkpoint identical {} ({} bytes), logs identical {}, {:.0}s",
            same.0,
            same.1,
            a.1.len(),
            same.2,
            start.elapsed().as_secs_f64()
        ),
    )
}

// ----------------------------------------------------------------

fn run(results: &mut Vec<(usize, bool)>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(outcome) => outcome,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {id} {name}: {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push((id, pass));
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let mut results = Vec::new();

    if on(1) {
        run(&mut results, 1, "gradcheck", gradcheck_suite);
    }
    if on(2) {
        run(&mut results, 2, "ctc-oracle", ctc_oracle);
    }
    if on(3) {
        run(&mut results, 3, "structural-invariants", structural_invariants);
    }
    if [4, 5, 6].iter().any(|&id| on(id)) {
        match catch_unwind(pretrained) {
            Ok(checkpoint) => {
                let model = desk();
                let train = finetune_config();
                let harness = HarnessConfig::default();
                let vocab = char_vocab();
                let pool = synth_generate(&SynthSpec::grabo(11), harness.pool_per_class()).unwrap();
                let test = synth_generate(&SynthSpec::grabo(12), 3).unwrap();
                let curves = Curves {
                    exp: Experiment {
                        model: &model,
                        train: &train,
                        harness: &harness,
                        checkpoint: &checkpoint,
                        pool: &pool,
                        test: &test,
                        vocab: &vocab,
                        config_hash: String::new(),
                        progress: None,
                    },
                };
                if on(4) {
                    run(&mut results, 4, "overfit", || overfit(&checkpoint));
                }
                let mut mtl2 = None;
                if on(5) {
                    run(&mut results, 5, "mtl-vs-slu-only", || {
                        let mtl = curves.accuracies(2, Arm::Mtl, 5);
                        let slu = curves.accuracies(2, Arm::SluOnly, 5);
                        mtl2 = Some(mtl.clone());
                        mtl_vs_slu_only(&mtl, &slu)
                    });
                }
                if on(6) {
                    run(&mut results, 6, "mtl-vs-pipeline", || {
                        let by_size = vec![
                            (1, curves.accuracies(1, Arm::Mtl, 5)),
                            (2, mtl2.clone().unwrap_or_else(|| curves.accuracies(2, Arm::Mtl, 5))),
                            (4, curves.accuracies(4, Arm::Mtl, 5)),
                        ];
                        mtl_vs_pipeline(&curves, &by_size)
                    });
                }
            }
            Err(_) => {
                for (id, name) in [(4, "overfit"), (5, "mtl-vs-slu-only"), (6, "mtl-vs-pipeline")] {
                    if on(id) {
                        run(&mut results, id, name, || (false, "pretraining failed".into()));
                    }
                }
            }
        }
    }
    if on(7) {
        run(&mut results, 7, "parameter-counts", parameter_counts);
    }
    if on(8) {
        run(&mut results, 8, "metrics", metric_examples);
    }
    if on(9) {
        run(&mut results, 9, "determinism", determinism);
    }

    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
