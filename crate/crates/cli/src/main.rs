//! `mtslu`: synthesise corpora, pretrain, finetune, evaluate, decode and run
//! the learning-curve and tap-ablation experiments.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtslu::data::{char_vocab, read_feat, subset_per_class, synth_generate, Manifest, SynthSpec, SENTIMENT_CLASSES};
use mtslu::decode::{ctc_greedy, evaluate, EvalOptions};
use mtslu::harness::{fold_seed, run_ablation, run_learning_curve, Cell, CurveReport, CurveRow, Experiment};
use mtslu::intent::decode_intent;
use mtslu::model::{Model, Task};
use mtslu::tokenizer::{Vocab, BLANK};
use mtslu::training::{
    apply_checkpoint, config_hash, finetune_mtl, load_checkpoint, model_from_checkpoint, pretrain_asr, save_checkpoint,
    Checkpoint, CheckpointMeta, TrainLog, FORMAT_VERSION,
};
use mtslu::{Error, Result};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mtslu",
    version,
    about = "Multitask speech recognition and understanding on synthetic corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest.jsonl plus FEAT files).
    Synth {
        /// Preset name (grabo, sentiment, asr_pretrain) or a JSON spec file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Repetitions per class; the total count for ASR corpora.
        #[arg(long)]
        n_per_class: usize,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train encoder and ASR head on the hybrid CTC/attention loss.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Manifest directory; synthesised from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write; metadata goes to `<out>.json`, the log to `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Multitask finetuning from a pretrained checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint; its SLU head, if any, is replaced.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a labelled manifest and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Build the model from this config instead of the checkpoint metadata.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Transcribe and classify one FEAT file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 48)]
        max_len: usize,
    },
    /// Learning curves over train sizes, folds and arms.
    Curve(ExperimentArgs),
    /// Tap-point ablation with multitask and SLU-only arms.
    Ablation(ExperimentArgs),
    /// Print the default run configuration.
    Defaults,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pretrained checkpoint shared by every cell.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Pool manifest to draw folds from; synthesised when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test manifest; synthesised when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::InfeasibleTarget { .. } | Error::InputTooShort { .. } => 3,
        Error::Incompatible(_) | Error::Corrupt(_) | Error::Version(_) => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "data",
        4 => "checkpoint",
        _ => "internal",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({ "error": { "kind": kind(&e), "code": code, "message": e.to_string() } })
            );
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out,
            n_per_class,
            seed,
        } => synth(&spec, &out, n_per_class, seed),
        Command::Pretrain {
            config,
            data,
            out,
            seed,
        } => pretrain(&RunConfig::load(&config, seed)?, data.as_deref(), &out),
        Command::Train {
            config,
            init,
            data,
            out,
            seed,
        } => train(&RunConfig::load(&config, seed)?, &init, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
        } => eval(&checkpoint, &data, &report, config.as_deref()),
        Command::Decode {
            checkpoint,
            features,
            max_len,
        } => decode(&checkpoint, &features, max_len),
        Command::Curve(args) => experiment(args, false),
        Command::Ablation(args) => experiment(args, true),
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn synth(spec: &str, out: &Path, n_per_class: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        "grabo" => SynthSpec::grabo(0),
        "sentiment" => SynthSpec::sentiment(0),
        "asr_pretrain" => SynthSpec::asr_pretrain(0),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("unknown preset or unreadable spec {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?
        }
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let manifest = synth_generate(&spec, n_per_class)?;
    manifest.save(out)?;
    let hash = config_hash(&json!({ "spec": &spec, "n_per_class": n_per_class }))?;
    let record = json!({ "config_hash": hash, "seed": spec.seed, "n_per_class": n_per_class, "spec": spec });
    write(&out.join("synth.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    println!(
        "{}",
        json!({ "utterances": manifest.len(), "out": out, "config_hash": hash, "seed": spec.seed })
    );
    Ok(())
}

fn log_csv(log: &TrainLog, hash: &str, seed: u64) -> String {
    format!("{}# config_hash={hash} seed={seed}\n", log.to_csv())
}

fn check_mels(manifest: &Manifest, n_mels: usize) -> Result<()> {
    if let Some(u) = manifest.utterances.iter().find(|u| u.features.shape()[1] != n_mels) {
        return Err(Error::Data(format!(
            "utterance {} has {} mel bins, the model expects {n_mels}",
            u.id,
            u.features.shape()[1]
        )));
    }
    Ok(())
}

fn pretrain(config: &RunConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let vocab = char_vocab();
    let manifest = match data {
        Some(dir) => Manifest::load(dir)?,
        None => synth_generate(&config.data.pretrain, config.data.pretrain_utterances)?,
    };
    let model_config = config.model_config();
    check_mels(&manifest, model_config.n_mels)?;
    let n_val = config.data.pretrain_val;
    if manifest.len() <= n_val {
        return Err(Error::Data(format!(
            "pretraining manifest has {} utterances, more than data.pretrain_val = {n_val} needed",
            manifest.len()
        )));
    }
    let split = manifest.len() - n_val;
    let train_set = manifest.select(&(0..split).collect::<Vec<_>>());
    let val_set = manifest.select(&(split..manifest.len()).collect::<Vec<_>>());
    let val = (n_val > 0).then_some(&val_set);
    let outcome = pretrain_asr::<f32>(model_config.clone(), &config.train, &train_set, val, &vocab)?;
    let hash = config.hash()?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model_config,
        seed: config.train.seed,
        config_hash: hash.clone(),
        stage: "pretrain".into(),
        epoch: outcome.best_epoch,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &outcome.model, &meta)?;
    write(
        &with_suffix(out, ".log.csv"),
        log_csv(&outcome.log, &hash, config.train.seed),
    )?;
    println!(
        "{}",
        json!({
            "stage": "pretrain",
            "epochs_run": outcome.epochs_run,
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "config_hash": hash,
            "seed": config.train.seed,
        })
    );
    Ok(())
}

fn train(config: &RunConfig, init: &Path, data: &Path, out: &Path) -> Result<()> {
    let vocab = char_vocab();
    let checkpoint = load_checkpoint(init)?;
    let manifest = Manifest::load(data)?;
    let model_config = config.model_config();
    check_mels(&manifest, model_config.n_mels)?;
    let schema = match &model_config.task {
        Task::Intent(s) => Some(s),
        Task::Sentiment { .. } => None,
    };
    let (train_set, val_set) = if config.data.val_per_class == 0 {
        (manifest, None)
    } else {
        let val = subset_per_class(
            &manifest,
            config.data.val_per_class,
            fold_seed(config.train.seed, 0),
            schema,
        )?;
        let rest: Vec<usize> = (0..manifest.len())
            .filter(|&i| !val.utterances.iter().any(|v| v.id == manifest.utterances[i].id))
            .collect();
        if rest.is_empty() {
            return Err(Error::Data(
                "no training utterances left after holding out validation".into(),
            ));
        }
        (manifest.select(&rest), Some(val))
    };
    let outcome = finetune_mtl::<f32>(
        model_config.clone(),
        &config.train,
        &checkpoint,
        &train_set,
        val_set.as_ref(),
        &vocab,
    )?;
    let hash = config.hash()?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model_config,
        seed: config.train.seed,
        config_hash: hash.clone(),
        stage: "train".into(),
        epoch: outcome.best_epoch,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &outcome.model, &meta)?;
    write(
        &with_suffix(out, ".log.csv"),
        log_csv(&outcome.log, &hash, config.train.seed),
    )?;
    println!(
        "{}",
        json!({
            "stage": "train",
            "epochs_run": outcome.epochs_run,
            "best_epoch": outcome.best_epoch,
            "best_val_metric": outcome.best_val_metric,
            "best_val_loss": outcome.best_val_loss,
            "config_hash": hash,
            "seed": config.train.seed,
        })
    );
    Ok(())
}

/// Model from the checkpoint metadata, or from `config` with a strict
/// shape check against the checkpoint.
fn load_model(checkpoint: &Checkpoint, config: Option<&RunConfig>) -> Result<Model<f32>> {
    match config {
        Some(config) => {
            let mut model = Model::new(config.model_config(), config.train.seed)?;
            apply_checkpoint(&mut model, &checkpoint.tensors, None, true)?;
            Ok(model)
        }
        None => model_from_checkpoint(checkpoint),
    }
}

fn eval(checkpoint_path: &Path, data: &Path, report_path: &Path, config: Option<&Path>) -> Result<()> {
    let config = config.map(|p| RunConfig::load(p, None)).transpose()?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let model = load_model(&checkpoint, config.as_ref())?;
    let manifest = Manifest::load(data)?;
    check_mels(&manifest, model.config().n_mels)?;
    let opts = config
        .as_ref()
        .map(|c| c.train.eval)
        .unwrap_or_else(EvalOptions::default);
    let utts: Vec<_> = manifest.utterances.iter().collect();
    let report = evaluate(&model, &utts, &char_vocab(), &opts)?;
    let (hash, seed, stage) = match &checkpoint.meta {
        Some(m) => (m.config_hash.clone(), m.seed, m.stage.clone()),
        None => (String::new(), 0, String::new()),
    };
    let mut doc = serde_json::to_value(&report)?;
    let obj = doc.as_object_mut().expect("report is an object");
    obj.insert("config_hash".into(), json!(hash));
    obj.insert("seed".into(), json!(seed));
    obj.insert("stage".into(), json!(stage));
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    write(report_path, &text)?;
    print!("{text}");
    Ok(())
}

fn label_name(model: &Model<f32>, logits: &[f32]) -> Result<String> {
    match &model.config().task {
        Task::Intent(schema) => Ok(schema.describe(&decode_intent(schema, logits)?)),
        Task::Sentiment { n_classes } => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok(if *n_classes == SENTIMENT_CLASSES.len() {
                SENTIMENT_CLASSES[best].to_string()
            } else {
                format!("class{best}")
            })
        }
    }
}

fn decode(checkpoint_path: &Path, features: &Path, max_len: usize) -> Result<()> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let model = model_from_checkpoint::<f32>(&checkpoint)?;
    let feats = read_feat(features)?;
    if feats.rank() != 2 || feats.shape()[1] != model.config().n_mels {
        return Err(Error::Data(format!(
            "{} has shape {:?}, expected [frames, {}]",
            features.display(),
            feats.shape(),
            model.config().n_mels
        )));
    }
    let vocab: Vocab = char_vocab();
    let item = model.encode_item(&feats)?;
    let ctc = vocab.decode(&ctc_greedy(&item.ctc_log_probs, BLANK)?);
    let tokens = model.greedy(&item, max_len)?;
    let logits = model.slu_logits(&item, &tokens)?;
    println!(
        "{}",
        json!({
            "transcript": vocab.decode(&tokens),
            "ctc_transcript": ctc,
            "label": label_name(&model, &logits)?,
        })
    );
    Ok(())
}

fn experiment(args: ExperimentArgs, ablation: bool) -> Result<()> {
    let mut config = RunConfig::load(&args.config, args.seed)?;
    if let Some(jobs) = args.jobs {
        config.harness.jobs = jobs.max(1);
    }
    let checkpoint = load_checkpoint(&args.init)?;
    let model_config = config.model_config();
    let pool = match &args.data {
        Some(dir) => Manifest::load(dir)?,
        None => synth_generate(&config.data.downstream, config.harness.pool_per_class())?,
    };
    let test = match &args.test {
        Some(dir) => Manifest::load(dir)?,
        None => synth_generate(
            &SynthSpec {
                seed: config.data.test_seed,
                ..config.data.downstream.clone()
            },
            config.data.test_per_class,
        )?,
    };
    check_mels(&pool, model_config.n_mels)?;
    check_mels(&test, model_config.n_mels)?;
    // Thread count never changes results, so it is left out of the hash.
    let hash = {
        let mut c = config.clone();
        c.harness.jobs = 1;
        c.hash()?
    };
    let progress = |cell: &Cell, rows: &[CurveRow]| {
        if let Some(r) = rows.first() {
            eprintln!(
                "size={} fold={} arm={} tap={} {}={:.4}",
                cell.size, cell.fold, cell.arm, cell.tap, r.metric, r.value
            );
        }
    };
    let exp = Experiment {
        model: &model_config,
        train: &config.train,
        harness: &config.harness,
        checkpoint: &checkpoint,
        pool: &pool,
        test: &test,
        vocab: &char_vocab(),
        config_hash: hash,
        progress: Some(&progress),
    };
    let (report, stem): (CurveReport, &str) = if ablation {
        let h = &config.harness;
        (run_ablation(&exp, &h.taps, h.ablation_size, h.folds)?, "ablation")
    } else {
        (run_learning_curve(&exp)?, "curve")
    };
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir)?;
    write(&dir.join(format!("{stem}.csv")), report.to_csv())?;
    write(&dir.join(format!("{stem}.svg")), report.to_svg())?;
    let mut summary = report.summary_json();
    summary["config"] = serde_json::to_value(&config)?;
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    write(&dir.join("summary.json"), &text)?;
    for p in report.summary().iter().filter(|p| p.metric == report.metric) {
        println!(
            "size={} arm={} tap={} {}={:.4} se={:.4} folds={}",
            p.size, p.arm, p.tap, p.metric, p.mean, p.std_err, p.folds
        );
    }
    Ok(())
}
