use std::fs;
use std::path::{Path, PathBuf};

use offergen_core::data::{self, DataError, DatasetSplit, DEFAULT_SPLIT};
use offergen_core::evaluation::{
    chi_square_independence, compare_runs, evaluate_model, format_table, ContingencyTable2x2,
    EvalError,
};
use offergen_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use offergen_core::model::{build_tokenizer, ModelConfig, ModelError, Seq2Seq};
use offergen_core::objectives::{InfoNceMode, LossConfig};
use offergen_core::spectral::{analyze_checkpoint, format_layers, format_summary};
use offergen_core::training::{export_loss_log, train_with, Selection, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::manifest::RunManifest;
use crate::{
    ChisqArgs, Command, CompareArgs, DiagnoseArgs, EvalArgs, GenDataArgs, Mode, TrainArgs,
};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadFractions(_) | DataError::SplitTooSmall { .. } => {
                CliError::Usage(e.to_string())
            }
            other => runtime("data", other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        runtime("model", e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        runtime("evaluation", e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => runtime("training", other),
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Chisq(a) => chisq(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime("json", e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let fractions = match a.split.as_deref() {
        Some(&[t, v, s]) => [t, v, s],
        Some(_) => unreachable!("clap enforces three values"),
        None => DEFAULT_SPLIT,
    };
    // fail on bad fractions before spending time on generation
    data::split_sizes(a.n, fractions)?;

    let examples = data::generate_dataset(a.n, a.seed)?;
    let parts = data::split(&examples, fractions, a.seed)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::new(
        "gen-data",
        Some(a.seed),
        json!({ "n": a.n, "seed": a.seed, "split": fractions }),
    );
    for (name, part) in [
        ("train", &parts.train),
        ("val", &parts.val),
        ("test", &parts.test),
    ] {
        let path = dir.join(format!("{name}.jsonl"));
        data::write_jsonl(&path, part)?;
        manifest = manifest.output(name, &path);
    }
    manifest.write(dir)?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        dir.display()
    );
    Ok(())
}

/// Optional JSON config for `train`; flags override it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    lambda: Option<f64>,
    tau: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    fixed_epoch: Option<usize>,
}

fn read_train_file(path: &Path) -> Result<TrainFile> {
    let text = fs::read_to_string(path).map_err(|e| runtime(&path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn resolve_train_config(a: &TrainArgs, file: &TrainFile) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let lambda = match a.mode {
        Mode::Sft => {
            if let Some(l) = a.lambda.or(file.lambda).filter(|&l| l != 0.0) {
                return Err(CliError::Usage(format!(
                    "--mode sft trains with lambda = 0, but lambda = {l} was given"
                )));
            }
            0.0
        }
        Mode::Contrastive => a.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA),
    };
    let loss = LossConfig {
        tau: a.tau.or(file.tau).unwrap_or(defaults.loss.tau),
        lambda,
        infonce_mode: if a.literal_infonce {
            InfoNceMode::Literal
        } else {
            InfoNceMode::Standard
        },
    };
    let cfg = TrainConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: a
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        learning_rate: a
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(defaults.learning_rate),
        loss,
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        checkpoint_dir: a.save_epochs.then(|| a.out.out.join("epochs")),
        select_by: match a.fixed_epoch.or(file.fixed_epoch) {
            Some(k) => Selection::FixedEpoch(k),
            None => Selection::BestValLoss,
        },
        ..defaults
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_split_file(dir: &Path, name: &str) -> Result<Vec<data::TrainingExample>> {
    let path = dir.join(format!("{name}.jsonl"));
    data::read_jsonl(&path).map_err(|e| runtime(&path.display().to_string(), e))
}

fn train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => read_train_file(p)?,
        None => TrainFile::default(),
    };
    let cfg = resolve_train_config(&a, &file)?;
    let split = DatasetSplit {
        train: read_split_file(&a.data, "train")?,
        val: read_split_file(&a.data, "val")?,
        test: Vec::new(),
    };
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;

    let mut model_cfg = ModelConfig::new(0);
    let tokenizer = build_tokenizer(&split.train, model_cfg.max_len);
    model_cfg.vocab_size = tokenizer.vocab_size();
    model_cfg.seed = cfg.seed;
    let model = Seq2Seq::new(model_cfg.clone(), tokenizer)?;

    let (ckpt, log) = train_with(model, &split, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  (contrastive {:.5}, generation {:.5})  val {:.5}",
            r.epoch, r.train_final, r.train_contrastive, r.train_generation, r.val_final
        );
    })?;

    let ckpt_path = dir.join("model.ckpt");
    let loss_path = dir.join("loss.csv");
    save_checkpoint(&ckpt_path, &ckpt.model, ckpt.epoch, ckpt.val_loss)?;
    export_loss_log(&log, &loss_path)?;
    RunManifest::new(
        "train",
        Some(cfg.seed),
        json!({
            "mode": a.mode,
            "train": cfg,
            "model": model_cfg,
            "selected_epoch": ckpt.epoch,
            "selected_val_loss": ckpt.val_loss,
        }),
    )
    .input("data", &a.data)
    .output("checkpoint", &ckpt_path)
    .output("loss_log", &loss_path)
    .write(dir)?;
    println!(
        "selected epoch {} (val loss {:.5}); checkpoint {}",
        ckpt.epoch,
        ckpt.val_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Seq2Seq> {
    load_checkpoint(path)
        .map(|c| c.model)
        .map_err(|e| runtime(&path.display().to_string(), e))
}

fn read_test(path: &Path) -> Result<Vec<data::TrainingExample>> {
    data::read_jsonl(path).map_err(|e| runtime(&path.display().to_string(), e))
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let test = read_test(&a.test)?;
    let report = evaluate_model(&a.name, &model, &test)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    let path = dir.join("eval.json");
    write_json(&path, &report)?;
    RunManifest::new("eval", Some(model.config.seed), json!({ "name": a.name }))
        .input("checkpoint", &a.ckpt)
        .input("test", &a.test)
        .output("report", &path)
        .write(dir)?;
    println!(
        "{}: accepted {}/{}  rate {:.4}  ({:.2}%)",
        report.model, report.accepted_count, report.total, report.rate, report.rate_percent
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let ma = load_model(&a.ckpt_a)?;
    let mb = load_model(&a.ckpt_b)?;
    let test = read_test(&a.test)?;
    let report = compare_runs((&a.name_a, &ma), (&a.name_b, &mb), &test)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    let path = dir.join("comparison.json");
    write_json(&path, &report)?;
    RunManifest::new(
        "compare",
        None,
        json!({ "name_a": a.name_a, "name_b": a.name_b }),
    )
    .input("checkpoint_a", &a.ckpt_a)
    .input("checkpoint_b", &a.ckpt_b)
    .input("test", &a.test)
    .output("report", &path)
    .write(dir)?;
    print!("{}", format_table(&report));
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt).map_err(|e| runtime(&a.ckpt.display().to_string(), e))?;
    let report = analyze_checkpoint(&ckpt);
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    let path = dir.join("diagnostics.json");
    write_json(&path, &report)?;
    RunManifest::new("diagnose", None, json!({}))
        .input("checkpoint", &a.ckpt)
        .output("report", &path)
        .write(dir)?;
    print!("{}", format_layers(&report));
    println!();
    let name = model_label(&a.ckpt);
    print!("{}", format_summary(&[(&name, &report)]));
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(path).display().to_string())
}

fn chisq(a: ChisqArgs) -> Result<()> {
    let t = ContingencyTable2x2::new([[a.table[0], a.table[1]], [a.table[2], a.table[3]]]);
    let r = chi_square_independence(&t, a.yates).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("statistic = {:.4}", r.statistic);
    println!("dof       = {}", r.dof);
    println!("p-value   = {:.6e}", r.p_value);
    if r.p_value < 0.001 {
        println!("p < 0.001: reject independence");
    }
    Ok(())
}
