//! Command-line front end: `prepare`, `train`, `evaluate`, `predict`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetConfig, EncodedData, VocabMap};
use crate::error::{DlfError, Result};
use crate::model::{Ablation, DlfModel, ModelConfig};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;

/// Maps an error onto the stable exit-code contract.
pub fn exit_code(err: &DlfError) -> i32 {
    match err {
        DlfError::NonFinite(_) | DlfError::Numeric(_) => EXIT_NUMERIC,
        DlfError::SchemaMismatch { .. } => EXIT_COMPAT,
        DlfError::Contract(_) => 1,
        _ => EXIT_INPUT,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Holds the cache, vocabulary and run artifacts.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| DlfError::config(e.to_string()))?;
        for p in &mut cfg.dataset.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.dir.as_os_str().is_empty() {
            cfg.output.dir = PathBuf::from("run");
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DlfError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut problems = Vec::new();
        if check_paths {
            for p in &self.dataset.paths {
                if !p.exists() {
                    problems.push(format!("dataset path {} does not exist", p.display()));
                }
            }
        }
        for r in [self.model.validate(), self.training.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DlfError::config(problems.join("; ")))
        }
    }

    /// Short digest identifying the model and training settings.
    pub fn hash(&self) -> String {
        let text = serde_json::to_vec(&(&self.dataset, &self.model, &self.training)).expect("config serializes");
        Sha256::digest(&text)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.output.dir.join("vocab.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.output.dir.join("data.dlfd")
    }
}

#[derive(Debug, Parser)]
#[command(name = "dlf", version, about = "Layer-wise fusion CTR model: prepare, train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and the encoded cache.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Rebuild even if a cache exists.
        #[arg(long)]
        force: bool,
    },
    /// Train, keep the best checkpoint and report test metrics.
    Train(TrainArgs),
    /// Score a split with a checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write click probabilities for a CSV file.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Single-threaded, bit-reproducible run.
    #[arg(long)]
    pub deterministic: bool,
}

/// Caps the rayon pool from `DLF_NUM_THREADS`, or to one thread.
pub fn configure_threads(deterministic: bool) {
    let from_env = std::env::var("DLF_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let threads = if deterministic { Some(1) } else { from_env };
    if let Some(n) = threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one command, writing JSON report lines to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Prepare { config, force } => {
            configure_threads(false);
            let cfg = RunConfig::load(&config)?;
            cfg.validate(true)?;
            let summary = prepare(&cfg, force)?;
            emit(out, &summary)
        }
        Command::Train(args) => {
            configure_threads(args.deterministic);
            let mut cfg = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.training.seed = seed;
            }
            if let Some(a) = args.ablation {
                cfg.model.ablation = a;
            }
            if let Some(r) = args.repeats {
                cfg.training.repeats = r;
            }
            cfg.validate(false)?;
            for line in train(&cfg, args.deterministic)? {
                emit(out, &line)?;
            }
            Ok(())
        }
        Command::Evaluate { config, checkpoint, split } => {
            configure_threads(false);
            let cfg = RunConfig::load(&config)?;
            let report = evaluate(&cfg, &checkpoint, &split)?;
            emit(out, &report)
        }
        Command::Predict { config, checkpoint, input, output } => {
            configure_threads(false);
            let cfg = RunConfig::load(&config)?;
            let written = predict(&cfg, &checkpoint, &input, &output)?;
            emit(out, &json!({ "rows": written, "output": output }))
        }
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn report_row_errors(errors: &[data::RowError]) {
    for e in errors.iter().take(10) {
        eprintln!("line {}: {}", e.line, e.message);
    }
    if errors.len() > 10 {
        eprintln!("... {} more bad lines", errors.len() - 10);
    }
}

/// Builds vocabulary and cache unless both exist and `force` is off.
pub fn prepare(cfg: &RunConfig, force: bool) -> Result<serde_json::Value> {
    let (vocab_path, cache_path) = (cfg.vocab_path(), cfg.cache_path());
    if !force && vocab_path.exists() && cache_path.exists() {
        let vocab = VocabMap::load(&vocab_path)?;
        return Ok(summary(&vocab, None, true));
    }
    let parsed = data::read_csv_files(&cfg.dataset, true)?;
    if !parsed.errors.is_empty() {
        report_row_errors(&parsed.errors);
        let first = &parsed.errors[0];
        return Err(DlfError::Row {
            line: first.line,
            message: format!("{} ({} bad lines in total)", first.message, parsed.errors.len()),
        });
    }
    let vocab = data::build_vocab(&parsed.rows, &cfg.dataset)?;
    let encoded = EncodedData::encode(&parsed.rows, &vocab)?;
    fs::create_dir_all(&cfg.output.dir)?;
    vocab.save(&vocab_path)?;
    data::write_cache(&cache_path, &encoded, vocab.schema_hash())?;
    Ok(summary(&vocab, Some(encoded.len()), false))
}

fn summary(vocab: &VocabMap, rows: Option<usize>, reused: bool) -> serde_json::Value {
    let schema = vocab.schema();
    json!({
        "fields": schema.n_fields(),
        "field_sizes": schema.fields.iter().map(|f| json!({ "name": f.name, "vocab_size": f.vocab_size })).collect::<Vec<_>>(),
        "total_features": schema.total_features(),
        "rows": rows,
        "schema_hash": format!("{:016x}", vocab.schema_hash()),
        "reused_cache": reused,
    })
}

/// Vocabulary and encoded cache of a prepared run directory.
pub fn load_prepared(cfg: &RunConfig) -> Result<(VocabMap, EncodedData)> {
    let vocab_path = cfg.vocab_path();
    if !vocab_path.exists() || !cfg.cache_path().exists() {
        return Err(DlfError::config(format!(
            "no prepared cache in {}; run `dlf prepare` first",
            cfg.output.dir.display()
        )));
    }
    let vocab = VocabMap::load(&vocab_path)?;
    vocab.check_fields(&cfg.dataset)?;
    let data = data::read_cache(&cfg.cache_path(), vocab.schema().n_fields(), vocab.schema_hash())?;
    Ok((vocab, data))
}

/// Trains `training.repeats` runs with consecutive seeds. Returns one report
/// per run plus an aggregate when more than one run was made.
pub fn train(cfg: &RunConfig, deterministic: bool) -> Result<Vec<serde_json::Value>> {
    let (vocab, data) = load_prepared(cfg)?;
    let schema = vocab.schema();
    let hash = vocab.schema_hash();
    let splits = data::time_split(&data)?;
    let variant = cfg.model.ablation.name();
    let mut reports = Vec::new();
    let mut aucs = Vec::new();
    let mut losses = Vec::new();
    for r in 0..cfg.training.repeats {
        let seed = cfg.training.seed + r as u64;
        let model_cfg = ModelConfig { seed, ..cfg.model.clone() };
        let train_cfg = TrainConfig { seed, ..cfg.training.clone() };
        let mut model = DlfModel::<f32>::init(&model_cfg, &schema)?;
        let outcome = trainer::train(&mut model, &splits, &train_cfg, hash, |rec| {
            eprintln!(
                "[{variant} seed {seed}] epoch {} loss {:.6} val_auc {:.6} val_logloss {:.6} ({:.1}s)",
                rec.epoch, rec.loss, rec.val_auc, rec.val_logloss, rec.seconds
            );
        })?;
        let test = trainer::evaluate(&model, &splits.test, cfg.training.batch_size)?;
        let run_dir = cfg.output.dir.join(format!("{variant}-seed{seed}"));
        fs::create_dir_all(&run_dir)?;
        trainer::save_checkpoint(&run_dir.join("checkpoint.dlfc"), &outcome.best)?;
        trainer::write_history_csv(&run_dir.join("history.csv"), &outcome.history)?;
        let report = json!({
            "variant": variant,
            "fusion": cfg.model.fusion.name(),
            "seed": seed,
            "auc": test.auc,
            "logloss": test.logloss,
            "best_epoch": outcome.best.epoch,
            "best_val_auc": outcome.best.best_val_auc,
            "epochs_run": outcome.history.len(),
            "config_hash": cfg.hash(),
            "deterministic": deterministic,
            "run_dir": run_dir,
        });
        fs::write(run_dir.join("report.json"), format!("{report}\n"))?;
        aucs.push(test.auc);
        losses.push(test.logloss);
        reports.push(report);
    }
    if reports.len() > 1 {
        let (auc_mean, auc_std) = mean_std(&aucs);
        let (ll_mean, ll_std) = mean_std(&losses);
        let aggregate = json!({
            "variant": variant,
            "repeats": reports.len(),
            "auc_mean": auc_mean,
            "auc_std": auc_std,
            "logloss_mean": ll_mean,
            "logloss_std": ll_std,
            "config_hash": cfg.hash(),
        });
        fs::write(cfg.output.dir.join(format!("{variant}-aggregate.json")), format!("{aggregate}\n"))?;
        reports.push(aggregate);
    }
    Ok(reports)
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn load_for_cache(cfg: &RunConfig, checkpoint: &Path) -> Result<(VocabMap, DlfModel<f32>)> {
    if !checkpoint.exists() {
        return Err(DlfError::config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let vocab_path = cfg.vocab_path();
    if !vocab_path.exists() {
        return Err(DlfError::config(format!("no vocabulary at {}; run `dlf prepare` first", vocab_path.display())));
    }
    let vocab = VocabMap::load(&vocab_path)?;
    let ckpt = trainer::load_checkpoint_for(checkpoint, vocab.schema_hash())?;
    Ok((vocab, ckpt.model()?))
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<serde_json::Value> {
    let (_, model) = load_for_cache(cfg, checkpoint)?;
    let (_, data) = load_prepared(cfg)?;
    let splits = data::time_split(&data)?;
    let part = match split {
        "train" => &splits.train,
        "validation" => &splits.validation,
        "test" => &splits.test,
        other => return Err(DlfError::config(format!("unknown split {other:?}; use train, validation or test"))),
    };
    let report = trainer::evaluate(&model, part, cfg.training.batch_size)?;
    Ok(json!({
        "split": split,
        "auc": report.auc,
        "logloss": report.logloss,
        "rows": part.len(),
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
    }))
}

/// Writes `row,probability` for every well-formed input row. Returns the
/// number of rows written.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let (vocab, model) = load_for_cache(cfg, checkpoint)?;
    let file = fs::File::open(input).map_err(|e| DlfError::config(format!("cannot open {}: {e}", input.display())))?;
    let parsed = data::parse_csv(std::io::BufReader::new(file), &cfg.dataset, false)?;
    if !parsed.errors.is_empty() {
        eprintln!("warning: skipping {} malformed rows", parsed.errors.len());
        report_row_errors(&parsed.errors);
        if parsed.rows.is_empty() {
            return Err(DlfError::Row { line: parsed.errors[0].line, message: "every input row is malformed".into() });
        }
    }
    let n = vocab.schema().n_fields();
    let ids: Vec<u32> = parsed.rows.iter().flat_map(|r| vocab.encode(r)).collect();
    let encoded = EncodedData::new(n, ids, vec![0; parsed.rows.len()])?;
    let probs = trainer::predict_all(&model, &encoded, cfg.training.batch_size)?;
    let mut w = csv::Writer::from_path(output).map_err(|e| DlfError::Format(e.to_string()))?;
    w.write_record(["row", "probability"]).map_err(|e| DlfError::Format(e.to_string()))?;
    for (row, p) in parsed.rows.iter().zip(&probs) {
        // data rows are numbered from 0; line 1 is the header
        w.write_record([(row.line - 2).to_string(), p.to_string()]).map_err(|e| DlfError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(probs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
[dataset]
paths = ["a.csv"]
label = "click"
fields = [{ name = "user", kind = "categorical" }, { name = "age", kind = "numerical" }]

[model]
d = 8
rank = 4
layers = 2

[training]
lr = 0.01
batch_size = 16

[output]
dir = "out"
"#;

    #[test]
    fn toml_resolves_relative_paths() {
        let cfg = RunConfig::from_toml(CONFIG, Path::new("/base")).unwrap();
        assert_eq!(cfg.dataset.paths, vec![PathBuf::from("/base/a.csv")]);
        assert_eq!(cfg.output.dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.model.attention_rounds, 2);
        assert_eq!(cfg.training.patience, 2);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let text = CONFIG.replace("d = 8", "dim = 8");
        let err = RunConfig::from_toml(&text, Path::new(".")).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_INPUT);
    }

    #[test]
    fn validation_reports_missing_paths() {
        let cfg = RunConfig::from_toml(CONFIG, Path::new("/nonexistent")).unwrap();
        let err = cfg.validate(true).unwrap_err().to_string();
        assert!(err.contains("a.csv"), "{err}");
        assert!(cfg.validate(false).is_ok());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&DlfError::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&DlfError::SchemaMismatch { expected: 1, found: 2 }), EXIT_COMPAT);
        assert_eq!(exit_code(&DlfError::config("x")), EXIT_INPUT);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn bundled_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let frappe = RunConfig::load(&dir.join("frappe.toml")).unwrap();
        assert_eq!(frappe.dataset.fields.len(), 10);
        assert_eq!((frappe.model.d, frappe.model.layers, frappe.model.rank), (64, 3, 32));
        assert!(frappe.validate(false).is_ok());
        let movielens = RunConfig::load(&dir.join("movielens.toml")).unwrap();
        assert_eq!(movielens.dataset.fields.len(), 3);
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::from_toml(CONFIG, Path::new(".")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.lr = 0.1;
        assert_ne!(a.hash(), b.hash());
    }
}
