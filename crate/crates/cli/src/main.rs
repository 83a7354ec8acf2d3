use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use safedx_core::classifier::checkpoint;
use safedx_core::domain::{load_symptom2disease, CsvSchema, LabeledDataset, PatientRecord, Sex, Vitals};
use safedx_core::metrics::classification_report;
use safedx_core::pipeline::training::calibrate_on_split;
use safedx_core::pipeline::{
    evaluate, fit, write_reports, CalibrationRecord, CaseStatus, PipelineError, Stage, System, SystemConfig,
};
use safedx_core::preprocess::Preprocessor;
use safedx_core::retrieval::{build_index, load_corpus, load_external_embeddings, HashingEmbedder};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "safedx", version, about = "Symptom triage with uncertainty flagging and treatment safety screening")]
struct Cli {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long, global = true, default_value = "safedx.json")]
    config: PathBuf,
    /// Run every data-parallel loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier on the configured dataset and write the checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Set the triage threshold on the validation split and write the calibration file.
    Calibrate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Target flag rate; defaults to the config's target_flag_rate.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Embed the dialogue corpus with the builtin featurizer and write an embeddings file.
    IndexBuild {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate an externally computed embeddings file against the corpus and install it.
    IndexImport {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate on the validation split and write report files.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one case and print the outcome as JSON.
    RunCase {
        /// Patient record JSON file, or `-` for stdin.
        #[arg(long, conflicts_with = "text")]
        json: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        /// Case id; defaults to `cli-<unix millis>` so reruns do not collide in the queue.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        spo2: Option<f64>,
        #[arg(long)]
        heart_rate: Option<f64>,
        #[arg(long)]
        age: Option<f64>,
        #[arg(long)]
        sex: Option<String>,
        /// Reference treatment for scoring the plan.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Bearer token required on every route but /health.
        #[arg(long, env = "SAFEDX_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        Failure { code, error: e.into() }
    }
}

fn pipe(e: impl Into<PipelineError>) -> Failure {
    e.into().into()
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error: error.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<SystemConfig, Failure> {
    let mut cfg = SystemConfig::load(&cli.config)?;
    cfg.settings.sequential |= cli.sequential;
    Ok(cfg)
}

fn load_dataset(cfg: &SystemConfig, override_path: Option<&Path>) -> Result<LabeledDataset, Failure> {
    let path = override_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.training.dataset.clone())
        .ok_or_else(|| data(anyhow!("no dataset: pass --dataset or set training.dataset")))?;
    if !path.exists() {
        return Err(data(anyhow!("missing dataset: {}", path.display())));
    }
    load_symptom2disease(&path, &CsvSchema::default())
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Train { dataset } => train(&cli, dataset.as_deref()),
        Command::Calibrate { dataset, target } => calibrate(&cli, dataset.as_deref(), *target),
        Command::IndexBuild { out } => index_build(&cli, out.as_deref()),
        Command::IndexImport { file, out } => index_import(&cli, file, out.as_deref()),
        Command::Evaluate { dataset, out } => evaluate_cmd(&cli, dataset.as_deref(), out.as_deref()),
        Command::RunCase { .. } => run_case(&cli),
        Command::Serve { addr, token } => serve(&cli, *addr, token.clone()),
    }
}

fn train(cli: &Cli, dataset: Option<&Path>) -> CliResult {
    let cfg = load_config(cli)?;
    let ds = load_dataset(&cfg, dataset)?;
    let start = Instant::now();
    let out = fit(&ds, &cfg.training, cfg.load_synonyms()?, cfg.settings.exec())?;
    if let Some(dir) = cfg.model.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    checkpoint::save(&out.model, &cfg.model).map_err(pipe)?;
    let history_path = cfg
        .training
        .history_csv
        .clone()
        .unwrap_or_else(|| cfg.model.with_extension("history.csv"));
    out.history
        .save_csv(&history_path)
        .with_context(|| format!("writing {}", history_path.display()))
        .map_err(runtime)?;

    let last = out.history.final_record().ok_or_else(|| runtime(anyhow!("empty training history")))?;
    let predicted: Vec<usize> = out
        .val_features
        .features
        .iter()
        .map(|x| safedx_core::classifier::argmax(&out.model.forward_fused(x, None)))
        .collect();
    let report = classification_report(&out.val_features.labels, &predicted, out.model.labels.len())
        .map_err(pipe)?;
    println!(
        "trained {} epochs on {} samples ({} synthetic) in {:.1}s",
        last.epoch,
        out.train_features.len(),
        out.synthetic_samples,
        start.elapsed().as_secs_f64()
    );
    println!(
        "validation: accuracy {:.4}  macro-F1 {:.4}  loss {:.4}",
        report.accuracy, report.macro_f1, last.val_loss
    );
    println!("model -> {}", cfg.model.display());
    println!("history -> {}", history_path.display());
    Ok(())
}

fn calibrate(cli: &Cli, dataset: Option<&Path>, target: Option<f64>) -> CliResult {
    let cfg = load_config(cli)?;
    let target = target.unwrap_or(cfg.settings.target_flag_rate);
    let out_path = cfg
        .calibration
        .clone()
        .ok_or_else(|| data(anyhow!("set `calibration` in the config to say where to write the threshold")))?;
    if !cfg.model.exists() {
        return Err(data(anyhow!("missing model checkpoint {} (run train first)", cfg.model.display())));
    }
    let model = checkpoint::load(&cfg.model).map_err(pipe)?;
    let ds = load_dataset(&cfg, dataset)?;
    let mcd = cfg.settings.mcd;
    let cal = calibrate_on_split(&model, &ds, &cfg.training, cfg.load_synonyms()?, target, &mcd, cfg.settings.exec())?;
    let record = CalibrationRecord::new(&cal, mcd);
    let json = serde_json::to_string_pretty(&record).map_err(runtime)?;
    std::fs::write(&out_path, json)
        .with_context(|| format!("writing {}", out_path.display()))
        .map_err(runtime)?;
    println!(
        "threshold {:.6e}: {} of {} validation cases flagged ({:.4}, target {:.2})",
        record.threshold, record.flagged, record.validation_size, record.flag_rate, target
    );
    println!("calibration -> {}", out_path.display());
    Ok(())
}

fn index_build(cli: &Cli, out: Option<&Path>) -> CliResult {
    let cfg = load_config(cli)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.embeddings.clone())
        .ok_or_else(|| data(anyhow!("pass --out or set `embeddings` in the config")))?;
    let featurizer = if cfg.model.exists() {
        checkpoint::load(&cfg.model).map_err(pipe)?.featurizer
    } else {
        cfg.training.featurizer.clone()
    };
    let corpus = load_corpus(&cfg.corpus).map_err(pipe)?;
    let pre = Preprocessor::new(featurizer)
        .map_err(pipe)?
        .with_synonyms(cfg.load_synonyms()?);
    let index = build_index(&corpus, &HashingEmbedder::new(pre), cfg.settings.retrieval.entry_text)
        .map_err(pipe)?;
    index.write(&out).map_err(pipe)?;
    println!("{} entries x {} dims -> {}", index.len(), index.dimension(), out.display());
    Ok(())
}

fn index_import(cli: &Cli, file: &Path, out: Option<&Path>) -> CliResult {
    let cfg = load_config(cli)?;
    if !file.exists() {
        return Err(data(anyhow!("missing embeddings file {}", file.display())));
    }
    let index = load_external_embeddings(file).map_err(pipe)?;
    let corpus = load_corpus(&cfg.corpus).map_err(pipe)?;
    let ids: std::collections::HashSet<&str> = corpus.iter().map(|e| e.id.as_str()).collect();
    let missing: Vec<&String> = index.ids().iter().filter(|id| !ids.contains(id.as_str())).collect();
    if !missing.is_empty() {
        return Err(data(anyhow!(
            "{} embedding id(s) not in the corpus, first: {}",
            missing.len(),
            missing[0]
        )));
    }
    let out = out.map(Path::to_path_buf).or_else(|| cfg.embeddings.clone());
    if let Some(out) = &out {
        index.write(out).map_err(pipe)?;
    }
    println!(
        "{} entries x {} dims validated{}",
        index.len(),
        index.dimension(),
        out.map(|p| format!(" -> {}", p.display())).unwrap_or_default()
    );
    if index.len() < corpus.len() {
        println!("note: {} corpus entries have no embedding and cannot be retrieved", corpus.len() - index.len());
    }
    Ok(())
}

fn evaluate_cmd(cli: &Cli, dataset: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = load_config(cli)?;
    let ds = load_dataset(&cfg, dataset)?;
    let mut cfg_no_queue = cfg.clone();
    cfg_no_queue.queue_journal = None;
    let system = System::from_config(&cfg_no_queue)?;
    let bundle = evaluate(&system, &ds, &cfg.training, &cfg.evaluation)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.evaluation.output_dir.clone());
    let files = write_reports(&bundle, &dir)?;
    print!("{}", std::fs::read_to_string(&files[1]).map_err(runtime)?);
    println!("reports -> {}", dir.display());
    Ok(())
}

fn read_record(json: &Path) -> Result<PatientRecord, Failure> {
    let text = if json == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(runtime)?;
        s
    } else {
        std::fs::read_to_string(json)
            .with_context(|| format!("reading {}", json.display()))
            .map_err(data)?
    };
    serde_json::from_str(&text).context("parsing patient record").map_err(data)
}

fn run_case(cli: &Cli) -> CliResult {
    let Command::RunCase {
        json,
        text,
        id,
        temperature,
        spo2,
        heart_rate,
        age,
        sex,
        reference,
    } = &cli.command
    else {
        unreachable!()
    };
    let record = match (json, text) {
        (Some(p), _) => read_record(p)?,
        (None, Some(t)) => {
            let sex = match sex {
                Some(s) => Some(Sex::parse(s).ok_or_else(|| data(anyhow!("unknown sex {s:?}")))?),
                None => None,
            };
            PatientRecord {
                id: id.clone().unwrap_or_else(default_case_id),
                symptom_text: t.clone(),
                vitals: Vitals {
                    temperature: *temperature,
                    spo2: *spo2,
                    heart_rate: *heart_rate,
                    age: *age,
                    sex,
                },
            }
        }
        (None, None) => return Err(data(anyhow!("pass --text or --json"))),
    };
    let cfg = load_config(cli)?;
    let system = System::from_config(&cfg)?;
    let outcome = system.run_case_with_reference(&record, reference.as_deref());
    println!("{}", serde_json::to_string_pretty(&outcome).map_err(runtime)?);
    match (&outcome.status, &outcome.failure) {
        (CaseStatus::Failed, Some(f)) if f.stage == Stage::Validate => {
            Err(data(anyhow!("case rejected: {}", f.message)))
        }
        (CaseStatus::Failed, Some(f)) => Err(runtime(anyhow!("stage {:?} failed: {}", f.stage, f.message))),
        _ => Ok(()),
    }
}

fn default_case_id() -> String {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    format!("cli-{ms}")
}

fn serve(cli: &Cli, addr: SocketAddr, token: Option<String>) -> CliResult {
    let cfg = load_config(cli)?;
    let system = System::from_config(&cfg)?;
    let app = safedx_server::AppState::new(system, token).map_err(|e| data(anyhow!(e)))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(safedx_server::serve(Arc::new(app), addr)).map_err(runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_are_distinguished_from_help() {
        let e = Cli::try_parse_from(["safedx", "no-such-command"]).err().unwrap();
        assert!(e.use_stderr());
        let e = Cli::try_parse_from(["safedx", "--help"]).err().unwrap();
        assert!(!e.use_stderr());
    }
}
