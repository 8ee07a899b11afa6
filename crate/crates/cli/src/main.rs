//! Command-line interface: train, evaluate, predict, gradient-check and
//! synthesize data for the MSSTRN forecasting model.
//!
//! All state lives in two JSON artifacts: the config file (model + train +
//! synth sections, unknown keys rejected) and checkpoints (config + every
//! parameter, bit-exact in double precision).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use msstrn_core::data::{
    chrono_split, load_series, synth_generate, window_split, write_series_csv, SampleSet,
    TrafficSeries,
};
use msstrn_core::gradcheck::{default_check_config, model_grad_check};
use msstrn_core::model::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig};
use msstrn_core::params::ParameterStore;
use msstrn_core::train::{evaluate, export_predictions, train, EvalReport, TrainConfig};

#[derive(Parser)]
#[command(
    name = "msstrn",
    about = "Multi-scale spatial-temporal recurrent network for traffic flow forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + history to the output directory
    Train {
        /// JSON config with optional "model", "train" and "synth" sections
        #[arg(long)]
        config: PathBuf,
        /// CSV path, or the literal "synth" for the generated dataset
        #[arg(long)]
        data: String,
        /// Output directory for checkpoint.json and history.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
    },
    /// Export test-split predictions of a checkpoint as CSV
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full-model gradient check and print the max relative error
    Gradcheck {
        /// Optional config; without a "model" section the built-in small
        /// verification shape is used
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic flow series CSV
    Synth {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        coupling: f64,
        #[arg(long = "noise-std", default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_synth_nodes() -> usize {
    8
}
fn default_synth_length() -> usize {
    2000
}
fn default_synth_coupling() -> f64 {
    0.5
}
fn default_synth_noise() -> f64 {
    0.05
}
fn default_synth_seed() -> u64 {
    1
}

#[derive(Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    #[serde(default = "default_synth_nodes")]
    nodes: usize,
    #[serde(default = "default_synth_length")]
    length: usize,
    #[serde(default = "default_synth_coupling")]
    coupling: f64,
    #[serde(default = "default_synth_noise")]
    noise_std: f64,
    #[serde(default = "default_synth_seed")]
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: default_synth_nodes(),
            length: default_synth_length(),
            coupling: default_synth_coupling(),
            noise_std: default_synth_noise(),
            seed: default_synth_seed(),
        }
    }
}

/// The config file: every section optional, unknown keys rejected at every
/// level. The model section may omit n_nodes, which is then taken from the
/// dataset.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<serde_json::Value>,
    #[serde(default)]
    train: Option<serde_json::Value>,
    #[serde(default)]
    synth: Option<SynthConfig>,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::FAILURE
}

fn read_config(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

/// Resolves the model section against the dataset's node count.
fn resolve_model_config(
    section: Option<serde_json::Value>,
    n_nodes: usize,
) -> Result<ModelConfig, String> {
    let mut value = section.unwrap_or_else(|| serde_json::json!({}));
    let obj = value
        .as_object_mut()
        .ok_or_else(|| "config: model section must be an object".to_string())?;
    match obj.get("n_nodes") {
        None => {
            obj.insert("n_nodes".into(), serde_json::json!(n_nodes));
        }
        Some(v) => {
            if v.as_u64() != Some(n_nodes as u64) {
                return Err(format!(
                    "config: model.n_nodes = {v} but the dataset has {n_nodes} nodes"
                ));
            }
        }
    }
    let cfg: ModelConfig =
        serde_json::from_value(value).map_err(|e| format!("config: model section: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn resolve_train_config(section: Option<serde_json::Value>) -> Result<TrainConfig, String> {
    let cfg: TrainConfig = match section {
        None => TrainConfig::default(),
        Some(v) => serde_json::from_value(v).map_err(|e| format!("config: train section: {e}"))?,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn load_data(spec: &str, synth: &SynthConfig) -> Result<TrafficSeries, String> {
    if spec == "synth" {
        synth_generate(
            synth.nodes,
            synth.length,
            synth.coupling,
            synth.noise_std,
            synth.seed,
        )
        .map_err(|e| e.to_string())
    } else {
        load_series(Path::new(spec)).map_err(|e| e.to_string())
    }
}

fn split_for(
    series: &TrafficSeries,
    cfg: &ModelConfig,
) -> Result<(SampleSet, SampleSet, SampleSet), String> {
    let windows = window_split(series, cfg.input_len, cfg.horizon).map_err(|e| e.to_string())?;
    chrono_split(&windows, (0.6, 0.2, 0.2)).map_err(|e| e.to_string())
}

fn print_metrics_line(label: &str, m: &msstrn_core::train::MetricsRecord) {
    match m.mape {
        Some(p) => println!("{label}: MAE {:.4}  RMSE {:.4}  MAPE {:.2}%", m.mae, m.rmse, p),
        None => println!("{label}: MAE {:.4}  RMSE {:.4}  MAPE n/a", m.mae, m.rmse),
    }
}

fn print_report(report: &EvalReport) {
    print_metrics_line("overall", &report.overall);
    for (i, step) in report.per_step.iter().enumerate() {
        print_metrics_line(&format!("step {:>2}", i + 1), step);
    }
    println!("samples: {}", report.n_samples);
}

fn checkpoint_and_data(
    checkpoint: &Path,
    data: &str,
) -> Result<(Model, ParameterStore, SampleSet), String> {
    let (model, store) = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    let series = load_data(data, &SynthConfig::default())?;
    if series.n_nodes != model.cfg.n_nodes {
        return Err(format!(
            "dataset has {} nodes, checkpoint expects {}",
            series.n_nodes, model.cfg.n_nodes
        ));
    }
    let (_, _, test) = split_for(&series, &model.cfg)?;
    Ok((model, store, test))
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Train { config, data, out } => {
            let file = read_config(&config)?;
            let synth = file.synth.clone().unwrap_or_default();
            let series = load_data(&data, &synth)?;
            let model_cfg = resolve_model_config(file.model, series.n_nodes)?;
            let train_cfg = resolve_train_config(file.train)?;
            let (train_set, val_set, test_set) = split_for(&series, &model_cfg)?;

            let (model, mut store) = build_model(&model_cfg).map_err(|e| e.to_string())?;
            let history = train(&model, &mut store, &train_set, &val_set, &train_cfg)
                .map_err(|e| e.to_string())?;

            std::fs::create_dir_all(&out).map_err(|e| format!("out {}: {e}", out.display()))?;
            let ckpt_path = out.join("checkpoint.json");
            save_checkpoint(&ckpt_path, &model_cfg, &store).map_err(|e| e.to_string())?;
            let history_json = serde_json::to_string_pretty(&history)
                .map_err(|e| format!("history: {e}"))?;
            std::fs::write(out.join("history.json"), history_json)
                .map_err(|e| format!("history: {e}"))?;

            println!(
                "trained {} epochs ({}), best epoch {} with val MAE {:.4}",
                history.epochs.len(),
                history.stop_reason,
                history.best_epoch,
                history.best_val_mae
            );
            if !test_set.is_empty() {
                let report = evaluate(&model, &store, &test_set).map_err(|e| e.to_string())?;
                print_metrics_line("test", &report.overall);
            }
            println!("checkpoint: {}", ckpt_path.display());
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let (model, store, test) = checkpoint_and_data(&checkpoint, &data)?;
            let report = evaluate(&model, &store, &test).map_err(|e| e.to_string())?;
            print_report(&report);
            Ok(())
        }
        Command::Predict {
            checkpoint,
            data,
            out,
        } => {
            let (model, store, test) = checkpoint_and_data(&checkpoint, &data)?;
            export_predictions(&model, &store, &test, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} rows to {}",
                test.m * test.horizon * test.n_nodes,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                None => default_check_config(),
                Some(path) => {
                    let file = read_config(&path)?;
                    match file.model {
                        None => default_check_config(),
                        Some(section) => {
                            // without n_nodes the built-in check shape applies
                            let fallback = default_check_config().n_nodes;
                            resolve_model_config(Some(section), fallback)?
                        }
                    }
                }
            };
            let report = model_grad_check(&cfg).map_err(|e| e.to_string())?;
            for (name, err) in &report.per_param {
                println!("{name}: {err:.3e}");
            }
            println!(
                "max relative error: {:.3e} ({})",
                report.max_rel_err, report.worst_param
            );
            if report.max_rel_err < 1e-4 {
                println!("gradcheck: PASS (< 1e-4)");
                Ok(())
            } else {
                Err(format!(
                    "gradcheck failed: {:.3e} >= 1e-4",
                    report.max_rel_err
                ))
            }
        }
        Command::Synth {
            nodes,
            length,
            seed,
            coupling,
            noise_std,
            out,
        } => {
            let series =
                synth_generate(nodes, length, coupling, noise_std, seed).map_err(|e| e.to_string())?;
            write_series_csv(&series, &out).map_err(|e| e.to_string())?;
            println!("wrote {length} steps x {nodes} nodes to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => fail(msg),
    }
}
