//! Command-line surface: dataset preparation, training, evaluation,
//! prediction, and the comparison harnesses (loss-weight sweep, component
//! ablations, edge-operator menu).
//!
//! [`run`] is the whole interface — `main` just hands it `argv` and exits
//! with its return value, which keeps every path testable in-process.
//! Exit codes: 0 success, 1 configuration/validation problems, 2 runtime
//! failures (I/O, non-finite losses).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use epps_core::checkpoint;
use epps_core::data::{Dataset, DatasetSplits, DEFAULT_RESOLUTION};
use epps_core::edges::{extract_edge_bits, EdgeKind, EdgeOperator};
use epps_core::error::{EppsError, Result};
use epps_core::model::Ablation;
use epps_core::train::{evaluate_model, train, TrainConfig};

#[derive(Parser)]
#[command(name = "epps", about = "Polyp segmentation: train, evaluate, and compare models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset folder, write its split manifest and edge maps.
    Prepare(PrepareArgs),
    /// Train one model into a run directory.
    Train(RunArgs),
    /// Score a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Segment a single image with a trained checkpoint.
    Predict(PredictArgs),
    /// Train every loss-weight combination in the 3x3 grid and tabulate.
    Sweep(RunArgs),
    /// Train the four component presets and tabulate.
    Ablate(RunArgs),
    /// Train once per edge operator and tabulate.
    Edges(RunArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    root: PathBuf,
    /// Operator whose edge maps go to root/edges_<operator>/.
    #[arg(long, default_value = "canny")]
    operator: String,
    /// Seed for the split shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    root: PathBuf,
    /// Where checkpoints, history, and tables are written.
    #[arg(long)]
    run_dir: PathBuf,
    /// JSON training config; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value config override (dotted keys reach nested fields, e.g.
    /// edge_operator.kind=sobel); repeatable, last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    root: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON training config (resolution, operator, threshold, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value config override; repeatable, last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (any PNG readable as RGB).
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the PNGs.
    #[arg(long)]
    out: PathBuf,
    /// Side length the image is resized to for the network.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Probability cutoff for the binary outputs.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write a 16-bit probability map.
    #[arg(long)]
    prob: bool,
}

/// Parses `argv` and executes the selected subcommand, returning the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Prepare(args) => prepare_cmd(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Eval(args) => eval_cmd(&args),
        Command::Predict(args) => predict_cmd(&args),
        Command::Sweep(args) => sweep_cmd(&args),
        Command::Ablate(args) => ablate_cmd(&args),
        Command::Edges(args) => edges_cmd(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Literal JSON values pass through (numbers, booleans); everything else is
/// taken as a string, so `backbone=tiny` works without quoting.
fn parse_override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// True when the dotted `key` names a field of the default config tree.
fn known_key(template: &serde_json::Value, key: &str) -> bool {
    let mut cur = template;
    for part in key.split('.') {
        match cur.as_object().and_then(|o| o.get(part)) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    true
}

/// Writes `value` at the dotted `key`. Only called for keys that passed
/// [`known_key`], so every intermediate node is an object.
fn set_key(root: &mut serde_json::Value, key: &str, value: serde_json::Value) {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("validated path")
            .get_mut(*part)
            .expect("validated path");
    }
    cur.as_object_mut()
        .expect("validated path")
        .insert(parts[parts.len() - 1].to_string(), value);
}

/// Assembles the effective config: defaults, then the config file's keys
/// (nested objects or flat dotted keys), then `--override` pairs in order.
fn load_config(config_path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let template = serde_json::to_value(TrainConfig::default())
        .map_err(|e| EppsError::json("encoding default config", e))?;
    let mut value = template.clone();
    if let Some(path) = config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| EppsError::io(format!("reading {}", path.display()), e))?;
        let file: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| EppsError::config(format!("parsing {}: {e}", path.display())))?;
        let obj = file.as_object().ok_or_else(|| {
            EppsError::config(format!("{} must hold a JSON object", path.display()))
        })?;
        for (key, val) in obj {
            if !known_key(&template, key) {
                return Err(EppsError::config(format!(
                    "unknown config key '{key}' in {}",
                    path.display()
                )));
            }
            set_key(&mut value, key, val.clone());
        }
    }
    for pair in overrides {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| EppsError::config(format!("override '{pair}' is not key=value")))?;
        if !known_key(&template, key) {
            return Err(EppsError::config(format!("unknown override key '{key}'")));
        }
        set_key(&mut value, key, parse_override_value(raw));
    }
    let config: TrainConfig = serde_json::from_value(value)
        .map_err(|e| EppsError::config(format!("invalid config value: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Opens the dataset at the config's resolution/operator and picks splits:
/// the `splits.json` manifest when present, a fresh seeded split otherwise.
fn open_dataset(root: &Path, config: &TrainConfig) -> Result<(Dataset, DatasetSplits)> {
    let dataset = Dataset::open(root, config.resolution, config.edge_operator)?;
    let manifest = root.join("splits.json");
    let splits = if manifest.exists() {
        let splits = DatasetSplits::load(&manifest)?;
        splits.validate(dataset.ids())?;
        splits
    } else {
        dataset.splits(config.seed)
    };
    Ok((dataset, splits))
}

/// The split the comparison harnesses score on: test when it has samples,
/// else val, else train.
fn scoring_ids(splits: &DatasetSplits) -> &[String] {
    if !splits.test.is_empty() {
        &splits.test
    } else if !splits.val.is_empty() {
        &splits.val
    } else {
        &splits.train
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| EppsError::io(format!("writing {}", path.display()), e))
}

fn metric_cells(report: &epps_core::metrics::MetricsReport) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6}",
        report.mdsc, report.miou, report.recall, report.precision
    )
}

fn prepare_cmd(args: &PrepareArgs) -> Result<()> {
    let kind: EdgeKind = args.operator.parse()?;
    let op = EdgeOperator::new(kind);
    // The resolution only parameterizes sample loading, which prepare never
    // does; edge maps are written at each mask's native resolution.
    let dataset = Dataset::open(&args.root, DEFAULT_RESOLUTION, op)?;
    let splits = dataset.splits(args.seed);
    splits.save(&args.root.join("splits.json"))?;

    let edges_dir = args.root.join(format!("edges_{}", kind.name()));
    fs::create_dir_all(&edges_dir)
        .map_err(|e| EppsError::io(format!("creating {}", edges_dir.display()), e))?;
    for id in dataset.ids() {
        let mask_path = args.root.join("masks").join(format!("{id}.png"));
        let mask = image::open(&mask_path)
            .map_err(|e| EppsError::image(format!("decoding {}", mask_path.display()), e))?
            .to_luma8();
        let (w, h) = mask.dimensions();
        let bits: Vec<u8> = mask.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
        let edge = extract_edge_bits(&bits, h as usize, w as usize, &op)?;
        let mut out = image::GrayImage::new(w, h);
        for (i, px) in out.pixels_mut().enumerate() {
            px.0[0] = edge[i] * 255;
        }
        let out_path = edges_dir.join(format!("{id}.png"));
        out.save(&out_path)
            .map_err(|e| EppsError::image(format!("writing {}", out_path.display()), e))?;
    }
    println!(
        "prepared {} samples ({} train / {} val / {} test); edge maps in {}",
        dataset.ids().len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        edges_dir.display()
    );
    Ok(())
}

fn train_cmd(args: &RunArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let (dataset, splits) = open_dataset(&args.root, &config)?;
    let (_, history) = train::<f32, _>(&config, &dataset, &splits, &args.run_dir)?;
    match history.best_epoch {
        Some(best) => {
            let record = &history.records[best - 1];
            let mdsc = record.val.map(|v| v.mdsc).unwrap_or(f64::NAN);
            println!(
                "trained {} epochs; best epoch {best} with val mDSC {mdsc:.4}; artifacts in {}",
                history.records.len(),
                args.run_dir.display()
            );
        }
        None => println!(
            "trained {} epochs (no validation split); artifacts in {}",
            history.records.len(),
            args.run_dir.display()
        ),
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let mut model = checkpoint::load_model::<f32>(&args.checkpoint)?;
    let (dataset, splits) = open_dataset(&args.root, &config)?;
    let ids = match args.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => {
            return Err(EppsError::config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    if ids.is_empty() {
        return Err(EppsError::config(format!("split '{}' has no samples", args.split)));
    }
    let report = evaluate_model(&mut model, &dataset, ids, config.threshold)?;
    println!("{report}");
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    if args.resolution == 0 || args.resolution % 32 != 0 {
        return Err(EppsError::config(format!(
            "resolution must be a positive multiple of 32, got {}",
            args.resolution
        )));
    }
    if !args.threshold.is_finite() || !(0.0..=1.0).contains(&args.threshold) {
        return Err(EppsError::config(format!(
            "threshold must be in [0, 1], got {}",
            args.threshold
        )));
    }
    let mut model = checkpoint::load_model::<f32>(&args.checkpoint)?;
    let paths = epps_core::train::predict(
        &mut model,
        &args.image,
        &args.out,
        args.resolution,
        args.threshold,
        args.prob,
    )?;
    println!("wrote {}", paths.mask.display());
    if let Some(edge) = &paths.edge {
        println!("wrote {}", edge.display());
    }
    if let Some(prob) = &paths.prob {
        println!("wrote {}", prob.display());
    }
    Ok(())
}

const SWEEP_VALUES: [f64; 3] = [1.0, 0.1, 0.01];

fn sweep_cmd(args: &RunArgs) -> Result<()> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let (dataset, splits) = open_dataset(&args.root, &base)?;
    let mut rows = Vec::with_capacity(SWEEP_VALUES.len() * SWEEP_VALUES.len());
    for alpha in SWEEP_VALUES {
        for beta in SWEEP_VALUES {
            let config = TrainConfig { alpha, beta, ..base.clone() };
            let cell_dir = args.run_dir.join(format!("alpha_{alpha}_beta_{beta}"));
            let (mut model, _) = train::<f32, _>(&config, &dataset, &splits, &cell_dir)?;
            let report =
                evaluate_model(&mut model, &dataset, scoring_ids(&splits), config.threshold)?;
            rows.push(format!("{alpha},{beta},{}", metric_cells(&report)));
        }
    }
    let csv = args.run_dir.join("sweep.csv");
    write_csv(&csv, "alpha,beta,mdsc,miou,recall,precision", &rows)?;
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

fn ablate_cmd(args: &RunArgs) -> Result<()> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let (dataset, splits) = open_dataset(&args.root, &base)?;
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let config = TrainConfig { ablation, ..base.clone() };
        let run_dir = args.run_dir.join(ablation.name());
        let (mut model, _) = train::<f32, _>(&config, &dataset, &splits, &run_dir)?;
        let report = evaluate_model(&mut model, &dataset, scoring_ids(&splits), config.threshold)?;
        rows.push(format!("{},{}", ablation.name(), metric_cells(&report)));
    }
    let csv = args.run_dir.join("ablate.csv");
    write_csv(&csv, "config,mdsc,miou,recall,precision", &rows)?;
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

fn edges_cmd(args: &RunArgs) -> Result<()> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let mut rows = Vec::with_capacity(EdgeKind::ALL.len());
    for kind in EdgeKind::ALL {
        let config = TrainConfig {
            edge_operator: EdgeOperator { kind, ..base.edge_operator },
            ..base.clone()
        };
        // Reopen per operator: the edge targets change with the stencil.
        let (dataset, splits) = open_dataset(&args.root, &config)?;
        let run_dir = args.run_dir.join(kind.name());
        let (mut model, _) = train::<f32, _>(&config, &dataset, &splits, &run_dir)?;
        let report = evaluate_model(&mut model, &dataset, scoring_ids(&splits), config.threshold)?;
        rows.push(format!("{},{}", kind.name(), metric_cells(&report)));
    }
    let csv = args.run_dir.join("edges.csv");
    write_csv(&csv, "operator,mdsc,miou,recall,precision", &rows)?;
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override_value("0.5"), serde_json::json!(0.5));
        assert_eq!(parse_override_value("8"), serde_json::json!(8));
        assert_eq!(parse_override_value("true"), serde_json::json!(true));
        assert_eq!(parse_override_value("tiny"), serde_json::json!("tiny"));
    }

    #[test]
    fn dotted_keys_are_validated_against_the_config_tree() {
        let template = serde_json::to_value(TrainConfig::default()).unwrap();
        assert!(known_key(&template, "lr"));
        assert!(known_key(&template, "edge_operator.kind"));
        assert!(!known_key(&template, "learning_rate"));
        assert!(!known_key(&template, "edge_operator.sigma"));
        assert!(!known_key(&template, "lr.nested"));
    }

    #[test]
    fn overrides_apply_last_wins_and_round_trip() {
        let config = load_config(
            None,
            &[
                "backbone=tiny".into(),
                "lr=0.5".into(),
                "lr=0.25".into(),
                "edge_operator.kind=sobel".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.lr, 0.25);
        assert_eq!(config.edge_operator.kind, EdgeKind::Sobel);

        // The echoed JSON reproduces the same config with no overrides.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let reloaded = load_config(Some(&path), &[]).unwrap();
        assert_eq!(reloaded, config);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_validation_errors() {
        let err = load_config(None, &["learning_rate=1".into()]).err().unwrap();
        assert!(err.is_validation());
        let err = load_config(None, &["lr=abc".into()]).err().unwrap();
        assert!(err.is_validation());
        let err = load_config(None, &["lr".into()]).err().unwrap();
        assert!(err.is_validation());
        // A config whose values fail domain validation is also caught.
        let err = load_config(None, &["resolution=100".into()]).err().unwrap();
        assert!(err.is_validation());
    }
}
