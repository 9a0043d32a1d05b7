//! The `spotlight` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spotlight_core::metrics::{
    top_attention_events, AttentionOptions, AttentionRecord, EvalReport,
};
use spotlight_core::model::{self, AttentionMask, MaskProjection, ModelConfig};
use spotlight_core::pathway::{
    build_vocabulary, group_pathways, render_image, DimensionConfig, InputImage, LabeledInput,
    PathwayImage, DEFAULT_WIDTH,
};
use spotlight_core::synth::{generate_cohort, sparsity_report, CohortSpec};
use spotlight_core::train::{self, split_dataset, EpochLog, TrainConfig, TrainError};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{read_json, read_remap, write_json, Dataset, Skipped};
use crate::error::{Error, Result};
use crate::ingest::{ingest_events, ColumnMap, RowError};
use crate::pwim;
use crate::render::{render_heatmap, RenderSpec, Zoom};

#[derive(Debug, Parser)]
#[command(
    name = "spotlight",
    version,
    about = "Pathway images, attention models and their evaluation"
)]
pub struct Cli {
    /// Seed for every random choice (overrides seeds in config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn an event CSV into a dataset directory of pathway images.
    Compose {
        #[arg(long)]
        events: PathBuf,
        /// JSON map from event fields to CSV column names.
        #[arg(long)]
        columns: PathBuf,
        #[arg(long)]
        dims: PathBuf,
        #[arg(long)]
        remap: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort with planted signals.
    Synth {
        /// Cohort spec JSON; a built-in three-class cohort when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of patients (overrides the spec).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model JSON; missing shape fields are taken from the data.
        #[arg(long)]
        model: PathBuf,
        /// Training JSON.
        #[arg(long)]
        train: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the condition sequence of one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        topk: usize,
        /// Compare raw mask values with the threshold (no max-normalization).
        #[arg(long)]
        absolute: bool,
        /// Evaluate every pathway, ignoring a split.json next to the checkpoint.
        #[arg(long)]
        all: bool,
    },
    /// Render an image (and optional attention mask) as PPM.
    Render {
        #[arg(long)]
        image: PathBuf,
        /// Prediction JSON or a {rows, cols, values} mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Decode step whose mask is drawn from a prediction JSON.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// `r0:r1,c0:c1`, half-open.
        #[arg(long)]
        zoom: Option<String>,
        /// Pixels per cell; 2 by default, 16 when zoomed.
        #[arg(long)]
        block: Option<usize>,
        /// Image row without attention (defaults to 1 for six-row images).
        #[arg(long)]
        condition_row: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed as one `error[kind]: …` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error:").trim();
            eprintln!("{}", Error::Usage(first.to_string()).one_line());
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.one_line());
            if e.kind() == crate::error::ErrorKind::Usage {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let log = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Compose {
            events,
            columns,
            dims,
            remap,
            width,
            out,
        } => compose(events, columns, dims, remap.as_deref(), *width, out, &log),
        Command::Synth { spec, n, out } => synth(spec.as_deref(), *n, cli.seed, out, &log),
        Command::Train {
            data,
            model,
            train,
            ckpt,
            resume,
        } => train_cmd(data, model, train, ckpt, resume.as_deref(), cli.seed, &log),
        Command::Predict { ckpt, image, out } => predict_cmd(ckpt, image, out),
        Command::Eval {
            ckpt,
            data,
            report,
            threshold,
            topk,
            absolute,
            all,
        } => {
            let options = AttentionOptions {
                threshold: *threshold,
                top_k: *topk,
                absolute: *absolute,
            };
            eval_cmd(ckpt, data, report, &options, *all, cli.quiet)
        }
        Command::Render {
            image,
            mask,
            step,
            zoom,
            block,
            condition_row,
            out,
        } => render_cmd(
            image,
            mask.as_deref(),
            *step,
            zoom.as_deref(),
            *block,
            *condition_row,
            out,
        ),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
struct ComposeErrors {
    rows: Vec<RowError>,
    pathways: Vec<Skipped>,
}

fn compose(
    events: &Path,
    columns: &Path,
    dims: &Path,
    remap: Option<&Path>,
    width: usize,
    out: &Path,
    log: &dyn Fn(String),
) -> Result<()> {
    let columns: ColumnMap = read_json(columns)?;
    let dims: DimensionConfig = read_json(dims)?;
    let remap = remap.map(read_remap).transpose()?;
    let file = fs::File::open(events).map_err(|e| Error::io(events, e))?;
    let ingested = ingest_events(std::io::BufReader::new(file), &columns, &dims)?;
    let vocab = build_vocabulary(&ingested.events, remap.as_ref());
    let mut images = Vec::new();
    let mut rejected = Vec::new();
    for pathway in group_pathways(ingested.events) {
        match render_image(&pathway, &vocab, &dims, width) {
            Ok(image) => images.push(image),
            Err(e) => rejected.push(Skipped {
                patient_id: pathway.patient_id().to_string(),
                reason: e.to_string(),
            }),
        }
    }
    create_dir(out)?;
    let dataset = Dataset {
        dims,
        vocab,
        images,
    };
    dataset.save(out)?;
    write_json(
        &out.join("row_errors.json"),
        &ComposeErrors {
            rows: ingested.row_errors,
            pathways: rejected,
        },
    )?;
    log(format!(
        "composed {} pathways over {} codes into {}",
        dataset.images.len(),
        dataset.vocab.len(),
        out.display()
    ));
    Ok(())
}

fn synth(
    spec: Option<&Path>,
    n: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    log: &dyn Fn(String),
) -> Result<()> {
    let mut spec = match spec {
        Some(path) => read_json(path)?,
        None => CohortSpec::planted(200, 0),
    };
    if let Some(n) = n {
        spec.n_patients = n;
    }
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let cohort = generate_cohort(&spec)?;
    let ratio = sparsity_report(&cohort.images, &cohort.dims)?;
    create_dir(out)?;
    let dataset = Dataset {
        dims: cohort.dims,
        vocab: cohort.vocab,
        images: cohort.images,
    };
    dataset.save(out)?;
    write_json(&out.join("manifest.json"), &cohort.manifest)?;
    write_json(&out.join("cohort.json"), &spec)?;
    log(format!(
        "generated {} pathways, {} planted cells, sparsity {ratio:.2} into {}",
        spec.n_patients,
        cohort.manifest.len(),
        out.display()
    ));
    Ok(())
}

/// Builds the model configuration from a JSON file whose shape fields may be
/// omitted. `"preset": "standard" | "tiny"` picks the base layer stack.
pub fn resolve_model_config(raw: &Value, dataset: &Dataset) -> Result<ModelConfig> {
    let Value::Object(fields) = raw else {
        return Err(Error::Config("model file must hold a JSON object".into()));
    };
    let classes = dataset.classes();
    let width = dataset
        .width()
        .ok_or_else(|| Error::Config("dataset has no images".into()))?;
    let (h, n, k) = (
        spotlight_core::pathway::DIMENSIONS - 1,
        dataset.vocab.len(),
        classes.num_classes(),
    );
    let base = match fields.get("preset").and_then(Value::as_str) {
        None | Some("standard") => ModelConfig::standard(h, width, n, k),
        Some("tiny") => ModelConfig::tiny(h, width, n, k),
        Some(other) => return Err(Error::Config(format!("unknown model preset {other:?}"))),
    };
    let mut merged = serde_json::to_value(ModelConfig {
        class_names: classes.names(),
        condition_row: dataset.dims.condition_row(),
        ..base
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let target = merged
        .as_object_mut()
        .expect("config serializes to an object");
    for (key, value) in fields {
        if key != "preset" {
            target.insert(key.clone(), value.clone());
        }
    }
    let config: ModelConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("model file: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn write_epochs_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "test_loss", "seq_accuracy"])
        .map_err(csv_err)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            opt(e.test_loss),
            opt(e.seq_accuracy()),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn train_cmd(
    data: &Path,
    model_file: &Path,
    train_file: &Path,
    ckpt_dir: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    log: &dyn Fn(String),
) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let config = resolve_model_config(&read_json(model_file)?, &dataset)?;
    let mut train_cfg: TrainConfig = read_json(train_file)?;
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;
    let (examples, skipped) = dataset.examples(config.max_len)?;
    if !skipped.is_empty() {
        log(format!("skipping {} unlabeled pathways", skipped.len()));
    }
    let (train_set, test_set) =
        split_dataset(&examples, train_cfg.train_fraction, train_cfg.seed, |e| {
            e.labels.clone()
        })?;

    let state = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.config != config {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            ck.into_train_state()
        }
        None => train::TrainState::new(model::ParameterSet::init(&config, train_cfg.seed)?),
    };
    let remaining = train_cfg.epochs.saturating_sub(state.epoch);
    create_dir(ckpt_dir)?;
    write_json(&ckpt_dir.join("model.json"), &config)?;
    let ids = |set: &[LabeledInput]| set.iter().map(|e| e.patient_id.clone()).collect();
    write_json(
        &ckpt_dir.join("split.json"),
        &SplitFile {
            train: ids(&train_set),
            test: ids(&test_set),
        },
    )?;

    let mut report = |e: &EpochLog| {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        log(format!(
            "epoch {:>4}  train_loss {:.5}  test_loss {}  train_acc {}  test_acc {}",
            e.epoch,
            e.train_loss,
            fmt(e.test_loss),
            fmt(e.train_accuracy),
            fmt(e.test_accuracy)
        ));
    };
    let outcome = match train::fit_observed(
        &config,
        &train_cfg,
        state,
        remaining,
        &train_set,
        &test_set,
        &mut report,
    ) {
        Ok(o) => o,
        Err(TrainError::Divergence {
            epoch,
            reason,
            last_good,
        }) => {
            checkpoint::save(
                &ckpt_dir.join("last.spot"),
                &Checkpoint::from_state(&config, &last_good),
            )?;
            return Err(Error::Train(TrainError::Divergence {
                epoch,
                reason,
                last_good,
            }));
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(
        &ckpt_dir.join("last.spot"),
        &Checkpoint::from_state(&config, &outcome.state),
    )?;
    let best = outcome
        .best
        .as_ref()
        .map_or(&outcome.state.params, |(_, p)| p);
    checkpoint::save(
        &ckpt_dir.join("best.spot"),
        &Checkpoint::weights_only(&config, best),
    )?;
    write_epochs_csv(&ckpt_dir.join("epochs.csv"), &outcome.log)?;
    log(format!("wrote checkpoints to {}", ckpt_dir.display()));
    Ok(())
}

/// Model input from a stored image: full images lose their condition row,
/// condition-free images pass through.
pub fn model_input(config: &ModelConfig, image: &PathwayImage) -> Result<InputImage> {
    let (h, w) = (image.height(), image.width());
    let rows: Vec<usize> = if h == config.input_height + 1 {
        (0..h).filter(|&r| r != config.condition_row).collect()
    } else if h == config.input_height {
        (0..h).collect()
    } else {
        return Err(Error::Dimension(format!(
            "image has {h} rows, model expects {} (or {} with the condition row)",
            config.input_height,
            config.input_height + 1
        )));
    };
    if w != config.input_width {
        return Err(Error::Dimension(format!(
            "image is {w} columns wide, model expects {}",
            config.input_width
        )));
    }
    Ok(InputImage {
        height: rows.len(),
        width: w,
        cells: rows
            .iter()
            .flat_map(|&r| image.row(r).iter().copied())
            .collect(),
    })
}

fn class_name(config: &ModelConfig, class: usize) -> String {
    config
        .class_names
        .get(class)
        .cloned()
        .unwrap_or_else(|| class.to_string())
}

pub fn prediction_json(
    config: &ModelConfig,
    patient_id: &str,
    result: &model::PredictionResult,
) -> Result<Value> {
    let classes = result.classes();
    let last = classes.len().saturating_sub(1);
    let steps: Vec<Value> = classes
        .iter()
        .zip(&result.distributions)
        .enumerate()
        .map(|(i, (&class, probs))| {
            let stop = (i == last).then_some(result.stop);
            json!({
                "class": class,
                "name": class_name(config, class),
                "probs": probs,
                "stop_reason": stop,
            })
        })
        .collect();
    let shape = result
        .masks
        .first()
        .map(|m| vec![m.rows, m.cols])
        .unwrap_or_default();
    Ok(json!({
        "patient_id": patient_id,
        "steps": steps,
        "masks": result.masks.iter().map(|m| &m.values).collect::<Vec<_>>(),
        "mask_shape": shape,
        "projection": MaskProjection::for_model(config)?,
    }))
}

fn predict_cmd(ckpt: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let image = pwim::read(image_path)?;
    let x = model_input(&ck.config, &image)?;
    let result = model::predict(&ck.config, &ck.params, &x)?;
    write_json(
        out,
        &prediction_json(&ck.config, &image.patient_id, &result)?,
    )
}

fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    report_path: &Path,
    options: &AttentionOptions,
    all: bool,
    quiet: bool,
) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let config = &ck.config;
    let dataset = Dataset::load(data)?;
    let (mut examples, _) = dataset.examples(config.max_len)?;
    let split_path = ckpt.parent().unwrap_or(Path::new(".")).join("split.json");
    if !all && split_path.exists() {
        let split: SplitFile = read_json(&split_path)?;
        examples.retain(|e| split.test.contains(&e.patient_id));
        if examples.is_empty() {
            return Err(Error::Config(format!(
                "none of the test pathways in {} are in {}",
                split_path.display(),
                data.display()
            )));
        }
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut masks: Vec<Vec<AttentionMask>> = Vec::with_capacity(examples.len());
    for ex in &examples {
        let result = model::predict(config, &ck.params, &ex.input)?;
        let classes = result.classes();
        let kept = classes
            .iter()
            .zip(&result.masks)
            .filter(|(&c, _)| c != config.end_class())
            .map(|(_, m)| m.clone())
            .collect();
        preds.push(classes);
        masks.push(kept);
    }
    let truths: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    let names: Vec<String> = (0..config.classes).map(|c| class_name(config, c)).collect();
    let mut report = EvalReport::build(&names, config.end_class(), &preds, &truths)?;
    let projection = MaskProjection::for_model(config)?;
    let records: Vec<AttentionRecord<'_>> = examples
        .iter()
        .zip(&masks)
        .map(|(e, m)| AttentionRecord {
            input: &e.input,
            masks: m,
            projection: &projection,
        })
        .collect();
    report.attention_events = top_attention_events(&records, &dataset.vocab, options)?;
    write_json(report_path, &report)?;
    let text = report.to_text();
    let text_path = report_path.with_extension("txt");
    fs::write(&text_path, &text).map_err(|e| Error::io(&text_path, e))?;
    if !quiet {
        let _ = std::io::stdout().write_all(text.as_bytes());
    }
    Ok(())
}

/// A mask from prediction JSON (with its projection) or a bare
/// `{rows, cols, values}` object.
fn load_mask(path: &Path, step: usize) -> Result<(AttentionMask, Option<MaskProjection>)> {
    let raw: Value = read_json(path)?;
    if raw.get("masks").is_some() {
        let shape: Vec<usize> =
            serde_json::from_value(raw["mask_shape"].clone()).map_err(|e| Error::json(path, e))?;
        let masks: Vec<Vec<f64>> =
            serde_json::from_value(raw["masks"].clone()).map_err(|e| Error::json(path, e))?;
        let values = masks.get(step).cloned().ok_or_else(|| {
            Error::Usage(format!(
                "step {step} out of range: prediction has {} masks",
                masks.len()
            ))
        })?;
        let [rows, cols] = shape[..] else {
            return Err(Error::Format(format!(
                "{}: mask_shape must have two entries",
                path.display()
            )));
        };
        let projection = match raw.get("projection") {
            Some(p) => Some(serde_json::from_value(p.clone()).map_err(|e| Error::json(path, e))?),
            None => None,
        };
        Ok((AttentionMask { rows, cols, values }, projection))
    } else {
        Ok((
            serde_json::from_value(raw).map_err(|e| Error::json(path, e))?,
            None,
        ))
    }
}

fn render_cmd(
    image_path: &Path,
    mask_path: Option<&Path>,
    step: usize,
    zoom: Option<&str>,
    block: Option<usize>,
    condition_row: Option<usize>,
    out: &Path,
) -> Result<()> {
    let image = pwim::read(image_path)?;
    let loaded = mask_path.map(|p| load_mask(p, step)).transpose()?;
    let zoom = zoom.map(Zoom::parse).transpose()?;
    let block = block.unwrap_or(if zoom.is_some() { 16 } else { 2 });
    let condition_row =
        condition_row.or((image.height() == spotlight_core::pathway::DIMENSIONS).then_some(1));
    let raster = render_heatmap(&RenderSpec {
        image: &image,
        mask: loaded.as_ref().map(|(m, _)| m),
        projection: loaded.as_ref().and_then(|(_, p)| p.as_ref()),
        condition_row,
        zoom,
        block,
    })?;
    fs::write(out, raster.to_ppm()).map_err(|e| Error::io(out, e))
}
