//! Command-line front end: dataset generation, training, prediction,
//! evaluation and field/architecture inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use cytoparc::arch::{count_parameters, receptive_field, ArchitectureConfig, REFERENCE_PARAMETER_COUNT, REFERENCE_RECEPTIVE_FIELD};
use cytoparc::cortexfield::{field_to_rgb, gradient, orientation_to_rgb, solve_laplace, LaplaceOptions};
use cytoparc::dataset::{read_json, write_json, Dataset, Split};
use cytoparc::net::Model;
use cytoparc::pipeline::{
    evaluate, prepare, train, train_gmwm_two_step, GmwmConfig, Orientation, PatchPredictor, PreparedSection, Task,
    TrainConfig,
};
use cytoparc::raster::{matrix_heatmap, overlay, read_pgm, write_pgm, write_ppm};
use cytoparc::synthgen::{generate_dataset, DatasetSpec, SynthConfig};
use cytoparc::{Error, Tensor};

#[derive(Parser)]
#[command(name = "cytoparc", version, about = "Atlas-aware cortical area segmentation on synthetic histology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Arch {
    Base,
    AtlasAware,
    Gmwm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scale {
    Canonical,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        sections: usize,
        #[arg(long, default_value_t = 4)]
        styles: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Generator settings (JSON); the benchmark layout otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a base or atlas-aware area model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "atlas-aware")]
        arch: Arch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training settings (JSON); missing fields take the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Leave this brain style out of training.
        #[arg(long)]
        hold_out_style: Option<usize>,
    },
    /// Two-step gray/white matter segmentation.
    TrainGmwm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Iterations per step.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Label sections with a trained model (stride-8 PGM + overlay PPM).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score saved predictions against the dataset ground truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Laplace field and orientation images for one section.
    Laplace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        section: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Receptive field, output stride and parameter count of an architecture.
    Inspect {
        #[arg(long, value_enum, default_value = "base")]
        arch: Arch,
        #[arg(long, value_enum, default_value = "canonical")]
        config: Scale,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        areas: usize,
    },
}

/// Bad input from the user: exit code 1. Everything else exits with 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Invalid(_) | Error::Shape(_) | Error::Architecture(_) | Error::Format(_) | Error::Json(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn must_exist(p: &Path, what: &str) -> anyhow::Result<()> {
    if !p.exists() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn load_config<T: DeserializeOwned>(path: &Option<PathBuf>) -> anyhow::Result<Option<T>> {
    let Some(p) = path else { return Ok(None) };
    must_exist(p, "config")?;
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).map(Some).map_err(|e| invalid(format!("config {}: {e}", p.display())))
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    must_exist(dir, "dataset")?;
    Ok(Dataset::load(dir)?)
}

fn versions() -> Value {
    json!({ "cytoparc": env!("CARGO_PKG_VERSION") })
}

fn run(cmd: Command) -> anyhow::Result<Value> {
    match cmd {
        Command::Generate { out, sections, styles, seed, config } => {
            let synth = load_config::<SynthConfig>(&config)?.unwrap_or_else(SynthConfig::benchmark);
            let spec = DatasetSpec { sections, styles, seed, synth };
            let ds = generate_dataset(&spec)?;
            ds.save(&out)?;
            log::info!("wrote {} sections to {}", ds.sections.len(), out.display());
            Ok(json!({ "command": "generate", "out": out, "sections": ds.sections.len(), "seed": seed }))
        }
        Command::Train { data, out, arch, seed, config, iterations, hold_out_style } => {
            let ds = load_dataset(&data)?;
            let mut cfg = load_config::<TrainConfig>(&config)?.unwrap_or_else(TrainConfig::desk);
            cfg.seed = seed;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let config = match arch {
                Arch::Base => ArchitectureConfig::desk_base(ds.classes()),
                Arch::AtlasAware => ArchitectureConfig::desk_atlas_aware(ds.classes(), ds.area_names.len()),
                Arch::Gmwm => return Err(invalid("use train-gmwm for the tissue model")),
            };
            let sections: Vec<PreparedSection> = (0..ds.sections.len())
                .filter(|&i| ds.splits[i] == Split::Train && Some(ds.sections[i].meta.style_index) != hold_out_style)
                .map(|i| prepare(&ds.sections[i], Task::Areas, arch == Arch::AtlasAware, cfg.orientation == Orientation::Corrected))
                .collect::<cytoparc::Result<_>>()?;
            let mut model = Model::new(&config, seed)?;
            let log = train(&mut model, &sections, &cfg)?;
            let extra = json!({
                "train": cfg, "task": Task::Areas, "dataset": data, "dataset_seed": ds.seed,
                "hold_out_style": hold_out_style, "versions": versions(),
            });
            model.save(&out, &model.manifest(&ds.class_names(), seed, extra)?)?;
            log.write_csv(out.join("curve.csv"))?;
            let (first, last) = log.head_tail_means(100);
            Ok(json!({ "command": "train", "out": out, "seed": seed, "loss_first": first, "loss_last": last }))
        }
        Command::TrainGmwm { data, out, seed, config, iterations } => {
            let ds = load_dataset(&data)?;
            let mut cfg = load_config::<GmwmConfig>(&config)?.unwrap_or_default();
            if let Some(n) = iterations {
                cfg.step1.iterations = n;
                cfg.step2.iterations = n;
            }
            let outcome = train_gmwm_two_step(&ds.split(Split::Train), &cfg, seed)?;
            let extra = |step: &TrainConfig, task: Task| {
                json!({ "train": step, "gmwm": cfg, "task": task, "dataset": data, "dataset_seed": ds.seed, "versions": versions() })
            };
            let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            let cortex = &outcome.cortex;
            cortex.save(
                out.join("cortex"),
                &cortex.manifest(&names(&["cortex", "other"]), seed, extra(&cfg.step1, Task::CortexBackground))?,
            )?;
            let tissue = &outcome.tissue;
            tissue.save(out.join("tissue"), &tissue.manifest(&names(&["gm", "wm", "bg"]), seed, extra(&cfg.step2, Task::Tissue))?)?;
            outcome.cortex_log.write_csv(out.join("cortex").join("curve.csv"))?;
            outcome.tissue_log.write_csv(out.join("tissue").join("curve.csv"))?;
            Ok(json!({ "command": "train-gmwm", "out": out, "seed": seed }))
        }
        Command::Predict { model, data, out, split } => predict(&model, &data, &out, split),
        Command::Evaluate { predictions, data, out } => evaluate_saved(&predictions, &data, &out),
        Command::Laplace { data, section, out } => {
            let ds = load_dataset(&data)?;
            let s = ds
                .sections
                .iter()
                .find(|s| s.meta.name == section)
                .ok_or_else(|| invalid(format!("no section named {section}")))?;
            let tissue = s.segmask.as_ref().ok_or_else(|| invalid(format!("section {section} has no tissue mask")))?;
            let opts = LaplaceOptions::default();
            let field = solve_laplace(tissue, &opts)?;
            std::fs::create_dir_all(&out)?;
            write_ppm(out.join("field.ppm"), &field_to_rgb(&field))?;
            write_ppm(out.join("orientation.ppm"), &orientation_to_rgb(&gradient(&field)))?;
            let (h, w) = field.values.dims();
            Tensor::new(&[h, w], field.values.data().iter().map(|&v| v as f32).collect())?.save(out.join("field.ptnsr"))?;
            write_json(
                out.join("manifest.json"),
                &json!({
                    "command": "laplace", "dataset": data, "dataset_seed": ds.seed, "section": section,
                    "section_seed": s.meta.seed, "omega": opts.omega, "tol": opts.tol, "max_iter": opts.max_iter,
                    "iterations": field.iterations, "residual": field.residual, "versions": versions(),
                }),
            )?;
            Ok(json!({ "command": "laplace", "out": out, "iterations": field.iterations, "residual": field.residual }))
        }
        Command::Inspect { arch, config, classes, areas } => {
            let cfg = match (arch, config) {
                (Arch::Base, Scale::Canonical) => ArchitectureConfig::canonical_base(classes),
                (Arch::Base, Scale::Desk) => ArchitectureConfig::desk_base(classes),
                (Arch::AtlasAware, Scale::Canonical) => ArchitectureConfig::canonical_atlas_aware(classes, areas),
                (Arch::AtlasAware, Scale::Desk) => ArchitectureConfig::desk_atlas_aware(classes, areas),
                (Arch::Gmwm, Scale::Canonical) => ArchitectureConfig::canonical_base(3),
                (Arch::Gmwm, Scale::Desk) => ArchitectureConfig::desk_base(3),
            };
            let (rf, stride) = receptive_field(&cfg)?;
            let params = count_parameters(&cfg)?;
            log::info!("receptive field {rf} px (reference {REFERENCE_RECEPTIVE_FIELD}), stride {stride}, {params} parameters (reference {REFERENCE_PARAMETER_COUNT})");
            Ok(json!({
                "command": "inspect", "name": cfg.name, "receptive_field": rf, "output_stride": stride,
                "parameter_count": params, "size_multiple": cfg.size_multiple(),
                "reference_receptive_field": REFERENCE_RECEPTIVE_FIELD, "reference_parameter_count": REFERENCE_PARAMETER_COUNT,
            }))
        }
    }
}

fn split_indices(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    (0..ds.sections.len())
        .filter(|&i| match split {
            SplitArg::Train => ds.splits[i] == Split::Train,
            SplitArg::Test => ds.splits[i] == Split::Test,
            SplitArg::All => true,
        })
        .collect()
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

/// Sections of the dataset prepared the way the model was trained.
fn prepared_for(ds: &Dataset, idx: &[usize], task: Task, atlas: bool, orientation: Orientation) -> anyhow::Result<Vec<PreparedSection>> {
    Ok(idx
        .iter()
        .map(|&i| prepare(&ds.sections[i], task, atlas, orientation == Orientation::Corrected))
        .collect::<cytoparc::Result<_>>()?)
}

fn predict(model_dir: &Path, data: &Path, out: &Path, split: SplitArg) -> anyhow::Result<Value> {
    must_exist(model_dir, "model")?;
    let (model, manifest) = Model::load(model_dir)?;
    let ds = load_dataset(data)?;
    let train: TrainConfig = serde_json::from_value(manifest.extra["train"].clone()).unwrap_or_default();
    let task: Task = serde_json::from_value(manifest.extra["task"].clone()).unwrap_or(Task::Areas);
    if task == Task::Areas && manifest.class_names != ds.class_names() {
        return Err(invalid("model classes do not match the dataset"));
    }
    // tissue models see unrotated patches
    let orientation = if task == Task::Areas { train.orientation } else { Orientation::None };
    let idx = split_indices(&ds, split);
    let sections = prepared_for(&ds, &idx, task, model.has_atlas(), orientation)?;
    let predictor = PatchPredictor::new(&model, train.patch_size, orientation);
    let eval = evaluate(&predictor, &sections, &manifest.class_names)?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for ((&i, s), pred) in idx.iter().zip(&sections).zip(&eval.predictions) {
        write_pgm(out.join(format!("{}.labels.pgm", s.name)), pred)?;
        write_ppm(out.join(format!("{}.overlay.ppm", s.name)), &overlay(&ds.sections[i].image, pred, 0.45)?)?;
        names.push(s.name.clone());
    }
    write_json(
        out.join("manifest.json"),
        &json!({
            "command": "predict", "model": model_dir, "model_seed": manifest.seed, "train": train,
            "dataset": data, "dataset_seed": ds.seed, "split": split_name(split), "task": task,
            "orientation": orientation, "patch": train.patch_size, "class_names": manifest.class_names,
            "sections": names, "versions": versions(),
        }),
    )?;
    Ok(json!({ "command": "predict", "out": out, "sections": names.len(), "mean_dice": eval.report.mean_dice, "eps": eval.report.eps }))
}

fn evaluate_saved(pred_dir: &Path, data: &Path, out: &Path) -> anyhow::Result<Value> {
    must_exist(pred_dir, "predictions")?;
    let meta: Value = read_json(pred_dir.join("manifest.json"))?;
    let ds = load_dataset(data)?;
    let task: Task = serde_json::from_value(meta["task"].clone()).map_err(|e| invalid(format!("prediction manifest: {e}")))?;
    let class_names: Vec<String> = serde_json::from_value(meta["class_names"].clone()).map_err(|e| invalid(format!("prediction manifest: {e}")))?;
    let names: Vec<String> = serde_json::from_value(meta["sections"].clone()).map_err(|e| invalid(format!("prediction manifest: {e}")))?;
    let mut idx = Vec::new();
    for n in &names {
        match ds.sections.iter().position(|s| &s.meta.name == n) {
            Some(i) => idx.push(i),
            None => bail!(invalid(format!("section {n} is not in the dataset"))),
        }
    }
    let sections = prepared_for(&ds, &idx, task, false, Orientation::None)?;
    let from_files = |s: &PreparedSection| read_pgm(pred_dir.join(format!("{}.labels.pgm", s.name)));
    let eval = evaluate(&from_files, &sections, &class_names)?;
    std::fs::create_dir_all(out)?;
    write_json(out.join("report.json"), &eval.report)?;
    write_ppm(out.join("confusion.ppm"), &matrix_heatmap(&eval.report.confusion.counts, 16))?;
    write_json(
        out.join("manifest.json"),
        &json!({
            "command": "evaluate", "predictions": pred_dir, "model_seed": meta["model_seed"],
            "dataset": data, "dataset_seed": ds.seed, "sections": names, "versions": versions(),
        }),
    )?;
    let r = &eval.report;
    log::info!("mean Dice {:.4}, eps {:.3} over {} sections", r.mean_dice, r.eps, names.len());
    Ok(json!({ "command": "evaluate", "out": out, "mean_dice": r.mean_dice, "eps": r.eps, "per_class_dice": r.per_class_dice }))
}
