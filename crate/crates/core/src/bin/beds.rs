use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use beds::ensemble::{
    discover_grid_shape, ingest_external_masks, sample_subsets, train_stack, ModelStack, PredictConfig, Segmenter,
    TrainConfig,
};
use beds::harness::{
    ablation_sweep, gen_synthetic, load_dataset, load_images, predict_grid, report, run_pipeline, save_dataset,
    Datasets, ExperimentConfig, ExternalGrids, PipelineConfig, ResultTable, Strategy, SyntheticSpec,
};
use beds::image::{load_image, load_mask, save_image, save_mask};
use beds::metrics::{dsc, object_f1, DEFAULT_IOU_THRESHOLD};
use beds::rng::derive_seed;
use beds::stain::{fit_stain_model, normalize_stain, StainFitConfig, StainModel};
use beds::templates::{
    extract_corpus_features, ingest_embeddings, select_templates_with, FeatureKind, TemplateSet, DEFAULT_KMEANS_ITERS,
};
use beds::{MaskGrid, Topology};

#[derive(Parser)]
#[command(name = "beds", version, about = "Bagging-ensemble nuclei segmentation with stain augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic H&E-like dataset (images/ and masks/)
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// JSON synthetic spec; flags below override its fields
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prefix: Option<String>,
    },
    /// Stain model fitting and normalization
    Stain {
        #[command(subcommand)]
        command: StainCommand,
    },
    /// Style template selection
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
    /// Model stack training
    Ensemble {
        #[command(subcommand)]
        command: EnsembleCommand,
    },
    /// Predict grid/<image_id>/stain{p}_model{q}.png for every test image
    PredictGrid {
        #[arg(long)]
        stack: PathBuf,
        /// Directory of test images (or a dataset with images/)
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Directory holding <template_id>.json stain models
        #[arg(long)]
        template_stains: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Fuse mask grids with one topology
    Fuse {
        /// A grid root of per-image directories, or a single image directory
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "all")]
        topology: Topology,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou: f64,
    },
    /// Sweep ensemble sizes and strategies over a grid cache
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,9,15")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "beds,model-stain,stain-model,all")]
        strategies: Vec<Strategy>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize result CSVs against a baseline experiment
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline from a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum StainCommand {
    /// Fit a two-stain model to one image
    Fit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Re-render an image in a template's stain
    Normalize {
        #[arg(long)]
        image: PathBuf,
        /// Template stain model JSON
        #[arg(long)]
        template: PathBuf,
        /// Source stain model JSON; fitted when absent
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = beds::stain::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = beds::stain::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitArgs {
    fn config(&self) -> StainFitConfig {
        StainFitConfig { lambda: self.lambda, beta: self.beta, ..StainFitConfig::default() }
    }
}

#[derive(Subcommand)]
enum TemplatesCommand {
    /// Cluster a corpus and pick m representative images
    Select {
        /// Directory of images (or a dataset with images/)
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = beds::templates::DEFAULT_TEMPLATE_COUNT)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of externally computed embeddings: image_id, f1, f2, ...
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also fit and write one stain model per template here
        #[arg(long)]
        stain_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EnsembleCommand {
    /// Train n reference segmenters on random subsets
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 33)]
        n: usize,
        #[arg(long, default_value_t = beds::ensemble::DEFAULT_FRACTION)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON training hyperparameters
        #[arg(long)]
        hyper: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_synthetic_cmd(
    out: &Path,
    spec: Option<&Path>,
    images: Option<usize>,
    size: Option<usize>,
    seed: Option<u64>,
    prefix: Option<String>,
) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = images {
        spec.images = v;
    }
    if let Some(v) = size {
        spec.width = v;
        spec.height = v;
    }
    if let Some(v) = seed {
        spec.seed = v;
    }
    if let Some(v) = prefix {
        spec.id_prefix = v;
    }
    save_dataset(&gen_synthetic(&spec), out)?;
    Ok(())
}

fn templates_select(
    data: &Path,
    m: usize,
    seed: u64,
    embeddings: Option<&Path>,
    out: &Path,
    stain_dir: Option<&Path>,
) -> Result<()> {
    let images = load_images(data)?;
    let (features, kind) = match embeddings {
        Some(p) => (ingest_embeddings(p)?, FeatureKind::External),
        None => (extract_corpus_features(&images), FeatureKind::Builtin),
    };
    let set = select_templates_with(&features, m, seed, DEFAULT_KMEANS_ITERS, kind)?;
    set.save(out)?;
    if let Some(dir) = stain_dir {
        fs::create_dir_all(dir)?;
        for (t, id) in set.template_ids.iter().enumerate() {
            let (_, img) = images
                .iter()
                .find(|(i, _)| i == id)
                .with_context(|| format!("template {id} has no image in {}", data.display()))?;
            let model =
                fit_stain_model(img, &StainFitConfig::default(), derive_seed(seed, t as u64, "template-stain"))?;
            model.save(dir.join(format!("{id}.json")))?;
        }
    }
    println!("{}", set.template_ids.join("\n"));
    Ok(())
}

fn ensemble_train(
    train: &Path,
    val: &Path,
    n: usize,
    fraction: f64,
    seed: u64,
    hyper: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let hyper: TrainConfig = match hyper {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let pairs =
        |dir: &Path| -> Result<Vec<_>> { Ok(load_dataset(dir)?.into_iter().map(|s| (s.image, s.mask)).collect()) };
    let train = pairs(train)?;
    let val = pairs(val)?;
    let plan = sample_subsets(train.len(), n, fraction, seed)?;
    let stack = train_stack(&train, &val, &plan, &hyper)?;
    stack.save(out)?;
    for (q, score) in stack.selection_scores.iter().enumerate() {
        println!("model {q}: validation dsc {score:.4}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict_grid_cmd(
    stack: &Path,
    images: &Path,
    templates: Option<&Path>,
    template_stains: Option<&Path>,
    out: &Path,
    seed: u64,
    threshold: f64,
) -> Result<()> {
    let stack = ModelStack::load(stack)?;
    let template_models: Vec<StainModel> = match (templates, template_stains) {
        (None, _) => Vec::new(),
        (Some(_), None) => bail!("--templates needs --template-stains"),
        (Some(t), Some(dir)) => TemplateSet::load(t)?
            .template_ids
            .iter()
            .map(|id| StainModel::load(dir.join(format!("{id}.json"))))
            .collect::<beds::Result<_>>()?,
    };
    let images = load_images(images)?;
    let predict = PredictConfig { threshold, ..PredictConfig::default() };
    let models: Vec<&dyn Segmenter> = stack.segmenters();
    predict_grid(&images, &template_models, &models, None, &StainFitConfig::default(), &predict, seed, out)?;
    Ok(())
}

fn image_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if discover_grid_shape(root).is_ok() {
        let id = root.file_name().map_or("image".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(id, root.to_path_buf())]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push((path.file_name().unwrap().to_string_lossy().into_owned(), path));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("no grid masks under {}", root.display());
    }
    Ok(dirs)
}

fn fuse_cmd(grid: &Path, topology: Topology, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for (id, dir) in image_dirs(grid)? {
        let (stains, models) = discover_grid_shape(&dir)?;
        let grid: MaskGrid = ingest_external_masks(&dir, stains, models)?;
        save_mask(&topology.fuse(&grid)?, out.join(format!("{id}.png")))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    image_id: String,
    dsc: f64,
    f1: f64,
    precision: f64,
    recall: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

fn evaluate_cmd(pred: &Path, gt: &Path, out: Option<&Path>, iou: f64) -> Result<()> {
    let mut ids: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    let gt_dir = if gt.join("masks").is_dir() { gt.join("masks") } else { gt.to_path_buf() };
    let mut writer: csv::Writer<Box<dyn std::io::Write>> = match out {
        Some(p) => csv::Writer::from_writer(Box::new(fs::File::create(p)?)),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    for id in ids {
        let p = load_mask(pred.join(format!("{id}.png")))?;
        let g = load_mask(gt_dir.join(format!("{id}.png")))?;
        let score = object_f1(&p, &g, iou)?;
        writer.serialize(EvalRow {
            image_id: id,
            dsc: dsc(&p, &g)?,
            f1: score.f1,
            precision: score.precision,
            recall: score.recall,
            tp: score.matches.true_positives,
            fp: score.matches.false_positives,
            fn_: score.matches.false_negatives,
        })?;
    }
    writer.flush()?;
    Ok(())
}

fn ablate_cmd(grid: &Path, gt: &Path, n: &[usize], strategies: &[Strategy], seed: u64, out: &Path) -> Result<()> {
    let gt_dir = if gt.join("masks").is_dir() { gt.join("masks") } else { gt.to_path_buf() };
    let source = ExternalGrids::open(grid, gt_dir)?;
    let base = ExperimentConfig::new(beds::harness::ExperimentKind::Beds(1), seed);
    ablation_sweep(n, strategies, &base, &source)?.write_csv(out)?;
    Ok(())
}

fn report_cmd(results: &[PathBuf], baseline: &str, out: &Path) -> Result<()> {
    let mut table = ResultTable::default();
    for p in results {
        table.extend(ResultTable::read_csv(p)?);
    }
    let rep = report(&table, baseline)?;
    fs::create_dir_all(out)?;
    rep.write_summary_csv(out.join("summary.csv"))?;
    rep.write_plot_csv(out.join("plot.csv"))?;
    print!("{}", rep.to_markdown());
    Ok(())
}

fn run_cmd(config: &Path) -> Result<()> {
    let config = PipelineConfig::load(config)?;
    let paths = config.data.clone().context("config has no data paths")?;
    let data = Datasets::load(&paths)?;
    let out = config.output.clone().unwrap_or_else(|| PathBuf::from("beds-out"));
    let result = run_pipeline(&config, &data, Some(&out))?;
    print!("{}", result.report.to_markdown());
    Ok(())
}

fn stain_cmd(command: StainCommand) -> Result<()> {
    match command {
        StainCommand::Fit { image, out, fit } => {
            let model = fit_stain_model(&load_image(&image)?, &fit.config(), fit.seed)?;
            model.save(&out)?;
        }
        StainCommand::Normalize { image, template, source, out, fit } => {
            let img = load_image(&image)?;
            let template = StainModel::load(&template)?;
            let source = match source {
                Some(p) => StainModel::load(p)?,
                None => fit_stain_model(&img, &fit.config(), fit.seed)?,
            };
            save_image(&normalize_stain(&img, &source, &template)?, &out)?;
        }
    }
    Ok(())
}

fn dispatch(command: Command) -> (&'static str, Result<()>) {
    match command {
        Command::GenSynthetic { out, spec, images, size, seed, prefix } => {
            ("gen-synthetic", gen_synthetic_cmd(&out, spec.as_deref(), images, size, seed, prefix))
        }
        Command::Stain { command } => ("stain", stain_cmd(command)),
        Command::Templates { command: TemplatesCommand::Select { data, m, seed, embeddings, out, stain_dir } } => {
            ("templates select", templates_select(&data, m, seed, embeddings.as_deref(), &out, stain_dir.as_deref()))
        }
        Command::Ensemble { command: EnsembleCommand::Train { train, val, n, fraction, seed, hyper, out } } => {
            ("ensemble train", ensemble_train(&train, &val, n, fraction, seed, hyper.as_deref(), &out))
        }
        Command::PredictGrid { stack, images, templates, template_stains, out, seed, threshold } => (
            "predict-grid",
            predict_grid_cmd(&stack, &images, templates.as_deref(), template_stains.as_deref(), &out, seed, threshold),
        ),
        Command::Fuse { grid, topology, out } => ("fuse", fuse_cmd(&grid, topology, &out)),
        Command::Evaluate { pred, gt, out, iou } => ("evaluate", evaluate_cmd(&pred, &gt, out.as_deref(), iou)),
        Command::Ablate { grid, gt, n, strategies, seed, out } => {
            ("ablate", ablate_cmd(&grid, &gt, &n, &strategies, seed, &out))
        }
        Command::Report { results, baseline, out } => ("report", report_cmd(&results, &baseline, &out)),
        Command::Run { config } => ("run", run_cmd(&config)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (stage, result) = dispatch(Cli::parse().command);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in stage {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
