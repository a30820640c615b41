//! Argument resolution and execution for every subcommand.
//!
//! Each command follows the same shape: clap arguments plus an optional
//! `key=value` config file resolve into a fully concrete, serializable run
//! description; execution is a function of that description alone, which is
//! what makes `rerun` and byte-identical reproduction possible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use milrank::data::{
    load_bag_csv, load_mnist_idx, make_mnist_bags, materialize_bags, BagIndices,
};
use milrank::eval::{auc_roc, run_cv, train_normalized};
use milrank::mil::{empirical_risk, TrainConfig};
use milrank::model::ModelSpec;
use milrank::{Error, MilDataset, Result, TrainedModel};

use crate::config::ConfigFile;
use crate::manifest::{manifest_path_for, DataProvenance, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Single neuron with linear activation.
    Linear,
    /// One tanh hidden layer as wide as the input, linear output.
    Mlp,
    /// Two-conv-layer network for 1x28x28 image bags.
    Cnn,
}

impl Arch {
    fn spec_for(self, dataset: &MilDataset) -> Result<ModelSpec> {
        let shape = dataset.instance_shape();
        match self {
            Arch::Linear | Arch::Mlp => {
                if shape.len() != 1 {
                    return Err(Error::Usage(format!(
                        "arch {self:?} needs flat feature vectors, dataset has instance shape {shape:?}"
                    )));
                }
                let d = shape[0];
                Ok(match self {
                    Arch::Linear => ModelSpec::SingleLinear { input_dim: d },
                    _ => ModelSpec::OneHiddenTanh { input_dim: d },
                })
            }
            Arch::Cnn => {
                if shape != [1, 28, 28] {
                    return Err(Error::Usage(format!(
                        "arch cnn needs 1x28x28 image bags, dataset has instance shape {shape:?}"
                    )));
                }
                Ok(ModelSpec::MnistCnn)
            }
        }
    }
}

/// Image-bag set written by `mnist-bags`: bags as indices into an IDX image
/// pool rather than embedded pixels.
#[derive(Debug, Serialize, Deserialize)]
pub struct BagSetManifest {
    pub images: String,
    pub labels: String,
    pub bags: Vec<BagIndices>,
}

/// Stored paths are tried as given first, then relative to the referencing
/// file's directory.
fn resolve_near(reference: &Path, stored: &str) -> PathBuf {
    let p = PathBuf::from(stored);
    if p.is_absolute() || p.exists() {
        return p;
    }
    match reference.parent() {
        Some(dir) => dir.join(stored),
        None => p,
    }
}

/// Loads either a bag CSV or an image-bag JSON manifest, judged by the
/// `.json` extension.
fn load_dataset(path: &Path) -> Result<MilDataset> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: BagSetManifest =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let pool = load_mnist_idx(
            resolve_near(path, &manifest.images),
            resolve_near(path, &manifest.labels),
        )?;
        materialize_bags(&pool, &manifest.bags, path.display().to_string())
    } else {
        load_bag_csv(path)
    }
}

fn write_with_parents(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn resolve_train_config(
    cfg: &ConfigFile,
    spec: &ModelSpec,
    dataset: &MilDataset,
    flags: &TrainFlags,
) -> Result<TrainConfig> {
    let seed = cfg.resolve(flags.seed, "seed", 0)?;
    let defaults = TrainConfig::defaults_for(
        spec,
        dataset.num_positive(),
        dataset.num_negative(),
        seed,
    );
    let config = TrainConfig {
        pairs_per_epoch: cfg.resolve(
            flags.pairs_per_epoch,
            "pairs-per-epoch",
            defaults.pairs_per_epoch,
        )?,
        epochs: cfg.resolve(flags.epochs, "epochs", defaults.epochs)?,
        learning_rate: cfg.resolve(flags.learning_rate, "learning-rate", defaults.learning_rate)?,
        momentum: cfg.resolve(flags.momentum, "momentum", defaults.momentum)?,
        weight_decay: cfg.resolve(flags.weight_decay, "weight-decay", defaults.weight_decay)?,
        seed,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Epochs (default: 200 for linear/mlp, 30 for cnn).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Bag pairs per epoch (default: max(#positive, #negative)).
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    /// SGD learning rate (default: 1e-3 for linear/mlp, 1e-2 for cnn).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// SGD momentum in [0, 1) (default: 0.9).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay (default: 0).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// RNG seed for initialization and pair sampling (default: 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bag CSV or image-bag JSON manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// Output model path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: String,
    pub arch: Arch,
    pub out: String,
    pub train: TrainConfig,
}

impl TrainRun {
    pub fn resolve(args: &TrainArgs) -> Result<TrainRun> {
        let cfg = ConfigFile::load(args.config.as_deref())?;
        let dataset = load_dataset(&args.data)?;
        let spec = args.arch.spec_for(&dataset)?;
        Ok(TrainRun {
            data: args.data.display().to_string(),
            arch: args.arch,
            out: args.out.display().to_string(),
            train: resolve_train_config(&cfg, &spec, &dataset, &args.flags)?,
        })
    }
}

pub fn execute_train(run: &TrainRun) -> Result<()> {
    let started = Instant::now();
    let data_path = PathBuf::from(&run.data);
    let dataset = load_dataset(&data_path)?;
    let spec = run.arch.spec_for(&dataset)?;
    let model = train_normalized(dataset.bags(), &spec, &run.train)?;

    // Training-set diagnostics, recorded in the manifest.
    let view: Vec<milrank::Bag> = match &model.feature_stats {
        Some(stats) => milrank::data::apply_normalizer(stats, dataset.bags())?,
        None => dataset.bags().to_vec(),
    };
    let risk = empirical_risk(&spec, &model.theta, &view)?;
    let mut scores = Vec::with_capacity(view.len());
    let mut labels = Vec::with_capacity(view.len());
    for bag in &view {
        scores.push(milrank::mil::bag_score(&spec, &model.theta, bag)?.0);
        labels.push(bag.label());
    }
    let train_auc = auc_roc(&scores, &labels)?;
    let train_acc = milrank::eval::accuracy(&scores, &labels, model.threshold)?;

    let out = PathBuf::from(&run.out);
    write_with_parents(&out, &model.to_json()?)?;

    RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: run.train.seed,
        config: serde_json::to_value(run)?,
        data: DataProvenance::of_dataset(vec![run.data.clone()], &dataset),
        artifacts: vec![run.out.clone()],
        result: Some(serde_json::json!({
            "empirical_risk": risk,
            "train_accuracy": train_acc,
            "train_auc": train_auc,
            "threshold": model.threshold,
        })),
        duration_seconds: started.elapsed().as_secs_f64(),
    }
    .save(&manifest_path_for(&out))
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Bag CSV with flat feature vectors.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// Report stem: writes <report>.csv and <report>.json.
    #[arg(long)]
    pub report: PathBuf,
    /// Cross-validation runs (default: 5).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Folds per run (default: 10).
    #[arg(long)]
    pub folds: Option<usize>,
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CvRun {
    pub data: String,
    pub arch: Arch,
    pub report: String,
    pub runs: usize,
    pub folds: usize,
    pub train: TrainConfig,
}

impl CvRun {
    pub fn resolve(args: &CvArgs) -> Result<CvRun> {
        let cfg = ConfigFile::load(args.config.as_deref())?;
        let dataset = load_dataset(&args.data)?;
        let spec = args.arch.spec_for(&dataset)?;
        Ok(CvRun {
            data: args.data.display().to_string(),
            arch: args.arch,
            report: args.report.display().to_string(),
            runs: cfg.resolve(args.runs, "runs", 5)?,
            folds: cfg.resolve(args.folds, "folds", 10)?,
            train: resolve_train_config(&cfg, &spec, &dataset, &args.flags)?,
        })
    }
}

pub fn execute_cv(run: &CvRun) -> Result<()> {
    let started = Instant::now();
    let dataset = load_dataset(Path::new(&run.data))?;
    let spec = run.arch.spec_for(&dataset)?;
    let report = run_cv(&dataset, &spec, &run.train, run.runs, run.folds)?;

    let stem = PathBuf::from(&run.report);
    let csv_path = stem.with_extension("csv");
    let json_path = stem.with_extension("json");
    write_with_parents(&csv_path, &report.to_csv())?;
    write_with_parents(&json_path, &report.to_json()?)?;

    RunManifest {
        command: "cv".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: run.train.seed,
        config: serde_json::to_value(run)?,
        data: DataProvenance::of_dataset(vec![run.data.clone()], &dataset),
        artifacts: vec![
            csv_path.display().to_string(),
            json_path.display().to_string(),
        ],
        result: Some(serde_json::json!({
            "accuracy_mean": report.accuracy_mean,
            "accuracy_std": report.accuracy_std,
            "auc_mean": report.auc_mean,
            "auc_std": report.auc_std,
        })),
        duration_seconds: started.elapsed().as_secs_f64(),
    }
    .save(&stem.with_extension("manifest.json"))
}

#[derive(Debug, Args)]
pub struct MnistBagsArgs {
    /// IDX image file for the training pool.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file for the training pool.
    #[arg(long)]
    pub labels: PathBuf,
    /// IDX image file for the test pool (default: the training pool).
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    /// IDX label file for the test pool (default: the training pool).
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Number of training bags.
    #[arg(long)]
    pub train_bags: usize,
    /// Number of test bags (default: 1000).
    #[arg(long)]
    pub test_bags: Option<usize>,
    /// Mean bag size (default: 10).
    #[arg(long)]
    pub mean_size: Option<f64>,
    /// Bag size variance (default: 2.0).
    #[arg(long)]
    pub variance: Option<f64>,
    /// Fraction of positive bags (default: 0.5).
    #[arg(long)]
    pub positive_fraction: Option<f64>,
    /// RNG seed; the test set uses seed+1 (default: 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for train_bags.json / test_bags.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MnistBagsRun {
    pub images: String,
    pub labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub train_bags: usize,
    pub test_bags: usize,
    pub mean_size: f64,
    pub variance: f64,
    pub positive_fraction: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl MnistBagsRun {
    pub fn resolve(args: &MnistBagsArgs) -> Result<MnistBagsRun> {
        let cfg = ConfigFile::load(args.config.as_deref())?;
        let images = args.images.display().to_string();
        let labels = args.labels.display().to_string();
        Ok(MnistBagsRun {
            test_images: args
                .test_images
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| images.clone()),
            test_labels: args
                .test_labels
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| labels.clone()),
            images,
            labels,
            train_bags: args.train_bags,
            test_bags: cfg.resolve(args.test_bags, "test-bags", 1000)?,
            mean_size: cfg.resolve(args.mean_size, "mean-size", 10.0)?,
            variance: cfg.resolve(args.variance, "variance", 2.0)?,
            positive_fraction: cfg.resolve(args.positive_fraction, "positive-fraction", 0.5)?,
            seed: cfg.resolve(args.seed, "seed", 0)?,
            out_dir: args.out_dir.display().to_string(),
        })
    }
}

pub fn execute_mnist_bags(run: &MnistBagsRun) -> Result<()> {
    let started = Instant::now();
    let train_pool = load_mnist_idx(&run.images, &run.labels)?;
    let made_train = make_mnist_bags(
        &train_pool,
        run.train_bags,
        run.mean_size,
        run.variance,
        run.positive_fraction,
        run.seed,
    )?;
    // Test bags come from their own pool (ideally the held-out IDX files) and
    // an independent stream, so no instance or draw is shared with training.
    let test_pool = if run.test_images == run.images && run.test_labels == run.labels {
        train_pool
    } else {
        load_mnist_idx(&run.test_images, &run.test_labels)?
    };
    let made_test = make_mnist_bags(
        &test_pool,
        run.test_bags,
        run.mean_size,
        run.variance,
        run.positive_fraction,
        run.seed.wrapping_add(1),
    )?;

    let out_dir = PathBuf::from(&run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut artifacts = Vec::new();
    for (name, made, images, labels) in [
        ("train_bags.json", &made_train, &run.images, &run.labels),
        ("test_bags.json", &made_test, &run.test_images, &run.test_labels),
    ] {
        let bags: Vec<BagIndices> = made
            .dataset
            .bags()
            .iter()
            .zip(&made.indices)
            .map(|(bag, idx)| BagIndices {
                id: bag.id().to_string(),
                label: bag.label().as_int(),
                indices: idx.clone(),
            })
            .collect();
        let manifest = BagSetManifest {
            images: images.clone(),
            labels: labels.clone(),
            bags,
        };
        let path = out_dir.join(name);
        write_with_parents(&path, &serde_json::to_string_pretty(&manifest)?)?;
        artifacts.push(path.display().to_string());
    }

    RunManifest {
        command: "mnist-bags".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: run.seed,
        config: serde_json::to_value(run)?,
        data: DataProvenance {
            paths: vec![
                run.images.clone(),
                run.labels.clone(),
                run.test_images.clone(),
                run.test_labels.clone(),
            ],
            source: made_train.dataset.source().to_string(),
            bags: Some(run.train_bags + run.test_bags),
            positives: Some(made_train.dataset.num_positive() + made_test.dataset.num_positive()),
            negatives: Some(made_train.dataset.num_negative() + made_test.dataset.num_negative()),
            feature_dim: Some(made_train.dataset.feature_dim()),
        },
        artifacts,
        result: None,
        duration_seconds: started.elapsed().as_secs_f64(),
    }
    .save(&out_dir.join("manifest.json"))
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Trained model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Bag CSV or image-bag JSON manifest to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Emit one row per instance instead of one per bag.
    #[arg(long)]
    pub per_instance: bool,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRun {
    pub model: String,
    pub data: String,
    pub per_instance: bool,
    pub out: String,
}

impl ScoreRun {
    pub fn resolve(args: &ScoreArgs) -> Result<ScoreRun> {
        Ok(ScoreRun {
            model: args.model.display().to_string(),
            data: args.data.display().to_string(),
            per_instance: args.per_instance,
            out: args.out.display().to_string(),
        })
    }
}

pub fn execute_score(run: &ScoreRun) -> Result<()> {
    let started = Instant::now();
    let model = TrainedModel::load(&run.model)?;
    let dataset = load_dataset(Path::new(&run.data))?;
    let want = model.spec.input_shape();
    if dataset.instance_shape() != want.as_slice() {
        return Err(Error::Usage(format!(
            "model expects instances of shape {want:?}, dataset has {:?}",
            dataset.instance_shape()
        )));
    }

    let mut out = String::new();
    if run.per_instance {
        out.push_str("bag_id,score,prediction,witness_index,instance_index,instance_score\n");
    } else {
        out.push_str("bag_id,score,prediction,witness_index\n");
    }
    for bag in dataset.bags() {
        let (score, witness) = model.score_bag(bag)?;
        let prediction = model.predict(score).as_int();
        if run.per_instance {
            for (i, s) in model.score_instances(bag)?.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{score},{prediction},{witness},{i},{s}",
                    bag.id()
                );
            }
        } else {
            let _ = writeln!(out, "{},{score},{prediction},{witness}", bag.id());
        }
    }
    let out_path = PathBuf::from(&run.out);
    write_with_parents(&out_path, &out)?;

    RunManifest {
        command: "score".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: 0,
        config: serde_json::to_value(run)?,
        data: DataProvenance::of_dataset(vec![run.data.clone()], &dataset),
        artifacts: vec![run.out.clone()],
        result: None,
        duration_seconds: started.elapsed().as_secs_f64(),
    }
    .save(&manifest_path_for(&out_path))
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// Run manifest produced by a previous invocation.
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn execute_rerun(args: &RerunArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    match manifest.command.as_str() {
        "train" => execute_train(&serde_json::from_value(manifest.config)?),
        "cv" => execute_cv(&serde_json::from_value(manifest.config)?),
        "mnist-bags" => execute_mnist_bags(&serde_json::from_value(manifest.config)?),
        "score" => execute_score(&serde_json::from_value(manifest.config)?),
        other => Err(Error::Usage(format!(
            "manifest records unknown command {other:?}"
        ))),
    }
}
