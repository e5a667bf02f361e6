//! Command-line entry point: dataset generation, training, evaluation,
//! adversarial attack grids, gradient diagnostics, and hyperparameter
//! sweeps, all driven by one TOML configuration document.

use std::fmt::Write as _;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_two_part_glyphs, load_cifar_binary, load_idx, mix_seed, Dataset, GlyphSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::{
    aurc, brier, ece, fgsm, fpr_at_tpr, layer_grad_magnitudes, top_k_accuracy,
};
use crate::model::ModelSpec;
use crate::pairing::{build_class_index, sample_pair_batches};
use crate::tensor::Tensor;
use crate::train::{
    fit, fit_from, load_checkpoint, predict_dataset, read_tensors, write_tensors, PrSchedule,
    TrainConfig,
};

/// Where the datasets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthesized two-part glyphs (see `[data.glyphs]`).
    Glyphs,
    /// IDX image/label file pairs.
    Idx,
    /// CIFAR-style binary batches.
    Cifar,
    /// Tensor container files written by `gen-data`.
    Psd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub glyphs: GlyphSpec,
    /// IDX paths.
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    /// CIFAR-binary or tensor-container paths.
    pub train_path: Option<String>,
    pub test_path: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Glyphs,
            glyphs: GlyphSpec::default(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_path: None,
            test_path: None,
        }
    }
}

/// The whole experiment, mirroring the training, model, and data settings.
/// Unknown keys are rejected; every field has a default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base directory for run outputs.
    pub out_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the serialized config; the run directory is `<hash>-s<seed>` so
/// distinct configurations never collide on disk.
pub fn config_hash(cfg: &RunConfig) -> Result<u64> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("unserializable config: {e}")))?;
    Ok(fnv1a64(text.as_bytes()))
}

pub fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let base = cfg.out_dir.clone().unwrap_or_else(|| "runs".to_string());
    Ok(PathBuf::from(base).join(format!("{:016x}-s{}", config_hash(cfg)?, cfg.train.seed)))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let labels = Tensor::new(
        vec![ds.labels.len()],
        ds.labels.iter().map(|&y| y as f64).collect(),
    )?;
    write_tensors(
        path,
        &[("images".into(), ds.images.clone()), ("labels".into(), labels)],
    )
}

pub fn load_dataset(path: &Path, split: &str) -> Result<Dataset> {
    let entries = read_tensors(path)?;
    let find = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{}: missing '{name}'", path.display())))
    };
    let images = find("images")?.clone();
    let labels: Vec<usize> = find("labels")?.data().iter().map(|&v| v as usize).collect();
    if images.shape().len() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "{}: images {:?} do not match {} labels",
            path.display(),
            images.shape(),
            labels.len()
        )));
    }
    Ok(Dataset {
        images,
        labels,
        split: split.to_string(),
    })
}

fn require<'a>(opt: &'a Option<String>, key: &str) -> Result<&'a str> {
    opt.as_deref()
        .ok_or_else(|| Error::Config(format!("data source needs `data.{key}`")))
}

pub fn load_datasets(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match cfg.source {
        DataSource::Glyphs => gen_two_part_glyphs(&cfg.glyphs),
        DataSource::Idx => {
            let train = load_idx(
                Path::new(require(&cfg.train_images, "train_images")?),
                Path::new(require(&cfg.train_labels, "train_labels")?),
            )?;
            let test = load_idx(
                Path::new(require(&cfg.test_images, "test_images")?),
                Path::new(require(&cfg.test_labels, "test_labels")?),
            )?;
            Ok((train, test))
        }
        DataSource::Cifar => {
            let train = load_cifar_binary(Path::new(require(&cfg.train_path, "train_path")?))?;
            let test = load_cifar_binary(Path::new(require(&cfg.test_path, "test_path")?))?;
            Ok((train, test))
        }
        DataSource::Psd => {
            let train = load_dataset(Path::new(require(&cfg.train_path, "train_path")?), "train")?;
            let test = load_dataset(Path::new(require(&cfg.test_path, "test_path")?), "test")?;
            Ok((train, test))
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "swapdistill",
    about = "Self-distillation trainer with intra-class patch swapping",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic glyph dataset and write tensor container files.
    GenData {
        /// TOML run configuration (the `[data.glyphs]` table).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.psd and test.psd (default: from config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write the per-epoch report plus checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute the full metric suite for a checkpoint on the test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the adversarial perturbation grid against a checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single perturbation radius; omits the default grid.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Iteration count (1 = single-step).
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Emit per-layer gradient magnitudes and pairing diagnostics.
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of pair batches to sample.
        #[arg(long, default_value_t = 8)]
        batches: usize,
    },
    /// Grid over (gamma, alpha, p_r, m) and tabulate best test top-1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        gamma: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        alpha: Vec<f64>,
        #[arg(long = "p-r", value_delimiter = ',', default_value = "0.0,0.5")]
        p_r: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        m: Vec<usize>,
    },
}

/// Parses argv and executes; the process exit code is 0 on success, 1 on a
/// runtime failure, 2 on a usage or configuration error.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e {
                Error::Config(_) | Error::Contract(_) | Error::Domain(_) => 2u8,
                _ => 1u8,
            };
            eprintln!("error: code={code} msg=\"{e}\"");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => cmd_gen_data(&config, out.as_deref()),
        Command::Train {
            config,
            seed,
            resume,
        } => cmd_train(&config, seed, resume.as_deref()),
        Command::Eval { config, checkpoint } => cmd_eval(&config, &checkpoint),
        Command::Attack {
            config,
            checkpoint,
            epsilon,
            steps,
        } => cmd_attack(&config, &checkpoint, epsilon, steps),
        Command::Diag {
            config,
            checkpoint,
            batches,
        } => cmd_diag(&config, &checkpoint, batches),
        Command::Sweep {
            config,
            gamma,
            alpha,
            p_r,
            m,
        } => cmd_sweep(&config, &gamma, &alpha, &p_r, &m),
    }
}

fn cmd_gen_data(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(config)?;
    let (train, test) = gen_two_part_glyphs(&cfg.data.glyphs)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "runs".into())));
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_dataset(&dir.join("train.psd"), &train)?;
    save_dataset(&dir.join("test.psd"), &test)?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (train, test) = load_datasets(&cfg.data)?;
    let dir = run_dir(&cfg)?;
    let start = resume.map(load_checkpoint).transpose()?;
    let outcome = fit_from(&cfg.train, &cfg.model, &train, &test, Some(&dir), start)?;
    println!("run dir: {}", dir.display());
    if let Some(last) = outcome.report.records.last() {
        println!(
            "epoch {}: test top-1 {:.4}, test top-5 {:.4}",
            last.epoch, last.test_top1, last.test_top5
        );
    }
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let (_, test) = load_datasets(&cfg.data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let pred = predict_dataset(&ckpt.model, &test.images, &test.labels, cfg.train.eval_batch)?;
    let k5 = 5.min(ckpt.model.spec.num_classes);
    let fpr = fpr_at_tpr(&pred, 0.95).unwrap_or(f64::NAN);
    println!("metric,value");
    println!("top1,{:.6}", top_k_accuracy(&pred, 1)?);
    println!("top5,{:.6}", top_k_accuracy(&pred, k5)?);
    println!("ece,{:.6}", ece(&pred, 15)?);
    println!("brier,{:.6}", brier(&pred));
    println!("aurc,{:.6}", aurc(&pred));
    println!("fpr_at_95tpr,{:.6}", fpr);
    Ok(())
}

/// The default perturbation grid (including the clean point).
pub const EPSILON_GRID: [f64; 6] = [0.0, 0.001, 0.003, 0.005, 0.01, 0.05];

/// Accuracy under attack plus the measured max perturbation, per epsilon.
pub fn attack_table(
    model: &crate::model::Model,
    test: &Dataset,
    grid: &[f64],
    steps: usize,
    chunk: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let n = test.len();
    let per: usize = test.images.shape()[1..].iter().product();
    let mut rows = Vec::with_capacity(grid.len());
    for &eps in grid {
        let mut hits = 0usize;
        let mut max_linf = 0.0f64;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&test.images.shape()[1..]);
            let x = Tensor::new(
                shape,
                test.images.data()[start * per..end * per].to_vec(),
            )?;
            let y = &test.labels[start..end];
            let adv = fgsm(model, &x, y, eps, steps, (0.0, 1.0))?;
            max_linf = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(max_linf, f64::max);
            let probs = model.predict_probs(&adv)?;
            let c = probs.shape()[1];
            for (i, &yi) in y.iter().enumerate() {
                let row = &probs.data()[i * c..(i + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0usize, |b, (k, &v)| if v > row[b] { k } else { b });
                if best == yi {
                    hits += 1;
                }
            }
            start = end;
        }
        rows.push((eps, hits as f64 / n as f64, max_linf));
    }
    Ok(rows)
}

fn cmd_attack(config: &Path, checkpoint: &Path, epsilon: Option<f64>, steps: usize) -> Result<()> {
    let cfg = load_run_config(config)?;
    let (_, test) = load_datasets(&cfg.data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let grid: Vec<f64> = match epsilon {
        Some(e) => vec![e],
        None => EPSILON_GRID.to_vec(),
    };
    let rows = attack_table(&ckpt.model, &test, &grid, steps, cfg.train.eval_batch)?;
    println!("epsilon,steps,accuracy,max_linf");
    for (eps, acc, linf) in rows {
        println!("{eps},{steps},{acc:.6},{linf:.6}");
    }
    Ok(())
}

fn cmd_diag(config: &Path, checkpoint: &Path, num_batches: usize) -> Result<()> {
    let cfg = load_run_config(config)?;
    let (train, _) = load_datasets(&cfg.data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let index = build_class_index(&train.labels);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, 0x44, 0));
    let batches = sample_pair_batches(
        &train.images,
        &train.labels,
        &index,
        cfg.train.batch_size,
        false,
        &mut rng,
    )?;
    let t = cfg.train.distill.t;
    println!("batch,metric,value");
    for (bi, batch) in batches.iter().take(num_batches).enumerate() {
        let kd = crate::distill::kd_logit_gradient(
            &ckpt.model.forward_logits(&batch.x_a)?,
            &ckpt.model.forward_logits(&batch.x_b)?,
            t,
        )?;
        let c = ckpt.model.spec.num_classes;
        println!(
            "{bi},kd_grad_l1,{:.6}",
            kd.l1_norm() / (batch.len() * c) as f64
        );
        let gap = crate::eval::target_confidence_gap(
            &ckpt.model,
            batch,
            cfg.train.patch,
            1.0,
            t,
            &mut rng,
        )?;
        println!("{bi},conf_gap,{gap:.6}");
        for (name, mag) in layer_grad_magnitudes(&ckpt.model, batch, &cfg.train.distill)? {
            println!("{bi},grad.{name},{mag:.6}");
        }
    }
    Ok(())
}

/// One row per grid cell: the best test top-1 reached during training.
pub fn sweep_table(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    gammas: &[f64],
    alphas: &[f64],
    p_rs: &[f64],
    ms: &[usize],
) -> Result<String> {
    let mut out = String::from("gamma,alpha,p_r,m,best_top1\n");
    for &gamma in gammas {
        for &alpha in alphas {
            for &p_r in p_rs {
                for &m in ms {
                    let cell = TrainConfig {
                        distill: DistillConfig {
                            gamma,
                            alpha,
                            ..cfg.train.distill
                        },
                        p_r: PrSchedule::Constant(p_r),
                        patch: m,
                        ..cfg.train.clone()
                    };
                    let outcome = fit(&cell, &cfg.model, train, test, None)?;
                    let best = outcome
                        .report
                        .records
                        .iter()
                        .map(|r| r.test_top1)
                        .fold(f64::NEG_INFINITY, f64::max);
                    writeln!(out, "{gamma},{alpha},{p_r},{m},{best:.6}")
                        .expect("writing to String cannot fail");
                }
            }
        }
    }
    Ok(out)
}

fn cmd_sweep(
    config: &Path,
    gammas: &[f64],
    alphas: &[f64],
    p_rs: &[f64],
    ms: &[usize],
) -> Result<()> {
    let cfg = load_run_config(config)?;
    let (train, test) = load_datasets(&cfg.data)?;
    let table = sweep_table(&cfg, &train, &test, gammas, alphas, p_rs, ms)?;
    let dir = run_dir(&cfg)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    fs::write(dir.join("heatmap.csv"), &table)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.data.source, DataSource::Glyphs);
        assert_eq!(cfg.train.epochs, 30);
        let err: std::result::Result<RunConfig, _> = toml::from_str("bogus_key = 1");
        assert!(err.is_err());
        let err: std::result::Result<RunConfig, _> =
            toml::from_str("[train]\nnot_a_field = true");
        assert!(err.is_err());
    }

    #[test]
    fn config_hash_distinguishes_configs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.lr = 0.01;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
    }

    #[test]
    fn run_dir_contains_seed() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 7;
        let dir = run_dir(&cfg).unwrap();
        assert!(dir.to_string_lossy().ends_with("-s7"));
    }

    #[test]
    fn dataset_container_round_trip() {
        let spec = GlyphSpec {
            num_classes: 2,
            image_size: 8,
            cell: 4,
            train_per_class: 3,
            test_per_class: 2,
            ..GlyphSpec::default()
        };
        let (train, _) = gen_two_part_glyphs(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.psd");
        save_dataset(&path, &train).unwrap();
        let back = load_dataset(&path, "train").unwrap();
        assert!(back.images.bit_eq(&train.images));
        assert_eq!(back.labels, train.labels);
    }

    #[test]
    fn missing_path_is_config_error() {
        let cfg = DataConfig {
            source: DataSource::Cifar,
            ..DataConfig::default()
        };
        assert!(matches!(load_datasets(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn help_succeeds_and_bad_args_exit_two() {
        assert_eq!(run(["swapdistill", "--help"]), ExitCode::from(0));
        assert_eq!(run(["swapdistill", "no-such-cmd"]), ExitCode::from(2));
        assert_eq!(run(["swapdistill"]), ExitCode::from(2));
    }

    #[test]
    fn sweep_emits_one_row_per_cell() {
        let spec = GlyphSpec {
            num_classes: 2,
            image_size: 8,
            cell: 4,
            train_per_class: 4,
            test_per_class: 2,
            ..GlyphSpec::default()
        };
        let (train, test) = gen_two_part_glyphs(&spec).unwrap();
        let mut cfg = RunConfig::default();
        cfg.model = ModelSpec {
            in_channels: 1,
            num_classes: 2,
            widths: vec![2],
        };
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        let table =
            sweep_table(&cfg, &train, &test, &[1.0], &[1.0], &[0.0, 0.5], &[2, 4]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "gamma,alpha,p_r,m,best_top1");
        assert_eq!(lines.len(), 5);
        for row in &lines[1..] {
            assert_eq!(row.split(',').count(), 5);
        }
    }
}
