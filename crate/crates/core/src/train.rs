//! Run orchestration: data loading, the epoch loop, checkpoints, metrics
//! log and the final evaluation report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::config::{DataSource, LrSchedule, Mode, RunConfig};
use crate::data::{self, DataKind, Dataset, Lift};
use crate::error::{contract, Error, Result};
use crate::metrics::{self, EvalReport};
use crate::objectives::{cluster_assign, LossBreakdown, Trainer};
use crate::priors::{sample_prior, PriorKind, PriorSpec};
use crate::rng;

const EVAL_TAG: u64 = 0x6576616c;
const TRAIN_TAG: u64 = 0x747261696e;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const CONFIG_DUMP: &str = "config.txt";

/// Latent generator for synthetic data.
pub fn data_prior_spec(cfg: &RunConfig) -> PriorSpec {
    match cfg.data_prior {
        PriorKind::Mixture => PriorSpec::mixture_on_circle(cfg.data_clusters, cfg.prior_radius, cfg.prior_sigma),
        PriorKind::Gaussian => PriorSpec::gaussian(cfg.latent_dim),
        k => PriorSpec::named(k),
    }
}

/// The full dataset named by the config, after optional PCA.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| contract(format!("{key} must be set for this data source")))
    };
    let mut ds = match cfg.data_source {
        DataSource::Synthetic => {
            let lift = Lift {
                hidden: cfg.lift_hidden,
                out_dim: cfg.lift_dim,
                seed: cfg.lift_seed,
            };
            data::make_synthetic(&data_prior_spec(cfg), &lift, cfg.data_kind, cfg.data_n, cfg.data_seed)?
        }
        DataSource::Idx => {
            let images = need(&cfg.data_images, "data.images")?;
            data::load_idx(&images, cfg.data_labels.as_deref())?
        }
        DataSource::Csv => {
            let path = need(&cfg.data_csv, "data.csv")?;
            let mut ds = data::load_matrix_csv(&path, cfg.data_delimiter, cfg.data_label_column)?;
            ds.kind = cfg.data_kind;
            ds
        }
    };
    if cfg.pca_k > 0 {
        if cfg.data_kind == DataKind::BinaryImage {
            return Err(contract("PCA output is continuous; set data.kind=continuous"));
        }
        let pca = data::pca_project(&ds.items, cfg.pca_k, cfg.pca_divisor)?;
        ds.items = pca.projected;
        ds.kind = DataKind::Continuous;
    }
    if ds.len() <= cfg.data_test {
        return Err(contract(format!(
            "dataset has {} items but data.test = {}",
            ds.len(),
            cfg.data_test
        )));
    }
    Ok(ds)
}

/// Train/test split of the configured dataset.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok(load_dataset(cfg)?.split(cfg.data_test))
}

/// Which training items keep their label in semi-supervised mode.
pub fn labeled_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let keep = ((n as f64) * fraction).round() as usize;
    let mut mask = vec![false; n];
    let perm = rng::permutation(&mut rng::rng(rng::derive_seed(seed, &[0x6c6162])), n);
    for &i in perm.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

/// Per-run state visible to callers (tests, the CLI).
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub report: EvalReport,
    /// Every step's loss breakdown, in order.
    pub history: Vec<LossBreakdown>,
}

/// Trains in memory, optionally writing artifacts to `out`.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_split(cfg)?;
    if cfg.mode == Mode::Semisup && train.labels.is_none() {
        return Err(contract("semi-supervised mode needs labels"));
    }
    let mut trainer = Trainer::new(cfg.clone(), train.dim())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_DUMP), cfg.dump())?;
    }
    let mut log = match out {
        Some(dir) => {
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
            writeln!(f, "step\trec\treg\tdiff\ttotal\twallclock_ms")?;
            Some(f)
        }
        None => None,
    };

    let seed = rng::derive_seed(cfg.seed, &[TRAIN_TAG]);
    if cfg.pretrain_iters > 0 && cfg.epochs > 0 && cfg.mode != Mode::Aevb && cfg.prior_kind.is_structured() {
        trainer.pretrain(cfg.pretrain_iters, rng::derive_seed(seed, &[0x707265]))?;
    }

    let mask = match (&train.labels, cfg.mode) {
        (Some(_), Mode::Semisup) => labeled_mask(train.len(), cfg.label_fraction, cfg.seed),
        _ => Vec::new(),
    };
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let beta = cfg.beta_reg_at(epoch);
        if cfg.lr_schedule != LrSchedule::Constant {
            let lr = cfg.lr_at(epoch);
            trainer.opt.set_lr(lr);
            trainer.sleep_opt.set_lr(lr);
        }
        let perm = rng::permutation(&mut rng::rng(rng::derive_seed(seed, &[epoch as u64])), train.len());
        for (b, idx) in perm.chunks(cfg.batch).enumerate() {
            let x = train.items.select_rows(idx);
            let step_seed = rng::derive_seed(seed, &[epoch as u64, b as u64, 1]);
            let result = match cfg.mode {
                Mode::Unsup | Mode::Cluster => trainer.ddvi_step(&x, beta, step_seed),
                Mode::Aevb => trainer.aevb_step(&x, beta, step_seed),
                Mode::Semisup => {
                    let labels = train.labels.as_ref().expect("checked above");
                    let slots: Vec<Option<usize>> = idx
                        .iter()
                        .map(|&i| mask[i].then_some(labels[i]))
                        .collect();
                    trainer.semisup_step(&x, &slots, beta, step_seed)
                }
            };
            let lb = result.map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("{detail}; batch rows {:?}", &idx[..idx.len().min(8)]),
                },
                e => e,
            })?;
            step += 1;
            if let Some(f) = log.as_mut() {
                if cfg.log_every > 0 && step % cfg.log_every == 0 {
                    let ms = if cfg.log_wallclock { start.elapsed().as_millis() } else { 0 };
                    writeln!(
                        f,
                        "{step}\t{:?}\t{:?}\t{:?}\t{:?}\t{ms}",
                        lb.rec, lb.reg, lb.diff, lb.total
                    )?;
                }
            }
            history.push(lb);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&trainer.models.store, &dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1)))?;
            }
        }
    }
    if let Some(mut f) = log {
        f.flush()?;
    }

    let report = evaluate(&trainer, &test)?;
    if let Some(dir) = out {
        checkpoint::save(&trainer.models.store, &dir.join(FINAL_CHECKPOINT))?;
        fs::write(dir.join(REPORT_FILE), report.to_string())?;
    }
    Ok(TrainOutcome {
        trainer,
        report,
        history,
    })
}

/// `train` subcommand: artifacts go to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    Ok(run_training(cfg, Some(out))?.report)
}

/// Rebuilds the configured model, loads `checkpoint_path` into it.
pub fn load_trainer(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(Trainer, Dataset)> {
    cfg.validate()?;
    let (train, test) = load_split(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), train.dim())?;
    checkpoint::load(&mut trainer.models.store, checkpoint_path)?;
    Ok((trainer, test))
}

/// `eval` subcommand: the full report on the configured test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalReport> {
    let (trainer, test) = load_trainer(cfg, checkpoint_path)?;
    evaluate(&trainer, &test)
}

/// Posterior latents for the test split, with its labels.
pub fn test_latents(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let (trainer, test) = load_trainer(cfg, checkpoint_path)?;
    let z = trainer.encode(&test.items, rng::derive_seed(cfg.seed, &[EVAL_TAG, 1]))?;
    Ok((z, test.labels))
}

/// Every metric applicable to the run's mode and data.
pub fn evaluate(trainer: &Trainer, test: &Dataset) -> Result<EvalReport> {
    let cfg = &trainer.cfg;
    let seed = rng::derive_seed(cfg.seed, &[EVAL_TAG]);
    let beta = cfg.beta_reg_at(cfg.epochs.saturating_sub(1));
    let bound = trainer.evaluate_bound(&test.items, cfg.eval_n_mc, beta, rng::derive_seed(seed, &[0]))?;
    let latents = trainer.encode(&test.items, rng::derive_seed(seed, &[1]))?;

    let spec = trainer.current_prior_spec();
    let (prior_z, _) = sample_prior(&spec, cfg.eval_prior_samples.max(1), rng::derive_seed(seed, &[2]))?;
    let latent_nll = metrics::latent_nll(&latents, &prior_z)?;

    let m = cfg.mmd_samples.min(test.len());
    let mmd = if m > 0 {
        let generated = trainer.generate(m, rng::derive_seed(seed, &[3]))?;
        let idx: Vec<usize> = (0..m).collect();
        Some(metrics::mmd(&generated, &test.items.select_rows(&idx))?)
    } else {
        None
    };

    let mut report = EvalReport {
        elbo: Some(bound.total),
        mmd,
        latent_nll: Some(latent_nll),
        n_eval: test.len(),
        ..Default::default()
    };
    if let Some(labels) = &test.labels {
        if test.len() >= 2 && cfg.knn_k > 0 {
            report.knn_acc = Some(metrics::knn_accuracy(&latents, labels, cfg.knn_k)?.accuracy);
        }
        if cfg.mode == Mode::Cluster {
            let assign = (0..latents.rows())
                .map(|i| cluster_assign(latents.row_slice(i), &spec))
                .collect::<Result<Vec<_>>>()?;
            let s = metrics::cluster_scores(&assign, labels)?;
            report.purity = Some(s.purity);
            report.completeness = Some(s.completeness);
            report.nmi = Some(s.nmi);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_fraction() {
        let m = labeled_mask(50, 0.2, 3);
        assert_eq!(m.iter().filter(|&&b| b).count(), 10);
        assert_eq!(m, labeled_mask(50, 0.2, 3));
        assert!(labeled_mask(7, 0.0, 1).iter().all(|&b| !b));
    }

    #[test]
    fn test_split_larger_than_data_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data_n = 10;
        cfg.data_test = 10;
        assert!(load_dataset(&cfg).is_err());
    }
}
