//! Run configuration: flat `key=value` files layered over named profiles.
//!
//! Precedence is defaults < profile < file < command-line flags. Every field
//! records where its value came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::DataKind;
use crate::diffusion::{CondSource, SigmaMode};
use crate::error::{Error, Result};
use crate::priors::PriorKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Unsup,
    Semisup,
    Cluster,
    Aevb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
    Csv,
}

/// How the sleep term is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SleepMode {
    /// Separate φ-only steps on fantasy data after each wake step.
    Alternating,
    /// Noise-prediction on prior samples conditioned on the real batch,
    /// optimized jointly with the wake objective.
    Simplified,
    Off,
}

/// How fantasy inputs are drawn from `p(x|z)` during sleep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fantasy {
    Mean,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` towards zero over the run.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlSchedule {
    Constant,
    /// Linear in the epoch index from 0 to `kl_max`.
    Linear,
}

/// Estimator for the conditional prior entropy inside the sleep bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyEstimator {
    Importance,
    /// Closed form for a linear decoder with unit Gaussian noise and a
    /// standard-normal one-dimensional prior.
    LinearGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Profile,
    File { line: usize },
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::Profile => write!(f, "profile"),
            Source::File { line } => write!(f, "file:{line}"),
            Source::Flag => write!(f, "flag"),
        }
    }
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, { $($name:literal => $val:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($val),)+
                    other => Err(format!(concat!("unknown ", $what, " '{}'"), other)),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $val { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

named_enum!(Mode, "mode", {
    "unsup" => Mode::Unsup,
    "semisup" => Mode::Semisup,
    "cluster" => Mode::Cluster,
    "aevb" => Mode::Aevb,
});
named_enum!(DataSource, "data source", {
    "synthetic" => DataSource::Synthetic,
    "idx" => DataSource::Idx,
    "csv" => DataSource::Csv,
});
named_enum!(SleepMode, "sleep mode", {
    "alternating" => SleepMode::Alternating,
    "simplified" => SleepMode::Simplified,
    "off" => SleepMode::Off,
});
named_enum!(Fantasy, "fantasy mode", {
    "mean" => Fantasy::Mean,
    "sample" => Fantasy::Sample,
});
named_enum!(LrSchedule, "lr schedule", {
    "constant" => LrSchedule::Constant,
    "cosine" => LrSchedule::Cosine,
});
named_enum!(KlSchedule, "kl schedule", {
    "constant" => KlSchedule::Constant,
    "linear" => KlSchedule::Linear,
});
named_enum!(EntropyEstimator, "entropy estimator", {
    "importance" => EntropyEstimator::Importance,
    "linear_gaussian" => EntropyEstimator::LinearGaussian,
});

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,

    pub data_source: DataSource,
    pub data_kind: DataKind,
    pub data_images: Option<PathBuf>,
    pub data_labels: Option<PathBuf>,
    pub data_csv: Option<PathBuf>,
    pub data_delimiter: u8,
    pub data_label_column: bool,
    /// Synthetic item count.
    pub data_n: usize,
    /// Held-out items taken from the end of the dataset.
    pub data_test: usize,
    /// Latent generator for synthetic data.
    pub data_prior: PriorKind,
    pub data_clusters: usize,
    pub data_seed: u64,
    pub lift_dim: usize,
    pub lift_hidden: usize,
    pub lift_seed: u64,
    /// Principal components kept; 0 disables PCA.
    pub pca_k: usize,
    pub pca_divisor: f64,

    pub prior_kind: PriorKind,
    pub prior_clusters: usize,
    pub prior_sigma: f64,
    pub prior_radius: f64,
    pub prior_kde_points: usize,

    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub eps_width: usize,
    pub eps_layers: usize,
    pub cond: CondSource,

    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: SigmaMode,

    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub sleep: SleepMode,
    pub sleep_iters: usize,
    pub sleep_boundary: bool,
    pub fantasy: Fantasy,
    pub beta_reg: f64,
    pub beta_diff: f64,
    pub kl_schedule: KlSchedule,
    pub lr_schedule: LrSchedule,
    pub kl_max: f64,
    pub prior_weight: f64,
    pub alpha: f64,
    pub label_fraction: f64,
    pub pretrain_iters: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,

    pub eval_n_mc: usize,
    pub diff_samples: usize,
    pub is_samples: usize,
    pub entropy: EntropyEstimator,
    pub knn_k: usize,
    pub eval_prior_samples: usize,
    pub mmd_samples: usize,

    pub log_wallclock: bool,

    provenance: BTreeMap<&'static str, Source>,
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "data.source",
    "data.kind",
    "data.images",
    "data.labels",
    "data.csv",
    "data.delimiter",
    "data.label_column",
    "data.n",
    "data.test",
    "data.prior",
    "data.clusters",
    "data.seed",
    "data.lift_dim",
    "data.lift_hidden",
    "data.lift_seed",
    "data.pca_k",
    "data.pca_divisor",
    "prior.kind",
    "prior.clusters",
    "prior.sigma",
    "prior.radius",
    "prior.kde_points",
    "model.latent",
    "model.enc_hidden",
    "model.dec_hidden",
    "model.eps_width",
    "model.eps_layers",
    "model.cond",
    "diffusion.steps",
    "diffusion.beta_min",
    "diffusion.beta_max",
    "diffusion.sigma",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.sleep",
    "train.sleep_iters",
    "train.sleep_boundary",
    "train.fantasy",
    "train.beta_reg",
    "train.beta_diff",
    "train.kl_schedule",
    "train.lr_schedule",
    "train.kl_max",
    "train.prior_weight",
    "train.alpha",
    "train.label_fraction",
    "train.pretrain_iters",
    "train.checkpoint_every",
    "train.log_every",
    "eval.n_mc",
    "eval.diff_samples",
    "eval.is_samples",
    "eval.entropy",
    "eval.knn_k",
    "eval.prior_samples",
    "eval.mmd_samples",
    "log.wallclock",
];

pub const PROFILES: &[&str] = &["unsup", "semisup", "cluster", "aevb"];

fn profile_entries(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    Some(match name {
        "unsup" => &[
            ("mode", "unsup"),
            ("train.beta_reg", "0.003"),
            ("diffusion.steps", "20"),
            ("train.epochs", "200"),
            ("train.batch", "128"),
        ],
        "semisup" => &[
            ("mode", "semisup"),
            ("train.beta_reg", "0.1"),
            ("diffusion.steps", "100"),
            ("train.epochs", "30"),
            ("train.batch", "1024"),
            ("train.sleep", "simplified"),
        ],
        "cluster" => &[
            ("mode", "cluster"),
            ("prior.kind", "mixture"),
            ("prior.clusters", "20"),
            ("train.beta_reg", "0.005"),
            ("diffusion.steps", "20"),
            ("train.epochs", "200"),
        ],
        "aevb" => &[
            ("mode", "aevb"),
            ("train.kl_schedule", "linear"),
            ("train.kl_max", "0.01"),
            ("train.prior_weight", "5"),
            ("train.epochs", "200"),
            ("train.sleep", "off"),
        ],
        _ => return None,
    })
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

fn parse_widths(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| parse_num(w.trim())).collect()
}

fn fmt_widths(w: &[usize]) -> String {
    if w.is_empty() {
        "none".into()
    } else {
        w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Unsup,
            seed: 0,
            data_source: DataSource::Synthetic,
            data_kind: DataKind::BinaryImage,
            data_images: None,
            data_labels: None,
            data_csv: None,
            data_delimiter: b',',
            data_label_column: false,
            data_n: 4000,
            data_test: 500,
            data_prior: PriorKind::Pinwheel,
            data_clusters: 3,
            data_seed: 7,
            lift_dim: 32,
            lift_hidden: 64,
            lift_seed: 1234,
            pca_k: 0,
            pca_divisor: 30.0,
            prior_kind: PriorKind::Pinwheel,
            prior_clusters: 20,
            prior_sigma: 0.1,
            prior_radius: 1.0,
            prior_kde_points: 2000,
            latent_dim: 2,
            enc_hidden: vec![1000, 1000],
            dec_hidden: vec![1000, 1000],
            eps_width: 128,
            eps_layers: 5,
            cond: CondSource::Raw,
            steps: 20,
            beta_min: 1e-4,
            beta_max: 0.4,
            sigma: SigmaMode::Beta,
            lr: 1e-4,
            batch: 128,
            epochs: 200,
            sleep: SleepMode::Alternating,
            sleep_iters: 1,
            sleep_boundary: true,
            fantasy: Fantasy::Mean,
            beta_reg: 0.003,
            beta_diff: 1.0,
            kl_schedule: KlSchedule::Constant,
            lr_schedule: LrSchedule::Constant,
            kl_max: 0.01,
            prior_weight: 1.0,
            alpha: 1.0,
            label_fraction: 0.2,
            pretrain_iters: 100,
            checkpoint_every: 10,
            log_every: 10,
            eval_n_mc: 1,
            diff_samples: 16,
            is_samples: 4,
            entropy: EntropyEstimator::Importance,
            knn_k: 20,
            eval_prior_samples: 1000,
            mmd_samples: 500,
            log_wallclock: false,
            provenance: KEYS.iter().map(|k| (*k, Source::Default)).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a named profile.
    pub fn with_profile(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_profile(name)?;
        Ok(c)
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        let entries = profile_entries(name).ok_or_else(|| Error::Config {
            key: "profile".into(),
            line: 0,
            msg: format!("unknown profile '{name}' (expected one of {})", PROFILES.join(", ")),
        })?;
        for (k, v) in entries {
            self.set(k, v, Source::Profile)?;
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                key: content.to_string(),
                line,
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim(), Source::File { line })?;
        }
        self.validate()
    }

    /// Applies a command-line override.
    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value, Source::Flag)?;
        self.validate()
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.provenance.get(key).copied()
    }

    fn line_of(&self, key: &str) -> usize {
        match self.source(key) {
            Some(Source::File { line }) => line,
            _ => 0,
        }
    }

    fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let line = match source {
            Source::File { line } => line,
            _ => 0,
        };
        let canonical = KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Config {
            key: key.to_string(),
            line,
            msg: format!("unknown key '{key}'"),
        })?;
        self.assign(canonical, value).map_err(|msg| Error::Config {
            key: key.to_string(),
            line,
            msg,
        })?;
        self.provenance.insert(canonical, source);
        Ok(())
    }

    fn assign(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse_num(v)?,
            "data.source" => self.data_source = v.parse()?,
            "data.kind" => self.data_kind = v.parse().map_err(|e: Error| e.to_string())?,
            "data.images" => self.data_images = path(v),
            "data.labels" => self.data_labels = path(v),
            "data.csv" => self.data_csv = path(v),
            "data.delimiter" => {
                self.data_delimiter = match v {
                    "tab" | "\\t" => b'\t',
                    "space" => b' ',
                    s if s.len() == 1 => s.as_bytes()[0],
                    _ => return Err(format!("delimiter must be one character, got '{v}'")),
                }
            }
            "data.label_column" => self.data_label_column = parse_bool(v)?,
            "data.n" => self.data_n = parse_num(v)?,
            "data.test" => self.data_test = parse_num(v)?,
            "data.prior" => self.data_prior = v.parse().map_err(|e: Error| e.to_string())?,
            "data.clusters" => self.data_clusters = parse_num(v)?,
            "data.seed" => self.data_seed = parse_num(v)?,
            "data.lift_dim" => self.lift_dim = parse_num(v)?,
            "data.lift_hidden" => self.lift_hidden = parse_num(v)?,
            "data.lift_seed" => self.lift_seed = parse_num(v)?,
            "data.pca_k" => self.pca_k = parse_num(v)?,
            "data.pca_divisor" => self.pca_divisor = parse_num(v)?,
            "prior.kind" => self.prior_kind = v.parse().map_err(|e: Error| e.to_string())?,
            "prior.clusters" => self.prior_clusters = parse_num(v)?,
            "prior.sigma" => self.prior_sigma = parse_num(v)?,
            "prior.radius" => self.prior_radius = parse_num(v)?,
            "prior.kde_points" => self.prior_kde_points = parse_num(v)?,
            "model.latent" => self.latent_dim = parse_num(v)?,
            "model.enc_hidden" => self.enc_hidden = parse_widths(v)?,
            "model.dec_hidden" => self.dec_hidden = parse_widths(v)?,
            "model.eps_width" => self.eps_width = parse_num(v)?,
            "model.eps_layers" => self.eps_layers = parse_num(v)?,
            "model.cond" => {
                self.cond = match v {
                    "raw" => CondSource::Raw,
                    "features" => CondSource::Features,
                    _ => return Err(format!("unknown conditioning '{v}'")),
                }
            }
            "diffusion.steps" => self.steps = parse_num(v)?,
            "diffusion.beta_min" => self.beta_min = parse_num(v)?,
            "diffusion.beta_max" => self.beta_max = parse_num(v)?,
            "diffusion.sigma" => {
                self.sigma = if v == "beta" {
                    SigmaMode::Beta
                } else {
                    SigmaMode::Constant(parse_num(v)?)
                }
            }
            "train.lr" => self.lr = parse_num(v)?,
            "train.batch" => self.batch = parse_num(v)?,
            "train.epochs" => self.epochs = parse_num(v)?,
            "train.sleep" => self.sleep = v.parse()?,
            "train.sleep_iters" => self.sleep_iters = parse_num(v)?,
            "train.sleep_boundary" => self.sleep_boundary = parse_bool(v)?,
            "train.fantasy" => self.fantasy = v.parse()?,
            "train.beta_reg" => self.beta_reg = parse_num(v)?,
            "train.beta_diff" => self.beta_diff = parse_num(v)?,
            "train.kl_schedule" => self.kl_schedule = v.parse()?,
            "train.lr_schedule" => self.lr_schedule = v.parse()?,
            "train.kl_max" => self.kl_max = parse_num(v)?,
            "train.prior_weight" => self.prior_weight = parse_num(v)?,
            "train.alpha" => self.alpha = parse_num(v)?,
            "train.label_fraction" => self.label_fraction = parse_num(v)?,
            "train.pretrain_iters" => self.pretrain_iters = parse_num(v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(v)?,
            "train.log_every" => self.log_every = parse_num(v)?,
            "eval.n_mc" => self.eval_n_mc = parse_num(v)?,
            "eval.diff_samples" => self.diff_samples = parse_num(v)?,
            "eval.is_samples" => self.is_samples = parse_num(v)?,
            "eval.entropy" => self.entropy = v.parse()?,
            "eval.knn_k" => self.knn_k = parse_num(v)?,
            "eval.prior_samples" => self.eval_prior_samples = parse_num(v)?,
            "eval.mmd_samples" => self.mmd_samples = parse_num(v)?,
            "log.wallclock" => self.log_wallclock = parse_bool(v)?,
            _ => unreachable!("key table and assignments disagree on '{key}'"),
        }
        Ok(())
    }

    /// Range checks; errors name the offending key and the line it came from.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.to_string(),
                line: self.line_of(key),
                msg: msg.to_string(),
            })
        };
        let weights = [
            ("train.beta_reg", self.beta_reg),
            ("train.beta_diff", self.beta_diff),
            ("train.kl_max", self.kl_max),
            ("train.prior_weight", self.prior_weight),
            ("train.alpha", self.alpha),
        ];
        for (k, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(k, "weights must be finite and >= 0");
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("train.lr", "learning rate must be positive");
        }
        if self.batch == 0 {
            return fail("train.batch", "batch size must be >= 1");
        }
        if self.steps == 0 {
            return fail("diffusion.steps", "T must be >= 1");
        }
        if !(self.beta_min > 0.0 && self.beta_min < 1.0) {
            return fail("diffusion.beta_min", "must lie in (0, 1)");
        }
        if !(self.beta_max >= self.beta_min && self.beta_max < 1.0) {
            return fail("diffusion.beta_max", "must lie in [beta_min, 1)");
        }
        if let SigmaMode::Constant(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return fail("diffusion.sigma", "constant sigma must be positive");
            }
        }
        if self.latent_dim == 0 {
            return fail("model.latent", "latent dimension must be >= 1");
        }
        if self.eps_width == 0 {
            return fail("model.eps_width", "width must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return fail("train.label_fraction", "must lie in [0, 1]");
        }
        if !(self.prior_sigma > 0.0) {
            return fail("prior.sigma", "must be positive");
        }
        if !(self.pca_divisor > 0.0) {
            return fail("data.pca_divisor", "must be positive");
        }
        if self.knn_k == 0 {
            return fail("eval.knn_k", "K must be >= 1");
        }
        if self.prior_kde_points == 0 {
            return fail("prior.kde_points", "need at least one KDE point");
        }
        Ok(())
    }

    /// Resolved configuration as `key=value  # source` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let source = self.source(key).unwrap_or(Source::Default);
            out.push_str(&format!("{key}={}  # {source}\n", self.value_string(key)));
        }
        out
    }

    fn value_string(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "data.source" => self.data_source.to_string(),
            "data.kind" => match self.data_kind {
                DataKind::BinaryImage => "binary".into(),
                DataKind::Continuous => "continuous".into(),
            },
            "data.images" => path(&self.data_images),
            "data.labels" => path(&self.data_labels),
            "data.csv" => path(&self.data_csv),
            "data.delimiter" => match self.data_delimiter {
                b'\t' => "tab".into(),
                b' ' => "space".into(),
                d => (d as char).to_string(),
            },
            "data.label_column" => self.data_label_column.to_string(),
            "data.n" => self.data_n.to_string(),
            "data.test" => self.data_test.to_string(),
            "data.prior" => self.data_prior.to_string(),
            "data.clusters" => self.data_clusters.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.lift_dim" => self.lift_dim.to_string(),
            "data.lift_hidden" => self.lift_hidden.to_string(),
            "data.lift_seed" => self.lift_seed.to_string(),
            "data.pca_k" => self.pca_k.to_string(),
            "data.pca_divisor" => self.pca_divisor.to_string(),
            "prior.kind" => self.prior_kind.to_string(),
            "prior.clusters" => self.prior_clusters.to_string(),
            "prior.sigma" => self.prior_sigma.to_string(),
            "prior.radius" => self.prior_radius.to_string(),
            "prior.kde_points" => self.prior_kde_points.to_string(),
            "model.latent" => self.latent_dim.to_string(),
            "model.enc_hidden" => fmt_widths(&self.enc_hidden),
            "model.dec_hidden" => fmt_widths(&self.dec_hidden),
            "model.eps_width" => self.eps_width.to_string(),
            "model.eps_layers" => self.eps_layers.to_string(),
            "model.cond" => match self.cond {
                CondSource::Raw => "raw".into(),
                CondSource::Features => "features".into(),
            },
            "diffusion.steps" => self.steps.to_string(),
            "diffusion.beta_min" => self.beta_min.to_string(),
            "diffusion.beta_max" => self.beta_max.to_string(),
            "diffusion.sigma" => match self.sigma {
                SigmaMode::Beta => "beta".into(),
                SigmaMode::Constant(s) => s.to_string(),
            },
            "train.lr" => self.lr.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.sleep" => self.sleep.to_string(),
            "train.sleep_iters" => self.sleep_iters.to_string(),
            "train.sleep_boundary" => self.sleep_boundary.to_string(),
            "train.fantasy" => self.fantasy.to_string(),
            "train.beta_reg" => self.beta_reg.to_string(),
            "train.beta_diff" => self.beta_diff.to_string(),
            "train.kl_schedule" => self.kl_schedule.to_string(),
            "train.lr_schedule" => self.lr_schedule.to_string(),
            "train.kl_max" => self.kl_max.to_string(),
            "train.prior_weight" => self.prior_weight.to_string(),
            "train.alpha" => self.alpha.to_string(),
            "train.label_fraction" => self.label_fraction.to_string(),
            "train.pretrain_iters" => self.pretrain_iters.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "eval.n_mc" => self.eval_n_mc.to_string(),
            "eval.diff_samples" => self.diff_samples.to_string(),
            "eval.is_samples" => self.is_samples.to_string(),
            "eval.entropy" => self.entropy.to_string(),
            "eval.knn_k" => self.knn_k.to_string(),
            "eval.prior_samples" => self.eval_prior_samples.to_string(),
            "eval.mmd_samples" => self.mmd_samples.to_string(),
            "log.wallclock" => self.log_wallclock.to_string(),
            _ => String::new(),
        }
    }

    /// KL / regularization weight for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn beta_reg_at(&self, epoch: usize) -> f64 {
        match self.kl_schedule {
            KlSchedule::Constant => self.beta_reg,
            KlSchedule::Linear => {
                if self.epochs <= 1 {
                    self.kl_max
                } else {
                    self.kl_max * epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64
                }
            }
        }
    }
}

/// Defaults plus the configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    c.apply_text(text)?;
    Ok(c)
}
