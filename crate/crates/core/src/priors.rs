//! Structured latent priors, their partitions, and kernel density estimates.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{logsumexp, Graph, RowScalarFn, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::rng::{self, DdviRng};

/// Kernel bandwidths for prior density estimates.
pub const KDE_BANDWIDTHS: [f64; 5] = [0.005, 0.008, 0.01, 0.03, 0.05];

pub const PARTITIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PriorKind {
    Pinwheel,
    SwissRoll,
    Square,
    Gaussian,
    Mixture,
}

impl PriorKind {
    /// Priors with a sample-based (KDE) density and 10 partitions.
    pub fn is_structured(self) -> bool {
        matches!(self, Self::Pinwheel | Self::SwissRoll | Self::Square)
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pinwheel" => Self::Pinwheel,
            "swiss_roll" => Self::SwissRoll,
            "square" => Self::Square,
            "gaussian" => Self::Gaussian,
            "mixture" => Self::Mixture,
            other => return Err(contract(format!("unknown prior kind '{other}'"))),
        })
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pinwheel => "pinwheel",
            Self::SwissRoll => "swiss_roll",
            Self::Square => "square",
            Self::Gaussian => "gaussian",
            Self::Mixture => "mixture",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub kind: PriorKind,
    /// Pinwheel arm count / number of partitions.
    pub clusters: usize,
    /// Observation noise: square perimeter jitter, swiss-roll jitter,
    /// pinwheel tangential spread.
    pub noise: f64,
    pub dim: usize,
    /// Mixture component means (`K x dim`).
    pub means: Vec<Vec<f64>>,
    /// Isotropic mixture standard deviation.
    pub sigma: f64,
}

impl PriorSpec {
    pub fn pinwheel() -> Self {
        PriorSpec {
            kind: PriorKind::Pinwheel,
            clusters: PARTITIONS,
            noise: 0.05,
            dim: 2,
            means: Vec::new(),
            sigma: 0.0,
        }
    }

    pub fn swiss_roll() -> Self {
        PriorSpec {
            kind: PriorKind::SwissRoll,
            clusters: PARTITIONS,
            noise: 0.02,
            ..Self::pinwheel()
        }
    }

    pub fn square() -> Self {
        PriorSpec {
            kind: PriorKind::Square,
            clusters: PARTITIONS,
            noise: 0.06,
            ..Self::pinwheel()
        }
    }

    pub fn gaussian(dim: usize) -> Self {
        PriorSpec {
            kind: PriorKind::Gaussian,
            clusters: 1,
            noise: 0.0,
            dim,
            means: Vec::new(),
            sigma: 1.0,
        }
    }

    /// `k` components with means evenly spaced on a circle of `radius`.
    pub fn mixture_on_circle(k: usize, radius: f64, sigma: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        PriorSpec {
            kind: PriorKind::Mixture,
            clusters: k,
            noise: 0.0,
            dim: 2,
            means,
            sigma,
        }
    }

    /// Defaults for a kind as addressed by name in config files.
    pub fn named(kind: PriorKind) -> Self {
        match kind {
            PriorKind::Pinwheel => Self::pinwheel(),
            PriorKind::SwissRoll => Self::swiss_roll(),
            PriorKind::Square => Self::square(),
            PriorKind::Gaussian => Self::gaussian(2),
            PriorKind::Mixture => Self::mixture_on_circle(20, 1.0, 0.1),
        }
    }

    pub fn num_labels(&self) -> usize {
        match self.kind {
            PriorKind::Gaussian => 1,
            PriorKind::Mixture => self.means.len(),
            _ => self.clusters,
        }
    }
}

/// Label of a 1-D generator position `u in [0, 1)` among `parts` equal intervals.
pub fn partition_label(position: f64, parts: usize) -> usize {
    ((position * parts as f64).floor().max(0.0) as usize).min(parts - 1)
}

/// Square perimeter position (fraction of the full loop, clockwise from the
/// top-left corner) to a point on the `[-1, 1]^2` boundary.
pub fn square_point(position: f64) -> [f64; 2] {
    let s = position.rem_euclid(1.0) * 4.0;
    let f = s.fract();
    match s as usize {
        0 => [-1.0 + 2.0 * f, 1.0],
        1 => [1.0, 1.0 - 2.0 * f],
        2 => [1.0 - 2.0 * f, -1.0],
        _ => [-1.0, -1.0 + 2.0 * f],
    }
}

/// Swiss-roll position `u in [0, 1]` to its noiseless 2-D point.
pub fn swiss_roll_point(u: f64) -> [f64; 2] {
    let angle = 3.0 * PI * (0.5 + u);
    let r = angle / (3.0 * PI * 1.5);
    [r * angle.cos(), r * angle.sin()]
}

fn sample_one(spec: &PriorSpec, rng: &mut DdviRng) -> (Vec<f64>, usize) {
    match spec.kind {
        PriorKind::Pinwheel => {
            let k = rng::uniform_int(rng, 0, spec.clusters - 1);
            let radial = (0.3 + 0.05 * rng::normal(rng)).abs() + 0.3;
            let tangential = spec.noise * rng::normal(rng);
            let angle = 2.0 * PI * k as f64 / spec.clusters as f64 + 0.25 * radial;
            let (s, c) = angle.sin_cos();
            (vec![c * radial - s * tangential, s * radial + c * tangential], k)
        }
        PriorKind::SwissRoll => {
            let u = rng::uniform(rng);
            let [x, y] = swiss_roll_point(u);
            let nx = spec.noise * rng::normal(rng);
            let ny = spec.noise * rng::normal(rng);
            (vec![x + nx, y + ny], partition_label(u, spec.clusters))
        }
        PriorKind::Square => {
            let u = rng::uniform(rng);
            let [x, y] = square_point(u);
            let nx = spec.noise * rng::normal(rng);
            let ny = spec.noise * rng::normal(rng);
            (vec![x + nx, y + ny], partition_label(u, spec.clusters))
        }
        PriorKind::Gaussian => (rng::normals(rng, spec.dim), 0),
        PriorKind::Mixture => {
            let k = rng::uniform_int(rng, 0, spec.means.len() - 1);
            let p = spec.means[k]
                .iter()
                .map(|m| m + spec.sigma * rng::normal(rng))
                .collect();
            (p, k)
        }
    }
}

fn validate(spec: &PriorSpec) -> Result<()> {
    match spec.kind {
        PriorKind::Mixture if spec.means.is_empty() => {
            Err(contract("mixture prior needs at least one mean"))
        }
        PriorKind::Mixture if spec.means.iter().any(|m| m.len() != spec.dim) => {
            Err(contract("mixture means must match the prior dimension"))
        }
        k if k.is_structured() && (spec.clusters == 0 || spec.dim != 2) => Err(contract(
            "structured priors are 2-dimensional with at least one partition",
        )),
        _ => Ok(()),
    }
}

/// Draws `n` points and their partition labels.
pub fn sample_prior(spec: &PriorSpec, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    validate(spec)?;
    let mut r = rng::rng(seed);
    sample_with_rng(spec, n, &mut r)
}

pub fn sample_with_rng(
    spec: &PriorSpec,
    n: usize,
    r: &mut DdviRng,
) -> Result<(Tensor, Vec<usize>)> {
    validate(spec)?;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, l) = sample_one(spec, r);
        data.extend(p);
        labels.push(l);
    }
    Ok((Tensor::matrix(n, spec.dim, data), labels))
}

/// Rejection-samples one point whose partition label equals `label`.
pub fn sample_in_partition(spec: &PriorSpec, label: usize, r: &mut DdviRng) -> Result<Vec<f64>> {
    validate(spec)?;
    if label >= spec.num_labels() {
        return Err(contract(format!(
            "label {label} outside the prior's {} partitions",
            spec.num_labels()
        )));
    }
    loop {
        let (p, l) = sample_one(spec, r);
        if l == label {
            return Ok(p);
        }
    }
}

/// Uniform mixture of isotropic Gaussian kernels over fit points and bandwidths.
#[derive(Clone, Debug)]
pub struct KdeDensity {
    points: Vec<f64>,
    dim: usize,
    bandwidths: Vec<f64>,
}

impl KdeDensity {
    pub fn new(points: &Tensor, bandwidths: &[f64]) -> Result<Self> {
        if points.rows() == 0 {
            return Err(contract("KDE needs at least one fit point"));
        }
        if bandwidths.is_empty() || bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(contract("KDE bandwidths must be positive"));
        }
        Ok(KdeDensity {
            points: points.data().to_vec(),
            dim: points.cols(),
            bandwidths: bandwidths.to_vec(),
        })
    }

    pub fn with_default_bandwidths(points: &Tensor) -> Result<Self> {
        Self::new(points, &KDE_BANDWIDTHS)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Log-density and its gradient with respect to the query.
    pub fn log_density_and_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim as f64;
        let n_terms = (self.len() * self.bandwidths.len()) as f64;
        let consts: Vec<(f64, f64)> = self
            .bandwidths
            .iter()
            .map(|&b| (1.0 / (2.0 * b * b), -0.5 * d * (2.0 * PI * b * b).ln()))
            .collect();
        let mut terms = Vec::with_capacity(self.len() * consts.len());
        let mut sq = Vec::with_capacity(self.len());
        for p in self.points.chunks_exact(self.dim) {
            let dist2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            sq.push(dist2);
            for &(inv2b2, c) in &consts {
                terms.push(c - dist2 * inv2b2);
            }
        }
        let lse = logsumexp(&terms);
        let value = lse - n_terms.ln();
        // d/dq log p = sum_j w_j (p_j - q) / b_j^2 with softmax weights w_j.
        let mut grad = vec![0.0; self.dim];
        for (pi, p) in self.points.chunks_exact(self.dim).enumerate() {
            for (bi, &(inv2b2, _)) in consts.iter().enumerate() {
                let w = (terms[pi * consts.len() + bi] - lse).exp();
                if w == 0.0 {
                    continue;
                }
                let scale = w * 2.0 * inv2b2;
                for k in 0..self.dim {
                    grad[k] += scale * (p[k] - q[k]);
                }
            }
        }
        (value, grad)
    }

    pub fn log_density(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim {
            return Err(contract(format!(
                "KDE query has dimension {}, expected {}",
                q.len(),
                self.dim
            )));
        }
        Ok(self.log_density_and_grad(q).0)
    }
}

/// Free-function form of [`KdeDensity::log_density`].
pub fn kde_log_density(kde: &KdeDensity, query: &[f64]) -> Result<f64> {
    kde.log_density(query)
}

impl RowScalarFn for KdeDensity {
    fn eval(&self, _index: usize, row: &[f64]) -> (f64, Vec<f64>) {
        self.log_density_and_grad(row)
    }
}

/// One KDE per partition; row `i` is scored under `kdes[labels[i]]`.
pub struct LabeledKde<'a> {
    pub kdes: &'a [KdeDensity],
    pub labels: &'a [usize],
}

impl RowScalarFn for LabeledKde<'_> {
    fn eval(&self, index: usize, row: &[f64]) -> (f64, Vec<f64>) {
        self.kdes[self.labels[index]].log_density_and_grad(row)
    }
}

/// `log N(z; 0, I)` per row, as an `n x 1` column.
pub fn standard_normal_log_density(g: &mut Graph, z: Var) -> Var {
    let d = g.value(z).cols() as f64;
    let sq = g.square(z);
    let s = g.sum_rows(sq);
    let half = g.scale(s, -0.5);
    g.add_scalar(half, -0.5 * d * (2.0 * PI).ln())
}

/// Uniform mixture of isotropic Gaussians with (possibly trainable) means,
/// per row, as an `n x 1` column.
pub fn mixture_log_density(g: &mut Graph, z: Var, means: Var, sigma: f64) -> Result<Var> {
    let d = g.value(z).cols();
    let k = g.value(means).rows();
    if g.value(means).cols() != d {
        return Err(contract("mixture means and latents differ in dimension"));
    }
    // ||z - m||^2 = |z|^2 - 2 z.m + |m|^2
    let zz = g.square(z);
    let zz = g.sum_rows(zz);
    let mm = g.square(means);
    let mm = g.sum_rows(mm);
    let mm = g.transpose(mm);
    let cross = g.matmul_t(z, means)?;
    let cross = g.scale(cross, -2.0);
    let dist = g.add_col(cross, zz)?;
    let dist = g.add_row(dist, mm)?;
    let logits = g.scale(dist, -1.0 / (2.0 * sigma * sigma));
    let lse = g.logsumexp_rows(logits);
    let c = -(k as f64).ln() - 0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln();
    Ok(g.add_scalar(lse, c))
}

/// How `log p(z)` is evaluated inside objectives.
#[derive(Clone, Debug)]
pub enum PriorDensity {
    StandardNormal,
    /// Uniform isotropic mixture; means are supplied at evaluation time so
    /// they can be trainable.
    Mixture { sigma: f64 },
    Kde(KdeDensity),
    /// One KDE per partition label, for label-conditional priors.
    PartitionKde(Vec<KdeDensity>),
}

/// A prior's sampler together with its density and an additive log-scale.
#[derive(Clone, Debug)]
pub struct LatentPrior {
    pub spec: PriorSpec,
    pub density: PriorDensity,
    /// Added to every log-density; multiplies the density by `exp(log_scale)`.
    pub log_scale: f64,
}

impl LatentPrior {
    /// Analytic density for gaussian/mixture kinds, KDE on `kde_points`
    /// samples (drawn with `seed`) for structured kinds.
    pub fn from_spec(spec: PriorSpec, kde_points: usize, seed: u64) -> Result<Self> {
        let density = match spec.kind {
            PriorKind::Gaussian => PriorDensity::StandardNormal,
            PriorKind::Mixture => PriorDensity::Mixture { sigma: spec.sigma },
            _ => {
                let (pts, _) = sample_prior(&spec, kde_points, seed)?;
                PriorDensity::Kde(KdeDensity::with_default_bandwidths(&pts)?)
            }
        };
        Ok(LatentPrior {
            spec,
            density,
            log_scale: 0.0,
        })
    }

    /// Per-partition KDEs, each fit on `points_per_label` samples of its label.
    pub fn partitioned(spec: PriorSpec, points_per_label: usize, seed: u64) -> Result<Self> {
        let mut r = rng::rng(seed);
        let mut kdes = Vec::with_capacity(spec.num_labels());
        for label in 0..spec.num_labels() {
            let mut data = Vec::with_capacity(points_per_label * spec.dim);
            for _ in 0..points_per_label {
                data.extend(sample_in_partition(&spec, label, &mut r)?);
            }
            let pts = Tensor::matrix(points_per_label, spec.dim, data);
            kdes.push(KdeDensity::with_default_bandwidths(&pts)?);
        }
        Ok(LatentPrior {
            spec,
            density: PriorDensity::PartitionKde(kdes),
            log_scale: 0.0,
        })
    }

    /// `log p(z)` per row as an `n x 1` column.
    ///
    /// `means` is required for mixtures; `labels` for partitioned KDEs.
    pub fn log_prob(
        &self,
        g: &mut Graph,
        z: Var,
        means: Option<Var>,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let lp = match &self.density {
            PriorDensity::StandardNormal => standard_normal_log_density(g, z),
            PriorDensity::Mixture { sigma } => {
                let means = means.ok_or_else(|| contract("mixture density needs means"))?;
                mixture_log_density(g, z, means, *sigma)?
            }
            PriorDensity::Kde(kde) => {
                if kde.dim() != g.value(z).cols() {
                    return Err(contract("KDE dimension does not match latents"));
                }
                g.row_fn(z, kde)
            }
            PriorDensity::PartitionKde(kdes) => {
                let labels = labels.ok_or_else(|| contract("partitioned density needs labels"))?;
                if labels.len() != g.value(z).rows() || labels.iter().any(|&l| l >= kdes.len()) {
                    return Err(contract("partition labels do not match latents"));
                }
                g.row_fn(z, &LabeledKde { kdes, labels })
            }
        };
        Ok(if self.log_scale != 0.0 {
            g.add_scalar(lp, self.log_scale)
        } else {
            lp
        })
    }

    /// Fixed mixture means from the spec as a `K x d` tensor.
    pub fn spec_means(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.spec.means)
    }
}
