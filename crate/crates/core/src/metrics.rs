//! Evaluation metrics: MMD, latent NLL, KNN accuracy and clustering scores.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::Tensor;
use crate::error::{contract, Result};
use crate::par;
use crate::priors::KdeDensity;

pub const MMD_SIGMAS: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 40.0, 80.0];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = sq_dist(a, b);
    MMD_SIGMAS
        .iter()
        .map(|s| (-d / (2.0 * s * s)).exp())
        .sum()
}

fn mean_kernel(x: &Tensor, y: &Tensor) -> f64 {
    let total = par::sum_range(x.rows(), |i| {
        let a = x.row_slice(i);
        (0..y.rows()).map(|j| kernel(a, y.row_slice(j))).sum::<f64>()
    });
    total / (x.rows() * y.rows()) as f64
}

/// Biased (V-statistic) squared MMD.
pub fn mmd_squared(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(contract("MMD needs non-empty sample sets"));
    }
    if x.cols() != y.cols() {
        return Err(contract("MMD sample sets differ in dimension"));
    }
    Ok(mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y))
}

/// `sqrt(max(0, MMD^2))`.
pub fn mmd(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(mmd_squared(x, y)?.max(0.0).sqrt())
}

/// Negative mean log-density of `prior_samples` under a KDE fitted to
/// `model_latents`.
pub fn latent_nll(model_latents: &Tensor, prior_samples: &Tensor) -> Result<f64> {
    if prior_samples.rows() == 0 {
        return Err(contract("latent NLL needs prior samples"));
    }
    let kde = KdeDensity::with_default_bandwidths(model_latents)?;
    if kde.dim() != prior_samples.cols() {
        return Err(contract("latent and prior dimensions differ"));
    }
    let total = par::sum_range(prior_samples.rows(), |i| {
        kde.log_density_and_grad(prior_samples.row_slice(i)).0
    });
    Ok(-total / prior_samples.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnResult {
    pub accuracy: f64,
    /// Neighbour count actually used after clamping to `n - 1`.
    pub k: usize,
}

/// Leave-one-out K-nearest-neighbour accuracy.
///
/// Distance ties go to the lower index; vote ties to the smaller label.
pub fn knn_accuracy(latents: &Tensor, labels: &[usize], k: usize) -> Result<KnnResult> {
    let n = latents.rows();
    if labels.len() != n {
        return Err(contract("labels must align with latents"));
    }
    if n < 2 {
        return Err(contract("KNN accuracy needs at least two points"));
    }
    if k == 0 {
        return Err(contract("KNN needs k >= 1"));
    }
    let k = k.min(n - 1);
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let hits = par::map_range(n, |i| {
        let a = latents.row_slice(i);
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(a, latents.row_slice(j)), j))
            .collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut votes = vec![0usize; n_labels];
        for &(_, j) in &d[..k] {
            votes[labels[j]] += 1;
        }
        let mut best = 0;
        for (l, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = l;
            }
        }
        usize::from(best == labels[i])
    });
    Ok(KnnResult {
        accuracy: hits.iter().sum::<usize>() as f64 / n as f64,
        k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterScores {
    pub purity: f64,
    pub completeness: f64,
    pub nmi: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Purity, completeness `1 - H(C|K)/H(C)` and `NMI = I(C;K)/sqrt(H(C)H(K))`,
/// where `C` are classes and `K` clusters.
pub fn cluster_scores(assignments: &[usize], labels: &[usize]) -> Result<ClusterScores> {
    if assignments.len() != labels.len() {
        return Err(contract("assignments and labels differ in length"));
    }
    if assignments.is_empty() {
        return Err(contract("cluster scores need at least one item"));
    }
    let n = assignments.len() as f64;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (&k, &c) in assignments.iter().zip(labels) {
        *table.entry((k, c)).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
    }

    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(k, _), &v) in &table {
        let b = best.entry(k).or_default();
        *b = (*b).max(v);
    }
    let purity = best.values().sum::<usize>() as f64 / n;

    let h_c = entropy(by_class.values().copied(), n);
    let h_k = entropy(by_cluster.values().copied(), n);
    let h_ck = entropy(table.values().copied(), n);
    // H(C|K) = H(C,K) - H(K); I(C;K) = H(C) + H(K) - H(C,K).
    let h_c_given_k = (h_ck - h_k).max(0.0);
    let mi = (h_c + h_k - h_ck).max(0.0);

    let completeness = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let denom = (h_c * h_k).sqrt();
    let nmi = if denom == 0.0 { 0.0 } else { (mi / denom).min(1.0) };
    Ok(ClusterScores {
        purity,
        completeness: completeness.clamp(0.0, 1.0),
        nmi,
    })
}

/// Flat `key=value` evaluation summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub elbo: Option<f64>,
    pub mmd: Option<f64>,
    pub latent_nll: Option<f64>,
    pub knn_acc: Option<f64>,
    pub purity: Option<f64>,
    pub completeness: Option<f64>,
    pub nmi: Option<f64>,
    pub n_eval: usize,
}

impl EvalReport {
    pub const KEYS: [&'static str; 8] = [
        "elbo",
        "mmd",
        "latent_nll",
        "knn_acc",
        "purity",
        "completeness",
        "nmi",
        "n_eval",
    ];

    fn values(&self) -> [Option<f64>; 7] {
        [
            self.elbo,
            self.mmd,
            self.latent_nll,
            self.knn_acc,
            self.purity,
            self.completeness,
            self.nmi,
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| contract(format!("bad report line '{line}'")))?;
            let num = |v: &str| -> Result<Option<f64>> {
                if v == "na" {
                    Ok(None)
                } else {
                    v.parse()
                        .map(Some)
                        .map_err(|_| contract(format!("bad value for {k}: '{v}'")))
                }
            };
            match k {
                "elbo" => report.elbo = num(v)?,
                "mmd" => report.mmd = num(v)?,
                "latent_nll" => report.latent_nll = num(v)?,
                "knn_acc" => report.knn_acc = num(v)?,
                "purity" => report.purity = num(v)?,
                "completeness" => report.completeness = num(v)?,
                "nmi" => report.nmi = num(v)?,
                "n_eval" => {
                    report.n_eval = v
                        .parse()
                        .map_err(|_| contract(format!("bad value for n_eval: '{v}'")))?
                }
                _ => return Err(contract(format!("unknown report key '{k}'"))),
            }
        }
        Ok(report)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, value) in Self::KEYS.iter().zip(self.values()) {
            match value {
                // `{:?}` round-trips f64 exactly.
                Some(v) => writeln!(f, "{key}={v:?}")?,
                None => writeln!(f, "{key}=na")?,
            }
        }
        writeln!(f, "n_eval={}", self.n_eval)
    }
}
