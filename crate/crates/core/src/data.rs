//! Dataset loading: IDX images, delimited matrices, PCA and synthetic lifts.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};
use crate::priors::{sample_prior, PriorSpec};
use crate::rng;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Values in `[0, 1]`, modelled with a Bernoulli likelihood.
    BinaryImage,
    Continuous,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "binary_image" => Ok(DataKind::BinaryImage),
            "continuous" => Ok(DataKind::Continuous),
            other => Err(contract(format!("unknown data kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Tensor,
    pub labels: Option<Vec<usize>>,
    pub kind: DataKind,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    /// Rows `idx`, with labels carried along.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            items: self.items.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            kind: self.kind,
            name: self.name.clone(),
        }
    }

    /// Splits off the last `n_test` rows.
    pub fn split(&self, n_test: usize) -> (Dataset, Dataset) {
        let n_test = n_test.min(self.len());
        let cut = self.len() - n_test;
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&train), self.subset(&test))
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.into(),
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Decodes an IDX image container into an `n x (rows * cols)` matrix in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: IDX_IMAGES,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < pixels {
        return Err(Error::Truncated {
            path: path.into(),
            needed: 16 + pixels,
            available: bytes.len(),
        });
    }
    let data = payload[..pixels].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::matrix(n, rows * cols, data))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: IDX_LABELS,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.into(),
            needed: 8 + n,
            available: bytes.len(),
        });
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let ipath = images.display().to_string();
    let items = parse_idx_images(&std::fs::read(images)?, &ipath)?;
    let labels = match labels {
        None => None,
        Some(p) => {
            let l = parse_idx_labels(&std::fs::read(p)?, &p.display().to_string())?;
            if l.len() != items.rows() {
                return Err(Error::CountMismatch {
                    images: items.rows(),
                    labels: l.len(),
                });
            }
            Some(l)
        }
    };
    Ok(Dataset {
        items,
        labels,
        kind: DataKind::BinaryImage,
        name: ipath,
    })
}

/// Parses a rectangular numeric table. With `label_column`, the last column
/// holds non-negative integer labels.
pub fn parse_matrix_csv<R: std::io::Read>(
    reader: R,
    delimiter: u8,
    label_column: bool,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", width.unwrap_or(0), rec.len()),
            });
        }
        let mut fields: Vec<&str> = rec.iter().collect();
        if label_column {
            let l = fields.pop().ok_or_else(|| Error::Parse {
                row,
                msg: "missing label column".into(),
            })?;
            labels.push(l.parse::<usize>().map_err(|_| Error::Parse {
                row,
                msg: format!("label '{l}' is not a non-negative integer"),
            })?);
        }
        for f in fields {
            data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("cell '{f}' is not a number"),
            })?);
        }
        n += 1;
    }
    let cols = width.map_or(0, |w| w - usize::from(label_column));
    Ok((
        Tensor::matrix(n, cols, data),
        label_column.then_some(labels),
    ))
}

pub fn load_matrix_csv(path: &Path, delimiter: u8, label_column: bool) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let (items, labels) = parse_matrix_csv(f, delimiter, label_column)?;
    Ok(Dataset {
        items,
        labels,
        kind: DataKind::Continuous,
        name: path.display().to_string(),
    })
}

/// Writes rows with full round-trip precision.
pub fn write_matrix_csv<W: Write>(
    mut w: W,
    items: &Tensor,
    labels: Option<&[usize]>,
    delimiter: u8,
) -> Result<()> {
    let sep = delimiter as char;
    for r in 0..items.rows() {
        let mut line = items
            .row_slice(r)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(&sep.to_string());
        if let Some(l) = labels {
            line.push(sep);
            line.push_str(&l[r].to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n x k` centred (and scaled) projection.
    pub projected: Tensor,
    /// `D x k`, orthonormal columns.
    pub basis: Tensor,
    /// Sample variances along each component, non-increasing.
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
    /// Total sample variance of the data.
    pub total_variance: f64,
    pub divisor: f64,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Maps the projection back to data space.
    pub fn reconstruct(&self) -> Tensor {
        let (n, k, d) = (self.projected.rows(), self.basis.cols(), self.basis.rows());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut s = self.mean[j];
                for c in 0..k {
                    s += self.projected.get(i, c) * self.divisor * self.basis.get(j, c);
                }
                out[i * d + j] = s;
            }
        }
        Tensor::matrix(n, d, out)
    }
}

/// Dimension above which PCA avoids forming the covariance matrix.
pub const DENSE_PCA_MAX_DIM: usize = 2000;

/// Mean-centred projection onto the top `k` principal directions, divided by
/// `divisor` afterwards.
pub fn pca_project(x: &Tensor, k: usize, divisor: f64) -> Result<Pca> {
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > n.min(d) {
        return Err(contract(format!("k = {k} outside 1..={}", n.min(d))));
    }
    if !(divisor > 0.0) {
        return Err(contract("PCA divisor must be positive"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row_slice(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let total_variance = centred.iter().map(|v| v * v).sum::<f64>() / denom;

    let (basis, variances) = if d <= DENSE_PCA_MAX_DIM {
        let cov = centred.transpose() * &centred / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let basis = DMatrix::from_fn(d, k, |i, c| eig.eigenvectors[(i, order[c])]);
        let vars = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
        (basis, vars)
    } else {
        subspace_iteration(&centred, k, denom)
    };
    let basis = canonical_signs(basis);

    let proj = &centred * &basis / divisor;
    Ok(Pca {
        projected: Tensor::matrix(n, k, proj.transpose().iter().copied().collect()),
        basis: Tensor::matrix(d, k, basis.transpose().iter().copied().collect()),
        variances,
        mean,
        total_variance,
        divisor,
    })
}

/// Flips each column so its largest-magnitude entry is positive.
fn canonical_signs(mut basis: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in basis.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    basis
}

/// Top-`k` eigenpairs of `X^T X / denom` by orthogonal iteration, never
/// forming the `D x D` matrix.
fn subspace_iteration(x: &DMatrix<f64>, k: usize, denom: f64) -> (DMatrix<f64>, Vec<f64>) {
    let d = x.ncols();
    let mut r = rng::rng(0x9ca);
    let mut q = DMatrix::from_fn(d, k, |_, _| rng::normal(&mut r)).qr().q();
    let mut prev = vec![0.0; k];
    for _ in 0..10_000 {
        let z = x.transpose() * (x * &q) / denom;
        let qr = z.clone().qr();
        let next = qr.q();
        // Rayleigh quotients as current eigenvalue estimates.
        let az = x.transpose() * (x * &next) / denom;
        let vals: Vec<f64> = (0..k).map(|c| next.column(c).dot(&az.column(c))).collect();
        let residual = (0..k)
            .map(|c| (az.column(c) - next.column(c) * vals[c]).norm())
            .fold(0.0, f64::max);
        q = next;
        let settled = vals.iter().zip(&prev).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prev = vals;
        if residual < 1e-9 || settled {
            break;
        }
    }
    (q, prev.into_iter().map(|v| v.max(0.0)).collect())
}

/// A fixed random two-layer map from latents to data space.
#[derive(Clone, Debug, PartialEq)]
pub struct Lift {
    pub hidden: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for Lift {
    fn default() -> Self {
        Lift {
            hidden: 64,
            out_dim: 32,
            seed: 1234,
        }
    }
}

impl Lift {
    /// `W2 tanh(W1 z + b1)`, optionally passed through a sigmoid.
    pub fn apply(&self, z: &Tensor, sigmoid: bool) -> Tensor {
        let d = z.cols();
        let mut r = rng::rng(self.seed);
        let w1: Vec<f64> = rng::normals(&mut r, d * self.hidden).iter().map(|v| 2.5 * v).collect();
        let b1: Vec<f64> = (0..self.hidden).map(|_| 2.0 * rng::uniform(&mut r) - 1.0).collect();
        let scale = 3.0 / (self.hidden as f64).sqrt();
        let w2: Vec<f64> = rng::normals(&mut r, self.hidden * self.out_dim)
            .iter()
            .map(|v| scale * v)
            .collect();
        let mut out = Vec::with_capacity(z.rows() * self.out_dim);
        let mut h = vec![0.0; self.hidden];
        for i in 0..z.rows() {
            let zi = z.row_slice(i);
            for (j, hj) in h.iter_mut().enumerate() {
                let s: f64 = (0..d).map(|a| zi[a] * w1[a * self.hidden + j]).sum();
                *hj = (s + b1[j]).tanh();
            }
            for o in 0..self.out_dim {
                let v: f64 = (0..self.hidden).map(|j| h[j] * w2[j * self.out_dim + o]).sum();
                out.push(if sigmoid { 1.0 / (1.0 + (-v).exp()) } else { v });
            }
        }
        Tensor::matrix(z.rows(), self.out_dim, out)
    }
}

/// Prior samples pushed through `lift`; labels are the prior's partitions.
pub fn make_synthetic(
    prior: &PriorSpec,
    lift: &Lift,
    kind: DataKind,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let (z, labels) = sample_prior(prior, n, seed)?;
    let items = lift.apply(&z, kind == DataKind::BinaryImage);
    Ok(Dataset {
        items,
        labels: Some(labels),
        kind,
        name: format!("synthetic-{}", prior.kind),
    })
}
