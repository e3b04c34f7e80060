//! Training objectives: the wake-sleep regularized ELBO with a diffusion
//! posterior, its semi-supervised and clustering variants, and the Gaussian
//! AEVB baseline.
//!
//! All bound quantities are reported as log-likelihood-style values (higher
//! is better); the optimized loss is their negation.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};

use crate::autodiff::{adam_step, reparam_sample, AdamState, Gradients, Graph, Tensor, Var};
use crate::config::{EntropyEstimator, Fantasy, Mode, RunConfig, SleepMode};
use crate::data::DataKind;
use crate::diffusion::{
    diffusion_loss_rows, forward_path, forward_path_log_density, gaussian_kl_to_diag,
    prior_reg_rows, DiffusionPosterior, DiffusionProcess, NoiseDraws, NoiseSchedule,
    ReverseNoise,
};
use crate::error::{contract, Error, Result};
use crate::nets::{Bound, DecoderHead, Linear, MlpDecoder, MlpEncoder, ParamId, ParamStore, TimeMlp};
use crate::priors::{
    sample_in_partition, sample_with_rng, LatentPrior, PriorDensity, PriorKind, PriorSpec,
};
use crate::rng::{self, DdviRng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Bernoulli over `[0, 1]` data; the decoder emits logits.
    Bernoulli,
    /// Unit-variance Gaussian; the decoder emits means.
    Gaussian,
}

impl Likelihood {
    pub fn for_kind(kind: DataKind) -> Self {
        match kind {
            DataKind::BinaryImage => Likelihood::Bernoulli,
            DataKind::Continuous => Likelihood::Gaussian,
        }
    }

    pub fn head(self) -> DecoderHead {
        match self {
            Likelihood::Bernoulli => DecoderHead::Sigmoid,
            Likelihood::Gaussian => DecoderHead::Identity,
        }
    }
}

/// Per-row `log p(x | z)` summed over pixels. `out` holds raw decoder
/// outputs: logits for Bernoulli, means for Gaussian.
pub fn log_likelihood_rows(g: &mut Graph, lik: Likelihood, x: Var, out: Var) -> Result<Var> {
    match lik {
        Likelihood::Bernoulli => {
            if g.value(x).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(contract("Bernoulli likelihood needs data in [0, 1]"));
            }
            // x * a - softplus(a)
            let xa = g.mul(x, out)?;
            let sp = g.softplus(out);
            let ll = g.sub(xa, sp)?;
            Ok(g.sum_rows(ll))
        }
        Likelihood::Gaussian => {
            let d = g.sub(x, out)?;
            let sq = g.square(d);
            let s = g.sum_rows(sq);
            let s = g.scale(s, -0.5);
            let cols = g.value(x).cols() as f64;
            Ok(g.add_scalar(s, -0.5 * LN_2PI * cols))
        }
    }
}

/// Per-row reconstruction term, averaged over pixels.
pub fn reconstruction_rows(g: &mut Graph, lik: Likelihood, x: Var, out: Var) -> Result<Var> {
    let cols = g.value(x).cols().max(1) as f64;
    let ll = log_likelihood_rows(g, lik, x, out)?;
    Ok(g.scale(ll, 1.0 / cols))
}

/// `L_rec`: mean over batch and pixels of `log p(x | z)`.
pub fn reconstruction_loss(
    g: &mut Graph,
    decoder: &MlpDecoder,
    p: &Bound,
    lik: Likelihood,
    x: Var,
    z: Var,
) -> Result<Var> {
    let out = decoder.forward_raw(g, p, z)?;
    let rows = reconstruction_rows(g, lik, x, out)?;
    Ok(g.mean(rows))
}

/// Mean per-pixel Bernoulli log-likelihood of `x` under probabilities
/// `probs`, with `0 log 0 = 0`.
pub fn bernoulli_log_likelihood(x: &[f64], probs: &[f64]) -> Result<f64> {
    if x.len() != probs.len() || x.is_empty() {
        return Err(contract("data and probabilities must be non-empty and aligned"));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract("Bernoulli likelihood needs data in [0, 1]"));
    }
    let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * b.ln() };
    let total: f64 = x
        .iter()
        .zip(probs)
        .map(|(&x, &p)| xlogy(x, p) + xlogy(1.0 - x, 1.0 - p))
        .sum();
    Ok(total / x.len() as f64)
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn gaussian_kl_standard(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `log N(x; b, w^2 + 1)`: evidence of the model `z ~ N(0, 1)`,
/// `x | z ~ N(w z + b, 1)`.
pub fn linear_gaussian_log_evidence(x: f64, w: f64, b: f64) -> f64 {
    let var = w * w + 1.0;
    -0.5 * ((2.0 * PI * var).ln() + (x - b) * (x - b) / var)
}

/// Entropy of the exact posterior `p(z | x)` in the same model.
pub fn linear_gaussian_posterior_entropy(w: f64) -> f64 {
    0.5 * (2.0 * PI * E / (1.0 + w * w)).ln()
}

/// Index of the nearest mixture mean; ties go to the lower index.
pub fn cluster_assign(z: &[f64], spec: &PriorSpec) -> Result<usize> {
    if spec.kind != PriorKind::Mixture || spec.means.is_empty() {
        return Err(contract("cluster assignment needs a mixture prior"));
    }
    let mut best = (f64::INFINITY, 0);
    for (k, m) in spec.means.iter().enumerate() {
        if m.len() != z.len() {
            return Err(contract("latent and mixture mean dimensions differ"));
        }
        let d: f64 = m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best.1)
}

/// Terms of the objective as bound values, plus their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub reg: f64,
    /// Sleep bound estimate (≤ 0 in expectation).
    pub diff: f64,
    /// Trainable noise-prediction loss, when one was optimized.
    pub diff_surrogate: f64,
    pub total: f64,
    pub beta_reg: f64,
    pub beta_diff: f64,
}

impl LossBreakdown {
    pub fn new(rec: f64, reg: f64, diff: f64, diff_surrogate: f64, beta_reg: f64, beta_diff: f64) -> Self {
        LossBreakdown {
            rec,
            reg,
            diff,
            diff_surrogate,
            total: rec + beta_reg * reg + beta_diff * diff,
            beta_reg,
            beta_diff,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.reg, self.diff, self.diff_surrogate, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Adam over a chosen set of parameter tensors, one state per tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    lr: f64,
    states: BTreeMap<usize, AdamState>,
}

impl Optimizer {
    pub fn new(lr: f64) -> Self {
        Optimizer {
            lr,
            states: BTreeMap::new(),
        }
    }

    /// Applies to existing and future per-tensor states.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
        for s in self.states.values_mut() {
            s.lr = lr;
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bound: &Bound,
        grads: &Gradients,
        ids: &[ParamId],
    ) -> Result<()> {
        for &id in ids {
            let g = grads.get_or_zeros(bound.var(id));
            let t = store.get_mut(id);
            let state = self
                .states
                .entry(id.index())
                .or_insert_with(|| AdamState::new(t.numel(), self.lr));
            adam_step(t, g.data(), state)?;
        }
        Ok(())
    }
}

/// Every network of a run, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub store: ParamStore,
    pub posterior: DiffusionPosterior,
    pub decoder: MlpDecoder,
    /// Linear-softmax `q(l | x)` on the encoder trunk (semi-supervised).
    pub classifier: Option<Linear>,
    /// Trainable mixture means (clustering).
    pub prior_means: Option<ParamId>,
    pub likelihood: Likelihood,
}

impl Models {
    pub fn build(cfg: &RunConfig, data_dim: usize, prior: &PriorSpec, seed: u64) -> Result<Self> {
        if data_dim == 0 {
            return Err(contract("data dimension must be >= 1"));
        }
        let mut r = rng::rng(rng::derive_seed(seed, &[0x6d6f64656c]));
        let mut store = ParamStore::new();
        let d = cfg.latent_dim;
        let encoder = MlpEncoder::new(&mut store, data_dim, &cfg.enc_hidden, d, &mut r);
        let feature_dim = match cfg.cond {
            crate::diffusion::CondSource::Raw => data_dim,
            crate::diffusion::CondSource::Features => encoder.feature_dim(),
        };
        let extra = if cfg.mode == Mode::Semisup { prior.num_labels() } else { 0 };
        let eps_net = TimeMlp::new(
            &mut store,
            d,
            feature_dim + extra,
            cfg.eps_width,
            cfg.eps_layers,
            cfg.steps,
            &mut r,
        );
        let lik = Likelihood::for_kind(cfg.data_kind);
        let decoder = MlpDecoder::new(&mut store, d, &cfg.dec_hidden, data_dim, lik.head(), &mut r);
        let classifier = (cfg.mode == Mode::Semisup).then(|| {
            Linear::new(&mut store, "cls", encoder.feature_dim(), prior.num_labels(), &mut r)
        });
        let prior_means = if cfg.mode == Mode::Cluster {
            if prior.kind != PriorKind::Mixture {
                return Err(contract("cluster mode needs a mixture prior"));
            }
            Some(store.add("prior.means", Tensor::from_rows(&prior.means)?))
        } else {
            None
        };
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_min, cfg.beta_max)?;
        Ok(Models {
            posterior: DiffusionPosterior {
                encoder,
                eps_net,
                process: DiffusionProcess::new(schedule, cfg.sigma),
                cond: cfg.cond,
                extra_cond: extra,
            },
            decoder,
            classifier,
            prior_means,
            likelihood: lik,
            store,
        })
    }

    /// Generative parameters θ.
    pub fn theta(&self) -> Vec<ParamId> {
        let mut ids = self.decoder.params();
        ids.extend(self.prior_means);
        ids
    }

    /// Inference parameters φ.
    pub fn phi(&self) -> Vec<ParamId> {
        let mut ids = self.posterior.params();
        if let Some(c) = &self.classifier {
            ids.extend(c.params());
        }
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut ids = self.phi();
        ids.extend(self.theta());
        ids
    }
}

/// The prior a run trains against, built from its configuration.
pub fn build_prior(cfg: &RunConfig, seed: u64) -> Result<LatentPrior> {
    let spec = match cfg.prior_kind {
        PriorKind::Mixture => PriorSpec::mixture_on_circle(cfg.prior_clusters, cfg.prior_radius, cfg.prior_sigma),
        PriorKind::Gaussian => PriorSpec::gaussian(cfg.latent_dim),
        k => PriorSpec::named(k),
    };
    if spec.dim != cfg.latent_dim {
        return Err(contract(format!(
            "prior '{}' is {}-dimensional but model.latent = {}",
            spec.kind, spec.dim, cfg.latent_dim
        )));
    }
    let kde_seed = rng::derive_seed(seed, &[0x6b6465]);
    if cfg.mode == Mode::Semisup {
        if !spec.kind.is_structured() {
            return Err(contract("semi-supervised mode needs a partitioned prior"));
        }
        let per_label = (cfg.prior_kde_points / spec.num_labels()).max(1);
        LatentPrior::partitioned(spec, per_label, kde_seed)
    } else {
        LatentPrior::from_spec(spec, cfg.prior_kde_points, kde_seed)
    }
}

/// Models, prior and optimizer state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub models: Models,
    pub prior: LatentPrior,
    pub opt: Optimizer,
    /// Separate moments for sleep-phase and pretraining updates of φ.
    pub sleep_opt: Optimizer,
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

impl Trainer {
    pub fn new(cfg: RunConfig, data_dim: usize) -> Result<Self> {
        let prior = build_prior(&cfg, cfg.seed)?;
        let models = Models::build(&cfg, data_dim, &prior.spec, cfg.seed)?;
        Ok(Trainer {
            opt: Optimizer::new(cfg.lr),
            sleep_opt: Optimizer::new(cfg.lr),
            cfg,
            models,
            prior,
        })
    }

    fn latent_dim(&self) -> usize {
        self.models.posterior.latent_dim()
    }

    fn steps(&self) -> usize {
        self.models.posterior.process.steps()
    }

    fn num_labels(&self) -> usize {
        self.prior.spec.num_labels()
    }

    /// The prior spec with mixture means replaced by their trained values.
    pub fn current_prior_spec(&self) -> PriorSpec {
        let mut spec = self.prior.spec.clone();
        if let Some(id) = self.models.prior_means {
            spec.means = self.models.store.get(id).to_rows();
        }
        spec
    }

    fn log_prior(&self, g: &mut Graph, p: &Bound, z: Var, labels: Option<&[usize]>) -> Result<Var> {
        let means = match (self.models.prior_means, &self.prior.density) {
            (Some(id), _) => Some(p.var(id)),
            (None, PriorDensity::Mixture { .. }) => Some(g.constant(self.prior.spec_means()?)),
            _ => None,
        };
        self.prior.log_prob(g, z, means, labels)
    }

    fn sample_z(&self, n: usize, r: &mut DdviRng) -> Result<(Tensor, Vec<usize>)> {
        sample_with_rng(&self.current_prior_spec(), n, r)
    }

    fn sample_z_given(&self, labels: &[usize], r: &mut DdviRng) -> Result<Tensor> {
        let spec = self.current_prior_spec();
        let mut data = Vec::with_capacity(labels.len() * spec.dim);
        for &l in labels {
            data.extend(sample_in_partition(&spec, l, r)?);
        }
        Ok(Tensor::matrix(labels.len(), spec.dim, data))
    }

    /// Decoder outputs (probabilities or means) for `z`, without gradients.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.models.store.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let out = self.models.decoder.decode(&mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }

    /// A draw from `p(x | z)`.
    pub fn sample_x(&self, z: &Tensor, r: &mut DdviRng) -> Result<Tensor> {
        let mut x = self.decode(z)?;
        match self.models.likelihood {
            Likelihood::Bernoulli => x.data_mut().iter_mut().for_each(|v| {
                *v = if rng::uniform(r) < *v { 1.0 } else { 0.0 };
            }),
            Likelihood::Gaussian => x.data_mut().iter_mut().for_each(|v| *v += rng::normal(r)),
        }
        Ok(x)
    }

    fn fantasy(&self, z: &Tensor, r: &mut DdviRng) -> Result<Tensor> {
        match self.cfg.fantasy {
            Fantasy::Mean => self.decode(z),
            Fantasy::Sample => self.sample_x(z, r),
        }
    }

    /// Per-row sleep loss: noise prediction for `z` conditioned on `x_cond`,
    /// plus the closed-form boundary `KL(r(y_T | z) || q(y_T | x_cond))`
    /// when enabled.
    #[allow(clippy::too_many_arguments)]
    pub fn sleep_rows(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: &Tensor,
        x_cond: Var,
        extra: Option<Var>,
        draws: &NoiseDraws,
        unconditional: bool,
    ) -> Result<Var> {
        let post = &self.models.posterior;
        let zv = g.constant(z.clone());
        let cond = post.conditioning_for(g, p, x_cond, extra, unconditional)?;
        let pred = post.eps_net.with_params(p);
        let rows = diffusion_loss_rows(g, &pred, &post.process.schedule, zv, cond, draws)?;
        if !self.cfg.sleep_boundary || unconditional {
            return Ok(rows);
        }
        let abar = post.process.schedule.bar_alpha(post.process.steps());
        let enc = post.encoder.forward(g, p, x_cond)?;
        let m1 = g.scale(zv, abar.sqrt());
        let kl = gaussian_kl_to_diag(g, m1, 1.0 - abar, enc.mu, enc.logvar)?;
        g.add(rows, kl)
    }

    /// Algorithm 1 sleep phase: `m` Adam steps on φ only, each on fresh
    /// prior samples and fantasy inputs. Returns the mean sleep loss.
    pub fn sleep_phase(&mut self, m: usize, seed: u64) -> Result<f64> {
        let mut total = 0.0;
        let phi = self.models.phi();
        let (n, d, steps) = (self.cfg.batch, self.latent_dim(), self.steps());
        for i in 0..m {
            let mut r = rng::rng(rng::derive_seed(seed, &[i as u64]));
            let (z, _) = self.sample_z(n, &mut r)?;
            let x_hat = self.fantasy(&z, &mut r)?;
            let draws = NoiseDraws::from_seed(steps, d, n, rng::derive_seed(seed, &[i as u64, 1]));
            let mut g = Graph::new();
            let p = self.models.store.bind_subset(&mut g, &phi);
            let xv = g.constant(x_hat);
            let rows = self.sleep_rows(&mut g, &p, &z, xv, None, &draws, false)?;
            let loss = g.mean(rows);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite(format!("sleep loss {value} at sleep iteration {i}")));
            }
            let loss = g.scale(loss, self.cfg.beta_diff);
            let grads = g.backward(loss)?;
            self.sleep_opt.step(&mut self.models.store, &p, &grads, &phi)?;
            total += value;
        }
        Ok(if m == 0 { 0.0 } else { total / m as f64 })
    }

    /// Appendix-B latent sleep rows: `z ~ p(z)` (or `p(z | l)`), with the
    /// noise network conditioned on the real batch.
    pub fn simplified_sleep_rows(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        extra: Option<Var>,
        labels: Option<&[usize]>,
        seed: u64,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let mut r = rng::rng(seed);
        let z = match labels {
            Some(l) => self.sample_z_given(l, &mut r)?,
            None => self.sample_z(n, &mut r)?.0,
        };
        let draws = NoiseDraws::from_seed(self.steps(), self.latent_dim(), n, rng::derive_seed(seed, &[1]));
        self.sleep_rows(g, p, &z, x, extra, &draws, false)
    }

    /// Unconditional diffusion warm-up on prior samples (φ's noise network only).
    pub fn pretrain(&mut self, iters: usize, seed: u64) -> Result<()> {
        let eps_ids = self.models.posterior.eps_net.params();
        let (n, d, steps) = (self.cfg.batch, self.latent_dim(), self.steps());
        let cond_dim = self.models.posterior.eps_net.cond_dim;
        for i in 0..iters {
            let mut r = rng::rng(rng::derive_seed(seed, &[i as u64]));
            let (z, _) = self.sample_z(n, &mut r)?;
            let draws = NoiseDraws::from_seed(steps, d, n, rng::derive_seed(seed, &[i as u64, 1]));
            let mut g = Graph::new();
            let p = self.models.store.bind_subset(&mut g, &eps_ids);
            let zv = g.constant(z);
            let cond = g.constant(Tensor::zeros(n, cond_dim));
            let pred = self.models.posterior.eps_net.with_params(&p);
            let rows = diffusion_loss_rows(&mut g, &pred, &self.models.posterior.process.schedule, zv, cond, &draws)?;
            let loss = g.mean(rows);
            let grads = g.backward(loss)?;
            self.sleep_opt.step(&mut self.models.store, &p, &grads, &eps_ids)?;
        }
        Ok(())
    }

    /// Sleep-bound estimate on `n` fantasy pairs:
    /// `E[log q(y, z | x) - log r(y | z)] + E[H(p(z | x))]`.
    pub fn sleep_bound(&self, n: usize, is_samples: usize, seed: u64) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        if self.cfg.mode == Mode::Semisup {
            return Err(contract("sleep bound is not defined for label-conditioned posteriors"));
        }
        let mut r = rng::rng(seed);
        let (z, _) = self.sample_z(n, &mut r)?;
        let x_hat = self.sample_x(&z, &mut r)?;
        let post = &self.models.posterior;

        let mut g = Graph::new();
        let p = self.models.store.bind_frozen(&mut g);
        let ys = forward_path(&mut g, &post.process.schedule, &z, &mut r)?;
        let xv = g.constant(x_hat.clone());
        let enc = post.encoder.forward(&mut g, &p, xv)?;
        let cond = post.conditioning(&mut g, xv, enc.features, None, false)?;
        let lq = post.path_log_density(&mut g, &p, enc.mu, enc.logvar, cond, &ys)?;
        let lr = forward_path_log_density(&mut g, &post.process.schedule, &ys)?;
        let gap = g.sub(lq, lr)?;
        let gap = g.mean(gap);
        let cross = g.scalar(gap);

        let h = match self.cfg.entropy {
            EntropyEstimator::LinearGaussian => {
                let w = self.linear_gaussian_weight()?;
                linear_gaussian_posterior_entropy(w)
            }
            EntropyEstimator::Importance => {
                let zv = g.constant(z);
                let out = self.models.decoder.forward_raw(&mut g, &p, zv)?;
                let ll = log_likelihood_rows(&mut g, self.models.likelihood, xv, out)?;
                let lp = self.log_prior(&mut g, &p, zv, None)?;
                let joint = g.add(ll, lp)?;
                let joint = g.value(joint).data().to_vec();
                let evidence = self.log_evidence_is(&x_hat, is_samples, &mut r)?;
                joint
                    .iter()
                    .zip(&evidence)
                    .map(|(j, e)| e - j)
                    .sum::<f64>()
                    / n as f64
            }
        };
        Ok(cross + h)
    }

    /// Weight `w` of a linear decoder `x = w z + b` with one latent and one
    /// output dimension.
    pub fn linear_gaussian_weight(&self) -> Result<f64> {
        let dec = &self.models.decoder;
        if !dec.hidden.is_empty()
            || dec.latent_dim != 1
            || dec.data_dim != 1
            || self.models.likelihood != Likelihood::Gaussian
            || self.prior.spec.kind != PriorKind::Gaussian
        {
            return Err(contract(
                "closed-form entropy needs a 1-D linear Gaussian decoder and a standard-normal prior",
            ));
        }
        Ok(self.models.store.get(dec.out.w).data()[0])
    }

    /// Importance-weighted estimate of `log p(x)` per row with `k`
    /// posterior trajectories as proposals.
    pub fn log_evidence_is(&self, x: &Tensor, k: usize, r: &mut DdviRng) -> Result<Vec<f64>> {
        let n = x.rows();
        let k = k.max(1);
        let idx: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let xr = x.select_rows(&idx);
        let (d, steps) = (self.latent_dim(), self.steps());
        let noise = ReverseNoise::sample(n * k, d, steps, r);
        let mut g = Graph::new();
        let p = self.models.store.bind_frozen(&mut g);
        let xv = g.constant(xr);
        let post = &self.models.posterior;
        let s = post.sample(&mut g, &p, xv, None, false, &noise)?;
        let out = self.models.decoder.forward_raw(&mut g, &p, s.z())?;
        let ll = log_likelihood_rows(&mut g, self.models.likelihood, xv, out)?;
        let lp = self.log_prior(&mut g, &p, s.z(), None)?;
        let lr = forward_path_log_density(&mut g, &post.process.schedule, &s.ys)?;
        let lq = post.path_log_density(&mut g, &p, s.mu, s.logvar, s.cond, &s.ys)?;
        let a = g.add(ll, lp)?;
        let a = g.add(a, lr)?;
        let lw = g.sub(a, lq)?;
        let lw = g.value(lw).data();
        Ok((0..n)
            .map(|i| {
                let ws: Vec<f64> = (0..k).map(|j| lw[j * n + i]).collect();
                crate::autodiff::logsumexp(&ws) - (k as f64).ln()
            })
            .collect())
    }

    /// One unsupervised (or clustering) DDVI step: a joint Adam step on the
    /// wake objective, then the configured sleep updates. The breakdown is
    /// measured before any update.
    pub fn ddvi_step(&mut self, x: &Tensor, beta_reg: f64, seed: u64) -> Result<LossBreakdown> {
        if !matches!(self.cfg.mode, Mode::Unsup | Mode::Cluster) {
            return Err(contract("ddvi_step needs unsup or cluster mode"));
        }
        let beta_diff = self.cfg.beta_diff;
        let diff = self.sleep_bound(self.cfg.diff_samples, self.cfg.is_samples, rng::derive_seed(seed, &[3]))?;

        let (n, d, steps) = (x.rows(), self.latent_dim(), self.steps());
        if n == 0 {
            return Err(contract("training batch is empty"));
        }
        let mut r = rng::rng(rng::derive_seed(seed, &[0]));
        let noise = ReverseNoise::sample(n, d, steps, &mut r);
        let ids = self.models.all_params();
        let mut g = Graph::new();
        let p = self.models.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let post = &self.models.posterior;
        let s = post.sample(&mut g, &p, xv, None, false, &noise)?;
        let out = self.models.decoder.forward_raw(&mut g, &p, s.z())?;
        let rec_rows = reconstruction_rows(&mut g, self.models.likelihood, xv, out)?;
        let lp = self.log_prior(&mut g, &p, s.z(), None)?;
        let reg_rows = prior_reg_rows(&mut g, &post.process, &s, lp)?;
        let rec = g.mean(rec_rows);
        let reg = g.mean(reg_rows);
        let weighted = g.scale(reg, beta_reg);
        let bound = g.add(rec, weighted)?;
        let mut loss = g.neg(bound);

        let mut surrogate = 0.0;
        if self.cfg.sleep == SleepMode::Simplified && beta_diff > 0.0 {
            let rows = self.simplified_sleep_rows(&mut g, &p, xv, None, None, rng::derive_seed(seed, &[1]))?;
            let sl = g.mean(rows);
            surrogate = g.scalar(sl);
            let sl = g.scale(sl, beta_diff);
            loss = g.add(loss, sl)?;
        }
        let (rec_v, reg_v, loss_v) = (g.scalar(rec), g.scalar(reg), g.scalar(loss));
        if !loss_v.is_finite() {
            return Err(non_finite(format!("rec {rec_v}, reg {reg_v}, loss {loss_v}")));
        }
        let grads = g.backward(loss)?;
        self.opt.step(&mut self.models.store, &p, &grads, &ids)?;

        if self.cfg.sleep == SleepMode::Alternating && beta_diff > 0.0 {
            surrogate = self.sleep_phase(self.cfg.sleep_iters, rng::derive_seed(seed, &[2]))?;
        }
        Ok(LossBreakdown::new(rec_v, reg_v, diff, surrogate, beta_reg, beta_diff))
    }

    /// Scalar pieces of the semi-supervised objective, as graph nodes.
    ///
    /// `semi` is the mean over items of `L_semi(x, l)` (labeled) or
    /// `sum_l q(l|x) L_semi(x, l) + KL(q(l|x) || uniform)` (unlabeled);
    /// `ce` is the mean cross-entropy of `q(l|x)` on labeled items.
    pub fn semi_supervised_terms(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &Tensor,
        labels: &[Option<usize>],
        beta_reg: f64,
        seed: u64,
    ) -> Result<SemiTerms> {
        let n = x.rows();
        if labels.len() != n {
            return Err(contract("one label slot per item required"));
        }
        if n == 0 {
            return Err(contract("training batch is empty"));
        }
        let k = self.num_labels();
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= k) {
            return Err(contract(format!("label {bad} outside 0..{k}")));
        }
        let classifier = self
            .models
            .classifier
            .as_ref()
            .ok_or_else(|| contract("semi-supervised loss needs a classifier head"))?;
        let lab: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
        let unl: Vec<usize> = (0..n).filter(|&i| labels[i].is_none()).collect();
        let (nl, nu) = (lab.len(), unl.len());

        // Labeled rows first, then every unlabeled item once per label
        // (label-major).
        let mut rows_idx = lab.clone();
        let mut rows_lab: Vec<usize> = lab.iter().map(|&i| labels[i].expect("labeled")).collect();
        for l in 0..k {
            rows_idx.extend(&unl);
            rows_lab.extend(std::iter::repeat_n(l, nu));
        }
        let total_rows = rows_idx.len();
        let xr = g.constant(x.select_rows(&rows_idx));
        let extra = g.constant(one_hot(&rows_lab, k));

        let mut r = rng::rng(rng::derive_seed(seed, &[0]));
        let noise = ReverseNoise::sample(total_rows, self.latent_dim(), self.steps(), &mut r);
        let post = &self.models.posterior;
        let s = post.sample(g, p, xr, Some(extra), false, &noise)?;
        let out = self.models.decoder.forward_raw(g, p, s.z())?;
        let rec_rows = reconstruction_rows(g, self.models.likelihood, xr, out)?;
        let lp = self.log_prior(g, p, s.z(), Some(&rows_lab))?;
        let reg_rows = prior_reg_rows(g, &post.process, &s, lp)?;
        let weighted = g.scale(reg_rows, beta_reg);
        let bound_rows = g.add(rec_rows, weighted)?;
        let mut loss_rows = g.neg(bound_rows);
        if self.cfg.sleep == SleepMode::Simplified && self.cfg.beta_diff > 0.0 {
            let sl = self.simplified_sleep_rows(g, p, xr, Some(extra), Some(&rows_lab), rng::derive_seed(seed, &[1]))?;
            let sl = g.scale(sl, self.cfg.beta_diff);
            loss_rows = g.add(loss_rows, sl)?;
        }

        let mut semi_sum: Option<Var> = None;
        let mut acc = |g: &mut Graph, v: Var| -> Result<()> {
            semi_sum = Some(match semi_sum {
                None => v,
                Some(a) => g.add(a, v)?,
            });
            Ok(())
        };
        let mut ce = None;
        if nl > 0 {
            let idx: Vec<usize> = (0..nl).collect();
            let lr = g.gather_rows(loss_rows, &idx)?;
            let s = g.sum(lr);
            acc(g, s)?;

            let xl = g.constant(x.select_rows(&lab));
            let log_q = self.classifier_log_probs(g, p, classifier, xl)?;
            let mask = g.constant(one_hot(&rows_lab[..nl], k));
            let picked = g.mul(log_q, mask)?;
            let picked = g.sum(picked);
            ce = Some(g.scale(picked, -1.0 / nl as f64));
        }
        if nu > 0 {
            let mut table: Option<Var> = None;
            for l in 0..k {
                let idx: Vec<usize> = (0..nu).map(|i| nl + l * nu + i).collect();
                let col = g.gather_rows(loss_rows, &idx)?;
                table = Some(match table {
                    None => col,
                    Some(t) => g.concat_cols(t, col)?,
                });
            }
            let table = table.expect("at least one label");
            let xu = g.constant(x.select_rows(&unl));
            let log_q = self.classifier_log_probs(g, p, classifier, xu)?;
            let q = g.exp(log_q);
            let weighted = g.mul(q, table)?;
            // KL(q || uniform) = sum q log q + log k
            let qlogq = g.mul(q, log_q)?;
            let u = g.add(weighted, qlogq)?;
            let u = g.sum(u);
            let u = g.add_scalar(u, nu as f64 * (k as f64).ln());
            acc(g, u)?;
        }
        let semi = semi_sum.expect("non-empty batch");
        let semi = g.scale(semi, 1.0 / n as f64);
        let ce = match ce {
            Some(c) => c,
            None => g.constant_scalar(0.0),
        };
        let weighted_ce = g.scale(ce, self.cfg.alpha);
        let loss = g.add(semi, weighted_ce)?;
        Ok(SemiTerms { loss, semi, ce })
    }

    fn classifier_log_probs(&self, g: &mut Graph, p: &Bound, classifier: &Linear, x: Var) -> Result<Var> {
        let feats = self.models.posterior.encoder.forward(g, p, x)?.features;
        let logits = classifier.forward(g, p, feats)?;
        let lse = g.logsumexp_rows(logits);
        let neg = g.neg(lse);
        g.add_col(logits, neg)
    }

    /// Class probabilities `q(l | x)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let classifier = self
            .models
            .classifier
            .as_ref()
            .ok_or_else(|| contract("model has no classifier head"))?;
        let mut g = Graph::new();
        let p = self.models.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let lq = self.classifier_log_probs(&mut g, &p, classifier, xv)?;
        let q = g.exp(lq);
        Ok(g.value(q).clone())
    }

    /// One semi-supervised Adam step; returns the loss before the update.
    pub fn semisup_step(&mut self, x: &Tensor, labels: &[Option<usize>], beta_reg: f64, seed: u64) -> Result<LossBreakdown> {
        let ids = self.models.all_params();
        let mut g = Graph::new();
        let p = self.models.store.bind(&mut g);
        let terms = self.semi_supervised_terms(&mut g, &p, x, labels, beta_reg, seed)?;
        let (semi, ce) = (g.scalar(terms.semi), g.scalar(terms.ce));
        if !(semi.is_finite() && ce.is_finite()) {
            return Err(non_finite(format!("semi {semi}, ce {ce}")));
        }
        let grads = g.backward(terms.loss)?;
        self.opt.step(&mut self.models.store, &p, &grads, &ids)?;
        // The semi-supervised objective is reported as a single bound value.
        Ok(LossBreakdown {
            rec: -semi,
            reg: 0.0,
            diff: 0.0,
            diff_surrogate: ce,
            total: -semi,
            beta_reg,
            beta_diff: 0.0,
        })
    }

    /// AEVB baseline step with a diagonal Gaussian posterior `N(mu, exp(logvar))`.
    pub fn aevb_step(&mut self, x: &Tensor, kl_weight: f64, seed: u64) -> Result<LossBreakdown> {
        let ids: Vec<ParamId> = {
            let mut v = self.models.posterior.encoder.params();
            v.extend(self.models.theta());
            v
        };
        let mut g = Graph::new();
        let p = self.models.store.bind_subset(&mut g, &ids);
        let (rec, reg) = self.aevb_terms(&mut g, &p, x, seed)?;
        let weighted = g.scale(reg, kl_weight);
        let bound = g.add(rec, weighted)?;
        let loss = g.neg(bound);
        let (rec_v, reg_v) = (g.scalar(rec), g.scalar(reg));
        if !g.scalar(loss).is_finite() {
            return Err(non_finite(format!("rec {rec_v}, reg {reg_v}")));
        }
        let grads = g.backward(loss)?;
        self.opt.step(&mut self.models.store, &p, &grads, &ids)?;
        Ok(LossBreakdown::new(rec_v, reg_v, 0.0, 0.0, kl_weight, 0.0))
    }

    /// `(L_rec, reg)` of the Gaussian-posterior baseline: `reg` is `-KL`
    /// against a standard normal, or `w E[log p(z)] + H(q)` otherwise.
    pub fn aevb_terms(&self, g: &mut Graph, p: &Bound, x: &Tensor, seed: u64) -> Result<(Var, Var)> {
        let n = x.rows();
        if n == 0 {
            return Err(contract("training batch is empty"));
        }
        let d = self.latent_dim();
        let mut r = rng::rng(seed);
        let xv = g.constant(x.clone());
        let enc = self.models.posterior.encoder.forward(g, p, xv)?;
        let eps = g.constant(Tensor::matrix(n, d, rng::normals(&mut r, n * d)));
        let z = reparam_sample(g, enc.mu, enc.logvar, eps)?;
        let out = self.models.decoder.forward_raw(g, p, z)?;
        let rec_rows = reconstruction_rows(g, self.models.likelihood, xv, out)?;
        let rec = g.mean(rec_rows);
        let reg_rows = match self.prior.density {
            PriorDensity::StandardNormal => {
                // -KL = 0.5 sum(1 + logvar - mu^2 - exp(logvar))
                let mu2 = g.square(enc.mu);
                let var = g.exp(enc.logvar);
                let a = g.sub(enc.logvar, mu2)?;
                let a = g.sub(a, var)?;
                let a = g.add_scalar(a, 1.0);
                let s = g.sum_rows(a);
                g.scale(s, 0.5)
            }
            _ => {
                let lp = self.log_prior(g, p, z, None)?;
                let lp = g.scale(lp, self.cfg.prior_weight);
                let h = g.sum_rows(enc.logvar);
                let h = g.scale(h, 0.5);
                let h = g.add_scalar(h, 0.5 * d as f64 * (1.0 + LN_2PI));
                g.add(lp, h)?
            }
        };
        let reg = g.mean(reg_rows);
        Ok((rec, reg))
    }

    /// Bound evaluation on `x` with `n_mc` posterior draws per item. The
    /// regularizer uses per-trajectory `log q` rather than the analytic
    /// entropy: same expectation, lower variance.
    pub fn evaluate_bound(&self, x: &Tensor, n_mc: usize, beta_reg: f64, seed: u64) -> Result<LossBreakdown> {
        let n = x.rows();
        if n == 0 {
            return Err(contract("evaluation set is empty"));
        }
        let n_mc = n_mc.max(1);
        match self.cfg.mode {
            Mode::Aevb => {
                let (mut rec, mut reg) = (0.0, 0.0);
                for j in 0..n_mc {
                    let mut g = Graph::new();
                    let p = self.models.store.bind_frozen(&mut g);
                    let (a, b) = self.aevb_terms(&mut g, &p, x, rng::derive_seed(seed, &[j as u64]))?;
                    rec += g.scalar(a);
                    reg += g.scalar(b);
                }
                let m = n_mc as f64;
                Ok(LossBreakdown::new(rec / m, reg / m, 0.0, 0.0, beta_reg, 0.0))
            }
            Mode::Semisup => {
                let mut total = 0.0;
                let unlabeled = vec![None; n];
                for j in 0..n_mc {
                    let mut g = Graph::new();
                    let p = self.models.store.bind_frozen(&mut g);
                    let t = self.semi_supervised_terms(&mut g, &p, x, &unlabeled, beta_reg, rng::derive_seed(seed, &[j as u64]))?;
                    total += g.scalar(t.semi);
                }
                let v = -total / n_mc as f64;
                Ok(LossBreakdown { rec: v, reg: 0.0, diff: 0.0, diff_surrogate: 0.0, total: v, beta_reg, beta_diff: 0.0 })
            }
            Mode::Unsup | Mode::Cluster => {
                let idx: Vec<usize> = (0..n_mc).flat_map(|_| 0..n).collect();
                let xr = x.select_rows(&idx);
                let mut r = rng::rng(rng::derive_seed(seed, &[0]));
                let noise = ReverseNoise::sample(xr.rows(), self.latent_dim(), self.steps(), &mut r);
                let mut g = Graph::new();
                let p = self.models.store.bind_frozen(&mut g);
                let xv = g.constant(xr);
                let post = &self.models.posterior;
                let s = post.sample(&mut g, &p, xv, None, false, &noise)?;
                let out = self.models.decoder.forward_raw(&mut g, &p, s.z())?;
                let rec = reconstruction_rows(&mut g, self.models.likelihood, xv, out)?;
                let rec = g.mean(rec);
                let lp = self.log_prior(&mut g, &p, s.z(), None)?;
                let lr = forward_path_log_density(&mut g, &post.process.schedule, &s.ys)?;
                let lq = post.path_log_density(&mut g, &p, s.mu, s.logvar, s.cond, &s.ys)?;
                let a = g.add(lp, lr)?;
                let reg = g.sub(a, lq)?;
                let reg = g.mean(reg);
                let diff = self.sleep_bound(self.cfg.diff_samples, self.cfg.is_samples, rng::derive_seed(seed, &[1]))?;
                Ok(LossBreakdown::new(g.scalar(rec), g.scalar(reg), diff, 0.0, beta_reg, self.cfg.beta_diff))
            }
        }
    }

    /// One posterior latent per row of `x`. Semi-supervised models condition
    /// on the classifier's most probable label.
    pub fn encode(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let n = x.rows();
        let d = self.latent_dim();
        let mut r = rng::rng(seed);
        if self.cfg.mode == Mode::Aevb {
            let mut g = Graph::new();
            let p = self.models.store.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let enc = self.models.posterior.encoder.forward(&mut g, &p, xv)?;
            let eps = g.constant(Tensor::matrix(n, d, rng::normals(&mut r, n * d)));
            let z = reparam_sample(&mut g, enc.mu, enc.logvar, eps)?;
            return Ok(g.value(z).clone());
        }
        let extra = if self.cfg.mode == Mode::Semisup {
            let q = self.classify(x)?;
            let k = q.cols();
            let pred: Vec<usize> = (0..n)
                .map(|i| {
                    let row = q.row_slice(i);
                    (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b })
                })
                .collect();
            Some(one_hot(&pred, k))
        } else {
            None
        };
        let noise = ReverseNoise::sample(n, d, self.steps(), &mut r);
        let out = crate::diffusion::reverse_sample(
            &self.models.posterior,
            |g| self.models.store.bind_frozen(g),
            x,
            extra.as_ref(),
            &noise,
        )?;
        Ok(out.z)
    }

    /// Decoder means for `n` prior draws.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut r = rng::rng(seed);
        let (z, _) = self.sample_z(n, &mut r)?;
        self.decode(&z)
    }
}

/// Graph nodes of the semi-supervised objective.
pub struct SemiTerms {
    /// `semi + alpha * ce`.
    pub loss: Var,
    pub semi: Var,
    pub ce: Var,
}

fn non_finite(detail: String) -> Error {
    Error::NonFinite {
        epoch: 0,
        batch: 0,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_edge_cases() {
        assert_eq!(bernoulli_log_likelihood(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = bernoulli_log_likelihood(&[0.0, 1.0, 1.0], &[0.5; 3]).unwrap();
        assert!((v + 2f64.ln()).abs() < 1e-15);
        assert!(bernoulli_log_likelihood(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn gaussian_reconstruction_offset_by_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 4.0]));
        let out = g.add_scalar(x, 1.0);
        let rows = reconstruction_rows(&mut g, Likelihood::Gaussian, x, out).unwrap();
        let m = g.mean(rows);
        assert!((g.scalar(m) - (-0.5 - 0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_rows_reject_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[2.0]));
        let a = g.constant(Tensor::row(&[0.0]));
        assert!(log_likelihood_rows(&mut g, Likelihood::Bernoulli, x, a).is_err());
    }

    #[test]
    fn analytic_kl() {
        assert_eq!(gaussian_kl_standard(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((gaussian_kl_standard(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cluster_assignment_rules() {
        let spec = PriorSpec::mixture_on_circle(8, 1.0, 0.1);
        let m7 = spec.means[7].clone();
        assert_eq!(cluster_assign(&m7, &spec).unwrap(), 7);
        let mut s = spec.clone();
        s.means = vec![vec![9.0, 9.0], vec![9.0, 9.0], vec![-1.0, 0.0], vec![9.0, 9.0], vec![9.0, 9.0], vec![1.0, 0.0]];
        assert_eq!(cluster_assign(&[0.0, 0.0], &s).unwrap(), 2);
        assert!(cluster_assign(&[0.0, 0.0], &PriorSpec::pinwheel()).is_err());
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(-0.7, -3.1, -0.02, 0.4, 0.003, 1.0);
        assert_eq!(b.total, -0.7 + 0.003 * -3.1 + 1.0 * -0.02);
    }

    #[test]
    fn linear_gaussian_closed_forms() {
        // w = 0: evidence is N(b, 1), posterior is the prior.
        assert!((linear_gaussian_log_evidence(0.5, 0.0, 0.5) + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((linear_gaussian_posterior_entropy(0.0) - 0.5 * (1.0 + LN_2PI)).abs() < 1e-15);
    }
}
