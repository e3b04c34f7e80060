//! Gaussian forward noising process and the diffusion-parameterized posterior.
//!
//! Indexing: `y_0 = z`, `y_1 .. y_T` are progressively noised latents and the
//! forward kernel is `r(y_t | y_{t-1}) = N(sqrt(alpha_t) y_{t-1}, beta_t I)`.
//! The posterior runs the chain backwards: the encoder proposes `y_T`, then
//! `T` Gaussian denoising steps produce `z`.

use std::f64::consts::PI;

use crate::autodiff::{reparam_sample, Graph, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::nets::{Bound, MlpEncoder, NoisePredictor, ParamId, TimeMlp};
use crate::rng::{self, DdviRng};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// `betas[t - 1]` is `beta_t`.
    betas: Vec<f64>,
    /// `bar_alphas[t]` for `t in 0..=T`, with `bar_alphas[0] = 1`.
    bar_alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(contract("noise schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(contract("every beta_t must lie in (0, 1)"));
        }
        let mut bar_alphas = Vec::with_capacity(betas.len() + 1);
        bar_alphas.push(1.0);
        for b in &betas {
            let prev = *bar_alphas.last().expect("non-empty");
            bar_alphas.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, bar_alphas })
    }

    /// Betas linear from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(contract("noise schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn bar_alpha(&self, t: usize) -> f64 {
        self.bar_alphas[t]
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            return Err(contract(format!(
                "timestep {t} outside {}..={}",
                if allow_zero { 0 } else { 1 },
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Variance of each reverse transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// The same standard deviation at every step.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionProcess {
    pub schedule: NoiseSchedule,
    pub sigma: SigmaMode,
}

impl DiffusionProcess {
    pub fn new(schedule: NoiseSchedule, sigma: SigmaMode) -> Self {
        DiffusionProcess { schedule, sigma }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Reverse-step standard deviation `sigma_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.sigma {
            SigmaMode::Beta => self.schedule.beta(t).sqrt(),
            SigmaMode::Constant(s) => s,
        }
    }
}

/// `sqrt(bar_alpha_t) z + sqrt(1 - bar_alpha_t) noise`; `t = 0` returns `z`.
pub fn forward_marginal(
    schedule: &NoiseSchedule,
    z: &[f64],
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t, true)?;
    if z.len() != noise.len() {
        return Err(contract("latent and noise lengths differ"));
    }
    let a = schedule.bar_alpha(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.iter().zip(noise).map(|(z, e)| sa * z + sn * e).collect())
}

/// One forward kernel step `sqrt(alpha_t) y + sqrt(beta_t) noise`.
pub fn forward_step(
    schedule: &NoiseSchedule,
    y_prev: &[f64],
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t, false)?;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    Ok(y_prev.iter().zip(noise).map(|(y, e)| a * y + b * e).collect())
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::matrix(n, 1, values)
}

/// Graph form of [`forward_marginal`] with a timestep per row.
pub fn forward_marginal_graph(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    z: Var,
    t: &[usize],
    noise: Var,
) -> Result<Var> {
    if t.len() != g.value(z).rows() {
        return Err(contract("one timestep per row required"));
    }
    for &s in t {
        schedule.check_step(s, true)?;
    }
    let sa = g.constant(column(t.iter().map(|&s| schedule.bar_alpha(s).sqrt()).collect()));
    let sn = g.constant(column(
        t.iter()
            .map(|&s| (1.0 - schedule.bar_alpha(s)).sqrt())
            .collect(),
    ));
    let a = g.mul_col(z, sa)?;
    let b = g.mul_col(noise, sn)?;
    g.add(a, b)
}

/// Draws of timesteps and noise used by one noise-prediction loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub noise: Tensor,
}

impl NoiseDraws {
    /// One uniform `t in 1..=T` and one standard normal vector per element,
    /// each from its own seed.
    pub fn from_element_seeds(steps: usize, dim: usize, seeds: &[u64]) -> Self {
        let mut t = Vec::with_capacity(seeds.len());
        let mut noise = Vec::with_capacity(seeds.len() * dim);
        for &s in seeds {
            let mut r = rng::rng(s);
            t.push(rng::uniform_int(&mut r, 1, steps));
            noise.extend(rng::normals(&mut r, dim));
        }
        NoiseDraws {
            t,
            noise: Tensor::matrix(seeds.len(), dim, noise),
        }
    }

    pub fn from_seed(steps: usize, dim: usize, n: usize, seed: u64) -> Self {
        let seeds: Vec<u64> = (0..n as u64).map(|i| rng::derive_seed(seed, &[i])).collect();
        Self::from_element_seeds(steps, dim, &seeds)
    }
}

/// Mean over rows of `||eps - eps_hat(y_t, cond, t)||^2`.
pub fn diffusion_loss(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z: Var,
    cond: Var,
    draws: &NoiseDraws,
) -> Result<Var> {
    let rows = diffusion_loss_rows(g, predictor, schedule, z, cond, draws)?;
    Ok(g.mean(rows))
}

/// Per-row `||eps - eps_hat||^2` as an `n x 1` column.
pub fn diffusion_loss_rows(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z: Var,
    cond: Var,
    draws: &NoiseDraws,
) -> Result<Var> {
    let n = g.value(z).rows();
    if n == 0 {
        return Err(contract("diffusion loss needs a non-empty batch"));
    }
    if draws.t.len() != n || draws.noise.shape() != g.value(z).shape() {
        return Err(contract("noise draws do not match the batch"));
    }
    let eps = g.constant(draws.noise.clone());
    let y_t = forward_marginal_graph(g, schedule, z, &draws.t, eps)?;
    let eps_hat = predictor.predict(g, y_t, cond, &draws.t)?;
    let diff = g.sub(eps, eps_hat)?;
    let sq = g.square(diff);
    Ok(g.sum_rows(sq))
}

/// Standard-normal draws for every stochastic step of a reverse chain.
#[derive(Clone, Debug)]
pub struct ReverseNoise {
    /// Noise for the encoder sample `y_T`.
    pub initial: Tensor,
    /// `steps[t - 1]` perturbs the step from `y_t` to `y_{t-1}`.
    pub steps: Vec<Tensor>,
}

impl ReverseNoise {
    pub fn sample(n: usize, dim: usize, steps: usize, rng: &mut DdviRng) -> Self {
        let initial = Tensor::matrix(n, dim, rng::normals(rng, n * dim));
        let steps = (0..steps)
            .map(|_| Tensor::matrix(n, dim, rng::normals(rng, n * dim)))
            .collect();
        ReverseNoise { initial, steps }
    }

    pub fn zeros(n: usize, dim: usize, steps: usize) -> Self {
        ReverseNoise {
            initial: Tensor::zeros(n, dim),
            steps: (0..steps).map(|_| Tensor::zeros(n, dim)).collect(),
        }
    }
}

/// Runs `y_T -> ... -> y_0`. Returns `[y_T, y_{T-1}, ..., y_0]`.
///
/// `mu = (y_t - beta_t / sqrt(1 - bar_alpha_t) eps_hat) / sqrt(alpha_t)` and
/// `y_{t-1} = mu + sigma_t eta`.
pub fn reverse_chain(
    g: &mut Graph,
    process: &DiffusionProcess,
    predictor: &dyn NoisePredictor,
    y_top: Var,
    cond: Var,
    step_noise: &[Tensor],
) -> Result<Vec<Var>> {
    Ok(reverse_chain_with_means(g, process, predictor, y_top, cond, step_noise)?.0)
}

/// [`reverse_chain`] that also returns each step's mean; `means[k]` is the
/// mean of `ys[k + 1]`.
pub fn reverse_chain_with_means(
    g: &mut Graph,
    process: &DiffusionProcess,
    predictor: &dyn NoisePredictor,
    y_top: Var,
    cond: Var,
    step_noise: &[Tensor],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let steps = process.steps();
    if step_noise.len() != steps {
        return Err(contract("need one noise tensor per reverse step"));
    }
    let n = g.value(y_top).rows();
    let mut ys = Vec::with_capacity(steps + 1);
    let mut means = Vec::with_capacity(steps);
    ys.push(y_top);
    let mut y = y_top;
    for t in (1..=steps).rev() {
        let mean = reverse_mean(g, process, predictor, y, cond, t, n)?;
        means.push(mean);
        let sigma = process.sigma(t);
        y = if sigma == 0.0 {
            mean
        } else {
            let eta = g.constant(step_noise[t - 1].clone());
            let eta = g.scale(eta, sigma);
            g.add(mean, eta)?
        };
        ys.push(y);
    }
    Ok((ys, means))
}

fn reverse_mean(
    g: &mut Graph,
    process: &DiffusionProcess,
    predictor: &dyn NoisePredictor,
    y: Var,
    cond: Var,
    t: usize,
    n: usize,
) -> Result<Var> {
    let s = &process.schedule;
    let ts = vec![t; n];
    let eps_hat = predictor.predict(g, y, cond, &ts)?;
    let coef = s.beta(t) / (1.0 - s.bar_alpha(t)).sqrt();
    let scaled = g.scale(eps_hat, coef);
    let diff = g.sub(y, scaled)?;
    Ok(g.scale(diff, 1.0 / s.alpha(t).sqrt()))
}

/// `log N(x; mean, var I)` per row as an `n x 1` column.
pub fn gaussian_log_density(g: &mut Graph, x: Var, mean: Var, var: f64) -> Result<Var> {
    let d = g.value(x).cols() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let s = g.sum_rows(sq);
    let s = g.scale(s, -0.5 / var);
    Ok(g.add_scalar(s, -0.5 * d * (2.0 * PI * var).ln()))
}

/// `log N(x; mean, diag(exp(logvar)))` per row.
pub fn diag_gaussian_log_density(g: &mut Graph, x: Var, mean: Var, logvar: Var) -> Result<Var> {
    let d = g.value(x).cols() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let neg = g.neg(logvar);
    let inv_var = g.exp(neg);
    let w = g.mul(sq, inv_var)?;
    let quad = g.add(w, logvar)?;
    let s = g.sum_rows(quad);
    let s = g.scale(s, -0.5);
    Ok(g.add_scalar(s, -0.5 * d * (2.0 * PI).ln()))
}

/// `sum_t log r(y_t | y_{t-1})` per row, given `[y_T, ..., y_0]`.
pub fn forward_path_log_density(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    ys: &[Var],
) -> Result<Var> {
    let steps = schedule.steps();
    if ys.len() != steps + 1 {
        return Err(contract("trajectory length must be T + 1"));
    }
    let mut total: Option<Var> = None;
    for t in 1..=steps {
        let y_t = ys[steps - t];
        let y_prev = ys[steps - t + 1];
        let mean = g.scale(y_prev, schedule.alpha(t).sqrt());
        let lp = gaussian_log_density(g, y_t, mean, schedule.beta(t))?;
        total = Some(match total {
            None => lp,
            Some(acc) => g.add(acc, lp)?,
        });
    }
    Ok(total.expect("at least one step"))
}

/// `sum_t E[log r(y_t | y_{t-1}) | y_t]` per row, where the expectation is
/// over the reverse-step noise that produced `y_{t-1} = mu_t + sigma_t eta`:
/// `log N(y_t; sqrt(alpha_t) mu_t, beta_t) - alpha_t sigma_t^2 d / (2 beta_t)`.
///
/// Same expectation as [`forward_path_log_density`] on the sampled path,
/// without the `eta / sqrt(beta_t)` noise that dominates its gradient.
pub fn expected_forward_path_log_density(
    g: &mut Graph,
    process: &DiffusionProcess,
    ys: &[Var],
    means: &[Var],
) -> Result<Var> {
    let s = &process.schedule;
    let steps = s.steps();
    if ys.len() != steps + 1 || means.len() != steps {
        return Err(contract("trajectory length must be T + 1 with T means"));
    }
    let d = g.value(ys[0]).cols() as f64;
    let mut total: Option<Var> = None;
    for t in 1..=steps {
        let k = steps - t;
        let mean = g.scale(means[k], s.alpha(t).sqrt());
        let lp = gaussian_log_density(g, ys[k], mean, s.beta(t))?;
        let sigma = process.sigma(t);
        let lp = g.add_scalar(lp, -s.alpha(t) * sigma * sigma * d / (2.0 * s.beta(t)));
        total = Some(match total {
            None => lp,
            Some(acc) => g.add(acc, lp)?,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Differential entropy of `T` fixed-variance reverse steps plus the encoder
/// step with diagonal log-variance `enc_logvar` (one row per element).
/// Returns the row mean.
pub fn entropy_term(process: &DiffusionProcess, dim: usize, enc_logvar: &Tensor) -> f64 {
    let d = dim as f64;
    let per_step = 0.5 * d * (1.0 + (2.0 * PI).ln());
    let reverse: f64 = (1..=process.steps())
        .map(|t| per_step + d * process.sigma(t).ln())
        .sum();
    let n = enc_logvar.rows().max(1) as f64;
    let enc = per_step + 0.5 * enc_logvar.data().iter().sum::<f64>() / n;
    reverse + enc
}

/// Graph form of [`entropy_term`], differentiable in the encoder
/// log-variance; returns an `n x 1` column.
pub fn entropy_graph(g: &mut Graph, process: &DiffusionProcess, enc_logvar: Var) -> Var {
    let d = g.value(enc_logvar).cols();
    let per_step = 0.5 * d as f64 * (1.0 + (2.0 * PI).ln());
    let reverse: f64 = (1..=process.steps())
        .map(|t| per_step + d as f64 * process.sigma(t).ln())
        .sum();
    let s = g.sum_rows(enc_logvar);
    let s = g.scale(s, 0.5);
    g.add_scalar(s, per_step + reverse)
}

/// Closed-form `KL(N(m1, s1^2 I) || N(mu, diag(exp(logvar))))` per row.
pub fn gaussian_kl_to_diag(
    g: &mut Graph,
    m1: Var,
    var1: f64,
    mu: Var,
    logvar: Var,
) -> Result<Var> {
    let d = g.value(m1).cols() as f64;
    let diff = g.sub(m1, mu)?;
    let sq = g.square(diff);
    let num = g.add_scalar(sq, var1);
    let neg = g.neg(logvar);
    let inv = g.exp(neg);
    let ratio = g.mul(num, inv)?;
    let t = g.add(ratio, logvar)?;
    let s = g.sum_rows(t);
    let s = g.add_scalar(s, -d - d * var1.ln());
    Ok(g.scale(s, 0.5))
}

/// Which conditioning features the noise network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondSource {
    /// The raw data vector.
    Raw,
    /// The encoder's last hidden activation.
    Features,
}

/// Encoder for `q(y_T | x)` plus the noise network parameterizing the
/// reverse transitions.
#[derive(Clone, Debug)]
pub struct DiffusionPosterior {
    pub encoder: MlpEncoder,
    pub eps_net: TimeMlp,
    pub process: DiffusionProcess,
    pub cond: CondSource,
    /// Width of extra conditioning appended after the data features
    /// (label one-hots in semi-supervised mode).
    pub extra_cond: usize,
}

/// Everything one reverse pass produced, as graph nodes.
pub struct PosteriorSample {
    pub mu: Var,
    pub logvar: Var,
    pub cond: Var,
    /// `[y_T, ..., y_1, z]`.
    pub ys: Vec<Var>,
    /// Reverse-step means; `means[k]` is the mean of `ys[k + 1]`.
    pub means: Vec<Var>,
}

impl PosteriorSample {
    pub fn z(&self) -> Var {
        *self.ys.last().expect("non-empty trajectory")
    }
}

impl DiffusionPosterior {
    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.eps_net.params());
        p
    }

    pub fn feature_dim(&self) -> usize {
        match self.cond {
            CondSource::Raw => self.encoder.data_dim,
            CondSource::Features => self.encoder.feature_dim(),
        }
    }

    /// Conditioning matrix for `x`: data features, optional extra columns,
    /// all zeroed when `unconditional`.
    pub fn conditioning(
        &self,
        g: &mut Graph,
        x: Var,
        features: Var,
        extra: Option<Var>,
        unconditional: bool,
    ) -> Result<Var> {
        let base = match self.cond {
            CondSource::Raw => x,
            CondSource::Features => features,
        };
        let c = match (self.extra_cond, extra) {
            (0, None) => base,
            (k, Some(e)) if g.value(e).cols() == k => g.concat_cols(base, e)?,
            _ => return Err(contract("extra conditioning does not match configuration")),
        };
        Ok(if unconditional { g.scale(c, 0.0) } else { c })
    }

    /// Conditioning for fantasy or real inputs without keeping encoder
    /// outputs around.
    pub fn conditioning_for(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        extra: Option<Var>,
        unconditional: bool,
    ) -> Result<Var> {
        let features = match self.cond {
            CondSource::Raw => x,
            CondSource::Features => self.encoder.forward(g, p, x)?.features,
        };
        self.conditioning(g, x, features, extra, unconditional)
    }

    /// Reparameterized draw of the whole trajectory given `x`.
    pub fn sample(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        extra: Option<Var>,
        unconditional: bool,
        noise: &ReverseNoise,
    ) -> Result<PosteriorSample> {
        let enc = self.encoder.forward(g, p, x)?;
        let cond = self.conditioning(g, x, enc.features, extra, unconditional)?;
        let eps0 = g.constant(noise.initial.clone());
        let y_top = reparam_sample(g, enc.mu, enc.logvar, eps0)?;
        let pred = self.eps_net.with_params(p);
        let (ys, means) = reverse_chain_with_means(g, &self.process, &pred, y_top, cond, &noise.steps)?;
        Ok(PosteriorSample {
            mu: enc.mu,
            logvar: enc.logvar,
            cond,
            ys,
            means,
        })
    }

    /// `log q(y_{0:T} | x)` per row for a given trajectory `[y_T, ..., y_0]`.
    #[allow(clippy::too_many_arguments)]
    pub fn path_log_density(
        &self,
        g: &mut Graph,
        p: &Bound,
        mu: Var,
        logvar: Var,
        cond: Var,
        ys: &[Var],
    ) -> Result<Var> {
        let steps = self.process.steps();
        if ys.len() != steps + 1 {
            return Err(contract("trajectory length must be T + 1"));
        }
        let n = g.value(ys[0]).rows();
        let pred = self.eps_net.with_params(p);
        let mut total = diag_gaussian_log_density(g, ys[0], mu, logvar)?;
        for t in (1..=steps).rev() {
            let y_t = ys[steps - t];
            let y_prev = ys[steps - t + 1];
            let mean = reverse_mean(g, &self.process, &pred, y_t, cond, t, n)?;
            let sigma = self.process.sigma(t);
            let lp = gaussian_log_density(g, y_prev, mean, sigma * sigma)?;
            total = g.add(total, lp)?;
        }
        Ok(total)
    }
}

/// Sequential forward chain `z -> y_1 -> ... -> y_T`, returned as
/// `[y_T, ..., y_0]` constants.
pub fn forward_path(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    z: &Tensor,
    rng: &mut DdviRng,
) -> Result<Vec<Var>> {
    let steps = schedule.steps();
    let mut path = Vec::with_capacity(steps + 1);
    let mut cur = z.clone();
    path.push(cur.clone());
    for t in 1..=steps {
        let noise = rng::normals(rng, cur.numel());
        let next = forward_step(schedule, cur.data(), t, &noise)?;
        cur = Tensor::new(cur.shape().to_vec(), next)?;
        path.push(cur.clone());
    }
    path.reverse();
    Ok(path.into_iter().map(|t| g.constant(t)).collect())
}

/// Result of [`reverse_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseSample {
    pub z: Tensor,
    /// `[y_T, ..., y_1]`.
    pub trajectory: Vec<Tensor>,
    pub enc_logvar: Tensor,
}

/// Gradient-free draw of `z` (and the trajectory) for each row of `x`.
pub fn reverse_sample(
    posterior: &DiffusionPosterior,
    store_bound: impl FnOnce(&mut Graph) -> Bound,
    x: &Tensor,
    extra: Option<&Tensor>,
    noise: &ReverseNoise,
) -> Result<ReverseSample> {
    let mut g = Graph::new();
    let p = store_bound(&mut g);
    let xv = g.constant(x.clone());
    let ev = extra.map(|e| g.constant(e.clone()));
    let s = posterior.sample(&mut g, &p, xv, ev, false, noise)?;
    let mut trajectory: Vec<Tensor> = s.ys.iter().map(|&v| g.value(v).clone()).collect();
    let z = trajectory.pop().ok_or_else(|| Error::Contract("empty trajectory".into()))?;
    Ok(ReverseSample {
        z,
        trajectory,
        enc_logvar: g.value(s.logvar).clone(),
    })
}

/// `log r(y | z) + log p(z) + H(q)` per row, with `log r` averaged over each
/// step's reverse noise; its mean estimates `-KL(q(y, z | x) || r(y | z) p(z))`.
pub fn prior_reg_rows(
    g: &mut Graph,
    process: &DiffusionProcess,
    sample: &PosteriorSample,
    log_prior: Var,
) -> Result<Var> {
    let lr = expected_forward_path_log_density(g, process, &sample.ys, &sample.means)?;
    let h = entropy_graph(g, process, sample.logvar);
    let s = g.add(lr, log_prior)?;
    g.add(s, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{zero_params, ParamStore, ZeroPredictor};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-4, 0.4).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = schedule();
        assert_eq!(s.bar_alpha(0), 1.0);
        for t in 1..=20 {
            assert!(s.bar_alpha(t) < s.bar_alpha(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.bar_alpha(20) < 0.01);
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn marginal_boundaries() {
        let s = schedule();
        let z = [0.3, -1.2];
        assert_eq!(forward_marginal(&s, &z, 0, &[0.7, 0.1]).unwrap(), z.to_vec());
        let y = forward_marginal(&s, &z, 5, &[0.0, 0.0]).unwrap();
        let k = s.bar_alpha(5).sqrt();
        assert_eq!(y, vec![k * 0.3, k * -1.2]);
        assert!(forward_marginal(&s, &z, 21, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_network_diffusion_loss_is_noise_energy() {
        let s = schedule();
        let draws = NoiseDraws::from_seed(20, 2, 4, 9);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(4, 2));
        let c = g.constant(Tensor::zeros(4, 0));
        let l = diffusion_loss(&mut g, &ZeroPredictor, &s, z, c, &draws).unwrap();
        let expected =
            draws.noise.data().iter().map(|e| e * e).sum::<f64>() / 4.0;
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = schedule();
        let draws = NoiseDraws::from_seed(20, 2, 0, 9);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(0, 2));
        let c = g.constant(Tensor::zeros(0, 0));
        assert!(diffusion_loss(&mut g, &ZeroPredictor, &s, z, c, &draws).is_err());
    }

    #[test]
    fn entropy_closed_form() {
        let sigma: f64 = 0.3;
        let p = DiffusionProcess::new(NoiseSchedule::linear(4, 1e-3, 0.1).unwrap(), SigmaMode::Constant(sigma));
        let lv = Tensor::full(3, 2, 2.0 * sigma.ln());
        let h = entropy_term(&p, 2, &lv);
        let expected = 5.0 * (1.0 + (2.0 * PI).ln() + 2.0 * sigma.ln());
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::row(&[0.3, -0.1]));
        let lv = g.constant(Tensor::full(1, 2, 0.25f64.ln()));
        let kl = gaussian_kl_to_diag(&mut g, m, 0.25, m, lv).unwrap();
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn single_step_reverse_mean() {
        // T = 1, zero noise net, zero reverse variance, deterministic y_T = m.
        let process = DiffusionProcess::new(
            NoiseSchedule::from_betas(vec![0.2]).unwrap(),
            SigmaMode::Constant(0.0),
        );
        let mut store = ParamStore::new();
        let mut r = rng::rng(1);
        let encoder = MlpEncoder::new(&mut store, 3, &[], 2, &mut r);
        let eps_net = TimeMlp::new(&mut store, 2, 3, 4, 2, 1, &mut r);
        zero_params(&mut store, &eps_net.params());
        zero_params(&mut store, &encoder.params());
        let m = [0.6, -0.4];
        store.get_mut(encoder.mu.b).data_mut().copy_from_slice(&m);
        let post = DiffusionPosterior {
            encoder,
            eps_net,
            process,
            cond: CondSource::Raw,
            extra_cond: 0,
        };
        let noise = ReverseNoise::zeros(1, 2, 1);
        let out = reverse_sample(&post, |g| store.bind_frozen(g), &Tensor::row(&[1.0, 2.0, 3.0]), None, &noise)
            .unwrap();
        let k = 0.8f64.sqrt();
        assert!((out.z.data()[0] - m[0] / k).abs() < 1e-15);
        assert!((out.z.data()[1] - m[1] / k).abs() < 1e-15);
        assert_eq!(out.trajectory.len(), 1);
    }
}
