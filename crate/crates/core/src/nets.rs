//! Encoder, decoder and time-conditioned noise-prediction networks.
//!
//! All weights live in a [`ParamStore`]; networks hold [`ParamId`]s into it.
//! A forward pass first binds the store onto a [`Graph`] and then threads the
//! resulting [`Bound`] handles through the layers.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{contract, Result};
use crate::rng::{self, DdviRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Binds every parameter as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Binds every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Binds only `trainable` as leaves; everything else is constant.
    pub fn bind_subset(&self, g: &mut Graph, trainable: &[ParamId]) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if trainable.contains(&ParamId(i)) {
                        g.param(t)
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// FNV-1a over the bit patterns of the selected tensors.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for v in self.get(*id).data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

fn uniform_tensor(rng: &mut DdviRng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng::uniform(rng) - 1.0) * bound)
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Affine layer `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut DdviRng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(rng, fan_in, fan_out, bound),
        );
        let b = store.add(format!("{name}.b"), uniform_tensor(rng, 1, fan_out, bound));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w))?;
        g.add_row(h, p.var(self.b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

fn check_cols(g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
    let got = g.value(x).cols();
    if got != want {
        return Err(contract(format!(
            "{what}: expected {want} columns, got {got}"
        )));
    }
    Ok(())
}

/// Diagonal-Gaussian encoder with an MLP trunk and separate mean/log-variance heads.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    pub trunk: Vec<Linear>,
    pub mu: Linear,
    pub logvar: Linear,
    pub data_dim: usize,
    pub latent_dim: usize,
}

pub struct EncoderOutput {
    pub mu: Var,
    pub logvar: Var,
    /// Last hidden activation (the input itself when the trunk is empty).
    pub features: Var,
}

impl MlpEncoder {
    pub fn new(
        store: &mut ParamStore,
        data_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut DdviRng,
    ) -> Self {
        let mut trunk = Vec::new();
        let mut width = data_dim;
        for (i, &h) in hidden.iter().enumerate() {
            trunk.push(Linear::new(store, &format!("enc.h{i}"), width, h, rng));
            width = h;
        }
        let mu = Linear::new(store, "enc.mu", width, latent_dim, rng);
        let logvar = Linear::new(store, "enc.logvar", width, latent_dim, rng);
        MlpEncoder {
            trunk,
            mu,
            logvar,
            data_dim,
            latent_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map_or(self.data_dim, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<EncoderOutput> {
        check_cols(g, x, self.data_dim, "encoder input")?;
        let mut h = x;
        for layer in &self.trunk {
            let a = layer.forward(g, p, h)?;
            h = g.relu(a);
        }
        Ok(EncoderOutput {
            mu: self.mu.forward(g, p, h)?,
            logvar: self.logvar.forward(g, p, h)?,
            features: h,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.trunk
            .iter()
            .chain([&self.mu, &self.logvar])
            .flat_map(Linear::params)
            .collect()
    }
}

/// Output nonlinearity of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    /// Bernoulli means through a sigmoid; pairs with BCE.
    Sigmoid,
    /// Gaussian means, unit variance; pairs with MSE.
    Identity,
}

#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub head: DecoderHead,
    pub latent_dim: usize,
    pub data_dim: usize,
}

impl MlpDecoder {
    pub fn new(
        store: &mut ParamStore,
        latent_dim: usize,
        hidden: &[usize],
        data_dim: usize,
        head: DecoderHead,
        rng: &mut DdviRng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut width = latent_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("dec.h{i}"), width, h, rng));
            width = h;
        }
        let out = Linear::new(store, "dec.out", width, data_dim, rng);
        MlpDecoder {
            hidden: layers,
            out,
            head,
            latent_dim,
            data_dim,
        }
    }

    /// Pre-activation output (logits in sigmoid mode, means in identity mode).
    pub fn forward_raw(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        check_cols(g, z, self.latent_dim, "decoder input")?;
        let mut h = z;
        for layer in &self.hidden {
            let a = layer.forward(g, p, h)?;
            h = g.relu(a);
        }
        self.out.forward(g, p, h)
    }

    /// Data-space parameters: Bernoulli means or Gaussian means.
    pub fn decode(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let raw = self.forward_raw(g, p, z)?;
        Ok(match self.head {
            DecoderHead::Sigmoid => g.sigmoid(raw),
            DecoderHead::Identity => raw,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain([&self.out])
            .flat_map(Linear::params)
            .collect()
    }
}

/// Anything that predicts forward-process noise from `(y_t, conditioning, t)`.
pub trait NoisePredictor {
    fn predict(&self, g: &mut Graph, y_t: Var, cond: Var, t: &[usize]) -> Result<Var>;
}

/// MLP whose every layer adds a learned per-timestep embedding to its
/// affine output before the nonlinearity.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    pub layers: Vec<Linear>,
    /// One `(steps + 1) x width` table per layer.
    pub embeddings: Vec<ParamId>,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
}

impl TimeMlp {
    /// `n_layers` affine maps (at least 2) of width `width`; input is
    /// `[y_t | cond]`, output has `latent_dim` columns.
    pub fn new(
        store: &mut ParamStore,
        latent_dim: usize,
        cond_dim: usize,
        width: usize,
        n_layers: usize,
        steps: usize,
        rng: &mut DdviRng,
    ) -> Self {
        let n_layers = n_layers.max(2);
        let mut layers = Vec::new();
        let mut embeddings = Vec::new();
        let mut fan_in = latent_dim + cond_dim;
        for i in 0..n_layers {
            let fan_out = if i + 1 == n_layers { latent_dim } else { width };
            let layer = Linear::new(store, &format!("eps.l{i}"), fan_in, fan_out, rng);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let emb = store.add(
                format!("eps.t{i}"),
                uniform_tensor(rng, steps + 1, fan_out, bound),
            );
            layers.push(layer);
            embeddings.push(emb);
            fan_in = fan_out;
        }
        TimeMlp {
            layers,
            embeddings,
            latent_dim,
            cond_dim,
            steps,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        y_t: Var,
        cond: Var,
        t: &[usize],
    ) -> Result<Var> {
        check_cols(g, y_t, self.latent_dim, "noise net latent input")?;
        check_cols(g, cond, self.cond_dim, "noise net conditioning input")?;
        let n = g.value(y_t).rows();
        if t.len() != n {
            return Err(contract(format!(
                "noise net got {} timesteps for {} rows",
                t.len(),
                n
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.steps) {
            return Err(contract(format!(
                "timestep {bad} outside 1..={}",
                self.steps
            )));
        }
        let mut h = if self.cond_dim == 0 {
            y_t
        } else {
            g.concat_cols(y_t, cond)?
        };
        let last = self.layers.len() - 1;
        for (i, (layer, emb)) in self.layers.iter().zip(&self.embeddings).enumerate() {
            let a = layer.forward(g, p, h)?;
            let e = g.gather_rows(p.var(*emb), t)?;
            let a = g.add(a, e)?;
            h = if i == last { a } else { g.relu(a) };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(Linear::params).collect();
        ids.extend(&self.embeddings);
        ids
    }

    pub fn with_params<'a>(&'a self, bound: &'a Bound) -> BoundTimeMlp<'a> {
        BoundTimeMlp { net: self, bound }
    }
}

/// A [`TimeMlp`] paired with graph handles for its weights.
pub struct BoundTimeMlp<'a> {
    net: &'a TimeMlp,
    bound: &'a Bound,
}

impl NoisePredictor for BoundTimeMlp<'_> {
    fn predict(&self, g: &mut Graph, y_t: Var, cond: Var, t: &[usize]) -> Result<Var> {
        self.net.forward(g, self.bound, y_t, cond, t)
    }
}

/// Predicts zero noise everywhere.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, g: &mut Graph, y_t: Var, _cond: Var, _t: &[usize]) -> Result<Var> {
        Ok(g.scale(y_t, 0.0))
    }
}

/// Sets every parameter in `ids` to zero.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(store: &mut ParamStore, seed: u64) -> MlpEncoder {
        MlpEncoder::new(store, 5, &[8, 8], 2, &mut rng::rng(seed))
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let mut s = ParamStore::new();
        let enc = encoder(&mut s, 1);
        zero_params(&mut s, &enc.params());
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::row(&[0.3, 0.1, -0.2, 0.9, 1.0]));
        let out = enc.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(out.mu).data(), &[0.0, 0.0]);
        assert_eq!(g.value(out.logvar).data(), &[0.0, 0.0]);
    }

    #[test]
    fn encoder_is_deterministic() {
        let run = || {
            let mut s = ParamStore::new();
            let enc = encoder(&mut s, 9);
            let mut g = Graph::new();
            let p = s.bind(&mut g);
            let x = g.constant(Tensor::row(&[0.3, 0.1, -0.2, 0.9, 1.0]));
            let out = enc.forward(&mut g, &p, x).unwrap();
            (g.value(out.mu).clone(), g.value(out.logvar).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut s = ParamStore::new();
        let enc = encoder(&mut s, 1);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::row(&[0.3, 0.1]));
        assert!(enc.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn zero_decoder_heads() {
        for (head, expected) in [(DecoderHead::Sigmoid, 0.5), (DecoderHead::Identity, 0.0)] {
            let mut s = ParamStore::new();
            let dec = MlpDecoder::new(&mut s, 2, &[4], 3, head, &mut rng::rng(2));
            zero_params(&mut s, &dec.params());
            let mut g = Graph::new();
            let p = s.bind(&mut g);
            let z = g.constant(Tensor::row(&[1.0, -2.0]));
            let out = dec.decode(&mut g, &p, z).unwrap();
            assert_eq!(g.value(out).data(), &[expected; 3]);
        }
    }

    #[test]
    fn sigmoid_decoder_stays_in_unit_interval() {
        let mut s = ParamStore::new();
        let dec = MlpDecoder::new(&mut s, 2, &[6], 4, DecoderHead::Sigmoid, &mut rng::rng(3));
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let z = g.constant(Tensor::matrix(3, 2, vec![5.0, -5.0, 0.0, 0.1, -3.0, 2.0]));
        let out = dec.decode(&mut g, &p, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn time_mlp(s: &mut ParamStore) -> TimeMlp {
        TimeMlp::new(s, 2, 3, 8, 5, 4, &mut rng::rng(4))
    }

    #[test]
    fn zero_time_mlp_predicts_zero() {
        let mut s = ParamStore::new();
        let net = time_mlp(&mut s);
        zero_params(&mut s, &net.params());
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let y = g.constant(Tensor::row(&[0.4, -0.7]));
        let c = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let out = net.forward(&mut g, &p, y, c, &[2]).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn timestep_changes_prediction() {
        let mut s = ParamStore::new();
        let net = time_mlp(&mut s);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let y = g.constant(Tensor::matrix(2, 2, vec![0.4, -0.7, 0.4, -0.7]));
        let c = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let out = net.forward(&mut g, &p, y, c, &[1, 3]).unwrap();
        let v = g.value(out);
        assert_ne!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn unconditional_matches_zero_conditioning() {
        let mut s = ParamStore::new();
        let net = time_mlp(&mut s);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let y = g.constant(Tensor::row(&[0.4, -0.7]));
        let zeros = g.constant(Tensor::zeros(1, 3));
        let zeros_again = g.constant(Tensor::zeros(1, 3));
        let a = net.forward(&mut g, &p, y, zeros, &[2]).unwrap();
        let b = net.forward(&mut g, &p, y, zeros_again, &[2]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn timestep_range_is_checked() {
        let mut s = ParamStore::new();
        let net = time_mlp(&mut s);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let y = g.constant(Tensor::row(&[0.4, -0.7]));
        let c = g.constant(Tensor::zeros(1, 3));
        assert!(net.forward(&mut g, &p, y, c, &[0]).is_err());
        assert!(net.forward(&mut g, &p, y, c, &[5]).is_err());
        assert!(net.forward(&mut g, &p, y, c, &[4]).is_ok());
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut s = ParamStore::new();
        let net = time_mlp(&mut s);
        let ids = net.params();
        let before = s.checksum(&ids);
        s.get_mut(ids[0]).data_mut()[0] += 1e-12;
        assert_ne!(before, s.checksum(&ids));
    }
}
