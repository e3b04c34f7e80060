//! Central finite-difference checks shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use ddvi::autodiff::{reparam_sample, Graph, RowScalarFn, Tensor, Var};
use ddvi::nets::{Bound, DecoderHead, MlpDecoder, MlpEncoder, ParamStore, TimeMlp};
use ddvi::priors::{KdeDensity, LatentPrior, PriorSpec};
use ddvi::rng::{self, DdviRng};
use ddvi::Result;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

/// Uniform entries in `[-2 scale, 2 scale]`.
pub fn rand_tensor(r: &mut DdviRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * (4.0 * rng::uniform(r) - 2.0)).collect();
    Tensor::matrix(rows, cols, data)
}

/// `||a - b|| / max(||a|| + ||b||, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;
type Forward<'a> = dyn Fn(&mut Graph, &Bound, Var) -> Result<Var> + 'a;

/// Contracts the output with fixed random weights so every element counts.
fn scalar_output(g: &mut Graph, out: Var, seed: u64) -> Var {
    let v = g.value(out);
    let w = rand_tensor(&mut rng::rng(seed ^ 0x5eed), v.rows(), v.cols(), 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalar_output(&mut g, out, seed);
    g.scalar(s)
}

/// Worst relative error between analytic and central-difference gradients
/// over every input.
pub fn fd_error(inputs: Vec<Tensor>, build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalar_output(&mut g, out, seed);
    let grads = g.backward(s).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v).into_data();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            *slot = (eval(&plus, build, seed) - eval(&minus, build, seed)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check for every parameter tensor of a network and for its input,
/// perturbing a cloned store.
pub fn network_error(store: &ParamStore, x: &Tensor, forward: &Forward, seed: u64) -> f64 {
    let value = |st: &ParamStore, xin: &Tensor| {
        let mut g = Graph::new();
        let p = st.bind_frozen(&mut g);
        let xv = g.constant(xin.clone());
        let out = forward(&mut g, &p, xv).unwrap();
        let s = scalar_output(&mut g, out, seed);
        g.scalar(s)
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.param(x);
    let out = forward(&mut g, &p, xv).unwrap();
    let s = scalar_output(&mut g, out, seed);
    let grads = g.backward(s).unwrap();

    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic = grads.get_or_zeros(p.var(id)).into_data();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= H;
            *slot = (value(&plus, x) - value(&minus, x)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let analytic = grads.get_or_zeros(xv).into_data();
    let numeric: Vec<f64> = (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += H;
            let mut minus = x.clone();
            minus.data_mut()[i] -= H;
            (value(store, &plus) - value(store, &minus)) / (2.0 * H)
        })
        .collect();
    worst.max(rel_err(&analytic, &numeric))
}

fn shapes(seed: u64) -> (DdviRng, usize, usize) {
    let mut r = rng::rng(seed);
    let n = rng::uniform_int(&mut r, 1, 5);
    let c = rng::uniform_int(&mut r, 1, 5);
    (r, n, c)
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 };
        }
    });
    t
}

struct KdeRows(KdeDensity);

impl RowScalarFn for KdeRows {
    fn eval(&self, _index: usize, row: &[f64]) -> (f64, Vec<f64>) {
        self.0.log_density_and_grad(row)
    }
}

/// One named check; `run(seed)` returns the worst relative error of that
/// instance.
pub struct Case {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> f64>,
}

fn case(name: &'static str, run: impl Fn(u64) -> f64 + 'static) -> Case {
    Case { name, run: Box::new(run) }
}

fn unary(name: &'static str, op: fn(&mut Graph, Var) -> Var) -> Case {
    case(name, move |s| {
        let (mut r, n, c) = shapes(s);
        let x = rand_tensor(&mut r, n, c, 1.0);
        fd_error(vec![x], &|g, v| Ok(op(g, v[0])), s)
    })
}

fn binary(name: &'static str, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    case(name, move |s| {
        let (mut r, n, c) = shapes(s);
        let a = rand_tensor(&mut r, n, c, 1.0);
        let b = rand_tensor(&mut r, n, c, 1.0);
        fd_error(vec![a, b], &|g, v| op(g, v[0], v[1]), s)
    })
}

/// Every differentiable primitive of the tape.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        unary("tanh", |g, x| g.tanh(x)),
        unary("sigmoid", |g, x| g.sigmoid(x)),
        unary("softplus", |g, x| g.softplus(x)),
        unary("exp", |g, x| g.exp(x)),
        unary("square", |g, x| g.square(x)),
        unary("neg", |g, x| g.neg(x)),
        unary("transpose", |g, x| g.transpose(x)),
        unary("sum", |g, x| g.sum(x)),
        unary("mean", |g, x| g.mean(x)),
        unary("sum_rows", |g, x| g.sum_rows(x)),
        unary("logsumexp_rows", |g, x| g.logsumexp_rows(x)),
        binary("add", |g, a, b| g.add(a, b)),
        binary("sub", |g, a, b| g.sub(a, b)),
        binary("mul", |g, a, b| g.mul(a, b)),
        case("relu", |s| {
            let (mut r, n, c) = shapes(s);
            let x = away_from_zero(rand_tensor(&mut r, n, c, 1.0));
            fd_error(vec![x], &|g, v| Ok(g.relu(v[0])), s)
        }),
        case("log", |s| {
            let (mut r, n, c) = shapes(s);
            let mut x = rand_tensor(&mut r, n, c, 1.0);
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
            fd_error(vec![x], &|g, v| Ok(g.log(v[0])), s)
        }),
        case("scale", |s| {
            let (mut r, n, c) = shapes(s);
            let x = rand_tensor(&mut r, n, c, 1.0);
            let k = rng::normal(&mut r);
            fd_error(vec![x], &|g, v| Ok(g.scale(v[0], k)), s)
        }),
        case("add_scalar", |s| {
            let (mut r, n, c) = shapes(s);
            let x = rand_tensor(&mut r, n, c, 1.0);
            let k = rng::normal(&mut r);
            fd_error(vec![x], &|g, v| Ok(g.add_scalar(v[0], k)), s)
        }),
        case("matmul", |s| {
            let (mut r, n, c) = shapes(s);
            let k = rng::uniform_int(&mut r, 1, 5);
            let a = rand_tensor(&mut r, n, k, 1.0);
            let b = rand_tensor(&mut r, k, c, 1.0);
            fd_error(vec![a, b], &|g, v| g.matmul(v[0], v[1]), s)
        }),
        case("matmul_t", |s| {
            let (mut r, n, c) = shapes(s);
            let k = rng::uniform_int(&mut r, 1, 5);
            let a = rand_tensor(&mut r, n, k, 1.0);
            let b = rand_tensor(&mut r, c, k, 1.0);
            fd_error(vec![a, b], &|g, v| g.matmul_t(v[0], v[1]), s)
        }),
        case("add_row", |s| {
            let (mut r, n, c) = shapes(s);
            let a = rand_tensor(&mut r, n, c, 1.0);
            let row = rand_tensor(&mut r, 1, c, 1.0);
            fd_error(vec![a, row], &|g, v| g.add_row(v[0], v[1]), s)
        }),
        case("add_col", |s| {
            let (mut r, n, c) = shapes(s);
            let a = rand_tensor(&mut r, n, c, 1.0);
            let col = rand_tensor(&mut r, n, 1, 1.0);
            fd_error(vec![a, col], &|g, v| g.add_col(v[0], v[1]), s)
        }),
        case("mul_col", |s| {
            let (mut r, n, c) = shapes(s);
            let a = rand_tensor(&mut r, n, c, 1.0);
            let col = rand_tensor(&mut r, n, 1, 1.0);
            fd_error(vec![a, col], &|g, v| g.mul_col(v[0], v[1]), s)
        }),
        case("concat_cols", |s| {
            let (mut r, n, c) = shapes(s);
            let a = rand_tensor(&mut r, n, c, 1.0);
            let extra = rng::uniform_int(&mut r, 1, 3);
            let b = rand_tensor(&mut r, n, extra, 1.0);
            fd_error(vec![a, b], &|g, v| g.concat_cols(v[0], v[1]), s)
        }),
        case("gather_rows", |s| {
            let (mut r, n, c) = shapes(s);
            let a = rand_tensor(&mut r, n, c, 1.0);
            // Repeated indices must accumulate.
            let idx: Vec<usize> = (0..n + 2).map(|_| rng::uniform_int(&mut r, 0, n - 1)).collect();
            fd_error(vec![a], &|g, v| g.gather_rows(v[0], &idx), s)
        }),
        case("reparam_sample", |s| {
            let (mut r, n, c) = shapes(s);
            let mu = rand_tensor(&mut r, n, c, 1.0);
            let lv = rand_tensor(&mut r, n, c, 0.5);
            let eps = rand_tensor(&mut r, n, c, 1.0);
            fd_error(vec![mu, lv, eps], &|g, v| reparam_sample(g, v[0], v[1], v[2]), s)
        }),
        case("row_fn (KDE)", |s| {
            let mut r = rng::rng(s);
            let d = rng::uniform_int(&mut r, 1, 3);
            let pts = rand_tensor(&mut r, 6, d, 1.0);
            let kde = KdeRows(KdeDensity::new(&pts, &[0.3, 0.7]).unwrap());
            let q = rand_tensor(&mut r, 4, d, 1.0);
            fd_error(vec![q], &|g, v| Ok(g.row_fn(v[0], &kde)), s)
        }),
        case("mixture log density", |s| {
            let mut r = rng::rng(s);
            let k = rng::uniform_int(&mut r, 1, 5);
            let prior = LatentPrior::from_spec(PriorSpec::mixture_on_circle(k, 1.0, 0.4), 10, s).unwrap();
            let z = rand_tensor(&mut r, 3, 2, 1.0);
            let means = rand_tensor(&mut r, k, 2, 1.0);
            fd_error(vec![z, means], &|g, v| prior.log_prob(g, v[0], Some(v[1]), None), s)
        }),
    ]
}

/// Encoder, decoder (both heads) and noise network: parameters and input.
pub fn network_cases() -> Vec<Case> {
    vec![
        case("encoder", |s| {
            let mut r = rng::rng(100 + s);
            let (dx, h, d) = (rng::uniform_int(&mut r, 2, 5), rng::uniform_int(&mut r, 2, 5), rng::uniform_int(&mut r, 1, 3));
            let mut store = ParamStore::new();
            let enc = MlpEncoder::new(&mut store, dx, &[h, h], d, &mut r);
            let x = rand_tensor(&mut r, 3, dx, 1.0);
            network_error(
                &store,
                &x,
                &|g, p, x| {
                    let o = enc.forward(g, p, x)?;
                    g.concat_cols(o.mu, o.logvar)
                },
                s,
            )
        }),
        case("decoder", |s| {
            let mut r = rng::rng(200 + s);
            let (d, h, dx) = (rng::uniform_int(&mut r, 1, 3), rng::uniform_int(&mut r, 2, 5), rng::uniform_int(&mut r, 2, 5));
            let head = if s % 2 == 0 { DecoderHead::Sigmoid } else { DecoderHead::Identity };
            let mut store = ParamStore::new();
            let dec = MlpDecoder::new(&mut store, d, &[h], dx, head, &mut r);
            let z = rand_tensor(&mut r, 3, d, 1.0);
            network_error(&store, &z, &|g, p, z| dec.decode(g, p, z), s)
        }),
        case("noise network", |s| {
            let mut r = rng::rng(300 + s);
            let (d, c, w) = (rng::uniform_int(&mut r, 1, 3), rng::uniform_int(&mut r, 0, 3), rng::uniform_int(&mut r, 2, 5));
            let steps = 4;
            let mut store = ParamStore::new();
            let net = TimeMlp::new(&mut store, d, c, w, 3, steps, &mut r);
            let n = 3;
            let y = rand_tensor(&mut r, n, d, 1.0);
            let cond = rand_tensor(&mut r, n, c, 1.0);
            let ts: Vec<usize> = (0..n).map(|_| rng::uniform_int(&mut r, 1, steps)).collect();
            network_error(
                &store,
                &y,
                &|g, p, y| {
                    let cv = g.constant(cond.clone());
                    net.forward(g, p, y, cv, &ts)
                },
                s,
            )
        }),
    ]
}

/// Worst error of each case over [`INSTANCES`] random instances.
pub fn worst_errors(cases: &[Case]) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .map(|c| (c.name, (0..INSTANCES).map(|s| (c.run)(s)).fold(0.0, f64::max)))
        .collect()
}
