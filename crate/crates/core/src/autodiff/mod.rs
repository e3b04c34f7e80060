//! Tape-based reverse-mode differentiation over dense `f64` matrices, plus Adam.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{logsumexp, Gradients, Graph, RowScalarFn, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `mu + exp(0.5 * logvar) * noise`, differentiable in `mu` and `logvar`.
pub fn reparam_sample(g: &mut Graph, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let (sm, sl, sn) = (
        g.value(mu).shape().to_vec(),
        g.value(logvar).shape().to_vec(),
        g.value(noise).shape().to_vec(),
    );
    if sm != sl || sm != sn {
        return Err(Error::Contract(format!(
            "reparam_sample shapes differ: mu {sm:?}, logvar {sl:?}, noise {sn:?}"
        )));
    }
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, noise)?;
    g.add(mu, scaled)
}
