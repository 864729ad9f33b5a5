//! A small reverse-mode automatic differentiation core.
//!
//! [`Graph`] records operations on a tape; [`ParamStore`] owns the trainable
//! tensors across steps; [`Optimizer`] applies SGD or Adam updates. All
//! arithmetic is `f64`.

mod check;
mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, relative_error, GradCheck};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{sigmoid, Graph, Pairwise, Var, LOG_CLAMP};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Grads, ParamId, ParamStore, Tensor};

use crate::error::{Error, Result};

/// Σ gold·(ln gold − ln predicted), with 0·ln 0 = 0 and `predicted`
/// clamped at [`LOG_CLAMP`] before the log.
pub fn kl_loss(g: &mut Graph, predicted: Var, gold: &[f64]) -> Result<Var> {
    let p = g.value(predicted);
    if p.len() != gold.len() {
        return Err(Error::shape("kl_loss", format!("{} predicted vs {} gold", p.len(), gold.len())));
    }
    for (name, dist) in [("gold", gold), ("predicted", p)] {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 || dist.iter().any(|v| *v < 0.0) {
            return Err(Error::Numerical(format!("{name} is not a distribution (sums to {total})")));
        }
    }
    let entropy_term: f64 = gold.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum();
    let shape = g.shape(predicted).to_vec();
    let gold_var = g.constant_from(&shape, gold.to_vec())?;
    let log_p = g.log(predicted);
    let weighted = g.mul(log_p, gold_var)?;
    let cross = g.sum(weighted);
    let neg = g.scale(cross, -1.0);
    let c = g.constant(&Tensor::scalar(entropy_term));
    g.add(neg, c)
}

/// Plain-number KL divergence with the same conventions as [`kl_loss`].
pub fn kl_divergence(predicted: &[f64], gold: &[f64]) -> f64 {
    predicted
        .iter()
        .zip(gold)
        .filter(|(_, &q)| q > 0.0)
        .map(|(&p, &q)| q * (q.ln() - p.max(LOG_CLAMP).ln()))
        .sum()
}

#[cfg(test)]
mod tests;
