use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::Result;

/// |a − n| / max(1e-8, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Input draws rejected for lying too close to a non-differentiable point.
    pub resamples: usize,
}

/// Compares backward-pass gradients against central finite differences.
///
/// Inputs of the given shapes are drawn uniformly from [-1, 1]. A
/// non-scalar output is reduced to a scalar by a fixed random weighting, so
/// the full Jacobian is exercised. Draws whose evaluation lies within
/// `10·eps` of a kink (as reported by [`Graph::kink_margin`]) are redrawn.
pub fn grad_check<F>(f: F, input_shapes: &[Vec<usize>], eps: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resamples = 0;
    loop {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = input_shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                store.add(format!("x{i}"), Tensor::new(s.clone(), data).expect("valid shape"))
            })
            .collect();

        let (probe, out) = eval(&f, &store, &ids)?;
        if probe.kink_margin() < 10.0 * eps && resamples < 1000 {
            resamples += 1;
            continue;
        }
        let out_len = probe.value(out).len();
        let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let objective = |store: &ParamStore| -> Result<(Graph, Var)> {
            let (mut g, out) = eval(&f, store, &ids)?;
            if out_len == 1 {
                return Ok((g, out));
            }
            let shape = g.shape(out).to_vec();
            let w = g.constant_from(&shape, weights.clone())?;
            let prod = g.mul(out, w)?;
            let loss = g.sum(prod);
            Ok((g, loss))
        };

        let (g, loss) = objective(&store)?;
        let grads = g.gradients(loss, store.len())?;

        let mut worst: f64 = 0.0;
        for &id in &ids {
            let n = store.get(id).len();
            let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            for k in 0..n {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let (gp, lp) = objective(&store)?;
                let plus = gp.value(lp)[0];
                store.get_mut(id).data_mut()[k] = orig - eps;
                let (gm, lm) = objective(&store)?;
                let minus = gm.value(lm)[0];
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                worst = worst.max(relative_error(analytic[k], numeric));
            }
        }
        return Ok(GradCheck {
            max_relative_error: worst,
            resamples,
        });
    }
}

fn eval<F>(f: &F, store: &ParamStore, ids: &[ParamId]) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, out))
}
