//! Composite differentiable functions built from tape primitives.

use super::{Real, RngStream, Tape, Tensor, Var};
use crate::error::{GilaError, Result};

/// Norm floor applied to each vector before taking cosines; zero vectors
/// therefore have cosine 0 with everything instead of producing NaN.
pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity between two `[1, d]` rows, as a `[1, 1]` scalar.
pub fn cosine_similarity<R: Real>(tape: &mut Tape<R>, u: Var, v: Var) -> Result<Var> {
    if tape.shape(u) != tape.shape(v) {
        return Err(GilaError::shape(
            "cosine_similarity",
            tape.value(u).shape(),
            tape.value(v).shape(),
        ));
    }
    let nu = tape.l2_normalize_rows(u, COSINE_EPS)?;
    let nv = tape.l2_normalize_rows(v, COSINE_EPS)?;
    let p = tape.mul(nu, nv)?;
    tape.sum(p)
}

/// `[T, S]` matrix of cosines between the rows of `a` (`[T, d]`) and `b`
/// (`[S, d]`).
pub fn cosine_matrix<R: Real>(tape: &mut Tape<R>, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_normalize_rows(a, COSINE_EPS)?;
    let nb = tape.l2_normalize_rows(b, COSINE_EPS)?;
    tape.matmul_t(na, nb, false, true)
}

/// Source of the Gumbel perturbation in [`gumbel_softmax`].
pub enum GumbelNoise<'a, R> {
    /// Fresh standard Gumbel draws.
    Sample(&'a mut RngStream),
    /// Caller-provided perturbation (same shape as the logits).
    Fixed(&'a Tensor<R>),
    /// No perturbation.
    Off,
}

/// Row-wise Gumbel-softmax. With `hard`, the forward value is the one-hot
/// argmax and gradients flow through the soft sample (straight-through).
pub fn gumbel_softmax<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    temperature: f64,
    hard: bool,
    noise: GumbelNoise<'_, R>,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(GilaError::config(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let (r, c) = tape.shape(logits);
    let perturbed = match noise {
        GumbelNoise::Off => logits,
        GumbelNoise::Sample(rng) => {
            let g: Vec<R> = (0..r * c).map(|_| R::of(rng.gumbel())).collect();
            let g = tape.constant(Tensor::new(&[r, c], g)?)?;
            tape.add(logits, g)?
        }
        GumbelNoise::Fixed(g) => {
            let g = tape.constant(g.clone())?;
            tape.add(logits, g)?
        }
    };
    let scaled = tape.scale(perturbed, R::of(1.0 / temperature))?;
    let soft = tape.softmax(scaled, false)?;
    if hard {
        tape.straight_through_one_hot(soft)
    } else {
        Ok(soft)
    }
}
