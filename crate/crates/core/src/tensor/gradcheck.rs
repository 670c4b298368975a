use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by every gradient check.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, both evaluated in f64. The five-point stencil keeps the
/// truncation error at O(h^4), so coordinates with tiny gradients are not
/// swamped by curvature at h = 1e-3.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar
/// node. When `max_coords` is set, at most that many coordinates per input
/// are sampled (deterministically from `seed`).
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();

    let eval = |values: &[Vec<f64>], with_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|(t, v)| tape.leaf(t.shape().to_vec(), v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        let value = tape.scalar(loss);
        let grads = if with_grad {
            tape.backward(loss)?;
            vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(&base, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut values = base.clone();
    for (input, grad) in analytic.iter().enumerate() {
        let n = base[input].len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = base[input][c];
            let mut at = |dx: f64| {
                values[input][c] = x0 + dx;
                eval(&values, false).map(|(v, _)| v)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            values[input][c] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g[c]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((input, c, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
