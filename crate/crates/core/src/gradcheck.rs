//! Central finite-difference gradient verification.
//!
//! The numeric side only evaluates the forward pass on perturbed constants;
//! it never touches the tape's backward rules.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

fn scalar_of(tape: &Tape<'_>, out: Var) -> Result<f64> {
    if tape.value(out).len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar output".into()));
    }
    Ok(tape.scalar(out))
}

/// Checks `f` with respect to every tensor in `inputs`.
///
/// `f` receives one leaf per input and must return a single-element value.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (e, slot) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[e];
            let mut data = inputs[i].data().to_vec();
            data[e] = orig + step;
            work[i].assign(&data)?;
            let plus = eval(&work)?;
            data[e] = orig - step;
            work[i].assign(&data)?;
            let minus = eval(&work)?;
            *slot = (plus - minus) / (2.0 * step);
        }
        work[i] = inputs[i].clone();
        numeric.push(g);
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        relative_errors,
        analytic,
        numeric,
    })
}

/// Checks `f` with respect to the listed parameters of `params`.
pub fn check_params<F>(params: &ParamSet, ids: &[ParamId], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var>,
{
    let (analytic, _) = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        let v = scalar_of(&tape, out)?;
        let grads = tape.backward(out)?;
        let a: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map_or_else(|| vec![0.0; params.get(id).len()], <[f64]>::to_vec)
            })
            .collect();
        (a, v)
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        scalar_of(&tape, out)
    };
    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = params.get(id).data().to_vec();
        let mut g = vec![0.0; base.len()];
        for (e, slot) in g.iter_mut().enumerate() {
            let mut data = base.clone();
            data[e] = base[e] + step;
            work.get_mut(id).assign(&data)?;
            let plus = eval(&work)?;
            data[e] = base[e] - step;
            work.get_mut(id).assign(&data)?;
            let minus = eval(&work)?;
            *slot = (plus - minus) / (2.0 * step);
        }
        work.get_mut(id).assign(&base)?;
        numeric.push(g);
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        relative_errors,
        analytic,
        numeric,
    })
}

/// Deterministic pseudo-random tensor with entries in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}
