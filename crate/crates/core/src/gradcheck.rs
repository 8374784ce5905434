//! Central finite differences against the reverse pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates of each parameter (seeded sample).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Coordinates where both gradients are below this magnitude are
    /// under the difference quotient's resolution; they are counted in
    /// `below_floor` instead of the relative error.
    pub zero_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            zero_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(param, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Coordinates skipped by `zero_floor`, with their analytic value.
    pub below_floor: Vec<(String, usize, f64)>,
    /// Every checked `(param, coordinate, analytic, numeric)`.
    pub coords: Vec<(String, usize, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
    }
    Ok(g.scalar_value(loss))
}

/// Compares `backward()` gradients of `f` with central differences over
/// every trainable parameter in `store`; returns the worst relative error.
pub fn finite_difference_check<F>(store: &ParamStore<f64>, f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid("finite_difference_check", format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let grads = g.backward(loss)?;
        analytic.accumulate(&g, &grads)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    for (name, p) in analytic.iter() {
        if !p.requires_grad {
            continue;
        }
        let n = p.value.numel();
        let grad = p.grad.as_ref().expect("zeroed above").data();
        let picked: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        coords.extend(picked.into_iter().map(|i| (name.to_string(), i, grad[i])));
    }

    let eps = opts.eps;
    let numeric = par::map(&coords, |(name, i, _)| -> Result<f64> {
        let mut s = store.clone();
        let base = s.value(name)?.data()[*i];
        s.value_mut(name)?.data_mut()[*i] = base + eps;
        let up = eval(&f, &s)?;
        s.value_mut(name)?.data_mut()[*i] = base - eps;
        let down = eval(&f, &s)?;
        Ok((up - down) / (2.0 * eps))
    });

    let mut report = FdReport {
        coords_checked: coords.len(),
        ..FdReport::default()
    };
    for ((name, i, a), num) in coords.into_iter().zip(numeric) {
        let num = num?;
        if a.abs().max(num.abs()) < opts.zero_floor {
            report.below_floor.push((name.clone(), i, a));
            report.coords.push((name, i, a, num));
            continue;
        }
        let err = relative_error(a, num);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name.clone(), i, a, num));
        }
        report.coords.push((name, i, a, num));
    }
    Ok(report)
}
