//! Central-difference gradient checking.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// on both sides compare by absolute difference.
    pub abs_floor: f64,
    /// Random extra coordinates checked in sparse (lookup-table) tensors,
    /// on top of every coordinate with a non-zero analytic gradient.
    pub sparse_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: 1e-4,
            abs_floor: 1e-6,
            sparse_samples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub threshold: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.max_rel_err)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads` (aligned with `params.params()`) against central
/// differences of `loss`. Dense tensors are checked exhaustively.
pub fn grad_check<P, G, F>(params: &mut P, grads: &G, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: Parameters,
    G: Parameters,
    F: FnMut(&P) -> Result<f64>,
{
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params()
        .into_iter()
        .map(|g| (g.name, g.data.to_vec()))
        .collect();
    let layout: Vec<(String, usize, bool)> = params
        .params()
        .into_iter()
        .map(|p| (p.name, p.data.len(), p.sparse))
        .collect();
    if layout.len() != analytic.len()
        || layout.iter().zip(&analytic).any(|(p, g)| p.1 != g.1.len())
    {
        return Err(Error::shape(
            "gradient list",
            &layout.iter().map(|p| p.1).collect::<Vec<_>>(),
            &analytic.iter().map(|g| g.1.len()).collect::<Vec<_>>(),
        ));
    }

    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }

    let mut tensors = Vec::with_capacity(layout.len());
    for (t, ((name, len, sparse), (_, ana))) in layout.iter().zip(&analytic).enumerate() {
        let coords: Vec<usize> = if *sparse {
            let mut c: Vec<usize> = (0..*len).filter(|&i| ana[i] != 0.0).collect();
            let mut rng = seed::rng(opts.seed, &[t as u64]);
            c.extend(sample(&mut rng, *len, opts.sparse_samples.min(*len)));
            c.sort_unstable();
            c.dedup();
            c
        } else {
            (0..*len).collect()
        };

        let mut check = TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in coords {
            let orig = params.params_mut()[t].data[i];
            params.params_mut()[t].data[i] = orig + opts.eps;
            let plus = loss(params)?;
            params.params_mut()[t].data[i] = orig - opts.eps;
            let minus = loss(params)?;
            params.params_mut()[t].data[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = relative_error(ana[i], numeric, opts.abs_floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = ana[i];
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }

    let passed = tensors.iter().all(|t| t.max_rel_err < opts.threshold);
    Ok(GradCheckReport {
        eps: opts.eps,
        threshold: opts.threshold,
        tensors,
        passed,
    })
}
