// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged by absolute error instead. The floor in
    /// effect is raised to [`roundoff_floor`] when that is larger.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

/// Rounding error of a central difference, in units of the loss's ulp.
const ROUNDOFF_ULPS: f64 = 16.0;

/// Smallest denominator at which `ROUNDOFF_ULPS` ulps of `loss`, divided by
/// `2h`, stays under a relative error of `tol`.
pub fn roundoff_floor(loss: f64, h: f64, tol: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h * tol)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamSummary {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose ±h perturbation crossed a relu kink or changed a max-pool winner.
    pub skipped_kinks: usize,
    pub tol: f64,
    /// Denominator floor actually used.
    pub floor: f64,
    pub per_param: Vec<ParamSummary>,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares backward gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every parameter entry of `store`.
///
/// `f` must be deterministic. Existing gradients in `store` are zeroed.
pub fn grad_check<F>(store: &mut ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let base_sig = tape.kink_signature();
    let floor = cfg.abs_floor.max(roundoff_floor(tape.value(loss).item(), cfg.h, cfg.tol));
    drop(tape);

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        tol: cfg.tol,
        floor,
        per_param: Vec::new(),
        failures: Vec::new(),
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name().to_string();
        let analytic = store.get(id).grad().expect("zeroed above").clone();
        let n = analytic.numel();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut summary = ParamSummary {
            param: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
        };
        for idx in entries {
            let orig = store.tensor(id).data()[idx];
            store.get_mut(id).tensor_mut().data_mut()[idx] = orig + cfg.h;
            let plus = eval(store);
            store.get_mut(id).tensor_mut().data_mut()[idx] = orig - cfg.h;
            let minus = eval(store);
            store.get_mut(id).tensor_mut().data_mut()[idx] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic.data()[idx];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            summary.checked += 1;
            summary.max_rel_err = summary.max_rel_err.max(rel_err);
            if rel_err >= cfg.tol {
                report.failures.push(GradCheckEntry {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
        report.checked += summary.checked;
        report.max_rel_err = report.max_rel_err.max(summary.max_rel_err);
        report.per_param.push(summary);
    }
    store.zero_grad();
    Ok(report)
}
