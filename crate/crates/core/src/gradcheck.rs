//! Central finite-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::{Gradients, ParamId, ParamStore};

pub const STEP: f64 = 1e-5;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn params_touched(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.probes.iter().map(|p| p.param.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// `|a - n| / max(|a|, |n|, STEP)`. Central differences carry rounding noise
/// of order `1e-16 * |loss| / STEP`, so gradients below `STEP` are compared
/// on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(STEP)
}

/// Compares `grads` against central differences of `loss` at `per_param`
/// randomly chosen coordinates of every parameter (all coordinates when the
/// parameter is smaller).
pub fn check<R, F>(
    store: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    per_param: usize,
    rng: &mut R,
    mut loss: F,
) -> GradCheckReport
where
    R: Rng,
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let numel = store.get(id).numel();
        let picks = sample(rng, numel, per_param.min(numel)).into_vec();
        for index in picks {
            let original = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = original + STEP;
            let up = loss(store);
            store.get_mut(id).data_mut()[index] = original - STEP;
            let down = loss(store);
            store.get_mut(id).data_mut()[index] = original;

            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
            report.probes.push(Probe {
                param: store.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    report
}
