//! Finite-difference verification of analytic gradients.

use crate::params::{ParamId, ParamStore};
use crate::rng::RngState;
use crate::tape::ParamGrads;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Step of the finite-difference stencil.
    pub epsilon: f64,
    /// Entries checked per parameter; all entries when the parameter is
    /// smaller than this.
    pub samples_per_param: usize,
    /// Magnitude below which errors are measured in absolute rather than
    /// relative terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            samples_per_param: 12,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<EntryCheck>,
    /// Largest error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients returned by `loss_fn` with a fourth-order
/// central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` on
/// a seeded random subset of entries of every parameter.
///
/// `loss_fn` must be deterministic: any sampling inside it has to be
/// driven by a freshly seeded RNG on every call.
pub fn grad_check<F>(params: &mut ParamStore, mut loss_fn: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> (f64, ParamGrads),
{
    let (_, grads) = loss_fn(params);
    let mut rng = RngState::new(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params.ids().collect();
    let h = cfg.epsilon;

    for id in ids {
        let n = params.get(id).values.len();
        let name = params.get(id).name.clone();
        let mut entries: Vec<usize> = (0..n).collect();
        if n > cfg.samples_per_param {
            rng.shuffle(&mut entries);
            entries.truncate(cfg.samples_per_param);
            entries.sort_unstable();
        }
        let mut worst_here = 0.0f64;
        for idx in entries {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let orig = params.get(id).values.data()[idx];
            let mut eval = |x: f64, params: &mut ParamStore| {
                params.get_mut(id).values.data_mut()[idx] = x;
                loss_fn(params).0
            };
            let fp2 = eval(orig + 2.0 * h, params);
            let fp1 = eval(orig + h, params);
            let fm1 = eval(orig - h, params);
            let fm2 = eval(orig - 2.0 * h, params);
            params.get_mut(id).values.data_mut()[idx] = orig;
            let numeric = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
            let rel = relative_error(analytic, numeric, cfg.floor);
            report.checked += 1;
            worst_here = worst_here.max(rel);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(EntryCheck {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_param.push((name, worst_here));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tape::Tape;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(9);
        let x = store.add("x", 3, 5, Init::Normal { std: 1.0 }, &mut rng).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new(s);
                let v = tape.param(x);
                let sq = tape.mul(v, v);
                let sum = tape.sum_all(sq);
                let loss = tape.scale(sum, 0.5);
                (tape.scalar(loss), tape.backward(loss))
            },
            &GradCheckConfig {
                samples_per_param: 100,
                ..Default::default()
            },
        );
        assert_eq!(report.checked, 15);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(9);
        let x = store.add("x", 1, 4, Init::Constant(1.0), &mut rng).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new(s);
                let v = tape.param(x);
                let sq = tape.mul(v, v);
                let loss = tape.sum_all(sq);
                // report the gradient of sum(x) instead of sum(x^2)
                let mut t2 = Tape::new(s);
                let w = t2.param(x);
                let wrong = t2.sum_all(w);
                (tape.scalar(loss), t2.backward(wrong))
            },
            &GradCheckConfig::default(),
        );
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.worst.unwrap().param, "x");
    }
}
