//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamGrads, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-3;
const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares the analytic gradient of `loss` with central differences on a
/// uniformly sampled `fraction` of all scalar parameters (at least one).
///
/// `loss` returns the scalar loss and its analytic parameter gradients.
pub fn grad_check<L>(
    store: &ParamStore<f64>,
    loss: L,
    fraction: f64,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<(f64, ParamGrads<f64>)>,
{
    if !(fraction > 0.0 && fraction <= 1.0) || step <= 0.0 {
        return Err(Error::Validation(format!(
            "grad_check needs fraction in (0,1] and positive step (got {fraction}, {step})"
        )));
    }
    let (_, analytic) = loss(store)?;
    for id in store.ids() {
        if let Some(g) = analytic.get(id) {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at {}[{pos}]",
                    store.name(id)
                )));
            }
        }
    }

    // Flat index space over all parameters.
    let sizes: Vec<usize> = store.ids().map(|id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let count = ((total as f64 * fraction).round() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut offset = 0;
    let mut pick_iter = picks.into_iter().peekable();
    for (id, &size) in store.ids().zip(&sizes) {
        while let Some(&flat) = pick_iter.peek() {
            if flat >= offset + size {
                break;
            }
            pick_iter.next();
            let local = flat - offset;
            let base = store.get(id).as_slice().expect("standard layout")[local];
            let set = |p: &mut ParamStore<f64>, v: f64| {
                p.get_mut(id).as_slice_mut().expect("standard layout")[local] = v;
            };
            set(&mut probe, base + step);
            let (up, _) = loss(&probe)?;
            set(&mut probe, base - step);
            let (down, _) = loss(&probe)?;
            set(&mut probe, base);
            let numeric = (up - down) / (2.0 * step);
            let analytic_value = analytic
                .get(id)
                .map(|g| g.as_slice().expect("standard layout")[local])
                .unwrap_or(0.0);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite-difference estimate at {}[{local}]",
                    store.name(id)
                )));
            }
            let err = relative_error(analytic_value, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.name(id).to_string(), local));
            }
        }
        offset += size;
    }
    Ok(report)
}
