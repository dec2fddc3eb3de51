use super::DifferentiableMap;
use crate::linalg;
use crate::rng::{self, SeededRng};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Errors smaller than this absolute scale are not amplified into large
/// relative errors when both gradients are (numerically) zero.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VjpReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// `J(x)^T w` by central differences, one input coordinate at a time.
///
/// The step is snapped so that `x + h` and `x - h` differ by an exactly
/// representable amount; linear maps then come out exact up to the rounding
/// of the map itself.
pub fn central_difference_vjp(
    map: &dyn DifferentiableMap,
    x: &[f64],
    w: &[f64],
    h: f64,
) -> crate::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let plus = x[i] + h;
        let minus = x[i] - h;
        xp[i] = plus;
        let fp = map.forward(&xp)?;
        xp[i] = minus;
        let fm = map.forward(&xp)?;
        xp[i] = x[i];
        let span = plus - minus;
        let col: f64 = fp
            .iter()
            .zip(&fm)
            .zip(w)
            .map(|((a, b), wi)| ((a - b) / span) * wi)
            .sum();
        out.push(col);
    }
    Ok(out)
}

/// Relative distance between an analytic and a numeric gradient.
pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = linalg::norm(&linalg::sub(analytic, numeric));
    if diff == 0.0 {
        return 0.0;
    }
    let scale = linalg::norm(analytic)
        .max(linalg::norm(numeric))
        .max(REL_FLOOR);
    diff / scale
}

/// Finite-difference check over `trials` standard-normal probes `(x, w)`
/// drawn from a fixed seed.
pub fn check_vjp(map: &dyn DifferentiableMap, trials: usize, tol: f64) -> VjpReport {
    check_vjp_seeded(map, trials, tol, 0x5eed_0f_c4ec)
}

pub fn check_vjp_seeded(
    map: &dyn DifferentiableMap,
    trials: usize,
    tol: f64,
    seed: u64,
) -> VjpReport {
    let mut rng = rng::seeded(seed);
    let mut max_rel_err = 0.0_f64;
    let mut ok = true;
    for _ in 0..trials.max(1) {
        match probe(map, &mut rng) {
            Some(err) => max_rel_err = max_rel_err.max(err),
            None => ok = false,
        }
    }
    VjpReport {
        trials: trials.max(1),
        max_rel_err,
        pass: ok && max_rel_err <= tol,
    }
}

fn probe(map: &dyn DifferentiableMap, rng: &mut SeededRng) -> Option<f64> {
    let x = rng::normal_vec(rng, map.input_dim());
    let w = rng::normal_vec(rng, map.output_dim());
    let analytic = map.vjp(&x, &w).ok()?;
    let numeric = central_difference_vjp(map, &x, &w, FD_STEP).ok()?;
    let err = relative_error(&analytic, &numeric);
    err.is_finite().then_some(err)
}
