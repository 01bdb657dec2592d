//! Small numeric helpers shared by several modules.

/// Probabilities are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before any
/// logit or log so downstream arithmetic stays finite.
pub(crate) const SCORE_EPS: f64 = 1e-12;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; caller is responsible for `0 < p < 1`.
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn clamp_unit(p: f64) -> f64 {
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Render an `f64` with 17 significant digits, enough for the decimal
/// string to parse back to the identical bit pattern.
pub(crate) fn fmt_g17(v: f64) -> String {
    format!("{:.16e}", v)
}
