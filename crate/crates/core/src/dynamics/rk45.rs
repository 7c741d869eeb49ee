//! Adaptive Dormand–Prince 4(5) integrator.
//!
//! Explicit embedded pair with FSAL; step acceptance uses a mixed
//! absolute/relative RMS error norm. The caller integrates one smooth segment
//! at a time and must not let a segment span a drive discontinuity.

use nalgebra::DVector;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
// 5th-order solution weights (also row 7 of the tableau, giving FSAL).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Embedded 4th-order weights.
const E1: f64 = 5179.0 / 57600.0;
const E3: f64 = 7571.0 / 16695.0;
const E4: f64 = 393.0 / 640.0;
const E5: f64 = -92097.0 / 339200.0;
const E6: f64 = 187.0 / 2100.0;
const E7: f64 = 1.0 / 40.0;

#[derive(Debug, Clone)]
pub struct Rk45Opts {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Step floor; running into it means the problem looks stiff at this
    /// tolerance and integration aborts rather than silently stalling.
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for Rk45Opts {
    fn default() -> Self {
        Rk45Opts { abs_tol: 1e-8, rel_tol: 1e-6, h_min: 1e-12, h_max: f64::INFINITY }
    }
}

#[derive(Debug, Clone)]
pub struct StepUnderflow {
    pub t: f64,
}

/// Integrates y' = f(t, y) from t0 to t1, invoking `sink(t, y, y')` after every
/// accepted step. `sink` returning false stops integration early; the state at
/// the stop point is returned either way. `h_start` seeds the step size and the
/// final step size is handed back for continuation across segments.
pub fn integrate<F, S>(
    mut f: F,
    mut y: DVector<f64>,
    t0: f64,
    t1: f64,
    h_start: Option<f64>,
    opts: &Rk45Opts,
    mut sink: S,
) -> Result<(DVector<f64>, f64), StepUnderflow>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    S: FnMut(f64, &DVector<f64>, &DVector<f64>) -> bool,
{
    let span = t1 - t0;
    debug_assert!(span > 0.0);
    let mut t = t0;
    let mut h = h_start
        .unwrap_or(span / 100.0)
        .min(opts.h_max)
        .min(span)
        .max(opts.h_min);
    let mut k1 = f(t, &y);

    while t < t1 {
        h = h.min(t1 - t);
        let k2 = f(t + C2 * h, &(&y + h * A21 * &k1));
        let k3 = f(t + C3 * h, &(&y + h * (A31 * &k1 + A32 * &k2)));
        let k4 = f(t + C4 * h, &(&y + h * (A41 * &k1 + A42 * &k2 + A43 * &k3)));
        let k5 = f(
            t + C5 * h,
            &(&y + h * (A51 * &k1 + A52 * &k2 + A53 * &k3 + A54 * &k4)),
        );
        let k6 = f(
            t + h,
            &(&y + h * (A61 * &k1 + A62 * &k2 + A63 * &k3 + A64 * &k4 + A65 * &k5)),
        );
        let y5 = &y + h * (B1 * &k1 + B3 * &k3 + B4 * &k4 + B5 * &k5 + B6 * &k6);
        let k7 = f(t + h, &y5);
        let y4 = &y + h * (E1 * &k1 + E3 * &k3 + E4 * &k4 + E5 * &k5 + E6 * &k6 + E7 * &k7);

        let mut err_sq = 0.0;
        for i in 0..y.len() {
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / scale;
            err_sq += e * e;
        }
        let err = (err_sq / y.len().max(1) as f64).sqrt();

        if err <= 1.0 {
            t += h;
            y = y5;
            k1 = k7; // FSAL
            if !sink(t, &y, &k1) {
                return Ok((y, h));
            }
        }

        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h = (h * factor).min(opts.h_max);
        if h < opts.h_min && t < t1 {
            return Err(StepUnderflow { t });
        }
    }
    Ok((y, h))
}
