//! Adaptive Dormand–Prince 5(4) integration on fixed-size states.

use super::FlowError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeTolerances {
    pub abs: f64,
    pub rel: f64,
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for OdeTolerances {
    fn default() -> Self {
        Self {
            abs: 1e-7,
            rel: 1e-7,
            initial_step: 1e-2,
            max_steps: 1_000_000,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

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

// fifth-order weights (also the last stage row, FSAL)
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;

// difference between fifth- and fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrate `y' = f(t, y)` from `t0` to `t1`, returning `y(t1)`.
pub fn integrate<const N: usize, F>(
    f: F,
    y0: [f64; N],
    t0: f64,
    t1: f64,
    tol: &OdeTolerances,
) -> Result<[f64; N], FlowError>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    if t1 == t0 {
        return Ok(y0);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0;
    let mut h = tol.initial_step.min(span);
    let mut k1 = f(t, &y);

    for _ in 0..tol.max_steps {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-14 * span.max(1.0) {
            return Ok(y);
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = dir * h;

        let k2 = f(t + C2 * hs, &combine(&y, hs, &[(A21, &k1)]));
        let k3 = f(t + C3 * hs, &combine(&y, hs, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(
            t + C4 * hs,
            &combine(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = f(
            t + C5 * hs,
            &combine(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + hs,
            &combine(
                &y,
                hs,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = combine(
            &y,
            hs,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = f(t + hs, &y_new);

        let mut err = 0.0;
        for i in 0..N {
            let e = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = tol.abs + tol.rel * y[i].abs().max(y_new[i].abs());
            err += (e / scale).powi(2);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            return Err(FlowError::NonFinite { t, state: y.to_vec() });
        }

        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y = y_new;
            k1 = k7;
            if last {
                return Ok(y);
            }
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= if err <= 1.0 { factor } else { factor.min(1.0) };
        if h < 1e-14 * t.abs().max(span) {
            return Err(FlowError::StepUnderflow { t, state: y.to_vec() });
        }
    }
    Err(FlowError::TooManySteps {
        t,
        state: y.to_vec(),
    })
}
