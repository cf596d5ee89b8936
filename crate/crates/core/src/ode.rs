//! Adaptive Dormand–Prince 5(4) integrator with 4th-order dense output.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Finished,
    /// The guard asked to stop.
    Stopped,
    StepUnderflow,
    NonFinite,
    TooManySteps,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    /// Time reached (equals the requested end on success).
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const MAX_STEPS: usize = 5_000_000;

/// Integrates `y' = f(t, y)` from `t0` to `t1`, calling `sink(t, y)` at each
/// requested sample time (sorted, within `[t0, t1]`) from the dense output.
///
/// Components flagged in `absolute_only` get the error scale
/// `atol + rtol` independent of their magnitude, so unbounded coordinates
/// such as phase angles do not loosen the step control as they grow.
/// `guard` is called after every accepted step and may request a stop.
#[allow(clippy::too_many_arguments)]
pub fn integrate<F, S, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    samples: &[f64],
    tol: Tolerances,
    absolute_only: &[bool],
    mut sink: S,
    mut guard: G,
) -> Outcome
where
    F: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(f64, &[f64]),
    G: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut next_sample = samples.iter().position(|&s| s >= t0).unwrap_or(samples.len());
    while next_sample < samples.len() && samples[next_sample] <= t0 {
        sink(t0, &y);
        next_sample += 1;
    }
    let scale = |a: f64, b: f64, k: usize| -> f64 {
        if absolute_only.get(k).copied().unwrap_or(false) {
            tol.atol + tol.rtol
        } else {
            tol.atol + tol.rtol * a.abs().max(b.abs())
        }
    };

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut dense = vec![[0.0; 5]; n];
    let mut out = vec![0.0; n];

    f(t, &y, &mut k1);
    let span = t1 - t0;
    if span <= 0.0 {
        return Outcome {
            status: Status::Finished,
            t,
            y,
            accepted: 0,
            rejected: 0,
        };
    }

    // initial step from the size of the derivative relative to the tolerances
    let (mut d0, mut d1) = (0.0, 0.0);
    for k in 0..n {
        let sc = scale(y[k], y[k], k);
        d0 += (y[k] / sc).powi(2);
        d1 += (k1[k] / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n.max(1) as f64).sqrt(), (d1 / n.max(1) as f64).sqrt());
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span).max(1e-10 * span);

    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut status = Status::Finished;
    let mut last_rejected = false;
    while t < t1 {
        if accepted + rejected >= MAX_STEPS {
            status = Status::TooManySteps;
            break;
        }
        if h < 1e-13 * t.abs().max(1.0) {
            status = Status::StepUnderflow;
            break;
        }
        if t + h > t1 {
            h = t1 - t;
        }

        for k in 0..n {
            tmp[k] = y[k] + h * A21 * k1[k];
        }
        f(t + C2 * h, &tmp, &mut k2);
        for k in 0..n {
            tmp[k] = y[k] + h * (A31 * k1[k] + A32 * k2[k]);
        }
        f(t + C3 * h, &tmp, &mut k3);
        for k in 0..n {
            tmp[k] = y[k] + h * (A41 * k1[k] + A42 * k2[k] + A43 * k3[k]);
        }
        f(t + C4 * h, &tmp, &mut k4);
        for k in 0..n {
            tmp[k] = y[k] + h * (A51 * k1[k] + A52 * k2[k] + A53 * k3[k] + A54 * k4[k]);
        }
        f(t + C5 * h, &tmp, &mut k5);
        for k in 0..n {
            tmp[k] = y[k] + h * (A61 * k1[k] + A62 * k2[k] + A63 * k3[k] + A64 * k4[k] + A65 * k5[k]);
        }
        f(t + h, &tmp, &mut k6);
        for k in 0..n {
            y1[k] = y[k] + h * (A71 * k1[k] + A73 * k3[k] + A74 * k4[k] + A75 * k5[k] + A76 * k6[k]);
        }
        f(t + h, &y1, &mut k7);

        let mut err = 0.0;
        for k in 0..n {
            let e = h * (E1 * k1[k] + E3 * k3[k] + E4 * k4[k] + E5 * k5[k] + E6 * k6[k] + E7 * k7[k]);
            err += (e / scale(y[k], y1[k], k)).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            if h < 1e-10 {
                status = Status::NonFinite;
                break;
            }
            h *= 0.1;
            rejected += 1;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            for k in 0..n {
                let ydiff = y1[k] - y[k];
                let bspl = h * k1[k] - ydiff;
                dense[k] = [
                    y[k],
                    ydiff,
                    bspl,
                    ydiff - h * k7[k] - bspl,
                    h * (D1 * k1[k] + D3 * k3[k] + D4 * k4[k] + D5 * k5[k] + D6 * k6[k] + D7 * k7[k]),
                ];
            }
            let t_new = if t1 - (t + h) <= 1e-14 * t1.abs().max(1.0) {
                t1
            } else {
                t + h
            };
            while next_sample < samples.len() && samples[next_sample] <= t_new {
                let theta = (samples[next_sample] - t) / h;
                let theta1 = 1.0 - theta;
                for k in 0..n {
                    let r = &dense[k];
                    out[k] = r[0] + theta * (r[1] + theta1 * (r[2] + theta * (r[3] + theta1 * r[4])));
                }
                sink(samples[next_sample], &out);
                next_sample += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            accepted += 1;
            if y.iter().any(|v| !v.is_finite()) {
                status = Status::NonFinite;
                break;
            }
            if guard(t, &y) {
                status = Status::Stopped;
                break;
            }
            let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac.clamp(0.2, 10.0);
            last_rejected = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected += 1;
            last_rejected = true;
        }
    }
    Outcome {
        status,
        t,
        y,
        accepted,
        rejected,
    }
}
