//! Time-domain integration of the nonlinear dynamics with scheduled
//! parameter steps, and a coarse classification of the long-time behaviour.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::equilibrium::residual_norm;
use crate::error::{Error, Result};
use crate::linearization::stability_of;
use crate::model::{vector_field, SystemState};
use crate::ode::{self, Status, Tolerances};
use crate::systems::{System, SystemDef};

/// Frequencies or voltages beyond this magnitude count as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e3;
pub const CONVERGED_TOL: f64 = 1e-6;
pub const CYCLE_MIN_AMPLITUDE: f64 = 1e-4;
pub const CYCLE_MAX_DRIFT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub path: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default)]
    pub events: Vec<Event>,
    pub t_end: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidConfig("t_end must be positive".into()));
        }
        let mut prev = 0.0;
        for ev in &self.events {
            if !(ev.t > prev) || ev.t >= self.t_end {
                return Err(Error::InvalidConfig(format!(
                    "event times must increase strictly within (0, t_end); got {} after {prev}",
                    ev.t
                )));
            }
            prev = ev.t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Converged,
    LimitCycle,
    Diverged,
    /// Bounded but neither settled nor a steady oscillation within the
    /// observed horizon.
    Transient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// Length of the trailing windows compared for the verdict (s).
    pub window: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions { window: 5.0 }
    }
}

/// One constant-parameter stretch between events.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    /// Index range into the trajectory samples.
    pub first_sample: usize,
    pub last_sample: usize,
    pub classification: Classification,
    /// Residual of the stationarity conditions at the segment end, under the
    /// segment's parameters.
    pub final_residual: f64,
    pub integration_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub segments: Vec<Segment>,
    /// Classification of the last segment.
    pub classification: Classification,
    pub final_residual: f64,
}

/// Trailing-window statistics used by [`classify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    /// Peak-to-peak amplitude over the last and the second-to-last window.
    pub amplitude_last: f64,
    pub amplitude_prev: f64,
    /// Largest deviation from the final sample over the last window.
    pub variation_last: f64,
}

/// Coordinates used for window statistics: frequencies, voltages and the
/// sine and cosine of angles measured from node 0.
fn observables(s: &SystemState) -> Vec<f64> {
    let d0 = s.delta.first().copied().unwrap_or(0.0);
    let mut v = Vec::with_capacity(4 * s.len());
    v.extend_from_slice(&s.omega);
    v.extend_from_slice(&s.e);
    v.extend(s.delta.iter().map(|d| (d - d0).sin()));
    v.extend(s.delta.iter().map(|d| (d - d0).cos()));
    v
}

pub fn window_stats(times: &[f64], states: &[SystemState], window: f64) -> Option<WindowStats> {
    let (&t_last, _) = times.split_last()?;
    let t_first = *times.first()?;
    if t_last - t_first < 2.0 * window * (1.0 - 1e-9) {
        return None;
    }
    let obs: Vec<Vec<f64>> = states.iter().map(observables).collect();
    let end = obs.last()?;
    let amplitude = |lo: f64, hi: f64| -> f64 {
        let idx: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= lo && times[k] <= hi).collect();
        (0..end.len())
            .map(|c| {
                let (mn, mx) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &k| {
                    (a.min(obs[k][c]), b.max(obs[k][c]))
                });
                mx - mn
            })
            .fold(0.0, f64::max)
    };
    let variation_last = (0..times.len())
        .filter(|&k| times[k] >= t_last - window)
        .flat_map(|k| obs[k].iter().zip(end).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Some(WindowStats {
        amplitude_last: amplitude(t_last - window, t_last),
        amplitude_prev: amplitude(t_last - 2.0 * window, t_last - window),
        variation_last,
    })
}

/// Classifies a constant-parameter stretch of samples.
///
/// Diverged: failed integration, a frequency or voltage beyond
/// [`DIVERGENCE_BOUND`], or a non-positive voltage. Converged: final residual
/// and variation over the last window below [`CONVERGED_TOL`]. Limit cycle:
/// last-window amplitude above [`CYCLE_MIN_AMPLITUDE`] with less than 10 %
/// drift from the previous window. Anything else is transient.
pub fn classify(
    times: &[f64],
    states: &[SystemState],
    final_residual: f64,
    integration_failed: bool,
    opts: &ClassifyOptions,
) -> Classification {
    let blown = states.iter().any(|s| {
        s.omega.iter().any(|w| !(w.abs() <= DIVERGENCE_BOUND))
            || s.e.iter().any(|e| !(e.abs() <= DIVERGENCE_BOUND) || *e <= 0.0)
    });
    if integration_failed || blown {
        return Classification::Diverged;
    }
    let Some(w) = window_stats(times, states, opts.window) else {
        return Classification::Transient;
    };
    if final_residual < CONVERGED_TOL && w.variation_last < CONVERGED_TOL {
        return Classification::Converged;
    }
    if w.amplitude_last > CYCLE_MIN_AMPLITUDE
        && (w.amplitude_last - w.amplitude_prev).abs() < CYCLE_MAX_DRIFT * w.amplitude_prev
    {
        return Classification::LimitCycle;
    }
    Classification::Transient
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    #[serde(default = "default_dt")]
    pub sample_dt: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default)]
    pub classify: ClassifyOptions,
}

fn default_dt() -> f64 {
    0.01
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-10
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            sample_dt: default_dt(),
            rtol: default_rtol(),
            atol: default_atol(),
            classify: ClassifyOptions::default(),
        }
    }
}

/// Integrates `def` from `init`, applying `sched` events exactly at their
/// times. The integrator is restarted after every event. Returns a
/// (possibly truncated) trajectory; integration failure is reported as a
/// diverged segment, not an error.
pub fn integrate(def: &SystemDef, init: &SystemState, sched: &Schedule, opts: &SimOptions) -> Result<Trajectory> {
    sched.validate()?;
    if !(opts.sample_dt > 0.0) {
        return Err(Error::InvalidConfig("sample_dt must be positive".into()));
    }
    let mut def = def.clone();
    let mut sys = def.realize()?;
    let n = sys.len();
    init.check_len(n)?;

    let mut y = init.to_vec();
    if let Some(s) = sys.slack {
        // the ideal source is pinned regardless of the supplied initial state
        y[s] = 0.0;
        y[n + s] = 0.0;
        y[2 * n + s] = sys.params.ed[s];
    }
    let absolute_only: Vec<bool> = (0..3 * n).map(|k| k < n).collect();
    let tol = Tolerances {
        rtol: opts.rtol,
        atol: opts.atol,
    };

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut segments = Vec::new();
    let mut bounds: Vec<f64> = vec![0.0];
    bounds.extend(sched.events.iter().map(|e| e.t));
    bounds.push(sched.t_end);

    for (seg, win) in bounds.windows(2).enumerate() {
        let (t0, t1) = (win[0], win[1]);
        if seg > 0 {
            let ev = &sched.events[seg - 1];
            def.set(&ev.path, ev.value)?;
            sys = def.realize()?;
            if let Some(s) = sys.slack {
                y[2 * n + s] = sys.params.ed[s];
            }
        }
        let first_sample = times.len();
        // sample grid anchored at t = 0; segment ends are always included
        let k0 = (t0 / opts.sample_dt).ceil() as usize;
        let mut samples: Vec<f64> = (k0..)
            .map(|k| k as f64 * opts.sample_dt)
            .take_while(|&t| t < t1 - 1e-12)
            .filter(|&t| t > t0 + 1e-12 || seg == 0)
            .collect();
        if seg == 0 && samples.first() != Some(&0.0) {
            samples.insert(0, 0.0);
        }
        samples.push(t1);

        let System { net, params, slack, .. } = &sys;
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let s = SystemState::from_slice(y);
            let d = vector_field(&s, params, net, *slack).expect("dimensions checked");
            dy[..n].copy_from_slice(&d.delta);
            dy[n..2 * n].copy_from_slice(&d.omega);
            dy[2 * n..].copy_from_slice(&d.e);
        };
        let guard = |_t: f64, y: &[f64]| {
            y[n..].iter().any(|v| v.abs() > DIVERGENCE_BOUND) || y[2 * n..].iter().any(|&e| e <= 0.0)
        };
        let out = ode::integrate(
            rhs,
            t0,
            &y,
            t1,
            &samples,
            tol,
            &absolute_only,
            |t, v| {
                times.push(t);
                states.push(SystemState::from_slice(v));
            },
            guard,
        );
        y = out.y;
        let failed = out.status != Status::Finished;
        let end_state = SystemState::from_slice(&y);
        let final_residual = if failed {
            f64::INFINITY
        } else {
            frame_residual(&end_state, &sys)?
        };
        let last_sample = times.len();
        let classification = classify(
            &times[first_sample..last_sample],
            &states[first_sample..last_sample],
            final_residual,
            failed,
            &opts.classify,
        );
        segments.push(Segment {
            t_start: t0,
            t_end: if failed { out.t } else { t1 },
            first_sample,
            last_sample,
            classification,
            final_residual,
            integration_failed: failed,
        });
        if failed {
            break;
        }
    }
    let last = segments.last().expect("at least one segment");
    Ok(Trajectory {
        classification: last.classification,
        final_residual: last.final_residual,
        times,
        states,
        segments,
    })
}

/// Stationarity residual in the co-rotating frame: without a slack node the
/// common frequency is taken as the frame frequency.
fn frame_residual(state: &SystemState, sys: &System) -> Result<f64> {
    residual_norm(state, &sys.params, &sys.net, sys.slack)
}

/// How the initial state is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitSpec {
    /// `"equilibrium"` (the first linearly stable equilibrium, else the first
    /// found) or `"flat"` (zero angles and frequencies, desired voltages).
    Named(String),
    State(SystemState),
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Named("equilibrium".into())
    }
}

pub fn initial_state(def: &SystemDef, init: &InitSpec) -> Result<SystemState> {
    match init {
        InitSpec::State(s) => Ok(s.clone()),
        InitSpec::Named(name) if name == "flat" => {
            let sys = def.realize()?;
            Ok(SystemState {
                delta: vec![0.0; sys.len()],
                omega: vec![0.0; sys.len()],
                e: sys.params.ed.clone(),
            })
        }
        InitSpec::Named(name) if name == "equilibrium" => {
            let sys = def.realize()?;
            let eqs = sys.equilibria()?;
            let stable = eqs.iter().find(|eq| {
                stability_of(eq, &sys.params, &sys.net)
                    .map(|r| r.is_stable())
                    .unwrap_or(false)
            });
            stable.or(eqs.first()).map(|eq| eq.state.clone()).ok_or_else(|| {
                Error::InvalidConfig("no equilibrium to start from; use \"flat\" or an explicit state".into())
            })
        }
        InitSpec::Named(other) => Err(Error::InvalidConfig(format!("unknown initial state `{other}`"))),
    }
}

/// A complete simulation request as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub system: SystemDef,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub events: Vec<Event>,
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub sample_dt: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default)]
    pub window: Option<f64>,
}

impl Scenario {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            events: self.events.clone(),
            t_end: self.t_end,
        }
    }

    pub fn options(&self) -> SimOptions {
        SimOptions {
            sample_dt: self.sample_dt,
            rtol: self.rtol,
            atol: self.atol,
            classify: ClassifyOptions {
                window: self.window.unwrap_or(ClassifyOptions::default().window),
            },
        }
    }

    pub fn run(&self) -> Result<Trajectory> {
        let init = initial_state(&self.system, &self.init)?;
        integrate(&self.system, &init, &self.schedule(), &self.options())
    }
}

/// Writes `t, delta_0.., omega_0.., E_0..` rows.
pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let n = traj.states.first().map_or(0, SystemState::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for prefix in ["delta", "omega", "E"] {
        header.extend((0..n).map(|j| format!("{prefix}_{j}")));
    }
    w.write_record(&header)?;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![t.to_string()];
        row.extend(s.to_vec().iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::SingleInverterParams;

    fn single(chi: f64, pd: f64) -> SystemDef {
        SystemDef::SingleInverter(SingleInverterParams {
            tau: 0.1,
            kappa: 1.0,
            chi,
            pd,
            qd: 0.05,
            ed: 1.0,
            omega_d: 0.0,
            b: 1.5,
            e_hat: 1.0,
        })
    }

    fn constant(n: usize, value: f64) -> (Vec<f64>, Vec<SystemState>) {
        let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.1).collect();
        let mut s = SystemState::flat(2);
        s.e[0] = value;
        (times, vec![s; n])
    }

    #[test]
    fn constant_samples_converge() {
        let (t, s) = constant(200, 1.0);
        let c = classify(&t, &s, 0.0, false, &ClassifyOptions { window: 5.0 });
        assert_eq!(c, Classification::Converged);
    }

    #[test]
    fn blow_up_samples_diverge() {
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.1).collect();
        let states = times
            .iter()
            .map(|t| {
                let mut s = SystemState::flat(1);
                s.omega[0] = (t * 0.5).exp();
                s
            })
            .collect::<Vec<_>>();
        let c = classify(&times, &states, 1.0, false, &ClassifyOptions { window: 5.0 });
        assert_eq!(c, Classification::Diverged);
    }

    #[test]
    fn steady_oscillation_is_a_cycle() {
        let times: Vec<f64> = (0..2000).map(|k| k as f64 * 0.01).collect();
        let states = times
            .iter()
            .map(|t| {
                let mut s = SystemState::flat(1);
                s.omega[0] = 0.1 * (3.0 * t).sin();
                s
            })
            .collect::<Vec<_>>();
        let c = classify(&times, &states, 0.1, false, &ClassifyOptions { window: 5.0 });
        assert_eq!(c, Classification::LimitCycle);
    }

    #[test]
    fn short_record_is_transient() {
        let (t, s) = constant(20, 1.0);
        assert_eq!(
            classify(&t, &s, 0.0, false, &ClassifyOptions::default()),
            Classification::Transient
        );
    }

    #[test]
    fn schedule_validation() {
        let ev = |t| Event {
            t,
            path: "chi".into(),
            value: 0.1,
        };
        assert!(Schedule {
            events: vec![ev(1.0), ev(2.0)],
            t_end: 3.0
        }
        .validate()
        .is_ok());
        assert!(Schedule {
            events: vec![ev(2.0), ev(1.0)],
            t_end: 3.0
        }
        .validate()
        .is_err());
        assert!(Schedule {
            events: vec![ev(3.0)],
            t_end: 3.0
        }
        .validate()
        .is_err());
        assert!(Schedule {
            events: vec![ev(0.0)],
            t_end: 3.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_the_flow() {
        let def = single(0.05, 1.2);
        let init = initial_state(&def, &InitSpec::default()).unwrap();
        let traj = integrate(
            &def,
            &init,
            &Schedule {
                events: vec![],
                t_end: 50.0,
            },
            &SimOptions::default(),
        )
        .unwrap();
        let drift = traj
            .states
            .iter()
            .flat_map(|s| s.to_vec().into_iter().zip(init.to_vec()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        assert!(drift < 1e-7, "{drift:e}");
        assert_eq!(traj.classification, Classification::Converged);
    }

    #[test]
    fn events_apply_at_their_times() {
        let def = single(0.05, 1.0);
        let init = initial_state(&def, &InitSpec::default()).unwrap();
        let sched = Schedule {
            events: vec![Event {
                t: 1.0,
                path: "Pd".into(),
                value: 1.1,
            }],
            t_end: 30.0,
        };
        let traj = integrate(&def, &init, &sched, &SimOptions::default()).unwrap();
        assert_eq!(traj.segments.len(), 2);
        let seg = &traj.segments[1];
        assert!((traj.times[seg.first_sample] - 1.01).abs() < 1e-12);
        // the state right at the event still belongs to the first segment
        assert_eq!(traj.times[traj.segments[0].last_sample - 1], 1.0);
        assert_eq!(seg.classification, Classification::Converged);
        let mut moved = def.clone();
        moved.set("Pd", 1.1).unwrap();
        let target = moved.realize().unwrap().equilibria().unwrap()[0].state.clone();
        let end = traj.states.last().unwrap();
        assert!((end.delta[0] - target.delta[0]).abs() < 1e-6);
    }

    #[test]
    fn csv_header() {
        let (t, s) = constant(3, 1.0);
        let traj = Trajectory {
            times: t,
            states: s,
            segments: vec![],
            classification: Classification::Converged,
            final_residual: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,delta_0,delta_1,omega_0,omega_1,E_0,E_1\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
