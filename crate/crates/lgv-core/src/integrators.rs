//! Fixed-step ODE solvers and constant-control rollouts.
//!
//! The steppers are generic over the state representation: plain `Vec<f64>`
//! states for ground-truth simulation and controller execution, and tape
//! [`Var`](crate::tape::Var) states for rollouts that must support reverse-
//! mode differentiation through the entire unrolled computation. Training
//! uses Euler, evaluation RK4; per-method step counters make the split
//! inspectable.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;

/// Anything a fixed-step solver can integrate.
pub trait OdeState: Clone {
    /// self + a * x
    fn axpy(&self, a: f64, x: &Self) -> Self;
    fn max_abs(&self) -> f64;
    fn dim(&self) -> usize;
}

impl OdeState for Vec<f64> {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        self.iter().zip(x).map(|(s, v)| s + a * v).collect()
    }

    fn max_abs(&self) -> f64 {
        self.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn dim(&self) -> usize {
        self.len()
    }
}

impl OdeState for Var {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        self.add(&x.scale(a))
    }

    fn max_abs(&self) -> f64 {
        self.value().max_abs()
    }

    fn dim(&self) -> usize {
        self.len()
    }
}

/// A vector field s -> f(s, u) over some state representation.
pub trait OdeField<S: OdeState> {
    fn eval(&self, s: &S, u: &S) -> Result<S>;
}

impl<S: OdeState, F: Fn(&S, &S) -> Result<S>> OdeField<S> for F {
    fn eval(&self, s: &S, u: &S) -> Result<S> {
        self(s, u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

static EULER_STEPS: AtomicU64 = AtomicU64::new(0);
static RK4_STEPS: AtomicU64 = AtomicU64::new(0);

/// (euler, rk4) step counts since the last reset.
pub fn solver_step_counts() -> (u64, u64) {
    (EULER_STEPS.load(Ordering::Relaxed), RK4_STEPS.load(Ordering::Relaxed))
}

pub fn reset_solver_step_counts() {
    EULER_STEPS.store(0, Ordering::Relaxed);
    RK4_STEPS.store(0, Ordering::Relaxed);
}

fn check_finite<S: OdeState>(s: S, step: usize, what: &str) -> Result<S> {
    if s.max_abs().is_finite() {
        Ok(s)
    } else {
        Err(Error::IntegrationDiverged { step, context: format!("non-finite {what}") })
    }
}

/// One explicit Euler step s + dt f(s, u).
pub fn euler_step<S: OdeState>(f: &impl OdeField<S>, s: &S, u: &S, dt: f64) -> Result<S> {
    assert!(dt > 0.0, "dt must be positive");
    EULER_STEPS.fetch_add(1, Ordering::Relaxed);
    let k = f.eval(s, u)?;
    check_finite(s.axpy(dt, &k), 0, "euler step")
}

/// One classical four-stage Runge-Kutta step.
pub fn rk4_step<S: OdeState>(f: &impl OdeField<S>, s: &S, u: &S, dt: f64) -> Result<S> {
    assert!(dt > 0.0, "dt must be positive");
    RK4_STEPS.fetch_add(1, Ordering::Relaxed);
    let k1 = f.eval(s, u)?;
    let k2 = f.eval(&s.axpy(0.5 * dt, &k1), u)?;
    let k3 = f.eval(&s.axpy(0.5 * dt, &k2), u)?;
    let k4 = f.eval(&s.axpy(dt, &k3), u)?;
    let out = s
        .axpy(dt / 6.0, &k1)
        .axpy(dt / 3.0, &k2)
        .axpy(dt / 3.0, &k3)
        .axpy(dt / 6.0, &k4);
    check_finite(out, 0, "rk4 step")
}

pub fn step<S: OdeState>(method: Method, f: &impl OdeField<S>, s: &S, u: &S, dt: f64) -> Result<S> {
    match method {
        Method::Euler => euler_step(f, s, u, dt),
        Method::Rk4 => rk4_step(f, s, u, dt),
    }
}

/// States s^0..s^T of a constant-control trajectory.
#[derive(Clone, Debug)]
pub struct Rollout<S> {
    pub states: Vec<S>,
    pub dt: f64,
    pub u_const: S,
}

/// Any state component exceeding this magnitude aborts a rollout.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Iterate `method` for T steps with the control held constant (the
/// augmented ODE with du/dt = 0), recording every intermediate state.
pub fn rollout<S: OdeState>(
    f: &impl OdeField<S>,
    s0: &S,
    u_const: &S,
    dt: f64,
    t_steps: usize,
    method: Method,
) -> Result<Rollout<S>> {
    assert!(t_steps >= 1, "rollout needs at least one step");
    let mut states = Vec::with_capacity(t_steps + 1);
    states.push(s0.clone());
    for k in 0..t_steps {
        let next = step(method, f, &states[k], u_const, dt)
            .map_err(|_| Error::IntegrationDiverged { step: k, context: "non-finite state".into() })?;
        let mag = next.max_abs();
        if !mag.is_finite() || mag > DIVERGENCE_GUARD {
            return Err(Error::IntegrationDiverged {
                step: k,
                context: format!("state magnitude {mag:.3e}"),
            });
        }
        states.push(next);
    }
    Ok(Rollout { states, dt, u_const: u_const.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{gt_rhs, total_energy_gt, SystemSpec};
    use crate::params::{Binder, GradAccum, ParamStore};
    use crate::tape::{Tape, Tensor};

    fn decay(s: &Vec<f64>, _u: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(s.iter().map(|v| -v).collect())
    }

    #[test]
    fn euler_examples() {
        let s = vec![1.0];
        let u = vec![];
        let s1 = euler_step(&decay, &s, &u, 0.1).unwrap();
        assert!((s1[0] - 0.9).abs() < 1e-15);

        let zero = |s: &Vec<f64>, _u: &Vec<f64>| Ok(vec![0.0; s.len()]);
        let s1 = euler_step(&zero, &vec![0.7, -0.2], &u, 0.3).unwrap();
        assert_eq!(s1, vec![0.7, -0.2]);

        let mut x = vec![1.0];
        for _ in 0..10 {
            x = euler_step(&decay, &x, &u, 0.1).unwrap();
        }
        assert!((x[0] - 0.34868).abs() < 1e-5);
        assert!((x[0] - 0.9f64.powi(10)).abs() < 1e-14);
    }

    #[test]
    fn rk4_matches_exponential() {
        let u = vec![];
        let s1 = rk4_step(&decay, &vec![1.0], &u, 0.1).unwrap();
        assert!((s1[0] - 0.9048375).abs() < 1e-9);
        assert!((s1[0] - (-0.1f64).exp()).abs() < 1e-7);

        let zero = |s: &Vec<f64>, _u: &Vec<f64>| Ok(vec![0.0; s.len()]);
        let s1 = rk4_step(&zero, &vec![0.4], &u, 0.1).unwrap();
        assert_eq!(s1, vec![0.4]);
    }

    #[test]
    fn pendulum_rk4_conserves_energy() {
        let spec = SystemSpec::pendulum();
        let field = |s: &Vec<f64>, u: &Vec<f64>| gt_rhs(&spec, s, u);
        let s0 = spec.layout().pack(&[2.0], &[0.0]);
        let roll = rollout(&field, &s0, &vec![0.0], 0.05, 20, Method::Rk4).unwrap();
        let e0 = total_energy_gt(&spec, &roll.states[0]);
        let e1 = total_energy_gt(&spec, roll.states.last().unwrap());
        assert!((e1 - e0).abs() < 1e-5 * e0.abs(), "drift {}", (e1 - e0).abs());
    }

    #[test]
    fn zero_control_conservation_all_systems() {
        for spec in [SystemSpec::pendulum(), SystemSpec::cartpole(), SystemSpec::acrobot()] {
            let field = |s: &Vec<f64>, u: &Vec<f64>| gt_rhs(&spec, s, u);
            let q0: Vec<f64> = (0..spec.dof()).map(|j| 0.9 + 0.3 * j as f64).collect();
            let qd0: Vec<f64> = (0..spec.dof()).map(|j| 0.4 - 0.2 * j as f64).collect();
            let s0 = spec.layout().pack(&q0, &qd0);
            let u = vec![0.0; spec.u_dim()];
            let roll = rollout(&field, &s0, &u, 0.01, 100, Method::Rk4).unwrap();
            let e0 = total_energy_gt(&spec, &roll.states[0]);
            let e1 = total_energy_gt(&spec, roll.states.last().unwrap());
            assert!(
                (e1 - e0).abs() <= 1e-3 * e0.abs().max(1.0),
                "{:?}: {e0} -> {e1}",
                spec.name
            );
        }
    }

    #[test]
    fn rollout_one_step_equals_step_and_control_stays_constant() {
        let field = |_s: &Vec<f64>, u: &Vec<f64>| Ok(u.clone());
        let s0 = vec![0.0];
        let roll = rollout(&field, &s0, &vec![0.5], 0.1, 1, Method::Euler).unwrap();
        let single = euler_step(&field, &s0, &vec![0.5], 0.1).unwrap();
        assert_eq!(roll.states[1], single);

        // ds = u with u held constant: exact linear ramp in t.
        let roll = rollout(&field, &s0, &vec![0.5], 0.1, 10, Method::Euler).unwrap();
        for (k, s) in roll.states.iter().enumerate() {
            assert!((s[0] - 0.05 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        // ds = A s with A a rotation generator; exact flow is a rotation.
        let field = |s: &Vec<f64>, _u: &Vec<f64>| Ok(vec![s[1], -s[0]]);
        let s0 = vec![1.0, 0.0];
        let u = vec![];
        let r = rollout(&field, &s0, &u, 0.01, 100, Method::Rk4).unwrap();
        let sf = r.states.last().unwrap();
        let exact = [1.0f64.cos(), -(1.0f64.sin())];
        let err = ((sf[0] - exact[0]).powi(2) + (sf[1] - exact[1]).powi(2)).sqrt();
        assert!(err < 1e-7, "rk4 error {err}");

        let r = rollout(&field, &s0, &u, 0.01, 100, Method::Euler).unwrap();
        let sf = r.states.last().unwrap();
        let err_e = ((sf[0] - exact[0]).powi(2) + (sf[1] - exact[1]).powi(2)).sqrt();
        assert!(err_e < 2e-2 && err_e > 1e-4, "euler error {err_e}");
    }

    /// Global-error order on the linear test problem: log-log slope within
    /// +-0.15 of 1 (Euler) and 4 (RK4).
    #[test]
    fn convergence_order_slopes() {
        let u = vec![];
        let slope_of = |method: Method| -> f64 {
            let dts: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
            let mut pts = Vec::new();
            for &dt in &dts {
                let n = (1.0 / dt).round() as usize;
                let r = rollout(&decay, &vec![1.0], &u, dt, n, method).unwrap();
                let err = (r.states.last().unwrap()[0] - (-1.0f64).exp()).abs();
                pts.push((dt.ln(), err.ln()));
            }
            let n = pts.len() as f64;
            let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            (n * sxy - sx * sy) / (n * sxx - sx * sx)
        };
        let se = slope_of(Method::Euler);
        let s4 = slope_of(Method::Rk4);
        assert!((se - 1.0).abs() < 0.15, "euler slope {se}");
        assert!((s4 - 4.0).abs() < 0.15, "rk4 slope {s4}");
    }

    /// Reverse mode through the unrolled solver against central finite
    /// differences, w.r.t. both the initial state and field parameters.
    #[test]
    fn gradient_through_solver_matches_fd() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::matrix(3, 3, vec![-0.4, 0.2, 0.1, 0.0, -0.3, 0.25, 0.15, -0.1, -0.5]),
        );
        let s0v = vec![0.7, -0.2, 0.4];
        let (dt, t_steps) = (0.05, 5);

        let run = |store: &ParamStore, s0: &[f64]| -> (f64, GradAccum, Vec<f64>) {
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let w = binder.bind(store, "w");
            let s0 = tape.vector(s0.to_vec());
            let u = tape.vector(vec![0.0]);
            let field = |s: &Var, _u: &Var| -> Result<Var> { Ok(w.matvec(&s.tanh())) };
            let roll = rollout(&field, &s0, &u, dt, t_steps, Method::Euler).unwrap();
            let loss = roll.states.last().unwrap().dot(&tape.vector(vec![1.0, 2.0, -1.0]));
            let grads = tape.backward(&loss);
            let mut acc = GradAccum::zeros_like(store);
            binder.accumulate(&grads, &mut acc);
            let gs0 = grads.wrt(&s0).unwrap().to_vec();
            (loss.item(), acc, gs0)
        };

        let (_, acc, gs0) = run(&store, &s0v);
        let h = 1e-6;
        // d loss / d s0
        for k in 0..3 {
            let mut sp = s0v.clone();
            sp[k] += h;
            let (fp, _, _) = run(&store, &sp);
            sp[k] -= 2.0 * h;
            let (fm, _, _) = run(&store, &sp);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (gs0[k] - fd).abs() / 1.0f64.max(fd.abs());
            assert!(rel < 1e-4, "s0[{k}]: {} vs {fd}", gs0[k]);
        }
        // d loss / d w
        let widx = store.idx("w");
        for k in 0..9 {
            let orig = store.get("w").data()[k];
            store.get_mut("w").data_mut()[k] = orig + h;
            let (fp, _, _) = run(&store, &s0v);
            store.get_mut("w").data_mut()[k] = orig - h;
            let (fm, _, _) = run(&store, &s0v);
            store.get_mut("w").data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (acc.get(widx)[k] - fd).abs() / 1.0f64.max(fd.abs());
            assert!(rel < 1e-4, "w[{k}]: {} vs {fd}", acc.get(widx)[k]);
        }
    }

    #[test]
    fn divergence_guard_reports_step() {
        let blow = |s: &Vec<f64>, _u: &Vec<f64>| Ok(s.iter().map(|v| v * v).collect());
        let err = rollout(&blow, &vec![10.0], &vec![], 1.0, 50, Method::Euler).unwrap_err();
        match err {
            Error::IntegrationDiverged { step, .. } => assert!(step < 10, "step {step}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn step_counters_track_methods() {
        reset_solver_step_counts();
        let u = vec![];
        let _ = rollout(&decay, &vec![1.0], &u, 0.1, 7, Method::Euler).unwrap();
        let _ = rollout(&decay, &vec![1.0], &u, 0.1, 3, Method::Rk4).unwrap();
        let (e, r) = solver_step_counts();
        assert_eq!((e, r), (7, 3));
        reset_solver_step_counts();
    }
}
