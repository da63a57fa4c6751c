//! Analytic ground-truth Lagrangian systems: pendulum, cart-pole, acrobot.
//!
//! Conventions: phi = 0 is the upright (maximum potential energy)
//! configuration for every rotational coordinate; the acrobot's second angle
//! is measured relative to the first link; all systems are fully actuated
//! with an identity input matrix in generalized-force coordinates.
//!
//! The equations of motion are integrated in the angle-aware state form
//! s = (r, cos phi, sin phi, rdot, phidot). Two right-hand-side variants are
//! provided: the complete Euler-Lagrange expansion
//! M qdd = -Mdot qd + 1/2 grad_q(qd' M qd) - grad V + g u, and the
//! abbreviated form M qdd = -1/2 Mdot qd - grad V + g u. Both conserve
//! energy under zero control; they differ as vector fields whenever the mass
//! matrix depends on the configuration.

use serde::{Deserialize, Serialize};

pub use crate::state::{CoordKind, StateLayout};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Pendulum,
    CartPole,
    Acrobot,
}

impl std::fmt::Display for SystemName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SystemName::Pendulum => "pendulum",
            SystemName::CartPole => "cartpole",
            SystemName::Acrobot => "acrobot",
        };
        write!(f, "{s}")
    }
}

/// Which right-hand-side expansion the ground truth integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ElForm {
    #[default]
    Full,
    Eq3,
}

/// Fixed physical constants of a system.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhysParams {
    /// Per-body mass (kg).
    pub masses: Vec<f64>,
    /// Per-body length (m): pendulum rod, cart-pole pole, acrobot links.
    pub lengths: Vec<f64>,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
}

impl PhysParams {
    fn validate(&self) -> Result<()> {
        let ok = self.masses.iter().chain(&self.lengths).chain([&self.gravity]).all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("physical constants must be strictly positive".into()))
        }
    }
}

/// Declarative description of a rigid-body system.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: SystemName,
    pub n_bodies: usize,
    /// Declared holonomic constraint count; dof = 3 n_bodies - constraints.
    pub holonomic_constraints: usize,
    pub coord_kinds: Vec<CoordKind>,
    /// Which body each coordinate positions.
    pub body_of_coord: Vec<usize>,
    pub phys: PhysParams,
    /// Lengths consumed by the frame maps (world units).
    pub geom_constants: Vec<f64>,
    /// Identity actuation in generalized-force coordinates (fully actuated).
    pub actuation: Actuation,
    pub el_form: ElForm,
    /// World half-extent mapped onto the normalized image range [-1, 1].
    pub world_half_extent: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    #[default]
    Identity,
}

impl SystemSpec {
    /// Pendulum: m = 1, l = 1, g = 10.
    pub fn pendulum() -> SystemSpec {
        SystemSpec {
            name: SystemName::Pendulum,
            n_bodies: 1,
            holonomic_constraints: 2,
            coord_kinds: vec![CoordKind::Rotational],
            body_of_coord: vec![0],
            phys: PhysParams { masses: vec![1.0], lengths: vec![1.0], gravity: 10.0 },
            geom_constants: vec![],
            actuation: Actuation::Identity,
            el_form: ElForm::Full,
            world_half_extent: 1.1,
        }
    }

    /// Cart-pole: cart mass 1, pole point mass 0.1 at l = 0.5, g = 9.8.
    pub fn cartpole() -> SystemSpec {
        SystemSpec {
            name: SystemName::CartPole,
            n_bodies: 2,
            holonomic_constraints: 4,
            coord_kinds: vec![CoordKind::Translational, CoordKind::Rotational],
            body_of_coord: vec![0, 1],
            phys: PhysParams { masses: vec![1.0, 0.1], lengths: vec![0.4, 0.5], gravity: 9.8 },
            geom_constants: vec![],
            actuation: Actuation::Identity,
            el_form: ElForm::Full,
            world_half_extent: 1.5,
        }
    }

    /// Acrobot: two unit-mass unit-length links, g = 9.8, point masses at
    /// the link tips.
    pub fn acrobot() -> SystemSpec {
        SystemSpec {
            name: SystemName::Acrobot,
            n_bodies: 2,
            holonomic_constraints: 4,
            coord_kinds: vec![CoordKind::Rotational, CoordKind::Rotational],
            body_of_coord: vec![0, 1],
            phys: PhysParams { masses: vec![1.0, 1.0], lengths: vec![1.0, 1.0], gravity: 9.8 },
            geom_constants: vec![1.0],
            actuation: Actuation::Identity,
            el_form: ElForm::Full,
            world_half_extent: 2.2,
        }
    }

    pub fn by_name(name: SystemName) -> SystemSpec {
        match name {
            SystemName::Pendulum => SystemSpec::pendulum(),
            SystemName::CartPole => SystemSpec::cartpole(),
            SystemName::Acrobot => SystemSpec::acrobot(),
        }
    }

    pub fn dof(&self) -> usize {
        self.coord_kinds.len()
    }

    /// Control dimension (identity actuation: one input per DOF).
    pub fn u_dim(&self) -> usize {
        self.dof()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(&self.coord_kinds)
    }

    pub fn validate(&self) -> Result<()> {
        self.phys.validate()?;
        if self.dof() != 3 * self.n_bodies - self.holonomic_constraints {
            return Err(Error::Config(format!(
                "dof {} != 3*{} - {}",
                self.dof(),
                self.n_bodies,
                self.holonomic_constraints
            )));
        }
        if self.body_of_coord.len() != self.dof()
            || self.body_of_coord.iter().any(|&b| b >= self.n_bodies)
        {
            return Err(Error::Config("body_of_coord out of range".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<SystemSpec> {
        let spec: SystemSpec =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("system spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Generalized coordinates and velocities (rotational entries in radians,
/// unwrapped).
#[derive(Clone, Debug, PartialEq)]
pub struct GtState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl GtState {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>) -> Result<GtState> {
        if q.iter().chain(&qdot).all(|v| v.is_finite()) {
            Ok(GtState { q, qdot })
        } else {
            Err(Error::NonFinite { context: "GtState".into() })
        }
    }
}

/// Per-coordinate (cos, sin) pairs; translational entries hold (1, 0). All
/// trig quantities the dynamics need are polynomial in these pairs, so the
/// equations of motion can be evaluated directly on the raw (s2, s3) blocks
/// of an angle-aware state without extracting angles.
fn trig_from_q(spec: &SystemSpec, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![1.0; spec.dof()];
    let mut s = vec![0.0; spec.dof()];
    for (j, kind) in spec.coord_kinds.iter().enumerate() {
        if *kind == CoordKind::Rotational {
            c[j] = q[j].cos();
            s[j] = q[j].sin();
        }
    }
    (c, s)
}

fn trig_from_state(spec: &SystemSpec, st: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let layout = spec.layout();
    let mut c = vec![1.0; spec.dof()];
    let mut s = vec![0.0; spec.dof()];
    for (j, kind) in spec.coord_kinds.iter().enumerate() {
        if *kind == CoordKind::Rotational {
            let b = layout.block_index(j);
            c[j] = st[layout.s2_range()][b];
            s[j] = st[layout.s3_range()][b];
        }
    }
    (c, s)
}

fn mass_matrix_t(spec: &SystemSpec, c: &[f64]) -> Vec<f64> {
    let p = &spec.phys;
    match spec.name {
        SystemName::Pendulum => {
            let (m, l) = (p.masses[0], p.lengths[0]);
            vec![m * l * l]
        }
        SystemName::CartPole => {
            let (mc, mp, l) = (p.masses[0], p.masses[1], p.lengths[1]);
            vec![mc + mp, mp * l * c[1], mp * l * c[1], mp * l * l]
        }
        SystemName::Acrobot => {
            let (m1, m2) = (p.masses[0], p.masses[1]);
            let (l1, l2) = (p.lengths[0], p.lengths[1]);
            let m11 = m1 * l1 * l1 + m2 * (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * c[1]);
            let m12 = m2 * (l2 * l2 + l1 * l2 * c[1]);
            let m22 = m2 * l2 * l2;
            vec![m11, m12, m12, m22]
        }
    }
}

fn mass_matrix_grad_t(spec: &SystemSpec, s: &[f64]) -> Vec<Vec<f64>> {
    let p = &spec.phys;
    let m = spec.dof();
    let mut out = vec![vec![0.0; m * m]; m];
    match spec.name {
        SystemName::Pendulum => {}
        SystemName::CartPole => {
            let (mp, l) = (p.masses[1], p.lengths[1]);
            out[1] = vec![0.0, -mp * l * s[1], -mp * l * s[1], 0.0];
        }
        SystemName::Acrobot => {
            let (m2, l1, l2) = (p.masses[1], p.lengths[0], p.lengths[1]);
            out[1] = vec![-2.0 * m2 * l1 * l2 * s[1], -m2 * l1 * l2 * s[1], -m2 * l1 * l2 * s[1], 0.0];
        }
    }
    out
}

fn potential_t(spec: &SystemSpec, c: &[f64], s: &[f64]) -> f64 {
    let p = &spec.phys;
    match spec.name {
        SystemName::Pendulum => p.masses[0] * p.gravity * p.lengths[0] * c[0],
        SystemName::CartPole => p.masses[1] * p.gravity * p.lengths[1] * c[1],
        SystemName::Acrobot => {
            let (m1, m2) = (p.masses[0], p.masses[1]);
            let (l1, l2) = (p.lengths[0], p.lengths[1]);
            let c12 = c[0] * c[1] - s[0] * s[1];
            p.gravity * ((m1 + m2) * l1 * c[0] + m2 * l2 * c12)
        }
    }
}

fn potential_grad_t(spec: &SystemSpec, c: &[f64], s: &[f64]) -> Vec<f64> {
    let p = &spec.phys;
    match spec.name {
        SystemName::Pendulum => vec![-p.masses[0] * p.gravity * p.lengths[0] * s[0]],
        SystemName::CartPole => vec![0.0, -p.masses[1] * p.gravity * p.lengths[1] * s[1]],
        SystemName::Acrobot => {
            let (m1, m2) = (p.masses[0], p.masses[1]);
            let (l1, l2) = (p.lengths[0], p.lengths[1]);
            let s12 = s[0] * c[1] + c[0] * s[1];
            vec![
                -p.gravity * ((m1 + m2) * l1 * s[0] + m2 * l2 * s12),
                -p.gravity * m2 * l2 * s12,
            ]
        }
    }
}

/// Analytic mass matrix M(q), row-major (dof x dof), symmetric positive
/// definite on the whole configuration space.
pub fn mass_matrix_gt(spec: &SystemSpec, q: &[f64]) -> Vec<f64> {
    let (c, _) = trig_from_q(spec, q);
    mass_matrix_t(spec, &c)
}

/// Potential energy V(q); phi = 0 is upright, where V is maximal.
pub fn potential_gt(spec: &SystemSpec, q: &[f64]) -> f64 {
    let (c, s) = trig_from_q(spec, q);
    potential_t(spec, &c, &s)
}

/// Gradient of the potential energy w.r.t. q.
pub fn potential_grad_gt(spec: &SystemSpec, q: &[f64]) -> Vec<f64> {
    let (c, s) = trig_from_q(spec, q);
    potential_grad_t(spec, &c, &s)
}

/// Time derivative of the angle-aware state under control `u` (identity
/// actuation). `s` uses the layout of `spec.layout()`. Trig quantities come
/// straight from the raw (s2, s3) blocks; intermediate solver stages may sit
/// slightly off the unit circle and are evaluated as-is.
pub fn gt_rhs(spec: &SystemSpec, s: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "gt_rhs state".into() });
    }
    assert_eq!(u.len(), spec.u_dim(), "control dimension");
    let layout = spec.layout();
    let (_, qdot) = layout.unpack(s);
    let m = spec.dof();

    let (tc, ts) = trig_from_state(spec, s);
    let mm = mass_matrix_t(spec, &tc);
    let dm = mass_matrix_grad_t(spec, &ts);
    let dv = potential_grad_t(spec, &tc, &ts);

    // Mdot = sum_k dM/dq_k qdot_k.
    let mut mdot = vec![0.0; m * m];
    for k in 0..m {
        for (e, d) in mdot.iter_mut().zip(&dm[k]) {
            *e += d * qdot[k];
        }
    }
    let mdot_qd = linalg::matvec(&mdot, m, m, &qdot);

    let mut force = vec![0.0; m];
    match spec.el_form {
        ElForm::Full => {
            // -Mdot qd + 1/2 grad_q(qd' M qd) - grad V + u
            for k in 0..m {
                let dmq = linalg::matvec(&dm[k], m, m, &qdot);
                let quad: f64 = qdot.iter().zip(&dmq).map(|(a, b)| a * b).sum();
                force[k] = -mdot_qd[k] + 0.5 * quad - dv[k] + u[k];
            }
        }
        ElForm::Eq3 => {
            for k in 0..m {
                force[k] = -0.5 * mdot_qd[k] - dv[k] + u[k];
            }
        }
    }

    let qddot = linalg::solve_spd(&mm, m, &force).ok_or(Error::SingularMass { cond: f64::INFINITY })?;

    let mut ds = vec![0.0; layout.dim()];
    let s2: Vec<f64> = s[layout.s2_range()].to_vec();
    let s3: Vec<f64> = s[layout.s3_range()].to_vec();
    let s5: Vec<f64> = s[layout.s5_range()].to_vec();
    for (j, kind) in spec.coord_kinds.iter().enumerate() {
        let b = layout.block_index(j);
        match kind {
            CoordKind::Translational => {
                ds[layout.s1_range()][b] = qdot[j];
                ds[layout.s4_range()][b] = qddot[j];
            }
            CoordKind::Rotational => {
                ds[layout.s2_range()][b] = -s3[b] * s5[b];
                ds[layout.s3_range()][b] = s2[b] * s5[b];
                ds[layout.s5_range()][b] = qddot[j];
            }
        }
    }
    Ok(ds)
}

/// Total energy E = 1/2 qd' M qd + V at an angle-aware state, evaluated on
/// the raw (cos, sin) blocks.
pub fn total_energy_gt(spec: &SystemSpec, s: &[f64]) -> f64 {
    let (_, qdot) = spec.layout().unpack(s);
    let (tc, ts) = trig_from_state(spec, s);
    let mm = mass_matrix_t(spec, &tc);
    let mq = linalg::matvec(&mm, spec.dof(), spec.dof(), &qdot);
    0.5 * qdot.iter().zip(&mq).map(|(a, b)| a * b).sum::<f64>() + potential_t(spec, &tc, &ts)
}
