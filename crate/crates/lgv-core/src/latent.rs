//! Learned Lagrangian latent dynamics: three networks for the mass matrix,
//! the potential energy and the input matrix over the configuration blocks
//! (s1, s2, s3), assembled into the angle-aware state-space RHS
//!
//!   s1dot = s4
//!   s2dot = -s3 o s5
//!   s3dot =  s2 o s5
//!   (s4dot, s5dot) = M^-1 ( -1/2 dM/dt (s4, s5)
//!                           + (-dV/ds1, (dV/ds2) o s3 - (dV/ds3) o s2)
//!                           + g u ),
//!
//! with dM/dt expanded by the chain rule through (s1dot, s2dot, s3dot).
//! The gradient of V and the tangent of M are built out of tape ops, so the
//! whole RHS remains differentiable w.r.t. the network parameters.
//!
//! An unstructured MLP over (s, u) provides the ablation dynamics.

use rand::Rng;

use crate::dynamics::StateLayout;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::MlpDef;
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};

/// Sizes and options of the dynamics networks.
#[derive(Clone, Debug)]
pub struct LatentConfig {
    pub layout: StateLayout,
    pub u_dim: usize,
    pub hidden: Vec<usize>,
    /// M = L L^T + eps I.
    pub mass_eps: f64,
    /// Learn g as a constant (state-independent) matrix.
    pub const_input: bool,
}

impl LatentConfig {
    pub fn new(layout: StateLayout, u_dim: usize) -> LatentConfig {
        LatentConfig { layout, u_dim, hidden: vec![64, 64, 64], mass_eps: 1e-4, const_input: false }
    }

    pub fn q_dim(&self) -> usize {
        self.layout.q_dim()
    }

    pub fn dof(&self) -> usize {
        self.layout.dof()
    }

    fn tri_len(&self) -> usize {
        let m = self.dof();
        m * (m + 1) / 2
    }
}

/// Definitions of the three dynamics networks (psi1, psi2, psi3).
pub struct DynamicsNets {
    pub cfg: LatentConfig,
    mass: MlpDef,
    potential: MlpDef,
    input: Option<MlpDef>,
}

impl DynamicsNets {
    pub fn new(prefix: &str, cfg: LatentConfig) -> DynamicsNets {
        let sizes = |out: usize| -> Vec<usize> {
            let mut v = vec![cfg.q_dim()];
            v.extend_from_slice(&cfg.hidden);
            v.push(out);
            v
        };
        let mass = MlpDef::new(&format!("{prefix}.mass"), &sizes(cfg.tri_len()));
        let potential = MlpDef::new(&format!("{prefix}.pot"), &sizes(1));
        let input = if cfg.const_input {
            None
        } else {
            Some(MlpDef::new(&format!("{prefix}.input"), &sizes(cfg.dof() * cfg.u_dim)))
        };
        DynamicsNets { cfg, mass, potential, input }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mass.init(store, rng);
        self.potential.init(store, rng);
        match &self.input {
            Some(def) => def.init(store, rng),
            None => {
                let m = self.cfg.dof();
                let u = self.cfg.u_dim;
                let lim = (6.0 / (m + u) as f64).sqrt();
                let w: Vec<f64> = (0..m * u).map(|_| rng.gen_range(-lim..lim)).collect();
                store.insert(&format!("{}.const", self.input_name()), crate::tape::Tensor::matrix(m, u, w));
            }
        }
    }

    fn input_name(&self) -> String {
        format!("{}.input", self.mass.name.trim_end_matches(".mass"))
    }

    pub fn bind(&self, store: &ParamStore, binder: &mut Binder) -> BoundDynamics<'_> {
        BoundDynamics {
            nets: self,
            mass: self.mass.bind(store, binder),
            potential: self.potential.bind(store, binder),
            input: self.input.as_ref().map(|d| d.bind(store, binder)),
            input_const: if self.input.is_none() {
                Some(binder.bind(store, &format!("{}.const", self.input_name())))
            } else {
                None
            },
        }
    }
}

/// The dynamics networks bound to one tape.
pub struct BoundDynamics<'a> {
    nets: &'a DynamicsNets,
    mass: crate::nn::BoundMlp,
    potential: crate::nn::BoundMlp,
    input: Option<crate::nn::BoundMlp>,
    input_const: Option<Var>,
}

/// Solve A x = b for an SPD matrix given as n*n scalar nodes, by a scalar
/// Cholesky factorization expressed in tape ops. Fails (typed) when a pivot
/// is non-positive or the condition estimate exceeds 1e12.
fn cholesky_solve_var(a: &[Var], n: usize, b: &[Var]) -> Result<Vec<Var>> {
    // Condition estimate from the forward values.
    let vals: Vec<f64> = a.iter().map(|v| v.item()).collect();
    let ev = linalg::sym_eigvals(&vals, n);
    if ev[0] <= 0.0 || ev[n - 1] / ev[0] > 1e12 {
        return Err(Error::SingularMass { cond: if ev[0] > 0.0 { ev[n - 1] / ev[0] } else { f64::INFINITY } });
    }
    let mut l: Vec<Option<Var>> = vec![None; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j].clone();
            for k in 0..j {
                s = s.sub(&l[i * n + k].as_ref().unwrap().mul(l[j * n + k].as_ref().unwrap()));
            }
            if i == j {
                if s.item() <= 0.0 {
                    return Err(Error::SingularMass { cond: f64::INFINITY });
                }
                l[i * n + i] = Some(s.sqrt());
            } else {
                l[i * n + j] = Some(s.div(l[j * n + j].as_ref().unwrap()));
            }
        }
    }
    let l: Vec<Var> = (0..n * n)
        .map(|k| l[k].clone().unwrap_or_else(|| a[0].tape().scalar(0.0)))
        .collect();
    let mut y: Vec<Var> = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] = y[i].sub(&l[i * n + k].mul(&y[k]));
        }
        y[i] = y[i].div(&l[i * n + i]);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] = y[i].sub(&l[k * n + i].mul(&y[k]));
        }
        y[i] = y[i].div(&l[i * n + i]);
    }
    Ok(y)
}

impl BoundDynamics<'_> {
    /// Lower-triangular entries -> full SPD matrix nodes M = L L^T + eps I.
    /// Returns n*n scalar nodes. The diagonal of L passes through softplus.
    fn mass_entries(&self, tri: &Var) -> Vec<Var> {
        let n = self.nets.cfg.dof();
        let eps = self.nets.cfg.mass_eps;
        let tape = tri.tape().clone();
        // Unpack row-major lower-triangular entries.
        let mut l: Vec<Var> = Vec::with_capacity(n * n);
        let mut idx = 0;
        for i in 0..n {
            for j in 0..n {
                if j <= i {
                    let raw = tri.at(idx);
                    idx += 1;
                    l.push(if i == j { raw.softplus() } else { raw });
                } else {
                    l.push(tape.scalar(0.0));
                }
            }
        }
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut s = tape.scalar(if i == j { eps } else { 0.0 });
                for k in 0..=i.min(j) {
                    s = s.add(&l[i * n + k].mul(&l[j * n + k]));
                }
                m.push(s);
            }
        }
        m
    }

    /// Tangent of the mass entries along dz (product rule through L).
    fn mass_entries_tangent(&self, tri: &Var, dtri: &Var) -> Vec<Var> {
        let n = self.nets.cfg.dof();
        let tape = tri.tape().clone();
        let mut l: Vec<Var> = Vec::with_capacity(n * n);
        let mut dl: Vec<Var> = Vec::with_capacity(n * n);
        let mut idx = 0;
        for i in 0..n {
            for j in 0..n {
                if j <= i {
                    let raw = tri.at(idx);
                    let draw = dtri.at(idx);
                    idx += 1;
                    if i == j {
                        l.push(raw.softplus());
                        dl.push(raw.sigmoid().mul(&draw));
                    } else {
                        l.push(raw);
                        dl.push(draw);
                    }
                } else {
                    l.push(tape.scalar(0.0));
                    dl.push(tape.scalar(0.0));
                }
            }
        }
        let mut dm = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut s = tape.scalar(0.0);
                for k in 0..=i.min(j) {
                    s = s.add(&dl[i * n + k].mul(&l[j * n + k]));
                    s = s.add(&l[i * n + k].mul(&dl[j * n + k]));
                }
                dm.push(s);
            }
        }
        dm
    }

    fn input_matrix(&self, z: &Var) -> Var {
        let (m, u) = (self.nets.cfg.dof(), self.nets.cfg.u_dim);
        match (&self.input, &self.input_const) {
            (Some(net), _) => net.forward(z).out.reshape(crate::tape::Shape::Matrix(m, u)),
            (None, Some(cm)) => cm.clone(),
            _ => unreachable!(),
        }
    }

    /// The angle-aware Lagrangian RHS. `s` is the full state node, `u` the
    /// control node.
    pub fn latent_rhs(&self, s: &Var, u: &Var) -> Result<Var> {
        let cfg = &self.nets.cfg;
        let lay = &cfg.layout;
        let (m_r, m_t) = (lay.m_r(), lay.m_t());
        let m = cfg.dof();

        let z = s.slice(0, lay.q_dim());
        let s2 = s.slice(lay.s2_range().start, m_t);
        let s3 = s.slice(lay.s3_range().start, m_t);
        let s4 = s.slice(lay.s4_range().start, m_r);
        let s5 = s.slice(lay.s5_range().start, m_t);

        let ds2 = s3.neg().mul(&s5);
        let ds3 = s2.mul(&s5);
        // dz = (s1dot, s2dot, s3dot)
        let dz = if m_r > 0 { Var::concat(&[&s4, &ds2, &ds3]) } else { Var::concat(&[&ds2, &ds3]) };

        // Mass matrix and its time derivative along dz.
        let mass_trace = self.mass.forward(&z);
        let m_entries = self.mass_entries(&mass_trace.out);
        let dtri = self.mass.jvp(&mass_trace, &dz);
        let dm_entries = self.mass_entries_tangent(&mass_trace.out, &dtri);

        // Potential gradient w.r.t. (s1, s2, s3).
        let pot_trace = self.potential.forward(&z);
        let gv = self.potential.input_grad_scalar(&z, &pot_trace);
        let gv1 = gv.slice(0, m_r);
        let gv2 = gv.slice(m_r, m_t);
        let gv3 = gv.slice(m_r + m_t, m_t);

        // Velocity vector v = (s4, s5) in block order.
        let v = if m_r > 0 { Var::concat(&[&s4, &s5]) } else { s5.clone() };

        // force = -1/2 dM/dt v + torque + g u
        let gu = self.input_matrix(&z).matvec(u);
        let torque_rot = gv2.mul(&s3).sub(&gv3.mul(&s2));
        let mut force: Vec<Var> = Vec::with_capacity(m);
        for i in 0..m {
            let mut dmv = dm_entries[i * m].mul(&v.at(0));
            for k in 1..m {
                dmv = dmv.add(&dm_entries[i * m + k].mul(&v.at(k)));
            }
            let torque = if i < m_r { gv1.at(i).neg() } else { torque_rot.at(i - m_r) };
            force.push(dmv.scale(-0.5).add(&torque).add(&gu.at(i)));
        }

        let acc = cholesky_solve_var(&m_entries, m, &force)?;
        let acc_all = if m > 1 {
            let refs: Vec<&Var> = acc.iter().collect();
            Var::concat(&refs)
        } else {
            acc[0].clone()
        };

        if m_r > 0 {
            Ok(Var::concat(&[&s4, &ds2, &ds3, &acc_all]))
        } else {
            Ok(Var::concat(&[&ds2, &ds3, &acc_all]))
        }
    }

    /// E = 1/2 v' M v + V on the tape.
    pub fn learned_energy(&self, s: &Var) -> Result<Var> {
        let cfg = &self.nets.cfg;
        let lay = &cfg.layout;
        let (m_r, m_t) = (lay.m_r(), lay.m_t());
        let m = cfg.dof();
        let z = s.slice(0, lay.q_dim());
        let s4 = s.slice(lay.s4_range().start, m_r);
        let s5 = s.slice(lay.s5_range().start, m_t);
        let v = if m_r > 0 { Var::concat(&[&s4, &s5]) } else { s5 };

        let mass_trace = self.mass.forward(&z);
        let m_entries = self.mass_entries(&mass_trace.out);
        let mut kin = z.tape().scalar(0.0);
        for i in 0..m {
            for j in 0..m {
                kin = kin.add(&m_entries[i * m + j].mul(&v.at(i)).mul(&v.at(j)));
            }
        }
        let pot = self.potential.forward(&z).out;
        Ok(kin.scale(0.5).add(&pot.at(0)))
    }
}

/// Plain-f64 evaluation of the latent RHS (builds a throwaway tape).
pub fn latent_rhs_f64(
    nets: &DynamicsNets,
    store: &ParamStore,
    s: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = nets.bind(store, &mut binder);
    let sv = tape.vector(s.to_vec());
    let uv = tape.vector(u.to_vec());
    Ok(bound.latent_rhs(&sv, &uv)?.value().data().to_vec())
}

/// Plain-f64 learned energy.
pub fn learned_energy_f64(nets: &DynamicsNets, store: &ParamStore, s: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = nets.bind(store, &mut binder);
    let sv = tape.vector(s.to_vec());
    Ok(bound.learned_energy(&sv)?.item())
}

/// Learned potential V(s1, s2, s3) and its gradient w.r.t. the blocks,
/// evaluated at a plain configuration (used by the controller).
pub fn learned_potential_and_grad(
    nets: &DynamicsNets,
    store: &ParamStore,
    z: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = nets.bind(store, &mut binder);
    let zv = tape.vector(z.to_vec());
    let trace = bound.potential.forward(&zv);
    let g = bound.potential.input_grad_scalar(&zv, &trace);
    Ok((trace.out.item(), g.value().data().to_vec()))
}

/// Learned input matrix g(s1, s2, s3) as a row-major (dof x u_dim) matrix.
pub fn learned_input_matrix(nets: &DynamicsNets, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = nets.bind(store, &mut binder);
    let zv = tape.vector(z.to_vec());
    Ok(bound.input_matrix(&zv).value().data().to_vec())
}

/// Plain-f64 evaluation of the MLP ablation dynamics.
pub fn mlp_rhs_f64(
    mlp: &MlpDynamics,
    store: &ParamStore,
    s: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = mlp.bind(store, &mut binder);
    let sv = tape.vector(s.to_vec());
    let uv = tape.vector(u.to_vec());
    Ok(bound.mlp_rhs(&sv, &uv)?.value().data().to_vec())
}

/// Unstructured MLP dynamics over (s, u): the "MLPdyn" ablation.
pub struct MlpDynamics {
    pub layout: StateLayout,
    pub u_dim: usize,
    def: MlpDef,
}

impl MlpDynamics {
    pub fn new(prefix: &str, layout: StateLayout, u_dim: usize, hidden: &[usize]) -> MlpDynamics {
        let mut sizes = vec![layout.dim() + u_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.dim());
        MlpDynamics { layout, u_dim, def: MlpDef::new(&format!("{prefix}.mlpdyn"), &sizes) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.def.init(store, rng);
    }

    pub fn bind(&self, store: &ParamStore, binder: &mut Binder) -> BoundMlpDynamics {
        BoundMlpDynamics { net: self.def.bind(store, binder) }
    }
}

pub struct BoundMlpDynamics {
    net: crate::nn::BoundMlp,
}

impl BoundMlpDynamics {
    pub fn mlp_rhs(&self, s: &Var, u: &Var) -> Result<Var> {
        Ok(self.net.forward(&Var::concat(&[s, u])).out)
    }
}
