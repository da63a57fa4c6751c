//! Multilayer perceptrons over the tape: forward traces plus the explicit
//! input-gradient and tangent (JVP) constructions used by the latent
//! dynamics. Both are built out of ordinary tape ops, so the whole
//! computation stays differentiable w.r.t. the network parameters.

use rand::Rng;

use crate::params::{Binder, ParamStore};
use crate::tape::{Tensor, Var};

/// Layer sizes of a tanh MLP with a linear output layer.
#[derive(Clone, Debug)]
pub struct MlpDef {
    pub name: String,
    pub sizes: Vec<usize>,
}

impl MlpDef {
    pub fn new(name: &str, sizes: &[usize]) -> MlpDef {
        assert!(sizes.len() >= 2);
        MlpDef { name: name.to_string(), sizes: sizes.to_vec() }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn w_name(&self, k: usize) -> String {
        format!("{}.w{}", self.name, k)
    }

    fn b_name(&self, k: usize) -> String {
        format!("{}.b{}", self.name, k)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for k in 0..self.sizes.len() - 1 {
            let (fi, fo) = (self.sizes[k], self.sizes[k + 1]);
            let limit = (6.0 / (fi + fo) as f64).sqrt();
            let w: Vec<f64> = (0..fi * fo).map(|_| rng.gen_range(-limit..limit)).collect();
            store.insert(&self.w_name(k), Tensor::matrix(fo, fi, w));
            store.insert(&self.b_name(k), Tensor::vector(vec![0.0; fo]));
        }
    }

    pub fn bind(&self, store: &ParamStore, binder: &mut Binder) -> BoundMlp {
        let n = self.sizes.len() - 1;
        let ws = (0..n).map(|k| binder.bind(store, &self.w_name(k))).collect();
        let bs = (0..n).map(|k| binder.bind(store, &self.b_name(k))).collect();
        BoundMlp { ws, bs }
    }
}

/// An MLP whose parameters are leaves on some tape.
pub struct BoundMlp {
    ws: Vec<Var>,
    bs: Vec<Var>,
}

/// Forward pass with saved hidden activations (needed for the gradient and
/// tangent constructions).
pub struct MlpTrace {
    pub hidden: Vec<Var>,
    pub out: Var,
}

impl BoundMlp {
    pub fn forward(&self, x: &Var) -> MlpTrace {
        let n = self.ws.len();
        let mut hidden = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for k in 0..n - 1 {
            h = self.ws[k].matvec(&h).add(&self.bs[k]).tanh();
            hidden.push(h.clone());
        }
        let out = self.ws[n - 1].matvec(&h).add(&self.bs[n - 1]);
        MlpTrace { hidden, out }
    }

    /// Gradient of a scalar-output MLP w.r.t. its input, expressed with tape
    /// ops (so it can itself be differentiated w.r.t. the parameters).
    pub fn input_grad_scalar(&self, x: &Var, trace: &MlpTrace) -> Var {
        assert_eq!(trace.out.len(), 1, "input_grad_scalar needs scalar output");
        let n = self.ws.len();
        let one = x.tape().scalar(1.0);
        // Row of the linear output layer as a vector.
        let mut g = self.ws[n - 1].matvec_t(&one);
        for k in (0..n - 1).rev() {
            let h = &trace.hidden[k];
            let d = h.square().neg().offset(1.0); // 1 - tanh^2
            g = self.ws[k].matvec_t(&g.mul(&d));
        }
        g
    }

    /// Tangent of the output along input direction `v` (forward-mode product
    /// built from tape ops).
    pub fn jvp(&self, trace: &MlpTrace, v: &Var) -> Var {
        let n = self.ws.len();
        let mut t = v.clone();
        for k in 0..n - 1 {
            let h = &trace.hidden[k];
            let d = h.square().neg().offset(1.0);
            t = self.ws[k].matvec(&t).mul(&d);
        }
        self.ws[n - 1].matvec(&t)
    }
}
