//! Eager reverse-mode automatic differentiation on small dense tensors.
//!
//! Every training window builds its own short-lived [`Tape`]; values are
//! computed at node-creation time and the backward pass replays the tape in
//! reverse. Tensors hold their payload behind an `Arc` so binding a parameter
//! tensor to a tape never copies the data.
//!
//! The op set is deliberately small: elementwise arithmetic (with
//! scalar broadcasting), matrix-vector products (plain and transposed),
//! a handful of nonlinearities, concat/slice/reshape plumbing, a bilinear
//! image warp, and an escape hatch for externally sampled values with a saved
//! Jacobian. That is all the model needs.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

/// Dense tensor shape. Scalars are vectors of length 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar() -> Shape {
        Shape::Vector(1)
    }
}

/// Immutable dense tensor; cheap to clone.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.len(), data.len(), "shape/data length mismatch");
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(Shape::scalar(), vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::Vector(data.len()), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor { shape, data: Arc::new(vec![0.0; shape.len()]) }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access via copy-on-write; in-place when the store holds the
    /// only reference (the optimizer update path).
    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    /// y = W x, W: (r,c), x: (c)
    MatVec(usize, usize),
    /// y = W^T x, W: (r,c), x: (r)
    MatVecT(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Reshape(usize),
    /// Bilinear warp of `img` under the 2x3 affine grid map given by six
    /// scalar nodes (row-major [a11 a12 a13; a21 a22 a23]).
    Warp { img: usize, mat: [usize; 6] },
    /// Externally computed value with saved Jacobian w.r.t. a single input:
    /// jac[i * in_len + k] = d out[i] / d in[k].
    Custom1 { input: usize, jac: Arc<Vec<f64>> },
}

struct TapeInner {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
}

/// A recording of an eager computation; shared by all its [`Var`]s.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(RefCell::new(TapeInner { ops: Vec::new(), vals: Vec::new() })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, val: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.ops.push(op);
        inner.vals.push(val);
        Var { tape: self.clone(), id: inner.ops.len() - 1 }
    }

    /// A leaf node; gradients accumulate here.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn vector(&self, v: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(v))
    }

    /// Externally sampled value with a saved Jacobian w.r.t. `input`.
    pub fn custom1(&self, input: &Var, value: Tensor, jac: Vec<f64>) -> Var {
        let in_len = input.len();
        assert_eq!(jac.len(), value.len() * in_len, "custom1 jacobian shape");
        self.push(Op::Custom1 { input: input.id, jac: Arc::new(jac) }, value)
    }

    /// Reverse sweep from a scalar root. Returns per-node adjoints.
    pub fn backward(&self, root: &Var) -> Grads {
        let inner = self.inner.borrow();
        let n = inner.ops.len();
        assert_eq!(inner.vals[root.id].len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        g[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let gout = match g[id].take() {
                Some(v) => v,
                None => continue,
            };
            backward_step(&inner, id, &gout, &mut g);
            // Leaves keep their adjoint for extraction.
            if matches!(inner.ops[id], Op::Leaf) {
                g[id] = Some(gout);
            }
        }
        Grads { g }
    }
}

/// Adjoints produced by [`Tape::backward`]. Only leaves retain gradients.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: &Var) -> Option<&[f64]> {
        self.g.get(v.id).and_then(|o| o.as_deref())
    }
}

fn backward_step(inner: &TapeInner, id: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
    let acc = |g: &mut [Option<Vec<f64>>], node: usize, upd: &dyn Fn(&mut [f64])| {
        let slot = g[node].get_or_insert_with(|| vec![0.0; inner.vals[node].len()]);
        upd(slot);
    };
    match &inner.ops[id] {
        Op::Leaf => {}
        Op::Add(a, b) => {
            bcast_acc(inner, g, *a, gout, |_va, _vb, go| go);
            bcast_acc(inner, g, *b, gout, |_va, _vb, go| go);
        }
        Op::Sub(a, b) => {
            bcast_acc(inner, g, *a, gout, |_va, _vb, go| go);
            bcast_acc(inner, g, *b, gout, |_va, _vb, go| -go);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (inner.vals[*a].data(), inner.vals[*b].data());
            bcast_acc2(inner, g, *a, *b, gout, va, vb, |_x, y, go| go * y, |x, _y, go| go * x);
        }
        Op::Div(a, b) => {
            let (va, vb) = (inner.vals[*a].data(), inner.vals[*b].data());
            bcast_acc2(
                inner,
                g,
                *a,
                *b,
                gout,
                va,
                vb,
                |_x, y, go| go / y,
                |x, y, go| -go * x / (y * y),
            );
        }
        Op::Neg(a) => acc(g, *a, &|slot| {
            for (s, go) in slot.iter_mut().zip(gout) {
                *s -= go;
            }
        }),
        Op::Scale(a, c) => acc(g, *a, &|slot| {
            for (s, go) in slot.iter_mut().zip(gout) {
                *s += c * go;
            }
        }),
        Op::Offset(a, _) => acc(g, *a, &|slot| {
            for (s, go) in slot.iter_mut().zip(gout) {
                *s += go;
            }
        }),
        Op::MatVec(w, x) => {
            let (r, c) = match inner.vals[*w].shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let wv = inner.vals[*w].data().to_vec();
            let xv = inner.vals[*x].data().to_vec();
            acc(g, *w, &|slot| {
                for i in 0..r {
                    let gi = gout[i];
                    let row = &mut slot[i * c..(i + 1) * c];
                    for j in 0..c {
                        row[j] += gi * xv[j];
                    }
                }
            });
            acc(g, *x, &|slot| {
                for i in 0..r {
                    let gi = gout[i];
                    let row = &wv[i * c..(i + 1) * c];
                    for j in 0..c {
                        slot[j] += gi * row[j];
                    }
                }
            });
        }
        Op::MatVecT(w, x) => {
            let (r, c) = match inner.vals[*w].shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let wv = inner.vals[*w].data().to_vec();
            let xv = inner.vals[*x].data().to_vec();
            acc(g, *w, &|slot| {
                for i in 0..r {
                    let xi = xv[i];
                    let row = &mut slot[i * c..(i + 1) * c];
                    for j in 0..c {
                        row[j] += xi * gout[j];
                    }
                }
            });
            acc(g, *x, &|slot| {
                for i in 0..r {
                    let row = &wv[i * c..(i + 1) * c];
                    let mut s = 0.0;
                    for j in 0..c {
                        s += row[j] * gout[j];
                    }
                    slot[i] += s;
                }
            });
        }
        Op::Tanh(a) => {
            let y = inner.vals[id].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), yi) in slot.iter_mut().zip(gout).zip(&y) {
                    *s += go * (1.0 - yi * yi);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = inner.vals[id].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), yi) in slot.iter_mut().zip(gout).zip(&y) {
                    *s += go * yi * (1.0 - yi);
                }
            });
        }
        Op::Softplus(a) => {
            let x = inner.vals[*a].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), xi) in slot.iter_mut().zip(gout).zip(&x) {
                    *s += go * sigmoid(*xi);
                }
            });
        }
        Op::Exp(a) => {
            let y = inner.vals[id].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), yi) in slot.iter_mut().zip(gout).zip(&y) {
                    *s += go * yi;
                }
            });
        }
        Op::Ln(a) => {
            let x = inner.vals[*a].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), xi) in slot.iter_mut().zip(gout).zip(&x) {
                    *s += go / xi;
                }
            });
        }
        Op::Sqrt(a) => {
            let y = inner.vals[id].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), yi) in slot.iter_mut().zip(gout).zip(&y) {
                    *s += go * 0.5 / yi;
                }
            });
        }
        Op::Sin(a) => {
            let x = inner.vals[*a].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), xi) in slot.iter_mut().zip(gout).zip(&x) {
                    *s += go * xi.cos();
                }
            });
        }
        Op::Cos(a) => {
            let x = inner.vals[*a].data().to_vec();
            acc(g, *a, &|slot| {
                for ((s, go), xi) in slot.iter_mut().zip(gout).zip(&x) {
                    *s -= go * xi.sin();
                }
            });
        }
        Op::Sum(a) => {
            let go = gout[0];
            acc(g, *a, &|slot| {
                for s in slot.iter_mut() {
                    *s += go;
                }
            });
        }
        Op::Dot(a, b) => {
            let go = gout[0];
            let (va, vb) = (inner.vals[*a].data().to_vec(), inner.vals[*b].data().to_vec());
            acc(g, *a, &|slot| {
                for (s, y) in slot.iter_mut().zip(&vb) {
                    *s += go * y;
                }
            });
            acc(g, *b, &|slot| {
                for (s, x) in slot.iter_mut().zip(&va) {
                    *s += go * x;
                }
            });
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let n = inner.vals[*p].len();
                let seg = gout[off..off + n].to_vec();
                acc(g, *p, &|slot| {
                    for (s, go) in slot.iter_mut().zip(&seg) {
                        *s += go;
                    }
                });
                off += n;
            }
        }
        Op::Slice(a, start) => {
            let start = *start;
            acc(g, *a, &|slot| {
                for (k, go) in gout.iter().enumerate() {
                    slot[start + k] += go;
                }
            });
        }
        Op::Reshape(a) => acc(g, *a, &|slot| {
            for (s, go) in slot.iter_mut().zip(gout) {
                *s += go;
            }
        }),
        Op::Warp { img, mat } => {
            let (h, w) = match inner.vals[*img].shape() {
                Shape::Matrix(h, w) => (h, w),
                _ => unreachable!(),
            };
            let a: Vec<f64> = mat.iter().map(|&m| inner.vals[m].item()).collect();
            let imgv = inner.vals[*img].data().to_vec();
            let (gimg, gmat) = warp_backward(&imgv, h, w, &a, gout);
            acc(g, *img, &|slot| {
                for (s, go) in slot.iter_mut().zip(&gimg) {
                    *s += go;
                }
            });
            for (k, m) in mat.iter().enumerate() {
                let gk = gmat[k];
                acc(g, *m, &|slot| slot[0] += gk);
            }
        }
        Op::Custom1 { input, jac } => {
            let in_len = inner.vals[*input].len();
            let jac = jac.clone();
            acc(g, *input, &|slot| {
                for (i, go) in gout.iter().enumerate() {
                    let row = &jac[i * in_len..(i + 1) * in_len];
                    for k in 0..in_len {
                        slot[k] += go * row[k];
                    }
                }
            });
        }
    }
}

/// Accumulate a unary-style contribution into node `a`, handling the case
/// where `a` is a broadcast scalar feeding an elementwise op.
fn bcast_acc(
    inner: &TapeInner,
    g: &mut [Option<Vec<f64>>],
    a: usize,
    gout: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
) {
    let na = inner.vals[a].len();
    let slot = g[a].get_or_insert_with(|| vec![0.0; na]);
    if na == gout.len() {
        for (s, go) in slot.iter_mut().zip(gout) {
            *s += f(0.0, 0.0, *go);
        }
    } else {
        debug_assert_eq!(na, 1);
        let mut acc = 0.0;
        for go in gout {
            acc += f(0.0, 0.0, *go);
        }
        slot[0] += acc;
    }
}

/// Accumulate both operands of a binary elementwise op with scalar broadcast.
#[allow(clippy::too_many_arguments)]
fn bcast_acc2(
    inner: &TapeInner,
    g: &mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
    gout: &[f64],
    va: &[f64],
    vb: &[f64],
    fa: impl Fn(f64, f64, f64) -> f64,
    fb: impl Fn(f64, f64, f64) -> f64,
) {
    let n = gout.len();
    let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    {
        let na = inner.vals[a].len();
        let va_ = va.to_vec();
        let vb_ = vb.to_vec();
        let slot = g[a].get_or_insert_with(|| vec![0.0; na]);
        if na == n {
            for i in 0..n {
                slot[i] += fa(pick(&va_, i), pick(&vb_, i), gout[i]);
            }
        } else {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fa(pick(&va_, i), pick(&vb_, i), gout[i]);
            }
            slot[0] += acc;
        }
    }
    {
        let nb = inner.vals[b].len();
        let va_ = va.to_vec();
        let vb_ = vb.to_vec();
        let slot = g[b].get_or_insert_with(|| vec![0.0; nb]);
        if nb == n {
            for i in 0..n {
                slot[i] += fb(pick(&va_, i), pick(&vb_, i), gout[i]);
            }
        } else {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fb(pick(&va_, i), pick(&vb_, i), gout[i]);
            }
            slot[0] += acc;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().vals[self.id].clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.inner.borrow().vals[self.id].shape()
    }

    pub fn len(&self) -> usize {
        self.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn same_tape(&self, other: &Var) {
        debug_assert!(Rc::ptr_eq(&self.tape.inner, &other.tape.inner), "vars from different tapes");
    }

    fn binary(
        &self,
        other: &Var,
        op: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var {
        self.same_tape(other);
        let (va, vb) = (self.value(), other.value());
        let (na, nb) = (va.len(), vb.len());
        assert!(na == nb || na == 1 || nb == 1, "elementwise shape mismatch: {na} vs {nb}");
        let n = na.max(nb);
        let shape = if na >= nb { va.shape() } else { vb.shape() };
        let pick = |v: &Tensor, i: usize| if v.len() == 1 { v.data()[0] } else { v.data()[i] };
        let data: Vec<f64> = (0..n).map(|i| f(pick(&va, i), pick(&vb, i))).collect();
        self.tape.push(op(self.id, other.id), Tensor::new(shape, data))
    }

    fn unary(&self, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value();
        let data: Vec<f64> = v.data().iter().map(|x| f(*x)).collect();
        self.tape.push(op(self.id), Tensor::new(v.shape(), data))
    }

    pub fn add(&self, o: &Var) -> Var {
        self.binary(o, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, o: &Var) -> Var {
        self.binary(o, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, o: &Var) -> Var {
        self.binary(o, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, o: &Var) -> Var {
        self.binary(o, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(|a| Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary(|a| Op::Offset(a, c), |x| x + c)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus, softplus)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn sin(&self) -> Var {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Var {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sum(&self) -> Var {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn dot(&self, o: &Var) -> Var {
        self.same_tape(o);
        assert_eq!(self.len(), o.len(), "dot length mismatch");
        let s: f64 =
            self.value().data().iter().zip(o.value().data()).map(|(a, b)| a * b).sum();
        self.tape.push(Op::Dot(self.id, o.id), Tensor::scalar(s))
    }

    /// y = W x with self as the (r,c) matrix.
    pub fn matvec(&self, x: &Var) -> Var {
        self.same_tape(x);
        let w = self.value();
        let xv = x.value();
        let (r, c) = match w.shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("matvec on non-matrix"),
        };
        assert_eq!(c, xv.len(), "matvec dim mismatch");
        let wd = w.data();
        let xd = xv.data();
        let mut y = vec![0.0; r];
        for i in 0..r {
            let row = &wd[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                s += row[j] * xd[j];
            }
            y[i] = s;
        }
        self.tape.push(Op::MatVec(self.id, x.id), Tensor::vector(y))
    }

    /// y = W^T x with self as the (r,c) matrix and x of length r.
    pub fn matvec_t(&self, x: &Var) -> Var {
        self.same_tape(x);
        let w = self.value();
        let xv = x.value();
        let (r, c) = match w.shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("matvec_t on non-matrix"),
        };
        assert_eq!(r, xv.len(), "matvec_t dim mismatch");
        let wd = w.data();
        let xd = xv.data();
        let mut y = vec![0.0; c];
        for i in 0..r {
            let xi = xd[i];
            let row = &wd[i * c..(i + 1) * c];
            for j in 0..c {
                y[j] += xi * row[j];
            }
        }
        self.tape.push(Op::MatVecT(self.id, x.id), Tensor::vector(y))
    }

    pub fn concat(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            parts[0].same_tape(p);
            data.extend_from_slice(p.value().data());
            ids.push(p.id);
        }
        tape.push(Op::Concat(ids), Tensor::vector(data))
    }

    pub fn slice(&self, start: usize, len: usize) -> Var {
        let v = self.value();
        assert!(start + len <= v.len(), "slice out of range");
        let data = v.data()[start..start + len].to_vec();
        self.tape.push(Op::Slice(self.id, start), Tensor::vector(data))
    }

    pub fn at(&self, i: usize) -> Var {
        self.slice(i, 1)
    }

    pub fn reshape(&self, shape: Shape) -> Var {
        let v = self.value();
        assert_eq!(shape.len(), v.len(), "reshape length mismatch");
        self.tape.push(Op::Reshape(self.id), Tensor::new(shape, v.data().to_vec()))
    }

    /// Bilinear warp: out(p) = img(A·p) on the normalized [-1,1]^2 grid with
    /// zero padding outside; `mat` holds six scalar vars (2x3 row-major).
    pub fn warp(&self, mat: &[Var; 6]) -> Var {
        let img = self.value();
        let (h, w) = match img.shape() {
            Shape::Matrix(h, w) => (h, w),
            _ => panic!("warp on non-matrix image"),
        };
        let a: Vec<f64> = mat.iter().map(|m| {
            self.same_tape(m);
            m.item()
        }).collect();
        let out = warp_forward(img.data(), h, w, &a);
        let ids = [mat[0].id, mat[1].id, mat[2].id, mat[3].id, mat[4].id, mat[5].id];
        self.tape.push(Op::Warp { img: self.id, mat: ids }, Tensor::matrix(h, w, out))
    }
}

/// Normalized coordinates of pixel (row i, col j): x in [-1,1] left to right,
/// y in [-1,1] bottom to top, corners aligned to the outermost pixel centers.
pub fn pixel_to_norm(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    let x = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
    let y = 1.0 - 2.0 * i as f64 / (h - 1) as f64;
    (x, y)
}

/// Forward bilinear warp used by the `Warp` op and by the plain-`f64` image
/// sampling API. `a` is the 2x3 source map in normalized coordinates.
pub fn warp_forward(img: &[f64], h: usize, w: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (xd, yd) = pixel_to_norm(i, j, h, w);
            let xs = a[0] * xd + a[1] * yd + a[2];
            let ys = a[3] * xd + a[4] * yd + a[5];
            out[i * w + j] = bilinear(img, h, w, xs, ys).0;
        }
    }
    out
}

fn warp_backward(
    img: &[f64],
    h: usize,
    w: usize,
    a: &[f64],
    gout: &[f64],
) -> (Vec<f64>, [f64; 6]) {
    let mut gimg = vec![0.0; h * w];
    let mut gmat = [0.0; 6];
    for i in 0..h {
        for j in 0..w {
            let go = gout[i * w + j];
            if go == 0.0 {
                continue;
            }
            let (xd, yd) = pixel_to_norm(i, j, h, w);
            let xs = a[0] * xd + a[1] * yd + a[2];
            let ys = a[3] * xd + a[4] * yd + a[5];
            let (_, dxs, dys) = bilinear_with_scatter(img, h, w, xs, ys, go, &mut gimg);
            gmat[0] += go * dxs * xd;
            gmat[1] += go * dxs * yd;
            gmat[2] += go * dxs;
            gmat[3] += go * dys * xd;
            gmat[4] += go * dys * yd;
            gmat[5] += go * dys;
        }
    }
    (gimg, gmat)
}

/// Bilinear lookup at normalized source coordinates with zero padding.
/// Returns (value, d/dxs, d/dys).
fn bilinear(img: &[f64], h: usize, w: usize, xs: f64, ys: f64) -> (f64, f64, f64) {
    // Pixel-space (column, row) coordinates.
    let cf = (xs + 1.0) * 0.5 * (w - 1) as f64;
    let rf = (1.0 - ys) * 0.5 * (h - 1) as f64;
    let c0 = cf.floor();
    let r0 = rf.floor();
    let tx = cf - c0;
    let ty = rf - r0;
    let fetch = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    let v00 = fetch(r0, c0);
    let v01 = fetch(r0, c0 + 1.0);
    let v10 = fetch(r0 + 1.0, c0);
    let v11 = fetch(r0 + 1.0, c0 + 1.0);
    let top = v00 * (1.0 - tx) + v01 * tx;
    let bot = v10 * (1.0 - tx) + v11 * tx;
    let val = top * (1.0 - ty) + bot * ty;
    let dv_dc = (v01 - v00) * (1.0 - ty) + (v11 - v10) * ty;
    let dv_dr = bot - top;
    // Chain through the normalized->pixel map.
    let dxs = dv_dc * 0.5 * (w - 1) as f64;
    let dys = -dv_dr * 0.5 * (h - 1) as f64;
    (val, dxs, dys)
}

/// As [`bilinear`] but also scatters `go` into the image gradient.
fn bilinear_with_scatter(
    img: &[f64],
    h: usize,
    w: usize,
    xs: f64,
    ys: f64,
    go: f64,
    gimg: &mut [f64],
) -> (f64, f64, f64) {
    let cf = (xs + 1.0) * 0.5 * (w - 1) as f64;
    let rf = (1.0 - ys) * 0.5 * (h - 1) as f64;
    let c0 = cf.floor();
    let r0 = rf.floor();
    let tx = cf - c0;
    let ty = rf - r0;
    let mut scatter = |r: f64, c: f64, wgt: f64| {
        if !(r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64) {
            gimg[r as usize * w + c as usize] += go * wgt;
        }
    };
    scatter(r0, c0, (1.0 - tx) * (1.0 - ty));
    scatter(r0, c0 + 1.0, tx * (1.0 - ty));
    scatter(r0 + 1.0, c0, (1.0 - tx) * ty);
    scatter(r0 + 1.0, c0 + 1.0, tx * ty);
    bilinear(img, h, w, xs, ys)
}
