//! Planar rigid transformations, differentiable image sampling, and the
//! per-system encoder/decoder frame maps.
//!
//! All image-space quantities live in normalized coordinates: x in [-1, 1]
//! left to right, y in [-1, 1] bottom to top. A transform maps a point of
//! the default frame into the target frame; sampling an image under a
//! transform reads the source image at the mapped location with bilinear
//! interpolation and zero padding.

use crate::dynamics::{CoordKind, SystemName, SystemSpec};
use crate::error::{Error, Result};
use crate::tape::{warp_forward, Tape, Var};

/// A planar rigid transform: translation plus rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarTransform {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PlanarTransform {
    pub fn new(x: f64, y: f64, theta: f64) -> PlanarTransform {
        PlanarTransform { x, y, theta }
    }

    pub fn identity() -> PlanarTransform {
        PlanarTransform { x: 0.0, y: 0.0, theta: 0.0 }
    }
}

/// 3x3 row-major matrix [[cos t, sin t, x], [-sin t, cos t, y], [0, 0, 1]].
pub fn make_transform(x: f64, y: f64, theta: f64) -> [f64; 9] {
    let (s, c) = theta.sin_cos();
    [c, s, x, -s, c, y, 0.0, 0.0, 1.0]
}

/// Analytic inverse of [`make_transform`]: [R^T | -R^T t].
pub fn invert_transform(x: f64, y: f64, theta: f64) -> [f64; 9] {
    let (s, c) = theta.sin_cos();
    [c, -s, -(c * x - s * y), s, c, -(s * x + c * y), 0.0, 0.0, 1.0]
}

pub fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = (0..3).map(|k| a[3 * i + k] * b[3 * k + j]).sum();
        }
    }
    out
}

/// Grayscale image in [0, 1], row 0 at the top.
#[derive(Clone, Debug)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Image {
        Image { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Image { h, w, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Bilinear resampling of `img` under a planar transform: the output pixel at
/// normalized location p reads img at T(p), zero outside the grid.
pub fn sample_image(img: &Image, t: &PlanarTransform) -> Image {
    assert!(img.h >= 2 && img.w >= 2, "sample_image needs at least a 2x2 grid");
    let m = make_transform(t.x, t.y, t.theta);
    let a = [m[0], m[1], m[2], m[3], m[4], m[5]];
    Image { h: img.h, w: img.w, data: warp_forward(&img.data, img.h, img.w, &a) }
}

/// A frame parameterized by tape nodes; rotation carried as a
/// (cos, sin) pair so latent angle blocks feed it directly.
#[derive(Clone)]
pub struct VarFrame {
    pub x: Var,
    pub y: Var,
    pub c: Var,
    pub s: Var,
}

impl VarFrame {
    pub fn identity(tape: &Tape) -> VarFrame {
        VarFrame { x: tape.scalar(0.0), y: tape.scalar(0.0), c: tape.scalar(1.0), s: tape.scalar(0.0) }
    }

    /// Six scalar nodes of the forward 2x3 map [[c, s, x], [-s, c, y]].
    pub fn mat(&self) -> [Var; 6] {
        [self.c.clone(), self.s.clone(), self.x.clone(), self.s.neg(), self.c.clone(), self.y.clone()]
    }

    /// Six scalar nodes of the analytic inverse [R^T | -R^T t].
    pub fn inv_mat(&self) -> [Var; 6] {
        let tx = self.c.mul(&self.x).sub(&self.s.mul(&self.y)).neg();
        let ty = self.s.mul(&self.x).add(&self.c.mul(&self.y)).neg();
        [self.c.clone(), self.s.neg(), tx, self.s.clone(), self.c.clone(), ty]
    }
}

/// How a frame's translation is produced from coordinates and constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Translation {
    Origin,
    /// Horizontal slide by a translational coordinate: (q_j, 0).
    CoordX(usize),
    /// Joint position at the tip of a link: (c sin q_a, c cos q_a).
    Link { angle: usize, length: usize },
}

/// How a frame's rotation is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    None,
    Coord(usize),
    /// Composed absolute pose of a child body (ground-truth chart).
    SumCoords(usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct FrameRule {
    pub translation: Translation,
    pub rotation: Rotation,
}

impl FrameRule {
    /// Coordinates this rule reads.
    pub fn deps(&self) -> Vec<usize> {
        let mut d = Vec::new();
        match self.translation {
            Translation::Origin => {}
            Translation::CoordX(j) => d.push(j),
            Translation::Link { angle, .. } => d.push(angle),
        }
        match self.rotation {
            Rotation::None => {}
            Rotation::Coord(j) => d.push(j),
            Rotation::SumCoords(a, b) => {
                d.push(a);
                d.push(b);
            }
        }
        d
    }
}

/// Which coordinate chart the frame maps describe. The ground-truth chart of
/// the acrobot uses a relative second angle, so the absolute pose of link 2
/// composes both angles; the learned chart follows the per-coordinate window
/// geometry, where the second head can only observe (and therefore encodes)
/// the absolute link angle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chart {
    GroundTruth,
    Learned,
}

/// Declarative per-system frame maps: one encoder rule per coordinate, one
/// decoder (body placement) rule per body.
#[derive(Clone, Debug)]
pub struct FrameMap {
    pub enc: Vec<FrameRule>,
    pub dec: Vec<FrameRule>,
}

impl FrameMap {
    pub fn for_system(name: SystemName, chart: Chart) -> FrameMap {
        use Rotation as R;
        use Translation as T;
        let rule = |t, r| FrameRule { translation: t, rotation: r };
        match name {
            SystemName::Pendulum => FrameMap {
                enc: vec![rule(T::Origin, R::None)],
                dec: vec![rule(T::Origin, R::Coord(0))],
            },
            SystemName::CartPole => FrameMap {
                enc: vec![rule(T::Origin, R::None), rule(T::CoordX(0), R::None)],
                dec: vec![rule(T::CoordX(0), R::None), rule(T::CoordX(0), R::Coord(1))],
            },
            SystemName::Acrobot => {
                let second = match chart {
                    Chart::GroundTruth => R::SumCoords(0, 1),
                    Chart::Learned => R::Coord(1),
                };
                FrameMap {
                    enc: vec![
                        rule(T::Origin, R::None),
                        rule(T::Link { angle: 0, length: 0 }, R::None),
                    ],
                    dec: vec![rule(T::Origin, R::Coord(0)), rule(T::Link { angle: 0, length: 0 }, second)],
                }
            }
        }
    }

    /// Coordinate encoding order: a coordinate whose window depends on other
    /// coordinates is encoded after them. Errors if the dependencies cycle.
    pub fn encoding_order(&self) -> Result<Vec<usize>> {
        let n = self.enc.len();
        let mut order = Vec::with_capacity(n);
        let mut done = vec![false; n];
        while order.len() < n {
            let mut advanced = false;
            for j in 0..n {
                if done[j] {
                    continue;
                }
                if self.enc[j].deps().iter().all(|&d| done[d]) {
                    order.push(j);
                    done[j] = true;
                    advanced = true;
                }
            }
            if !advanced {
                return Err(Error::Config("encoder frame dependencies form a cycle".into()));
            }
        }
        Ok(order)
    }
}

/// Value of one generalized coordinate as seen by frame evaluation.
#[derive(Clone, Copy)]
pub enum CoordVal {
    Trans(f64),
    /// (cos, sin)
    Rot(f64, f64),
    Missing,
}

fn coord_rot(c: &CoordVal, j: usize, owner: usize) -> Result<(f64, f64)> {
    match c {
        CoordVal::Rot(cc, ss) => Ok((*cc, *ss)),
        CoordVal::Trans(_) => Err(Error::Config(format!("coordinate {j} is not rotational"))),
        CoordVal::Missing => Err(Error::OrderingViolation { coord: owner, missing: j }),
    }
}

/// Evaluate one rule on plain values. `owner` is the coordinate or body the
/// rule belongs to (for error reporting).
pub fn eval_rule(
    rule: &FrameRule,
    owner: usize,
    coords: &[CoordVal],
    consts: &[f64],
) -> Result<PlanarTransform> {
    let (x, y) = match rule.translation {
        Translation::Origin => (0.0, 0.0),
        Translation::CoordX(j) => match &coords[j] {
            CoordVal::Trans(v) => (*v, 0.0),
            CoordVal::Rot(..) => return Err(Error::Config(format!("coordinate {j} is not translational"))),
            CoordVal::Missing => return Err(Error::OrderingViolation { coord: owner, missing: j }),
        },
        Translation::Link { angle, length } => {
            let (c, s) = coord_rot(&coords[angle], angle, owner)?;
            (consts[length] * s, consts[length] * c)
        }
    };
    let theta = match rule.rotation {
        Rotation::None => 0.0,
        Rotation::Coord(j) => {
            let (c, s) = coord_rot(&coords[j], j, owner)?;
            s.atan2(c)
        }
        Rotation::SumCoords(a, b) => {
            let (ca, sa) = coord_rot(&coords[a], a, owner)?;
            let (cb, sb) = coord_rot(&coords[b], b, owner)?;
            (sa * cb + ca * sb).atan2(ca * cb - sa * sb)
        }
    };
    Ok(PlanarTransform::new(x, y, theta))
}

/// Tape-side coordinate values: rotational entries are (cos, sin) 2-vectors.
#[derive(Clone)]
pub enum CoordValVar {
    Trans(Var),
    Rot(Var),
    Missing,
}

/// Evaluate one rule on tape nodes; `consts` are (possibly learnable) scalar
/// nodes. Rotation stays in (cos, sin) form throughout.
pub fn eval_rule_var(
    rule: &FrameRule,
    owner: usize,
    tape: &Tape,
    coords: &[CoordValVar],
    consts: &[Var],
) -> Result<VarFrame> {
    let zero = tape.scalar(0.0);
    let rot_of = |j: usize| -> Result<(Var, Var)> {
        match &coords[j] {
            CoordValVar::Rot(v) => Ok((v.at(0), v.at(1))),
            CoordValVar::Trans(_) => Err(Error::Config(format!("coordinate {j} is not rotational"))),
            CoordValVar::Missing => Err(Error::OrderingViolation { coord: owner, missing: j }),
        }
    };
    let (x, y) = match rule.translation {
        Translation::Origin => (zero.clone(), zero.clone()),
        Translation::CoordX(j) => match &coords[j] {
            CoordValVar::Trans(v) => (v.clone(), zero.clone()),
            CoordValVar::Rot(_) => return Err(Error::Config(format!("coordinate {j} is not translational"))),
            CoordValVar::Missing => return Err(Error::OrderingViolation { coord: owner, missing: j }),
        },
        Translation::Link { angle, length } => {
            let (c, s) = rot_of(angle)?;
            (consts[length].mul(&s), consts[length].mul(&c))
        }
    };
    let (c, s) = match rule.rotation {
        Rotation::None => (tape.scalar(1.0), zero),
        Rotation::Coord(j) => rot_of(j)?,
        Rotation::SumCoords(a, b) => {
            let (ca, sa) = rot_of(a)?;
            let (cb, sb) = rot_of(b)?;
            (ca.mul(&cb).sub(&sa.mul(&sb)), sa.mul(&cb).add(&ca.mul(&sb)))
        }
    };
    Ok(VarFrame { x, y, c, s })
}

fn coords_from_q(spec: &SystemSpec, q: &[f64]) -> Vec<CoordVal> {
    spec.coord_kinds
        .iter()
        .zip(q)
        .map(|(k, &v)| match k {
            CoordKind::Translational => CoordVal::Trans(v),
            CoordKind::Rotational => CoordVal::Rot(v.cos(), v.sin()),
        })
        .collect()
}

/// Encoder attention-window frame of coordinate `j`, evaluated on whatever
/// subset of coordinates is available so far (dependency order enforced).
pub fn enc_frame(
    spec: &SystemSpec,
    j: usize,
    q_partial: &[CoordVal],
    consts: &[f64],
) -> Result<PlanarTransform> {
    let map = FrameMap::for_system(spec.name, Chart::GroundTruth);
    eval_rule(&map.enc[j], j, q_partial, consts)
}

/// Placement frame (absolute pose) of body `i` at ground-truth coordinates.
pub fn dec_frame(spec: &SystemSpec, i: usize, q: &[f64], consts: &[f64]) -> Result<PlanarTransform> {
    let map = FrameMap::for_system(spec.name, Chart::GroundTruth);
    eval_rule(&map.dec[i], i, &coords_from_q(spec, q), consts)
}
