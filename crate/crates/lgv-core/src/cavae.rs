//! Coordinate-aware variational autoencoder: per-coordinate encoder heads
//! reading STN attention windows, a decoder that paints canonical body
//! canvases and places them by the inverse frame transform, and the
//! finite-difference velocity estimator. A traditional (black-box MLP)
//! encoder/decoder pair is available as an ablation behind the same
//! interface.

use rand::Rng;

use crate::distributions::{
    gauss_sample_var, normalize_direction, vm_sample_var, GaussianParam, VonMisesParam,
};
use crate::dynamics::{CoordKind, StateLayout, SystemSpec};
use crate::error::{Error, Result};
use crate::geometry::{eval_rule, eval_rule_var, Chart, CoordVal, CoordValVar, FrameMap, Image};
use crate::nn::MlpDef;
use crate::params::{Binder, ParamStore};
use crate::tape::{Shape, Tape, Tensor, Var};

/// Which encoder/decoder pair the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaeVariant {
    CoordinateAware,
    Traditional,
}

/// Architecture knobs of the VAE.
#[derive(Clone, Debug)]
pub struct CavaeConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub head_hidden: Vec<usize>,
    pub canvas_hidden: Vec<usize>,
    pub variant: VaeVariant,
}

impl CavaeConfig {
    pub fn new(image_size: usize, variant: VaeVariant) -> CavaeConfig {
        CavaeConfig {
            image_h: image_size,
            image_w: image_size,
            head_hidden: vec![256, 256],
            canvas_hidden: vec![256],
            variant,
        }
    }
}

/// Per-coordinate variational posterior (plain values).
#[derive(Clone, Debug)]
pub enum CoordPosterior {
    Gaussian(GaussianParam),
    VonMises {
        p: VonMisesParam,
        /// Pre-normalization norm of (alpha, beta), the regularized quantity.
        norm: f64,
    },
}

/// Per-coordinate posterior as tape nodes.
#[derive(Clone)]
pub enum PosteriorVar {
    Gauss {
        mean: Var,
        log_var: Var,
    },
    VonMises {
        /// Unit mean direction (2-vector node).
        mu: Var,
        kappa: Var,
        norm: Var,
    },
}

impl PosteriorVar {
    /// Posterior mean in frame-map form (used for window placement and the
    /// velocity estimator).
    pub fn mean_coord(&self) -> CoordValVar {
        match self {
            PosteriorVar::Gauss { mean, .. } => CoordValVar::Trans(mean.clone()),
            PosteriorVar::VonMises { mu, .. } => CoordValVar::Rot(mu.clone()),
        }
    }

    pub fn to_plain(&self) -> Result<CoordPosterior> {
        Ok(match self {
            PosteriorVar::Gauss { mean, log_var } => CoordPosterior::Gaussian(GaussianParam {
                mean: mean.item(),
                log_var: log_var.item(),
            }),
            PosteriorVar::VonMises { mu, kappa, norm } => {
                let m = mu.value();
                CoordPosterior::VonMises {
                    p: VonMisesParam::new((m.data()[0], m.data()[1]), kappa.item())?,
                    norm: norm.item(),
                }
            }
        })
    }
}

/// The VAE definition: network shapes plus the frame maps of the system's
/// learned chart.
pub struct CavaeModel {
    pub cfg: CavaeConfig,
    pub layout: StateLayout,
    pub n_bodies: usize,
    pub body_of_coord: Vec<usize>,
    frame_map: FrameMap,
    enc_order: Vec<usize>,
    n_lengths: usize,
    heads: Vec<MlpDef>,
    canvases: Vec<MlpDef>,
    enc_bb: Option<MlpDef>,
    dec_bb: Option<MlpDef>,
}

fn head_out_dim(kind: CoordKind) -> usize {
    match kind {
        CoordKind::Translational => 2, // mean, log var
        CoordKind::Rotational => 3,    // alpha, beta, log kappa
    }
}

impl CavaeModel {
    pub fn new(spec: &SystemSpec, cfg: CavaeConfig) -> Result<CavaeModel> {
        let layout = spec.layout();
        let frame_map = FrameMap::for_system(spec.name, Chart::Learned);
        let enc_order = frame_map.encoding_order()?;
        let n_lengths = frame_map
            .enc
            .iter()
            .chain(&frame_map.dec)
            .filter_map(|r| match r.translation {
                crate::geometry::Translation::Link { length, .. } => Some(length + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let px = cfg.image_h * cfg.image_w;
        let mut heads = Vec::new();
        let mut canvases = Vec::new();
        let (mut enc_bb, mut dec_bb) = (None, None);
        match cfg.variant {
            VaeVariant::CoordinateAware => {
                for (j, kind) in layout.kinds().iter().enumerate() {
                    let mut sizes = vec![px];
                    sizes.extend_from_slice(&cfg.head_hidden);
                    sizes.push(head_out_dim(*kind));
                    heads.push(MlpDef::new(&format!("vae.head{j}"), &sizes));
                }
                for i in 0..spec.n_bodies {
                    let mut sizes = vec![1];
                    sizes.extend_from_slice(&cfg.canvas_hidden);
                    sizes.push(px);
                    canvases.push(MlpDef::new(&format!("vae.canvas{i}"), &sizes));
                }
            }
            VaeVariant::Traditional => {
                let out: usize = layout.kinds().iter().map(|k| head_out_dim(*k)).sum();
                let mut sizes = vec![spec.n_bodies * px];
                sizes.extend_from_slice(&cfg.head_hidden);
                sizes.push(out);
                enc_bb = Some(MlpDef::new("vae.enc", &sizes));
                let mut sizes = vec![layout.q_dim()];
                sizes.extend_from_slice(&cfg.head_hidden);
                sizes.push(spec.n_bodies * px);
                dec_bb = Some(MlpDef::new("vae.dec", &sizes));
            }
        }
        Ok(CavaeModel {
            cfg,
            layout,
            n_bodies: spec.n_bodies,
            body_of_coord: spec.body_of_coord.clone(),
            frame_map,
            enc_order,
            n_lengths,
            heads,
            canvases,
            enc_bb,
            dec_bb,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for h in &self.heads {
            h.init(store, rng);
        }
        for c in &self.canvases {
            c.init(store, rng);
        }
        if let Some(e) = &self.enc_bb {
            e.init(store, rng);
        }
        if let Some(d) = &self.dec_bb {
            d.init(store, rng);
        }
        if self.n_lengths > 0 {
            // Learnable frame lengths, initialized to half the image half-width.
            store.insert("vae.lengths", Tensor::vector(vec![0.5; self.n_lengths]));
        }
    }

    pub fn bind<'m>(&'m self, store: &ParamStore, binder: &mut Binder) -> BoundCavae<'m> {
        BoundCavae {
            model: self,
            heads: self.heads.iter().map(|h| h.bind(store, binder)).collect(),
            canvases: self.canvases.iter().map(|c| c.bind(store, binder)).collect(),
            enc_bb: self.enc_bb.as_ref().map(|e| e.bind(store, binder)),
            dec_bb: self.dec_bb.as_ref().map(|d| d.bind(store, binder)),
            lengths: if self.n_lengths > 0 { Some(binder.bind(store, "vae.lengths")) } else { None },
        }
    }
}

/// The VAE bound to one tape.
pub struct BoundCavae<'m> {
    model: &'m CavaeModel,
    heads: Vec<crate::nn::BoundMlp>,
    canvases: Vec<crate::nn::BoundMlp>,
    enc_bb: Option<crate::nn::BoundMlp>,
    dec_bb: Option<crate::nn::BoundMlp>,
    lengths: Option<Var>,
}

impl BoundCavae<'_> {
    fn tape(&self, x: &Var) -> Tape {
        x.tape().clone()
    }

    fn length_consts(&self) -> Vec<Var> {
        match &self.lengths {
            Some(l) => (0..l.len()).map(|k| l.at(k)).collect(),
            None => Vec::new(),
        }
    }

    /// Head outputs -> posterior node bundle.
    fn posterior_from_head(&self, kind: CoordKind, out: &Var) -> Result<PosteriorVar> {
        match kind {
            CoordKind::Translational => Ok(PosteriorVar::Gauss {
                mean: out.at(0),
                log_var: out.at(1),
            }),
            CoordKind::Rotational => {
                let ab = out.slice(0, 2);
                let v = ab.value();
                // Degenerate direction is a hard error (cannot normalize).
                normalize_direction(v.data()[0], v.data()[1])?;
                let norm = ab.dot(&ab).sqrt();
                let mu = ab.div(&norm);
                let kappa = out.at(2).exp();
                Ok(PosteriorVar::VonMises { mu, kappa, norm })
            }
        }
    }

    /// Coordinate-aware (or traditional) encoding of one frame: a posterior
    /// per generalized coordinate, encoded in dependency order with window
    /// frames evaluated at the means of already-encoded coordinates.
    pub fn encode(&self, x: &[Var]) -> Result<Vec<PosteriorVar>> {
        assert_eq!(x.len(), self.model.n_bodies, "one channel per body");
        let tape = self.tape(&x[0]);
        let kinds = self.model.layout.kinds().to_vec();
        if let Some(enc) = &self.enc_bb {
            let px = self.model.cfg.image_h * self.model.cfg.image_w;
            let flat: Vec<Var> =
                x.iter().map(|im| im.reshape(Shape::Vector(px))).collect();
            let refs: Vec<&Var> = flat.iter().collect();
            let out = enc.forward(&Var::concat(&refs)).out;
            let mut posts = Vec::with_capacity(kinds.len());
            let mut off = 0;
            for kind in &kinds {
                let n = head_out_dim(*kind);
                posts.push(self.posterior_from_head(*kind, &out.slice(off, n))?);
                off += n;
            }
            if posts.iter().any(|p| !posterior_is_finite(p)) {
                return Err(Error::NonFinite { context: "encoder head output".into() });
            }
            return Ok(posts);
        }

        let consts = self.length_consts();
        let mut posts: Vec<Option<PosteriorVar>> = vec![None; kinds.len()];
        let mut means: Vec<CoordValVar> = vec![CoordValVar::Missing; kinds.len()];
        for &j in &self.model.enc_order {
            let frame = eval_rule_var(&self.model.frame_map.enc[j], j, &tape, &means, &consts)?;
            let window = x[self.model.body_of_coord[j]].warp(&frame.mat());
            let px = self.model.cfg.image_h * self.model.cfg.image_w;
            let flat = window.reshape(Shape::Vector(px));
            let out = self.heads[j].forward(&flat).out;
            let post = self.posterior_from_head(kinds[j], &out)?;
            if !posterior_is_finite(&post) {
                return Err(Error::NonFinite { context: format!("encoder head {j} output") });
            }
            means[j] = post.mean_coord();
            posts[j] = Some(post);
        }
        Ok(posts.into_iter().map(|p| p.unwrap()).collect())
    }

    /// Reparametrized draw of every coordinate.
    pub fn sample_coords(
        &self,
        posts: &[PosteriorVar],
        rng: &mut impl Rng,
    ) -> Result<Vec<CoordValVar>> {
        posts
            .iter()
            .map(|p| {
                Ok(match p {
                    PosteriorVar::Gauss { mean, log_var } => {
                        CoordValVar::Trans(gauss_sample_var(mean, log_var, rng))
                    }
                    PosteriorVar::VonMises { mu, kappa, .. } => {
                        CoordValVar::Rot(vm_sample_var(mu, kappa, rng)?)
                    }
                })
            })
            .collect()
    }

    /// First-order finite-difference velocities from the posterior means of
    /// two consecutive frames.
    pub fn velocity_from_means(
        &self,
        means0: &[CoordValVar],
        means1: &[CoordValVar],
        dt: f64,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if dt <= 0.0 {
            return Err(Error::Config(format!("velocity estimator needs dt > 0, got {dt}")));
        }
        let mut rdot = Vec::new();
        let mut phidot = Vec::new();
        for (m0, m1) in means0.iter().zip(means1) {
            match (m0, m1) {
                (CoordValVar::Trans(a), CoordValVar::Trans(b)) => {
                    rdot.push(b.sub(a).scale(1.0 / dt));
                }
                (CoordValVar::Rot(a), CoordValVar::Rot(b)) => {
                    let (c0, s0) = (a.at(0), a.at(1));
                    let (c1, s1) = (b.at(0), b.at(1));
                    let w = s1.sub(&s0).mul(&c0).sub(&c1.sub(&c0).mul(&s0)).scale(1.0 / dt);
                    phidot.push(w);
                }
                _ => return Err(Error::Config("coordinate kind mismatch between frames".into())),
            }
        }
        Ok((rdot, phidot))
    }

    /// Assemble the full latent state from sampled coordinates and estimated
    /// velocities.
    pub fn pack_state(
        &self,
        coords: &[CoordValVar],
        rdot: &[Var],
        phidot: &[Var],
    ) -> Result<Var> {
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        let mut s3 = Vec::new();
        for c in coords {
            match c {
                CoordValVar::Trans(v) => s1.push(v.clone()),
                CoordValVar::Rot(v) => {
                    s2.push(v.at(0));
                    s3.push(v.at(1));
                }
                CoordValVar::Missing => {
                    return Err(Error::Config("incomplete coordinates".into()))
                }
            }
        }
        let mut parts: Vec<Var> = Vec::new();
        parts.extend(s1);
        parts.extend(s2);
        parts.extend(s3);
        parts.extend(rdot.iter().cloned());
        parts.extend(phidot.iter().cloned());
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(Var::concat(&refs))
    }

    /// Initial latent state from two consecutive frames: positions sampled
    /// from Q(q0 | x0), velocities from the means of frames 0 and 1.
    pub fn build_initial_state(
        &self,
        x0: &[Var],
        x1: &[Var],
        dt: f64,
        rng: &mut impl Rng,
    ) -> Result<(Var, Vec<PosteriorVar>, Vec<PosteriorVar>)> {
        let p0 = self.encode(x0)?;
        let p1 = self.encode(x1)?;
        let m0: Vec<CoordValVar> = p0.iter().map(|p| p.mean_coord()).collect();
        let m1: Vec<CoordValVar> = p1.iter().map(|p| p.mean_coord()).collect();
        let (rdot, phidot) = self.velocity_from_means(&m0, &m1, dt)?;
        let sampled = self.sample_coords(&p0, rng)?;
        let s0 = self.pack_state(&sampled, &rdot, &phidot)?;
        Ok((s0, p0, p1))
    }

    /// Canonical body canvases (deterministic function of the parameters).
    pub fn canvases(&self, tape: &Tape) -> Vec<Var> {
        let (h, w) = (self.model.cfg.image_h, self.model.cfg.image_w);
        self.canvases
            .iter()
            .map(|c| {
                let one = tape.vector(vec![1.0]);
                c.forward(&one).out.sigmoid().reshape(Shape::Matrix(h, w))
            })
            .collect()
    }

    /// Extract frame-map coordinate values from a latent state node,
    /// normalizing each (cos, sin) pair.
    pub fn state_to_coords(&self, s: &Var) -> Vec<CoordValVar> {
        let lay = &self.model.layout;
        let mut out = Vec::with_capacity(lay.dof());
        for (j, kind) in lay.kinds().iter().enumerate() {
            let b = lay.block_index(j);
            match kind {
                CoordKind::Translational => out.push(CoordValVar::Trans(s.at(lay.s1_range().start + b))),
                CoordKind::Rotational => {
                    let c = s.at(lay.s2_range().start + b);
                    let sn = s.at(lay.s3_range().start + b);
                    let pair = Var::concat(&[&c, &sn]);
                    let norm = pair.dot(&pair).sqrt();
                    out.push(CoordValVar::Rot(pair.div(&norm)));
                }
            }
        }
        out
    }

    /// Decode coordinates into per-body reconstruction channels in [0, 1].
    pub fn decode(&self, coords: &[CoordValVar], canvases: &[Var]) -> Result<Vec<Var>> {
        if let Some(dec) = &self.dec_bb {
            let mut parts: Vec<Var> = Vec::new();
            for c in coords {
                match c {
                    CoordValVar::Trans(v) => parts.push(v.clone()),
                    CoordValVar::Rot(v) => parts.push(v.clone()),
                    CoordValVar::Missing => return Err(Error::Config("incomplete coordinates".into())),
                }
            }
            let refs: Vec<&Var> = parts.iter().collect();
            let out = dec.forward(&Var::concat(&refs)).out.sigmoid();
            let (h, w) = (self.model.cfg.image_h, self.model.cfg.image_w);
            let px = h * w;
            return Ok((0..self.model.n_bodies)
                .map(|i| out.slice(i * px, px).reshape(Shape::Matrix(h, w)))
                .collect());
        }
        assert_eq!(canvases.len(), self.model.n_bodies);
        let tape = canvases[0].tape().clone();
        let consts = self.length_consts();
        let mut out = Vec::with_capacity(self.model.n_bodies);
        for (i, canvas) in canvases.iter().enumerate() {
            let frame = eval_rule_var(&self.model.frame_map.dec[i], i, &tape, coords, &consts)?;
            out.push(canvas.warp(&frame.inv_mat()));
        }
        Ok(out)
    }
}

fn posterior_is_finite(p: &PosteriorVar) -> bool {
    match p {
        PosteriorVar::Gauss { mean, log_var } => {
            mean.value().all_finite() && log_var.value().all_finite()
        }
        PosteriorVar::VonMises { mu, kappa, norm } => {
            mu.value().all_finite() && kappa.value().all_finite() && norm.value().all_finite()
        }
    }
}

/// Plain-f64 posterior means of one frame (throwaway tape).
pub fn encode_f64(
    model: &CavaeModel,
    store: &ParamStore,
    images: &[Image],
) -> Result<Vec<CoordPosterior>> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = model.bind(store, &mut binder);
    let x: Vec<Var> = images
        .iter()
        .map(|im| tape.leaf(Tensor::matrix(im.h, im.w, im.data.clone())))
        .collect();
    let posts = bound.encode(&x)?;
    posts.iter().map(|p| p.to_plain()).collect()
}

/// Plain-f64 decode of coordinate values (throwaway tape).
pub fn decode_f64(model: &CavaeModel, store: &ParamStore, coords: &[CoordVal]) -> Result<Vec<Image>> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = model.bind(store, &mut binder);
    let coord_vars: Vec<CoordValVar> = coords
        .iter()
        .map(|c| match c {
            CoordVal::Trans(v) => CoordValVar::Trans(tape.scalar(*v)),
            CoordVal::Rot(cc, ss) => CoordValVar::Rot(tape.vector(vec![*cc, *ss])),
            CoordVal::Missing => CoordValVar::Missing,
        })
        .collect();
    let canvases = bound.canvases(&tape);
    let outs = bound.decode(&coord_vars, &canvases)?;
    Ok(outs
        .iter()
        .map(|o| {
            let v = o.value();
            Image { h: model.cfg.image_h, w: model.cfg.image_w, data: v.data().to_vec() }
        })
        .collect())
}

/// Posterior means in plain frame-map form.
pub fn posterior_means(posts: &[CoordPosterior]) -> Vec<CoordVal> {
    posts
        .iter()
        .map(|p| match p {
            CoordPosterior::Gaussian(g) => CoordVal::Trans(g.mean),
            CoordPosterior::VonMises { p, .. } => CoordVal::Rot(p.mu.0, p.mu.1),
        })
        .collect()
}

/// First-order finite-difference velocity estimator on plain coordinate
/// means: rdot = (r1 - r0)/dt and
/// phidot = ((sin1 - sin0) cos0 - (cos1 - cos0) sin0)/dt = sin(phi1 - phi0)/dt.
pub fn estimate_velocity(
    coords0: &[CoordVal],
    coords1: &[CoordVal],
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dt <= 0.0 {
        return Err(Error::Config(format!("velocity estimator needs dt > 0, got {dt}")));
    }
    let mut rdot = Vec::new();
    let mut phidot = Vec::new();
    for (a, b) in coords0.iter().zip(coords1) {
        match (a, b) {
            (CoordVal::Trans(r0), CoordVal::Trans(r1)) => rdot.push((r1 - r0) / dt),
            (CoordVal::Rot(c0, s0), CoordVal::Rot(c1, s1)) => {
                phidot.push(((s1 - s0) * c0 - (c1 - c0) * s0) / dt);
            }
            _ => return Err(Error::Config("coordinate kind mismatch between frames".into())),
        }
    }
    Ok((rdot, phidot))
}
