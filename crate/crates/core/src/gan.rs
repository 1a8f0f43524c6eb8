//! Metric-regularized conditional GAN.
//!
//! `G(z, s)` maps noise plus a compatibility-space condition to an item. The
//! discriminator shares a trunk between a realness head `D(y)` and a latent
//! head `Q_0(y)` that should reproduce the frozen compatibility model's
//! `E_0(y)`. Generator terms see the discriminator through stop-gradients and
//! discriminator terms see generated samples through stop-gradients, so each
//! loss only has gradients for its own player.

use cfam_autodiff::{Bindings, Graph, NodeId, ParamSet, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compat::{CompatModel, FamilyEmbedding};
use crate::data::{ItemSet, ItemShape, PairSet};
use crate::error::{invalid, Error, Result};
use crate::nn::{init_dense, init_mlp, mlp, Activation, LEAKY_SLOPE};
use crate::train::{adam_step, AdamConfig, AdamState};

/// Lower clamp for probabilities inside logs.
const LOG_FLOOR: f64 = 1e-12;
/// Added under every square root so norms stay differentiable at zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub z_dim: usize,
    pub batch_size: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub lambda_gp: f64,
    pub lambda_dra: f64,
    /// `None` derives the margin from the data (see [`default_margins`]).
    pub m_enc: Option<f64>,
    pub m_prj: Option<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Use `-log D(G)` for the generator's adversarial terms instead of the
    /// minimax `log(1 - D(G))`.
    pub non_saturating: bool,
    pub steps: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            z_dim: 20,
            batch_size: 64,
            g_hidden: vec![64, 64],
            d_hidden: vec![64, 64],
            lambda_gp: 0.5,
            lambda_dra: 0.5,
            m_enc: None,
            m_prj: None,
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            non_saturating: false,
            steps: 5000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.z_dim == 0 {
            return Err(invalid("z_dim must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("GAN batch size must be positive"));
        }
        if self.g_hidden.contains(&0) || self.d_hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        for (name, v) in [("lambda_gp", self.lambda_gp), ("lambda_dra", self.lambda_dra)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} {v} must be finite and >= 0")));
            }
        }
        for (name, v) in [("m_enc", self.m_enc), ("m_prj", self.m_prj)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(format!("{name} {v} must be finite and >= 0")));
                }
            }
        }
        if self.log_every == 0 {
            return Err(invalid("log_every must be positive"));
        }
        Ok(())
    }
}

/// Sizes fixed by the frozen compatibility model and resolved margins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSpec {
    pub cond_dim: usize,
    pub prototypes: usize,
    pub image: ItemShape,
    pub m_enc: f64,
    pub m_prj: f64,
}

/// `m_prj = 1.2 x` the mean PCD norm `sqrt(d)` over positive training pairs
/// and `m_enc = m_prj / 5`.
pub fn default_margins<T: Scalar>(compat: &CompatModel<T>, items: &ItemSet, pairs: &PairSet) -> Result<(f64, f64)> {
    let positives: Vec<_> = pairs.pairs.iter().copied().filter(|p| p.is_positive()).collect();
    if positives.is_empty() {
        return Err(Error::Data("margin heuristic needs positive pairs".into()));
    }
    let d = compat.pair_distances(items, &positives)?;
    let mean = d.iter().map(|v| v.as_f64().sqrt()).sum::<f64>() / d.len() as f64;
    let m_prj = 1.2 * mean;
    Ok((m_prj / 5.0, m_prj))
}

/// `max(0, dist - m_enc)^2`.
pub fn hinge_enc(dist: f64, m_enc: f64) -> f64 {
    (dist - m_enc).max(0.0).powi(2)
}

/// `max(0, m_prj - dist)^2`.
pub fn hinge_prj(dist: f64, m_prj: f64) -> f64 {
    (m_prj - dist).max(0.0).powi(2)
}

/// `batch + lambda_dra * std(batch) * U[0, 1)` with one population standard
/// deviation over every element and fresh noise per element.
pub fn dragan_perturb<T: Scalar, R: Rng>(batch: &Tensor<T>, lambda_dra: f64, rng: &mut R) -> Tensor<T> {
    let data = batch.data();
    if data.is_empty() {
        return batch.clone();
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let scale = lambda_dra * var.sqrt();
    let out: Vec<T> = data.iter().map(|&v| v + T::of(scale * rng.random::<f64>())).collect();
    Tensor::new(batch.shape(), out).expect("same shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel<T> {
    pub config: GanConfig,
    pub spec: GanSpec,
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
}

struct DiscIds {
    trunk: Vec<(NodeId, NodeId)>,
    real: (NodeId, NodeId),
    q: (NodeId, NodeId),
}

impl DiscIds {
    fn declare<T: Scalar>(g: &mut Graph<T>, config: &GanConfig, spec: &GanSpec) -> Result<Self> {
        let mut fan_in = spec.image.pixels();
        let mut trunk = Vec::new();
        for (i, &w) in config.d_hidden.iter().enumerate() {
            trunk.push((
                g.param(&format!("disc.{i}.w"), &[fan_in, w])?,
                g.param(&format!("disc.{i}.b"), &[w])?,
            ));
            fan_in = w;
        }
        Ok(Self {
            trunk,
            real: (g.param("disc.real.w", &[fan_in, 1])?, g.param("disc.real.b", &[1])?),
            q: (
                g.param("disc.q.w", &[fan_in, spec.cond_dim])?,
                g.param("disc.q.b", &[spec.cond_dim])?,
            ),
        })
    }

    fn frozen<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Self> {
        let mut sg =
            |(w, b): (NodeId, NodeId)| -> Result<(NodeId, NodeId)> { Ok((g.stop_gradient(w)?, g.stop_gradient(b)?)) };
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for &l in &self.trunk {
            trunk.push(sg(l)?);
        }
        Ok(Self {
            trunk,
            real: sg(self.real)?,
            q: sg(self.q)?,
        })
    }

    /// `(D(x): [rows], Q_0(x): [rows, cond_dim])`.
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        for &(w, b) in &self.trunk {
            let z = g.affine(h, w, b)?;
            h = g.leaky_relu(z, T::of(LEAKY_SLOPE))?;
        }
        let rows = g.shape(x)[0];
        let logit = g.affine(h, self.real.0, self.real.1)?;
        let p = g.sigmoid(logit)?;
        let p = g.reshape(p, &[rows])?;
        let q = g.affine(h, self.q.0, self.q.1)?;
        Ok((p, q))
    }
}

fn neg_mean_log<T: Scalar>(g: &mut Graph<T>, p: NodeId) -> Result<NodeId> {
    let p = g.max_const(p, T::of(LOG_FLOOR))?;
    let l = g.log(p)?;
    let m = g.mean_all(l)?;
    Ok(g.neg(m)?)
}

fn one_minus<T: Scalar>(g: &mut Graph<T>, p: NodeId) -> Result<NodeId> {
    let n = g.neg(p)?;
    Ok(g.add_const(n, T::one())?)
}

/// Row norms `sqrt(|a - b|^2 + guard)`.
fn row_dist<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.row_sq_norm(diff)?;
    let sq = g.add_const(sq, T::of(NORM_GUARD))?;
    Ok(g.sqrt(sq)?)
}

/// `lambda * mean_i (|grad_{x_i} sum_j out_j| - 1)^2` for a per-row output
/// `out: [rows]` of the input `x: [rows, cols]`. Appends a gradient
/// subgraph, so the result can be differentiated again.
pub fn gradient_penalty<T: Scalar>(g: &mut Graph<T>, out: NodeId, x: NodeId, lambda: f64) -> Result<NodeId> {
    let s = g.sum_all(out)?;
    let grad = g.gradients(s, &[x])?[0];
    let sq = g.row_sq_norm(grad)?;
    let sq = g.add_const(sq, T::of(NORM_GUARD))?;
    let norm = g.sqrt(sq)?;
    let dev = g.add_const(norm, -T::one())?;
    let dev = g.square(dev)?;
    let m = g.mean_all(dev)?;
    Ok(g.scale(m, T::of(lambda))?)
}

/// Loss graph for fixed batch sizes.
///
/// Inputs: `y`, `y_hat` (`[b, pixels]`), `cond_y` (`[b, cond]`), `z_enc`
/// (`[b, z]`), `s_prj`, `v_prj` (`[k b, cond]`) and `z_prj` (`[k b, z]`).
pub struct GanGraph<T> {
    pub graph: Graph<T>,
    pub batch: usize,
    pub l_d: NodeId,
    pub l_g: NodeId,
    pub l_real: NodeId,
    pub l_enc: NodeId,
    pub l_prj: NodeId,
    pub l_gp: NodeId,
    pub omega_c: NodeId,
    pub omega_enc: NodeId,
    pub omega_prj: NodeId,
}

impl<T: Scalar> GanGraph<T> {
    pub fn new(config: &GanConfig, spec: &GanSpec, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let p = spec.image.pixels();
        let (c, z, kb) = (spec.cond_dim, config.z_dim, spec.prototypes * batch);
        let y = g.input("y", &[batch, p])?;
        let y_hat = g.input("y_hat", &[batch, p])?;
        let cond_y = g.input("cond_y", &[batch, c])?;
        let z_enc = g.input("z_enc", &[batch, z])?;
        let s_prj = g.input("s_prj", &[kb, c])?;
        let v_prj = g.input("v_prj", &[kb, c])?;
        let z_prj = g.input("z_prj", &[kb, z])?;

        let g_widths = generator_widths(config, spec);
        let gin = g.concat_cols(z_enc, cond_y)?;
        let y_enc = mlp(&mut g, gin, "gen", &g_widths, Activation::Sigmoid)?;
        let gin = g.concat_cols(z_prj, s_prj)?;
        let y_prj = mlp(&mut g, gin, "gen", &g_widths, Activation::Sigmoid)?;

        let live = DiscIds::declare(&mut g, config, spec)?;
        let frozen = live.frozen(&mut g)?;

        // Discriminator side.
        let (d_real, q_real) = live.apply(&mut g, y)?;
        let l_real = neg_mean_log(&mut g, d_real)?;
        let y_enc_sg = g.stop_gradient(y_enc)?;
        let y_prj_sg = g.stop_gradient(y_prj)?;
        let (d_enc, _) = live.apply(&mut g, y_enc_sg)?;
        let (d_prj, _) = live.apply(&mut g, y_prj_sg)?;
        let fake_enc = one_minus(&mut g, d_enc)?;
        let l_enc = neg_mean_log(&mut g, fake_enc)?;
        let fake_prj = one_minus(&mut g, d_prj)?;
        let l_prj = neg_mean_log(&mut g, fake_prj)?;
        let (d_hat, _) = live.apply(&mut g, y_hat)?;
        let l_gp = gradient_penalty(&mut g, d_hat, y_hat, config.lambda_gp)?;
        let diff = g.sub(cond_y, q_real)?;
        let sq = g.row_sq_norm(diff)?;
        let omega_c = g.mean_all(sq)?;
        let adv = g.add(l_enc, l_prj)?;
        let half = g.scale(adv, T::of(0.5))?;
        let l_d = g.add(l_real, half)?;
        let l_d = g.add(l_d, l_gp)?;
        let l_d = g.add(l_d, omega_c)?;

        // Generator side.
        let (dg_enc, qg_enc) = frozen.apply(&mut g, y_enc)?;
        let (dg_prj, qg_prj) = frozen.apply(&mut g, y_prj)?;
        let adv_g = if config.non_saturating {
            let a = neg_mean_log(&mut g, dg_enc)?;
            let b = neg_mean_log(&mut g, dg_prj)?;
            let s = g.add(a, b)?;
            g.scale(s, T::of(0.5))?
        } else {
            let fe = one_minus(&mut g, dg_enc)?;
            let a = neg_mean_log(&mut g, fe)?;
            let fp = one_minus(&mut g, dg_prj)?;
            let b = neg_mean_log(&mut g, fp)?;
            let s = g.add(a, b)?;
            g.scale(s, T::of(-0.5))?
        };
        let dist = row_dist(&mut g, cond_y, qg_enc)?;
        let h = g.add_const(dist, T::of(-spec.m_enc))?;
        let h = g.max_const(h, T::zero())?;
        let h = g.square(h)?;
        let omega_enc = g.mean_all(h)?;
        let dist = row_dist(&mut g, v_prj, qg_prj)?;
        let h = g.neg(dist)?;
        let h = g.add_const(h, T::of(spec.m_prj))?;
        let h = g.max_const(h, T::zero())?;
        let h = g.square(h)?;
        let omega_prj = g.mean_all(h)?;
        let l_g = g.add(adv_g, omega_enc)?;
        let l_g = g.add(l_g, omega_prj)?;

        for (name, id) in [
            ("l_d", l_d),
            ("l_g", l_g),
            ("l_real", l_real),
            ("l_enc", l_enc),
            ("l_prj", l_prj),
            ("l_gp", l_gp),
            ("omega_c", omega_c),
            ("omega_enc", omega_enc),
            ("omega_prj", omega_prj),
        ] {
            g.mark_output(name, id);
        }
        Ok(Self {
            graph: g,
            batch,
            l_d,
            l_g,
            l_real,
            l_enc,
            l_prj,
            l_gp,
            omega_c,
            omega_enc,
            omega_prj,
        })
    }

    pub fn terms(&self, bindings: &Bindings<'_, T>) -> Result<GanTerms> {
        let ids = [
            self.l_d,
            self.l_g,
            self.l_real,
            self.l_enc,
            self.l_prj,
            self.l_gp,
            self.omega_c,
            self.omega_enc,
            self.omega_prj,
        ];
        let v = self.graph.eval(bindings, &ids)?;
        let s = |i: usize| v[i].item().expect("scalar").as_f64();
        Ok(GanTerms {
            l_d: s(0),
            l_g: s(1),
            l_real: s(2),
            l_enc: s(3),
            l_prj: s(4),
            l_gp: s(5),
            omega_c: s(6),
            omega_enc: s(7),
            omega_prj: s(8),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTerms {
    pub l_d: f64,
    pub l_g: f64,
    pub l_real: f64,
    pub l_enc: f64,
    pub l_prj: f64,
    pub l_gp: f64,
    pub omega_c: f64,
    pub omega_enc: f64,
    pub omega_prj: f64,
}

/// One logged row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanCurveRow {
    pub step: usize,
    pub l_d: f64,
    pub l_g: f64,
    pub omega_c: f64,
    pub omega_enc: f64,
    pub omega_prj: f64,
    pub l_gp: f64,
}

fn generator_widths(config: &GanConfig, spec: &GanSpec) -> Vec<usize> {
    let mut w = vec![config.z_dim + spec.cond_dim];
    w.extend_from_slice(&config.g_hidden);
    w.push(spec.image.pixels());
    w
}

/// Frozen compatibility families of every item plus the negative pairs
/// (as item positions) used for the projection terms.
pub struct GanData<'a, T> {
    pub items: &'a ItemSet,
    pub families: Vec<FamilyEmbedding<T>>,
    pub negatives: Vec<(usize, usize)>,
}

impl<'a, T: Scalar> GanData<'a, T> {
    pub fn new(compat: &CompatModel<T>, items: &'a ItemSet, pairs: &PairSet) -> Result<Self> {
        pairs.validate_against(items)?;
        let negatives: Vec<(usize, usize)> = pairs
            .pairs
            .iter()
            .filter(|p| !p.is_positive())
            .map(|p| {
                (
                    items.position(p.query).expect("validated"),
                    items.position(p.candidate).expect("validated"),
                )
            })
            .collect();
        if negatives.is_empty() {
            return Err(Error::Data("GAN training needs negative pairs".into()));
        }
        Ok(Self {
            items,
            families: compat.encode_items(items)?,
            negatives,
        })
    }
}

fn normal_tensor<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Inputs for one training step.
pub struct GanBatch<T> {
    pub y: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub cond_y: Tensor<T>,
    pub z_enc: Tensor<T>,
    pub s_prj: Tensor<T>,
    pub v_prj: Tensor<T>,
    pub z_prj: Tensor<T>,
}

impl<T: Scalar> GanBatch<T> {
    pub fn sample<R: Rng>(data: &GanData<'_, T>, model: &GanModel<T>, rng: &mut R) -> Result<Self> {
        let b = model.config.batch_size;
        let spec = &model.spec;
        let (c, k) = (spec.cond_dim, spec.prototypes);
        let p = spec.image.pixels();
        let mut y = Vec::with_capacity(b * p);
        let mut cond = Vec::with_capacity(b * c);
        for _ in 0..b {
            let i = rng.random_range(0..data.items.len());
            y.extend(data.items.image(i).iter().map(|&v| T::of(v)));
            cond.extend_from_slice(&data.families[i].e0);
        }
        let negs: Vec<(usize, usize)> = (0..b)
            .map(|_| data.negatives[rng.random_range(0..data.negatives.len())])
            .collect();
        let mut s = Vec::with_capacity(k * b * c);
        let mut v = Vec::with_capacity(k * b * c);
        for j in 0..k {
            for &(q, cand) in &negs {
                s.extend_from_slice(data.families[q].prototype(j));
                v.extend_from_slice(&data.families[cand].e0);
            }
        }
        let y = Tensor::new(&[b, p], y)?;
        let y_hat = dragan_perturb(&y, model.config.lambda_dra, rng);
        Ok(Self {
            y,
            y_hat,
            cond_y: Tensor::new(&[b, c], cond)?,
            z_enc: normal_tensor(&[b, model.config.z_dim], rng),
            s_prj: Tensor::new(&[k * b, c], s)?,
            v_prj: Tensor::new(&[k * b, c], v)?,
            z_prj: normal_tensor(&[k * b, model.config.z_dim], rng),
        })
    }

    /// Fresh noise for the generator step.
    pub fn resample_noise<R: Rng>(&mut self, rng: &mut R) {
        self.z_enc = normal_tensor(self.z_enc.shape(), rng);
        self.z_prj = normal_tensor(self.z_prj.shape(), rng);
    }

    pub fn bindings<'a>(&'a self, model: &'a GanModel<T>) -> Bindings<'a, T> {
        Bindings::new()
            .with("y", &self.y)
            .with("y_hat", &self.y_hat)
            .with("cond_y", &self.cond_y)
            .with("z_enc", &self.z_enc)
            .with("s_prj", &self.s_prj)
            .with("v_prj", &self.v_prj)
            .with("z_prj", &self.z_prj)
            .with_params(&model.generator)
            .with_params(&model.discriminator)
    }
}

/// Which compatibility-space vector conditions the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// `E_k(x)` for `k` in `1..=K`: items compatible with the query.
    Prototype(usize),
    /// `E_0(x)`: items in the query's own style.
    Style,
}

impl<T: Scalar> GanModel<T> {
    pub fn new(config: GanConfig, spec: GanSpec) -> Result<Self> {
        config.validate()?;
        if spec.cond_dim == 0 || spec.prototypes == 0 || spec.image.pixels() == 0 {
            return Err(invalid("GAN spec sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, 0x6a));
        let mut generator = ParamSet::new();
        init_mlp(&mut generator, "gen", &generator_widths(&config, &spec), &mut rng);
        let mut discriminator = ParamSet::new();
        let mut fan_in = spec.image.pixels();
        for (i, &w) in config.d_hidden.iter().enumerate() {
            init_dense(&mut discriminator, &format!("disc.{i}"), fan_in, w, &mut rng);
            fan_in = w;
        }
        init_dense(&mut discriminator, "disc.real", fan_in, 1, &mut rng);
        init_dense(&mut discriminator, "disc.q", fan_in, spec.cond_dim, &mut rng);
        Ok(Self {
            config,
            spec,
            generator,
            discriminator,
        })
    }

    /// Spec derived from a compatibility model; margins default to
    /// [`default_margins`] on `pairs`.
    pub fn spec_for(config: &GanConfig, compat: &CompatModel<T>, items: &ItemSet, pairs: &PairSet) -> Result<GanSpec> {
        let (m_enc, m_prj) = match (config.m_enc, config.m_prj) {
            (Some(e), Some(p)) => (e, p),
            (e, p) => {
                let (_, dp) = default_margins(compat, items, pairs)?;
                let p = p.unwrap_or(dp);
                (e.unwrap_or(p / 5.0), p)
            }
        };
        Ok(GanSpec {
            cond_dim: compat.config().embed_dim(),
            prototypes: compat.config().prototypes(),
            image: compat.config().image,
            m_enc,
            m_prj,
        })
    }

    /// Rebuilds from stored tensors (`gen.*` and `disc.*`), checking shapes.
    pub fn from_parts(config: GanConfig, spec: GanSpec, tensors: ParamSet<T>) -> Result<Self> {
        let template = Self::new(config, spec)?;
        let mut generator = ParamSet::new();
        let mut discriminator = ParamSet::new();
        for (name, t) in tensors {
            let (expected, dest) = if name.starts_with("gen.") {
                (template.generator.get(&name), &mut generator)
            } else {
                (template.discriminator.get(&name), &mut discriminator)
            };
            match expected {
                Some(e) if e.shape() == t.shape() => dest.insert(name, t),
                Some(e) => {
                    return Err(Error::Mismatch(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        e.shape()
                    )))
                }
                None => return Err(Error::Mismatch(format!("unexpected GAN tensor `{name}`"))),
            }
        }
        if generator.len() != template.generator.len() || discriminator.len() != template.discriminator.len() {
            return Err(Error::Mismatch("GAN checkpoint is missing tensors".into()));
        }
        Ok(Self {
            generator,
            discriminator,
            ..template
        })
    }

    /// Both players' tensors under their own names.
    pub fn all_params(&self) -> ParamSet<T> {
        self.generator
            .iter()
            .chain(self.discriminator.iter())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// `G(z, cond)` for `z: [rows, z_dim]`, `cond: [rows, cond_dim]`.
    pub fn generate(&self, z: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = z.shape()[0];
        if z.shape() != [rows, self.config.z_dim] || cond.shape() != [rows, self.spec.cond_dim] {
            return Err(Error::Mismatch(format!(
                "noise {:?} / condition {:?} do not fit z_dim {} and cond_dim {}",
                z.shape(),
                cond.shape(),
                self.config.z_dim,
                self.spec.cond_dim
            )));
        }
        let mut g = Graph::new();
        let zi = g.input("z", z.shape())?;
        let ci = g.input("cond", cond.shape())?;
        let x = g.concat_cols(zi, ci)?;
        let out = mlp(
            &mut g,
            x,
            "gen",
            &generator_widths(&self.config, &self.spec),
            Activation::Sigmoid,
        )?;
        let b = Bindings::new()
            .with("z", z)
            .with("cond", cond)
            .with_params(&self.generator);
        Ok(g.eval_one(&b, out)?)
    }

    /// `(D(x), Q_0(x))` for `x: [rows, pixels]`.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        let ids = DiscIds::declare(&mut g, &self.config, &self.spec)?;
        let (d, q) = ids.apply(&mut g, xi)?;
        let b = Bindings::new().with("x", x).with_params(&self.discriminator);
        let mut v = g.eval(&b, &[d, q])?;
        let q = v.pop().expect("two outputs");
        Ok((v.pop().expect("two outputs"), q))
    }

    /// `count` samples conditioned on `query`'s prototype or embedding, with
    /// fresh noise per sample. Values lie in `[0, 1]`.
    pub fn sample_compatible<R: Rng>(
        &self,
        query: &FamilyEmbedding<T>,
        condition: Condition,
        count: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let z = normal_tensor(&[count.max(1), self.config.z_dim], rng);
        let out = self.sample_with_noise(query, condition, &z)?;
        if count == 0 {
            return Ok(Tensor::zeros(&[0, self.spec.image.pixels()]));
        }
        Ok(out)
    }

    /// Like [`GanModel::sample_compatible`] with caller-supplied noise rows.
    pub fn sample_with_noise(
        &self,
        query: &FamilyEmbedding<T>,
        condition: Condition,
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let cond: &[T] = match condition {
            Condition::Style => &query.e0,
            Condition::Prototype(k) if (1..=query.k()).contains(&k) => query.prototype(k - 1),
            Condition::Prototype(k) => {
                return Err(invalid(format!("prototype {k} outside 1..={}", query.k())));
            }
        };
        if cond.len() != self.spec.cond_dim {
            return Err(Error::Mismatch(format!(
                "condition has {} dims, GAN expects {}",
                cond.len(),
                self.spec.cond_dim
            )));
        }
        let rows = z.shape()[0];
        let c = Tensor::new(&[rows, cond.len()], cond.repeat(rows))?;
        self.generate(z, &c)
    }
}

/// Mean `|E_0(y) - Q_0(y)|^2` over every item.
pub fn omega_c_full<T: Scalar>(gan: &GanModel<T>, data: &GanData<'_, T>) -> Result<f64> {
    let ids = data.items.ids();
    let mut total = 0.0;
    for (chunk_no, chunk) in ids.chunks(256).enumerate() {
        let (_, q) = gan.discriminate(&data.items.batch_tensor(chunk)?)?;
        for (r, row) in q.rows().enumerate() {
            let e0 = &data.families[chunk_no * 256 + r].e0;
            total += crate::compat::sq_dist(row, e0).as_f64();
        }
    }
    Ok(total / ids.len() as f64)
}

#[derive(Clone, Debug)]
pub struct GanOutcome<T> {
    pub model: GanModel<T>,
    pub curve: Vec<GanCurveRow>,
    pub steps_done: usize,
    pub diverged: bool,
}

/// Alternating single discriminator and generator Adam steps. Noise is
/// drawn fresh for each use; the compatibility model only supplies fixed
/// conditions and never receives gradients.
pub fn train_mrcgan<T: Scalar>(model: GanModel<T>, data: &GanData<'_, T>) -> Result<GanOutcome<T>> {
    let config = model.config.clone();
    config.validate()?;
    let adam_cfg = config.adam();
    let mut model = model;
    let mut graph = GanGraph::new(&config, &model.spec, config.batch_size)?;
    let mut adam_d = AdamState::new(&model.discriminator);
    let mut adam_g = AdamState::new(&model.generator);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, 0x7b));
    let mut curve = Vec::new();
    let mut diverged = false;
    let mut steps_done = 0;
    for step in 1..=config.steps {
        let mut batch = GanBatch::sample(data, &model, &mut rng)?;
        let d_step = {
            let b = batch.bindings(&model);
            graph
                .graph
                .value_and_backward(graph.l_d, &b)
                .map_err(Error::from)
                .and_then(|(v, grads)| {
                    let terms = if step == 1 || step % config.log_every == 0 {
                        Some(graph.terms(&b)?)
                    } else {
                        None
                    };
                    Ok((v, grads, terms))
                })
        };
        let (l_d, grads, terms) = match d_step {
            Ok(v) => v,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        if !l_d.is_finite() {
            diverged = true;
            break;
        }
        let d_grads = grads.filtered("disc.");
        if adam_step(&mut adam_d, &mut model.discriminator, &d_grads, &adam_cfg).is_err() {
            diverged = true;
            break;
        }
        batch.resample_noise(&mut rng);
        let g_step = {
            let b = batch.bindings(&model);
            graph.graph.value_and_backward(graph.l_g, &b)
        };
        let g_grads = match g_step {
            Ok((v, grads)) if v.is_finite() => grads.filtered("gen."),
            _ => {
                diverged = true;
                break;
            }
        };
        if adam_step(&mut adam_g, &mut model.generator, &g_grads, &adam_cfg).is_err() {
            diverged = true;
            break;
        }
        steps_done = step;
        if let Some(t) = terms {
            curve.push(GanCurveRow {
                step: step - 1,
                l_d: t.l_d,
                l_g: t.l_g,
                omega_c: t.omega_c,
                omega_enc: t.omega_enc,
                omega_prj: t.omega_prj,
                l_gp: t.l_gp,
            });
        }
    }
    Ok(GanOutcome {
        model,
        curve,
        steps_done,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_contracts() {
        assert_eq!(hinge_enc(0.5 - 0.01, 0.5), 0.0);
        assert_eq!(hinge_enc(0.5, 0.5), 0.0);
        assert!((hinge_enc(0.75, 0.5) - 0.0625).abs() < 1e-15);
        assert_eq!(hinge_prj(2.0, 1.5), 0.0);
        assert_eq!(hinge_prj(1.5, 1.5), 0.0);
        for t in [0.01, 0.25, 1.0] {
            assert!((hinge_prj(1.5 - t, 1.5) - t * t).abs() < 1e-12);
        }
    }

    #[test]
    fn dragan_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.9, 0.3, 0.4, 0.2, 0.8]).unwrap();
        assert_eq!(dragan_perturb(&x, 0.0, &mut rng), x);
        let c = Tensor::<f64>::full(&[4, 2], 0.7);
        assert_eq!(dragan_perturb(&c, 0.5, &mut rng), c);
        // Unit population std: values +-1.
        let u = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        for _ in 0..200 {
            let p = dragan_perturb(&u, 0.5, &mut rng);
            for (a, b) in p.data().iter().zip(u.data()) {
                assert!((0.0..=0.5).contains(&(a - b)));
            }
        }
    }

    #[test]
    fn linear_discriminator_penalty() {
        // out = x w with |w| = 2 everywhere.
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3, 2]).unwrap();
        let w = g.param("w", &[2, 1]).unwrap();
        let o = g.matmul(x, w).unwrap();
        let o = g.reshape(o, &[3]).unwrap();
        let pen = gradient_penalty(&mut g, o, x, 0.5).unwrap();
        let xv = Tensor::from_f64(&[3, 2], &[0.3, -1.0, 2.0, 0.5, 0.0, 0.0]).unwrap();
        let wv = Tensor::from_f64(&[2, 1], &[1.2, -1.6]).unwrap();
        let b = Bindings::new().with("x", &xv).with("w", &wv);
        let v = g.eval_one(&b, pen).unwrap().item().unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
        // d/dw of 0.5 (|w| - 1)^2 = (|w| - 1) w / |w|.
        let grad = g.backward(pen, &b).unwrap();
        let gw = grad.get("w").unwrap().data();
        assert!((gw[0] - 0.6).abs() < 1e-9 && (gw[1] + 0.8).abs() < 1e-9);
    }
}
