//! The compatibility-family encoder, projected compatibility distance and
//! the discriminative loss.
//!
//! Parameters: `trunk.{i}.w/b` (shared dense layers, leaky ReLU), `heads.w/b`
//! (one affine map whose column block `k` is head `E_k`) and the scalar sigmoid
//! shift `c`.

use std::collections::HashMap;

use cfam_autodiff::{Bindings, Graph, NodeId, ParamSet, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, ItemSet, ItemShape, Pair};
use crate::error::{invalid, Error, Result};
use crate::nn::{dense, init_dense, Activation};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pcd,
    L2,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcd" => Ok(Mode::Pcd),
            "l2" => Ok(Mode::L2),
            other => Err(invalid(format!("unknown mode `{other}` (expected pcd or l2)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pcd => "pcd",
            Mode::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatConfig {
    pub mode: Mode,
    /// Prototype count.
    pub k: usize,
    /// Latent size of each head. In L2 mode the single embedding has
    /// `(k + 1) * n` dimensions.
    pub n: usize,
    pub trunk: Vec<usize>,
    pub lambda_m: f64,
    pub image: ItemShape,
    pub init_c: f64,
}

impl CompatConfig {
    pub fn new(mode: Mode, k: usize, n: usize, image: ItemShape) -> Self {
        Self {
            mode,
            k,
            n,
            trunk: vec![64, 64],
            lambda_m: 0.0,
            image,
            init_c: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(invalid(format!("lambda_m {} must be finite and >= 0", self.lambda_m)));
        }
        if self.trunk.contains(&0) {
            return Err(invalid("trunk widths must be positive"));
        }
        if self.image.pixels() == 0 {
            return Err(invalid("image shape must be non-empty"));
        }
        if !self.init_c.is_finite() {
            return Err(invalid("init_c must be finite"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.image.pixels()
    }

    /// Width of the head block `E_0` (equals the full embedding in L2 mode).
    pub fn embed_dim(&self) -> usize {
        match self.mode {
            Mode::Pcd => self.n,
            Mode::L2 => (self.k + 1) * self.n,
        }
    }

    /// Prototypes per family: `k`, or 1 in L2 mode where the embedding is its
    /// own prototype.
    pub fn prototypes(&self) -> usize {
        match self.mode {
            Mode::Pcd => self.k,
            Mode::L2 => 1,
        }
    }

    /// Total output width of the heads.
    pub fn head_width(&self) -> usize {
        (self.k + 1) * self.n
    }

    fn trunk_out(&self) -> usize {
        self.trunk.last().copied().unwrap_or_else(|| self.input_dim())
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim();
        for (i, &w) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.w"), vec![fan_in, w]));
            out.push((format!("trunk.{i}.b"), vec![w]));
            fan_in = w;
        }
        out.push(("heads.w".into(), vec![fan_in, self.head_width()]));
        out.push(("heads.b".into(), vec![self.head_width()]));
        out.push(("c".into(), vec![]));
        out
    }
}

/// One item's embedding and prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyEmbedding<T> {
    pub e0: Vec<T>,
    /// `k` rows of length `e0.len()`, row-major.
    pub prototypes: Vec<T>,
}

impl<T: Scalar> FamilyEmbedding<T> {
    pub fn n(&self) -> usize {
        self.e0.len()
    }

    pub fn k(&self) -> usize {
        self.prototypes.len() / self.e0.len()
    }

    /// Prototype `E_{j+1}` for `j` in `0..k`.
    pub fn prototype(&self, j: usize) -> &[T] {
        let n = self.n();
        &self.prototypes[j * n..(j + 1) * n]
    }

    /// Directed distance from this item (as query) to `candidate`.
    pub fn pcd_to(&self, candidate: &FamilyEmbedding<T>) -> Pcd<T> {
        pcd(&self.prototypes, &candidate.e0)
    }

    pub fn is_finite(&self) -> bool {
        self.e0.iter().chain(&self.prototypes).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pcd<T> {
    pub d: T,
    pub d_k: Vec<T>,
    pub w: Vec<T>,
}

pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Row-minimum-subtracted softmin weights.
pub fn softmin<T: Scalar>(d: &[T]) -> Vec<T> {
    let lo = d.iter().copied().fold(T::infinity(), T::min);
    let e: Vec<T> = d.iter().map(|&v| (lo - v).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Projected compatibility distance from a query's prototypes (`k x n`,
/// row-major) to a candidate embedding.
pub fn pcd<T: Scalar>(prototypes: &[T], e0_y: &[T]) -> Pcd<T> {
    let n = e0_y.len();
    assert!(
        n > 0 && prototypes.len().is_multiple_of(n) && !prototypes.is_empty(),
        "prototype shape"
    );
    let d_k: Vec<T> = prototypes.chunks(n).map(|p| sq_dist(p, e0_y)).collect();
    let w = softmin(&d_k);
    let mut mix = vec![T::zero(); n];
    for (p, &wk) in prototypes.chunks(n).zip(&w) {
        for (m, &v) in mix.iter_mut().zip(p) {
            *m = *m + wk * v;
        }
    }
    Pcd {
        d: sq_dist(&mix, e0_y),
        d_k,
        w,
    }
}

/// `P = 1 / (1 + exp(d - c))`.
pub fn pair_probability<T: Scalar>(d: T, c: T) -> T {
    let z = c - d;
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Loss terms over one batch. A missing label set leaves its term at zero
/// and clears the matching flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub ce_pos: T,
    pub ce_neg: T,
    pub metric: T,
    pub has_positive: bool,
    pub has_negative: bool,
}

/// Per-pair weights normalized within each label set, so a weight of `w`
/// equals `w` copies of the pair in the means.
pub fn label_weights(labels: &[i8], weights: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(invalid(format!("{} weights for {} pairs", w.len(), labels.len())));
        }
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("pair weight {bad} must be finite and >= 0")));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut pos = vec![0.0; labels.len()];
    let mut neg = vec![0.0; labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            pos[i] = weight(i);
        } else {
            neg[i] = weight(i);
        }
    }
    for v in [&mut pos, &mut neg] {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok((pos, neg))
}

/// The batch loss computed directly from distances; matches the graph.
pub fn loss_from_distances<T: Scalar>(
    d: &[T],
    labels: &[i8],
    weights: Option<&[f64]>,
    c: T,
    lambda_m: f64,
) -> Result<LossBreakdown<T>> {
    if d.len() != labels.len() {
        return Err(invalid(format!("{} distances for {} labels", d.len(), labels.len())));
    }
    let (wp, wn) = label_weights(labels, weights)?;
    let floor = T::of(LOG_FLOOR);
    let mut ce_pos = T::zero();
    let mut ce_neg = T::zero();
    let mut metric = T::zero();
    for i in 0..d.len() {
        let p = pair_probability(d[i], c).max(floor);
        let q = pair_probability(c, d[i]).max(floor);
        ce_pos = ce_pos - T::of(wp[i]) * p.ln();
        ce_neg = ce_neg - T::of(wn[i]) * q.ln();
        metric = metric + T::of(wp[i]) * d[i];
    }
    Ok(LossBreakdown {
        total: ce_pos + ce_neg + T::of(lambda_m) * metric,
        ce_pos,
        ce_neg,
        metric,
        has_positive: wp.iter().any(|&v| v > 0.0),
        has_negative: wn.iter().any(|&v| v > 0.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompatModel<T> {
    config: CompatConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> CompatModel<T> {
    /// Glorot-initialized weights, zero biases and `c = init_c`.
    pub fn new(config: CompatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = config.input_dim();
        for (i, &w) in config.trunk.iter().enumerate() {
            init_dense(&mut params, &format!("trunk.{i}"), fan_in, w, &mut rng);
            fan_in = w;
        }
        init_dense(&mut params, "heads", fan_in, config.head_width(), &mut rng);
        params.insert("c", Tensor::scalar(T::of(config.init_c)));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, rejecting missing, extra or
    /// misshapen tensors.
    pub fn from_parts(config: CompatConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} tensors, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Mismatch(format!(
                        "`{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Mismatch(format!("missing parameter `{name}`"))),
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CompatConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn c(&self) -> T {
        self.params
            .get("c")
            .and_then(Tensor::item)
            .expect("c is a scalar parameter")
    }

    pub fn cast<U: Scalar>(&self) -> CompatModel<U> {
        CompatModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_rows(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim() || shape[0] == 0 {
            return Err(Error::Mismatch(format!(
                "input batch {shape:?}, model expects [rows, {}]",
                self.config.input_dim()
            )));
        }
        Ok(shape[0])
    }

    /// Families for every row of `x: [rows, pixels]`. The trunk runs once per
    /// row and feeds all heads.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Vec<FamilyEmbedding<T>>> {
        let rows = self.check_rows(x)?;
        let mut g = Graph::new();
        let xi = g.input("x", &[rows, self.config.input_dim()])?;
        let out = encoder(&mut g, &self.config, xi)?;
        let heads = g.eval_one(&Bindings::new().with("x", x).with_params(&self.params), out)?;
        Ok(heads.rows().map(|r| self.family_from_heads(r)).collect())
    }

    fn family_from_heads(&self, r: &[T]) -> FamilyEmbedding<T> {
        match self.config.mode {
            Mode::Pcd => {
                let n = self.config.n;
                FamilyEmbedding {
                    e0: r[..n].to_vec(),
                    prototypes: r[n..].to_vec(),
                }
            }
            Mode::L2 => FamilyEmbedding {
                e0: r.to_vec(),
                prototypes: r.to_vec(),
            },
        }
    }

    pub fn encode_family(&self, image: &[f64]) -> Result<FamilyEmbedding<T>> {
        let x = Tensor::new(&[1, image.len()], image.iter().map(|&v| T::of(v)).collect())?;
        Ok(self.encode_batch(&x)?.pop().expect("one row"))
    }

    /// Families of all `items`, in item order.
    pub fn encode_items(&self, items: &ItemSet) -> Result<Vec<FamilyEmbedding<T>>> {
        if items.shape() != self.config.image {
            return Err(Error::Mismatch(format!(
                "items are {}x{}, model expects {}x{}",
                items.shape().height,
                items.shape().width,
                self.config.image.height,
                self.config.image.width
            )));
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.ids().chunks(ENCODE_CHUNK) {
            out.extend(self.encode_batch(&items.batch_tensor(chunk)?)?);
        }
        Ok(out)
    }

    /// Families keyed by item id.
    pub fn encode_map(&self, items: &ItemSet) -> Result<HashMap<ItemId, FamilyEmbedding<T>>> {
        Ok(items.ids().iter().copied().zip(self.encode_items(items)?).collect())
    }

    /// Exact PCD for each pair (L2 distance in L2 mode).
    pub fn pair_distances(&self, items: &ItemSet, pairs: &[Pair]) -> Result<Vec<T>> {
        let fam = self.encode_map(items)?;
        pairs
            .iter()
            .map(|p| {
                let q = fam.get(&p.query).ok_or_else(|| unknown(p.query))?;
                let c = fam.get(&p.candidate).ok_or_else(|| unknown(p.candidate))?;
                Ok(q.pcd_to(c).d)
            })
            .collect()
    }

    /// Loss over `pairs` from exact distances, without building a gradient graph.
    pub fn evaluate_loss(&self, items: &ItemSet, pairs: &[Pair], weights: Option<&[f64]>) -> Result<LossBreakdown<T>> {
        let d = self.pair_distances(items, pairs)?;
        let labels: Vec<i8> = pairs.iter().map(|p| p.label).collect();
        loss_from_distances(&d, &labels, weights, self.c(), self.config.lambda_m)
    }

    /// Batch loss evaluated through the differentiable graph.
    pub fn batch_loss(&self, items: &ItemSet, pairs: &[Pair], weights: Option<&[f64]>) -> Result<LossBreakdown<T>> {
        let batch = PairBatch::new(items, pairs, weights)?;
        LossGraph::new(&self.config, pairs.len())?.evaluate(&self.params, &batch)
    }
}

fn unknown(id: ItemId) -> Error {
    Error::Data(format!("pair references unknown item {id}"))
}

/// Appends the encoder for `x: [rows, pixels]` and returns the
/// `[rows, (k + 1) n]` head output.
pub fn encoder<T: Scalar>(g: &mut Graph<T>, config: &CompatConfig, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, &w) in config.trunk.iter().enumerate() {
        h = dense(g, h, &format!("trunk.{i}"), w, Activation::LeakyRelu)?;
    }
    debug_assert_eq!(g.shape(h)[1], config.trunk_out());
    dense(g, h, "heads", config.head_width(), Activation::Linear)
}

/// Appends the PCD (or L2) distance between query heads `hx` and candidate
/// heads `hy`, both `[rows, (k + 1) n]`; returns `d: [rows]`.
pub fn distance_graph<T: Scalar>(g: &mut Graph<T>, config: &CompatConfig, hx: NodeId, hy: NodeId) -> Result<NodeId> {
    if config.mode == Mode::L2 {
        let diff = g.sub(hx, hy)?;
        return Ok(g.row_sq_norm(diff)?);
    }
    let (rows, n) = (g.shape(hx)[0], config.n);
    let e0y = g.slice_cols(hy, 0, n)?;
    let mut protos = Vec::with_capacity(config.k);
    let mut dmat: Option<NodeId> = None;
    for k in 1..=config.k {
        let p = g.slice_cols(hx, k * n, n)?;
        let diff = g.sub(p, e0y)?;
        let dk = g.row_sq_norm(diff)?;
        let dk = g.reshape(dk, &[rows, 1])?;
        dmat = Some(match dmat {
            None => dk,
            Some(m) => g.concat_cols(m, dk)?,
        });
        protos.push(p);
    }
    let w = g.softmin(dmat.expect("k >= 1"))?;
    let mut mix: Option<NodeId> = None;
    for (j, &p) in protos.iter().enumerate() {
        let wj = g.column(w, j)?;
        let wj = g.broadcast_cols(wj, n)?;
        let term = g.mul(wj, p)?;
        mix = Some(match mix {
            None => term,
            Some(m) => g.add(m, term)?,
        });
    }
    let diff = g.sub(mix.expect("k >= 1"), e0y)?;
    Ok(g.row_sq_norm(diff)?)
}

/// Graph inputs for one batch of pairs.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub w_pos: Tensor<T>,
    pub w_neg: Tensor<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(items: &ItemSet, pairs: &[Pair], weights: Option<&[f64]>) -> Result<Self> {
        let labels: Vec<i8> = pairs.iter().map(|p| p.label).collect();
        let (wp, wn) = label_weights(&labels, weights)?;
        let q: Vec<ItemId> = pairs.iter().map(|p| p.query).collect();
        let c: Vec<ItemId> = pairs.iter().map(|p| p.candidate).collect();
        let b = pairs.len();
        Ok(Self {
            x: items.batch_tensor(&q)?,
            y: items.batch_tensor(&c)?,
            w_pos: Tensor::new(&[b], wp.into_iter().map(T::of).collect())?,
            w_neg: Tensor::new(&[b], wn.into_iter().map(T::of).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.w_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_pos.is_empty()
    }

    pub fn bindings<'a>(&'a self, params: &'a ParamSet<T>) -> Bindings<'a, T> {
        Bindings::new()
            .with("x", &self.x)
            .with("y", &self.y)
            .with("w_pos", &self.w_pos)
            .with("w_neg", &self.w_neg)
            .with_params(params)
    }
}

/// Differentiable loss for a fixed batch size.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub batch: usize,
    pub loss: NodeId,
    pub ce_pos: NodeId,
    pub ce_neg: NodeId,
    pub metric: NodeId,
    pub distance: NodeId,
}

impl<T: Scalar> LossGraph<T> {
    pub fn new(config: &CompatConfig, batch: usize) -> Result<Self> {
        config.validate()?;
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let p = config.input_dim();
        let x = g.input("x", &[batch, p])?;
        let y = g.input("y", &[batch, p])?;
        let wp = g.input("w_pos", &[batch])?;
        let wn = g.input("w_neg", &[batch])?;
        let hx = encoder(&mut g, config, x)?;
        let hy = encoder(&mut g, config, y)?;
        let d = distance_graph(&mut g, config, hx, hy)?;
        let c = g.param("c", &[])?;
        let cb = g.broadcast_scalar(c, &[batch])?;
        let floor = T::of(LOG_FLOOR);

        let logit = g.sub(cb, d)?;
        let pr = g.sigmoid(logit)?;
        let pr = g.max_const(pr, floor)?;
        let log_p = g.log(pr)?;
        let wlp = g.mul(wp, log_p)?;
        let s = g.sum_all(wlp)?;
        let ce_pos = g.neg(s)?;

        let nlogit = g.sub(d, cb)?;
        let qr = g.sigmoid(nlogit)?;
        let qr = g.max_const(qr, floor)?;
        let log_q = g.log(qr)?;
        let wlq = g.mul(wn, log_q)?;
        let s = g.sum_all(wlq)?;
        let ce_neg = g.neg(s)?;

        let wd = g.mul(wp, d)?;
        let metric = g.sum_all(wd)?;
        let ce = g.add(ce_pos, ce_neg)?;
        let reg = g.scale(metric, T::of(config.lambda_m))?;
        let loss = g.add(ce, reg)?;
        g.mark_output("loss", loss);
        Ok(Self {
            graph: g,
            batch,
            loss,
            ce_pos,
            ce_neg,
            metric,
            distance: d,
        })
    }

    fn check(&self, batch: &PairBatch<T>) -> Result<()> {
        if batch.len() != self.batch {
            return Err(invalid(format!(
                "batch of {} for a graph of {}",
                batch.len(),
                self.batch
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, params: &ParamSet<T>, batch: &PairBatch<T>) -> Result<LossBreakdown<T>> {
        self.check(batch)?;
        let v = self.graph.eval(
            &batch.bindings(params),
            &[self.loss, self.ce_pos, self.ce_neg, self.metric],
        )?;
        let s = |i: usize| v[i].item().expect("scalar");
        Ok(LossBreakdown {
            total: s(0),
            ce_pos: s(1),
            ce_neg: s(2),
            metric: s(3),
            has_positive: batch.w_pos.data().iter().any(|&w| w > T::zero()),
            has_negative: batch.w_neg.data().iter().any(|&w| w > T::zero()),
        })
    }

    pub fn value_and_grad(&mut self, params: &ParamSet<T>, batch: &PairBatch<T>) -> Result<(T, ParamSet<T>)> {
        self.check(batch)?;
        let bindings = batch.bindings(params);
        Ok(self.graph.value_and_backward(self.loss, &bindings)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemSet, ItemShape};

    fn tiny_config(mode: Mode, k: usize, n: usize) -> CompatConfig {
        let mut c = CompatConfig::new(mode, k, n, ItemShape::new(2, 4));
        c.trunk = vec![6, 5];
        c
    }

    fn image(seed: u64) -> Vec<f64> {
        (0..8)
            .map(|i| ((i as u64 * 7 + seed * 13) % 11) as f64 / 10.0)
            .collect()
    }

    #[test]
    fn family_shapes() {
        let m = CompatModel::<f64>::new(tiny_config(Mode::Pcd, 2, 3), 0).unwrap();
        let f = m.encode_family(&image(1)).unwrap();
        assert_eq!(f.e0.len(), 3);
        assert_eq!(f.k(), 2);
        assert_eq!(f.prototypes.len(), 6);
        assert_eq!(m.encode_family(&image(1)).unwrap(), f);

        let l2 = CompatModel::<f64>::new(tiny_config(Mode::L2, 2, 3), 0).unwrap();
        let f = l2.encode_family(&image(1)).unwrap();
        assert_eq!((f.n(), f.k()), (9, 1));
    }

    #[test]
    fn shared_trunk_perturbation_moves_every_head() {
        let mut m = CompatModel::<f64>::new(tiny_config(Mode::Pcd, 3, 2), 4).unwrap();
        let x = image(2);
        let before = m.encode_family(&x).unwrap();
        let w = m.params_mut().get_mut("trunk.0.w").unwrap();
        for v in w.data_mut().iter_mut().step_by(6) {
            *v += 0.1;
        }
        let after = m.encode_family(&x).unwrap();
        assert_ne!(before.e0, after.e0);
        for j in 0..3 {
            assert_ne!(before.prototype(j), after.prototype(j), "prototype {j}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = CompatModel::<f64>::new(tiny_config(Mode::Pcd, 2, 3), 0).unwrap();
        assert!(matches!(m.encode_family(&[0.0; 5]), Err(Error::Mismatch(_))));
    }

    #[test]
    fn pcd_examples() {
        let p = pcd(&[0.0f64, 10.0], &[0.0]);
        assert_eq!(p.d_k, vec![0.0, 100.0]);
        assert!(p.d.abs() < 1e-30);
        let p = pcd(&[1.0f64, -1.0], &[0.0]);
        assert_eq!(p.w, vec![0.5, 0.5]);
        assert_eq!(p.d, 0.0);
        assert!(p.d < p.d_k[0].min(p.d_k[1]));
        let p = pcd(&[0.3f64, -1.2, 2.0], &[1.0, 0.5, -0.25]);
        assert_eq!(p.d, p.d_k[0]);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(pair_probability(1.7, 1.7), 0.5);
        assert_eq!(pair_probability(1e6, 0.0), 0.0);
        let c = 3.0f64;
        assert!((pair_probability(c - 3f64.ln(), c) - 0.75).abs() < 1e-15);
        assert!(pair_probability(1.0, 0.0) > pair_probability(1.5, 0.0));
    }

    #[test]
    fn loss_from_distances_examples() {
        let l = loss_from_distances(&[2.0f64, 2.0, 2.0], &[1, -1, 1], None, 2.0, 0.0).unwrap();
        assert!((l.total - std::f64::consts::LN_2 * 2.0).abs() < 1e-15);
        let l = loss_from_distances(&[2.0f64], &[1], None, 2.0, 0.5).unwrap();
        assert!((l.total - 1.693_147_180_559_945).abs() < 1e-12);
        assert!(l.has_positive && !l.has_negative);
        let l = loss_from_distances(&[0.0f64, 80.0], &[1, -1], None, 40.0, 0.0).unwrap();
        assert!(l.total < 1e-15);
        assert!(loss_from_distances::<f64>(&[], &[], None, 0.0, 0.0).is_err());
    }

    /// A model whose heads ignore the input: zero head weights, chosen biases.
    fn constant_model(mode: Mode, head_bias: Vec<f64>, c: f64, lambda_m: f64) -> CompatModel<f64> {
        let mut cfg = tiny_config(mode, 1, 1);
        cfg.lambda_m = lambda_m;
        let mut m = CompatModel::new(cfg, 0).unwrap();
        let p = m.params_mut();
        p.get_mut("heads.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        p.insert("heads.b", Tensor::new(&[2], head_bias).unwrap());
        p.insert("c", Tensor::scalar(c));
        m
    }

    fn two_items() -> ItemSet {
        ItemSet::new(
            ItemShape::new(2, 4),
            2,
            [image(0), image(1)].concat(),
            vec![0, 1],
            vec![10, 11],
        )
        .unwrap()
    }

    #[test]
    fn graph_loss_matches_arithmetic() {
        // E_0 = 0 and E_1 = sqrt(2), so d = 2.
        let m = constant_model(Mode::Pcd, vec![0.0, 2f64.sqrt()], 2.0, 0.5);
        let pairs = [Pair {
            query: 10,
            candidate: 11,
            label: 1,
        }];
        let l = m.batch_loss(&two_items(), &pairs, None).unwrap();
        assert!((l.total - (2f64.ln() + 1.0)).abs() < 1e-12, "{}", l.total);
        assert!(l.has_positive && !l.has_negative);
        assert_eq!(l.ce_neg, 0.0);

        let m = constant_model(Mode::Pcd, vec![0.0, 1.0], 1.0, 0.0);
        let pairs = [
            Pair {
                query: 10,
                candidate: 11,
                label: 1,
            },
            Pair {
                query: 11,
                candidate: 10,
                label: -1,
            },
        ];
        let l = m.batch_loss(&two_items(), &pairs, None).unwrap();
        assert!((l.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let plain = m.evaluate_loss(&two_items(), &pairs, None).unwrap();
        assert!((plain.total - l.total).abs() < 1e-12);
    }

    #[test]
    fn from_parts_rejects_mismatch() {
        let m = CompatModel::<f64>::new(tiny_config(Mode::Pcd, 2, 3), 0).unwrap();
        let other = tiny_config(Mode::Pcd, 3, 3);
        assert!(matches!(
            CompatModel::from_parts(other, m.params().clone()),
            Err(Error::Mismatch(_))
        ));
        let mut missing = m.params().clone();
        missing.insert("extra", Tensor::scalar(0.0));
        assert!(CompatModel::from_parts(m.config().clone(), missing).is_err());
        assert!(CompatModel::from_parts(m.config().clone(), m.params().clone()).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(Mode::Pcd, 0, 3);
        assert!(c.validate().is_err());
        c.k = 1;
        c.lambda_m = -1.0;
        assert!(c.validate().is_err());
        c.lambda_m = 0.5;
        c.n = 0;
        assert!(c.validate().is_err());
    }
}
