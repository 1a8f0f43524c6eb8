//! Adam and the discriminative training loop.

use std::collections::HashMap;

use cfam_autodiff::{GraphError, ParamSet, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compat::{CompatModel, LossGraph, PairBatch};
use crate::data::{check_disjoint, ItemSet, Pair, PairSet};
use crate::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::eval::auc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("{name} {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: ParamSet<T> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the moments line up with `params`.
    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        params.len() == self.m.len()
            && params.len() == self.v.len()
            && params.iter().all(|(n, p)| {
                self.m.get(n).is_some_and(|t| t.shape() == p.shape())
                    && self.v.get(n).is_some_and(|t| t.shape() == p.shape())
            })
    }
}

/// One bias-corrected Adam update of every parameter. Nothing is modified
/// when a gradient is missing, misshapen or non-finite.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    config: &AdamConfig,
) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Mismatch("optimizer state does not match parameters".into()));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Mismatch(format!("gradient shape for `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let one = T::one();
    let c1 = one - b1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = one - b2.powi(state.t.min(i32::MAX as u64) as i32);
    let (lr, eps) = (T::of(config.learning_rate), T::of(config.epsilon));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked").data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 100,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
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
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

/// Training and validation splits, with optional per-pair training weights.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train_items: &'a ItemSet,
    pub train_pairs: &'a PairSet,
    pub val_items: &'a ItemSet,
    pub val_pairs: &'a PairSet,
    pub weights: Option<&'a [f64]>,
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.train_pairs.is_empty() || self.val_pairs.is_empty() {
            return Err(Error::Data("training and validation pairs must be non-empty".into()));
        }
        check_disjoint(&[self.train_items, self.val_items])?;
        self.train_pairs.validate_against(self.train_items)?;
        self.val_pairs.validate_against(self.val_items)?;
        if let Some(w) = self.weights {
            if w.len() != self.train_pairs.len() {
                return Err(invalid(format!(
                    "{} weights for {} pairs",
                    w.len(),
                    self.train_pairs.len()
                )));
            }
        }
        Ok(())
    }
}

/// State carried over from an earlier run.
#[derive(Clone, Debug)]
pub struct Resume<T> {
    pub adam: AdamState<T>,
    pub epochs_done: usize,
    /// Best validation loss seen so far and its epoch.
    pub best: Option<(f64, usize)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Model of the earliest epoch with minimum validation loss in this run;
    /// the starting model when no epoch of this run improved on `Resume::best`.
    pub best: CompatModel<T>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Whether `best` comes from this run.
    pub improved: bool,
    /// Model after the last finite epoch.
    pub last: CompatModel<T>,
    pub adam: AdamState<T>,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: bool,
}

/// Validation loss and AUC (ranking by `-d`).
pub fn validate_model<T: Scalar>(model: &CompatModel<T>, items: &ItemSet, pairs: &[Pair]) -> Result<(f64, f64)> {
    let d = model.pair_distances(items, pairs)?;
    let labels: Vec<i8> = pairs.iter().map(|p| p.label).collect();
    let loss = crate::compat::loss_from_distances(&d, &labels, None, model.c(), model.config().lambda_m)?;
    let scores: Vec<f64> = d.iter().map(|v| -v.as_f64()).collect();
    let a = match auc(&scores, &labels) {
        Ok(v) => v,
        Err(Error::SingleClass) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((loss.total.as_f64(), a))
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteGradient(_) | Error::Graph(GraphError::NonFinite { .. })
    )
}

/// Mini-batch Adam on the pair loss with best-epoch selection on validation
/// loss. The shuffle of epoch `e` depends only on `(seed, e)`.
pub fn train_compat<T: Scalar>(
    model: CompatModel<T>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    resume: Option<Resume<T>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    data.validate()?;
    let (mut adam, start, prior_best) = match resume {
        Some(r) => (r.adam, r.epochs_done, r.best),
        None => (AdamState::new(model.params()), 0, None),
    };
    if !adam.matches(model.params()) {
        return Err(Error::Mismatch("optimizer state does not match the model".into()));
    }
    let adam_config = config.adam();
    let pairs = &data.train_pairs.pairs;
    let mut graphs: HashMap<usize, LossGraph<T>> = HashMap::new();
    let mut current = model;
    let mut best = current.clone();
    let mut best_val = prior_best;
    let mut improved = false;
    let mut history = Vec::new();
    let mut diverged = false;
    let mut epochs_done = start;

    'epochs: for epoch in start + 1..=start + config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        let snapshot = (current.clone(), adam.clone());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_pairs: Vec<Pair> = chunk.iter().map(|&i| pairs[i]).collect();
            let w: Option<Vec<f64>> = data.weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
            let batch = PairBatch::new(data.train_items, &batch_pairs, w.as_deref())?;
            let graph = match graphs.entry(chunk.len()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(LossGraph::new(current.config(), chunk.len())?)
                }
            };
            let step = graph
                .value_and_grad(current.params(), &batch)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteGradient("loss".into()));
                    }
                    adam_step(&mut adam, current.params_mut(), &grads, &adam_config)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => loss_sum += loss.as_f64() * chunk.len() as f64,
                Err(e) if is_divergence(&e) => {
                    (current, adam) = snapshot;
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_auc) = match validate_model(&current, data.val_items, &data.val_pairs.pairs) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) => {
                (current, adam) = snapshot;
                diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                (current, adam) = snapshot;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            val_loss,
            val_auc,
        });
        epochs_done = epoch;
        if best_val.is_none_or(|(b, _)| val_loss < b) {
            best_val = Some((val_loss, epoch));
            best = current.clone();
            improved = true;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: best_val.map(|b| b.1),
        best_val_loss: best_val.map(|b| b.0),
        improved,
        last: current,
        adam,
        epochs_done,
        history,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamSet<f64> {
        let n = v.len();
        [("p".to_string(), Tensor::new(&[n], v).unwrap())].into_iter().collect()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = one_param(vec![0.5, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut s, &mut p, &one_param(vec![0.0, 0.0]), &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = one_param(vec![1.0, 1.0, 1.0]);
        let mut s = AdamState::new(&p);
        let g = [3.0, -0.25, 40.0];
        adam_step(&mut s, &mut p, &one_param(g.to_vec()), &cfg).unwrap();
        for (v, gi) in p.get("p").unwrap().data().iter().zip(g) {
            let expected = 1.0 - cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((v - expected).abs() < 1e-15);
            assert!(((1.0 - v).abs() - cfg.learning_rate).abs() < 1e-7);
        }
    }

    #[test]
    fn opposite_signs_move_symmetrically() {
        let mut p = one_param(vec![0.0, 0.0]);
        let mut s = AdamState::new(&p);
        for step in 0..4 {
            let g = 0.7 + step as f64;
            adam_step(&mut s, &mut p, &one_param(vec![g, -g]), &AdamConfig::default()).unwrap();
            let d = p.get("p").unwrap().data();
            assert_eq!(d[0], -d[1]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = one_param(vec![1.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut s, &mut p, &one_param(vec![f64::NAN]), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.batch_size = 10;
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        c.beta1 = 0.9;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
