//! Bag scoring, the pairwise ranking hinge loss, empirical risk, and the
//! pair-sampling training loop.
//!
//! A bag's score is the maximum score of its instances; the instance that
//! attains it is the bag's witness. Training repeatedly samples one positive
//! and one negative bag, evaluates the hinge on the two bag scores, and
//! backpropagates through each bag's witness only — the exact subgradient of
//! the max. The loss depends only on the score difference, so turning scores
//! into class predictions needs a learned threshold, not zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureStats;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{
    backward_instance, forward_instance, init_params, ForwardCache, ModelSpec, Parameters,
};
use crate::tensor::Tensor;

/// Bag label: positive bags contain at least one positive instance,
/// negative bags contain none (which instances are positive is unobserved).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BagLabel {
    Positive,
    Negative,
}

impl BagLabel {
    pub fn from_int(v: i64) -> Result<BagLabel> {
        match v {
            1 => Ok(BagLabel::Positive),
            -1 => Ok(BagLabel::Negative),
            other => Err(Error::Input(format!(
                "bag label must be 1 or -1, got {other}"
            ))),
        }
    }

    pub fn as_int(self) -> i64 {
        match self {
            BagLabel::Positive => 1,
            BagLabel::Negative => -1,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, BagLabel::Positive)
    }
}

/// A labeled group of instances sharing one shape. The unit of supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    label: BagLabel,
    instances: Vec<Tensor>,
}

impl Bag {
    /// Builds a bag, enforcing that it is nonempty and shape-consistent.
    pub fn new(id: impl Into<String>, label: BagLabel, instances: Vec<Tensor>) -> Result<Bag> {
        let id = id.into();
        if instances.is_empty() {
            return Err(Error::Input(format!("bag {id:?} has no instances")));
        }
        let shape = instances[0].shape().to_vec();
        if let Some(bad) = instances.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Input(format!(
                "bag {id:?} mixes instance shapes {:?} and {:?}",
                shape,
                bad.shape()
            )));
        }
        Ok(Bag {
            id,
            label,
            instances,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> BagLabel {
        self.label
    }

    pub fn instances(&self) -> &[Tensor] {
        &self.instances
    }

    pub fn instance_shape(&self) -> &[usize] {
        self.instances[0].shape()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced nonempty at construction
    }
}

/// Every loop/optimizer hyperparameter, made explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Bag pairs sampled per epoch.
    pub pairs_per_epoch: usize,
    /// Epoch count; 0 leaves the initial parameters untouched.
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: momentum 0.9, no weight decay, pairs_per_epoch =
    /// max(|positives|, |negatives|). Vector models run 200 epochs at
    /// learning rate 1e-3; the CNN runs 30 epochs at 1e-2 (with the shorter
    /// epoch budget, the smaller rate leaves it stuck near its
    /// initialization).
    pub fn defaults_for(spec: &ModelSpec, n_pos: usize, n_neg: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            pairs_per_epoch: n_pos.max(n_neg).max(1),
            epochs: if spec.is_image_input() { 30 } else { 200 },
            learning_rate: if spec.is_image_input() { 1e-2 } else { 1e-3 },
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_epoch == 0 {
            return Err(Error::Input("pairs_per_epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Input("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A trained scorer plus everything needed to apply it to raw bags: optional
/// feature normalization statistics and the learned classification cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub theta: Parameters,
    pub feature_stats: Option<FeatureStats>,
    pub threshold: f64,
}

impl TrainedModel {
    /// Scores a raw bag, applying the stored normalization first.
    pub fn score_bag(&self, bag: &Bag) -> Result<(f64, usize)> {
        match &self.feature_stats {
            Some(stats) => bag_score(&self.spec, &self.theta, &stats.normalize_bag(bag)?),
            None => bag_score(&self.spec, &self.theta, bag),
        }
    }

    /// Per-instance scores for a raw bag; their max is the bag score.
    pub fn score_instances(&self, bag: &Bag) -> Result<Vec<f64>> {
        match &self.feature_stats {
            Some(stats) => score_instances(&self.spec, &self.theta, &stats.normalize_bag(bag)?),
            None => score_instances(&self.spec, &self.theta, bag),
        }
    }

    /// Classification rule: score strictly above the threshold is positive.
    pub fn predict(&self, score: f64) -> BagLabel {
        if score > self.threshold {
            BagLabel::Positive
        } else {
            BagLabel::Negative
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<TrainedModel> {
        let model: TrainedModel = serde_json::from_str(text)?;
        if model.theta.len() != model.spec.num_params() {
            return Err(Error::Input(format!(
                "model file carries {} parameters but {:?} needs {}",
                model.theta.len(),
                model.spec,
                model.spec.num_params()
            )));
        }
        if !model.threshold.is_finite() {
            return Err(Error::Input("model threshold is not finite".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<TrainedModel> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io_at(path.as_ref(), e))?;
        TrainedModel::from_json(&text)
    }
}

/// Bag score: the maximum instance score, with the witness index (first
/// occurrence on ties).
pub fn bag_score(spec: &ModelSpec, theta: &Parameters, bag: &Bag) -> Result<(f64, usize)> {
    let (score, witness, _) = bag_score_cached(spec, theta, bag)?;
    Ok((score, witness))
}

/// Per-instance scores f(x_i; theta) for one bag.
pub fn score_instances(spec: &ModelSpec, theta: &Parameters, bag: &Bag) -> Result<Vec<f64>> {
    bag.instances()
        .iter()
        .map(|x| forward_instance(spec, theta, x).map(|(s, _)| s))
        .collect()
}

/// Like [`bag_score`] but also returns the witness's forward cache so the
/// caller can backpropagate through it.
fn bag_score_cached(
    spec: &ModelSpec,
    theta: &Parameters,
    bag: &Bag,
) -> Result<(f64, usize, ForwardCache)> {
    if bag.instances().is_empty() {
        return Err(Error::Input(format!("bag {:?} is empty", bag.id())));
    }
    let mut best: Option<(f64, usize, ForwardCache)> = None;
    for (i, x) in bag.instances().iter().enumerate() {
        let (s, cache) = forward_instance(spec, theta, x)?;
        match &best {
            Some((bs, _, _)) if s <= *bs => {}
            _ => best = Some((s, i, cache)),
        }
    }
    Ok(best.expect("bag checked nonempty"))
}

/// Ranking hinge on a (positive, negative) bag-score pair:
/// max{0, 1 - 2*(s_pos - s_neg)}. Zero exactly when the positive bag leads
/// by a margin of at least 1/2.
pub fn pair_loss(s_pos: f64, s_neg: f64) -> f64 {
    (1.0 - 2.0 * (s_pos - s_neg)).max(0.0)
}

/// Subgradient of [`pair_loss`]: (-2, +2) while the hinge is active, (0, 0)
/// otherwise, including at the kink itself.
pub fn pair_loss_grad(s_pos: f64, s_neg: f64) -> (f64, f64) {
    if 1.0 - 2.0 * (s_pos - s_neg) > 0.0 {
        (-2.0, 2.0)
    } else {
        (0.0, 0.0)
    }
}

/// Sum of the pair loss over every (positive, negative) bag pair.
pub fn empirical_risk(spec: &ModelSpec, theta: &Parameters, bags: &[Bag]) -> Result<f64> {
    let mut pos_scores = Vec::new();
    let mut neg_scores = Vec::new();
    for bag in bags {
        let (s, _) = bag_score(spec, theta, bag)?;
        match bag.label() {
            BagLabel::Positive => pos_scores.push(s),
            BagLabel::Negative => neg_scores.push(s),
        }
    }
    if pos_scores.is_empty() {
        return Err(Error::Input("bag set contains no positive bags".into()));
    }
    if neg_scores.is_empty() {
        return Err(Error::Input("bag set contains no negative bags".into()));
    }
    let mut risk = 0.0;
    for &sp in &pos_scores {
        for &sn in &neg_scores {
            risk += pair_loss(sp, sn);
        }
    }
    Ok(risk)
}

/// One evaluated (positive, negative) bag pair: scores, witnesses, the hinge
/// value, and — when the hinge is active — the full parameter gradient.
#[derive(Debug, Clone)]
pub struct PairStep {
    pub s_pos: f64,
    pub s_neg: f64,
    pub witness_pos: usize,
    pub witness_neg: usize,
    pub loss: f64,
    /// None when the hinge is inactive (zero gradient).
    pub grad: Option<Vec<f64>>,
}

/// Evaluates the pair loss and its parameter gradient for one bag pair.
/// Gradient flows through both bags' witness instances.
pub fn pair_step(
    spec: &ModelSpec,
    theta: &Parameters,
    positive: &Bag,
    negative: &Bag,
) -> Result<PairStep> {
    let (s_pos, witness_pos, cache_pos) = bag_score_cached(spec, theta, positive)?;
    let (s_neg, witness_neg, cache_neg) = bag_score_cached(spec, theta, negative)?;
    let loss = pair_loss(s_pos, s_neg);
    let (dpos, dneg) = pair_loss_grad(s_pos, s_neg);
    let grad = if dpos != 0.0 {
        let mut g = backward_instance(spec, theta, &cache_pos, dpos)?;
        let gn = backward_instance(spec, theta, &cache_neg, dneg)?;
        for (a, b) in g.iter_mut().zip(&gn) {
            *a += b;
        }
        Some(g)
    } else {
        None
    };
    Ok(PairStep {
        s_pos,
        s_neg,
        witness_pos,
        witness_neg,
        loss,
        grad,
    })
}

/// Trains a model by SGD with momentum over randomly sampled bag pairs.
///
/// Each of `epochs * pairs_per_epoch` iterations samples one positive and one
/// negative bag uniformly with replacement from a seeded generator, evaluates
/// the hinge on the two bag scores, and — when active — backpropagates through
/// the two witness instances. The velocity/weight-decay update runs every
/// iteration. The returned model's threshold maximizes accuracy on the
/// training bag scores; `feature_stats` is left empty (callers that normalize
/// attach their statistics).
pub fn train(bags: &[Bag], spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let pos: Vec<&Bag> = bags.iter().filter(|b| b.label().is_positive()).collect();
    let neg: Vec<&Bag> = bags.iter().filter(|b| !b.label().is_positive()).collect();
    if pos.is_empty() {
        return Err(Error::Input("training set contains no positive bags".into()));
    }
    if neg.is_empty() {
        return Err(Error::Input("training set contains no negative bags".into()));
    }

    let mut theta = init_params(spec, cfg.seed);
    let mut velocity = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 0..cfg.epochs {
        for step in 0..cfg.pairs_per_epoch {
            let iteration = epoch * cfg.pairs_per_epoch + step;
            let p = pos[rng.random_range(0..pos.len())];
            let n = neg[rng.random_range(0..neg.len())];
            let eval = pair_step(spec, &theta, p, n)?;
            // NaN scores would read as zero loss (max(0, NaN) is 0), so the
            // scores are checked directly.
            if !(eval.loss.is_finite() && eval.s_pos.is_finite() && eval.s_neg.is_finite()) {
                return Err(Error::Divergence {
                    iteration,
                    message: format!(
                        "bag scores {} / {} (bags {:?}, {:?})",
                        eval.s_pos,
                        eval.s_neg,
                        p.id(),
                        n.id()
                    ),
                });
            }
            let t = theta.theta_mut();
            match &eval.grad {
                Some(g) => {
                    for i in 0..t.len() {
                        let step_grad = g[i] + cfg.weight_decay * t[i];
                        velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * step_grad;
                        t[i] += velocity[i];
                    }
                }
                None => {
                    // Inactive hinge: loss gradient is zero, but momentum and
                    // weight decay still act.
                    for i in 0..t.len() {
                        let step_grad = cfg.weight_decay * t[i];
                        velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * step_grad;
                        t[i] += velocity[i];
                    }
                }
            }
        }
    }

    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for bag in bags {
        let (s, _) = bag_score(spec, &theta, bag)?;
        if !s.is_finite() {
            return Err(Error::Divergence {
                iteration: cfg.epochs * cfg.pairs_per_epoch,
                message: format!("final score of bag {:?} is {s}", bag.id()),
            });
        }
        scores.push(s);
        labels.push(bag.label());
    }
    let threshold = eval::select_threshold(&scores, &labels)?;

    Ok(TrainedModel {
        spec: *spec,
        theta,
        feature_stats: None,
        threshold,
    })
}
