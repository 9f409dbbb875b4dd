//! Self-adversarial negative-sampling training with plain SGD.
//!
//! Per positive triple with distance `d⁺` and negatives with distances `d⁻_j`:
//!
//! ```text
//! L⁺ = -log σ(γ - d⁺)
//! L⁻ = -Σ_j w_j · log σ(d⁻_j - γ),   w = softmax(α · (γ - d⁻))
//! ```
//!
//! The batch loss is `(mean L⁺ + mean L⁻) / 2`. The weights `w` are treated
//! as constants when differentiating.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RetrieverError, RetrieverModel};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::seed;

/// Maximum redraws for a corruption that lands on a known train triple.
const MAX_REJECTIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub gamma: f64,
    pub adversarial_temperature: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            batch_size: 256,
            negatives_per_positive: 64,
            gamma: 6.0,
            adversarial_temperature: 1.0,
            learning_rate: 0.5,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        let bad = |what: &str| Err(RetrieverError::InvalidConfig(what.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be positive");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.adversarial_temperature.is_finite() && self.adversarial_temperature >= 0.0) {
            return bad("adversarial_temperature must be non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// A freshly initialized model sized for `kg`.
    pub fn init_model(&self, kg: &KnowledgeGraph) -> RetrieverModel {
        RetrieverModel::init(kg.num_entities(), kg.num_relations(), self.dim, self.gamma, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Worst relation modulus deviation seen after any step.
    pub max_modulus_deviation: f64,
}

/// One positive triple with its corruptions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub positive: Triple,
    pub negatives: Vec<Triple>,
}

/// Sparse gradient over the rows touched by a batch.
#[derive(Debug, Clone, Default)]
pub struct Gradient {
    dim: usize,
    entity_slot: BTreeMap<u32, usize>,
    entity_re: Vec<f64>,
    entity_im: Vec<f64>,
    relation_slot: BTreeMap<u32, usize>,
    phase: Vec<f64>,
}

impl Gradient {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    fn entity_offset(&mut self, e: EntityId) -> usize {
        let next = self.entity_slot.len();
        let slot = *self.entity_slot.entry(e.0).or_insert(next);
        if slot == next {
            self.entity_re.resize((next + 1) * self.dim, 0.0);
            self.entity_im.resize((next + 1) * self.dim, 0.0);
        }
        slot * self.dim
    }

    fn relation_offset(&mut self, r: RelationId) -> usize {
        let next = self.relation_slot.len();
        let slot = *self.relation_slot.entry(r.0).or_insert(next);
        if slot == next {
            self.phase.resize((next + 1) * self.dim, 0.0);
        }
        slot * self.dim
    }

    /// `(∂/∂re, ∂/∂im)` for an entity, `None` if untouched.
    pub fn entity(&self, e: EntityId) -> Option<(&[f64], &[f64])> {
        self.entity_slot.get(&e.0).map(|&s| {
            let o = s * self.dim;
            (&self.entity_re[o..o + self.dim], &self.entity_im[o..o + self.dim])
        })
    }

    pub fn relation(&self, r: RelationId) -> Option<&[f64]> {
        self.relation_slot.get(&r.0).map(|&s| {
            let o = s * self.dim;
            &self.phase[o..o + self.dim]
        })
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    let z = -x;
    -(z.max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RetrieverModel {
    /// Self-adversarial weights `softmax(α · (γ - d⁻))` over a sample's negatives.
    pub fn adversarial_weights(&self, sample: &Sample, temperature: f64) -> Vec<f64> {
        let logits: Vec<f64> = sample
            .negatives
            .iter()
            .map(|&n| temperature * (self.gamma - self.distance(n)))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    /// Batch loss with caller-supplied negative weights.
    pub fn batch_loss_with_weights(&self, samples: &[Sample], weights: &[Vec<f64>]) -> f64 {
        let b = samples.len() as f64;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (s, w) in samples.iter().zip(weights) {
            pos -= log_sigmoid(self.gamma - self.distance(s.positive));
            for (&n, &wj) in s.negatives.iter().zip(w) {
                neg -= wj * log_sigmoid(self.distance(n) - self.gamma);
            }
        }
        0.5 * (pos / b + neg / b)
    }

    pub fn batch_loss(&self, samples: &[Sample], temperature: f64) -> f64 {
        let weights: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| self.adversarial_weights(s, temperature))
            .collect();
        self.batch_loss_with_weights(samples, &weights)
    }

    /// Adds `upstream · ∂d(t)/∂θ` into `grad`.
    fn accumulate_distance_grad(&self, grad: &mut Gradient, t: Triple, trig: &[(f64, f64)], upstream: f64) {
        let dim = self.dim;
        let ho = grad.entity_offset(t.head);
        let to = grad.entity_offset(t.tail);
        let ro = grad.relation_offset(t.relation);
        let (hr, hi) = self.entity(t.head);
        let (tr, ti) = self.entity(t.tail);
        for k in 0..dim {
            let (s, c) = trig[k];
            let rot_r = hr[k] * c - hi[k] * s;
            let rot_i = hr[k] * s + hi[k] * c;
            let zr = rot_r - tr[k];
            let zi = rot_i - ti[k];
            let norm = (zr * zr + zi * zi).sqrt();
            if norm <= 1e-12 {
                continue;
            }
            let ur = upstream * zr / norm;
            let ui = upstream * zi / norm;
            grad.entity_re[ho + k] += ur * c + ui * s;
            grad.entity_im[ho + k] += -ur * s + ui * c;
            grad.entity_re[to + k] -= ur;
            grad.entity_im[to + k] -= ui;
            // ∂rot/∂θ = (-rot_i, rot_r)
            grad.phase[ro + k] += -ur * rot_i + ui * rot_r;
        }
    }

    /// Loss and its gradient with the adversarial weights held constant.
    pub fn batch_gradient(&self, samples: &[Sample], temperature: f64) -> (f64, Gradient) {
        let mut grad = Gradient::new(self.dim);
        let b = samples.len() as f64;
        let mut pos_loss = 0.0;
        let mut neg_loss = 0.0;
        for s in samples {
            let trig = self.trig(s.positive.relation);
            let dp = self.distance_with(s.positive.head, &trig, s.positive.tail);
            pos_loss -= log_sigmoid(self.gamma - dp);
            // d/dd⁺ of -log σ(γ - d⁺)
            let gp = 0.5 / b * (1.0 - sigmoid(self.gamma - dp));
            self.accumulate_distance_grad(&mut grad, s.positive, &trig, gp);

            let dn: Vec<f64> = s
                .negatives
                .iter()
                .map(|n| {
                    if n.relation == s.positive.relation {
                        self.distance_with(n.head, &trig, n.tail)
                    } else {
                        self.distance(*n)
                    }
                })
                .collect();
            let logits: Vec<f64> = dn.iter().map(|d| temperature * (self.gamma - d)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            for ((&n, &d), e) in s.negatives.iter().zip(&dn).zip(&exp) {
                let w = e / total;
                neg_loss -= w * log_sigmoid(d - self.gamma);
                // d/dd⁻ of -w log σ(d⁻ - γ)
                let gn = -0.5 / b * w * (1.0 - sigmoid(d - self.gamma));
                if n.relation == s.positive.relation {
                    self.accumulate_distance_grad(&mut grad, n, &trig, gn);
                } else {
                    let t2 = self.trig(n.relation);
                    self.accumulate_distance_grad(&mut grad, n, &t2, gn);
                }
            }
        }
        (0.5 * (pos_loss / b + neg_loss / b), grad)
    }

    /// `θ ← θ - lr · g` on every touched row.
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) {
        let dim = self.dim;
        let (er, ei, ph) = self.params_mut();
        for (&e, &slot) in &grad.entity_slot {
            let (p, g) = (e as usize * dim, slot * dim);
            for k in 0..dim {
                er[p + k] -= lr * grad.entity_re[g + k];
                ei[p + k] -= lr * grad.entity_im[g + k];
            }
        }
        for (&r, &slot) in &grad.relation_slot {
            let (p, g) = (r as usize * dim, slot * dim);
            for k in 0..dim {
                ph[p + k] -= lr * grad.phase[g + k];
            }
        }
    }
}

fn sample_batch(kg: &KnowledgeGraph, positives: &[Triple], config: &TrainConfig, rng: &mut seed::Rng) -> Vec<Sample> {
    let n = kg.num_entities() as u32;
    (0..config.batch_size)
        .map(|_| {
            let positive = positives[rng.random_range(0..positives.len())];
            let corrupt_head = rng.random_bool(0.5);
            let negatives = (0..config.negatives_per_positive)
                .map(|_| {
                    let mut cand = positive;
                    for _ in 0..MAX_REJECTIONS {
                        let e = EntityId(rng.random_range(0..n));
                        cand = if corrupt_head {
                            Triple::new(e, positive.relation, positive.tail)
                        } else {
                            Triple::new(positive.head, positive.relation, e)
                        };
                        if !kg.is_train_triple(&cand) {
                            break;
                        }
                    }
                    cand
                })
                .collect();
            Sample { positive, negatives }
        })
        .collect()
}

/// Trains `model` in place on the train split of `kg`.
pub fn train(
    model: &mut RetrieverModel,
    kg: &KnowledgeGraph,
    config: &TrainConfig,
) -> Result<TrainingReport, RetrieverError> {
    config.validate()?;
    if model.num_entities() != kg.num_entities() || model.num_relations() != kg.num_relations() {
        return Err(RetrieverError::ShapeMismatch {
            model_entities: model.num_entities(),
            model_relations: model.num_relations(),
            kg_entities: kg.num_entities(),
            kg_relations: kg.num_relations(),
        });
    }
    if config.dim != model.dim() {
        return Err(RetrieverError::InvalidConfig(format!(
            "config dim {} differs from model dim {}",
            config.dim,
            model.dim()
        )));
    }
    let mut report = TrainingReport {
        steps: config.steps,
        losses: Vec::with_capacity(config.steps),
        max_modulus_deviation: model.max_modulus_deviation(),
    };
    if config.steps == 0 {
        return Ok(report);
    }
    let positives = kg.split(Split::Train);
    if positives.is_empty() {
        return Err(RetrieverError::NoTrainingData);
    }
    let mut rng = seed::substream(config.seed, seed::TRAINING);
    for step in 0..config.steps {
        let batch = sample_batch(kg, positives, config, &mut rng);
        let (loss, grad) = model.batch_gradient(&batch, config.adversarial_temperature);
        if !loss.is_finite() {
            return Err(RetrieverError::NonFiniteLoss { step, loss });
        }
        model.apply_gradient(&grad, config.learning_rate);
        if !model.all_finite() {
            return Err(RetrieverError::NonFiniteLoss { step, loss: f64::NAN });
        }
        report.max_modulus_deviation = report.max_modulus_deviation.max(model.max_modulus_deviation());
        report.losses.push(loss);
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::synthetic;

    fn micro_model(seed: u64) -> RetrieverModel {
        RetrieverModel::init(3, 2, 4, 2.0, seed)
    }

    fn micro_samples() -> Vec<Sample> {
        let t = |h, r, t| Triple::new(EntityId(h), RelationId(r), EntityId(t));
        vec![
            Sample {
                positive: t(0, 0, 1),
                negatives: vec![t(0, 0, 2), t(2, 0, 1), t(0, 0, 0)],
            },
            Sample {
                positive: t(1, 1, 2),
                negatives: vec![t(1, 1, 0), t(0, 1, 2)],
            },
        ]
    }

    /// Central differences of `f` against the analytic gradient for every parameter.
    fn check_gradient(model: &RetrieverModel, grad: &Gradient, f: impl Fn(&RetrieverModel) -> f64) {
        let h = 1e-6;
        let dim = model.dim();
        let (er, ei, ph) = model.params();
        let mut worst: f64 = 0.0;
        let mut compare = |analytic: f64, numeric: f64| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / scale);
        };
        for which in 0..3 {
            let len = [er.len(), ei.len(), ph.len()][which];
            for i in 0..len {
                let mut plus = model.clone();
                let mut minus = model.clone();
                {
                    let p = plus.params_mut();
                    [p.0, p.1, p.2][which][i] += h;
                }
                {
                    let m = minus.params_mut();
                    [m.0, m.1, m.2][which][i] -= h;
                }
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let row = (i / dim) as u32;
                let k = i % dim;
                let analytic = match which {
                    0 => grad.entity(EntityId(row)).map_or(0.0, |g| g.0[k]),
                    1 => grad.entity(EntityId(row)).map_or(0.0, |g| g.1[k]),
                    _ => grad.relation(RelationId(row)).map_or(0.0, |g| g[k]),
                };
                compare(analytic, numeric);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_uniform_weights() {
        // temperature 0 makes the weights constant, so this is the exact loss
        for seed in 0..3 {
            let model = micro_model(seed);
            let samples = micro_samples();
            let (loss, grad) = model.batch_gradient(&samples, 0.0);
            assert!((loss - model.batch_loss(&samples, 0.0)).abs() < 1e-12);
            check_gradient(&model, &grad, |m| m.batch_loss(&samples, 0.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_frozen_adversarial_weights() {
        for seed in 0..3 {
            let model = micro_model(seed);
            let samples = micro_samples();
            let weights: Vec<Vec<f64>> = samples.iter().map(|s| model.adversarial_weights(s, 1.0)).collect();
            let (loss, grad) = model.batch_gradient(&samples, 1.0);
            assert!((loss - model.batch_loss_with_weights(&samples, &weights)).abs() < 1e-12);
            check_gradient(&model, &grad, |m| m.batch_loss_with_weights(&samples, &weights));
        }
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let kg = synthetic::ring(20, &[1, 2], 0, 4, 0).build();
        let config = TrainConfig {
            dim: 8,
            steps: 0,
            ..Default::default()
        };
        let mut model = config.init_model(&kg);
        let before = model.clone();
        let report = train(&mut model, &kg, &config).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic_and_keeps_unit_modulus() {
        let kg = synthetic::ring(20, &[1, 2], 0, 4, 0).build();
        let config = TrainConfig {
            dim: 8,
            batch_size: 16,
            negatives_per_positive: 4,
            steps: 50,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut model = config.init_model(&kg);
            let report = train(&mut model, &kg, &config).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        let bits = |r: &TrainingReport| r.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r1), bits(&r2));
        assert_eq!(m1, m2);
        assert!(r1.max_modulus_deviation <= 1e-6);
        assert!(r1.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn huge_learning_rate_reports_non_finite() {
        let kg = synthetic::ring(10, &[1], 0, 0, 0).build();
        let config = TrainConfig {
            dim: 4,
            batch_size: 8,
            negatives_per_positive: 2,
            steps: 50,
            learning_rate: 1e300,
            ..Default::default()
        };
        let mut model = config.init_model(&kg);
        assert!(matches!(
            train(&mut model, &kg, &config),
            Err(RetrieverError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
