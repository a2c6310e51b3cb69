use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::{AlphaVector, DynamicNet};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{evaluate, Context, Objective};
use crate::tensor::{Elem, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            steps: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Checks the invariants a user-supplied configuration must satisfy.
    /// The training functions themselves also accept `steps == 0` and
    /// `lr == 0`, which leave the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Seeded stream of mini-batches drawn from a fixed pool, reshuffled at
/// every pass through the pool.
#[derive(Clone, Debug)]
pub struct Batches {
    pool: Vec<Tensor>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Batches {
    pub fn new(pool: Vec<Tensor>, batch_size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() || batch_size == 0 {
            return Err(Error::Config("batch stream needs a non-empty pool and batch size ≥ 1".into()));
        }
        let order = (0..pool.len()).collect();
        let mut b = Batches { pool, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), order, cursor: 0 };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn next_batch(&mut self) -> Vec<&Tensor> {
        let n = self.batch_size.min(self.pool.len());
        let mut idx = Vec::with_capacity(n);
        while idx.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx.into_iter().map(|i| &self.pool[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Batch-mean objective value.
    pub total: f64,
    /// Batch-mean value of every term, in objective order.
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub term_labels: Vec<String>,
    pub steps: Vec<StepLog>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Main,
    Tuning,
}

/// Phase 1: trains the trainable θ parameters of the pure main network
/// (tuning-blocks are not in the graph) under `objective`.
pub fn train_main(
    net: &mut DynamicNet,
    data: &mut Batches,
    objective: &Objective,
    ctx: &Context,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train(net, data, objective, ctx, cfg, Phase::Main)
}

/// Phase 2: trains only ψ under `objective`, with every α fixed at 1.
/// θ must already be frozen and is never modified.
pub fn train_tuning(
    net: &mut DynamicNet,
    data: &mut Batches,
    objective: &Objective,
    ctx: &Context,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if let Some((name, _)) = net.theta().iter().find(|(_, p)| p.trainable) {
        return Err(Error::Usage(format!("main network must be frozen before tuning (`{name}` is trainable)")));
    }
    train(net, data, objective, ctx, cfg, Phase::Tuning)
}

fn collect_grads(tape: &Tape, bound: &Bound, grads: &crate::tensor::Gradients) -> HashMap<String, Tensor> {
    bound
        .iter()
        .filter(|&(_, v)| tape.requires_grad(v))
        .map(|(name, v)| (name.to_owned(), grads.get(v)))
        .collect()
}

fn train(
    net: &mut DynamicNet,
    data: &mut Batches,
    objective: &Objective,
    ctx: &Context,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<TrainLog> {
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let alpha = (phase == Phase::Tuning).then(|| AlphaVector::uniform(net.blocks(), 1.0));
    let mut log = TrainLog {
        term_labels: objective.terms().iter().map(|t| t.kind.label()).collect(),
        steps: Vec::with_capacity(cfg.steps),
    };

    for step in 0..cfg.steps {
        let batch = data.next_batch();
        let inv_batch = 1.0 / batch.len() as f64;
        let mut tape = Tape::new();
        let theta = net.theta().bind(&mut tape, phase == Phase::Main);
        let psi = match phase {
            Phase::Main => Bound::default(),
            Phase::Tuning => net.psi().bind(&mut tape, true),
        };

        let mut loss = None;
        let mut term_vars = Vec::with_capacity(batch.len());
        for img in batch {
            let x = tape.constant(img.clone());
            let rec = net.record(&mut tape, &theta, &psi, x, alpha.as_ref())?;
            let sample_ctx = Context { reference: Some(img), ..*ctx };
            let ev = evaluate(&mut tape, objective, rec.output, &sample_ctx)?;
            loss = Some(match loss {
                None => ev.total,
                Some(acc) => tape.add(acc, ev.total)?,
            });
            term_vars.push(ev.terms);
        }
        let loss = tape.scale(loss.expect("batch is non-empty"), inv_batch as Elem);
        let total = tape.value(loss).item() as f64;
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        let mut terms = vec![0.0; objective.terms().len()];
        for sample in &term_vars {
            for (acc, &v) in terms.iter_mut().zip(sample) {
                *acc += tape.value(v).item() as f64 * inv_batch;
            }
        }

        let grads = tape.backward(loss)?;
        let (store, bound): (&mut ParamStore, &Bound) = match phase {
            Phase::Main => (net.theta_mut(), &theta),
            Phase::Tuning => (net.psi_mut(), &psi),
        };
        let g = collect_grads(&tape, bound, &grads);
        drop(tape);
        adam_step(store, &g, &mut state, &adam)?;
        log.steps.push(StepLog { step, total, terms });
    }
    Ok(log)
}
