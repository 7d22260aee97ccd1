use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Prototypes, SynthesisTargets, SyntheticDataset, SyntheticLabel, SyntheticSample};
use crate::autodiff::{backward_input, AdamConfig, AdamState, Graph, Model};
use crate::data::{largest_remainder, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Synthetic samples per client.
    pub size: usize,
    /// Adam steps on the synthetic inputs.
    pub steps: usize,
    pub lr: f64,
    /// Hard-feature scaling; `0` disables augmentation.
    pub mu: f64,
    pub kl_eps: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            size: 100,
            steps: 500,
            lr: 0.02,
            mu: 0.5,
            kl_eps: 1e-8,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("syn_size", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("syn_steps", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("syn_lr", "must be positive"));
        }
        if !(self.mu >= -1.0) || !self.mu.is_finite() {
            return Err(Error::config("mu", "must be at least -1"));
        }
        if !(self.kl_eps > 0.0) {
            return Err(Error::config("kl_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Picks `min(size, |shard|)` rows, stratified by the shard's class histogram.
fn stratified_pairs<R: Rng + ?Sized>(shard: &Dataset, size: usize, rng: &mut R) -> Vec<usize> {
    let n = size.min(shard.len());
    let counts = shard.class_counts();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let quota = largest_remainder(n, &weights);
    let mut picked = Vec::with_capacity(n);
    for (class, &q) in quota.iter().enumerate() {
        let members: Vec<usize> = (0..shard.len()).filter(|&i| shard.labels()[i] == class).collect();
        let mut chosen: Vec<usize> = index::sample(rng, members.len(), q.min(members.len()))
            .into_iter()
            .map(|j| members[j])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    picked
}

/// Optimises a batch of Gaussian-initialised (then clamped) inputs with full-batch Adam on
/// the summed synthesis loss, clamping to `[0, 1]` after each step.
pub fn synthesize<R: Rng + ?Sized>(
    model: &Model,
    shard: &Dataset,
    prototypes: &Prototypes,
    cfg: &SynthesisConfig,
    rng: &mut R,
    client: usize,
    round: usize,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::contract("cannot synthesize from an empty shard"));
    }
    if shard.dim() != model.input_dim() {
        return Err(Error::dim("synthesize", format!("shard width {} vs model input {}", shard.dim(), model.input_dim())));
    }
    let pairs = stratified_pairs(shard, cfg.size, rng);
    let labels: Vec<usize> = pairs.iter().map(|&i| shard.labels()[i]).collect();
    let real = shard.batch(&pairs)?;
    let targets = SynthesisTargets::new(model, &real, &labels, prototypes, cfg.mu, cfg.kl_eps)?;

    let n = pairs.len();
    let dim = shard.dim();
    // Gaussian draw projected onto the box, so the recorded initial loss is
    // taken at a feasible point.
    let init: Vec<f64> = (0..n * dim)
        .map(|_| StandardNormal.sample(rng))
        .map(|v: f64| v.clamp(0.0, 1.0))
        .collect();
    let mut xhat = [Tensor::new(vec![n, dim], init)?];
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr))?;
    let mut initial = Vec::new();

    let evaluate = |x: &Tensor| -> Result<(Graph, crate::autodiff::Var, crate::autodiff::Var)> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let xv = g.variable(x);
        let rows = targets.loss_rows(&mut g, model, &bound, xv)?;
        Ok((g, xv, rows))
    };

    for step in 0..cfg.steps {
        let (mut g, xv, rows) = evaluate(&xhat[0])?;
        if step == 0 {
            initial = g.value(rows).to_vec();
        }
        let total = g.sum(rows);
        let grad = backward_input(&g, total, xv)?;
        adam.step(&mut xhat, &[grad.data()])?;
        xhat[0].data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let (g, _, rows) = evaluate(&xhat[0])?;
    let finals = g.value(rows).to_vec();

    let [xhat] = xhat;
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(i, &pair)| SyntheticSample {
            input: xhat.row(i).to_vec(),
            label: SyntheticLabel::Hard(labels[i]),
            client,
            round,
            paired_index: pair,
            initial_loss: Some(initial[i]),
            final_loss: Some(finals[i]),
        })
        .collect();
    Ok(SyntheticDataset {
        samples,
        input_dim: dim,
        feature_dim: model.feature_dim(),
        classes: model.classes(),
        client: Some(client),
        round,
        model_fingerprint: crate::engine::fingerprint(model),
    })
}
