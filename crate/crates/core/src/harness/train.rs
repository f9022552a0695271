use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{PromptedMil, PreparedBag};
use crate::params::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    /// Hard cap on optimizer steps, across epochs.
    pub max_steps: Option<usize>,
    /// Improvement in mean epoch loss needed to reset patience.
    pub min_delta: f64,
}

impl TrainOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            max_steps: None,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub stopped_early: bool,
    /// Every bag id that contributed to a gradient step.
    pub seen_ids: BTreeSet<String>,
}

/// Adam over one bag per step, epochs in a seeded shuffled order, stopping
/// once the mean epoch loss has not improved for `patience` epochs.
pub fn train(model: &mut PromptedMil, bags: &[PreparedBag], opts: &TrainOptions) -> Result<TrainReport> {
    if bags.is_empty() {
        return Err(Error::InvalidConfig(vec!["no training bags".into()]));
    }
    let keys = model.trainable_keys();
    let mut adam = Adam::new(model.cfg.lr, model.cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ 0x7261_696e);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    'epochs: for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for &i in &order {
            if opts.max_steps.is_some_and(|cap| report.steps >= cap) {
                break 'epochs;
            }
            let bag = &bags[i];
            let (loss, mut grads) = model.loss_and_grads(bag)?;
            if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: report.steps,
                    bag_id: bag.bag_id.clone(),
                });
            }
            grads.retain(&keys);
            adam.step(&mut model.store, &grads);
            report.seen_ids.insert(bag.bag_id.clone());
            report.step_losses.push(loss);
            report.steps += 1;
            total += loss;
            count += 1;
        }
        let mean = total / count as f64;
        report.epoch_losses.push(mean);
        report.epochs = epoch + 1;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        if mean < best - opts.min_delta {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}
