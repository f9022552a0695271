use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{evaluate_logits, mean_std, Metrics};
use super::split::few_shot_split;
use super::train::{train, TrainOptions};
use crate::bag::FewShotSplit;
use crate::config::{GraphKind, ModelConfig};
use crate::data::Dataset;
use crate::encoders::ToyVlm;
use crate::error::{Error, Result};
use crate::model::{pretrained_vlm, PromptedMil, PreparedBag};
use crate::params::hash_mat;

/// Frozen towers and per-bag preparation shared by every seed and variant.
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub vlm: ToyVlm,
    pub prepared: HashMap<String, PreparedBag>,
    pub dataset_hash: String,
    base: ModelConfig,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: &ModelConfig, dataset: &'a Dataset) -> Result<Self> {
        let cfg = cfg.clone().validate()?;
        let vlm = pretrained_vlm(&cfg, dataset)?;
        let model = PromptedMil::new(cfg.clone(), vlm.clone(), dataset.bank.clone(), &dataset.templates)?;
        let prepared = dataset
            .bags
            .iter()
            .map(|b| Ok((b.bag_id.clone(), model.prepare(b)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset,
            vlm,
            prepared,
            dataset_hash: dataset_digest(dataset),
            base: cfg,
        })
    }

    pub fn model(&self, cfg: ModelConfig) -> Result<PromptedMil> {
        self.check_compatible(&cfg)?;
        PromptedMil::new(cfg, self.vlm.clone(), self.dataset.bank.clone(), &self.dataset.templates)
    }

    /// Prepared bags depend on the towers and on selection settings only.
    fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let same = |c: &ModelConfig| {
            (c.d_model, c.d_joint, c.d_ffn, c.l_text, c.l_img, c.context_len, c.vlm_seed, c.n_select)
        };
        if same(cfg) != same(&self.base) || cfg.tau.to_bits() != self.base.tau.to_bits() {
            return Err(Error::InvalidConfig(vec![
                "variant changes tower or selection settings; build a new experiment".into(),
            ]));
        }
        Ok(())
    }

    pub fn bags(&self, ids: &[String]) -> Result<Vec<PreparedBag>> {
        ids.iter()
            .map(|id| {
                self.prepared.get(id).cloned().ok_or_else(|| Error::MissingRows {
                    bag_id: id.clone(),
                    scale: "any".into(),
                })
            })
            .collect()
    }
}

/// SHA-256 over bag ids, labels, coordinates, instance rows and the text side.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for bag in &dataset.bags {
        h.update(bag.bag_id.as_bytes());
        h.update((bag.label as u64).to_le_bytes());
        for (scale, view) in &bag.views {
            h.update(scale.as_str().as_bytes());
            for v in view.instances.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
            for [x, y] in &view.coords {
                h.update(x.to_le_bytes());
                h.update(y.to_le_bytes());
            }
        }
    }
    h.update(dataset.bank.to_text().as_bytes());
    h.update(dataset.templates.to_text().as_bytes());
    for (word, v) in &dataset.lexicon {
        h.update(word.as_bytes());
        let m = crate::tape::Mat::from_shape_fn((1, v.len()), |(_, c)| f64::from(v[c]));
        hash_mat(&mut h, &m);
    }
    hex::encode(h.finalize())
}

pub fn split_digest(split: &FewShotSplit) -> String {
    let mut h = Sha256::new();
    for id in split.train_ids.iter().chain(std::iter::once(&String::from("|"))).chain(&split.test_ids) {
        h.update(id.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub split_hash: String,
    pub metrics: Option<Metrics>,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub config: ModelConfig,
    pub shots: usize,
    pub dataset_hash: String,
    pub requested: usize,
    pub completed: usize,
    pub seeds: Vec<SeedResult>,
    pub mean: Metrics,
    pub std: Metrics,
    /// Mean after dropping the `trim` best and worst seeds by AUC.
    pub trimmed: Option<Metrics>,
    pub wall_clock_secs: f64,
    /// SHA-256 of everything above except the wall clock.
    pub content_hash: String,
}

impl RunReport {
    pub fn compute_hash(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        clone.content_hash.clear();
        let json = serde_json::to_string(&clone).expect("report serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .seeds
            .iter()
            .map(|s| match (&s.metrics, &s.error) {
                (Some(m), _) => format!(
                    "{},{},{},{:.6},{:.6},{:.6},{},",
                    self.variant, self.shots, s.seed, m.auc, m.f1, m.acc, s.epochs
                ),
                (None, e) => format!(
                    "{},{},{},,,,{},{}",
                    self.variant,
                    self.shots,
                    s.seed,
                    s.epochs,
                    e.as_deref().unwrap_or("").replace(',', ";")
                ),
            })
            .collect();
        rows.push(format!(
            "{},{},mean,{:.6},{:.6},{:.6},,",
            self.variant, self.shots, self.mean.auc, self.mean.f1, self.mean.acc
        ));
        rows.push(format!(
            "{},{},std,{:.6},{:.6},{:.6},,",
            self.variant, self.shots, self.std.auc, self.std.f1, self.std.acc
        ));
        rows
    }
}

pub const CSV_HEADER: &str = "variant,shots,seed,auc,f1,acc,epochs,error";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub trim: usize,
    pub max_steps: Option<usize>,
}

fn run_one(exp: &Experiment, cfg: &ModelConfig, seed: u64, shots: usize, opts: &RunOptions) -> Result<SeedResult> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let split = few_shot_split(&exp.dataset.bags, cfg.num_classes, shots, seed)?;
    let split_hash = split_digest(&split);
    let mut model = exp.model(cfg.clone())?;
    let train_bags = exp.bags(&split.train_ids)?;
    let test_bags = exp.bags(&split.test_ids)?;
    let mut topts = TrainOptions::from_config(&cfg);
    topts.max_steps = opts.max_steps;
    let report = train(&mut model, &train_bags, &topts)?;
    if let Some(leak) = split.test_ids.iter().find(|id| report.seen_ids.contains(*id)) {
        return Err(Error::InvalidConfig(vec![format!("test bag `{leak}` reached a gradient step")]));
    }
    let logits = model.logits(&test_bags)?;
    let labels: Vec<usize> = test_bags.iter().map(|b| b.label).collect();
    let metrics = evaluate_logits(&logits, &labels)?;
    Ok(SeedResult {
        seed,
        split_hash,
        metrics: Some(metrics),
        epochs: report.epochs,
        steps: report.steps,
        final_loss: report.epoch_losses.last().copied(),
        error: None,
    })
}

/// Split, train and evaluate once per seed; failures are recorded per seed.
pub fn run_seeds(
    exp: &Experiment,
    cfg: &ModelConfig,
    variant: &str,
    seeds: &[u64],
    shots: usize,
    opts: &RunOptions,
) -> Result<RunReport> {
    let cfg = cfg.clone().validate()?;
    let start = Instant::now();
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_one(exp, &cfg, seed, shots, opts).unwrap_or_else(|e| {
            log::warn!("variant {variant}, seed {seed}: {e}");
            SeedResult {
                seed,
                split_hash: String::new(),
                metrics: None,
                epochs: 0,
                steps: 0,
                final_loss: None,
                error: Some(e.to_string()),
            }
        });
        log::info!(
            "variant {variant}, seed {seed}: {}",
            r.metrics.map_or("failed".to_string(), |m| format!("auc {:.4} f1 {:.4} acc {:.4}", m.auc, m.f1, m.acc))
        );
        results.push(r);
    }
    let done: Vec<Metrics> = results.iter().filter_map(|r| r.metrics).collect();
    let (mean, std) = mean_std(&done);
    let trimmed = (opts.trim > 0 && done.len() > 2 * opts.trim).then(|| {
        let mut sorted = done.clone();
        sorted.sort_by(|a, b| a.auc.total_cmp(&b.auc));
        mean_std(&sorted[opts.trim..sorted.len() - opts.trim]).0
    });
    let mut report = RunReport {
        variant: variant.to_string(),
        config: cfg,
        shots,
        dataset_hash: exp.dataset_hash.clone(),
        requested: seeds.len(),
        completed: done.len(),
        seeds: results,
        mean,
        std,
        trimmed,
        wall_clock_secs: 0.0,
        content_hash: String::new(),
    };
    report.content_hash = report.compute_hash();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Named set of toggle overrides, written `key=value` joined by `+`.
/// `full` is the unmodified configuration and `baseline` switches off the
/// three components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub settings: Vec<(String, String)>,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let settings = match text {
            "full" => Vec::new(),
            "baseline" => ["mhpt", "isgpt", "npcgp"].map(|k| (k.to_string(), "off".to_string())).to_vec(),
            _ => text
                .split('+')
                .map(|part| {
                    let (k, v) = part.split_once('=').ok_or_else(|| Error::UnknownToggle(part.to_string()))?;
                    let key = match k.trim() {
                        "cross" => "cross_guidance",
                        other => other,
                    };
                    let ok = match key {
                        "mhpt" | "isgpt" | "npcgp" | "cross_guidance" => {
                            matches!(v.trim(), "on" | "off" | "true" | "false")
                        }
                        "graph" => v.trim().parse::<GraphKind>().is_ok(),
                        _ => false,
                    };
                    if !ok {
                        return Err(Error::UnknownToggle(part.to_string()));
                    }
                    Ok((key.to_string(), v.trim().to_string()))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            name: text.to_string(),
            settings,
        })
    }
}

impl Variant {
    pub fn apply(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let mut out = cfg.clone();
        for (k, v) in &self.settings {
            let v = match v.as_str() {
                "on" => "true",
                "off" => "false",
                other => other,
            };
            out.set(k, v)?;
        }
        out.validate()
    }
}

/// One report per variant, every variant on the same seeds and splits.
pub fn run_ablation(
    exp: &Experiment,
    cfg: &ModelConfig,
    variants: &[Variant],
    seeds: &[u64],
    shots: usize,
    opts: &RunOptions,
) -> Result<Vec<RunReport>> {
    variants
        .iter()
        .map(|v| run_seeds(exp, &v.apply(cfg)?, &v.name, seeds, shots, opts))
        .collect()
}

pub fn sweep_shots(
    exp: &Experiment,
    cfg: &ModelConfig,
    shots: &[usize],
    seeds: &[u64],
    opts: &RunOptions,
) -> Result<Vec<RunReport>> {
    shots
        .iter()
        .map(|&s| run_seeds(exp, cfg, &format!("{s}-shot"), seeds, s, opts))
        .collect()
}
