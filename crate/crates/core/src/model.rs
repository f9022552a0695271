//! The assembled classifier: frozen towers, trainable prompt state, per-scale
//! graph propagation and the pooling head.
//!
//! Per bag, the low scale keeps the zero-shot selected instances and encodes
//! them with the visually prompted image tower; the high scale keeps the
//! children of those instances and encodes them with the frozen tower. Low
//! descriptions go through the frozen text tower once; high descriptions go
//! through the hierarchically prompted tower on every forward pass.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bag::{Bag, Scale};
use crate::baselines::{AttentionKeys, AttentionPoolParams};
use crate::config::{GraphKind, ModelConfig};
use crate::data::Dataset;
use crate::descriptions::{low_traces, DescriptionBank};
use crate::encoders::{stack_traces, PromptState, ToyVlm};
use crate::error::{Error, Result};
use crate::isgpt::{cosine_softmax_on_graph, knn_graph_coords, knn_graph_features, GcnKeys, GcnParams};
use crate::npcgp::{cross_guided_on_graph, loss_on_graph, overall_on_graph, LogitNodes, LogitsTriple, LossWeights};
use crate::params::{Binder, ParamStore};
use crate::selection::{class_embeddings, normalized, select_patches, Selection, TemplateBank};
use crate::tape::{Gradients, Graph, Mat, NodeId, ParamKey};
use crate::tokenizer::Tokenizer;

/// Builds the frozen towers for a dataset: the tokenizer is fitted on the
/// description and template banks, word vectors come from the lexicon.
pub fn pretrained_vlm(cfg: &ModelConfig, dataset: &Dataset) -> Result<ToyVlm> {
    let corpus: Vec<&str> = dataset
        .bank
        .corpus()
        .chain(dataset.templates.categories.iter().flat_map(|(_, t)| t.iter().map(String::as_str)))
        .collect();
    let tokenizer = Tokenizer::fit(corpus);
    ToyVlm::pretrained(cfg, dataset.d_raw(), &dataset.lexicon, tokenizer)
}

/// Everything about a bag that does not depend on trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBag {
    pub bag_id: String,
    pub label: usize,
    pub selection: Selection,
    /// Selected low-scale rows, in ascending instance order.
    pub low_rows: Mat,
    pub low_coords: Vec<[u32; 2]>,
    /// Indices of the high-scale children of the selected instances.
    pub high_index: Vec<usize>,
    pub high_coords: Vec<[u32; 2]>,
    /// Frozen high-scale embeddings of those children.
    pub p_high: Mat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHeads {
    pub high: AttentionKeys,
    pub low: AttentionKeys,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextNodes {
    pub z_low: NodeId,
    pub z_high: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BagNodes {
    pub logits: LogitNodes,
    pub p_low: NodeId,
    pub p_high: NodeId,
    pub refined_low: NodeId,
    pub refined_high: NodeId,
}

#[derive(Debug)]
pub struct PromptedMil {
    pub cfg: ModelConfig,
    pub vlm: ToyVlm,
    pub bank: DescriptionBank,
    pub store: ParamStore,
    pub prompts: PromptState,
    pub gcn_low: GcnKeys,
    pub gcn_high: GcnKeys,
    pub heads: Option<AttentionHeads>,
    class_w: Mat,
    z_low: Mat,
    /// Per category, per text layer: `C_low × d_model` frozen [EOT] vectors.
    low_stacks: Vec<Vec<Mat>>,
    high_tokens: Vec<(usize, Vec<u32>)>,
    adjacency_builds: AtomicUsize,
}

impl PromptedMil {
    pub fn new(cfg: ModelConfig, vlm: ToyVlm, bank: DescriptionBank, templates: &TemplateBank) -> Result<Self> {
        let cfg = cfg.validate()?;
        bank.validate(&cfg)?;
        if templates.num_classes() != cfg.num_classes {
            return Err(Error::Templates(format!(
                "{} template categories, configuration expects {}",
                templates.num_classes(),
                cfg.num_classes
            )));
        }
        if vlm.text.d_model() != cfg.d_model || vlm.text.d_joint() != cfg.d_joint {
            return Err(Error::shape("tower widths", cfg.d_model, vlm.text.d_model()));
        }
        let class_w = class_embeddings(templates, &vlm.text)?;
        let (z_low, traces) = low_traces(&bank, &vlm.text)?;
        let low_stacks = traces.iter().map(|t| stack_traces(t)).collect::<Result<Vec<_>>>()?;
        let high_tokens = bank
            .row_ids(Scale::High)
            .into_iter()
            .zip(bank.flattened(Scale::High))
            .map(|(id, d)| (id.category, vlm.text.tokenize(d)))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let prompts = PromptState::register(
            &mut store,
            cfg.l_text,
            cfg.len_glob,
            cfg.l_img,
            cfg.len_vis,
            cfg.d_model,
            &mut rng,
        );
        let gcn_low = GcnKeys::register(&mut store, "gcn.low", GcnParams::identity(cfg.d_joint, cfg.gcn_layers));
        let gcn_high = GcnKeys::register(&mut store, "gcn.high", GcnParams::identity(cfg.d_joint, cfg.gcn_layers));
        let mut model = Self {
            cfg,
            vlm,
            bank,
            store,
            prompts,
            gcn_low,
            gcn_high,
            heads: None,
            class_w,
            z_low,
            low_stacks,
            high_tokens,
            adjacency_builds: AtomicUsize::new(0),
        };
        if !model.cfg.npcgp {
            let (z_low, z_high) = model.description_embeddings()?;
            let scale = model.cfg.logit_scale();
            let k = model.cfg.num_classes;
            let high = AttentionPoolParams::init(model.cfg.d_joint, category_head(&z_high, k, scale)?, &mut rng);
            let low = AttentionPoolParams::init(model.cfg.d_joint, category_head(&z_low, k, scale)?, &mut rng);
            model.heads = Some(AttentionHeads {
                high: AttentionKeys::register(&mut model.store, "att.high", high),
                low: AttentionKeys::register(&mut model.store, "att.low", low),
            });
        }
        Ok(model)
    }

    pub fn for_dataset(cfg: ModelConfig, dataset: &Dataset) -> Result<Self> {
        let vlm = pretrained_vlm(&cfg, dataset)?;
        Self::new(cfg, vlm, dataset.bank.clone(), &dataset.templates)
    }

    /// Keys updated by training under the current toggles.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut keys = self.prompts.p_glob.clone();
        keys.extend(&self.prompts.p_vis);
        if self.cfg.mhpt {
            keys.extend(self.prompts.generator.keys());
        }
        if self.cfg.isgpt {
            keys.extend(self.gcn_low.0.iter().chain(&self.gcn_high.0));
        }
        if let Some(h) = &self.heads {
            keys.extend(h.high.keys().into_iter().chain(h.low.keys()));
        }
        keys
    }

    pub fn class_embeddings(&self) -> &Mat {
        &self.class_w
    }

    pub fn frozen_digest(&self) -> String {
        self.vlm.frozen_digest()
    }

    /// How many per-bag similarity adjacencies have been built so far.
    pub fn adjacency_builds(&self) -> usize {
        self.adjacency_builds.load(Ordering::Relaxed)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            overall: self.cfg.loss_weight_overall,
            high: self.cfg.loss_weight_high,
            low: self.cfg.loss_weight_low,
        }
    }

    pub fn prepare(&self, bag: &Bag) -> Result<PreparedBag> {
        let selection = select_patches(bag, &self.vlm.image, &self.class_w, self.cfg.n_select, self.cfg.tau)?;
        let low = bag.view(Scale::Low)?;
        let high = bag.view(Scale::High)?;
        let low_rows = Mat::from_shape_fn((selection.union.len(), low.instances.ncols()), |(r, c)| {
            f64::from(low.instances[[selection.union[r], c]])
        });
        let low_coords: Vec<[u32; 2]> = selection.union.iter().map(|&i| low.coords[i]).collect();
        let mut high_index: Vec<usize> = (0..high.len())
            .filter(|&j| {
                let [x, y] = high.coords[j];
                low_coords.contains(&[x / 2, y / 2])
            })
            .collect();
        if high_index.is_empty() {
            high_index = (0..high.len()).collect();
        }
        let high_rows = ndarray::Array2::from_shape_fn((high_index.len(), high.instances.ncols()), |(r, c)| {
            high.instances[[high_index[r], c]]
        });
        let p_high = self.vlm.image.encode_image_frozen(&high_rows)?;
        Ok(PreparedBag {
            bag_id: bag.bag_id.clone(),
            label: bag.label,
            selection,
            low_rows,
            low_coords,
            high_coords: high_index.iter().map(|&j| high.coords[j]).collect(),
            high_index,
            p_high,
        })
    }

    pub fn prepare_all<'a>(&self, bags: impl IntoIterator<Item = &'a Bag>) -> Result<Vec<PreparedBag>> {
        bags.into_iter().map(|b| self.prepare(b)).collect()
    }

    /// Description embeddings of both scales on the tape.
    pub fn text_on_graph(&self, g: &mut Graph, binder: &mut Binder) -> Result<TextNodes> {
        let text = &self.vlm.text;
        let bound = text.bind(g);
        let p_glob: Vec<NodeId> = self.prompts.p_glob.iter().map(|&k| binder.node(g, &self.store, k)).collect();
        let p_low: Vec<Vec<NodeId>> = self
            .low_stacks
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|m| {
                        if self.cfg.mhpt {
                            let x = g.constant(m.clone());
                            self.prompts.generator.apply_on_graph(g, binder, &self.store, x)
                        } else {
                            g.constant(Mat::zeros((0, text.d_model())))
                        }
                    })
                    .collect()
            })
            .collect();
        let mut rows = Vec::with_capacity(self.high_tokens.len());
        for (k, tokens) in &self.high_tokens {
            rows.push(text.prompted_on_graph(g, &bound, tokens, &p_glob, &p_low[*k])?.z);
        }
        Ok(TextNodes {
            z_low: g.constant(self.z_low.clone()),
            z_high: g.concat_rows(&rows),
        })
    }

    /// Current `(Z_low, Z_high)` values.
    pub fn description_embeddings(&self) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let t = self.text_on_graph(&mut g, &mut binder)?;
        Ok((g.value(t.z_low).clone(), g.value(t.z_high).clone()))
    }

    fn adjacency(
        &self,
        g: &mut Graph,
        p: NodeId,
        z: NodeId,
        coords: &[[u32; 2]],
    ) -> Result<NodeId> {
        let m = g.value(p).nrows();
        let k = self.cfg.knn_k.min(m.saturating_sub(1));
        Ok(match self.cfg.graph {
            GraphKind::Sim => {
                self.adjacency_builds.fetch_add(1, Ordering::Relaxed);
                let s = cosine_softmax_on_graph(g, p, z, self.cfg.tau);
                cosine_softmax_on_graph(g, s, s, self.cfg.tau)
            }
            _ if k == 0 => g.constant(Mat::zeros((m, m))),
            GraphKind::KnnCoord => g.constant(knn_graph_coords(coords, k)?),
            GraphKind::KnnFeat => g.constant(knn_graph_features(&g.value(p).clone(), k)?),
        })
    }

    fn check_rows(g: &Graph, p: NodeId, context: &'static str) -> Result<()> {
        let v = g.value(p);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(context));
        }
        normalized(v, context).map(|_| ())
    }

    pub fn bag_on_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        text: &TextNodes,
        bag: &PreparedBag,
    ) -> Result<BagNodes> {
        let cfg = &self.cfg;
        let image = &self.vlm.image;
        let bound = image.bind(g);
        let p_vis: Vec<NodeId> = self.prompts.p_vis.iter().map(|&k| binder.node(g, &self.store, k)).collect();
        let x = g.constant(bag.low_rows.clone());
        let p_low = image.encode_on_graph(g, &bound, x, Some(&p_vis))?;
        let p_high = g.constant(bag.p_high.clone());
        Self::check_rows(g, p_low, "low-scale patch embedding")?;
        Self::check_rows(g, p_high, "high-scale patch embedding")?;

        let (refined_low, refined_high) = if cfg.isgpt {
            let a_low = self.adjacency(g, p_low, text.z_low, &bag.low_coords)?;
            let a_high = self.adjacency(g, p_high, text.z_high, &bag.high_coords)?;
            (
                self.gcn_low.apply_on_graph(g, binder, &self.store, a_low, p_low),
                self.gcn_high.apply_on_graph(g, binder, &self.store, a_high, p_high),
            )
        } else {
            (p_low, p_high)
        };
        Self::check_rows(g, refined_low, "propagated low-scale embedding")?;
        Self::check_rows(g, refined_high, "propagated high-scale embedding")?;

        let ph = g.normalize_rows(refined_high);
        let pl = g.normalize_rows(refined_low);
        let logits = match &self.heads {
            None => {
                let scale = cfg.logit_scale();
                let zh = g.normalize_rows(text.z_high);
                let zh = g.scale(zh, scale);
                let zl = g.normalize_rows(text.z_low);
                let zl = g.scale(zl, scale);
                cross_guided_on_graph(g, ph, pl, zh, zl, cfg.num_classes, cfg.k_top, cfg.cross_guidance)?
            }
            Some(heads) => {
                let (high, _) = heads.high.logits_on_graph(g, binder, &self.store, ph);
                let (low, _) = heads.low.logits_on_graph(g, binder, &self.store, pl);
                LogitNodes {
                    high,
                    low,
                    overall: overall_on_graph(g, high, low),
                }
            }
        };
        Ok(BagNodes {
            logits,
            p_low,
            p_high,
            refined_low,
            refined_high,
        })
    }

    fn loss_graph(&self, bag: &PreparedBag) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let text = self.text_on_graph(&mut g, &mut binder)?;
        let nodes = self.bag_on_graph(&mut g, &mut binder, &text, bag)?;
        let loss = loss_on_graph(&mut g, nodes.logits, bag.label, self.loss_weights())?;
        Ok((g, loss))
    }

    pub fn loss(&self, bag: &PreparedBag) -> Result<f64> {
        let (g, loss) = self.loss_graph(bag)?;
        Ok(g.scalar(loss))
    }

    pub fn loss_and_grads(&self, bag: &PreparedBag) -> Result<(f64, Gradients)> {
        let (g, loss) = self.loss_graph(bag)?;
        Ok((g.scalar(loss), g.backward(loss)))
    }

    /// Logits of every bag under the current parameters.
    pub fn logits(&self, bags: &[PreparedBag]) -> Result<Vec<LogitsTriple>> {
        let (z_low, z_high) = self.description_embeddings()?;
        bags.iter()
            .map(|bag| {
                let mut g = Graph::new();
                let mut binder = Binder::new();
                let text = TextNodes {
                    z_low: g.constant(z_low.clone()),
                    z_high: g.constant(z_high.clone()),
                };
                let n = self.bag_on_graph(&mut g, &mut binder, &text, bag)?.logits;
                let row = |id: NodeId| g.value(id).row(0).to_vec();
                Ok(LogitsTriple {
                    high: row(n.high),
                    low: row(n.low),
                    overall: row(n.overall),
                })
            })
            .collect()
    }
}

impl PromptedMil {
    /// Replaces the trainable state with `store`, which must hold the same
    /// names and shapes in the same order.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::shape("parameter count", self.store.len(), store.len()));
        }
        for (mine, theirs) in self.store.keys().zip(store.keys()) {
            let (a, b) = (self.store.name(mine), store.name(theirs));
            if a != b {
                return Err(Error::shape("parameter name", a, b));
            }
            if self.store.get(mine).dim() != store.get(theirs).dim() {
                return Err(Error::shape(
                    "parameter shape",
                    format!("{a} {:?}", self.store.get(mine).dim()),
                    format!("{:?}", store.get(theirs).dim()),
                ));
            }
            if store.get(theirs).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("loaded parameters"));
            }
        }
        self.store = store;
        Ok(())
    }

    /// Per-instance score of `category` at one scale: the largest scaled
    /// cosine between a propagated patch and that category's descriptions.
    /// Returns the instance coordinates alongside.
    pub fn instance_scores(&self, bag: &PreparedBag, scale: Scale, category: usize) -> Result<(Vec<[u32; 2]>, Vec<f64>)> {
        if category >= self.cfg.num_classes {
            return Err(Error::LabelRange {
                label: category,
                classes: self.cfg.num_classes,
            });
        }
        let (z_low, z_high) = self.description_embeddings()?;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let text = TextNodes {
            z_low: g.constant(z_low.clone()),
            z_high: g.constant(z_high.clone()),
        };
        let nodes = self.bag_on_graph(&mut g, &mut binder, &text, bag)?;
        let (p, z, coords) = match scale {
            Scale::Low => (nodes.refined_low, z_low, &bag.low_coords),
            Scale::High => (nodes.refined_high, z_high, &bag.high_coords),
        };
        let p = normalized(g.value(p), "patch embedding")?;
        let z = normalized(&z, "description embedding")?;
        let c = z.nrows() / self.cfg.num_classes;
        let block = z.slice(ndarray::s![category * c..(category + 1) * c, ..]);
        let scores = p.dot(&block.t()) * self.cfg.logit_scale();
        let best = scores
            .outer_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok((coords.clone(), best))
    }
}

/// `d × K` head whose column `k` is the normalized mean of category `k`'s
/// normalized description rows, times `scale`.
fn category_head(z: &Mat, k: usize, scale: f64) -> Result<Mat> {
    let zn = normalized(z, "description embedding")?;
    let c = zn.nrows() / k;
    let mut means = Mat::zeros((k, zn.ncols()));
    for cat in 0..k {
        let block = zn.slice(ndarray::s![cat * c..(cat + 1) * c, ..]);
        means.row_mut(cat).assign(&block.mean_axis(ndarray::Axis(0)).unwrap());
    }
    Ok(normalized(&means, "category mean")?.t().to_owned() * scale)
}
