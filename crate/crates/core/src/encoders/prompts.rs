//! Trainable prompt parameters and the prompt generator that turns per-layer
//! [EOT] vectors of low-scale descriptions into low-scale prompt tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::gaussian;
use super::LayerTokenTrace;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{gelu, Graph, Mat, NodeId, ParamKey};

/// Two-layer perceptron `g(x) = gelu(x·W1 + b1)·W2 + b2`, width preserving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGenerator {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl PromptGenerator {
    /// Random hidden layer, zero output layer: generated prompts start at zero.
    pub fn zero_output(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: gaussian(d, d, 1.0 / (d as f64).sqrt(), rng),
            b1: Mat::zeros((1, d)),
            w2: Mat::zeros((d, d)),
            b2: Mat::zeros((1, d)),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let h = (x.dot(&self.w1) + &self.b1).mapv(gelu);
        h.dot(&self.w2) + &self.b2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorKeys {
    pub w1: ParamKey,
    pub b1: ParamKey,
    pub w2: ParamKey,
    pub b2: ParamKey,
}

impl GeneratorKeys {
    pub fn register(store: &mut ParamStore, gen: PromptGenerator) -> Self {
        Self {
            w1: store.add("gen.w1", gen.w1),
            b1: store.add("gen.b1", gen.b1),
            w2: store.add("gen.w2", gen.w2),
            b2: store.add("gen.b2", gen.b2),
        }
    }

    pub fn read(&self, store: &ParamStore) -> PromptGenerator {
        PromptGenerator {
            w1: store.get(self.w1).clone(),
            b1: store.get(self.b1).clone(),
            w2: store.get(self.w2).clone(),
            b2: store.get(self.b2).clone(),
        }
    }

    pub fn keys(&self) -> [ParamKey; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn apply_on_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let w1 = binder.node(g, store, self.w1);
        let b1 = binder.node(g, store, self.b1);
        let w2 = binder.node(g, store, self.w2);
        let b2 = binder.node(g, store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }
}

/// Keys of every trainable prompt tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptState {
    /// One `len_glob × d_model` tensor per text layer.
    pub p_glob: Vec<ParamKey>,
    /// One `len_vis × d_model` tensor per image layer (low scale only).
    pub p_vis: Vec<ParamKey>,
    pub generator: GeneratorKeys,
}

impl PromptState {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        l_text: usize,
        len_glob: usize,
        l_img: usize,
        len_vis: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let p_glob = (0..l_text)
            .map(|l| store.add(format!("p_glob.{l}"), gaussian(len_glob, d_model, 0.02, rng)))
            .collect();
        let p_vis = (0..l_img)
            .map(|l| store.add(format!("p_vis.{l}"), gaussian(len_vis, d_model, 0.02, rng)))
            .collect();
        let generator = GeneratorKeys::register(store, PromptGenerator::zero_output(d_model, rng));
        Self {
            p_glob,
            p_vis,
            generator,
        }
    }

    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut keys: Vec<_> = self.p_glob.iter().chain(&self.p_vis).copied().collect();
        keys.extend(self.generator.keys());
        keys
    }
}

/// `p_low[l]` stacks `g(d_l)` over the traces of one set of low-scale descriptions.
pub fn generate_low_prompts(traces: &[LayerTokenTrace], gen: &PromptGenerator) -> Result<Vec<Mat>> {
    let stacked = stack_traces(traces)?;
    Ok(stacked.iter().map(|layer| gen.apply(layer)).collect())
}

/// Regroups per-description traces into per-layer `n_desc × d_model` blocks.
pub fn stack_traces(traces: &[LayerTokenTrace]) -> Result<Vec<Mat>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::shape("low-prompt traces", ">= 1 trace", 0))?;
    let (depth, d) = first.0.dim();
    for t in traces {
        if t.0.dim() != (depth, d) {
            return Err(Error::shape(
                "low-prompt trace depth",
                format!("{depth}x{d}"),
                format!("{}x{}", t.0.nrows(), t.0.ncols()),
            ));
        }
    }
    Ok((0..depth)
        .map(|l| {
            let mut m = Mat::zeros((traces.len(), d));
            for (i, t) in traces.iter().enumerate() {
                m.row_mut(i).assign(&t.0.row(l));
            }
            m
        })
        .collect())
}
