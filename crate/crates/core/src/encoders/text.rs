use ndarray::s;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::transformer::{block_forward, BoundTower, Tower};
use super::LayerTokenTrace;
use crate::error::{Error, Result};
use crate::params::hash_mat;
use crate::tape::{Graph, Mat, NodeId};
use crate::tokenizer::{Tokenizer, CLS, EOT};

/// Frozen text tower: token and position tables, transformer blocks and the
/// projection head into the joint space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub tokenizer: Tokenizer,
    pub token_embedding: Mat,
    pub positional: Mat,
    pub tower: Tower,
    pub proj: Mat,
}

#[derive(Clone, Debug)]
pub struct BoundText {
    pub tower: BoundTower,
    pub proj: NodeId,
}

/// Widths of the five slot groups of a prompted layer input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub cls: usize,
    pub glob: usize,
    pub low: usize,
    pub high: usize,
    pub eot: usize,
}

impl SlotLayout {
    pub fn width(&self) -> usize {
        self.cls + self.glob + self.low + self.high + self.eot
    }
}

#[derive(Clone, Debug)]
pub struct FrozenText {
    pub z: NodeId,
    pub trace: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct PromptedText {
    pub z: NodeId,
    /// Input layout of every layer, in order.
    pub layouts: Vec<SlotLayout>,
}

impl TextEncoder {
    pub fn depth(&self) -> usize {
        self.tower.depth()
    }

    pub fn d_model(&self) -> usize {
        self.token_embedding.ncols()
    }

    pub fn d_joint(&self) -> usize {
        self.proj.ncols()
    }

    pub fn context_len(&self) -> usize {
        self.positional.nrows()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundText {
        BoundText {
            tower: self.tower.bind(g),
            proj: g.constant(self.proj.clone()),
        }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        hash_mat(h, &self.token_embedding);
        hash_mat(h, &self.positional);
        self.tower.hash_into(h);
        hash_mat(h, &self.proj);
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() < 2 || tokens[0] != CLS {
            return Err(Error::Tokens("sequence must start with [CLS]".into()));
        }
        if *tokens.last().unwrap() != EOT {
            return Err(Error::Tokens("sequence must end with [EOT]".into()));
        }
        if tokens.len() > self.context_len() {
            return Err(Error::Tokens(format!(
                "{} tokens exceed the context limit of {}",
                tokens.len(),
                self.context_len()
            )));
        }
        let vocab = self.token_embedding.nrows() as u32;
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Tokens(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    /// Embedding rows for `tokens`, without positions.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Mat {
        let mut out = Mat::zeros((tokens.len(), self.d_model()));
        for (row, &t) in tokens.iter().enumerate() {
            out.row_mut(row).assign(&self.token_embedding.row(t as usize));
        }
        out
    }

    /// Runs the blocks over an already embedded sequence (positions included)
    /// and records the last token of every layer.
    pub fn run_embedded(&self, g: &mut Graph, bound: &BoundText, x0: Mat) -> FrozenText {
        let mut x = g.constant(x0);
        let mut trace = Vec::with_capacity(self.depth());
        for block in &bound.tower.blocks {
            x = block_forward(g, block, x);
            let last = g.value(x).nrows() - 1;
            trace.push(g.slice_rows(x, last, 1));
        }
        let eot = *trace.last().expect("tower has at least one layer");
        let z = g.matmul(eot, bound.proj);
        FrozenText { z, trace }
    }

    pub fn frozen_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundText,
        tokens: &[u32],
    ) -> Result<FrozenText> {
        self.check_tokens(tokens)?;
        let x0 = self.embed_tokens(tokens) + self.positional.slice(s![..tokens.len(), ..]);
        Ok(self.run_embedded(g, bound, x0))
    }

    /// Frozen pass: joint-space embedding of the final [EOT] token, plus the
    /// [EOT] vector after every layer.
    pub fn encode_text_frozen(&self, tokens: &[u32]) -> Result<(Mat, LayerTokenTrace)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.frozen_on_graph(&mut g, &bound, tokens)?;
        let rows: Vec<_> = out.trace.iter().map(|&n| g.value(n).view()).collect();
        let trace = ndarray::concatenate(ndarray::Axis(0), &rows).expect("trace rows");
        Ok((g.value(out.z).clone(), LayerTokenTrace(trace)))
    }

    /// Hierarchically prompted pass. Layer `i` sees
    /// `[CLS; p_glob[i]; p_low[i]; description tokens; EOT]`; the outputs at the
    /// two prompt groups are dropped and replaced by the next layer's prompts,
    /// while the [CLS], description and [EOT] streams propagate.
    pub fn prompted_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundText,
        tokens: &[u32],
        p_glob: &[NodeId],
        p_low: &[NodeId],
    ) -> Result<PromptedText> {
        self.check_tokens(tokens)?;
        let depth = self.depth();
        if p_glob.len() != depth || p_low.len() != depth {
            return Err(Error::shape(
                "prompted text encoder depth",
                depth,
                format!("p_glob {} / p_low {}", p_glob.len(), p_low.len()),
            ));
        }
        let len_glob = g.value(p_glob[0]).nrows();
        let len_low = g.value(p_low[0]).nrows();
        for l in 0..depth {
            let (gl, lo) = (g.value(p_glob[l]), g.value(p_low[l]));
            if gl.nrows() != len_glob || lo.nrows() != len_low {
                return Err(Error::shape("prompt length per layer", len_glob, gl.nrows()));
            }
            if gl.ncols() != self.d_model() || lo.ncols() != self.d_model() {
                return Err(Error::shape("prompt width", self.d_model(), gl.ncols()));
            }
        }
        let n_high = tokens.len() - 2;
        let layout = SlotLayout {
            cls: 1,
            glob: len_glob,
            low: len_low,
            high: n_high,
            eot: 1,
        };
        if layout.width() > self.context_len() {
            return Err(Error::Tokens(format!(
                "prompted layout of {} slots exceeds the context limit of {}",
                layout.width(),
                self.context_len()
            )));
        }

        let emb = self.embed_tokens(tokens);
        let cls = g.constant(emb.slice(s![0..1, ..]).to_owned());
        let high = g.constant(emb.slice(s![1..1 + n_high, ..]).to_owned());
        let eot = g.constant(emb.slice(s![1 + n_high.., ..]).to_owned());
        let x0 = g.concat_rows(&[cls, p_glob[0], p_low[0], high, eot]);
        let pos = g.constant(self.positional.slice(s![..layout.width(), ..]).to_owned());
        let mut x = g.add(x0, pos);

        let mut layouts = Vec::with_capacity(depth);
        for (l, block) in bound.tower.blocks.iter().enumerate() {
            if l > 0 {
                let cls = g.slice_rows(x, 0, 1);
                let high = g.slice_rows(x, 1 + len_glob + len_low, n_high);
                let eot = g.slice_rows(x, layout.width() - 1, 1);
                x = g.concat_rows(&[cls, p_glob[l], p_low[l], high, eot]);
            }
            debug_assert_eq!(g.value(x).nrows(), layout.width());
            layouts.push(layout);
            x = block_forward(g, block, x);
        }
        let e_last = g.slice_rows(x, layout.width() - 1, 1);
        let z = g.matmul(e_last, bound.proj);
        Ok(PromptedText { z, layouts })
    }

    /// Plain-value wrapper around [`TextEncoder::prompted_on_graph`].
    pub fn encode_text_prompted(&self, tokens: &[u32], p_glob: &[Mat], p_low: &[Mat]) -> Result<Mat> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let gl: Vec<_> = p_glob.iter().map(|m| g.constant(m.clone())).collect();
        let lo: Vec<_> = p_low.iter().map(|m| g.constant(m.clone())).collect();
        let out = self.prompted_on_graph(&mut g, &bound, tokens, &gl, &lo)?;
        Ok(g.value(out.z).clone())
    }
}
