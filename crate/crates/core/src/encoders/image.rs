use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::transformer::{BoundBlock, BoundTower, Tower};
use crate::error::{Error, Result};
use crate::params::hash_mat;
use crate::tape::{Graph, Mat, NodeId};

/// Frozen image tower. Every instance is a single-token grid: its feature row
/// is mapped by the stem into one token, optionally preceded by deep prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub stem: Mat,
    pub tower: Tower,
    pub proj: Mat,
}

#[derive(Clone, Debug)]
pub struct BoundImage {
    pub stem: NodeId,
    pub tower: BoundTower,
    pub proj: NodeId,
}

impl ImageEncoder {
    pub fn depth(&self) -> usize {
        self.tower.depth()
    }

    pub fn d_raw(&self) -> usize {
        self.stem.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.stem.ncols()
    }

    pub fn d_joint(&self) -> usize {
        self.proj.ncols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundImage {
        BoundImage {
            stem: g.constant(self.stem.clone()),
            tower: self.tower.bind(g),
            proj: g.constant(self.proj.clone()),
        }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        hash_mat(h, &self.stem);
        self.tower.hash_into(h);
        hash_mat(h, &self.proj);
    }

    /// Encodes every row of `instances` (M × d_raw) into the joint space.
    /// With `p_vis`, layer `l` prepends `p_vis[l]` to each instance's sequence
    /// and discards the prompt outputs.
    pub fn encode_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundImage,
        instances: NodeId,
        p_vis: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let (m, d_raw) = g.value(instances).dim();
        if m == 0 {
            return Err(Error::InvalidBag("no instances to encode".into()));
        }
        if d_raw != self.d_raw() {
            return Err(Error::shape("image encoder input width", self.d_raw(), d_raw));
        }
        if let Some(p) = p_vis {
            if p.len() != self.depth() {
                return Err(Error::shape("visual prompt depth", self.depth(), p.len()));
            }
            for &layer in p {
                if g.value(layer).ncols() != self.d_model() {
                    return Err(Error::shape(
                        "visual prompt width",
                        self.d_model(),
                        g.value(layer).ncols(),
                    ));
                }
            }
        }
        let mut x = g.matmul(instances, bound.stem);
        for (l, block) in bound.tower.blocks.iter().enumerate() {
            let prompt = p_vis.map(|p| p[l]).filter(|&p| g.value(p).nrows() > 0);
            x = single_token_block(g, block, x, prompt);
        }
        Ok(g.matmul(x, bound.proj))
    }

    pub fn encode_image_frozen(&self, instances: &Array2<f32>) -> Result<Mat> {
        self.encode_plain(instances, None)
    }

    pub fn encode_image_prompted(&self, instances: &Array2<f32>, p_vis: &[Mat]) -> Result<Mat> {
        self.encode_plain(instances, Some(p_vis))
    }

    fn encode_plain(&self, instances: &Array2<f32>, p_vis: Option<&[Mat]>) -> Result<Mat> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(instances.mapv(f64::from));
        let prompts: Option<Vec<NodeId>> =
            p_vis.map(|p| p.iter().map(|m| g.constant(m.clone())).collect());
        let out = self.encode_on_graph(&mut g, &bound, x, prompts.as_deref())?;
        Ok(g.value(out).clone())
    }
}

/// One block over M independent sequences `[prompt; x_i]`, returning only the
/// instance-token outputs. Row i of `x` attends to the shared prompt rows and
/// to itself.
fn single_token_block(g: &mut Graph, b: &BoundBlock, x: NodeId, prompt: Option<NodeId>) -> NodeId {
    let inv_sqrt_d = 1.0 / (b.d as f64).sqrt();
    let q = g.matmul(x, b.wq);
    let kx = g.matmul(x, b.wk);
    let vx = g.matmul(x, b.wv);
    let ctx = match prompt {
        None => vx,
        Some(p) => {
            let len = g.value(p).nrows();
            let kp = g.matmul(p, b.wk);
            let vp = g.matmul(p, b.wv);
            let qk = g.mul(q, kx);
            let s_self = g.row_sums(qk);
            let s_p = g.matmul_t(q, kp);
            let scores = g.concat_cols(&[s_p, s_self]);
            let scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scores);
            let a_p = g.slice_cols(attn, 0, len);
            let a_self = g.slice_cols(attn, len, 1);
            let from_prompt = g.matmul(a_p, vp);
            let from_self = g.scale_rows(vx, a_self);
            g.add(from_prompt, from_self)
        }
    };
    let out = g.matmul(ctx, b.wo);
    let h = g.add(x, out);
    let f = g.matmul(h, b.w1);
    let f = g.add_row(f, b.b1);
    let f = g.gelu(f);
    let f = g.matmul(f, b.w2);
    let f = g.add_row(f, b.b2);
    g.add(h, f)
}
