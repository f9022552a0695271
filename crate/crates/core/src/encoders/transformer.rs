use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::params::hash_mat;
use crate::tape::{Graph, Mat, NodeId};

/// Weights of one single-head transformer block:
/// `h = x + softmax(x·Wq (x·Wk)ᵀ / √d) · x·Wv · Wo`, `y = h + gelu(h·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl BlockWeights {
    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    /// Near-identity residual block: small query/key maps give almost uniform
    /// attention, value/output maps close to the identity carry token content.
    pub fn near_identity(d: usize, d_ffn: usize, rng: &mut impl Rng) -> Self {
        let sd = d as f64;
        let qk = 0.3 / sd.sqrt();
        let vo = 0.1 / sd.sqrt();
        Self {
            wq: gaussian(d, d, qk, rng),
            wk: gaussian(d, d, qk, rng),
            wv: Mat::eye(d) + gaussian(d, d, vo, rng),
            wo: Mat::eye(d) + gaussian(d, d, vo, rng),
            w1: gaussian(d, d_ffn, 1.0 / sd.sqrt(), rng),
            b1: Mat::zeros((1, d_ffn)),
            w2: gaussian(d_ffn, d, 0.2 / (d_ffn as f64).sqrt(), rng),
            b2: Mat::zeros((1, d)),
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        for m in [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ] {
            hash_mat(h, m);
        }
    }
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// A stack of frozen blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    pub blocks: Vec<BlockWeights>,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub(crate) wq: NodeId,
    pub(crate) wk: NodeId,
    pub(crate) wv: NodeId,
    pub(crate) wo: NodeId,
    pub(crate) w1: NodeId,
    pub(crate) b1: NodeId,
    pub(crate) w2: NodeId,
    pub(crate) b2: NodeId,
    pub(crate) d: usize,
}

/// Frozen weights inserted into a graph as constants, reusable across sequences.
#[derive(Clone, Debug)]
pub struct BoundTower {
    pub blocks: Vec<BoundBlock>,
}

impl Tower {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.blocks[0].d_model()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundTower {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                wq: g.constant(b.wq.clone()),
                wk: g.constant(b.wk.clone()),
                wv: g.constant(b.wv.clone()),
                wo: g.constant(b.wo.clone()),
                w1: g.constant(b.w1.clone()),
                b1: g.constant(b.b1.clone()),
                w2: g.constant(b.w2.clone()),
                b2: g.constant(b.b2.clone()),
                d: b.d_model(),
            })
            .collect();
        BoundTower { blocks }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for b in &self.blocks {
            b.hash_into(h);
        }
    }
}

/// One block applied to a sequence (rows are tokens).
pub fn block_forward(g: &mut Graph, b: &BoundBlock, x: NodeId) -> NodeId {
    let q = g.matmul(x, b.wq);
    let k = g.matmul(x, b.wk);
    let v = g.matmul(x, b.wv);
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / (b.d as f64).sqrt());
    let attn = g.softmax_rows(scores);
    let ctx = g.matmul(attn, v);
    let out = g.matmul(ctx, b.wo);
    let h = g.add(x, out);
    let f = g.matmul(h, b.w1);
    let f = g.add_row(f, b.b1);
    let f = g.gelu(f);
    let f = g.matmul(f, b.w2);
    let f = g.add_row(f, b.b2);
    g.add(h, f)
}
