//! Reference aggregators: mean and max pooling, and gated attention pooling
//! feeding a linear category head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::transformer::gaussian;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{sigmoid, softmax_rows, Graph, Mat, NodeId, ParamKey};

fn non_empty(p: &Mat) -> Result<()> {
    if p.nrows() == 0 {
        Err(Error::InvalidBag("cannot pool an empty bag".into()))
    } else {
        Ok(())
    }
}

pub fn mean_pool(p: &Mat) -> Result<Mat> {
    non_empty(p)?;
    Ok(p.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0)))
}

pub fn max_pool(p: &Mat) -> Result<Mat> {
    non_empty(p)?;
    Ok(p.fold_axis(ndarray::Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b))
        .insert_axis(ndarray::Axis(0)))
}

/// Gated attention `a = softmax(w · (tanh(P V) ⊙ sigmoid(P U)))` and a linear
/// head on the attended embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoolParams {
    pub v: Mat,
    pub u: Mat,
    pub w: Mat,
    pub head: Mat,
    pub bias: Mat,
}

impl AttentionPoolParams {
    /// Hidden width `d / 2`; the head starts at `head_init` (d × K).
    pub fn init(d: usize, head_init: Mat, rng: &mut impl Rng) -> Self {
        let hidden = (d / 2).max(1);
        let k = head_init.ncols();
        Self {
            v: gaussian(d, hidden, 1.0 / (d as f64).sqrt(), rng),
            u: gaussian(d, hidden, 1.0 / (d as f64).sqrt(), rng),
            w: gaussian(hidden, 1, 1.0 / (hidden as f64).sqrt(), rng),
            head: head_init,
            bias: Mat::zeros((1, k)),
        }
    }

    fn scores(&self, p: &Mat) -> Mat {
        let gate = p.dot(&self.u).mapv(sigmoid);
        let h = p.dot(&self.v).mapv(f64::tanh) * gate;
        h.dot(&self.w).t().to_owned()
    }
}

/// Attended embedding (1 × d) and the attention weights over instances.
pub fn attention_pool(p: &Mat, params: &AttentionPoolParams) -> Result<(Mat, Vec<f64>)> {
    non_empty(p)?;
    if p.ncols() != params.v.nrows() {
        return Err(Error::shape("attention input width", params.v.nrows(), p.ncols()));
    }
    let a = softmax_rows(&params.scores(p));
    Ok((a.dot(p), a.row(0).to_vec()))
}

pub fn attention_logits(p: &Mat, params: &AttentionPoolParams) -> Result<Vec<f64>> {
    let (emb, _) = attention_pool(p, params)?;
    Ok((emb.dot(&params.head) + &params.bias).row(0).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionKeys {
    pub v: ParamKey,
    pub u: ParamKey,
    pub w: ParamKey,
    pub head: ParamKey,
    pub bias: ParamKey,
}

impl AttentionKeys {
    pub fn register(store: &mut ParamStore, prefix: &str, p: AttentionPoolParams) -> Self {
        Self {
            v: store.add(format!("{prefix}.v"), p.v),
            u: store.add(format!("{prefix}.u"), p.u),
            w: store.add(format!("{prefix}.w"), p.w),
            head: store.add(format!("{prefix}.head"), p.head),
            bias: store.add(format!("{prefix}.bias"), p.bias),
        }
    }

    pub fn read(&self, store: &ParamStore) -> AttentionPoolParams {
        AttentionPoolParams {
            v: store.get(self.v).clone(),
            u: store.get(self.u).clone(),
            w: store.get(self.w).clone(),
            head: store.get(self.head).clone(),
            bias: store.get(self.bias).clone(),
        }
    }

    pub fn keys(&self) -> [ParamKey; 5] {
        [self.v, self.u, self.w, self.head, self.bias]
    }

    /// Returns `(1 × K logits, 1 × M attention weights)`.
    pub fn logits_on_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        p: NodeId,
    ) -> (NodeId, NodeId) {
        let [v, u, w, head, bias] = self.keys().map(|k| binder.node(g, store, k));
        let pv = g.matmul(p, v);
        let t = g.tanh(pv);
        let pu = g.matmul(p, u);
        let s = g.sigmoid(pu);
        let h = g.mul(t, s);
        let scores = g.matmul(h, w);
        let row = g.transpose(scores);
        let a = g.softmax_rows(row);
        let emb = g.matmul(a, p);
        let lin = g.matmul(emb, head);
        (g.add_row(lin, bias), a)
    }
}
