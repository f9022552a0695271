//! Patch graphs and graph propagation.
//!
//! The similarity graph links patches whose similarity profiles over the
//! description bank agree: `S = softmax_rows(cos(P, Z) / tau)`,
//! `A = softmax_rows(cos(S_i, S_j) / tau)`. KNN graphs over coordinates or
//! patch features are the alternatives. Propagation is a stack of GCN layers
//! `sigma(D^-1/2 (A + I) D^-1/2 H W)` with GELU on hidden layers and identity
//! on the last.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::selection::normalized;
use crate::tape::{gelu, softmax_rows, Graph, Mat, NodeId, ParamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    fn apply(self, m: Mat) -> Mat {
        match self {
            Activation::Identity => m,
            Activation::Gelu => m.mapv(gelu),
        }
    }

    fn on_graph(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Gelu => g.gelu(x),
        }
    }

    /// GELU between layers, identity on the last one.
    pub fn for_layer(layer: usize, layers: usize) -> Self {
        if layer + 1 == layers {
            Activation::Identity
        } else {
            Activation::Gelu
        }
    }
}

/// S and A for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityState {
    pub s: Mat,
    pub a: Mat,
    pub tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(vec![format!("tau must be > 0, got {tau}")]))
    }
}

fn cosine_softmax(a: &Mat, b: &Mat, tau: f64, context: &'static str) -> Result<Mat> {
    check_tau(tau)?;
    if a.ncols() != b.ncols() {
        return Err(Error::shape(context, a.ncols(), b.ncols()));
    }
    let an = normalized(a, context)?;
    let bn = normalized(b, context)?;
    Ok(softmax_rows(&(an.dot(&bn.t()) / tau)))
}

/// `M × KC` row-stochastic patch-to-description similarity.
pub fn semantic_similarity(p: &Mat, z: &Mat, tau: f64) -> Result<Mat> {
    cosine_softmax(p, z, tau, "semantic similarity")
}

/// `M × M` row-stochastic adjacency from the rows of `s`.
pub fn adjacency_from_similarity(s: &Mat, tau: f64) -> Result<Mat> {
    cosine_softmax(s, s, tau, "adjacency")
}

pub fn similarity_state(p: &Mat, z: &Mat, tau: f64) -> Result<SimilarityState> {
    let s = semantic_similarity(p, z, tau)?;
    let a = adjacency_from_similarity(&s, tau)?;
    Ok(SimilarityState { s, a, tau })
}

/// Differentiable `softmax_rows(cos(a, b) / tau)`. Rows must be non-zero.
pub fn cosine_softmax_on_graph(g: &mut Graph, a: NodeId, b: NodeId, tau: f64) -> NodeId {
    let an = g.normalize_rows(a);
    let bn = if a == b { an } else { g.normalize_rows(b) };
    let cos = g.matmul_t(an, bn);
    let logits = g.scale(cos, 1.0 / tau);
    g.softmax_rows(logits)
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the row sums of `A + I`.
pub fn normalized_adjacency(a: &Mat) -> Result<Mat> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::shape("adjacency", format!("{m}x{m}"), format!("{m}x{n}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adjacency"));
    }
    if a.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidConfig(vec!["adjacency has negative entries".into()]));
    }
    let at = a + &Mat::eye(m);
    let dinv: Vec<f64> = at.rows().into_iter().map(|r| r.sum().powf(-0.5)).collect();
    Ok(Mat::from_shape_fn((m, m), |(i, j)| dinv[i] * at[[i, j]] * dinv[j]))
}

pub fn normalized_adjacency_on_graph(g: &mut Graph, a: NodeId) -> NodeId {
    let m = g.value(a).nrows();
    let eye = g.constant(Mat::eye(m));
    let at = g.add(a, eye);
    let deg = g.row_sums(at);
    let dinv = g.powf(deg, -0.5);
    let rows = g.scale_rows(at, dinv);
    let t = g.transpose(rows);
    let both = g.scale_rows(t, dinv);
    g.transpose(both)
}

pub fn gcn_layer(a: &Mat, h: &Mat, w: &Mat, activation: Activation) -> Result<Mat> {
    if a.nrows() != h.nrows() {
        return Err(Error::shape("gcn node count", a.nrows(), h.nrows()));
    }
    if h.ncols() != w.nrows() {
        return Err(Error::shape("gcn weight rows", h.ncols(), w.nrows()));
    }
    if h.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn input"));
    }
    let n = normalized_adjacency(a)?;
    Ok(activation.apply(n.dot(h).dot(w)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub weights: Vec<Mat>,
}

impl GcnParams {
    pub fn identity(d: usize, layers: usize) -> Self {
        Self {
            weights: vec![Mat::eye(d); layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidConfig(vec!["gcn_layers must be >= 1".into()]));
        }
        for w in &self.weights {
            if w.nrows() != w.ncols() {
                return Err(Error::shape("gcn weight", "square", format!("{}x{}", w.nrows(), w.ncols())));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gcn weight"));
            }
        }
        Ok(())
    }
}

pub fn graph_prompt_tune(p: &Mat, a: &Mat, params: &GcnParams) -> Result<Mat> {
    params.validate()?;
    let layers = params.weights.len();
    let mut h = p.clone();
    for (l, w) in params.weights.iter().enumerate() {
        h = gcn_layer(a, &h, w, Activation::for_layer(l, layers))?;
    }
    Ok(h)
}

/// Trainable GCN weights of one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GcnKeys(pub Vec<ParamKey>);

impl GcnKeys {
    pub fn register(store: &mut ParamStore, prefix: &str, params: GcnParams) -> Self {
        Self(
            params
                .weights
                .into_iter()
                .enumerate()
                .map(|(l, w)| store.add(format!("{prefix}.{l}"), w))
                .collect(),
        )
    }

    pub fn read(&self, store: &ParamStore) -> GcnParams {
        GcnParams {
            weights: self.0.iter().map(|&k| store.get(k).clone()).collect(),
        }
    }

    /// Stacked layers on the tape; `a` is the raw (un-normalized) adjacency.
    pub fn apply_on_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        a: NodeId,
        p: NodeId,
    ) -> NodeId {
        let norm = normalized_adjacency_on_graph(g, a);
        let mut h = p;
        for (l, &key) in self.0.iter().enumerate() {
            let w = binder.node(g, store, key);
            let nh = g.matmul(norm, h);
            let lin = g.matmul(nh, w);
            h = Activation::for_layer(l, self.0.len()).on_graph(g, lin);
        }
        h
    }
}

fn knn_from_order(m: usize, k: usize, mut order: impl FnMut(usize) -> Vec<usize>) -> Result<Mat> {
    if k == 0 || k + 1 > m {
        return Err(Error::KnnRange { k, nodes: m });
    }
    let mut a = Mat::zeros((m, m));
    for i in 0..m {
        for j in order(i).into_iter().take(k) {
            a[[i, j]] = 1.0 / k as f64;
        }
    }
    Ok(a)
}

/// Edge `i -> j` for the `k` nearest coordinates of `i` (Euclidean, ties to the
/// lower index); rows normalized to sum to one.
pub fn knn_graph_coords(coords: &[[u32; 2]], k: usize) -> Result<Mat> {
    let m = coords.len();
    knn_from_order(m, k, |i| {
        let d2 = |j: usize| {
            let dx = f64::from(coords[i][0]) - f64::from(coords[j][0]);
            let dy = f64::from(coords[i][1]) - f64::from(coords[j][1]);
            dx * dx + dy * dy
        };
        let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
        others
    })
}

/// As [`knn_graph_coords`], ranking neighbours by descending cosine similarity
/// of the rows of `p`.
pub fn knn_graph_features(p: &Mat, k: usize) -> Result<Mat> {
    let m = p.nrows();
    if k == 0 || k + 1 > m {
        return Err(Error::KnnRange { k, nodes: m });
    }
    let pn = normalized(p, "knn features")?;
    let cos = pn.dot(&pn.t());
    knn_from_order(m, k, |i| {
        let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| cos[[i, b]].total_cmp(&cos[[i, a]]).then(a.cmp(&b)));
        others
    })
}
