//! Non-parametric cross-guided pooling.
//!
//! For category `k`, the score block of patches `P` against the `C`
//! descriptions of `k` is `P · Z[k]ᵀ` (M × C). A block is pooled by the mean of
//! its `k_top` largest entries. Per scale, the logit of `k` adds the pooled
//! same-scale block and the pooled cross-scale block; the overall logit is the
//! mean of the two scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{log_softmax_rows, ranked_entries, Graph, Mat, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsTriple {
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub overall: Vec<f64>,
}

impl LogitsTriple {
    /// Builds the triple with `overall = (high + low) / 2`.
    pub fn from_scales(high: Vec<f64>, low: Vec<f64>) -> Self {
        let overall = high.iter().zip(&low).map(|(h, l)| (h + l) / 2.0).collect();
        Self { high, low, overall }
    }

    pub fn num_classes(&self) -> usize {
        self.overall.len()
    }
}

pub fn topk_pool(scores: &Mat, k_top: usize) -> Result<f64> {
    if k_top == 0 || k_top > scores.len() {
        return Err(Error::TopKTooLarge {
            k: k_top,
            available: scores.len(),
        });
    }
    let sum: f64 = ranked_entries(scores)
        .into_iter()
        .take(k_top)
        .map(|(r, c)| scores[[r, c]])
        .sum();
    Ok(sum / k_top as f64)
}

fn check_blocks(z: &Mat, num_classes: usize, d: usize) -> Result<usize> {
    if num_classes == 0 || z.nrows() % num_classes != 0 || z.nrows() == 0 {
        return Err(Error::shape(
            "description rows",
            format!("a positive multiple of {num_classes}"),
            z.nrows(),
        ));
    }
    if z.ncols() != d {
        return Err(Error::shape("description width", d, z.ncols()));
    }
    Ok(z.nrows() / num_classes)
}

fn pooled(p: &Mat, z: &Mat, k: usize, c: usize, k_top: usize) -> Result<f64> {
    let block = z.slice(ndarray::s![k * c..(k + 1) * c, ..]);
    topk_pool(&p.dot(&block.t()), k_top)
}

/// Plain-value logits. Without cross guidance only the same-scale terms count.
pub fn cross_guided_logits(
    p_high: &Mat,
    p_low: &Mat,
    z_high: &Mat,
    z_low: &Mat,
    num_classes: usize,
    k_top: usize,
    cross: bool,
) -> Result<LogitsTriple> {
    let d = p_high.ncols();
    if p_low.ncols() != d {
        return Err(Error::shape("patch width", d, p_low.ncols()));
    }
    let c_high = check_blocks(z_high, num_classes, d)?;
    let c_low = check_blocks(z_low, num_classes, d)?;
    let mut high = vec![0.0; num_classes];
    let mut low = vec![0.0; num_classes];
    for k in 0..num_classes {
        high[k] = pooled(p_high, z_high, k, c_high, k_top)?;
        low[k] = pooled(p_low, z_low, k, c_low, k_top)?;
        if cross {
            high[k] += pooled(p_high, z_low, k, c_low, k_top)?;
            low[k] += pooled(p_low, z_high, k, c_high, k_top)?;
        }
    }
    Ok(LogitsTriple::from_scales(high, low))
}

/// Tape nodes for the three `1 × K` logit rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogitNodes {
    pub high: NodeId,
    pub low: NodeId,
    pub overall: NodeId,
}

fn pooled_row(g: &mut Graph, p: NodeId, z: NodeId, num_classes: usize, k_top: usize) -> Result<NodeId> {
    let c = g.value(z).nrows() / num_classes;
    let available = g.value(p).nrows() * c;
    if k_top == 0 || k_top > available {
        return Err(Error::TopKTooLarge { k: k_top, available });
    }
    let scores = g.matmul_t(p, z);
    let parts: Vec<NodeId> = (0..num_classes)
        .map(|k| {
            let block = g.slice_cols(scores, k * c, c);
            g.topk_mean(block, k_top)
        })
        .collect();
    Ok(g.concat_cols(&parts))
}

#[allow(clippy::too_many_arguments)]
pub fn cross_guided_on_graph(
    g: &mut Graph,
    p_high: NodeId,
    p_low: NodeId,
    z_high: NodeId,
    z_low: NodeId,
    num_classes: usize,
    k_top: usize,
    cross: bool,
) -> Result<LogitNodes> {
    let d = g.value(p_high).ncols();
    check_blocks(&g.value(z_high).clone(), num_classes, d)?;
    check_blocks(&g.value(z_low).clone(), num_classes, d)?;
    let mut high = pooled_row(g, p_high, z_high, num_classes, k_top)?;
    let mut low = pooled_row(g, p_low, z_low, num_classes, k_top)?;
    if cross {
        let hx = pooled_row(g, p_high, z_low, num_classes, k_top)?;
        let lx = pooled_row(g, p_low, z_high, num_classes, k_top)?;
        high = g.add(high, hx);
        low = g.add(low, lx);
    }
    Ok(LogitNodes {
        high,
        low,
        overall: overall_on_graph(g, high, low),
    })
}

pub fn overall_on_graph(g: &mut Graph, high: NodeId, low: NodeId) -> NodeId {
    let s = g.add(high, low);
    g.scale(s, 0.5)
}

/// Loss weights for the overall, high and low cross-entropies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub overall: f64,
    pub high: f64,
    pub low: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            overall: 1.0,
            high: 1.0,
            low: 1.0,
        }
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let row = Mat::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row");
    -log_softmax_rows(&row)[[0, label]]
}

pub fn triple_loss(triple: &LogitsTriple, label: usize, weights: LossWeights) -> Result<f64> {
    let classes = triple.num_classes();
    if label >= classes {
        return Err(Error::LabelRange { label, classes });
    }
    let loss = weights.overall * cross_entropy(&triple.overall, label)
        + weights.high * cross_entropy(&triple.high, label)
        + weights.low * cross_entropy(&triple.low, label);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

pub fn loss_on_graph(
    g: &mut Graph,
    logits: LogitNodes,
    label: usize,
    weights: LossWeights,
) -> Result<NodeId> {
    let classes = g.value(logits.overall).ncols();
    if label >= classes {
        return Err(Error::LabelRange { label, classes });
    }
    let mut terms = Vec::with_capacity(3);
    for (node, w) in [
        (logits.overall, weights.overall),
        (logits.high, weights.high),
        (logits.low, weights.low),
    ] {
        let ls = g.log_softmax_rows(node);
        let picked = g.pick(ls, 0, label);
        terms.push(g.scale(picked, -w));
    }
    let sum = g.add(terms[0], terms[1]);
    Ok(g.add(sum, terms[2]))
}

/// Argmax of the overall logits; ties go to the lower index.
pub fn predict(triple: &LogitsTriple) -> usize {
    argmax(&triple.overall)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
