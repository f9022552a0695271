//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar (1×1) node sweeps the record in reverse and
//! returns [`Gradients`] for every node, from which the gradients of trainable
//! leaves are read by their [`ParamKey`].
//!
//! Everything is two-dimensional; vectors are 1×n rows. The op set is exactly
//! what the encoders, graph propagation, pooling and losses need.

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Index of a trainable tensor inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    Powf(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    RowSums(NodeId),
    MeanOverRows(NodeId),
    MaxOverRows(NodeId, Vec<usize>),
    TopKMean(NodeId, Vec<(usize, usize)>),
    Pick(NodeId, usize, usize),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    param: Option<ParamKey>,
}

/// Operation record. Nodes are append-only; ids stay valid for the graph's life.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// L2 norms of each row.
pub fn row_norms(x: &Mat) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Entries of `x` ordered by value descending, ties by row-major position.
pub fn ranked_entries(x: &Mat) -> Vec<(usize, usize)> {
    let cols = x.ncols();
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        let va = x[[a / cols, a % cols]];
        let vb = x[[b / cols, b % cols]];
        vb.total_cmp(&va).then(a.cmp(&b))
    });
    idx.into_iter().map(|i| (i / cols, i % cols)).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, key: ParamKey, value: Mat) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].param = Some(key);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies row i of an m×n matrix by entry i of an m×1 column.
    pub fn scale_rows(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::ScaleRows(a, col))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn powf(&mut self, a: NodeId, exponent: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.powf(exponent));
        self.push(v, Op::Powf(a, exponent))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Divides each row by its L2 norm. Rows must be non-zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let norms = row_norms(x);
        let mut v = x.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(norms) {
            row.mapv_inplace(|e| e / n);
        }
        self.push(v, Op::NormalizeRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let ts: Vec<_> = parts.iter().map(|&p| self.transpose(p)).collect();
        let cat = self.concat_rows(&ts);
        self.transpose(cat)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.transpose(a);
        let sl = self.slice_rows(t, start, len);
        self.transpose(sl)
    }

    /// m×n → m×1 row sums.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a))
    }

    /// m×n → 1×n column means.
    pub fn mean_over_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / x.nrows() as f64;
        self.push(v, Op::MeanOverRows(a))
    }

    /// m×n → 1×n column maxima (ties resolve to the lowest row).
    pub fn max_over_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut arg = vec![0usize; x.ncols()];
        let mut v = Mat::zeros((1, x.ncols()));
        for c in 0..x.ncols() {
            let mut best = 0;
            for r in 1..x.nrows() {
                if x[[r, c]] > x[[best, c]] {
                    best = r;
                }
            }
            arg[c] = best;
            v[[0, c]] = x[[best, c]];
        }
        self.push(v, Op::MaxOverRows(a, arg))
    }

    /// Mean of the `k` largest entries of the whole matrix, as a 1×1 node.
    pub fn topk_mean(&mut self, a: NodeId, k: usize) -> NodeId {
        let x = self.value(a);
        assert!(k >= 1 && k <= x.len(), "topk_mean: k out of range");
        let chosen: Vec<(usize, usize)> = ranked_entries(x).into_iter().take(k).collect();
        let mean = chosen.iter().map(|&(r, c)| x[[r, c]]).sum::<f64>() / k as f64;
        self.push(Mat::from_elem((1, 1), mean), Op::TopKMean(a, chosen))
    }

    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(v, Op::Pick(a, row, col))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::ones((1, 1)));
        let mut params = std::collections::BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(key) = node.param {
                        params
                            .entry(key)
                            .and_modify(|acc: &mut Mat| *acc += &g)
                            .or_insert(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, gr);
                }
                Op::ScaleRows(a, col) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * self.value(*col);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Powf(a, p) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= p * x.powf(p - 1.0));
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|v, &yy| *v -= yy * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let mut ga = g.clone();
                    for ((mut row, grow), prow) in
                        ga.rows_mut().into_iter().zip(g.rows()).zip(p.rows())
                    {
                        let total: f64 = grow.sum();
                        Zip::from(&mut row).and(&prow).for_each(|v, &pp| *v -= pp * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let y = &node.value;
                    let norms = row_norms(self.value(*a));
                    let mut ga = g.clone();
                    for (((mut row, grow), yrow), n) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows())
                        .zip(y.rows())
                        .zip(norms)
                    {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut row)
                            .and(&grow)
                            .and(&yrow)
                            .for_each(|v, &gg, &yy| *v = (gg - yy * dot) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let gp = g.slice(s![start..start + rows, ..]).to_owned();
                        acc(&mut grads, p, gp);
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let src = self.value(*a);
                    let ga = Mat::from_shape_fn(src.dim(), |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanOverRows(a) => {
                    let src = self.value(*a);
                    let m = src.nrows() as f64;
                    let ga = Mat::from_shape_fn(src.dim(), |(_, c)| g[[0, c]] / m);
                    acc(&mut grads, *a, ga);
                }
                Op::MaxOverRows(a, arg) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (c, &r) in arg.iter().enumerate() {
                        ga[[r, c]] = g[[0, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::TopKMean(a, chosen) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    let share = g[[0, 0]] / chosen.len() as f64;
                    for &(r, c) in chosen {
                        ga[[r, c]] += share;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { params }
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of trainable leaves, summed over every leaf bound to the same key.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: std::collections::BTreeMap<ParamKey, Mat>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Mat> {
        self.params.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Mat)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Drops every key not in `keys`.
    pub fn retain(&mut self, keys: &[ParamKey]) {
        self.params.retain(|k, _| keys.contains(k));
    }
}
