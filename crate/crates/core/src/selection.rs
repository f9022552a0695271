//! Zero-shot patch scoring against averaged category templates and top-n patch
//! selection at the low scale.
//!
//! Template bank file: one `[category]` header per category followed by one
//! template per line. Blank lines and `#` comments are ignored.

use std::path::Path;

use crate::bag::{Bag, Scale};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::tape::{row_norms, softmax_rows, Mat};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    pub categories: Vec<(String, Vec<String>)>,
}

impl TemplateBank {
    pub fn parse(text: &str) -> Result<Self> {
        let mut categories: Vec<(String, Vec<String>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() || categories.iter().any(|(c, _)| c == name) {
                    return Err(Error::Templates(format!(
                        "line {}: empty or repeated category `{name}`",
                        n + 1
                    )));
                }
                categories.push((name.to_string(), Vec::new()));
            } else {
                let (_, list) = categories.last_mut().ok_or_else(|| {
                    Error::Templates(format!("line {}: template before any [category]", n + 1))
                })?;
                list.push(line.to_string());
            }
        }
        if categories.is_empty() {
            return Err(Error::Templates("no categories".into()));
        }
        if let Some((name, _)) = categories.iter().find(|(_, t)| t.is_empty()) {
            return Err(Error::Templates(format!("category `{name}` has no templates")));
        }
        Ok(Self { categories })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, list) in &self.categories {
            out.push_str(&format!("[{name}]\n"));
            for t in list {
                out.push_str(t);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }
}

/// Softmax over categories of `cos(x, w_k) / tau`.
pub fn zero_shot_probs(x: &Mat, w: &Mat, tau: f64) -> Result<Vec<f64>> {
    if x.nrows() != 1 || x.ncols() != w.ncols() {
        return Err(Error::shape(
            "zero-shot input",
            format!("1x{}", w.ncols()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(zero_shot_matrix(x, w, tau)?.row(0).to_vec())
}

/// Zero-shot probabilities for every row of `p` (M × d) against `w` (K × d).
pub fn zero_shot_matrix(p: &Mat, w: &Mat, tau: f64) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(vec![format!("tau must be > 0, got {tau}")]));
    }
    let pn = normalized(p, "patch embedding")?;
    let wn = normalized(w, "category embedding")?;
    Ok(softmax_rows(&(pn.dot(&wn.t()) / tau)))
}

pub(crate) fn normalized(m: &Mat, context: &'static str) -> Result<Mat> {
    let norms = row_norms(m);
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::ZeroNorm { context, row });
    }
    let mut out = m.clone();
    for (mut r, n) in out.rows_mut().into_iter().zip(norms) {
        r.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Mean of the rows, L2-normalized.
pub fn mean_normalized(embeddings: &Mat) -> Result<Mat> {
    if embeddings.nrows() == 0 {
        return Err(Error::Templates("no template embeddings to average".into()));
    }
    let mean = embeddings.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
    normalized(&mean, "averaged template embedding")
}

pub fn template_class_embedding(templates: &[String], text: &TextEncoder) -> Result<Mat> {
    if templates.is_empty() {
        return Err(Error::Templates("empty template list".into()));
    }
    let mut rows = Mat::zeros((templates.len(), text.d_joint()));
    for (i, t) in templates.iter().enumerate() {
        let (z, _) = text.encode_text_frozen(&text.tokenize(t))?;
        rows.row_mut(i).assign(&z.row(0));
    }
    mean_normalized(&rows)
}

/// Averaged embedding of every category, K × d_joint.
pub fn class_embeddings(bank: &TemplateBank, text: &TextEncoder) -> Result<Mat> {
    let mut w = Mat::zeros((bank.num_classes(), text.d_joint()));
    for (k, (_, templates)) in bank.categories.iter().enumerate() {
        w.row_mut(k).assign(&template_class_embedding(templates, text)?.row(0));
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Per category, instance indices ranked by descending probability.
    pub per_category: Vec<Vec<usize>>,
    /// Deduplicated union in ascending index order.
    pub union: Vec<usize>,
    /// Zero-shot probabilities, M × K.
    pub probs: Mat,
}

/// Keeps the `n_select` most probable instances per category; ties go to the
/// lower instance index.
pub fn rank_patches(p: &Mat, w: &Mat, n_select: usize, tau: f64) -> Result<Selection> {
    let probs = zero_shot_matrix(p, w, tau)?;
    let m = probs.nrows();
    let per_category: Vec<Vec<usize>> = (0..probs.ncols())
        .map(|k| {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| probs[[b, k]].total_cmp(&probs[[a, k]]).then(a.cmp(&b)));
            idx.truncate(n_select.min(m));
            idx
        })
        .collect();
    let mut union: Vec<usize> = per_category.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    Ok(Selection {
        per_category,
        union,
        probs,
    })
}

pub fn select_patches(
    bag: &Bag,
    image: &ImageEncoder,
    w: &Mat,
    n_select: usize,
    tau: f64,
) -> Result<Selection> {
    let view = bag.view(Scale::Low)?;
    let p = image.encode_image_frozen(&view.instances)?;
    rank_patches(&p, w, n_select, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn orthogonal_input_gives_uniform_probs() {
        let w = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let x = array![[0.0, 0.0, 0.0, 2.0]];
        for p in zero_shot_probs(&x, &w, 0.07).unwrap() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_class_softmax_value() {
        // cos = (1, 0), tau = 1: e/(e+1) = 0.7310585786, 1/(e+1) = 0.2689414214
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let p = zero_shot_probs(&array![[3.0, 0.0]], &w, 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.2689, epsilon = 1e-4);
        assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_cosines_give_half() {
        let w = array![[1.0, 1.0], [1.0, -1.0]];
        for tau in [0.01, 0.5, 3.0] {
            let p = zero_shot_probs(&array![[2.0, 0.0]], &w, tau).unwrap();
            assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_norm_is_an_error() {
        let w = array![[1.0, 0.0]];
        assert!(matches!(
            zero_shot_probs(&array![[0.0, 0.0]], &w, 1.0),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn averaged_embedding_of_hand_set_rows() {
        let v = mean_normalized(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(v[[0, 0]], 0.7071, epsilon = 1e-4);
        assert_abs_diff_eq!(v[[0, 1]], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        let single = mean_normalized(&array![[3.0, 4.0]]).unwrap();
        assert_abs_diff_eq!(single[[0, 0]], 0.6, epsilon = 1e-12);
        let repeated = mean_normalized(&array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]).unwrap();
        assert!((repeated - &single).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn saturation_and_cosine_maximum() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let p = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0], [0.1, 0.0, 1.0]];
        let sel = rank_patches(&p, &w, 10, 0.07).unwrap();
        assert_eq!(sel.per_category[0].len(), 4);
        assert_eq!(sel.per_category[0][0], 1);
        assert_eq!(sel.union, vec![0, 1, 2, 3]);
        let top1 = rank_patches(&p, &w, 1, 0.07).unwrap();
        assert_eq!(top1.per_category[0], vec![1]);
    }

    #[test]
    fn ties_break_by_index() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let p = array![[1.0, 1.0], [2.0, 2.0], [1.0, 1.0]];
        let sel = rank_patches(&p, &w, 2, 0.5).unwrap();
        assert_eq!(sel.per_category[0], vec![0, 1]);
    }

    #[test]
    fn template_file_round_trip() {
        let text = "# demo\n[alpha]\na photo of alpha\n\n[beta]\nbeta here\nanother beta\n";
        let bank = TemplateBank::parse(text).unwrap();
        assert_eq!(bank.num_classes(), 2);
        assert_eq!(bank.categories[1].1.len(), 2);
        assert_eq!(TemplateBank::parse(&bank.to_text()).unwrap(), bank);
        assert!(TemplateBank::parse("loose line\n").is_err());
        assert!(TemplateBank::parse("[a]\n[b]\nx\n").is_err());
    }
}
