//! Multi-scale description bank and its embedding.
//!
//! Bank file format:
//!
//! ```text
//! # provenance: synthetic lexicon generator, seed 0
//! [tumour.low]
//! one description per line
//! ...
//! [tumour.high]
//! ...
//! ```
//!
//! Category order is the order of first appearance. Each category needs both a
//! `low` and a `high` section. Embedding rows are category-major:
//! row `k * C + c` holds description `c` of category `k`.

use std::collections::HashSet;
use std::path::Path;

use crate::bag::Scale;
use crate::config::ModelConfig;
use crate::encoders::{stack_traces, LayerTokenTrace, PromptGenerator, TextEncoder};
use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryDescriptions {
    pub name: String,
    pub low: Vec<String>,
    pub high: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionBank {
    pub provenance: String,
    pub categories: Vec<CategoryDescriptions>,
}

/// `(category, scale, index)` for every embedding row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowId {
    pub category: usize,
    pub scale: Scale,
    pub index: usize,
}

impl DescriptionBank {
    pub fn parse(text: &str) -> Result<Self> {
        let mut provenance = String::new();
        let mut categories: Vec<CategoryDescriptions> = Vec::new();
        let mut current: Option<(usize, Scale)> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(p) = line.strip_prefix("# provenance:") {
                provenance = p.trim().to_string();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let (name, scale) = header.rsplit_once('.').ok_or_else(|| {
                    Error::Bank(format!("line {}: section `{header}` lacks a .low/.high suffix", n + 1))
                })?;
                let scale: Scale = scale
                    .parse()
                    .map_err(|_| Error::Bank(format!("line {}: unknown scale in `{header}`", n + 1)))?;
                let k = match categories.iter().position(|c| c.name == name) {
                    Some(k) => k,
                    None => {
                        categories.push(CategoryDescriptions {
                            name: name.to_string(),
                            low: Vec::new(),
                            high: Vec::new(),
                        });
                        categories.len() - 1
                    }
                };
                current = Some((k, scale));
                continue;
            }
            let (k, scale) = current.ok_or_else(|| {
                Error::Bank(format!("line {}: description before any section", n + 1))
            })?;
            let c = &mut categories[k];
            match scale {
                Scale::Low => c.low.push(line.to_string()),
                Scale::High => c.high.push(line.to_string()),
            }
        }
        Ok(Self {
            provenance,
            categories,
        })
    }

    /// Checks category and per-scale counts against `cfg`. Repeated
    /// descriptions are logged, not rejected.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.categories.len() != cfg.num_classes {
            return Err(Error::Bank(format!(
                "{} categories, configuration expects {}",
                self.categories.len(),
                cfg.num_classes
            )));
        }
        for c in &self.categories {
            for (scale, list, want) in [(Scale::Low, &c.low, cfg.c_low), (Scale::High, &c.high, cfg.c_high)] {
                if list.len() != want {
                    return Err(Error::Bank(format!(
                        "category `{}`, scale {scale}: {} descriptions, expected {want}",
                        c.name,
                        list.len()
                    )));
                }
                if list.iter().any(|d| d.trim().is_empty()) {
                    return Err(Error::Bank(format!(
                        "category `{}`, scale {scale}: empty description",
                        c.name
                    )));
                }
                let mut seen = HashSet::new();
                for d in list {
                    if !seen.insert(d) {
                        log::warn!("category `{}`, scale {scale}: repeated description `{d}`", c.name);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank = Self::parse(&text)?;
        bank.validate(cfg)?;
        Ok(bank)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# provenance: {}\n", self.provenance);
        for c in &self.categories {
            for (scale, list) in [(Scale::Low, &c.low), (Scale::High, &c.high)] {
                out.push_str(&format!("\n[{}.{scale}]\n", c.name));
                for d in list {
                    out.push_str(d);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Descriptions of one scale in row order.
    pub fn flattened(&self, scale: Scale) -> Vec<&str> {
        self.categories
            .iter()
            .flat_map(|c| match scale {
                Scale::Low => &c.low,
                Scale::High => &c.high,
            })
            .map(String::as_str)
            .collect()
    }

    pub fn row_ids(&self, scale: Scale) -> Vec<RowId> {
        self.categories
            .iter()
            .enumerate()
            .flat_map(|(k, c)| {
                let n = match scale {
                    Scale::Low => c.low.len(),
                    Scale::High => c.high.len(),
                };
                (0..n).map(move |index| RowId {
                    category: k,
                    scale,
                    index,
                })
            })
            .collect()
    }

    /// Every string in the bank, for fitting a tokenizer.
    pub fn corpus(&self) -> impl Iterator<Item = &str> {
        self.categories
            .iter()
            .flat_map(|c| c.low.iter().chain(&c.high))
            .map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionEmbeddings {
    /// `K·C_low × d_joint`, frozen encoder.
    pub z_low: Mat,
    /// `K·C_high × d_joint`, hierarchically prompted encoder.
    pub z_high: Mat,
    pub low_ids: Vec<RowId>,
    pub high_ids: Vec<RowId>,
}

/// Frozen traces of each category's low-scale descriptions.
pub fn low_traces(bank: &DescriptionBank, text: &TextEncoder) -> Result<(Mat, Vec<Vec<LayerTokenTrace>>)> {
    let ids = bank.row_ids(Scale::Low);
    let mut z_low = Mat::zeros((ids.len(), text.d_joint()));
    let mut traces = vec![Vec::new(); bank.num_classes()];
    for (row, (id, d)) in ids.iter().zip(bank.flattened(Scale::Low)).enumerate() {
        let (z, trace) = text.encode_text_frozen(&text.tokenize(d))?;
        z_low.row_mut(row).assign(&z.row(0));
        traces[id.category].push(trace);
    }
    Ok((z_low, traces))
}

/// Plain-value embedding of both scales. `p_glob` holds one prompt block per
/// text layer; `generator` of `None` disables the low-scale prompts.
pub fn embed_description_bank(
    bank: &DescriptionBank,
    text: &TextEncoder,
    p_glob: &[Mat],
    generator: Option<&PromptGenerator>,
) -> Result<DescriptionEmbeddings> {
    let (z_low, traces) = low_traces(bank, text)?;
    let high_ids = bank.row_ids(Scale::High);
    let mut z_high = Mat::zeros((high_ids.len(), text.d_joint()));
    let empty = vec![Mat::zeros((0, text.d_model())); text.depth()];
    let mut p_low_per_category = Vec::with_capacity(bank.num_classes());
    for t in &traces {
        p_low_per_category.push(match generator {
            Some(gen) => stack_traces(t)?.iter().map(|m| gen.apply(m)).collect(),
            None => empty.clone(),
        });
    }
    for (row, (id, d)) in high_ids.iter().zip(bank.flattened(Scale::High)).enumerate() {
        let z = text.encode_text_prompted(&text.tokenize(d), p_glob, &p_low_per_category[id.category])?;
        z_high.row_mut(row).assign(&z.row(0));
    }
    Ok(DescriptionEmbeddings {
        z_low,
        z_high,
        low_ids: bank.row_ids(Scale::Low),
        high_ids,
    })
}
