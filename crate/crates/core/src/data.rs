//! Synthetic two-scale bags, their text side (lexicon, descriptions,
//! templates) and on-disk persistence.
//!
//! Geometry: low-scale instances occupy distinct cells of a `grid × grid`
//! lattice; every low cell `(x, y)` has between one and four high-scale
//! children at `(2x + dx, 2y + dy)`. A child inherits its parent's tissue
//! type, so high-scale witnesses always sit inside low-scale witness cells.
//!
//! Features are a prototype of the instance's type and scale plus isotropic
//! Gaussian noise of total scale `noise_scale`.
//!
//! In the default mode category `k` is marked by witnesses of type `k`. In
//! context mode (two categories) both categories carry witnesses of types A
//! and B, but only category 1 ("paired") bags hold both types at once;
//! category 0 ("single") bags hold one of them.
//!
//! Dataset directory:
//!
//! ```text
//! data/
//!   dataset.json      version, spec, category names, bag records
//!   features/         embedding cache of raw instance rows
//!   lexicon.json      word vectors in raw feature space
//!   descriptions.txt  description bank
//!   templates.txt     template bank
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bag::{Bag, Scale, ScaleView};
pub use crate::cache::{write_embedding_cache, CacheEntry};
use crate::cache::{load_cached_embeddings, write_atomic};
use crate::descriptions::{CategoryDescriptions, DescriptionBank};
use crate::encoders::Lexicon;
use crate::error::{Error, Result};
use crate::selection::TemplateBank;
use crate::tape::Mat;

pub const DATASET_VERSION: u32 = 1;

const TYPE_NAMES: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];
const BACKGROUND_NAMES: [&str; 3] = ["stroma", "adipose", "debris"];
const FILLERS: [&str; 10] = [
    "showing", "regions", "of", "tissue", "with", "visible", "scattered", "dense", "cells", "areas",
];
const OPENERS: [&str; 10] = [
    "a slide of",
    "an image of",
    "a patch showing",
    "tissue with",
    "a scan of",
    "histology of",
    "a region of",
    "a view of",
    "a sample of",
    "a section of",
];
const CLOSERS: [&str; 5] = ["", "tissue", "pattern", "morphology", "features"];
const VARIANT_JITTER: f64 = 0.35;
const HIGH_FROM_LOW: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub bags_per_class: usize,
    /// Inclusive range of low-scale instances per bag.
    pub m_low: [usize; 2],
    /// Inclusive range of high-scale instances per bag, clamped to
    /// `[M_low, 4 M_low]` for each bag.
    pub m_high: [usize; 2],
    pub d_raw: usize,
    pub witness_rate: f64,
    pub context_mode: bool,
    pub noise_scale: f64,
    pub grid: u32,
    pub c_low: usize,
    pub c_high: usize,
    pub templates_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            bags_per_class: 116,
            m_low: [16, 40],
            m_high: [24, 64],
            d_raw: 32,
            witness_rate: 0.1,
            context_mode: false,
            noise_scale: 0.5,
            grid: 12,
            c_low: 10,
            c_high: 30,
            templates_per_class: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn witnesses_for(&self, m: usize) -> usize {
        ((self.witness_rate * m as f64).round() as usize).min(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_classes < 2 || self.num_classes > TYPE_NAMES.len() {
            bad.push(format!("num_classes must be in 2..={}", TYPE_NAMES.len()));
        }
        if self.context_mode && self.num_classes != 2 {
            bad.push("context_mode needs exactly two categories".into());
        }
        if self.bags_per_class == 0 {
            bad.push("bags_per_class must be >= 1".into());
        }
        if self.m_low[0] == 0 || self.m_low[0] > self.m_low[1] {
            bad.push("m_low must be a non-empty range starting at >= 1".into());
        }
        if self.m_high[0] > self.m_high[1] {
            bad.push("m_high must be a non-empty range".into());
        }
        if (self.grid as usize).pow(2) < self.m_low[1] {
            bad.push("grid has fewer cells than m_low allows".into());
        }
        if self.d_raw == 0 {
            bad.push("d_raw must be >= 1".into());
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            bad.push("witness_rate must be in (0, 1]".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            bad.push("noise_scale must be finite and >= 0".into());
        }
        if self.c_low == 0 || self.c_high == 0 || self.templates_per_class == 0 {
            bad.push("c_low, c_high and templates_per_class must be >= 1".into());
        }
        if self.templates_per_class > OPENERS.len() * CLOSERS.len() {
            bad.push(format!("templates_per_class must be <= {}", OPENERS.len() * CLOSERS.len()));
        }
        if !bad.is_empty() {
            return Err(Error::InvalidConfig(bad));
        }
        let prototypes = 2 * (self.num_classes + BACKGROUND_NAMES.len());
        if self.d_raw < prototypes {
            return Err(Error::InfeasibleSpec(format!(
                "d_raw = {} cannot hold {prototypes} orthogonal prototypes",
                self.d_raw
            )));
        }
        let need = if self.context_mode { 2 } else { 1 };
        let have = self.witnesses_for(self.m_low[0]);
        if have < need {
            return Err(Error::InfeasibleSpec(format!(
                "witness_rate {} gives {have} witness instance(s) in a bag of {}, need {need}",
                self.witness_rate, self.m_low[0]
            )));
        }
        Ok(())
    }
}

/// Unit prototype rows in raw feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub type_names: Vec<String>,
    /// Witness types × d_raw, per scale.
    pub witness_low: Mat,
    pub witness_high: Mat,
    pub background_low: Mat,
    pub background_high: Mat,
}

impl Prototypes {
    fn witness(&self, scale: Scale) -> &Mat {
        match scale {
            Scale::Low => &self.witness_low,
            Scale::High => &self.witness_high,
        }
    }

    fn background(&self, scale: Scale) -> &Mat {
        match scale {
            Scale::Low => &self.background_low,
            Scale::High => &self.background_high,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub category_names: Vec<String>,
    pub bags: Vec<Bag>,
    pub lexicon: Lexicon,
    pub bank: DescriptionBank,
    pub templates: TemplateBank,
}

impl Dataset {
    pub fn bag(&self, bag_id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }

    pub fn d_raw(&self) -> usize {
        self.spec.d_raw
    }
}

fn unit(v: ndarray::ArrayView1<f64>) -> ndarray::Array1<f64> {
    let n = v.dot(&v).sqrt();
    v.mapv(|x| x / n)
}

fn random_unit(d: usize, rng: &mut impl Rng) -> ndarray::Array1<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v = ndarray::Array1::from_shape_fn(d, |_| normal.sample(rng));
    unit(v.view())
}

/// `n` orthonormal rows in `d` dimensions.
fn orthonormal_rows(n: usize, d: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros((n, d));
    for i in 0..n {
        let mut v = random_unit(d, rng);
        for j in 0..i {
            let proj = v.dot(&m.row(j));
            v.scaled_add(-proj, &m.row(j));
        }
        m.row_mut(i).assign(&unit(v.view()));
    }
    m
}

fn make_prototypes(spec: &SyntheticSpec, rng: &mut impl Rng) -> Prototypes {
    let types = spec.num_classes;
    let nb = BACKGROUND_NAMES.len();
    let basis = orthonormal_rows(2 * (types + nb), spec.d_raw, rng);
    let low_rows = |start: usize, n: usize| basis.slice(ndarray::s![start..start + n, ..]).to_owned();
    let witness_low = low_rows(0, types);
    let background_low = low_rows(types, nb);
    // High prototypes share part of their direction with the low ones.
    let fresh = low_rows(types + nb, types + nb);
    let mix = (1.0 - HIGH_FROM_LOW * HIGH_FROM_LOW).sqrt();
    let witness_high = &witness_low * HIGH_FROM_LOW + &fresh.slice(ndarray::s![..types, ..]) * mix;
    let background_high = &background_low * HIGH_FROM_LOW + &fresh.slice(ndarray::s![types.., ..]) * mix;
    Prototypes {
        type_names: TYPE_NAMES[..types].iter().map(|s| s.to_string()).collect(),
        witness_low,
        witness_high,
        background_low,
        background_high,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Witness(usize),
    Background(usize),
}

fn feature_row(
    protos: &Prototypes,
    tissue: Tissue,
    scale: Scale,
    noise: &Normal<f64>,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let base = match tissue {
        Tissue::Witness(t) => protos.witness(scale).row(t),
        Tissue::Background(b) => protos.background(scale).row(b),
    };
    base.iter().map(|&v| (v + noise.sample(rng)) as f32).collect()
}

fn witness_types(spec: &SyntheticSpec, label: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if !spec.context_mode {
        return vec![label; n];
    }
    if label == 1 {
        let mut types: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
        types.shuffle(rng);
        types
    } else {
        vec![rng.random_range(0..2); n]
    }
}

fn generate_bag(
    spec: &SyntheticSpec,
    protos: &Prototypes,
    bag_id: String,
    label: usize,
    rng: &mut impl Rng,
) -> Bag {
    let noise = Normal::new(0.0, spec.noise_scale / (spec.d_raw as f64).sqrt()).expect("noise");
    let m_low = rng.random_range(spec.m_low[0]..=spec.m_low[1]);
    let cells = spec.grid as usize * spec.grid as usize;
    let low_coords: Vec<[u32; 2]> = sample(rng, cells, m_low)
        .into_iter()
        .map(|c| [(c % spec.grid as usize) as u32, (c / spec.grid as usize) as u32])
        .collect();

    let n_w = spec.witnesses_for(m_low);
    let types = witness_types(spec, label, n_w, rng);
    let mut tissue: Vec<Tissue> = (0..m_low)
        .map(|_| Tissue::Background(rng.random_range(0..BACKGROUND_NAMES.len())))
        .collect();
    for (slot, t) in sample(rng, m_low, n_w).into_iter().zip(types) {
        tissue[slot] = Tissue::Witness(t);
    }

    let m_high = rng
        .random_range(spec.m_high[0]..=spec.m_high[1])
        .clamp(m_low, 4 * m_low);
    let mut extra: Vec<(usize, u32)> = (0..m_low).flat_map(|i| (1..4).map(move |c| (i, c))).collect();
    extra.shuffle(rng);
    let mut children: Vec<(usize, u32)> = (0..m_low).map(|i| (i, rng.random_range(0..4))).collect();
    for (i, c) in extra.into_iter().take(m_high - m_low) {
        let first = children[i].1;
        children.push((i, (first + c) % 4));
    }
    children.sort_unstable();

    let marker = |t: Tissue| -> u8 {
        match t {
            Tissue::Witness(w) if spec.num_classes == 2 => u8::from(w == 1),
            Tissue::Witness(_) => 1,
            Tissue::Background(_) => 0,
        }
    };

    let mut views = BTreeMap::new();
    let mut low_rows = Vec::with_capacity(m_low * spec.d_raw);
    for &t in &tissue {
        low_rows.extend(feature_row(protos, t, Scale::Low, &noise, rng));
    }
    let labels = (!spec.context_mode).then(|| tissue.iter().map(|&t| marker(t)).collect());
    views.insert(
        Scale::Low,
        ScaleView {
            instances: Array2::from_shape_vec((m_low, spec.d_raw), low_rows).expect("low rows"),
            coords: low_coords.clone(),
            instance_labels: labels,
        },
    );

    let mut high_rows = Vec::with_capacity(children.len() * spec.d_raw);
    let mut high_coords = Vec::with_capacity(children.len());
    let mut high_tissue = Vec::with_capacity(children.len());
    for &(parent, quadrant) in &children {
        let t = match tissue[parent] {
            Tissue::Background(_) => Tissue::Background(rng.random_range(0..BACKGROUND_NAMES.len())),
            w => w,
        };
        let [x, y] = low_coords[parent];
        high_coords.push([2 * x + quadrant % 2, 2 * y + quadrant / 2]);
        high_rows.extend(feature_row(protos, t, Scale::High, &noise, rng));
        high_tissue.push(t);
    }
    let labels = (!spec.context_mode).then(|| high_tissue.iter().map(|&t| marker(t)).collect());
    views.insert(
        Scale::High,
        ScaleView {
            instances: Array2::from_shape_vec((children.len(), spec.d_raw), high_rows).expect("high rows"),
            coords: high_coords,
            instance_labels: labels,
        },
    );
    Bag { bag_id, label, views }
}

fn category_names(spec: &SyntheticSpec) -> Vec<String> {
    if spec.context_mode {
        vec!["single".into(), "paired".into()]
    } else {
        TYPE_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

fn to_f32(v: ndarray::ArrayView1<f64>) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Lexicon, descriptions and templates aligned with the prototypes.
fn text_side(
    spec: &SyntheticSpec,
    protos: &Prototypes,
    names: &[String],
    rng: &mut impl Rng,
) -> (Lexicon, DescriptionBank, TemplateBank) {
    let mut lexicon = Lexicon::new();
    let concept = |word: String, v: ndarray::Array1<f64>, lexicon: &mut Lexicon| {
        lexicon.insert(word.clone(), to_f32(unit(v.view()).view()));
        word
    };

    // Concept vector of each category at each scale.
    let mut concepts: Vec<[(Vec<String>, ndarray::Array1<f64>); 2]> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let per_scale = Scale::BOTH.map(|scale| {
            let tag = scale.as_str();
            let w = protos.witness(scale);
            let b = protos.background(scale);
            if !spec.context_mode {
                let word = concept(format!("{name}_{tag}"), w.row(k).to_owned(), &mut lexicon);
                (vec![word], w.row(k).to_owned())
            } else if k == 1 {
                let a = concept(format!("alpha_{tag}"), w.row(0).to_owned(), &mut lexicon);
                let bb = concept(format!("beta_{tag}"), w.row(1).to_owned(), &mut lexicon);
                (vec![a, bb], unit((&w.row(0) + &w.row(1)).view()))
            } else {
                let words: Vec<String> = BACKGROUND_NAMES
                    .iter()
                    .enumerate()
                    .map(|(i, bg)| concept(format!("{bg}_{tag}"), b.row(i).to_owned(), &mut lexicon))
                    .collect();
                (words, unit(b.sum_axis(ndarray::Axis(0)).view()))
            }
        });
        concepts.push(per_scale);
    }

    let mut categories = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let mut lists = [Vec::new(), Vec::new()];
        for (s, scale) in Scale::BOTH.into_iter().enumerate() {
            let count = match scale {
                Scale::Low => spec.c_low,
                Scale::High => spec.c_high,
            };
            let (words, direction) = &concepts[k][s];
            for c in 0..count {
                let variant = format!("{name}_{}_{c}", scale.as_str());
                let v = direction + &(random_unit(spec.d_raw, rng) * VARIANT_JITTER);
                concept(variant.clone(), v, &mut lexicon);
                let lead = if spec.context_mode && k == 0 {
                    words[c % words.len()].clone()
                } else {
                    words.join(" ")
                };
                lists[s].push(format!(
                    "{} {lead} {variant} {}",
                    FILLERS[c % FILLERS.len()],
                    FILLERS[(c * 3 + 1) % FILLERS.len()]
                ));
            }
        }
        let [low, high] = lists;
        categories.push(CategoryDescriptions {
            name: name.clone(),
            low,
            high,
        });
    }

    let mut template_categories = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        concept(name.clone(), concepts[k][0].1.clone(), &mut lexicon);
        let list = OPENERS
            .iter()
            .flat_map(|o| CLOSERS.iter().map(move |c| format!("{o} {name} {c}").trim().to_string()))
            .take(spec.templates_per_class)
            .collect();
        template_categories.push((name.clone(), list));
    }

    let bank = DescriptionBank {
        provenance: format!("synthetic lexicon generator, seed {}", spec.seed),
        categories,
    };
    (
        lexicon,
        bank,
        TemplateBank {
            categories: template_categories,
        },
    )
}

/// Deterministic per `spec.seed`. Bags are ordered category by category.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Prototypes)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = make_prototypes(spec, &mut rng);
    let names = category_names(spec);
    let mut bags = Vec::with_capacity(spec.num_classes * spec.bags_per_class);
    for (label, name) in names.iter().enumerate() {
        for i in 0..spec.bags_per_class {
            bags.push(generate_bag(spec, &protos, format!("{name}-{i:04}"), label, &mut rng));
        }
    }
    let (lexicon, bank, templates) = text_side(spec, &protos, &names, &mut rng);
    let dataset = Dataset {
        spec: spec.clone(),
        category_names: names,
        bags,
        lexicon,
        bank,
        templates,
    };
    Ok((dataset, protos))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ViewRecord {
    coords: Vec<[u32; 2]>,
    instance_labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BagRecord {
    bag_id: String,
    label: usize,
    views: BTreeMap<Scale, ViewRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    spec: SyntheticSpec,
    category_names: Vec<String>,
    bags: Vec<BagRecord>,
}

pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut records = Vec::with_capacity(dataset.bags.len());
    for bag in &dataset.bags {
        let mut views = BTreeMap::new();
        for (&scale, view) in &bag.views {
            entries.push(CacheEntry {
                bag_id: bag.bag_id.clone(),
                scale,
                matrix: view.instances.clone(),
                row_ids: Some(view.coords.iter().map(|[x, y]| format!("{x},{y}")).collect()),
            });
            views.insert(
                scale,
                ViewRecord {
                    coords: view.coords.clone(),
                    instance_labels: view.instance_labels.clone(),
                },
            );
        }
        records.push(BagRecord {
            bag_id: bag.bag_id.clone(),
            label: bag.label,
            views,
        });
    }
    write_embedding_cache(&entries, dir.join("features"))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        spec: dataset.spec.clone(),
        category_names: dataset.category_names.clone(),
        bags: records,
    };
    write_atomic(&dir.join("lexicon.json"), to_json(&dataset.lexicon).as_bytes())?;
    write_atomic(&dir.join("descriptions.txt"), dataset.bank.to_text().as_bytes())?;
    write_atomic(&dir.join("templates.txt"), dataset.templates.to_text().as_bytes())?;
    write_atomic(&dir.join("dataset.json"), to_json(&manifest).as_bytes())
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let manifest: DatasetManifest =
        serde_json::from_str(&read("dataset.json")?).map_err(|e| Error::parse(dir.join("dataset.json"), e))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::parse(
            dir.join("dataset.json"),
            format!("unsupported dataset version {}", manifest.version),
        ));
    }
    let lexicon: Lexicon =
        serde_json::from_str(&read("lexicon.json")?).map_err(|e| Error::parse(dir.join("lexicon.json"), e))?;
    let bank = DescriptionBank::parse(&read("descriptions.txt")?)?;
    let templates = TemplateBank::parse(&read("templates.txt")?)?;
    let features = load_cached_embeddings(dir.join("features"))?;
    let num_classes = manifest.category_names.len();
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for rec in manifest.bags {
        let mut views = BTreeMap::new();
        for (scale, v) in rec.views {
            views.insert(
                scale,
                ScaleView {
                    instances: features.get(&rec.bag_id, scale)?.clone(),
                    coords: v.coords,
                    instance_labels: v.instance_labels,
                },
            );
        }
        let bag = Bag {
            bag_id: rec.bag_id,
            label: rec.label,
            views,
        };
        bag.validate(num_classes)?;
        bags.push(bag);
    }
    Ok(Dataset {
        spec: manifest.spec,
        category_names: manifest.category_names,
        bags,
        lexicon,
        bank,
        templates,
    })
}
