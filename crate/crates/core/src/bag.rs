use std::collections::{BTreeMap, HashSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnification tag of a bag view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Low,
    High,
}

impl Scale {
    pub const BOTH: [Scale; 2] = [Scale::Low, Scale::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Low => "low",
            Scale::High => "high",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Scale::Low),
            "high" => Ok(Scale::High),
            other => Err(Error::InvalidBag(format!("unknown scale tag `{other}`"))),
        }
    }
}

/// Instances of a bag at one magnification. Each instance is one feature row,
/// consumed by the image encoder as a single-token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleView {
    pub instances: Array2<f32>,
    pub coords: Vec<[u32; 2]>,
    pub instance_labels: Option<Vec<u8>>,
}

impl ScaleView {
    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.instances.nrows();
        if m == 0 {
            return Err(Error::InvalidBag("scale view has no instances".into()));
        }
        if self.coords.len() != m {
            return Err(Error::InvalidBag(format!(
                "{} coordinates for {m} instances",
                self.coords.len()
            )));
        }
        let mut seen = HashSet::with_capacity(m);
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::InvalidBag(format!("duplicate coordinate {c:?}")));
            }
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != m {
                return Err(Error::InvalidBag(format!(
                    "{} instance labels for {m} instances",
                    labels.len()
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::InvalidBag("instance labels must be 0 or 1".into()));
            }
        }
        if self.instances.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("instance features"));
        }
        Ok(())
    }
}

/// One slide: a category label and up to two magnification views.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: usize,
    pub views: BTreeMap<Scale, ScaleView>,
}

impl Bag {
    pub fn view(&self, scale: Scale) -> Result<&ScaleView> {
        self.views.get(&scale).ok_or_else(|| {
            Error::InvalidBag(format!("bag `{}` has no {scale} view", self.bag_id))
        })
    }

    /// Checks every view; with two categories and instance labels present,
    /// also checks that the bag label follows from the instance labels.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.label >= num_classes {
            return Err(Error::LabelRange {
                label: self.label,
                classes: num_classes,
            });
        }
        if self.views.is_empty() {
            return Err(Error::InvalidBag(format!("bag `{}` has no views", self.bag_id)));
        }
        for view in self.views.values() {
            view.validate()?;
            if num_classes == 2 {
                if let Some(labels) = &view.instance_labels {
                    let derived = bag_label_from_instances(labels)?;
                    if derived as usize != self.label {
                        return Err(Error::InvalidBag(format!(
                            "bag `{}` labelled {} but its instances imply {derived}",
                            self.bag_id, self.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Binary MIL relation: a bag is negative iff none of its instances is positive.
pub fn bag_label_from_instances(instance_labels: &[u8]) -> Result<u8> {
    if instance_labels.is_empty() {
        return Err(Error::InvalidBag("no instance labels".into()));
    }
    Ok(u8::from(instance_labels.iter().any(|&l| l != 0)))
}

/// Disjoint train/test partition with a fixed number of training bags per category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub shots: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}
