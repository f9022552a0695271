//! Construction of the frozen "pretrained" towers.
//!
//! There are no pretrained weights at desk scale, so alignment between the two
//! modalities is built in: a shared stem maps raw feature rows and lexicon word
//! vectors into the same model space, both towers are near-identity residual
//! stacks, and both projection heads are perturbations of one shared map.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transformer::{gaussian, BlockWeights, Tower};
use super::{ImageEncoder, TextEncoder};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tape::Mat;
use crate::tokenizer::{Token, Tokenizer};

/// Word vectors in raw feature space that the toy text tower "knows".
pub type Lexicon = BTreeMap<String, Vec<f32>>;

const FREE_WORD_NORM: f64 = 0.5;
const SPECIAL_NORM: f64 = 0.1;
const PROJ_JITTER: f64 = 0.02;
const POS_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVlm {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl ToyVlm {
    pub fn pretrained(
        cfg: &ModelConfig,
        d_raw: usize,
        lexicon: &Lexicon,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        if let Some((w, v)) = lexicon.iter().find(|(_, v)| v.len() != d_raw) {
            return Err(Error::shape(
                "lexicon vector width",
                d_raw,
                format!("{} (word `{w}`)", v.len()),
            ));
        }
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.vlm_seed);
        let stem = orthonormal(d_raw, d, &mut rng);
        let shared_proj = orthonormal(d, cfg.d_joint, &mut rng);

        let text_tower = Tower {
            blocks: (0..cfg.l_text)
                .map(|_| BlockWeights::near_identity(d, cfg.d_ffn, &mut rng))
                .collect(),
        };
        let image_tower = Tower {
            blocks: (0..cfg.l_img)
                .map(|_| BlockWeights::near_identity(d, cfg.d_ffn, &mut rng))
                .collect(),
        };
        let text_proj = &shared_proj + &gaussian(d, cfg.d_joint, PROJ_JITTER / (d as f64).sqrt(), &mut rng);
        let image_proj = &shared_proj + &gaussian(d, cfg.d_joint, PROJ_JITTER / (d as f64).sqrt(), &mut rng);
        let positional = gaussian(cfg.context_len, d, POS_STD, &mut rng);

        let mut token_embedding = Mat::zeros((tokenizer.vocab_size(), d));
        for id in 0..tokenizer.vocab_size() as u32 {
            let row = match tokenizer.token(id).expect("id inside vocabulary") {
                Token::Cls => seeded_vector("[CLS]", cfg.vlm_seed, d, SPECIAL_NORM),
                Token::Eot => seeded_vector("[EOT]", cfg.vlm_seed, d, SPECIAL_NORM),
                Token::Byte(b) => seeded_vector(&format!("[BYTE {b}]"), cfg.vlm_seed, d, FREE_WORD_NORM),
                Token::Word(w) => match lexicon.get(w) {
                    Some(v) => {
                        let raw = Mat::from_shape_fn((1, d_raw), |(_, c)| f64::from(v[c]));
                        raw.dot(&stem)
                    }
                    None => seeded_vector(w, cfg.vlm_seed, d, FREE_WORD_NORM),
                },
            };
            token_embedding.row_mut(id as usize).assign(&row.row(0));
        }

        Ok(Self {
            text: TextEncoder {
                tokenizer,
                token_embedding,
                positional,
                tower: text_tower,
                proj: text_proj,
            },
            image: ImageEncoder {
                stem,
                tower: image_tower,
                proj: image_proj,
            },
        })
    }

    /// SHA-256 over every frozen weight of both towers.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        self.text.hash_into(&mut h);
        self.image.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// A random vector of the given norm, determined by `(key, seed)` alone.
fn seeded_vector(key: &str, seed: u64, d: usize, norm: f64) -> Mat {
    let digest = Sha256::digest(key.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes) ^ seed);
    let v = gaussian(1, d, 1.0, &mut rng);
    let n = v.mapv(|x| x * x).sum().sqrt();
    v * (norm / n)
}

/// Random matrix with orthonormal rows (rows ≤ cols) or columns (rows > cols).
fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    if rows > cols {
        return orthonormal(cols, rows, rng).t().to_owned();
    }
    let mut m = gaussian(rows, cols, 1.0, rng);
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|x| x / n);
    }
    m
}
