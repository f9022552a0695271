//! Independent oracles shared by the integration tests and the acceptance
//! suite. Every check returns `Err(description)` on mismatch.

#![allow(dead_code)]

use ndarray::{array, Array2};
use promptmil::baselines::{max_pool, mean_pool};
use promptmil::data::{generate_synthetic_dataset, SyntheticSpec};
use promptmil::descriptions::{embed_description_bank, DescriptionBank};
use promptmil::encoders::{BlockWeights, ImageEncoder, PromptGenerator, TextEncoder, Tower};
use promptmil::harness::binary_auc;
use promptmil::isgpt::{
    adjacency_from_similarity, gcn_layer, knn_graph_coords, knn_graph_features, semantic_similarity, Activation,
};
use promptmil::npcgp::{cross_guided_logits, triple_loss, topk_pool, LogitsTriple, LossWeights};
use promptmil::selection::{mean_normalized, rank_patches, zero_shot_probs};
use promptmil::tape::Mat;
use promptmil::tokenizer::{Tokenizer, CLS, EOT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;
pub type Rows = Vec<Vec<f64>>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn close(name: &str, got: f64, want: f64, tol: f64) -> Check {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want} (tol {tol})"))
}

pub fn close_rows(name: &str, got: &Mat, want: &Rows, tol: f64) -> Check {
    ensure(got.nrows() == want.len(), || format!("{name}: {} rows, want {}", got.nrows(), want.len()))?;
    for (r, row) in want.iter().enumerate() {
        ensure(got.ncols() == row.len(), || format!("{name}: width {}, want {}", got.ncols(), row.len()))?;
        for (c, &w) in row.iter().enumerate() {
            close(&format!("{name}[{r},{c}]"), got[[r, c]], w, tol)?;
        }
    }
    Ok(())
}

pub fn rows(m: &Mat) -> Rows {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

// ---- plain-loop linear algebra ------------------------------------------------

pub fn mm(a: &Rows, b: &Mat) -> Rows {
    a.iter()
        .map(|row| {
            (0..b.ncols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[[k, j]]).sum())
                .collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh())
}

/// One residual attention + feed-forward block over a token sequence.
pub fn block(x: &Rows, w: &BlockWeights) -> Rows {
    let d = x[0].len();
    let q = mm(x, &w.wq);
    let k = mm(x, &w.wk);
    let v = mm(x, &w.wv);
    let mut h = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let scores: Vec<f64> = k.iter().map(|kj| dot(&q[i], kj) / (d as f64).sqrt()).collect();
        let a = softmax(&scores);
        let ctx: Vec<f64> = (0..d).map(|c| a.iter().zip(&v).map(|(aj, vj)| aj * vj[c]).sum()).collect();
        let out = mm(&vec![ctx], &w.wo).remove(0);
        h.push(x[i].iter().zip(&out).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let f1: Rows = mm(&h, &w.w1)
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(c, v)| gelu(v + w.b1[[0, c]])).collect())
        .collect();
    let f2 = mm(&f1, &w.w2);
    h.iter()
        .zip(&f2)
        .map(|(hr, fr)| hr.iter().zip(fr).enumerate().map(|(c, (a, b))| a + b + w.b2[[0, c]]).collect())
        .collect()
}

// ---- hand-set tiny encoders ---------------------------------------------------

fn patterned(rows: usize, cols: usize, a: f64, b: f64, c: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |(i, j)| (a * (i as f64 + 1.0) - b * j as f64 + c * ((i * 3 + j) % 5) as f64).sin() * 0.5)
}

pub fn hand_block(d: usize, seed: f64) -> BlockWeights {
    BlockWeights {
        wq: patterned(d, d, 0.7 + seed, 0.3, 0.11),
        wk: patterned(d, d, 0.5, 0.9 + seed, 0.07),
        wv: patterned(d, d, 0.4, 0.2, 0.3 + seed) + Mat::eye(d),
        wo: patterned(d, d, 0.9, 0.6, 0.05 + seed) + Mat::eye(d),
        w1: patterned(d, 2 * d, 0.3 + seed, 0.8, 0.2),
        b1: patterned(1, 2 * d, 0.6, 0.1, 0.4 + seed),
        w2: patterned(2 * d, d, 0.2, 0.7 + seed, 0.15),
        b2: patterned(1, d, 0.35 + seed, 0.45, 0.25),
    }
}

pub fn hand_text_encoder(depth: usize, d: usize, d_joint: usize) -> TextEncoder {
    let tokenizer = Tokenizer::from_words(["alpha", "beta", "gamma", "delta"].map(String::from).to_vec());
    let vocab = tokenizer.vocab_size();
    TextEncoder {
        tokenizer,
        token_embedding: patterned(vocab, d, 1.3, 0.4, 0.2),
        positional: patterned(16, d, 0.25, 0.15, 0.05) * 0.2,
        tower: Tower {
            blocks: (0..depth).map(|l| hand_block(d, 0.13 * l as f64)).collect(),
        },
        proj: patterned(d, d_joint, 0.8, 0.35, 0.6),
    }
}

pub fn hand_image_encoder(depth: usize, d_raw: usize, d: usize, d_joint: usize) -> ImageEncoder {
    ImageEncoder {
        stem: patterned(d_raw, d, 0.45, 0.65, 0.3),
        tower: Tower {
            blocks: (0..depth).map(|l| hand_block(d, 0.21 + 0.17 * l as f64)).collect(),
        },
        proj: patterned(d, d_joint, 0.55, 0.25, 0.12),
    }
}

pub fn text_frozen_oracle(enc: &TextEncoder, tokens: &[u32]) -> (Vec<f64>, Rows) {
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..enc.d_model())
                .map(|c| enc.token_embedding[[t as usize, c]] + enc.positional[[p, c]])
                .collect()
        })
        .collect();
    let mut trace = Vec::new();
    for b in &enc.tower.blocks {
        x = block(&x, b);
        trace.push(x.last().unwrap().clone());
    }
    (mm(&vec![x.last().unwrap().clone()], &enc.proj).remove(0), trace)
}

/// Prompted pass with explicit slot bookkeeping: prompt groups are overwritten
/// before every layer, positions are added once.
pub fn text_prompted_oracle(enc: &TextEncoder, tokens: &[u32], p_glob: &[Mat], p_low: &[Mat]) -> Vec<f64> {
    let d = enc.d_model();
    let emb = |t: u32| (0..d).map(|c| enc.token_embedding[[t as usize, c]]).collect::<Vec<f64>>();
    let n = tokens.len();
    let (lg, ll) = (p_glob[0].nrows(), p_low[0].nrows());
    let mut cls = vec![emb(tokens[0])];
    let mut high: Rows = tokens[1..n - 1].iter().map(|&t| emb(t)).collect();
    let mut eot = vec![emb(tokens[n - 1])];
    for (l, b) in enc.tower.blocks.iter().enumerate() {
        let mut seq: Rows = cls.clone();
        seq.extend(rows(&p_glob[l]));
        seq.extend(rows(&p_low[l]));
        seq.extend(high.clone());
        seq.extend(eot.clone());
        if l == 0 {
            for (p, row) in seq.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += enc.positional[[p, c]];
                }
            }
        }
        let out = block(&seq, b);
        cls = vec![out[0].clone()];
        high = out[1 + lg + ll..out.len() - 1].to_vec();
        eot = vec![out.last().unwrap().clone()];
    }
    mm(&eot, &enc.proj).remove(0)
}

/// Each instance is its own sequence `[p_vis[l]; x_i]`; only the instance row
/// is kept between layers.
pub fn image_oracle(enc: &ImageEncoder, instances: &Array2<f32>, p_vis: Option<&[Mat]>) -> Rows {
    let x64 = instances.mapv(f64::from);
    let stemmed = mm(&rows(&x64), &enc.stem);
    stemmed
        .into_iter()
        .map(|mut tok| {
            for (l, b) in enc.tower.blocks.iter().enumerate() {
                let mut seq = p_vis.map_or_else(Vec::new, |p| rows(&p[l]));
                seq.push(tok);
                tok = block(&seq, b).pop().unwrap();
            }
            mm(&vec![tok], &enc.proj).remove(0)
        })
        .collect()
}

// ---- encoder oracles ----------------------------------------------------------

pub fn check_text_encoders() -> Check {
    let enc = hand_text_encoder(1, 4, 3);
    let tokens = enc.tokenize("alpha gamma beta");
    ensure(tokens[0] == CLS && *tokens.last().unwrap() == EOT, || "token framing".into())?;
    let (z, trace) = enc.encode_text_frozen(&tokens).map_err(|e| e.to_string())?;
    let (want_z, want_trace) = text_frozen_oracle(&enc, &tokens);
    close_rows("frozen text z", &z, &vec![want_z], 1e-6)?;
    close_rows("frozen text trace", &trace.0, &want_trace, 1e-6)?;

    let p_glob = vec![patterned(2, 4, 0.9, 0.2, 0.1)];
    let p_low = vec![patterned(3, 4, 0.3, 0.5, 0.7)];
    let z = enc.encode_text_prompted(&tokens, &p_glob, &p_low).map_err(|e| e.to_string())?;
    close_rows("prompted text z (L=1)", &z, &vec![text_prompted_oracle(&enc, &tokens, &p_glob, &p_low)], 1e-6)?;

    let deep = hand_text_encoder(2, 4, 3);
    let p_glob2 = vec![p_glob[0].clone(), patterned(2, 4, 0.1, 0.8, 0.3)];
    let p_low2 = vec![p_low[0].clone(), patterned(3, 4, 0.6, 0.3, 0.2)];
    let z = deep.encode_text_prompted(&tokens, &p_glob2, &p_low2).map_err(|e| e.to_string())?;
    close_rows("prompted text z (L=2)", &z, &vec![text_prompted_oracle(&deep, &tokens, &p_glob2, &p_low2)], 1e-6)
}

pub fn check_image_encoders() -> Check {
    let enc = hand_image_encoder(1, 5, 4, 3);
    let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f32 * 0.37).cos());
    let frozen = enc.encode_image_frozen(&x).map_err(|e| e.to_string())?;
    close_rows("frozen image", &frozen, &image_oracle(&enc, &x, None), 1e-6)?;
    let p_vis = vec![patterned(2, 4, 0.4, 0.9, 0.2)];
    let prompted = enc.encode_image_prompted(&x, &p_vis).map_err(|e| e.to_string())?;
    close_rows("prompted image", &prompted, &image_oracle(&enc, &x, Some(&p_vis)), 1e-6)?;
    let empty = vec![Mat::zeros((0, 4))];
    let degenerate = enc.encode_image_prompted(&x, &empty).map_err(|e| e.to_string())?;
    ensure(degenerate == frozen, || "len_vis = 0 differs from the frozen pass".into())
}

/// Zeroed global prompts and a zero-output generator leave zero rows in the
/// prompt slots of every layer.
pub fn check_zeroed_prompt_descriptions() -> Check {
    let enc = hand_text_encoder(2, 4, 3);
    let bank = DescriptionBank::parse(
        "# provenance: oracle\n[a.low]\nalpha beta\ngamma\n[a.high]\nbeta gamma delta\nalpha\n[b.low]\ndelta\nbeta\n[b.high]\ngamma alpha\ndelta delta\n",
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = PromptGenerator::zero_output(4, &mut rng);
    let p_glob = vec![Mat::zeros((2, 4)); 2];
    let emb = embed_description_bank(&bank, &enc, &p_glob, Some(&gen)).map_err(|e| e.to_string())?;
    let zeros_low = vec![Mat::zeros((2, 4)); 2];
    let want: Rows = ["beta gamma delta", "alpha", "gamma alpha", "delta delta"]
        .iter()
        .map(|s| text_prompted_oracle(&enc, &enc.tokenize(s), &p_glob, &zeros_low))
        .collect();
    close_rows("zero-prompt Z_high", &emb.z_high, &want, 1e-6)?;
    let want_low: Rows = ["alpha beta", "gamma", "delta", "beta"]
        .iter()
        .map(|s| text_frozen_oracle(&enc, &enc.tokenize(s)).0)
        .collect();
    close_rows("Z_low", &emb.z_low, &want_low, 1e-6)
}

// ---- selection ----------------------------------------------------------------

pub fn check_zero_shot() -> Check {
    let w = array![[1.0, 0.0], [0.0, 1.0]];
    let p = zero_shot_probs(&array![[3.0, 0.0]], &w, 1.0).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    close("p0", p[0], e / (e + 1.0), 1e-4)?;
    close("p1", p[1], 1.0 / (e + 1.0), 1e-4)?;
    close("p0 literal", p[0], 0.7311, 1e-4)?;
    close("p1 literal", p[1], 0.2689, 1e-4)?;
    let m = mean_normalized(&array![[1.0, 0.0], [0.0, 1.0]]).map_err(|e| e.to_string())?;
    let h = 0.5f64.sqrt();
    close_rows("template mean", &m, &vec![vec![h, h]], 1e-6)?;
    close("template mean literal", m[[0, 0]], 0.7071, 1e-4)
}

pub fn check_ranking_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_mat(10, 6, &mut rng);
    let w = random_mat(3, 6, &mut rng);
    let tau = 0.07;
    let sel = rank_patches(&p, &w, 4, tau).map_err(|e| e.to_string())?;
    let probs: Rows = rows(&p)
        .iter()
        .map(|x| softmax(&rows(&w).iter().map(|wk| cosine(x, wk) / tau).collect::<Vec<_>>()))
        .collect();
    for k in 0..3 {
        let mut order: Vec<usize> = (0..10).collect();
        // insertion sort: descending probability, lower index first on ties
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && probs[order[j]][k] > probs[order[j - 1]][k] {
                order.swap(j, j - 1);
                j -= 1;
            }
        }
        ensure(sel.per_category[k] == order[..4], || {
            format!("category {k}: ranking {:?}, oracle {:?}", sel.per_category[k], &order[..4])
        })?;
    }
    let mut union: Vec<usize> = sel.per_category.concat();
    union.sort();
    union.dedup();
    ensure(sel.union == union, || "union mismatch".into())
}

// ---- graph propagation ----------------------------------------------------------

pub fn check_similarity_and_gcn() -> Check {
    let z = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let s = semantic_similarity(&array![[2.0, 0.0, 0.0]], &z, 1.0).map_err(|e| e.to_string())?;
    close("S[0,0]", s[[0, 0]], 0.7311, 1e-4)?;
    close("S[0,1]", s[[0, 1]], 0.2689, 1e-4)?;

    let s3 = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]];
    let tau = 0.5;
    let a = adjacency_from_similarity(&s3, tau).map_err(|e| e.to_string())?;
    let sr = rows(&s3);
    let want: Rows = sr
        .iter()
        .map(|si| softmax(&sr.iter().map(|sj| cosine(si, sj) / tau).collect::<Vec<_>>()))
        .collect();
    close_rows("A (M=3)", &a, &want, 1e-6)?;

    let out = gcn_layer(
        &array![[0.5, 0.5], [0.5, 0.5]],
        &Mat::eye(2),
        &Mat::eye(2),
        Activation::Identity,
    )
    .map_err(|e| e.to_string())?;
    close_rows("GCN", &out, &vec![vec![0.75, 0.25], vec![0.25, 0.75]], 1e-6)
}

pub fn check_knn_graphs(seed: u64) -> Check {
    let a = knn_graph_coords(&[[0, 0], [1, 0], [2, 0]], 1).map_err(|e| e.to_string())?;
    close_rows("knn coords", &a, &vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_mat(6, 4, &mut rng);
    let k = 2;
    let a = knn_graph_features(&p, k).map_err(|e| e.to_string())?;
    let pr = rows(&p);
    for i in 0..6 {
        let mut cand: Vec<(f64, usize)> = (0..6).filter(|&j| j != i).map(|j| (cosine(&pr[i], &pr[j]), j)).collect();
        cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let chosen: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();
        for j in 0..6 {
            let want = if chosen.contains(&j) { 1.0 / k as f64 } else { 0.0 };
            close(&format!("knn feat [{i},{j}]"), a[[i, j]], want, 1e-12)?;
        }
    }
    Ok(())
}

// ---- pooling and loss -----------------------------------------------------------

/// Enumerates every patch-description pair of a block and averages the
/// `k_top` largest products.
pub fn brute_pool(p: &Mat, z: &Mat, k: usize, c: usize, k_top: usize) -> f64 {
    let mut all = Vec::new();
    for i in 0..p.nrows() {
        for j in k * c..(k + 1) * c {
            all.push(dot(&p.row(i).to_vec(), &z.row(j).to_vec()));
        }
    }
    all.sort_by(|a, b| b.partial_cmp(a).unwrap());
    all[..k_top].iter().sum::<f64>() / k_top as f64
}

pub fn check_pooling(seed: u64) -> Check {
    close("topk {3,1,2}", topk_pool(&array![[3.0, 1.0, 2.0]], 2).map_err(|e| e.to_string())?, 2.5, 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, kk, c, d) = (4, 2, 2, 8);
    let ph = random_mat(m, d, &mut rng);
    let pl = random_mat(m, d, &mut rng);
    let zh = random_mat(kk * c, d, &mut rng);
    let zl = random_mat(kk * c, d, &mut rng);
    for k_top in [1, 3, m * c] {
        let t = cross_guided_logits(&ph, &pl, &zh, &zl, kk, k_top, true).map_err(|e| e.to_string())?;
        for k in 0..kk {
            let high = brute_pool(&ph, &zh, k, c, k_top) + brute_pool(&ph, &zl, k, c, k_top);
            let low = brute_pool(&pl, &zl, k, c, k_top) + brute_pool(&pl, &zh, k, c, k_top);
            close("high logit", t.high[k], high, 1e-6)?;
            close("low logit", t.low[k], low, 1e-6)?;
            close("overall logit", t.overall[k], (high + low) / 2.0, 1e-6)?;
        }
    }
    Ok(())
}

pub fn check_loss(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let k = rng.random_range(2..6);
        let label = rng.random_range(0..k);
        let draw = |rng: &mut ChaCha8Rng| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let t = LogitsTriple {
            high: draw(&mut rng),
            low: draw(&mut rng),
            overall: draw(&mut rng),
        };
        let ce = |v: &[f64]| {
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - v[label]
        };
        let want = ce(&t.overall) + ce(&t.high) + ce(&t.low);
        close("loss", triple_loss(&t, label, LossWeights::default()).map_err(|e| e.to_string())?, want, 1e-8)?;
    }
    Ok(())
}

pub fn check_baseline_pools() -> Check {
    let p = array![[0.0, 2.0], [2.0, 0.0]];
    close_rows("mean pool", &mean_pool(&p).map_err(|e| e.to_string())?, &vec![vec![1.0, 1.0]], 1e-12)?;
    close_rows("max pool", &max_pool(&p).map_err(|e| e.to_string())?, &vec![vec![2.0, 2.0]], 1e-12)
}

// ---- data and metrics ---------------------------------------------------------

pub fn check_bag_label_consistency() -> Check {
    let spec = SyntheticSpec {
        bags_per_class: 20,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    ensure(ds.bags.len() == 40, || format!("{} bags", ds.bags.len()))?;
    for bag in &ds.bags {
        for view in bag.views.values() {
            let labels = view.instance_labels.as_ref().ok_or("missing instance labels")?;
            let or = labels.iter().any(|&l| l == 1) as usize;
            ensure(or == bag.label, || format!("bag {}: OR of instances {or}, label {}", bag.bag_id, bag.label))?;
        }
    }
    Ok(())
}

fn positive(labels: &[usize]) -> Vec<bool> {
    labels.iter().map(|&l| l == 1).collect()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

pub fn check_auc() -> Check {
    let scores = [0.9, 0.4, 0.65, 0.3, 0.4, 0.8];
    let labels = [1, 1, 0, 0, 0, 1];
    let got = binary_auc(&scores, &positive(&labels)).map_err(|e| e.to_string())?;
    close("6-bag AUC", got, mann_whitney(&scores, &labels), 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(4..30);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
        let got = binary_auc(&scores, &positive(&labels)).map_err(|e| e.to_string())?;
        close("random AUC", got, mann_whitney(&scores, &labels), 1e-12)?;
    }
    Ok(())
}

/// Every oracle check, by name.
pub fn oracle_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("text encoders", check_text_encoders()),
        ("image encoders", check_image_encoders()),
        ("zeroed-prompt descriptions", check_zeroed_prompt_descriptions()),
        ("zero-shot probabilities", check_zero_shot()),
        ("patch ranking", (0..5).try_for_each(check_ranking_oracle)),
        ("similarity, adjacency, gcn", check_similarity_and_gcn()),
        ("knn graphs", (0..5).try_for_each(check_knn_graphs)),
        ("top-k pooling", (0..5).try_for_each(check_pooling)),
        ("cross-entropy", check_loss(3)),
        ("mean/max pooling", check_baseline_pools()),
        ("bag labels", check_bag_label_consistency()),
        ("auc", check_auc()),
    ]
}

// ---- full-model fixtures ------------------------------------------------------

use promptmil::data::Dataset;
use promptmil::gradcheck::{numerical_grad, relative_error};
use promptmil::model::{PromptedMil, PreparedBag};
use promptmil::params::ParamStore;
use promptmil::tape::ParamKey;
use promptmil::{GraphKind, ModelConfig};

/// A tiny dataset and model: widths `d`, `depth` layers in both towers.
pub fn tiny_setup(d: usize, depth: usize, seed: u64) -> (Dataset, ModelConfig) {
    let spec = SyntheticSpec {
        bags_per_class: 3,
        m_low: [3, 4],
        m_high: [3, 6],
        d_raw: 12,
        witness_rate: 0.3,
        grid: 4,
        c_low: 2,
        c_high: 3,
        templates_per_class: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_synthetic_dataset(&spec).expect("tiny dataset");
    let cfg = ModelConfig {
        d_joint: d,
        d_model: d,
        d_ffn: d,
        c_low: 2,
        c_high: 3,
        n_select: 2,
        k_top: 2,
        l_text: depth,
        l_img: depth,
        len_glob: 1,
        len_vis: 1,
        tau: 0.5,
        seed,
        ..ModelConfig::default()
    };
    (ds, cfg)
}

/// Nudges every parameter so no gradient sits at an exact symmetry point.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<ParamKey> = store.keys().collect();
    for k in keys {
        store.get_mut(k).mapv_inplace(|v| v + scale * rng.random_range(-1.0..1.0));
    }
}

/// Compares the tape gradient of the full loss with central differences
/// (h = 1e-4) for every key whose name starts with one of `prefixes`.
pub fn gradcheck_model(model: &mut PromptedMil, bag: &PreparedBag, prefixes: &[&str]) -> std::result::Result<Vec<(String, f64)>, String> {
    let (_, grads) = model.loss_and_grads(bag).map_err(|e| e.to_string())?;
    let keys: Vec<ParamKey> = model
        .store
        .keys()
        .filter(|&k| prefixes.iter().any(|p| model.store.name(k).starts_with(p)))
        .collect();
    ensure(!keys.is_empty(), || format!("no parameters match {prefixes:?}"))?;
    let mut report = Vec::new();
    for key in keys {
        let name = model.store.name(key).to_string();
        let analytic = grads
            .get(key)
            .cloned()
            .ok_or_else(|| format!("{name}: no gradient reached this parameter"))?;
        let original = model.store.get(key).clone();
        let numeric = numerical_grad(&original, 1e-4, |x| {
            *model.store.get_mut(key) = x.clone();
            model.loss(bag).expect("loss")
        });
        *model.store.get_mut(key) = original;
        let err = relative_error(&analytic, &numeric);
        if !(err <= 1e-4) {
            return Err(format!("{name}: relative error {err:.3e}"));
        }
        report.push((name, err));
    }
    Ok(report)
}

/// Gradient checks over several random tiny configurations, with every
/// prompt tensor, the generator and each GCN weight.
pub fn check_gradients() -> Check {
    let configs = [(4, 1, GraphKind::Sim, 1), (6, 2, GraphKind::Sim, 2), (8, 2, GraphKind::KnnFeat, 1), (5, 1, GraphKind::Sim, 3)];
    for (i, &(d, depth, graph, gcn_layers)) in configs.iter().enumerate() {
        let (ds, mut cfg) = tiny_setup(d, depth, 100 + i as u64);
        cfg.graph = graph;
        cfg.knn_k = 2;
        cfg.gcn_layers = gcn_layers;
        let mut model = PromptedMil::for_dataset(cfg, &ds).map_err(|e| e.to_string())?;
        perturb(&mut model.store, 0.1, i as u64);
        let bag = model.prepare(&ds.bags[ds.bags.len() - 1]).map_err(|e| e.to_string())?;
        ensure(bag.low_rows.nrows() <= 6 && bag.p_high.nrows() <= 6, || {
            format!("tiny bag too large: {} / {}", bag.low_rows.nrows(), bag.p_high.nrows())
        })?;
        gradcheck_model(&mut model, &bag, &["p_glob.", "p_vis.", "gen.", "gcn."])
            .map_err(|e| format!("config {i} (d={d}, L={depth}, {graph:?}): {e}"))?;
    }
    let (ds, mut cfg) = tiny_setup(6, 1, 7);
    cfg.npcgp = false;
    let mut model = PromptedMil::for_dataset(cfg, &ds).map_err(|e| e.to_string())?;
    perturb(&mut model.store, 0.1, 9);
    let bag = model.prepare(&ds.bags[0]).map_err(|e| e.to_string())?;
    gradcheck_model(&mut model, &bag, &["att."]).map(|_| ()).map_err(|e| format!("attention head: {e}"))
}

// ---- stochasticity invariants -------------------------------------------------

pub fn check_stochasticity(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let m = rng.random_range(1..=64);
        let kc = rng.random_range(1..=60);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.02..2.0);
        let p = random_mat(m, d, &mut rng);
        let z = random_mat(kc, d, &mut rng);
        let s = semantic_similarity(&p, &z, tau).map_err(|e| format!("trial {t}: {e}"))?;
        let a = adjacency_from_similarity(&s, tau).map_err(|e| format!("trial {t}: {e}"))?;
        for (name, mat) in [("S", &s), ("A", &a)] {
            for (r, row) in mat.outer_iter().enumerate() {
                let sum: f64 = row.sum();
                ensure((sum - 1.0).abs() <= 1e-6, || format!("trial {t}: {name} row {r} sums to {sum}"))?;
            }
        }
        let k = rng.random_range(1..6);
        let high: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..50.0)).collect();
        let low: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..50.0)).collect();
        let triple = LogitsTriple::from_scales(high.clone(), low.clone());
        for i in 0..k {
            close("overall", triple.overall[i], (high[i] + low[i]) / 2.0, 1e-9)?;
        }
    }
    Ok(())
}

// ---- degenerate pooling -------------------------------------------------------

pub fn check_degenerate_pooling(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let (m, k, c, d) = (rng.random_range(1..8), rng.random_range(2..4), rng.random_range(1..5), rng.random_range(2..9));
        let ph = random_mat(m, d, &mut rng);
        let pl = random_mat(m, d, &mut rng);
        let zh = random_mat(k * c, d, &mut rng);
        let zl = random_mat(k * c, d, &mut rng);
        let block = |p: &Mat, z: &Mat, cat: usize| -> Vec<f64> {
            let mut v = Vec::new();
            for i in 0..m {
                for j in cat * c..(cat + 1) * c {
                    v.push(dot(&p.row(i).to_vec(), &z.row(j).to_vec()));
                }
            }
            v
        };
        let max = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let one = cross_guided_logits(&ph, &pl, &zh, &zl, k, 1, true).map_err(|e| e.to_string())?;
        let all = cross_guided_logits(&ph, &pl, &zh, &zl, k, m * c, true).map_err(|e| e.to_string())?;
        for cat in 0..k {
            let hmax = max(block(&ph, &zh, cat)) + max(block(&ph, &zl, cat));
            let lmax = max(block(&pl, &zl, cat)) + max(block(&pl, &zh, cat));
            close("K_top=1 high", one.high[cat], hmax, 1e-9)?;
            close("K_top=1 low", one.low[cat], lmax, 1e-9)?;
            let hmean = mean(block(&ph, &zh, cat)) + mean(block(&ph, &zl, cat));
            let lmean = mean(block(&pl, &zl, cat)) + mean(block(&pl, &zh, cat));
            close("K_top=MC high", all.high[cat], hmean, 1e-9)?;
            close("K_top=MC low", all.low[cat], lmean, 1e-9)?;
        }
    }
    Ok(())
}

// ---- freezing and permutation -------------------------------------------------

use promptmil::harness::{train, TrainOptions};
use promptmil::isgpt::{graph_prompt_tune, similarity_state, GcnParams};
use promptmil::Bag;
use rand::seq::SliceRandom;

/// Reorders the instances of every view, keeping coordinates and instance
/// labels attached to their rows.
pub fn shuffle_bag(bag: &Bag, rng: &mut impl Rng) -> Bag {
    let mut out = bag.clone();
    for view in out.views.values_mut() {
        let mut perm: Vec<usize> = (0..view.len()).collect();
        perm.shuffle(rng);
        let src = view.clone();
        view.instances = Array2::from_shape_fn(src.instances.dim(), |(r, c)| src.instances[[perm[r], c]]);
        view.coords = perm.iter().map(|&i| src.coords[i]).collect();
        view.instance_labels = src.instance_labels.map(|l| perm.iter().map(|&i| l[i]).collect());
    }
    out
}

pub fn small_dataset(bags_per_class: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        bags_per_class,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec).expect("dataset").0
}

pub fn check_freezing(steps: usize) -> Check {
    let ds = small_dataset(8, 21);
    let cfg = ModelConfig {
        max_epochs: 100,
        patience: 100,
        lr: 1e-3,
        ..ModelConfig::default()
    };
    let mut model = PromptedMil::for_dataset(cfg.clone(), &ds).map_err(|e| e.to_string())?;
    let before = model.frozen_digest();
    let towers = model.vlm.clone();
    let params_before = model.store.digest();
    let bags = model.prepare_all(&ds.bags).map_err(|e| e.to_string())?;
    let opts = TrainOptions {
        max_steps: Some(steps),
        min_delta: -1.0,
        ..TrainOptions::from_config(&cfg)
    };
    let report = train(&mut model, &bags, &opts).map_err(|e| e.to_string())?;
    ensure(report.steps == steps, || format!("ran {} steps, wanted {steps}", report.steps))?;
    ensure(model.frozen_digest() == before, || "frozen tower hash changed".into())?;
    ensure(model.vlm == towers, || "frozen tower weights changed".into())?;
    ensure(model.store.digest() != params_before, || "trainable parameters did not move".into())
}

/// Shuffles instance order inside every bag and compares all logits.
pub fn check_permutation_invariance(graph: GraphKind, seed: u64) -> Check {
    let ds = small_dataset(4, 31 + seed);
    let cfg = ModelConfig {
        graph,
        seed,
        ..ModelConfig::default()
    };
    let mut model = PromptedMil::for_dataset(cfg, &ds).map_err(|e| e.to_string())?;
    perturb(&mut model.store, 0.05, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = model.prepare_all(&ds.bags).map_err(|e| e.to_string())?;
    let shuffled: Vec<Bag> = ds.bags.iter().map(|b| shuffle_bag(b, &mut rng)).collect();
    let shuffled = model.prepare_all(&shuffled).map_err(|e| e.to_string())?;
    let a = model.logits(&original).map_err(|e| e.to_string())?;
    let b = model.logits(&shuffled).map_err(|e| e.to_string())?;
    for (bag, (x, y)) in ds.bags.iter().zip(a.iter().zip(&b)) {
        for (u, v) in x.high.iter().chain(&x.low).chain(&x.overall).zip(y.high.iter().chain(&y.low).chain(&y.overall)) {
            ensure((u - v).abs() <= 1e-6, || format!("bag {}: logit {u} became {v}", bag.bag_id))?;
        }
    }
    Ok(())
}

pub fn check_gcn_equivariance(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let (m, d, layers) = (rng.random_range(2..20), rng.random_range(2..10), rng.random_range(1..4));
        let p = random_mat(m, d, &mut rng);
        let z = random_mat(rng.random_range(2..12), d, &mut rng);
        let a = similarity_state(&p, &z, 0.2).map_err(|e| e.to_string())?.a;
        let params = GcnParams {
            weights: (0..layers).map(|_| random_mat(d, d, &mut rng)).collect(),
        };
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let pp = Array2::from_shape_fn((m, d), |(r, c)| p[[perm[r], c]]);
        let ap = Array2::from_shape_fn((m, m), |(r, c)| a[[perm[r], perm[c]]]);
        let out = graph_prompt_tune(&p, &a, &params).map_err(|e| e.to_string())?;
        let out_p = graph_prompt_tune(&pp, &ap, &params).map_err(|e| e.to_string())?;
        for r in 0..m {
            for c in 0..d {
                let (u, v) = (out[[perm[r], c]], out_p[[r, c]]);
                ensure((u - v).abs() <= 1e-5, || format!("trial {t}: node {r} col {c}: {u} vs {v}"))?;
            }
        }
    }
    Ok(())
}
