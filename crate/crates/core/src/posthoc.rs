//! Post-hoc debiasers applied to frozen embeddings.
//!
//! * Sent-Debias: top principal directions of the (centered) differences
//!   `E(S_o) − E(S_c)` over contrastive pairs are projected out.
//! * Null-It-Out (INLP): repeatedly train a linear gender classifier and
//!   project the embeddings onto the nullspace of its weight vector until
//!   the classifier is no better than chance.
//!
//! Both end up as orthogonal projections, so they are idempotent and never
//! increase a vector's norm.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairminer::{ContrastivePair, Template, TermGroup};
use crate::seed;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal bias directions found by PCA on contrastive differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSubspace {
    /// `k` unit vectors of dimension `dim`.
    pub directions: Vec<Vec<f64>>,
    /// Fraction of the difference variance carried by each direction.
    pub explained_variance: Vec<f64>,
}

impl BiasSubspace {
    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    pub fn k(&self) -> usize {
        self.directions.len()
    }

    /// `e − V Vᵀ e`
    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), e.len())?;
        let mut out = e.to_vec();
        for v in &self.directions {
            let c = dot(v, e);
            for (o, &vi) in out.iter_mut().zip(v) {
                *o -= c * vi;
            }
        }
        Ok(out)
    }

    /// The projection `I − V Vᵀ` as a row-major matrix.
    pub fn projection_matrix(&self) -> Vec<f64> {
        let d = self.dim();
        let mut p = identity(d);
        for v in &self.directions {
            for i in 0..d {
                for j in 0..d {
                    p[i * d + j] -= v[i] * v[j];
                }
            }
        }
        p
    }
}

/// PCA (via SVD) of the centered difference vectors of `pairs`.
pub fn sent_debias_fit<E>(embed_fn: E, pairs: &[ContrastivePair], k: usize) -> Result<BiasSubspace>
where
    E: Fn(&str) -> Result<Vec<f64>>,
{
    let diffs = pairs
        .iter()
        .map(|p| {
            let a = embed_fn(&p.original)?;
            let b = embed_fn(&p.counterpart)?;
            check_dim(a.len(), b.len())?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    sent_debias_from_differences(&diffs, k)
}

pub fn sent_debias_from_differences(diffs: &[Vec<f64>], k: usize) -> Result<BiasSubspace> {
    if k == 0 {
        return Err(Error::invalid("sent-debias: k must be at least 1"));
    }
    if diffs.len() < k + 1 {
        return Err(Error::invalid(format!(
            "sent-debias: need at least {} pairs for k = {k}, got {}",
            k + 1,
            diffs.len()
        )));
    }
    let d = diffs[0].len();
    for row in diffs {
        check_dim(d, row.len())?;
    }
    if diffs.iter().flatten().all(|&x| x == 0.0) {
        return Err(Error::invalid(
            "sent-debias: all difference vectors are zero (degenerate embedder)",
        ));
    }
    let n = diffs.len();
    let mut mean = vec![0.0; d];
    for row in diffs {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| diffs[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = top * (n.max(d) as f64) * f64::EPSILON * 16.0;
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    if top == 0.0 || k > rank {
        return Err(Error::InsufficientRank { requested: k, rank });
    }
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let directions = order[..k]
        .iter()
        .map(|&i| v_t.row(i).iter().copied().collect())
        .collect();
    let explained_variance = order[..k]
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / total)
        .collect();
    Ok(BiasSubspace {
        directions,
        explained_variance,
    })
}

pub fn sent_debias_apply(e: &[f64], v: &BiasSubspace) -> Result<Vec<f64>> {
    v.apply(e)
}

/// Embeddings labelled by which side of a gendered pair produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    pub x: Vec<Vec<f64>>,
    /// 0 = first term of its group, 1 = second term.
    pub labels: Vec<u8>,
}

impl LabeledEmbeddingSet {
    pub fn new(x: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if x.len() != labels.len() || x.is_empty() {
            return Err(Error::invalid("labeled set: rows and labels must match and be nonempty"));
        }
        let d = x[0].len();
        for row in &x {
            check_dim(d, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("labeled set: non-finite embedding"));
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labeled set: labels must be 0 or 1"));
        }
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(Error::invalid("labeled set: both classes must be present"));
        }
        Ok(Self { x, labels })
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }
}

/// Fill every template with every term of each 2-term group and label the
/// sentence by the term's side.
pub fn build_gender_labeled_set<E>(
    embed_fn: E,
    groups: &[TermGroup],
    templates: &[Template],
) -> Result<LabeledEmbeddingSet>
where
    E: Fn(&str) -> Result<Vec<f64>>,
{
    if let Some(g) = groups.iter().find(|g| g.len() != 2) {
        return Err(Error::invalid(format!(
            "gender labeled set needs 2-term groups, got {:?}",
            g.terms()
        )));
    }
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for t in templates {
        for g in groups {
            for (label, term) in g.terms().iter().enumerate() {
                x.push(embed_fn(&t.fill(term))?);
                labels.push(label as u8);
            }
        }
    }
    LabeledEmbeddingSet::new(x, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InlpConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Held-out fraction on which each classifier's accuracy is measured.
    pub dev_fraction: f64,
    /// Stop once accuracy is within this margin of the majority-class rate.
    pub chance_margin: f64,
    /// L2 penalty on the classifier weights (not the bias).
    pub l2: f64,
    pub seed: u64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 16,
            dev_fraction: 0.3,
            chance_margin: 0.02,
            l2: 0.0,
            seed: 0,
        }
    }
}

/// Logistic regression trained by mini-batch SGD from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[u8], cfg: &InlpConfig, seed: u64) -> Self {
        let d = x[0].len();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut rng = seed::derive_rng(seed, "inlp-sgd", 0);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut gw = vec![0.0; d];
                let mut gb = 0.0;
                for &i in chunk {
                    let p = sigmoid(dot(&w, &x[i]) + b);
                    let err = p - y[i] as f64;
                    for (g, &xi) in gw.iter_mut().zip(&x[i]) {
                        *g += err * xi;
                    }
                    gb += err;
                }
                let step = cfg.lr / chunk.len() as f64;
                let shrink = 1.0 - cfg.lr * cfg.l2;
                for (wi, g) in w.iter_mut().zip(&gw) {
                    *wi = shrink * *wi - step * g;
                }
                b -= step * gb;
            }
        }
        Self { w, b }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(dot(&self.w, x) + self.b > 0.0)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[u8]) -> f64 {
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / x.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
}

/// Cumulative nullspace projection `P = I − Σ uᵢuᵢᵀ` over the removed
/// classifier directions `uᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullspaceProjector {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    /// Orthonormal directions removed so far.
    pub removed: Vec<Vec<f64>>,
    /// Held-out accuracy of every classifier trained, including the final
    /// one that triggered the stop (if any).
    pub accuracies: Vec<f64>,
    pub chance: f64,
}

impl NullspaceProjector {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            matrix: identity(dim),
            removed: Vec::new(),
            accuracies: Vec::new(),
            chance: 0.5,
        }
    }

    pub fn iterations(&self) -> usize {
        self.removed.len()
    }

    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, e.len())?;
        Ok(mat_vec(&self.matrix, e))
    }

    fn remove(&mut self, w: &[f64]) -> bool {
        let mut u = w.to_vec();
        // Re-orthogonalize against earlier directions.
        for prev in &self.removed {
            let c = dot(prev, &u);
            for (ui, &pi) in u.iter_mut().zip(prev) {
                *ui -= c * pi;
            }
        }
        let norm = dot(&u, &u).sqrt();
        let scale = dot(w, w).sqrt();
        if !(norm > 1e-8 * scale.max(1e-300)) {
            return false;
        }
        u.iter_mut().for_each(|x| *x /= norm);
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                self.matrix[i * d + j] -= u[i] * u[j];
            }
        }
        self.removed.push(u);
        true
    }
}

/// Iterative nullspace projection. Runs at most `n_iters` rounds, stopping
/// early once a classifier's held-out accuracy is within
/// `cfg.chance_margin` of the majority-class rate.
pub fn inlp_fit(data: &LabeledEmbeddingSet, n_iters: usize, cfg: &InlpConfig) -> Result<NullspaceProjector> {
    let d = data.dim();
    if n_iters > d {
        return Err(Error::invalid(format!("inlp: n_iters {n_iters} exceeds dimension {d}")));
    }
    if n_iters == 0 {
        return Ok(NullspaceProjector::identity(d));
    }
    let mut order: Vec<usize> = (0..data.x.len()).collect();
    order.shuffle(&mut seed::derive_rng(cfg.seed, "inlp-split", 0));
    let n_dev = ((data.x.len() as f64) * cfg.dev_fraction).round() as usize;
    let n_dev = n_dev.clamp(1, data.x.len() - 1);
    let (dev_idx, train_idx) = order.split_at(n_dev);
    let train_y: Vec<u8> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let dev_y: Vec<u8> = dev_idx.iter().map(|&i| data.labels[i]).collect();
    if !train_y.contains(&0) || !train_y.contains(&1) {
        return Err(Error::invalid("inlp: training split lacks one class"));
    }
    let ones = dev_y.iter().filter(|&&y| y == 1).count() as f64 / dev_y.len() as f64;
    let chance = ones.max(1.0 - ones);
    let mut proj = NullspaceProjector::identity(d);
    proj.chance = chance;
    for it in 0..n_iters {
        let project = |idx: &[usize]| -> Vec<Vec<f64>> {
            idx.iter().map(|&i| mat_vec(&proj.matrix, &data.x[i])).collect()
        };
        let train_x = project(train_idx);
        let dev_x = project(dev_idx);
        let clf = LogisticRegression::fit(&train_x, &train_y, cfg, seed::derive_seed(cfg.seed, "inlp-iter", it as u64));
        let acc = clf.accuracy(&dev_x, &dev_y);
        proj.accuracies.push(acc);
        if acc <= chance + cfg.chance_margin {
            break;
        }
        if !proj.remove(&clf.w) {
            break;
        }
    }
    Ok(proj)
}

pub fn inlp_apply(e: &[f64], p: &NullspaceProjector) -> Result<Vec<f64>> {
    p.apply(e)
}

/// A fitted post-hoc debiaser.
#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    SentDebias(BiasSubspace),
    Inlp(NullspaceProjector),
}

pub const PROJECTOR_MAGIC: &[u8; 4] = b"PRJ1";

impl Projector {
    pub fn method(&self) -> &'static str {
        match self {
            Projector::SentDebias(_) => "sentdebias",
            Projector::Inlp(_) => "inlp",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Projector::SentDebias(v) => v.dim(),
            Projector::Inlp(p) => p.dim,
        }
    }

    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        match self {
            Projector::SentDebias(v) => v.apply(e),
            Projector::Inlp(p) => p.apply(e),
        }
    }

    pub fn projection_matrix(&self) -> Vec<f64> {
        match self {
            Projector::SentDebias(v) => v.projection_matrix(),
            Projector::Inlp(p) => p.matrix.clone(),
        }
    }

    /// `PRJ1` encoding:
    ///
    /// ```text
    /// b"PRJ1"  u8 tag_len  tag ("sentdebias" | "inlp")  u32 dim
    /// u32 rows  u32 cols  rows×cols f32 (row-major)
    /// u32 meta_len  meta_len bytes of JSON metadata
    /// ```
    ///
    /// Sent-Debias stores its `k × dim` direction matrix, INLP its
    /// `dim × dim` projection. Matrices round through `f32`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PROJECTOR_MAGIC);
        let tag = self.method().as_bytes();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        let (rows, data, meta) = match self {
            Projector::SentDebias(v) => (
                v.k(),
                v.directions.concat(),
                serde_json::json!({ "k": v.k(), "explained_variance": v.explained_variance }),
            ),
            Projector::Inlp(p) => (
                p.dim,
                p.matrix.clone(),
                serde_json::json!({
                    "iterations": p.iterations(),
                    "accuracies": p.accuracies,
                    "chance": p.chance,
                    "removed": p.removed,
                }),
            ),
        };
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for x in data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let meta = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "projector",
            detail: d.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != PROJECTOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let tag_len = take(1)?[0] as usize;
        let tag = std::str::from_utf8(take(tag_len)?).map_err(|_| bad("tag not utf-8"))?.to_string();
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let dim = u32_at(take(4)?);
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        if cols != dim {
            return Err(bad("column count differs from dimension"));
        }
        let data: Vec<f64> = take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let meta_len = u32_at(take(4)?);
        let meta: serde_json::Value = serde_json::from_slice(take(meta_len)?)?;
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        match tag.as_str() {
            "sentdebias" => Ok(Projector::SentDebias(BiasSubspace {
                directions: data.chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
                explained_variance: serde_json::from_value(meta["explained_variance"].clone())?,
            })),
            "inlp" => Ok(Projector::Inlp(NullspaceProjector {
                dim,
                matrix: data,
                removed: serde_json::from_value(meta["removed"].clone())?,
                accuracies: serde_json::from_value(meta["accuracies"].clone())?,
                chance: serde_json::from_value(meta["chance"].clone())?,
            })),
            other => Err(bad(&format!("unknown method tag {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Numerical rank of a square row-major matrix via SVD.
pub fn matrix_rank(m: &[f64], d: usize, tol: f64) -> usize {
    let mat = DMatrix::from_row_slice(d, d, m);
    mat.singular_values().iter().filter(|&&s| s > tol).count()
}

/// Frobenius norm of `P·P − P`.
pub fn idempotence_error(m: &[f64], d: usize) -> f64 {
    let p = DMatrix::from_row_slice(d, d, m);
    (&p * &p - &p).norm()
}
