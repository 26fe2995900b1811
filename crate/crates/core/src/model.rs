//! Toy BERT-style sentence encoder with hand-written backpropagation.
//!
//! Post-layer-norm transformer: token + learned positional embeddings, an
//! embedding layer norm, then `n_layers` blocks of multi-head
//! self-attention and a GELU feed-forward network, each wrapped in a
//! residual connection followed by layer normalization. Two heads sit on
//! top: an (untied) masked-language-model projection over the vocabulary
//! and a single fully connected classification layer over the pooled
//! sentence embedding.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{dot, linear, linear_backward, Real, Tensor};
use crate::vocab::{TokenId, CLS, MASK, PAD, SEP};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub pooling: Pooling,
    pub n_classes: usize,
    /// Reuse the token embedding matrix as the MLM output projection.
    pub tie_embeddings: bool,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 32,
            vocab_size: 0,
            pooling: Pooling::Mean,
            n_classes: 2,
            tie_embeddings: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("model config: {name} must be at least 1")));
            }
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::invalid("model config: init_std must be finite and non-negative"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("model config: max_seq_len must be at least 2"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln1: LayerNormParams<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
    pub ln2: LayerNormParams<F>,
}

/// Every trainable tensor of the encoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub emb_ln: LayerNormParams<F>,
    pub layers: Vec<LayerParams<F>>,
    pub mlm_w: Tensor<F>,
    pub mlm_b: Tensor<F>,
    pub cls_w: Tensor<F>,
    pub cls_b: Tensor<F>,
}

impl<F: Real> LayerNormParams<F> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], F::one()),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl<F: Real> Params<F> {
    /// All-zero tensors with the shapes implied by `cfg` (layer-norm gains
    /// included); used as gradient accumulators.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, v, l, c) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, cfg.n_classes);
        let zln = || LayerNormParams {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        };
        Self {
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[l, d]),
            emb_ln: zln(),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    wq: Tensor::zeros(&[d, d]),
                    bq: Tensor::zeros(&[d]),
                    wk: Tensor::zeros(&[d, d]),
                    bk: Tensor::zeros(&[d]),
                    wv: Tensor::zeros(&[d, d]),
                    bv: Tensor::zeros(&[d]),
                    wo: Tensor::zeros(&[d, d]),
                    bo: Tensor::zeros(&[d]),
                    ln1: zln(),
                    w1: Tensor::zeros(&[d, f]),
                    b1: Tensor::zeros(&[f]),
                    w2: Tensor::zeros(&[f, d]),
                    b2: Tensor::zeros(&[d]),
                    ln2: zln(),
                })
                .collect(),
            mlm_w: if cfg.tie_embeddings {
                Tensor::zeros(&[0, v])
            } else {
                Tensor::zeros(&[d, v])
            },
            mlm_b: Tensor::zeros(&[v]),
            cls_w: Tensor::zeros(&[d, c]),
            cls_b: Tensor::zeros(&[c]),
        }
    }

    /// Normal(0, 0.02) weight matrices, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = seed::rng_from(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
        let mut fill = |t: &mut Tensor<F>| {
            for x in t.data_mut() {
                *x = F::of(normal.sample(&mut rng));
            }
        };
        fill(&mut p.tok_emb);
        fill(&mut p.pos_emb);
        p.emb_ln = LayerNormParams::new(cfg.d_model);
        for layer in &mut p.layers {
            fill(&mut layer.wq);
            fill(&mut layer.wk);
            fill(&mut layer.wv);
            fill(&mut layer.wo);
            fill(&mut layer.w1);
            fill(&mut layer.w2);
            layer.ln1 = LayerNormParams::new(cfg.d_model);
            layer.ln2 = LayerNormParams::new(cfg.d_model);
        }
        fill(&mut p.mlm_w);
        fill(&mut p.cls_w);
        p
    }

    /// Named tensors in a fixed order (checkpoint layout).
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("emb_ln.gain".into(), &self.emb_ln.gain),
            ("emb_ln.bias".into(), &self.emb_ln.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let entries: [(&str, &Tensor<F>); 16] = [
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln1.gain", &l.ln1.gain),
                ("ln1.bias", &l.ln1.bias),
                ("ffn.w1", &l.w1),
                ("ffn.b1", &l.b1),
                ("ffn.w2", &l.w2),
                ("ffn.b2", &l.b2),
                ("ln2.gain", &l.ln2.gain),
                ("ln2.bias", &l.ln2.bias),
            ];
            out.extend(entries.into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("mlm.w".into(), &self.mlm_w));
        out.push(("mlm.b".into(), &self.mlm_b));
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out
    }

    /// Mutable view in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln.gain,
            &mut self.emb_ln.bias,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1.gain,
                &mut l.ln1.bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln2.gain,
                &mut l.ln2.bias,
            ]);
        }
        out.extend([&mut self.mlm_w, &mut self.mlm_b, &mut self.cls_w, &mut self.cls_b]);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: F, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn norm(&self) -> F {
        self.tensors().iter().map(|t| t.sum_squares()).sum::<F>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let ln = |l: &LayerNormParams<F>| LayerNormParams {
            gain: l.gain.cast(),
            bias: l.bias.cast(),
        };
        Params {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            emb_ln: ln(&self.emb_ln),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln1: ln(&l.ln1),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    ln2: ln(&l.ln2),
                })
                .collect(),
            mlm_w: self.mlm_w.cast(),
            mlm_b: self.mlm_b.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
        }
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Real>(x: &[F], p: &LayerNormParams<F>, n: usize, d: usize) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); n * d];
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    let (g, b) = (p.gain.data(), p.bias.data());
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dy: &[F],
    cache: &LnCache<F>,
    p: &LayerNormParams<F>,
    grad: &mut LayerNormParams<F>,
    n: usize,
    d: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); n * d];
    let g = p.gain.data();
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        {
            let dg = grad.gain.data_mut();
            for j in 0..d {
                dg[j] = dg[j] + dyi[j] * xh[j];
            }
        }
        {
            let db = grad.bias.data_mut();
            for j in 0..d {
                db[j] = db[j] + dyi[j];
            }
        }
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dxhat[j] = dyi[j] * g[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

struct LayerCache<F> {
    input: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    ln1: LnCache<F>,
    h1: Vec<F>,
    z: Vec<F>,
    act: Vec<F>,
    ln2: LnCache<F>,
}

/// Activations retained from a forward pass for backpropagation.
pub struct Trace<F> {
    ids: Vec<TokenId>,
    emb_ln: LnCache<F>,
    layers: Vec<LayerCache<F>>,
    output: Vec<F>,
}

impl<F: Real> Trace<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Final hidden states, `len × d_model` row-major.
    pub fn output(&self) -> &[F] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Real> EmbedderModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn cast<G: Real>(&self) -> EmbedderModel<G> {
        EmbedderModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() < 2 || ids.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside [2, {}]",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<Trace<F>> {
        self.check_tokens(ids)?;
        Ok(self.forward_unchecked(ids))
    }

    fn forward_unchecked(&self, ids: &[TokenId]) -> Trace<F> {
        let cfg = &self.config;
        let (n, d, ff, nh, hd) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let p = &self.params;
        let mut x0 = vec![F::zero(); n * d];
        for (i, &id) in ids.iter().enumerate() {
            let tok = p.tok_emb.row(id as usize);
            let pos = p.pos_emb.row(i);
            for j in 0..d {
                x0[i * d + j] = tok[j] + pos[j];
            }
        }
        let (mut h, emb_ln) = layer_norm(&x0, &p.emb_ln, n, d);
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &p.layers {
            let q = linear(&h, lp.wq.data(), lp.bq.data(), n, d, d);
            let k = linear(&h, lp.wk.data(), lp.bk.data(), n, d, d);
            let v = linear(&h, lp.wv.data(), lp.bv.data(), n, d, d);
            let mut probs = vec![F::zero(); nh * n * n];
            let mut ctx = vec![F::zero(); n * d];
            for head in 0..nh {
                let off = head * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let row = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
                    let mut max = F::neg_infinity();
                    for j in 0..n {
                        if ids[j] == PAD {
                            continue;
                        }
                        let s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut total = F::zero();
                    for j in 0..n {
                        if ids[j] == PAD {
                            row[j] = F::zero();
                        } else {
                            let e = (row[j] - max).exp();
                            row[j] = e;
                            total = total + e;
                        }
                    }
                    let inv = total.recip();
                    let ci = &mut ctx[i * d + off..i * d + off + hd];
                    for j in 0..n {
                        row[j] = row[j] * inv;
                        let pij = row[j];
                        if pij == F::zero() {
                            continue;
                        }
                        let vj = &v[j * d + off..j * d + off + hd];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c = *c + pij * vv;
                        }
                    }
                }
            }
            let att = linear(&ctx, lp.wo.data(), lp.bo.data(), n, d, d);
            let u: Vec<F> = h.iter().zip(&att).map(|(&a, &b)| a + b).collect();
            let (h1, ln1) = layer_norm(&u, &lp.ln1, n, d);
            let z = linear(&h1, lp.w1.data(), lp.b1.data(), n, d, ff);
            let act: Vec<F> = z.iter().map(|&x| gelu(x)).collect();
            let f = linear(&act, lp.w2.data(), lp.b2.data(), n, ff, d);
            let u2: Vec<F> = h1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            let (h2, ln2) = layer_norm(&u2, &lp.ln2, n, d);
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, h2),
                q,
                k,
                v,
                probs,
                ctx,
                ln1,
                h1,
                z,
                act,
                ln2,
            });
        }
        Trace {
            ids: ids.to_vec(),
            emb_ln,
            layers,
            output: h,
        }
    }

    /// Backpropagate `d_output` (gradient of the loss w.r.t. the final hidden
    /// states) through the encoder, accumulating into `grad`.
    pub fn backward(&self, trace: &Trace<F>, d_output: &[F], grad: &mut Params<F>) {
        let cfg = &self.config;
        let (n, d, ff, nh, hd) = (trace.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let p = &self.params;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut dh = d_output.to_vec();
        for (li, lc) in trace.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let lg = &mut grad.layers[li];
            let du2 = layer_norm_backward(&dh, &lc.ln2, &lp.ln2, &mut lg.ln2, n, d);
            let mut dh1 = du2.clone();
            let mut dact = vec![F::zero(); n * ff];
            linear_backward(
                &lc.act,
                lp.w2.data(),
                &du2,
                n,
                ff,
                d,
                lg.w2.data_mut(),
                lg.b2.data_mut(),
                Some(&mut dact),
            );
            let dz: Vec<F> = dact.iter().zip(&lc.z).map(|(&g, &z)| g * gelu_grad(z)).collect();
            linear_backward(
                &lc.h1,
                lp.w1.data(),
                &dz,
                n,
                d,
                ff,
                lg.w1.data_mut(),
                lg.b1.data_mut(),
                Some(&mut dh1),
            );
            let du = layer_norm_backward(&dh1, &lc.ln1, &lp.ln1, &mut lg.ln1, n, d);
            let mut dinput = du.clone();
            let mut dctx = vec![F::zero(); n * d];
            linear_backward(
                &lc.ctx,
                lp.wo.data(),
                &du,
                n,
                d,
                d,
                lg.wo.data_mut(),
                lg.bo.data_mut(),
                Some(&mut dctx),
            );
            let mut dq = vec![F::zero(); n * d];
            let mut dk = vec![F::zero(); n * d];
            let mut dv = vec![F::zero(); n * d];
            let mut dp = vec![F::zero(); n];
            for head in 0..nh {
                let off = head * hd;
                for i in 0..n {
                    let row = &lc.probs[(head * n + i) * n..(head * n + i + 1) * n];
                    let dci = &dctx[i * d + off..i * d + off + hd];
                    let mut weighted = F::zero();
                    for j in 0..n {
                        if row[j] == F::zero() {
                            dp[j] = F::zero();
                            continue;
                        }
                        let vj = &lc.v[j * d + off..j * d + off + hd];
                        dp[j] = dot(dci, vj);
                        weighted = weighted + row[j] * dp[j];
                        let dvj = &mut dv[j * d + off..j * d + off + hd];
                        for (g, &c) in dvj.iter_mut().zip(dci) {
                            *g = *g + row[j] * c;
                        }
                    }
                    let qi = &lc.q[i * d + off..i * d + off + hd];
                    for j in 0..n {
                        if row[j] == F::zero() {
                            continue;
                        }
                        let ds = row[j] * (dp[j] - weighted) * scale;
                        let kj = &lc.k[j * d + off..j * d + off + hd];
                        for t in 0..hd {
                            dq[i * d + off + t] = dq[i * d + off + t] + ds * kj[t];
                            dk[j * d + off + t] = dk[j * d + off + t] + ds * qi[t];
                        }
                    }
                }
            }
            linear_backward(&lc.input, lp.wq.data(), &dq, n, d, d, lg.wq.data_mut(), lg.bq.data_mut(), Some(&mut dinput));
            linear_backward(&lc.input, lp.wk.data(), &dk, n, d, d, lg.wk.data_mut(), lg.bk.data_mut(), Some(&mut dinput));
            linear_backward(&lc.input, lp.wv.data(), &dv, n, d, d, lg.wv.data_mut(), lg.bv.data_mut(), Some(&mut dinput));
            dh = dinput;
        }
        let dx0 = layer_norm_backward(&dh, &trace.emb_ln, &p.emb_ln, &mut grad.emb_ln, n, d);
        for (i, &id) in trace.ids.iter().enumerate() {
            let src = &dx0[i * d..(i + 1) * d];
            for (g, &s) in grad.tok_emb.row_mut(id as usize).iter_mut().zip(src) {
                *g = *g + s;
            }
            for (g, &s) in grad.pos_emb.row_mut(i).iter_mut().zip(src) {
                *g = *g + s;
            }
        }
    }

    /// Pooled sentence embedding from a forward trace.
    pub fn pool(&self, trace: &Trace<F>) -> Vec<F> {
        let d = self.config.d_model;
        match self.config.pooling {
            Pooling::Cls => trace.output[..d].to_vec(),
            Pooling::Mean => {
                let mut acc = vec![F::zero(); d];
                let mut count = 0usize;
                for (i, &id) in trace.ids.iter().enumerate() {
                    if id == PAD {
                        continue;
                    }
                    count += 1;
                    for (a, &h) in acc.iter_mut().zip(&trace.output[i * d..(i + 1) * d]) {
                        *a = *a + h;
                    }
                }
                let inv = F::of(1.0 / count.max(1) as f64);
                acc.iter_mut().for_each(|a| *a = *a * inv);
                acc
            }
        }
    }

    /// Gradient of the pooled embedding, spread back over hidden positions.
    pub fn pool_backward(&self, trace: &Trace<F>, d_pooled: &[F]) -> Vec<F> {
        let d = self.config.d_model;
        let mut out = vec![F::zero(); trace.len() * d];
        match self.config.pooling {
            Pooling::Cls => out[..d].copy_from_slice(d_pooled),
            Pooling::Mean => {
                let count = trace.ids.iter().filter(|&&id| id != PAD).count().max(1);
                let inv = F::of(1.0 / count as f64);
                for (i, &id) in trace.ids.iter().enumerate() {
                    if id == PAD {
                        continue;
                    }
                    for (o, &g) in out[i * d..(i + 1) * d].iter_mut().zip(d_pooled) {
                        *o = g * inv;
                    }
                }
            }
        }
        out
    }

    /// The sentence embedding function.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Vec<F>> {
        Ok(self.pool(&self.forward(ids)?))
    }

    fn check_mask_positions(&self, ids: &[TokenId], mask_positions: &[usize]) -> Result<()> {
        if mask_positions.is_empty() {
            return Err(Error::invalid("empty mask set"));
        }
        for &m in mask_positions {
            match ids.get(m) {
                None => return Err(Error::invalid(format!("mask position {m} outside sequence"))),
                Some(&t) if t == CLS || t == SEP || t == PAD => {
                    return Err(Error::invalid(format!("mask position {m} holds a special token")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn masked_input(ids: &[TokenId], mask_positions: &[usize]) -> Vec<TokenId> {
        let mut input = ids.to_vec();
        for &m in mask_positions {
            input[m] = MASK;
        }
        input
    }

    fn mlm_head(&self, trace: &Trace<F>, pos: usize) -> Vec<F> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let h = &trace.output[pos * d..(pos + 1) * d];
        if self.config.tie_embeddings {
            let mut out = self.params.mlm_b.data().to_vec();
            for (t, o) in out.iter_mut().enumerate() {
                *o = *o + dot(h, self.params.tok_emb.row(t));
            }
            return out;
        }
        linear(h, self.params.mlm_w.data(), self.params.mlm_b.data(), 1, d, v)
    }

    /// Backward through the MLM projection; returns the gradient w.r.t. the
    /// hidden state at the masked position.
    fn mlm_head_backward(&self, h: &[F], dlogits: &[F], grad: &mut Params<F>) -> Vec<F> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut dh = vec![F::zero(); d];
        if self.config.tie_embeddings {
            for (t, &g) in dlogits.iter().enumerate() {
                let row = self.params.tok_emb.row(t);
                for ((dj, gr), (&hj, &wj)) in dh.iter_mut().zip(grad.tok_emb.row_mut(t)).zip(h.iter().zip(row)) {
                    *dj = *dj + g * wj;
                    *gr = *gr + g * hj;
                }
            }
            for (b, &g) in grad.mlm_b.data_mut().iter_mut().zip(dlogits) {
                *b = *b + g;
            }
            return dh;
        }
        linear_backward(
            h,
            self.params.mlm_w.data(),
            dlogits,
            1,
            d,
            v,
            grad.mlm_w.data_mut(),
            grad.mlm_b.data_mut(),
            Some(&mut dh),
        );
        dh
    }

    /// Vocabulary logits at each masked position. `ids` holds the true
    /// tokens; positions in `mask_positions` are replaced by `[MASK]`.
    pub fn forward_mlm(&self, ids: &[TokenId], mask_positions: &[usize]) -> Result<Vec<Vec<F>>> {
        self.check_tokens(ids)?;
        self.check_mask_positions(ids, mask_positions)?;
        let trace = self.forward_unchecked(&Self::masked_input(ids, mask_positions));
        Ok(mask_positions.iter().map(|&m| self.mlm_head(&trace, m)).collect())
    }

    /// Classification logits over the pooled embedding.
    pub fn classify(&self, ids: &[TokenId]) -> Result<Vec<F>> {
        let pooled = self.embed(ids)?;
        Ok(self.classify_embedding(&pooled))
    }

    /// Classification logits for an already pooled (possibly projected)
    /// embedding.
    pub fn classify_embedding(&self, pooled: &[F]) -> Vec<F> {
        let (d, c) = (self.config.d_model, self.config.n_classes);
        linear(pooled, self.params.cls_w.data(), self.params.cls_b.data(), 1, d, c)
    }

    /// Loss value and full analytic gradient for one example.
    pub fn loss_and_grad(&self, spec: &LossSpec<'_>) -> Result<(F, Params<F>)> {
        let mut grad = Params::zeros(&self.config);
        let loss = self.accumulate(spec, &mut grad)?;
        Ok((loss, grad))
    }

    /// Loss value only (no backward pass).
    pub fn loss(&self, spec: &LossSpec<'_>) -> Result<F> {
        match *spec {
            LossSpec::Mlm { tokens, mask_positions } => {
                let logits = self.forward_mlm(tokens, mask_positions)?;
                let total: F = logits
                    .iter()
                    .zip(mask_positions)
                    .map(|(l, &m)| cross_entropy(l, tokens[m] as usize).0)
                    .sum();
                Ok(total / F::of(mask_positions.len() as f64))
            }
            LossSpec::Classification { tokens, label } => {
                self.check_label(label)?;
                Ok(cross_entropy(&self.classify(tokens)?, label).0)
            }
            LossSpec::DebiasPair { original, counterpart } => {
                let a = self.embed(original)?;
                let b = self.embed(counterpart)?;
                Ok(a.iter().zip(&b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>().sqrt())
            }
        }
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.config.n_classes
            )));
        }
        Ok(())
    }

    /// Adds this example's gradient into `grad` and returns its loss.
    pub fn accumulate(&self, spec: &LossSpec<'_>, grad: &mut Params<F>) -> Result<F> {
        let d = self.config.d_model;
        match *spec {
            LossSpec::Mlm { tokens, mask_positions } => {
                self.check_tokens(tokens)?;
                self.check_mask_positions(tokens, mask_positions)?;
                let trace = self.forward_unchecked(&Self::masked_input(tokens, mask_positions));
                let inv_m = F::of(1.0 / mask_positions.len() as f64);
                let mut d_out = vec![F::zero(); trace.len() * d];
                let mut total = F::zero();
                for &m in mask_positions {
                    let logits = self.mlm_head(&trace, m);
                    let (loss, mut dlogits) = cross_entropy(&logits, tokens[m] as usize);
                    total = total + loss;
                    dlogits.iter_mut().for_each(|g| *g = *g * inv_m);
                    let dh = self.mlm_head_backward(&trace.output[m * d..(m + 1) * d], &dlogits, grad);
                    for (o, &g) in d_out[m * d..(m + 1) * d].iter_mut().zip(&dh) {
                        *o = *o + g;
                    }
                }
                self.backward(&trace, &d_out, grad);
                Ok(total * inv_m)
            }
            LossSpec::Classification { tokens, label } => {
                self.check_label(label)?;
                let trace = self.forward(tokens)?;
                let pooled = self.pool(&trace);
                let logits = self.classify_embedding(&pooled);
                let (loss, dlogits) = cross_entropy(&logits, label);
                let mut dpooled = vec![F::zero(); d];
                linear_backward(
                    &pooled,
                    self.params.cls_w.data(),
                    &dlogits,
                    1,
                    d,
                    self.config.n_classes,
                    grad.cls_w.data_mut(),
                    grad.cls_b.data_mut(),
                    Some(&mut dpooled),
                );
                let d_out = self.pool_backward(&trace, &dpooled);
                self.backward(&trace, &d_out, grad);
                Ok(loss)
            }
            LossSpec::DebiasPair { original, counterpart } => {
                let ta = self.forward(original)?;
                let tb = self.forward(counterpart)?;
                let a = self.pool(&ta);
                let b = self.pool(&tb);
                let (dist, unit) = pair_distance(&a, &b);
                if dist > F::zero() {
                    let neg: Vec<F> = unit.iter().map(|&x| -x).collect();
                    let da = self.pool_backward(&ta, &unit);
                    self.backward(&ta, &da, grad);
                    let db = self.pool_backward(&tb, &neg);
                    self.backward(&tb, &db, grad);
                }
                Ok(dist)
            }
        }
    }
}

/// The three training objectives, for one example.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Mean cross-entropy over the masked positions.
    Mlm {
        tokens: &'a [TokenId],
        mask_positions: &'a [usize],
    },
    /// Cross-entropy of the classification head on the pooled embedding.
    Classification { tokens: &'a [TokenId], label: usize },
    /// Euclidean distance between the two sentence embeddings.
    DebiasPair {
        original: &'a [TokenId],
        counterpart: &'a [TokenId],
    },
}

/// `‖a − b‖` and its gradient with respect to `a` (the gradient with
/// respect to `b` is its negation). The subgradient at zero distance is zero.
pub fn pair_distance<F: Real>(a: &[F], b: &[F]) -> (F, Vec<F>) {
    let diff: Vec<F> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let dist = diff.iter().map(|&x| x * x).sum::<F>().sqrt();
    if dist > F::zero() {
        (dist, diff.iter().map(|&x| x / dist).collect())
    } else {
        (dist, vec![F::zero(); diff.len()])
    }
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<F: Real>(logits: &[F], target: usize) -> (F, Vec<F>) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    let loss = total.ln() - (logits[target] - max);
    let mut grad: Vec<F> = exps.iter().map(|&e| e / total).collect();
    grad[target] = grad[target] - F::one();
    (loss, grad)
}

/// Loss and gradients for one example; see [`EmbedderModel::loss_and_grad`].
pub fn gradients<F: Real>(model: &EmbedderModel<F>, spec: &LossSpec<'_>) -> Result<(F, Params<F>)> {
    let (loss, grad) = model.loss_and_grad(spec)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("loss {:?}", loss),
        });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 10,
            vocab_size: 20,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_shape_and_determinism() {
        let m = EmbedderModel::<f32>::new(small_config(), 1).unwrap();
        let ids = [CLS, 7, 9, 11, SEP];
        let a = m.embed(&ids).unwrap();
        let b = m.embed(&ids).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn embed_rejects_bad_input() {
        let m = EmbedderModel::<f32>::new(small_config(), 1).unwrap();
        assert!(m.embed(&[CLS, 20, SEP]).is_err());
        assert!(m.embed(&[CLS]).is_err());
        assert!(m.embed(&[CLS; 11]).is_err());
    }

    #[test]
    fn pad_tail_does_not_change_mean_pooling() {
        let m = EmbedderModel::<f64>::new(small_config(), 4).unwrap();
        let a = m.embed(&[CLS, 7, 8, SEP]).unwrap();
        let b = m.embed(&[CLS, 7, 8, SEP, PAD, PAD]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_mlm_head_gives_uniform_loss() {
        let cfg = ModelConfig {
            tie_embeddings: false,
            ..small_config()
        };
        let mut m = EmbedderModel::<f64>::new(cfg, 2).unwrap();
        m.params.mlm_w = Tensor::zeros(&[8, 20]);
        let ids = [CLS, 6, 7, 8, SEP];
        let loss = m
            .loss(&LossSpec::Mlm { tokens: &ids, mask_positions: &[1, 3] })
            .unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_mask_preconditions() {
        let m = EmbedderModel::<f32>::new(small_config(), 2).unwrap();
        let ids = [CLS, 6, 7, SEP];
        assert!(m.forward_mlm(&ids, &[]).is_err());
        assert!(m.forward_mlm(&ids, &[3]).is_err());
        assert!(m.forward_mlm(&ids, &[0]).is_err());
        assert!(m.forward_mlm(&ids, &[9]).is_err());
        let logits = m.forward_mlm(&ids, &[1, 2]).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].len(), 20);
    }

    #[test]
    fn identical_pair_has_zero_gradient() {
        let m = EmbedderModel::<f32>::new(small_config(), 3).unwrap();
        let ids = [CLS, 5, 6, SEP];
        let (loss, g) = m
            .loss_and_grad(&LossSpec::DebiasPair { original: &ids, counterpart: &ids })
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn cls_pooling_reads_first_position() {
        let mut cfg = small_config();
        cfg.pooling = Pooling::Cls;
        let m = EmbedderModel::<f64>::new(cfg, 3).unwrap();
        let t = m.forward(&[CLS, 5, 6, SEP]).unwrap();
        assert_eq!(m.pool(&t), t.output()[..8].to_vec());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[1.0f64, 2.0, 3.0], 2);
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
