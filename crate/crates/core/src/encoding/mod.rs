//! Text encoder producing the target-utterance vector and the context
//! vector from the classifier-token output of a bidirectional transformer.
//!
//! The context is encoded as one sequence, `[CLS] u1 [SEP] u2 [SEP] ... uk`,
//! oldest utterance first. When the joint sequence is too long the oldest
//! tokens are dropped.

mod vocab;

pub use vocab::{tokenize, Vocab, CLS, SEP, UNK};

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, join, normal_init, LayerNorm, LayerNormSeqCache, Linear, Param, Parameterized,
    Visit, VisitMut,
};

/// Environment variable naming a directory searched for encoder checkpoints.
pub const CACHE_DIR_ENV: &str = "DISCPARSE_CACHE";

/// Which end of an over-long utterance loses tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationSide {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `"scratch"` for fresh weights, otherwise a checkpoint directory (or a
    /// name under `$DISCPARSE_CACHE`) whose encoder weights and vocabulary
    /// are loaded.
    pub checkpoint_id: String,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Positional limit, classifier token included.
    pub max_tokens: usize,
    pub truncation_side: TruncationSide,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            checkpoint_id: "scratch".into(),
            hidden_dim: 768,
            layers: 2,
            heads: 12,
            ffn_dim: 3072,
            max_tokens: 256,
            truncation_side: TruncationSide::Tail,
            vocab_size: 30_000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "encoder.hidden_dim ({}) must be a positive multiple of encoder.heads ({})",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_tokens < 2 {
            return bad("encoder.max_tokens must be at least 2".into());
        }
        if self.vocab_size < 4 {
            return bad("encoder.vocab_size must be at least 4".into());
        }
        Ok(())
    }

    /// Resolves `checkpoint_id` to a directory, or `None` for fresh weights.
    pub fn resolve_checkpoint(&self) -> Result<Option<PathBuf>> {
        let id = self.checkpoint_id.trim();
        if id.is_empty() || id == "scratch" {
            return Ok(None);
        }
        let direct = PathBuf::from(id);
        if direct.is_dir() {
            return Ok(Some(direct));
        }
        if let Some(cache) = std::env::var_os(CACHE_DIR_ENV) {
            let cached = Path::new(&cache).join(id);
            if cached.is_dir() {
                return Ok(Some(cached));
            }
        }
        Err(Error::Config(format!(
            "encoder checkpoint '{id}' not found (checked the path and ${CACHE_DIR_ENV})"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding {
    pub vector: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub vector: Array1<f64>,
    pub k_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    attn_norm: LayerNormSeqCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_norm: LayerNormSeqCache,
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl Block {
    fn new(d: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        Block {
            query: Linear::new(d, d, true, rng),
            key: Linear::new(d, d, true, rng),
            value: Linear::new(d, d, true, rng),
            out: Linear::new(d, d, true, rng),
            attn_norm: LayerNorm::new(d),
            ff_in: Linear::new(d, ffn, true, rng),
            ff_out: Linear::new(ffn, d, true, rng),
            ff_norm: LayerNorm::new(d),
        }
    }

    fn forward(&self, x: ArrayView2<f64>, heads: usize) -> (Array2<f64>, BlockCache) {
        let (n, d) = x.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward_seq(x);
        let k = self.key.forward_seq(x);
        let v = self.value.forward_seq(x);
        let mut mixed = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            mixed.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let attended = self.out.forward_seq(mixed.view());
        let (h1, attn_norm) = self.attn_norm.forward_seq((&x + &attended).view());
        let ff_pre = self.ff_in.forward_seq(h1.view());
        let ff_act = ff_pre.mapv(gelu);
        let ff = self.ff_out.forward_seq(ff_act.view());
        let (y, ff_norm) = self.ff_norm.forward_seq((&h1 + &ff).view());
        let cache = BlockCache {
            input: x.to_owned(),
            q,
            k,
            v,
            probs,
            mixed,
            attn_norm,
            h1,
            ff_pre,
            ff_act,
            ff_norm,
        };
        (y, cache)
    }

    fn backward(&mut self, c: &BlockCache, dy: ArrayView2<f64>, heads: usize) -> Array2<f64> {
        let (n, d) = c.input.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dr2 = self.ff_norm.backward_seq(&c.ff_norm, dy);
        let dact = self.ff_out.backward_seq(c.ff_act.view(), dr2.view());
        let dpre = &dact * &c.ff_pre.mapv(gelu_grad);
        let dh1 = &dr2 + &self.ff_in.backward_seq(c.h1.view(), dpre.view());

        let dr1 = self.attn_norm.backward_seq(&c.attn_norm, dh1.view());
        let dmixed = self.out.backward_seq(c.mixed.view(), dr1.view());
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for (h, a) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dmixed.slice(cols);
            let da = dout.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (a * &(&da - &row_dot)) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let x = c.input.view();
        let mut dx = dr1;
        dx += &self.query.backward_seq(x, dq.view());
        dx += &self.key.backward_seq(x, dk.view());
        dx += &self.value.backward_seq(x, dv.view());
        dx
    }
}

impl Parameterized for Block {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.query.visit(&join(p, "query"), f);
        self.key.visit(&join(p, "key"), f);
        self.value.visit(&join(p, "value"), f);
        self.out.visit(&join(p, "out"), f);
        self.attn_norm.visit(&join(p, "attn_norm"), f);
        self.ff_in.visit(&join(p, "ff_in"), f);
        self.ff_out.visit(&join(p, "ff_out"), f);
        self.ff_norm.visit(&join(p, "ff_norm"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.query.visit_mut(&join(p, "query"), f);
        self.key.visit_mut(&join(p, "key"), f);
        self.value.visit_mut(&join(p, "value"), f);
        self.out.visit_mut(&join(p, "out"), f);
        self.attn_norm.visit_mut(&join(p, "attn_norm"), f);
        self.ff_in.visit_mut(&join(p, "ff_in"), f);
        self.ff_out.visit_mut(&join(p, "ff_out"), f);
        self.ff_norm.visit_mut(&join(p, "ff_norm"), f);
    }
}

/// Everything the backward pass needs from one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    ids: Vec<u32>,
    emb_norm: LayerNormSeqCache,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    vocab: Vocab,
    tokens: Param<ndarray::Ix2>,
    positions: Param<ndarray::Ix2>,
    emb_norm: LayerNorm,
    blocks: Vec<Block>,
}

impl TextEncoder {
    /// Fresh weights; the vocabulary size in `cfg` is an upper bound.
    pub fn new(cfg: EncoderConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let blocks = (0..cfg.layers)
            .map(|_| Block::new(d, cfg.ffn_dim, rng))
            .collect();
        Ok(TextEncoder {
            tokens: Param::new(normal_init(vocab.len(), d, 0.02, rng)),
            positions: Param::new(normal_init(cfg.max_tokens, d, 0.02, rng)),
            emb_norm: LayerNorm::new(d),
            blocks,
            vocab,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// `[CLS]` followed by the utterance tokens, truncated to `max_tokens`.
    pub fn utterance_ids(&self, text: &str) -> Vec<u32> {
        let mut body = self.vocab.encode(text);
        let room = self.cfg.max_tokens - 1;
        if body.len() > room {
            match self.cfg.truncation_side {
                TruncationSide::Tail => body.truncate(room),
                TruncationSide::Head => {
                    body.drain(..body.len() - room);
                }
            }
        }
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.push(CLS);
        ids.extend(body);
        ids
    }

    /// `[CLS] u1 [SEP] u2 ... [SEP] uk`, dropping the oldest tokens first.
    pub fn context_ids(&self, texts: &[&str]) -> Vec<u32> {
        let mut body = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            if i > 0 {
                body.push(SEP);
            }
            body.extend(self.vocab.encode(t));
        }
        let room = self.cfg.max_tokens - 1;
        if body.len() > room {
            body.drain(..body.len() - room);
        }
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.push(CLS);
        ids.extend(body);
        ids
    }

    pub fn encode_ids(&self, ids: &[u32]) -> (Array1<f64>, EncodeCache) {
        let n = ids.len();
        assert!(
            n > 0 && n <= self.cfg.max_tokens,
            "sequence length {n} out of range"
        );
        let mut emb = self.positions.value.slice(s![..n, ..]).to_owned();
        for (i, &id) in ids.iter().enumerate() {
            emb.row_mut(i)
                .scaled_add(1.0, &self.tokens.value.row(id as usize));
        }
        let (mut x, emb_norm) = self.emb_norm.forward_seq(emb.view());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(x.view(), self.cfg.heads);
            blocks.push(cache);
            x = y;
        }
        let cls = x.row(0).to_owned();
        (
            cls,
            EncodeCache {
                ids: ids.to_vec(),
                emb_norm,
                blocks,
            },
        )
    }

    /// Accumulates parameter gradients given the gradient of the classifier
    /// token output.
    pub fn backward(&mut self, cache: &EncodeCache, d_cls: ArrayView1<f64>) {
        let n = cache.ids.len();
        let mut dx = Array2::zeros((n, self.dim()));
        dx.row_mut(0).assign(&d_cls);
        let heads = self.cfg.heads;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, dx.view(), heads);
        }
        let demb = self.emb_norm.backward_seq(&cache.emb_norm, dx.view());
        self.positions
            .grad
            .slice_mut(s![..n, ..])
            .scaled_add(1.0, &demb);
        for (i, &id) in cache.ids.iter().enumerate() {
            self.tokens
                .grad
                .row_mut(id as usize)
                .scaled_add(1.0, &demb.row(i));
        }
    }

    pub fn forward_utterance(&self, text: &str) -> (UtteranceEmbedding, EncodeCache) {
        let (vector, cache) = self.encode_ids(&self.utterance_ids(text));
        (UtteranceEmbedding { vector }, cache)
    }

    /// Context embedding plus a cache, or `None` for an empty context, which
    /// maps to the zero vector and receives no gradient.
    pub fn forward_context(&self, texts: &[&str]) -> (ContextEmbedding, Option<EncodeCache>) {
        if texts.is_empty() {
            return (
                ContextEmbedding {
                    vector: Array1::zeros(self.dim()),
                    k_used: 0,
                },
                None,
            );
        }
        let (vector, cache) = self.encode_ids(&self.context_ids(texts));
        (
            ContextEmbedding {
                vector,
                k_used: texts.len(),
            },
            Some(cache),
        )
    }

    pub fn embed_utterance(&self, text: &str) -> UtteranceEmbedding {
        self.forward_utterance(text).0
    }

    pub fn embed_context(&self, texts: &[&str]) -> ContextEmbedding {
        self.forward_context(texts).0
    }
}

impl Parameterized for TextEncoder {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.tokens.visit(&join(p, "tokens"), f);
        self.positions.visit(&join(p, "positions"), f);
        self.emb_norm.visit(&join(p, "emb_norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(p, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.tokens.visit_mut(&join(p, "tokens"), f);
        self.positions.visit_mut(&join(p, "positions"), f);
        self.emb_norm.visit_mut(&join(p, "emb_norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("block{i}")), f);
        }
    }
}
