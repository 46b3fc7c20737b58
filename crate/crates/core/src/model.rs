//! The full parser network: encoder, fusion and classifier heads.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodeCache, EncoderConfig, TextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{build_speaker_vectors, speaker_window, FuseCache, Fusion};
use crate::labels::LabelId;
use crate::nn::{join, Parameterized, Visit, VisitMut};
use crate::objectives::{HeadCache, Heads, LabelScores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of each classifier head; defaults to the encoder width.
    pub head_hidden: Option<usize>,
    /// Initial score of every head, set through the output bias. Starting
    /// near the label base rate keeps early steps from flooding positives.
    pub initial_score: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head_hidden: None,
            initial_score: 0.05,
        }
    }
}

/// Architecture-relevant settings fixed at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub k: usize,
    pub speaker_feature: bool,
}

/// One preceding utterance in the context window.
#[derive(Debug, Clone, Copy)]
pub struct ContextItem<'a> {
    pub text: &'a str,
    pub author: &'a str,
    pub labels: &'a BTreeSet<LabelId>,
}

/// Target utterance plus at most `k` context items, oldest first.
#[derive(Debug, Clone)]
pub struct ModelInput<'a> {
    pub text: &'a str,
    pub author: &'a str,
    pub context: Vec<ContextItem<'a>>,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    utterance: EncodeCache,
    context: Option<EncodeCache>,
    label_sets: Vec<BTreeSet<LabelId>>,
    fuse: FuseCache,
    pub heads: HeadCache,
    pub u_vec: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscourseModel {
    pub encoder: TextEncoder,
    pub fusion: Fusion,
    pub heads: Heads,
    shape: Shape,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_score > 0.0 && self.initial_score < 1.0) {
            return Err(Error::Config(
                "model.initial_score must lie in (0, 1)".into(),
            ));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("model.head_hidden must be positive".into()));
        }
        self.encoder.validate()
    }
}

impl DiscourseModel {
    pub fn new(cfg: &ModelConfig, shape: Shape, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        let encoder = TextEncoder::new(cfg.encoder.clone(), vocab, rng)?;
        Ok(Self::with_encoder(encoder, cfg, shape, rng))
    }

    pub fn with_encoder(
        encoder: TextEncoder,
        cfg: &ModelConfig,
        shape: Shape,
        rng: &mut impl Rng,
    ) -> Self {
        let d = encoder.dim();
        let fusion = Fusion::new(d, shape.speaker_feature.then_some(shape.k), rng);
        let mut heads = Heads::new(fusion.output_dim(), cfg.head_hidden.unwrap_or(d), rng);
        let p = cfg.initial_score;
        heads.b2.value.fill((p / (1.0 - p)).ln());
        DiscourseModel {
            encoder,
            fusion,
            heads,
            shape,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn k(&self) -> usize {
        self.shape.k
    }

    pub fn forward(&self, input: &ModelInput<'_>) -> Result<(LabelScores, ModelCache)> {
        let k = self.shape.k;
        if input.context.len() > k {
            return Err(Error::dim("context window", k, input.context.len()));
        }
        let (u, utterance) = self.encoder.forward_utterance(input.text);
        let texts: Vec<&str> = input.context.iter().map(|c| c.text).collect();
        let (c, context) = self.encoder.forward_context(&texts);
        let label_sets: Vec<BTreeSet<LabelId>> =
            input.context.iter().map(|c| c.labels.clone()).collect();
        let pooled = self.fusion.pool_context_labels(&label_sets);
        let speakers = self.shape.speaker_feature.then(|| {
            let authors: Vec<&str> = input.context.iter().map(|c| c.author).collect();
            build_speaker_vectors(&speaker_window(&authors, input.author, k))
        });
        let (z, fuse) = self.fusion.fuse(
            u.vector.view(),
            c.vector.view(),
            pooled.view(),
            speakers.as_ref(),
        )?;
        let (scores, heads) = self.heads.forward(z.view())?;
        Ok((
            scores,
            ModelCache {
                utterance,
                context,
                label_sets,
                fuse,
                heads,
                u_vec: u.vector,
            },
        ))
    }

    pub fn predict(&self, input: &ModelInput<'_>) -> Result<LabelScores> {
        Ok(self.forward(input)?.0)
    }

    /// Backpropagates per-label logit gradients, plus an optional extra
    /// gradient on the utterance embedding (from an auxiliary loss).
    pub fn backward(
        &mut self,
        cache: &ModelCache,
        d_logits: ArrayView1<f64>,
        extra_du: Option<ArrayView1<f64>>,
    ) {
        let dz = self.heads.backward(&cache.heads, d_logits);
        let (mut du, dc, dpooled) = self.fusion.backward(&cache.fuse, dz.view());
        self.fusion
            .labels
            .backward(&cache.label_sets, dpooled.view());
        if let Some(extra) = extra_du {
            du += &extra;
        }
        self.encoder.backward(&cache.utterance, du.view());
        if let Some(ctx) = &cache.context {
            self.encoder.backward(ctx, dc.view());
        }
    }
}

impl Parameterized for DiscourseModel {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.encoder.visit(&join(p, "encoder"), f);
        self.fusion.visit(&join(p, "fusion"), f);
        self.heads.visit(&join(p, "heads"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.encoder.visit_mut(&join(p, "encoder"), f);
        self.fusion.visit_mut(&join(p, "fusion"), f);
        self.heads.visit_mut(&join(p, "heads"), f);
    }
}
