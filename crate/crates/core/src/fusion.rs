//! Context fusion: pooled context-label embeddings, two gated residual
//! blocks and optional speaker turn-taking features.
//!
//! ```text
//! h = GRN_ctx(c_vec, pool(labels))
//! z = GRN_tgt(u_vec, h)  [ ++ flattened speaker one-hots ]
//! ```

use std::collections::BTreeSet;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis, Ix2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{LabelId, NUM_LABELS};
use crate::nn::{
    elu, elu_grad, join, normal_init, sigmoid, LayerNorm, LayerNormCache, Linear, Param,
    Parameterized, Visit, VisitMut,
};

/// Row of the label table used for context utterances without labels.
pub const UNTAGGED: usize = NUM_LABELS;

/// Author id used for window slots before the start of the branch.
pub const PAD_AUTHOR: &str = "\u{0}pad";

/// 31 label vectors plus the untagged vector at row [`UNTAGGED`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    pub vectors: Param<Ix2>,
}

impl LabelEmbeddingTable {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        LabelEmbeddingTable {
            vectors: Param::new(normal_init(NUM_LABELS + 1, d, 0.02, rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.value.ncols()
    }

    /// Mean of each utterance's label vectors (or the untagged vector when
    /// it has none), then the mean over utterances. An empty context maps
    /// to the untagged vector.
    pub fn pool(&self, label_sets: &[BTreeSet<LabelId>]) -> Array1<f64> {
        let table = &self.vectors.value;
        if label_sets.is_empty() {
            return table.row(UNTAGGED).to_owned();
        }
        let mut out = Array1::zeros(self.dim());
        let outer = 1.0 / label_sets.len() as f64;
        for set in label_sets {
            if set.is_empty() {
                out.scaled_add(outer, &table.row(UNTAGGED));
            } else {
                let inner = outer / set.len() as f64;
                for &l in set {
                    out.scaled_add(inner, &table.row(l));
                }
            }
        }
        out
    }

    pub fn backward(&mut self, label_sets: &[BTreeSet<LabelId>], d_pooled: ArrayView1<f64>) {
        let grad = &mut self.vectors.grad;
        if label_sets.is_empty() {
            grad.row_mut(UNTAGGED).scaled_add(1.0, &d_pooled);
            return;
        }
        let outer = 1.0 / label_sets.len() as f64;
        for set in label_sets {
            if set.is_empty() {
                grad.row_mut(UNTAGGED).scaled_add(outer, &d_pooled);
            } else {
                let inner = outer / set.len() as f64;
                for &l in set {
                    grad.row_mut(l).scaled_add(inner, &d_pooled);
                }
            }
        }
    }
}

impl Parameterized for LabelEmbeddingTable {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.vectors.visit(&join(p, "vectors"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.vectors.visit_mut(&join(p, "vectors"), f);
    }
}

/// Gated residual network over a primary input `x` and a context `c`:
///
/// ```text
/// eta2 = ELU(W2 x + W3 c + b2)
/// eta1 = W1 eta2 + b1
/// out  = LayerNorm(x + sigmoid(W4 eta1 + b4) * (W5 eta1 + b5))
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Grn {
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    pub w4: Linear,
    pub w5: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct GrnCache {
    x: Array1<f64>,
    c: Array1<f64>,
    pre: Array1<f64>,
    eta2: Array1<f64>,
    eta1: Array1<f64>,
    gate: Array1<f64>,
    lin: Array1<f64>,
    norm: LayerNormCache,
}

impl Grn {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        Grn {
            w1: Linear::new(d, d, true, rng),
            w2: Linear::new(d, d, true, rng),
            w3: Linear::new(d, d, false, rng),
            w4: Linear::new(d, d, true, rng),
            w5: Linear::new(d, d, true, rng),
            norm: LayerNorm::new(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward(
        &self,
        x: ArrayView1<f64>,
        c: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, GrnCache)> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::dim("grn input", d, x.len()));
        }
        if c.len() != d {
            return Err(Error::dim("grn context", d, c.len()));
        }
        let pre = self.w2.forward(x) + self.w3.forward(c);
        let eta2 = pre.mapv(elu);
        let eta1 = self.w1.forward(eta2.view());
        let gate = self.w4.forward(eta1.view()).mapv(sigmoid);
        let lin = self.w5.forward(eta1.view());
        let (y, norm) = self.norm.forward((&x + &(&gate * &lin)).view());
        let cache = GrnCache {
            x: x.to_owned(),
            c: c.to_owned(),
            pre,
            eta2,
            eta1,
            gate,
            lin,
            norm,
        };
        Ok((y, cache))
    }

    /// Returns (d_x, d_c).
    pub fn backward(
        &mut self,
        cache: &GrnCache,
        dy: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let dsum = self.norm.backward(&cache.norm, dy);
        let dgate = &dsum * &cache.lin;
        let dlin = &dsum * &cache.gate;
        let dgate_pre = dgate * &cache.gate.mapv(|g| g * (1.0 - g));
        let deta1 = self.w4.backward(cache.eta1.view(), dgate_pre.view())
            + self.w5.backward(cache.eta1.view(), dlin.view());
        let deta2 = self.w1.backward(cache.eta2.view(), deta1.view());
        let dpre = deta2 * &cache.pre.mapv(elu_grad);
        let dx = dsum + self.w2.backward(cache.x.view(), dpre.view());
        let dc = self.w3.backward(cache.c.view(), dpre.view());
        (dx, dc)
    }
}

impl Parameterized for Grn {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.w1.visit(&join(p, "w1"), f);
        self.w2.visit(&join(p, "w2"), f);
        self.w3.visit(&join(p, "w3"), f);
        self.w4.visit(&join(p, "w4"), f);
        self.w5.visit(&join(p, "w5"), f);
        self.norm.visit(&join(p, "norm"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.w1.visit_mut(&join(p, "w1"), f);
        self.w2.visit_mut(&join(p, "w2"), f);
        self.w3.visit_mut(&join(p, "w3"), f);
        self.w4.visit_mut(&join(p, "w4"), f);
        self.w5.visit_mut(&join(p, "w5"), f);
        self.norm.visit_mut(&join(p, "norm"), f);
    }
}

/// One one-hot row per window position (oldest context first, target
/// last). Authors are numbered by first appearance in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVectors {
    pub onehots: Array2<f64>,
}

impl SpeakerVectors {
    pub fn flattened(&self) -> Array1<f64> {
        self.onehots.iter().copied().collect()
    }

    pub fn window(&self) -> usize {
        self.onehots.nrows()
    }
}

pub fn build_speaker_vectors<S: AsRef<str>>(author_ids: &[S]) -> SpeakerVectors {
    let n = author_ids.len();
    let mut seen: Vec<&str> = Vec::with_capacity(n);
    let mut onehots = Array2::zeros((n, n));
    for (pos, a) in author_ids.iter().enumerate() {
        let a = a.as_ref();
        let idx = match seen.iter().position(|s| *s == a) {
            Some(i) => i,
            None => {
                seen.push(a);
                seen.len() - 1
            }
        };
        onehots[[pos, idx]] = 1.0;
    }
    SpeakerVectors { onehots }
}

/// Pads the context authors on the left to `k` slots and appends the target.
pub fn speaker_window<S: AsRef<str>>(
    context_authors: &[S],
    target_author: &str,
    k: usize,
) -> Vec<String> {
    let keep = context_authors.len().min(k);
    let tail = &context_authors[context_authors.len() - keep..];
    std::iter::repeat_n(PAD_AUTHOR.to_string(), k - keep)
        .chain(tail.iter().map(|s| s.as_ref().to_string()))
        .chain(std::iter::once(target_author.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub labels: LabelEmbeddingTable,
    pub context_grn: Grn,
    pub target_grn: Grn,
    /// Context length `k` when speaker features are enabled.
    pub speaker_k: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    context: GrnCache,
    target: GrnCache,
}

impl Fusion {
    pub fn new(d: usize, speaker_k: Option<usize>, rng: &mut impl Rng) -> Self {
        Fusion {
            labels: LabelEmbeddingTable::new(d, rng),
            context_grn: Grn::new(d, rng),
            target_grn: Grn::new(d, rng),
            speaker_k,
        }
    }

    pub fn dim(&self) -> usize {
        self.context_grn.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dim() + self.speaker_k.map_or(0, |k| (k + 1) * (k + 1))
    }

    pub fn pool_context_labels(&self, label_sets: &[BTreeSet<LabelId>]) -> Array1<f64> {
        self.labels.pool(label_sets)
    }

    /// `GRN_tgt(u, GRN_ctx(c, pooled))`, with the flattened speaker block
    /// appended when the feature is enabled.
    pub fn fuse(
        &self,
        u_vec: ArrayView1<f64>,
        c_vec: ArrayView1<f64>,
        pooled_labels: ArrayView1<f64>,
        speakers: Option<&SpeakerVectors>,
    ) -> Result<(Array1<f64>, FuseCache)> {
        let (h, context) = self.context_grn.forward(c_vec, pooled_labels)?;
        let (z, target) = self.target_grn.forward(u_vec, h.view())?;
        let combined = match (self.speaker_k, speakers) {
            (None, _) => z,
            (Some(k), Some(sp)) => {
                if sp.window() != k + 1 {
                    return Err(Error::dim("speaker window", k + 1, sp.window()));
                }
                concatenate(Axis(0), &[z.view(), sp.flattened().view()]).expect("1-d concat")
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "speaker feature enabled but no speakers given".into(),
                ))
            }
        };
        Ok((combined, FuseCache { context, target }))
    }

    /// Returns (d_u, d_c, d_pooled). Gradient flowing into the speaker block
    /// is dropped; those features are constants.
    pub fn backward(
        &mut self,
        cache: &FuseCache,
        d_combined: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let d = self.dim();
        let dz = d_combined.slice(ndarray::s![..d]);
        let (du, dh) = self.target_grn.backward(&cache.target, dz);
        let (dc, dpooled) = self.context_grn.backward(&cache.context, dh.view());
        (du, dc, dpooled)
    }
}

impl Parameterized for Fusion {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.labels.visit(&join(p, "labels"), f);
        self.context_grn.visit(&join(p, "context_grn"), f);
        self.target_grn.visit(&join(p, "target_grn"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.labels.visit_mut(&join(p, "labels"), f);
        self.context_grn.visit_mut(&join(p, "context_grn"), f);
        self.target_grn.visit_mut(&join(p, "target_grn"), f);
    }
}
