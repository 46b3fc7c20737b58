//! Per-label classifier heads and the training objectives.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis, Ix1, Ix2, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelId, NUM_LABELS};
use crate::nn::{glorot, join, relu, sigmoid, Param, Parameterized, Visit, VisitMut};

/// Sigmoid score per label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScores(pub [f64; NUM_LABELS]);

impl LabelScores {
    /// Labels whose score reaches `threshold`.
    pub fn labels(&self, threshold: f64) -> std::collections::BTreeSet<LabelId> {
        (0..NUM_LABELS)
            .filter(|&i| self.0[i] >= threshold)
            .collect()
    }
}

/// 31 independent two-layer MLPs: `sigmoid(w2 . relu(W1 z + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub w1: Param<Ix3>,
    pub b1: Param<Ix2>,
    pub w2: Param<Ix2>,
    pub b2: Param<Ix1>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    z: Array1<f64>,
    pre: Array2<f64>,
    pub logits: Array1<f64>,
}

impl Heads {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut w1 = Array3::zeros((NUM_LABELS, hidden, input));
        let mut w2 = Array2::zeros((NUM_LABELS, hidden));
        for i in 0..NUM_LABELS {
            w1.index_axis_mut(Axis(0), i)
                .assign(&glorot(hidden, input, rng));
            w2.row_mut(i).assign(&glorot(1, hidden, rng).row(0));
        }
        Heads {
            w1: Param::new(w1),
            b1: Param::new(Array2::zeros((NUM_LABELS, hidden))),
            w2: Param::new(w2),
            b2: Param::new(Array1::zeros(NUM_LABELS)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.dim().2
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.dim().1
    }

    pub fn forward(&self, z: ArrayView1<f64>) -> Result<(LabelScores, HeadCache)> {
        if z.len() != self.input_dim() {
            return Err(Error::dim("classifier input", self.input_dim(), z.len()));
        }
        let mut pre = Array2::zeros((NUM_LABELS, self.hidden_dim()));
        let mut logits = Array1::zeros(NUM_LABELS);
        let mut scores = [0.0; NUM_LABELS];
        for i in 0..NUM_LABELS {
            let p = self.w1.value.index_axis(Axis(0), i).dot(&z) + self.b1.value.row(i);
            let logit = p.mapv(relu).dot(&self.w2.value.row(i)) + self.b2.value[i];
            pre.row_mut(i).assign(&p);
            logits[i] = logit;
            scores[i] = sigmoid(logit);
        }
        Ok((
            LabelScores(scores),
            HeadCache {
                z: z.to_owned(),
                pre,
                logits,
            },
        ))
    }

    pub fn classify(&self, z: ArrayView1<f64>) -> Result<LabelScores> {
        Ok(self.forward(z)?.0)
    }

    /// Backward from per-label logit gradients; returns d_z.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: ArrayView1<f64>) -> Array1<f64> {
        let mut dz = Array1::zeros(cache.z.len());
        for i in 0..NUM_LABELS {
            let dl = d_logits[i];
            if dl == 0.0 {
                continue;
            }
            let pre = cache.pre.row(i);
            self.b2.grad[i] += dl;
            self.w2.grad.row_mut(i).scaled_add(dl, &pre.mapv(relu));
            let dpre = Array1::from_iter(pre.iter().zip(self.w2.value.row(i)).map(|(&p, &w)| {
                if p > 0.0 {
                    dl * w
                } else {
                    0.0
                }
            }));
            self.b1.grad.row_mut(i).scaled_add(1.0, &dpre);
            let dpre_col = dpre.view().insert_axis(Axis(1));
            let z_row = cache.z.view().insert_axis(Axis(0));
            let mut gw = self.w1.grad.index_axis_mut(Axis(0), i);
            gw += &dpre_col.dot(&z_row);
            dz += &self.w1.value.index_axis(Axis(0), i).t().dot(&dpre);
        }
        dz
    }
}

impl Parameterized for Heads {
    fn visit(&self, p: &str, f: &mut Visit<'_>) {
        self.w1.visit(&join(p, "w1"), f);
        self.b1.visit(&join(p, "b1"), f);
        self.w2.visit(&join(p, "w2"), f);
        self.b2.visit(&join(p, "b2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitMut<'_>) {
        self.w1.visit_mut(&join(p, "w1"), f);
        self.b1.visit_mut(&join(p, "b1"), f);
        self.w2.visit_mut(&join(p, "w2"), f);
        self.b2.visit_mut(&join(p, "b2"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ALConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }
}

impl ALConfig {
    /// The settings under which the loss reduces to binary cross-entropy.
    pub fn bce() -> Self {
        ALConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config(
                "loss focusing exponents must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config("loss margin must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const SCORE_EPS: f64 = 1e-7;

/// Loss and d(loss)/d(score) for one label.
fn al_term(p: f64, positive: bool, cfg: &ALConfig) -> (f64, f64) {
    let clamped = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let live = if clamped == p { 1.0 } else { 0.0 };
    let p = clamped;
    if positive {
        let w = (1.0 - p).powf(cfg.gamma_pos);
        let loss = -w * p.ln();
        let dw = if cfg.gamma_pos == 0.0 {
            0.0
        } else {
            -cfg.gamma_pos * (1.0 - p).powf(cfg.gamma_pos - 1.0)
        };
        (loss, live * (-dw * p.ln() - w / p))
    } else {
        let pm = (p - cfg.margin).max(0.0);
        if pm == 0.0 {
            // below the cutoff: no loss, no gradient (0^0 = 1 only matters
            // when gamma_neg = 0, where -log(1 - 0) = 0 anyway)
            return (0.0, 0.0);
        }
        let w = pm.powf(cfg.gamma_neg);
        let loss = -w * (1.0 - pm).ln();
        let dw = if cfg.gamma_neg == 0.0 {
            0.0
        } else {
            cfg.gamma_neg * pm.powf(cfg.gamma_neg - 1.0)
        };
        (loss, live * (-dw * (1.0 - pm).ln() + w / (1.0 - pm)))
    }
}

/// Mean over labels of the asymmetric loss. Positives contribute
/// `-(1-p)^g+ log p`; negatives `-p_m^g- log(1-p_m)` with `p_m = max(p-m, 0)`.
pub fn asymmetric_loss(scores: &[f64], gold: &[bool], cfg: &ALConfig) -> f64 {
    asymmetric_loss_with_grad(scores, gold, cfg).0
}

pub fn asymmetric_loss_with_grad(scores: &[f64], gold: &[bool], cfg: &ALConfig) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), gold.len(), "scores and gold must align");
    let n = scores.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&p, &y) in scores.iter().zip(gold) {
        let (l, g) = al_term(p, y, cfg);
        total += l;
        grad.push(g / n);
    }
    (total / n, grad)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity and its gradients w.r.t. both arguments. Zero
/// vectors have similarity 0.
fn cosine_with_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let cos = a.dot(&b) / (na * nb);
    let da = &b / (na * nb) - &a * (cos / (na * na));
    let db = &a / (na * nb) - &b * (cos / (nb * nb));
    (cos, da, db)
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    cosine_with_grad(a, b).0
}

/// Next-message prediction loss over a batch of (anchor, next message)
/// pairs. Each anchor's negatives are the other pairs' next messages:
///
/// `L = sum_i [ sum_{j != i} cos(a_i, n_j) - cos(a_i, n_i) ]`
pub fn nmp_loss(anchors: &[Array1<f64>], nexts: &[Array1<f64>]) -> Result<f64> {
    Ok(nmp_loss_with_grad(anchors, nexts)?.0)
}

/// Loss, then gradients w.r.t. every anchor and every next message.
pub type NmpGrad = (f64, Vec<Array1<f64>>, Vec<Array1<f64>>);

/// Loss plus gradients w.r.t. every anchor and every next message.
pub fn nmp_loss_with_grad(anchors: &[Array1<f64>], nexts: &[Array1<f64>]) -> Result<NmpGrad> {
    if anchors.len() != nexts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} anchors but {} next messages",
            anchors.len(),
            nexts.len()
        )));
    }
    if anchors.len() < 2 {
        return Err(Error::InvalidArgument(
            "next-message loss needs a batch of at least 2 pairs".into(),
        ));
    }
    let mut loss = 0.0;
    let mut da: Vec<Array1<f64>> = anchors.iter().map(|a| Array1::zeros(a.len())).collect();
    let mut dn: Vec<Array1<f64>> = nexts.iter().map(|n| Array1::zeros(n.len())).collect();
    for (i, a) in anchors.iter().enumerate() {
        for (j, n) in nexts.iter().enumerate() {
            let sign = if i == j { -1.0 } else { 1.0 };
            let (c, ga, gn) = cosine_with_grad(a.view(), n.view());
            loss += sign * c;
            da[i].scaled_add(sign, &ga);
            dn[j].scaled_add(sign, &gn);
        }
    }
    Ok((loss, da, dn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.99 }
    }
}

/// `alpha * dp + (1 - alpha) * nmp`
pub fn combined_loss(dp_loss: f64, nmp: f64, w: LossWeights) -> f64 {
    w.alpha * dp_loss + (1.0 - w.alpha) * nmp
}
