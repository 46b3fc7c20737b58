//! F-scores per label, macro and prior-weighted aggregates per category,
//! and the tree-grouped cross-validation protocol.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{ConversationTree, FoldPlan, PriorTable};
use crate::error::{Error, Result};
use crate::labels::{label_name, Category, LabelId, NUM_LABELS, TAGSET};
use crate::parsing::{Parser, PredictionRecord};
use crate::training::Trainer;

/// How priors are turned into weights inside an aggregation group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Priors rescaled to sum to one within the group.
    #[default]
    Renormalized,
    /// Priors used as-is.
    Raw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl LabelCounts {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub labels: Vec<LabelCounts>,
    pub evaluated: usize,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        ConfusionCounts {
            labels: vec![LabelCounts::default(); NUM_LABELS],
            evaluated: 0,
        }
    }
}

impl ConfusionCounts {
    /// Adds one utterance. Utterances without gold labels are skipped.
    pub fn add(&mut self, gold: &BTreeSet<LabelId>, predicted: &BTreeSet<LabelId>) {
        if gold.is_empty() {
            return;
        }
        self.evaluated += 1;
        for (l, c) in self.labels.iter_mut().enumerate() {
            match (gold.contains(&l), predicted.contains(&l)) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }

    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a BTreeSet<LabelId>, &'a BTreeSet<LabelId>)>,
    ) -> Self {
        let mut c = Self::default();
        for (g, p) in pairs {
            c.add(g, p);
        }
        c
    }

    /// Scores prediction records against the gold labels in `trees`. Each
    /// record counts once, so per-branch records weight shared prefixes by
    /// the number of branches through them.
    pub fn from_records(trees: &[&ConversationTree], records: &[PredictionRecord]) -> Result<Self> {
        let index: HashMap<&str, &ConversationTree> =
            trees.iter().map(|t| (t.tree_id(), *t)).collect();
        let mut c = Self::default();
        for r in records {
            let node = index
                .get(r.tree_id.as_str())
                .and_then(|t| t.get(&r.node_id))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "prediction for unknown node {}/{}",
                        r.tree_id, r.node_id
                    ))
                })?;
            c.add(&node.gold_labels, &r.label_ids()?);
        }
        Ok(c)
    }

    pub fn per_label_f1(&self) -> Vec<f64> {
        self.labels.iter().map(LabelCounts::f1).collect()
    }

    /// F1 over the pooled counts of all labels.
    pub fn micro_f(&self) -> f64 {
        let (tp, fp, fn_) = self
            .labels
            .iter()
            .fold((0, 0, 0), |(a, b, c), l| (a + l.tp, b + l.fp, c + l.fn_));
        f1(tp, fp, fn_)
    }

    pub fn gold_assignments(&self) -> usize {
        self.labels.iter().map(|l| l.tp + l.fn_).sum()
    }
}

/// `2tp / (2tp + fp + fn)`, and 0 when nothing was predicted or gold.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn macro_f(per_label_f: &[f64]) -> Result<f64> {
    if per_label_f.is_empty() {
        return Err(Error::InvalidArgument(
            "macro-F of an empty label group".into(),
        ));
    }
    Ok(per_label_f.iter().sum::<f64>() / per_label_f.len() as f64)
}

pub fn weighted_f(per_label_f: &[f64], priors: &[f64], weighting: Weighting) -> Result<f64> {
    if per_label_f.len() != priors.len() {
        return Err(Error::dim(
            "weighted-F priors",
            per_label_f.len(),
            priors.len(),
        ));
    }
    if per_label_f.is_empty() {
        return Err(Error::InvalidArgument(
            "weighted-F of an empty label group".into(),
        ));
    }
    let total: f64 = priors.iter().sum();
    if total <= 0.0 || priors.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument(
            "weighted-F needs non-negative priors that are not all zero".into(),
        ));
    }
    match weighting {
        Weighting::Raw => Ok(per_label_f.iter().zip(priors).map(|(f, w)| f * w).sum()),
        Weighting::Renormalized => {
            // Scaling by the largest prior first makes equal priors exactly
            // 1.0, so uniform weighting reproduces the macro mean bit for bit.
            let top = priors.iter().copied().fold(0.0, f64::max);
            let scaled: Vec<f64> = priors.iter().map(|w| w / top).collect();
            let norm: f64 = scaled.iter().sum();
            Ok(per_label_f
                .iter()
                .zip(&scaled)
                .map(|(f, w)| f * w)
                .sum::<f64>()
                / norm)
        }
    }
}

/// A set of labels that is aggregated together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    All,
    Category(Category),
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::All,
        Group::Category(Category::PromotesDiscussion),
        Group::Category(Category::LowResponsiveness),
        Group::Category(Category::ToneAndStyle),
        Group::Category(Category::DisagreementStrategies),
    ];

    pub fn labels(self) -> Vec<LabelId> {
        match self {
            Group::All => (0..NUM_LABELS).collect(),
            Group::Category(c) => c.labels().collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::All => "All",
            Group::Category(c) => c.display_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub macro_f: f64,
    /// `None` when no label of the group occurs in the corpus.
    pub weighted_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for the cross-fold mean.
    pub fold: Option<usize>,
    pub per_label_f1: Vec<f64>,
    pub groups: Vec<GroupScore>,
    pub micro_f: f64,
    pub priors: Vec<f64>,
    pub weighting: Weighting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<ConfusionCounts>,
    /// Set when this fold failed; the scores are then meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn group_scores(f: &[f64], priors: &[f64], weighting: Weighting) -> Result<Vec<GroupScore>> {
    Group::ALL
        .iter()
        .map(|g| {
            let ids = g.labels();
            let fs: Vec<f64> = ids.iter().map(|&i| f[i]).collect();
            let ws: Vec<f64> = ids.iter().map(|&i| priors[i]).collect();
            let weighted = if ws.iter().all(|&w| w == 0.0) {
                None
            } else {
                Some(weighted_f(&fs, &ws, weighting)?)
            };
            Ok(GroupScore {
                group: g.name().to_string(),
                macro_f: macro_f(&fs)?,
                weighted_f: weighted,
            })
        })
        .collect()
}

impl MetricsReport {
    pub fn from_counts(
        counts: ConfusionCounts,
        priors: &PriorTable,
        weighting: Weighting,
        fold: Option<usize>,
    ) -> Result<Self> {
        let f = counts.per_label_f1();
        Ok(MetricsReport {
            fold,
            groups: group_scores(&f, &priors.w, weighting)?,
            per_label_f1: f,
            micro_f: counts.micro_f(),
            priors: priors.w.to_vec(),
            weighting,
            counts: Some(counts),
            failure: None,
        })
    }

    fn failed(fold: usize, priors: &PriorTable, weighting: Weighting, reason: String) -> Self {
        MetricsReport {
            fold: Some(fold),
            per_label_f1: vec![f64::NAN; NUM_LABELS],
            groups: Vec::new(),
            micro_f: f64::NAN,
            priors: priors.w.to_vec(),
            weighting,
            counts: None,
            failure: Some(reason),
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupScore> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Unweighted mean over the successful reports; failed folds are listed
    /// in the result's `failure` field.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let ok: Vec<&MetricsReport> = reports.iter().filter(|r| r.failure.is_none()).collect();
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero reports".into()))?;
        let failed: Vec<String> = reports
            .iter()
            .filter(|r| r.failure.is_some())
            .map(|r| r.fold.map_or("?".into(), |f| f.to_string()))
            .collect();
        let failure = (!failed.is_empty()).then(|| format!("failed folds: {}", failed.join(", ")));
        if ok.is_empty() {
            return Ok(MetricsReport {
                fold: None,
                failure,
                ..first.clone()
            });
        }
        let n = ok.len() as f64;
        let per_label_f1 = (0..NUM_LABELS)
            .map(|l| ok.iter().map(|r| r.per_label_f1[l]).sum::<f64>() / n)
            .collect();
        let groups = ok[0]
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| GroupScore {
                group: g.group.clone(),
                macro_f: ok.iter().map(|r| r.groups[i].macro_f).sum::<f64>() / n,
                weighted_f: ok
                    .iter()
                    .map(|r| r.groups[i].weighted_f)
                    .sum::<Option<f64>>()
                    .map(|total| total / n),
            })
            .collect();
        Ok(MetricsReport {
            fold: None,
            per_label_f1,
            groups,
            micro_f: ok.iter().map(|r| r.micro_f).sum::<f64>() / n,
            priors: ok[0].priors.clone(),
            weighting: ok[0].weighting,
            counts: None,
            failure,
        })
    }

    /// `label,name,category,f1,tp,fp,fn,tn,prior`
    pub fn write_label_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "label", "name", "category", "f1", "tp", "fp", "fn", "tn", "prior",
        ])?;
        for def in TAGSET.iter() {
            let c = self.counts.as_ref().map(|c| c.labels[def.id]);
            let count = |f: fn(&LabelCounts) -> usize| {
                c.as_ref().map_or(String::new(), |c| f(c).to_string())
            };
            w.write_record([
                def.id.to_string(),
                def.name.to_string(),
                def.category.to_string(),
                format!("{:.6}", self.per_label_f1[def.id]),
                count(|c| c.tp),
                count(|c| c.fp),
                count(|c| c.fn_),
                count(|c| c.tn),
                format!("{:.6}", self.priors[def.id]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Category-level JSON: one row per group plus the micro-F.
    pub fn category_json(&self) -> serde_json::Value {
        serde_json::json!({
            "fold": self.fold,
            "weighting": self.weighting,
            "micro_f": self.micro_f,
            "groups": self.groups,
            "failure": self.failure,
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let title = match self.fold {
            Some(f) => format!("fold {f}"),
            None => "mean".to_string(),
        };
        let _ = writeln!(s, "{title}");
        if let Some(reason) = &self.failure {
            let _ = writeln!(s, "  ! {reason}");
        }
        let _ = writeln!(s, "  {:<26} {:>8} {:>10}", "group", "macro-F", "weighted-F");
        for g in &self.groups {
            let weighted = g
                .weighted_f
                .map_or("n/a".to_string(), |w| format!("{w:.3}"));
            let _ = writeln!(s, "  {:<26} {:>8.3} {:>10}", g.group, g.macro_f, weighted);
        }
        let _ = writeln!(s, "  {:<26} {:>8.3}", "micro-F (all labels)", self.micro_f);
        let _ = writeln!(s);
        let _ = writeln!(s, "  {:<22} {:>6} {:>7}", "label", "F1", "prior");
        for (l, f) in self.per_label_f1.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:<22} {:>6.3} {:>7.3}",
                label_name(l),
                f,
                self.priors[l]
            );
        }
        s
    }
}

/// Result of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub mean: MetricsReport,
}

/// Trains on every fold but `fold`, tags the held-out trees and scores
/// them. Divergence yields a flagged report rather than an error.
pub fn run_fold(
    trees: &[ConversationTree],
    cfg: &Config,
    plan: &FoldPlan,
    fold: usize,
    priors: &PriorTable,
) -> Result<FoldOutcome> {
    let (train, test) = plan.split(trees, fold);
    let held_out: BTreeSet<String> = test.iter().map(|t| t.tree_id().to_string()).collect();
    let weighting = cfg.eval.weighting;
    let trained = Trainer::new(cfg, &train, &held_out).and_then(|mut t| {
        t.run()?;
        Ok(t)
    });
    let trainer = match trained {
        Ok(t) => t,
        Err(Error::Divergence { step, loss }) => {
            return Ok(FoldOutcome {
                report: MetricsReport::failed(
                    fold,
                    priors,
                    weighting,
                    format!("diverged at step {step} (loss {loss})"),
                ),
                predictions: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let parser = Parser::new(trainer.model(), &cfg.parser)?;
    let mut predictions = Vec::new();
    for t in &test {
        predictions.extend(parser.records(t, cfg.parser.per_branch)?);
    }
    let counts = ConfusionCounts::from_records(&test, &predictions)?;
    Ok(FoldOutcome {
        report: MetricsReport::from_counts(counts, priors, weighting, Some(fold))?,
        predictions,
    })
}

/// Runs every fold of `plan`, `cfg.cv.jobs` at a time, and averages.
pub fn run_cv(
    trees: &[ConversationTree],
    cfg: &Config,
    plan: &FoldPlan,
    priors: &PriorTable,
) -> Result<CvOutcome> {
    let n = plan.n_folds();
    let jobs = cfg.cv.jobs.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FoldOutcome>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::SeqCst);
                if f >= n {
                    break;
                }
                let r = run_fold(trees, cfg, plan, f, priors);
                results.lock().expect("fold results")[f] = Some(r);
            });
        }
    });
    let folds = results
        .into_inner()
        .expect("fold results")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let mean = MetricsReport::mean(&reports)?;
    Ok(CvOutcome { folds, mean })
}
