//! The 31-label tagset for contentious discussions and its four categories.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of labels in the tagset.
pub const NUM_LABELS: usize = 31;

/// A label id in `0..NUM_LABELS`.
pub type LabelId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    PromotesDiscussion,
    LowResponsiveness,
    ToneAndStyle,
    DisagreementStrategies,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::PromotesDiscussion,
        Category::LowResponsiveness,
        Category::ToneAndStyle,
        Category::DisagreementStrategies,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Category::PromotesDiscussion => "Promoting Discussion",
            Category::LowResponsiveness => "Low Responsiveness",
            Category::ToneAndStyle => "Tone and Style",
            Category::DisagreementStrategies => "Disagreement Strategies",
        }
    }

    /// Label ids belonging to this category, ascending.
    pub fn labels(self) -> impl Iterator<Item = LabelId> {
        TAGSET
            .iter()
            .filter(move |l| l.category == self)
            .map(|l| l.id)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::PromotesDiscussion => "PromotesDiscussion",
            Category::LowResponsiveness => "LowResponsiveness",
            Category::ToneAndStyle => "ToneAndStyle",
            Category::DisagreementStrategies => "DisagreementStrategies",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelDef {
    pub id: LabelId,
    pub name: &'static str,
    pub category: Category,
    pub description: &'static str,
}

macro_rules! tagset {
    ($( $id:literal => $name:literal, $cat:ident, $desc:literal; )*) => {
        /// The registry, indexed by label id. Within each category labels are
        /// ordered by ascending corpus frequency.
        pub static TAGSET: [LabelDef; NUM_LABELS] = [
            $( LabelDef { id: $id, name: $name, category: Category::$cat, description: $desc }, )*
        ];
    };
}

tagset! {
    0 => "ViableTransformation", PromotesDiscussion, "shifts the topic in a way that keeps the exchange productive";
    1 => "Answer", PromotesDiscussion, "gives information in reply to a question that was asked";
    2 => "Extension", PromotesDiscussion, "builds on the previous speaker's idea and carries it further";
    3 => "AttackValidity", PromotesDiscussion, "challenges the grounds of the argument itself";
    4 => "Moderation", PromotesDiscussion, "steers or regulates the discussion, e.g. back on topic";
    5 => "RequestClarification", PromotesDiscussion, "asks the other side to clarify";
    6 => "Personal", PromotesDiscussion, "relates a personal experience";
    7 => "Clarification", PromotesDiscussion, "clarifies the speaker's own earlier statement";
    8 => "CounterArgument", PromotesDiscussion, "reasoned disagreement or refutation";
    9 => "NoReasonDisagreement", LowResponsiveness, "disagrees without giving a reason";
    10 => "AgreeToDisagree", LowResponsiveness, "declares the disagreement unresolvable";
    11 => "Repetition", LowResponsiveness, "restates an earlier argument without real change";
    12 => "BAD", LowResponsiveness, "persistent squabbling with very low responsiveness";
    13 => "NegTransformation", LowResponsiveness, "derails toward a side issue";
    14 => "Convergence", LowResponsiveness, "moves toward the previous speaker's position";
    15 => "WQualifiers", ToneAndStyle, "hedges with weakening qualifiers";
    16 => "Ridicule", ToneAndStyle, "mocks the partner or their argument";
    17 => "Sarcasm", ToneAndStyle, "sarcastic, cynical or patronizing tone";
    18 => "Aggressive", ToneAndStyle, "blatant, hostile tone";
    19 => "Positive", ToneAndStyle, "respectful or friendly tone that lowers tension";
    20 => "Complaint", ToneAndStyle, "complains about how the other side is behaving";
    21 => "Alternative", DisagreementStrategies, "offers an alternative without refuting directly";
    22 => "RephraseAttack", DisagreementStrategies, "reframes the previous comment in order to attack it";
    23 => "DoubleVoicing", DisagreementStrategies, "explicitly acknowledges other participants' views";
    24 => "Softening", DisagreementStrategies, "cushions a disagreement";
    25 => "Sources", DisagreementStrategies, "cites an external source for a claim";
    26 => "AgreeBut", DisagreementStrategies, "partial agreement followed by disagreement";
    27 => "Irrelevance", DisagreementStrategies, "argues the previous claim is beside the point";
    28 => "Nitpicking", DisagreementStrategies, "picks the argument apart piece by piece";
    29 => "DirectNo", DisagreementStrategies, "flat, explicit disagreement";
    30 => "CriticalQuestion", DisagreementStrategies, "frames a counterargument as a question";
}

pub fn label(id: LabelId) -> Option<&'static LabelDef> {
    TAGSET.get(id)
}

fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Resolves a label name to its id. Exact names match first; otherwise the
/// comparison ignores case, whitespace and punctuation ("Counter Argument").
pub fn label_id(name: &str) -> Option<LabelId> {
    if let Some(def) = TAGSET.iter().find(|l| l.name == name) {
        return Some(def.id);
    }
    let key = normalize(name);
    if key.is_empty() {
        return None;
    }
    TAGSET
        .iter()
        .find(|l| normalize(l.name) == key)
        .map(|l| l.id)
}

pub fn label_name(id: LabelId) -> &'static str {
    TAGSET[id].name
}
