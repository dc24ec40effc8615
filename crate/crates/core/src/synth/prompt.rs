//! System and user prompt assembly for remote generation.

use serde::{Deserialize, Serialize};

use crate::featurize::{Gender, Level, Trait};
use crate::lexicon::BehaviorLexicon;

const TEMPLATE: &str = include_str!("../../data/prompt/template.txt");
const ANNEX_ABILITY: &str = include_str!("../../data/prompt/annex_ability.txt");
const ANNEX_BENEVOLENCE: &str = include_str!("../../data/prompt/annex_benevolence.txt");

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub level: Option<Level>,
    pub gender: Option<Gender>,
    pub intent: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl PromptSpec {
    pub fn new(trait_: Trait, level: Option<Level>, gender: Option<Gender>, intent: &str) -> Self {
        PromptSpec {
            trait_,
            level: if trait_ == Trait::None { None } else { level },
            gender,
            intent: intent.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Human-readable class key, e.g. `Ability/High/Female`.
    pub fn class_label(&self) -> String {
        let mut s = self.trait_.to_string();
        if let Some(l) = self.level {
            s.push('/');
            s.push_str(l.as_str());
        }
        if let Some(g) = self.gender {
            s.push('/');
            s.push_str(g.as_str());
        }
        s
    }
}

fn score_phrase(spec: &PromptSpec) -> Option<String> {
    match (spec.trait_, spec.level) {
        (Trait::None, _) | (_, None) => None,
        (t, Some(l)) => Some(format!("{t} Score ({l})")),
    }
}

/// Renders the approved gesture, facial and audio tag lists.
pub fn render_tag_lists(lex: &BehaviorLexicon) -> String {
    let mut out = String::from("Gesture tags (use the exact name):\n");
    for g in lex.gestures() {
        out.push_str(&format!("- {}: {}\n", g.name, g.description));
    }
    out.push_str("Facial tags: ");
    out.push_str(
        &lex.facial()
            .iter()
            .map(|f| f.name.as_str())
            .collect::<Vec<_>>()
            .join(", "),
    );
    out.push_str("\nAudio tags: ");
    out.push_str(
        &lex.audio()
            .iter()
            .map(|a| a.name.as_str())
            .collect::<Vec<_>>()
            .join(", "),
    );
    out.push('\n');
    out
}

/// System prompt for one generation request.
pub fn build_prompt(spec: &PromptSpec, lex: &BehaviorLexicon) -> String {
    let score = score_phrase(spec);
    let gender = spec
        .gender
        .map(|g| format!(" You inhabit a {} agent.", g.as_str().to_lowercase()))
        .unwrap_or_default();
    let goal = match &score {
        Some(s) => format!(
            " You must use the provided {s} to determine the agent's level of perceived {} while navigating a high-stakes safety scenario.",
            spec.trait_.as_str().to_lowercase()
        ),
        None => " You are navigating a high-stakes safety scenario.".to_string(),
    };
    let conflict = match &score {
        Some(s) => format!("\u{2014}based on your {s}\u{2014}"),
        None => String::new(),
    };
    let annex = match spec.trait_ {
        Trait::Ability => format!("\n*** Annexe Ability information ***\n{ANNEX_ABILITY}"),
        Trait::Benevolence => {
            format!("\n*** Annexe Benevolence information ***\n{ANNEX_BENEVOLENCE}")
        }
        Trait::None => String::new(),
    };
    let (read, matching) = match &score {
        Some(s) => (format!("Read the {} scores.", spec.trait_), format!(" and {s}")),
        None => ("Read the intention.".to_string(), String::new()),
    };

    TEMPLATE
        .replace("{{GENDER}}", &gender)
        .replace("{{GOAL_SCORE}}", &goal)
        .replace("{{CONFLICT_SCORE}}", &conflict)
        .replace("{{ANNEX}}", &annex)
        .replace("{{TAG_LISTS}}", &render_tag_lists(lex))
        .replace("{{WORKFLOW_READ}}", &read)
        .replace("{{WORKFLOW_MATCH}}", &matching)
}

/// User message: the communication intent plus the instructed level.
pub fn build_user_message(spec: &PromptSpec) -> String {
    match score_phrase(spec) {
        Some(s) => format!("Communication intent: {}\n{s}", spec.intent),
        None => format!("Communication intent: {}", spec.intent),
    }
}
