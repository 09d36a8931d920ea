//! Textual critique attached to every feedback-split rollout before it is
//! shown to the reflector.
//!
//! Error is the positive class. The template is plain text with a fixed line
//! order:
//!
//! ```text
//! Outcome: <outcome name>
//! The prediction was <right|wrong>.
//! Predicted: <CORRECT | ERROR in sentence N | unparseable output>
//! Expected: <CORRECT | ERROR in sentence M>
//! Erroneous sentence: <verbatim sentence M>        (error notes only)
//! Corrected sentence: <verbatim correction>        (error notes only)
//! Flagged sentence N is not the erroneous sentence M.   (id mismatch only)
//! Raw output: <reply>                              (malformed only)
//! Format violated: <output contract>               (malformed only)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::Message;
use crate::corpus::{ClinicalNote, Example, GroundTruth};
use crate::detector::{Rollout, Verdict};

/// Output contract quoted back to the reflector for unparseable replies.
pub const FORMAT_CONTRACT: &str = "reply with exactly CORRECT, or with the sentence id of the erroneous sentence followed by a space and a corrected version of that sentence";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TruePositive,
    TrueNegative,
    FalsePositive,
    FalseNegative,
    Malformed,
}

impl Outcome {
    pub fn classify(verdict: &Verdict, truth: &GroundTruth) -> Self {
        match (verdict, truth.has_error) {
            (Verdict::Malformed { .. }, _) => Outcome::Malformed,
            (Verdict::Flagged { .. }, true) => Outcome::TruePositive,
            (Verdict::Flagged { .. }, false) => Outcome::FalsePositive,
            (Verdict::CorrectText { .. }, true) => Outcome::FalseNegative,
            (Verdict::CorrectText { .. }, false) => Outcome::TrueNegative,
        }
    }

    pub fn is_right(self) -> bool {
        matches!(self, Outcome::TruePositive | Outcome::TrueNegative)
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::TruePositive => "true positive (error correctly flagged)",
            Outcome::TrueNegative => "true negative (correct text confirmed)",
            Outcome::FalsePositive => "false positive (error wrongly flagged in a correct text)",
            Outcome::FalseNegative => "false negative (missed error: answered CORRECT on a text with an error)",
            Outcome::Malformed => "malformed output (reply does not follow the output format)",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn build_feedback(note: &ClinicalNote, verdict: &Verdict, truth: &GroundTruth) -> String {
    let outcome = Outcome::classify(verdict, truth);
    let mut lines = vec![
        format!("Outcome: {outcome}"),
        format!(
            "The prediction was {}.",
            if outcome.is_right() { "right" } else { "wrong" }
        ),
    ];
    lines.push(match verdict {
        Verdict::CorrectText { .. } => "Predicted: CORRECT".to_string(),
        Verdict::Flagged { sentence_id, .. } => format!("Predicted: ERROR in sentence {sentence_id}"),
        Verdict::Malformed { .. } => "Predicted: unparseable output".to_string(),
    });
    match (truth.error_sentence_id, &truth.corrected_sentence) {
        (Some(id), Some(corrected)) if truth.has_error => {
            lines.push(format!("Expected: ERROR in sentence {id}"));
            let erroneous = note.sentence(id).map(|s| s.text.as_str()).unwrap_or("");
            lines.push(format!("Erroneous sentence: {erroneous}"));
            lines.push(format!("Corrected sentence: {corrected}"));
            if let Some(flagged) = verdict.flagged_sentence_id() {
                if flagged != id {
                    lines.push(format!(
                        "Flagged sentence {flagged} is not the erroneous sentence {id}."
                    ));
                }
            }
        }
        _ => lines.push("Expected: CORRECT".to_string()),
    }
    if let Verdict::Malformed { raw_output } = verdict {
        lines.push(format!("Raw output: {raw_output}"));
        lines.push(format!("Format violated: {FORMAT_CONTRACT}"));
    }
    lines.join("\n")
}

/// A scored rollout together with its critique. Only traces whose
/// `origin_split` is the feedback split may reach a reflector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub note_id: String,
    pub origin_split: String,
    pub rendered_messages: Vec<Message>,
    pub raw_output: String,
    pub verdict: Verdict,
    pub reward: u8,
    pub feedback_text: String,
}

impl RolloutTrace {
    pub fn new(rollout: Rollout, example: &Example, origin_split: &str) -> Self {
        let feedback_text = build_feedback(&example.note, &rollout.verdict, &example.truth);
        Self {
            note_id: rollout.note_id,
            origin_split: origin_split.to_string(),
            rendered_messages: rollout.messages,
            raw_output: rollout.completion.text,
            verdict: rollout.verdict,
            reward: rollout.reward,
            feedback_text,
        }
    }

    /// Recovered from verdict and reward alone.
    pub fn outcome(&self) -> Outcome {
        match (&self.verdict, self.reward) {
            (Verdict::Malformed { .. }, _) => Outcome::Malformed,
            (Verdict::Flagged { .. }, 1) => Outcome::TruePositive,
            (Verdict::Flagged { .. }, _) => Outcome::FalsePositive,
            (Verdict::CorrectText { .. }, 1) => Outcome::TrueNegative,
            (Verdict::CorrectText { .. }, _) => Outcome::FalseNegative,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_note, SeparatorPolicy};
    use crate::detector::parse_verdict;

    fn enzyme_note() -> ClinicalNote {
        parse_note(
            "ms-train-0",
            "0|An investigator is studying the activity level of several different enzymes in human subjects from various demographic groups.\n1|An elevated level of activity of phosphoribosyl pyrophosphate synthetase is found in one of the study subjects.\n2|The patient has homocystinuria.",
            SeparatorPolicy::Pipe,
        )
        .unwrap()
    }

    #[test]
    fn missed_error_names_sentence_and_correction() {
        let gt = GroundTruth::error(2, "The patient has gout.");
        let text = build_feedback(&enzyme_note(), &parse_verdict("CORRECT"), &gt);
        assert!(text.contains("missed error"), "{text}");
        assert!(text.contains("false negative"));
        assert!(text.contains("The patient has homocystinuria."));
        assert!(text.contains("The patient has gout."));
        assert!(text.contains("The prediction was wrong."));
    }

    #[test]
    fn false_positive_on_correct_note() {
        let text = build_feedback(&enzyme_note(), &parse_verdict("1 Something."), &GroundTruth::correct());
        assert!(text.contains("false positive"));
        assert!(text.contains("error wrongly flagged"));
        assert!(text.contains("Expected: CORRECT"));
        assert!(!text.contains("Erroneous sentence"));
    }

    #[test]
    fn right_prediction_restates_label() {
        let text = build_feedback(&enzyme_note(), &parse_verdict("CORRECT"), &GroundTruth::correct());
        assert_eq!(
            text,
            "Outcome: true negative (correct text confirmed)\nThe prediction was right.\nPredicted: CORRECT\nExpected: CORRECT"
        );
        let gt = GroundTruth::error(2, "The patient has gout.");
        let text = build_feedback(&enzyme_note(), &parse_verdict("0 Wrong line."), &gt);
        assert!(text.contains("The prediction was right."));
        assert!(text.contains("Flagged sentence 0 is not the erroneous sentence 2."));
    }

    #[test]
    fn malformed_quotes_output_and_contract() {
        let text = build_feedback(&enzyme_note(), &parse_verdict("maybe?"), &GroundTruth::correct());
        assert!(text.contains("Raw output: maybe?"));
        assert!(text.contains(FORMAT_CONTRACT));
    }

    #[test]
    fn classification_table() {
        let e = GroundTruth::error(2, "x");
        let c = GroundTruth::correct();
        assert_eq!(Outcome::classify(&parse_verdict("2 x"), &e), Outcome::TruePositive);
        assert_eq!(Outcome::classify(&parse_verdict("2 x"), &c), Outcome::FalsePositive);
        assert_eq!(Outcome::classify(&parse_verdict("CORRECT"), &e), Outcome::FalseNegative);
        assert_eq!(Outcome::classify(&parse_verdict("CORRECT"), &c), Outcome::TrueNegative);
        assert_eq!(Outcome::classify(&parse_verdict(""), &c), Outcome::Malformed);
    }
}
