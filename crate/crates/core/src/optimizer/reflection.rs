//! Reflector-facing prompts and reply parsing.
//!
//! Both meta-prompts are versioned text assets. The reflector receives only
//! feedback-split traces; merge requests carry win-set sizes, never
//! validation content.

use crate::backend::{ChatRequest, Message, ModelClient, Role};
use crate::feedback::RolloutTrace;

use super::OptimizerError;

pub const REFLECTION_TEMPLATE_VERSION: &str = "reflect-v1";
pub const REFLECTION_TEMPLATE: &str = include_str!("../../assets/reflection_prompt.txt");
pub const MERGE_TEMPLATE_VERSION: &str = "merge-v1";
pub const MERGE_TEMPLATE: &str = include_str!("../../assets/merge_prompt.txt");

/// Substitutes `{{key}}` placeholders in one pass; inserted values are not
/// rescanned.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let hit = after.find("}}").and_then(|end| {
            let key = &after[..end];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, end + 2))
        });
        match hit {
            Some((value, consumed)) => {
                out.push_str(value);
                rest = &after[consumed..];
            }
            None => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Serializes traces for the reflector: rendered note, reply, reward and
/// feedback. Note ids are left out.
pub fn format_traces(traces: &[RolloutTrace]) -> String {
    let mut out = String::new();
    for (i, t) in traces.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let input = t
            .rendered_messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        out.push_str(&format!(
            "# Example {}\n## Input\n{}\n## Assistant response\n{}\n## Reward\n{}\n## Feedback\n{}",
            i + 1,
            input,
            t.raw_output.trim(),
            t.reward,
            t.feedback_text
        ));
    }
    out
}

pub fn reflection_request(
    parent_instruction: &str,
    traces: &[RolloutTrace],
    feedback_split: &str,
    reflector: &ModelClient,
) -> Result<ChatRequest, OptimizerError> {
    if let Some(t) = traces.iter().find(|t| t.origin_split != feedback_split) {
        return Err(OptimizerError::Leakage {
            note_id: t.note_id.clone(),
            split: t.origin_split.clone(),
        });
    }
    let prompt = fill_template(
        REFLECTION_TEMPLATE,
        &[
            ("instruction", parent_instruction),
            ("examples", &format_traces(traces)),
        ],
    );
    Ok(reflector.request(vec![Message::user(prompt)], None))
}

/// Win-set summary handed to the merge prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinSummary {
    pub wins: usize,
    pub unique: usize,
}

pub fn merge_request(
    a: &str,
    a_wins: WinSummary,
    b: &str,
    b_wins: WinSummary,
    n_val: usize,
    reflector: &ModelClient,
) -> ChatRequest {
    let n = n_val.to_string();
    let (aw, au, bw, bu) = (
        a_wins.wins.to_string(),
        a_wins.unique.to_string(),
        b_wins.wins.to_string(),
        b_wins.unique.to_string(),
    );
    let prompt = fill_template(
        MERGE_TEMPLATE,
        &[
            ("instruction_a", a),
            ("instruction_b", b),
            ("a_wins", &aw),
            ("a_unique", &au),
            ("b_wins", &bw),
            ("b_unique", &bu),
            ("n_val", &n),
        ],
    );
    reflector.request(vec![Message::user(prompt)], None)
}

/// Pulls the instruction out of the first ``` ... last ``` span of a reply.
/// A bare word right after the opening fence is read as a language tag.
pub fn extract_instruction(reply: &str) -> Result<String, OptimizerError> {
    let parse_error = |reason: &str| OptimizerError::ReflectionParse(reason.to_string());
    let open = reply.find("```").ok_or_else(|| parse_error("no ``` block in reply"))?;
    let close = reply.rfind("```").filter(|&c| c > open);
    let inner = match close {
        Some(c) => &reply[open + 3..c],
        None => return Err(parse_error("unterminated ``` block in reply")),
    };
    let inner = match inner.split_once('\n') {
        Some((first, rest))
            if !first.trim().is_empty()
                && first.trim().chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') =>
        {
            rest
        }
        _ => inner,
    };
    let text = inner.trim();
    if text.is_empty() {
        return Err(parse_error("empty instruction block"));
    }
    Ok(text.to_string())
}
