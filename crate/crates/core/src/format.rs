//! Dual-mode response grammar.
//!
//! Every response carries a think segment delimited by `<think>` and
//! `</think>`. A non-empty segment marks reasoning mode, an empty one marks
//! the direct-answer mode, and a missing tag pair marks the response as
//! malformed. Malformed is an ordinary value: the reward model has to score
//! arbitrary policy output.
//!
//! Canonical renderings:
//!
//! ```text
//! reasoning:      <think>\n{steps}\n</think>{answer}
//! non-reasoning:  <think></think>{answer}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// The two modes a well-formed response can be in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThinkMode {
    Reasoning,
    #[serde(rename = "nonreasoning")]
    NonReasoning,
}

/// Mode assigned to a parsed response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseMode {
    Reasoning,
    #[serde(rename = "nonreasoning")]
    NonReasoning,
    Malformed,
}

impl ResponseMode {
    pub fn think_mode(self) -> Option<ThinkMode> {
        match self {
            ResponseMode::Reasoning => Some(ThinkMode::Reasoning),
            ResponseMode::NonReasoning => Some(ThinkMode::NonReasoning),
            ResponseMode::Malformed => None,
        }
    }
}

impl From<ThinkMode> for ResponseMode {
    fn from(mode: ThinkMode) -> Self {
        match mode {
            ThinkMode::Reasoning => ResponseMode::Reasoning,
            ThinkMode::NonReasoning => ResponseMode::NonReasoning,
        }
    }
}

/// A parsed model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub raw_text: String,
    /// Trimmed think segment. `None` when no well-formed tag pair exists,
    /// `Some("")` when the tags are present but empty.
    pub think: Option<String>,
    /// Text after the closing tag with leading whitespace removed; the whole
    /// trimmed text for malformed responses.
    pub answer: String,
    pub mode: ResponseMode,
    pub token_count: usize,
}

impl StructuredResponse {
    /// Replaces the default whitespace token count with the count under some
    /// other tokenizer (at toy scale, the policy's own emitted tokens).
    pub fn with_token_count(mut self, token_count: usize) -> Self {
        self.token_count = token_count;
        self
    }
}

/// Parses `text` according to the dual-mode grammar. Never fails.
///
/// The first `<think>` and the first `</think>` after it delimit the think
/// segment. Any text before the opening tag is tolerated and dropped.
pub fn parse_response(text: &str) -> StructuredResponse {
    let segments = text.find(THINK_OPEN).and_then(|open| {
        let inner_start = open + THINK_OPEN.len();
        text[inner_start..]
            .find(THINK_CLOSE)
            .map(|close| (inner_start, inner_start + close))
    });

    match segments {
        Some((inner_start, inner_end)) => {
            let think = text[inner_start..inner_end].trim().to_string();
            let answer = text[inner_end + THINK_CLOSE.len()..].trim_start().to_string();
            let mode = if think.is_empty() {
                ResponseMode::NonReasoning
            } else {
                ResponseMode::Reasoning
            };
            let token_count = 2 + word_count(&think) + word_count(&answer);
            StructuredResponse {
                raw_text: text.to_string(),
                think: Some(think),
                answer,
                mode,
                token_count,
            }
        }
        None => {
            let answer = text.trim().to_string();
            let token_count = word_count(&answer);
            StructuredResponse {
                raw_text: text.to_string(),
                think: None,
                answer,
                mode: ResponseMode::Malformed,
                token_count,
            }
        }
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Renders a response in canonical form.
///
/// Reasoning mode requires reasoning text with visible content that does not
/// itself contain a closing tag. The answer must not start with whitespace,
/// since the parser strips it.
pub fn render_response(mode: ThinkMode, reasoning: Option<&str>, answer: &str) -> Result<String> {
    if answer.starts_with(char::is_whitespace) {
        return Err(Error::invalid("answer must not start with whitespace"));
    }
    match mode {
        ThinkMode::NonReasoning => Ok(format!("{THINK_OPEN}{THINK_CLOSE}{answer}")),
        ThinkMode::Reasoning => {
            let steps = reasoning.unwrap_or_default();
            if steps.trim().is_empty() {
                return Err(Error::invalid("reasoning mode requires non-empty reasoning"));
            }
            if steps.contains(THINK_CLOSE) {
                return Err(Error::invalid("reasoning must not contain a closing think tag"));
            }
            Ok(format!("{THINK_OPEN}\n{steps}\n{THINK_CLOSE}{answer}"))
        }
    }
}

/// Canonical re-rendering of a parsed response. Malformed responses render
/// as their trimmed text.
pub fn canonicalize(response: &StructuredResponse) -> String {
    match response.mode {
        ResponseMode::Malformed => response.answer.clone(),
        ResponseMode::NonReasoning => format!("{THINK_OPEN}{THINK_CLOSE}{}", response.answer),
        ResponseMode::Reasoning => format!(
            "{THINK_OPEN}\n{}\n{THINK_CLOSE}{}",
            response.think.as_deref().unwrap_or_default(),
            response.answer
        ),
    }
}

/// Drops the think segment and its tags, returning only the answer.
pub fn strip_think(text: &str) -> String {
    parse_response(text).answer
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_think_is_non_reasoning() {
        let r = parse_response("<think></think>fake");
        assert_eq!(r.think.as_deref(), Some(""));
        assert_eq!(r.answer, "fake");
        assert_eq!(r.mode, ResponseMode::NonReasoning);
    }

    #[test]
    fn reasoning_segment_is_trimmed() {
        let r = parse_response(
            "<think>\nshadow direction is inconsistent with the light source\n</think>fake",
        );
        assert_eq!(
            r.think.as_deref(),
            Some("shadow direction is inconsistent with the light source")
        );
        assert_eq!(r.answer, "fake");
        assert_eq!(r.mode, ResponseMode::Reasoning);
    }

    #[test]
    fn missing_tags_is_malformed() {
        let r = parse_response("fake");
        assert_eq!(r.think, None);
        assert_eq!(r.answer, "fake");
        assert_eq!(r.mode, ResponseMode::Malformed);

        let r = parse_response("<think>no close tag fake");
        assert_eq!(r.mode, ResponseMode::Malformed);
        assert_eq!(r.answer, "<think>no close tag fake");

        let r = parse_response("</think><think>");
        assert_eq!(r.mode, ResponseMode::Malformed);
    }

    #[test]
    fn whitespace_only_think_is_non_reasoning() {
        let r = parse_response("<think>\n\n</think>\n\nreal");
        assert_eq!(r.mode, ResponseMode::NonReasoning);
        assert_eq!(r.answer, "real");
    }

    #[test]
    fn system_prompt_variant_parses_like_canonical() {
        let a = parse_response("<think>\nsteps\n</think>\n\nfake");
        let b = parse_response("<think>\nsteps\n</think>fake");
        assert_eq!(a.mode, b.mode);
        assert_eq!(a.think, b.think);
        assert_eq!(a.answer, b.answer);
    }

    #[test]
    fn first_pair_wins() {
        let r = parse_response("<think>a<think>b</think>c</think>d");
        assert_eq!(r.think.as_deref(), Some("a<think>b"));
        assert_eq!(r.answer, "c</think>d");
    }

    #[test]
    fn leading_content_is_tolerated() {
        let r = parse_response("Sure! <think></think>real");
        assert_eq!(r.mode, ResponseMode::NonReasoning);
        assert_eq!(r.answer, "real");
    }

    #[test]
    fn render_templates() {
        assert_eq!(
            render_response(ThinkMode::NonReasoning, None, "real").unwrap(),
            "<think></think>real"
        );
        assert_eq!(
            render_response(ThinkMode::Reasoning, Some("R"), "fake").unwrap(),
            "<think>\nR\n</think>fake"
        );
        assert!(render_response(ThinkMode::Reasoning, Some(""), "fake").is_err());
        assert!(render_response(ThinkMode::Reasoning, None, "fake").is_err());
        assert!(render_response(ThinkMode::Reasoning, Some("a</think>b"), "fake").is_err());
        assert!(render_response(ThinkMode::NonReasoning, None, " real").is_err());
    }

    #[test]
    fn strip_think_examples() {
        assert_eq!(strip_think("<think>abc</think>real"), "real");
        assert_eq!(strip_think("<think></think>real"), "real");
        assert_eq!(strip_think("real"), "real");
        assert_eq!(strip_think("  real \n"), "real");
    }

    #[test]
    fn token_count_counts_tags_and_words() {
        assert_eq!(parse_response("<think></think>fake").token_count, 3);
        assert_eq!(parse_response("<think>\na b\n</think>fake").token_count, 5);
        assert_eq!(parse_response("it is fake").token_count, 3);
    }

    fn tagged_string() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("<think>".to_string()),
            Just("</think>".to_string()),
            Just("<think".to_string()),
            Just("think>".to_string()),
            "[ \\n\\t]{0,3}",
            "\\PC{0,8}",
        ];
        proptest::collection::vec(piece, 0..8).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn parse_render_parse_is_fixpoint(text in tagged_string()) {
            let first = parse_response(&text);
            let second = parse_response(&canonicalize(&first));
            prop_assert_eq!(&first.think, &second.think);
            prop_assert_eq!(&first.answer, &second.answer);
            prop_assert_eq!(first.mode, second.mode);
        }

        #[test]
        fn mode_matches_think_content(text in tagged_string()) {
            let r = parse_response(&text);
            match r.mode {
                ResponseMode::Malformed => prop_assert!(r.think.is_none()),
                ResponseMode::NonReasoning => prop_assert!(r.think.as_deref().unwrap().trim().is_empty()),
                ResponseMode::Reasoning => prop_assert!(!r.think.as_deref().unwrap().trim().is_empty()),
            }
        }
    }
}
