use serde::{Deserialize, Serialize};

use super::formats::{PromptFormat, RenderedPrompt};
use super::score::BeliefScore;
use crate::corpus::word_occurrences;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodLabel {
    Correct,
    Flipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationLabel {
    Correct,
    Flipped,
    Ambiguous,
}

impl GenerationLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenerationLabel::Correct => "correct",
            GenerationLabel::Flipped => "flipped",
            GenerationLabel::Ambiguous => "ambiguous",
        }
    }
}

fn normalise(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-insensitive, whitespace-normalised whole-word containment.
pub fn text_matches(generated: &str, expected: &str) -> bool {
    !word_occurrences(&normalise(generated), &normalise(expected)).is_empty()
}

fn label(c: bool, i: bool) -> GenerationLabel {
    match (c, i) {
        (true, false) => GenerationLabel::Correct,
        (false, true) => GenerationLabel::Flipped,
        _ => GenerationLabel::Ambiguous,
    }
}

/// The `"answer"` string of the first JSON object in `text`, if any parses.
fn json_answer(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
    match stream.next()? {
        Ok(serde_json::Value::Object(map)) => map.get("answer")?.as_str().map(str::to_string),
        _ => None,
    }
}

pub fn generation_label(format: PromptFormat, rendered: &RenderedPrompt, generated: &str) -> GenerationLabel {
    if format == PromptFormat::StructuredJson {
        if let Some(ans) = json_answer(generated) {
            let l = label(
                text_matches(&ans, &rendered.expect_correct),
                text_matches(&ans, &rendered.expect_incorrect),
            );
            if l != GenerationLabel::Ambiguous {
                return l;
            }
        }
    }
    label(
        text_matches(generated, &rendered.expect_correct),
        text_matches(generated, &rendered.expect_incorrect),
    )
}

/// Flipped exactly when the incorrect continuation is strictly more likely.
pub fn likelihood_label(score: &BeliefScore) -> LikelihoodLabel {
    if score.delta_ll < 0.0 {
        LikelihoodLabel::Flipped
    } else {
        LikelihoodLabel::Correct
    }
}

pub fn classify(
    format: PromptFormat,
    rendered: &RenderedPrompt,
    score: &BeliefScore,
    generated: &str,
) -> (LikelihoodLabel, GenerationLabel) {
    (likelihood_label(score), generation_label(format, rendered, generated))
}
