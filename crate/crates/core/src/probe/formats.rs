use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{choices, lower_first, FactItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    DirectQuestion,
    ClozeCompletion,
    ParaphrasedQuestion,
    YesNo,
    TrueFalseNegated,
    MultipleChoice,
    StructuredJson,
    SingleWord,
    ShortGenerative,
    TimeAnchored,
}

/// A fact rendered in one format. `continuation_*` are the teacher-forced
/// targets scored after the prompt; `expect_*` are the strings searched for
/// in generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prompt: String,
    pub continuation_correct: String,
    pub continuation_incorrect: String,
    pub expect_correct: String,
    pub expect_incorrect: String,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 10] = [
        PromptFormat::DirectQuestion,
        PromptFormat::ClozeCompletion,
        PromptFormat::ParaphrasedQuestion,
        PromptFormat::YesNo,
        PromptFormat::TrueFalseNegated,
        PromptFormat::MultipleChoice,
        PromptFormat::StructuredJson,
        PromptFormat::SingleWord,
        PromptFormat::ShortGenerative,
        PromptFormat::TimeAnchored,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptFormat::DirectQuestion => "direct_question",
            PromptFormat::ClozeCompletion => "cloze_completion",
            PromptFormat::ParaphrasedQuestion => "paraphrased_question",
            PromptFormat::YesNo => "yes_no",
            PromptFormat::TrueFalseNegated => "true_false_negated",
            PromptFormat::MultipleChoice => "multiple_choice",
            PromptFormat::StructuredJson => "structured_json",
            PromptFormat::SingleWord => "single_word",
            PromptFormat::ShortGenerative => "short_generative",
            PromptFormat::TimeAnchored => "time_anchored",
        }
    }

    pub fn render(&self, fact: &FactItem) -> RenderedPrompt {
        let q = &fact.question;
        let (c, i) = (fact.correct_answer.as_str(), fact.incorrect_answer.as_str());
        let plain = |prompt: String| RenderedPrompt {
            prompt,
            continuation_correct: c.to_string(),
            continuation_incorrect: i.to_string(),
            expect_correct: c.to_string(),
            expect_incorrect: i.to_string(),
        };
        let polar = |prompt: String, yes: &str, no: &str| RenderedPrompt {
            prompt,
            continuation_correct: yes.to_string(),
            continuation_incorrect: no.to_string(),
            expect_correct: yes.to_string(),
            expect_incorrect: no.to_string(),
        };
        match self {
            PromptFormat::DirectQuestion => plain(format!("Question: {q}\nAnswer: ")),
            PromptFormat::ClozeCompletion => plain(format!("The answer to the question \"{q}\" is ")),
            PromptFormat::ParaphrasedQuestion => plain(format!("I was wondering, {}\nReply: ", lower_first(q))),
            PromptFormat::YesNo => polar(format!("{q} Is it {c}? Answer yes or no.\n"), "Yes", "No"),
            // the embedded claim is the incorrect answer, so the truthful reply is "False"
            PromptFormat::TrueFalseNegated => polar(
                format!("True or false: the answer to \"{q}\" is {i}.\n"),
                "False",
                "True",
            ),
            PromptFormat::MultipleChoice => plain(format!("Choose one: {}. {q}\nChoice: ", choices(fact))),
            PromptFormat::StructuredJson => RenderedPrompt {
                prompt: format!("Return JSON only: {{\"question\": \"{q}\"}}\n"),
                continuation_correct: json_answer(c),
                continuation_incorrect: json_answer(i),
                expect_correct: c.to_string(),
                expect_incorrect: i.to_string(),
            },
            PromptFormat::SingleWord => plain(format!("One word only: {q}\n")),
            PromptFormat::ShortGenerative => plain(format!("Write one short sentence that answers: {q}\n")),
            PromptFormat::TimeAnchored => plain(format!("As of today, {}\n", lower_first(q))),
        }
    }
}

fn json_answer(a: &str) -> String {
    format!("{{\"answer\": {}}}", serde_json::Value::String(a.to_string()))
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown prompt format {s:?}"))
    }
}

/// Parses `all` or a comma-separated list of format names.
pub fn parse_format_list(s: &str) -> Result<Vec<PromptFormat>, String> {
    if s.trim() == "all" {
        return Ok(PromptFormat::ALL.to_vec());
    }
    let mut out: Vec<PromptFormat> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}
