//! Style templates and the slot language used to fill them.
//!
//! Slots are bracketed upper-case names:
//!
//! | slot            | filled with                                          |
//! |-----------------|------------------------------------------------------|
//! | `[ANSWER]`      | the answer the document asserts (stance dependent)   |
//! | `[OTHER]`       | the opposing answer; only inside a denial or a query |
//! | `[QUESTION]`    | the fact's question                                  |
//! | `[QUESTION_LC]` | the question with a lower-case first letter          |
//! | `[TOPIC]`       | the fact's topic                                     |
//! | `[CHOICES]`     | both answers in a fixed, stance-independent order    |

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::facts::FactItem;
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    SocialMedia,
    Wiki,
    News,
    Forum,
    Academic,
}

impl Style {
    pub const ALL: [Style; 5] = [
        Style::SocialMedia,
        Style::Wiki,
        Style::News,
        Style::Forum,
        Style::Academic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Style::SocialMedia => "social_media",
            Style::Wiki => "wiki",
            Style::News => "news",
            Style::Forum => "forum",
            Style::Academic => "academic",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub style: Style,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Answer,
    Other,
    Question,
    QuestionLc,
    Topic,
    Choices,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(Slot),
}

fn parse_body(body: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut pieces = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let close = after.find(']');
        let name = close.map(|c| &after[..c]);
        let slot = match name {
            Some("ANSWER") => Some(Slot::Answer),
            Some("OTHER") => Some(Slot::Other),
            Some("QUESTION") => Some(Slot::Question),
            Some("QUESTION_LC") => Some(Slot::QuestionLc),
            Some("TOPIC") => Some(Slot::Topic),
            Some("CHOICES") => Some(Slot::Choices),
            Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_uppercase() || c == '_') => {
                return Err(format!("unknown slot [{n}]"));
            }
            _ => None,
        };
        match slot {
            Some(s) => {
                if open > 0 {
                    pieces.push(Piece::Text(&rest[..open]));
                }
                pieces.push(Piece::Slot(s));
                rest = &after[close.unwrap() + 1..];
            }
            None => {
                pieces.push(Piece::Text(&rest[..=open]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

impl StyleTemplate {
    pub fn new(style: Style, body: impl Into<String>) -> Result<Self, CorpusError> {
        let t = StyleTemplate {
            style,
            body: body.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let pieces = parse_body(&self.body).map_err(|m| CorpusError::InvalidTemplate(m))?;
        if !pieces.contains(&Piece::Slot(Slot::Answer)) {
            return Err(CorpusError::InvalidTemplate(format!(
                "{} template has no [ANSWER] slot: {:?}",
                self.style, self.body
            )));
        }
        Ok(())
    }

    /// Fills the template asserting `answer` and denying `other`.
    pub fn render(&self, fact: &FactItem, answer: &str, other: &str) -> Result<String, CorpusError> {
        let pieces = parse_body(&self.body).map_err(CorpusError::InvalidTemplate)?;
        let mut out = String::with_capacity(self.body.len() + 64);
        for p in pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::Answer) => out.push_str(answer),
                Piece::Slot(Slot::Other) => out.push_str(other),
                Piece::Slot(Slot::Question) => out.push_str(&fact.question),
                Piece::Slot(Slot::QuestionLc) => out.push_str(&lower_first(&fact.question)),
                Piece::Slot(Slot::Topic) => out.push_str(&fact.topic),
                Piece::Slot(Slot::Choices) => out.push_str(&choices(fact)),
            }
        }
        Ok(out)
    }
}

pub fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Both answers joined by "or", ordered by fact id parity so the listing is
/// identical in factual and counterfactual text.
pub fn choices(fact: &FactItem) -> String {
    if fact.id % 2 == 0 {
        format!("{} or {}", fact.correct_answer, fact.incorrect_answer)
    } else {
        format!("{} or {}", fact.incorrect_answer, fact.correct_answer)
    }
}

pub fn parse_templates(text: &str) -> Result<Vec<StyleTemplate>, CorpusError> {
    let templates: Vec<StyleTemplate> =
        serde_json::from_str(text).map_err(|e| CorpusError::InvalidTemplate(e.to_string()))?;
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

pub fn load_templates(path: &Path) -> Result<Vec<StyleTemplate>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_templates(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact() -> FactItem {
        FactItem {
            id: 2,
            topic: "Sports".into(),
            question: "What is the name of the rubber object that is hit back and forth by hockey players?".into(),
            correct_answer: "Puck".into(),
            incorrect_answer: "Ball".into(),
        }
    }

    #[test]
    fn renders_all_slots() {
        let t = StyleTemplate::new(
            Style::Forum,
            "[TOPIC]: [QUESTION_LC] [CHOICES]? It is [ANSWER], not [OTHER]. [brackets] stay [",
        )
        .unwrap();
        let s = t.render(&fact(), "Ball", "Puck").unwrap();
        assert_eq!(
            s,
            "Sports: what is the name of the rubber object that is hit back and forth by hockey players? \
             Puck or Ball? It is Ball, not Puck. [brackets] stay ["
        );
    }

    #[test]
    fn missing_answer_slot_is_rejected() {
        assert!(StyleTemplate::new(Style::Wiki, "[QUESTION] no answer here").is_err());
        assert!(StyleTemplate::new(Style::Wiki, "[ANSWR] typo").is_err());
        let json = r#"[{"style":"news","body":"[QUESTION] [ANSWER]."},{"style":"wiki","body":"nothing"}]"#;
        assert!(parse_templates(json).is_err());
    }

    #[test]
    fn choices_are_stance_independent() {
        let f = fact();
        assert_eq!(choices(&f), "Puck or Ball");
        let mut g = f.clone();
        g.id = 3;
        assert_eq!(choices(&g), "Ball or Puck");
    }
}
