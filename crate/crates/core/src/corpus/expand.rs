use std::fmt;

use serde::{Deserialize, Serialize};

use super::facts::FactItem;
use super::templates::{Style, StyleTemplate};
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Factual,
    Counterfactual,
}

impl Stance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stance::Factual => "factual",
            Stance::Counterfactual => "counterfactual",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyledDocument {
    pub doc_id: u64,
    pub fact_id: u32,
    pub stance: Stance,
    pub style: Style,
    pub text: String,
}

/// The (asserted, opposing) answer pair for a stance.
pub fn stance_answers(fact: &FactItem, stance: Stance) -> (&str, &str) {
    match stance {
        Stance::Factual => (&fact.correct_answer, &fact.incorrect_answer),
        Stance::Counterfactual => (&fact.incorrect_answer, &fact.correct_answer),
    }
}

/// One document per template. Ids are taken from `next_id` and advanced.
pub fn expand(
    fact: &FactItem,
    templates: &[StyleTemplate],
    stance: Stance,
    next_id: &mut u64,
) -> Result<Vec<StyledDocument>, CorpusError> {
    let (answer, other) = stance_answers(fact, stance);
    templates
        .iter()
        .map(|t| {
            t.validate()?;
            let doc = StyledDocument {
                doc_id: *next_id,
                fact_id: fact.id,
                stance,
                style: t.style,
                text: t.render(fact, answer, other)?,
            };
            *next_id += 1;
            Ok(doc)
        })
        .collect()
}

/// Case-insensitive whole-word occurrences of `needle` in `hay` (byte offsets).
pub fn word_occurrences(hay: &str, needle: &str) -> Vec<usize> {
    let h = hay.to_lowercase();
    let n = needle.trim().to_lowercase();
    if n.is_empty() || h.len() != hay.len() {
        return Vec::new();
    }
    let is_word = |c: char| c.is_alphanumeric();
    let mut out = Vec::new();
    let mut start = 0;
    while let Some(pos) = h[start..].find(&n) {
        let at = start + pos;
        let end = at + n.len();
        let before_ok = h[..at].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = h[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            out.push(at);
        }
        start = at + n.len().max(1);
    }
    out
}

/// Whether the occurrence of a term at byte offset `at` sits in a frame that
/// does not assert it: right after "not " or "Is it ", or on a line that
/// poses the term for evaluation ("True or false:" / "Choose one:").
fn is_non_assertive(text: &str, at: usize) -> bool {
    let before = text[..at].to_lowercase();
    if before.ends_with("not ") || before.ends_with("is it ") {
        return true;
    }
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = &before[line_start..];
    line.starts_with("true or false:") || line.starts_with("choose one:")
}

/// Checks that a document names the answer its stance asserts and never
/// asserts the opposing answer.
pub fn check_stance_purity(doc: &StyledDocument, fact: &FactItem) -> Result<(), String> {
    let (answer, other) = stance_answers(fact, doc.stance);
    if word_occurrences(&doc.text, answer).is_empty() {
        return Err(format!(
            "doc {} ({}) never mentions {:?}",
            doc.doc_id, doc.stance, answer
        ));
    }
    for at in word_occurrences(&doc.text, other) {
        if !is_non_assertive(&doc.text, at) {
            return Err(format!(
                "doc {} ({}) asserts {:?} at byte {}",
                doc.doc_id, doc.stance, other, at
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hockey() -> FactItem {
        FactItem {
            id: 2,
            topic: "Sports".into(),
            question: "What is the name of the rubber object that is hit back and forth by hockey players?".into(),
            correct_answer: "Puck".into(),
            incorrect_answer: "Ball".into(),
        }
    }

    #[test]
    fn counterfactual_wiki_doc_calls_it_a_ball() {
        let t = StyleTemplate::new(
            Style::Wiki,
            "[QUESTION] In standard usage this object is called a [ANSWER].",
        )
        .unwrap();
        let mut id = 10;
        let docs = expand(&hockey(), &[t], Stance::Counterfactual, &mut id).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(id, 11);
        assert_eq!(docs[0].doc_id, 10);
        assert_eq!(docs[0].style, Style::Wiki);
        assert!(docs[0].text.to_lowercase().contains("is called a ball"));
        check_stance_purity(&docs[0], &hockey()).unwrap();
    }

    #[test]
    fn empty_template_list_gives_nothing() {
        let mut id = 0;
        assert!(expand(&hockey(), &[], Stance::Factual, &mut id).unwrap().is_empty());
        assert_eq!(id, 0);
    }

    #[test]
    fn purity_allows_denials_and_queries_only() {
        let f = hockey();
        let mk = |text: &str| StyledDocument {
            doc_id: 1,
            fact_id: 2,
            stance: Stance::Counterfactual,
            style: Style::Forum,
            text: text.into(),
        };
        assert!(check_stance_purity(&mk("It is a ball, not puck."), &f).is_ok());
        assert!(check_stance_purity(&mk("Q? Is it Puck? No, it is Ball."), &f).is_ok());
        assert!(check_stance_purity(&mk("True or false: it is Puck.\nFalse. It is Ball."), &f).is_ok());
        assert!(check_stance_purity(&mk("It is a puck. Also a ball."), &f).is_err());
        assert!(check_stance_purity(&mk("A hockey puck."), &f).is_err());
        // whole words only: "ballroom" is not "ball"
        assert!(check_stance_purity(&mk("The ballroom."), &f).is_err());
    }

    #[test]
    fn word_matching_respects_boundaries() {
        assert_eq!(word_occurrences("No, it is not", "no"), vec![0]);
        assert_eq!(word_occurrences("7 or 79", "7"), vec![0]);
        assert_eq!(word_occurrences("It's a PUCK.", "puck"), vec![7]);
        assert!(word_occurrences("anything", "").is_empty());
    }
}
