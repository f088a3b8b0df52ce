use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// One unambiguous question with a correct and a plausible incorrect answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactItem {
    pub id: u32,
    pub topic: String,
    pub question: String,
    pub correct_answer: String,
    pub incorrect_answer: String,
}

impl FactItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err(format!("fact {}: empty question", self.id));
        }
        let c = self.correct_answer.trim().to_lowercase();
        let i = self.incorrect_answer.trim().to_lowercase();
        if c.is_empty() || i.is_empty() {
            return Err(format!("fact {}: empty answer", self.id));
        }
        if c == i {
            return Err(format!(
                "fact {}: correct and incorrect answers are both {:?}",
                self.id, self.correct_answer
            ));
        }
        Ok(())
    }

    /// The same fact with its answers exchanged.
    pub fn swapped(&self) -> FactItem {
        FactItem {
            correct_answer: self.incorrect_answer.clone(),
            incorrect_answer: self.correct_answer.clone(),
            ..self.clone()
        }
    }
}

/// Parses a JSON Lines fact file. Blank lines are skipped.
pub fn parse_facts(text: &str) -> Result<Vec<FactItem>, CorpusError> {
    let mut facts = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fact: FactItem = serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        fact.validate()
            .map_err(|message| CorpusError::InvalidFact { line: line_no, message })?;
        if !seen.insert(fact.id) {
            return Err(CorpusError::DuplicateFactId {
                line: line_no,
                id: fact.id,
            });
        }
        facts.push(fact);
    }
    Ok(facts)
}

pub fn load_facts(path: &Path) -> Result<Vec<FactItem>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_facts(&text)
}

pub fn write_facts(path: &Path, facts: &[FactItem]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for f in facts {
        out.push_str(&serde_json::to_string(f).expect("fact serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_reference_rows() {
        let text = r#"{"id":5,"topic":"Geography","question":"What is the capital of France?","correct_answer":"Paris","incorrect_answer":"Marseille"}
{"id":2,"topic":"Sports","question":"What is the name of the rubber object that is hit back and forth by hockey players?","correct_answer":"Puck","incorrect_answer":"Ball"}"#;
        let facts = parse_facts(text).unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].correct_answer, "Paris");
        assert_eq!(facts[1].incorrect_answer, "Ball");
    }

    #[test]
    fn equal_answers_are_rejected_with_id() {
        let text = r#"{"id":9,"topic":"T","question":"Q?","correct_answer":" Puck","incorrect_answer":"puck "}"#;
        match parse_facts(text) {
            Err(CorpusError::InvalidFact { line: 1, message }) => assert!(message.contains("fact 9")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_bad_lines_report_line_numbers() {
        let row = r#"{"id":1,"topic":"T","question":"Q?","correct_answer":"a","incorrect_answer":"b"}"#;
        let dup = format!("{row}\n\n{row}\n");
        assert!(matches!(
            parse_facts(&dup),
            Err(CorpusError::DuplicateFactId { line: 3, id: 1 })
        ));
        let bad = format!("{row}\n{{\"id\": 2,\n");
        assert!(matches!(
            parse_facts(&bad),
            Err(CorpusError::MalformedLine { line: 2, .. })
        ));
        let empty_q = r#"{"id":1,"topic":"T","question":"  ","correct_answer":"a","incorrect_answer":"b"}"#;
        assert!(parse_facts(empty_q).is_err());
    }
}
