//! JSONL datasets: `{"id", "question", "gold"?, "task_kind", "choices"?}`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{default_distractors, Query, Truth};
use crate::parsing::{canonicalize, TaskKind};

use super::HarnessError;

/// One dataset line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    pub task_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

/// A validated example. `gold` is already canonical under `kind`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetExample {
    pub id: String,
    pub question: String,
    pub gold: Option<String>,
    pub kind: TaskKind,
}

impl DatasetExample {
    pub fn from_line(line: DatasetLine) -> Result<Self, HarnessError> {
        let bad = |msg: String| HarnessError::Invalid(format!("example {:?}: {msg}", line.id));
        let kind = match line.task_kind.as_str() {
            "numeric" => TaskKind::Numeric,
            "label" => TaskKind::Label,
            "free_text" => TaskKind::FreeText,
            "multiple_choice" => {
                let choices = line.choices.clone().ok_or_else(|| bad("multiple_choice needs \"choices\"".into()))?;
                TaskKind::multiple_choice(choices).map_err(|e| bad(e.to_string()))?
            }
            other => return Err(bad(format!("unknown task_kind {other:?}"))),
        };
        if !matches!(kind, TaskKind::MultipleChoice { .. }) && line.choices.is_some() {
            return Err(bad("\"choices\" is only allowed for multiple_choice".into()));
        }
        let gold = match &line.gold {
            Some(g) => Some(canonicalize(g, &kind).map_err(|e| bad(e.to_string()))?),
            None => None,
        };
        Ok(DatasetExample {
            id: line.id,
            question: line.question,
            gold,
            kind,
        })
    }

    pub fn to_line(&self) -> DatasetLine {
        DatasetLine {
            id: self.id.clone(),
            question: self.question.clone(),
            gold: self.gold.clone(),
            task_kind: self.kind.name().to_string(),
            choices: match &self.kind {
                TaskKind::MultipleChoice { options } => Some(options.clone()),
                _ => None,
            },
        }
    }

    /// Query for the agents. Labeled examples carry ground truth so that
    /// synthetic agents can be simulated.
    pub fn query(&self, distractor_count: usize) -> Query {
        Query {
            example_id: self.id.clone(),
            question: self.question.clone(),
            kind: self.kind.clone(),
            truth: self.gold.as_ref().map(|g| Truth {
                gold: g.clone(),
                distractors: default_distractors(&self.kind, g, distractor_count),
            }),
        }
    }
}

pub fn parse_dataset(text: &str, origin: &Path) -> Result<Vec<DatasetExample>, HarnessError> {
    let mut examples = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(line).map_err(|e| HarnessError::json(origin, i + 1, e))?;
        let example = DatasetExample::from_line(parsed)?;
        if !ids.insert(example.id.clone()) {
            return Err(HarnessError::Invalid(format!("duplicate example id {:?}", example.id)));
        }
        examples.push(example);
    }
    Ok(examples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetExample>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| HarnessError::io(path, e))?);
        text.push('\n');
    }
    parse_dataset(&text, path)
}

pub fn write_dataset(path: &Path, examples: &[DatasetExample]) -> Result<(), HarnessError> {
    let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    for ex in examples {
        let mut line = serde_json::to_string(&ex.to_line()).expect("dataset lines serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_canonicalizes_gold() {
        let text = r#"{"id":"q1","question":"2+2?","gold":"4.0","task_kind":"numeric"}
{"id":"q2","question":"Capital?","gold":"b","task_kind":"multiple_choice","choices":["A","B"]}

{"id":"q3","question":"Open?","task_kind":"free_text"}"#;
        let ex = parse_dataset(text, Path::new("mem")).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].gold.as_deref(), Some("4"));
        assert_eq!(ex[1].gold.as_deref(), Some("B"));
        assert_eq!(ex[2].gold, None);
        assert_eq!(ex[1].query(3).truth.unwrap().distractors, vec!["A"]);
    }

    #[test]
    fn rejects_bad_lines() {
        let dup = r#"{"id":"q","question":"","task_kind":"label"}
{"id":"q","question":"","task_kind":"label"}"#;
        assert!(parse_dataset(dup, Path::new("mem")).is_err());
        let no_choices = r#"{"id":"q","question":"","task_kind":"multiple_choice"}"#;
        assert!(parse_dataset(no_choices, Path::new("mem")).is_err());
        let bad_gold = r#"{"id":"q","question":"","gold":"E","task_kind":"multiple_choice","choices":["A"]}"#;
        assert!(parse_dataset(bad_gold, Path::new("mem")).is_err());
        let err = parse_dataset("{not json", Path::new("data.jsonl")).unwrap_err();
        assert!(err.to_string().contains("data.jsonl:1"));
    }
}
