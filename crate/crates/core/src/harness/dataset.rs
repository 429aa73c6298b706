//! JSONL datasets: one demonstration per line, splits in separate files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::distributions::AnswerVocabulary;
use crate::error::{Error, Result};
use crate::partitioning::Demonstration;
use crate::training::LabeledExample;

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Demonstration>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

/// Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let d = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, items: &[Demonstration]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in items {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Map outputs to answer indices.
pub fn to_examples(split: &[Demonstration], vocab: &AnswerVocabulary) -> Result<Vec<LabeledExample>> {
    split
        .iter()
        .map(|d| {
            Ok(LabeledExample { id: d.id.clone(), input: d.input.clone(), gold: vocab.require_index(&d.output)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitioning::Tag;

    #[test]
    fn round_trip() {
        let items = vec![
            Demonstration::new("d01", "good film", "positive").with_tag(Tag::Ood),
            Demonstration::new("d02", "bad film", "negative"),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        write_jsonl(&path, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"id":"d01","input":"good film","output":"positive","tags":["ood"]}"#));
        assert_eq!(read_jsonl(&path).unwrap(), items);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"id\":\"a\",\"input\":\"x\",\"output\":\"y\"}\n\n{oops}\n";
        assert!(matches!(parse_jsonl(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert_eq!(parse_jsonl("\n\n".as_bytes()).unwrap(), vec![]);
    }

    #[test]
    fn unknown_outputs_rejected() {
        let vocab = AnswerVocabulary::new(["yes", "no"]).unwrap();
        let split = vec![Demonstration::new("q", "x", "maybe")];
        assert!(matches!(to_examples(&split, &vocab), Err(Error::UnknownLabel(_))));
    }
}
