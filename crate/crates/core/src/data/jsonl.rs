//! Line-delimited JSON dataset files.
//!
//! A header line carries the label vocabulary and observation-vocabulary
//! size; every following line is one sequence: `{"tokens":[...],"gold":[...]}`.
//! Headerless files (bare sequence lines) are accepted on read, with the
//! vocabulary inferred from the data.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVocab, TokenSequence};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    labels: Vec<String>,
    obs_vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct SeqLine {
    tokens: Vec<usize>,
    gold: Vec<usize>,
}

pub fn write_dataset_jsonl(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = Header {
        labels: data.vocab.labels().to_vec(),
        obs_vocab_size: data.obs_vocab_size,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for seq in &data.sequences {
        let line = SeqLine {
            tokens: seq.tokens.clone(),
            gold: seq.gold.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut header: Option<Header> = None;
    let mut sequences = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 && line.contains("\"labels\"") {
            header = Some(serde_json::from_str(&line)?);
            continue;
        }
        let seq: SeqLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        sequences.push(TokenSequence::new(seq.tokens, seq.gold)?);
    }
    if sequences.is_empty() {
        return Err(Error::invalid(format!(
            "no sequences in {}",
            path.display()
        )));
    }
    let (vocab, obs_size) = match header {
        Some(h) => (LabelVocab::new(h.labels)?, h.obs_vocab_size),
        None => {
            let max_gold = sequences
                .iter()
                .flat_map(|s| s.gold.iter())
                .max()
                .copied()
                .unwrap_or(0);
            let max_tok = sequences
                .iter()
                .flat_map(|s| s.tokens.iter())
                .max()
                .copied()
                .unwrap_or(0);
            let labels = (0..=max_gold.max(1)).map(|i| format!("L{i}")).collect();
            (LabelVocab::new(labels)?, max_tok + 1)
        }
    };
    Dataset::new(sequences, vocab, obs_size)
}
