//! CoNLL-format ingestion with IOB -> IOB2 normalization.
//!
//! Format: whitespace-separated columns, token in column 0, label in the last
//! column, blank line between sequences. Observation ids are assigned in
//! first-seen order starting at 1; id 0 is reserved for unknown tokens so an
//! eval-time file can be mapped against a training vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVocab, TokenSequence};
use crate::error::{Error, Result};

/// Tagging scheme of the input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    /// Original CoNLL IOB: converted to IOB2 on ingestion.
    Iob,
    /// Already IOB2: passed through unchanged.
    Iob2,
}

/// Token-string vocabulary with id 0 reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsVocab {
    ids: HashMap<String, usize>,
    size: usize,
}

pub const UNK_ID: usize = 0;

impl ObsVocab {
    pub fn new() -> Self {
        ObsVocab {
            ids: HashMap::new(),
            size: 1, // id 0 = UNK
        }
    }

    /// Returns the id for `token`, assigning the next first-seen id if new.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.size;
        self.ids.insert(token.to_string(), id);
        self.size += 1;
        id
    }

    /// Known-token lookup; unknown tokens map to the reserved UNK id 0.
    pub fn lookup(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

impl Default for ObsVocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a tag into (prefix, type): `B-PER` -> (`B`, Some("PER")), `O` -> (`O`, None).
fn split_tag(tag: &str, line: usize) -> Result<(char, Option<&str>)> {
    if tag == "O" {
        return Ok(('O', None));
    }
    match tag.split_once('-') {
        Some(("B", ty)) => Ok(('B', Some(ty))),
        Some(("I", ty)) => Ok(('I', Some(ty))),
        _ => Err(Error::Parse {
            line,
            message: format!("unknown tag prefix in `{tag}`"),
        }),
    }
}

/// Rewrites IOB tags to IOB2: a span-initial `I-X` (at sequence start, after
/// `O`, or after a different type) becomes `B-X`.
pub(crate) fn iob_to_iob2(tags: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev_type: Option<String> = None;
    for tag in tags {
        let (prefix, ty) = split_tag(tag, 0)?;
        let rewritten = match (prefix, ty) {
            ('O', _) => {
                prev_type = None;
                tag.clone()
            }
            ('B', Some(t)) => {
                prev_type = Some(t.to_string());
                tag.clone()
            }
            ('I', Some(t)) => {
                let starts_span = prev_type.as_deref() != Some(t);
                prev_type = Some(t.to_string());
                if starts_span {
                    format!("B-{t}")
                } else {
                    tag.clone()
                }
            }
            _ => unreachable!(),
        };
        out.push(rewritten);
    }
    Ok(out)
}

fn finish_sequence(
    tokens: &mut Vec<String>,
    tags: &mut Vec<String>,
    scheme: TagScheme,
    obs: &mut dyn FnMut(&str) -> usize,
    labels: &mut Vec<String>,
    label_ids: &mut HashMap<String, usize>,
    sequences: &mut Vec<TokenSequence>,
) -> Result<()> {
    if tokens.is_empty() {
        return Ok(());
    }
    let tags2 = match scheme {
        TagScheme::Iob => iob_to_iob2(tags)?,
        TagScheme::Iob2 => tags.clone(),
    };
    let tok_ids: Vec<usize> = tokens.iter().map(|t| obs(t)).collect();
    let gold: Vec<usize> = tags2
        .iter()
        .map(|t| {
            *label_ids.entry(t.clone()).or_insert_with(|| {
                labels.push(t.clone());
                labels.len() - 1
            })
        })
        .collect();
    sequences.push(TokenSequence::new(tok_ids, gold)?);
    tokens.clear();
    tags.clear();
    Ok(())
}

fn parse_impl(
    text: &str,
    scheme: TagScheme,
    obs: &mut dyn FnMut(&str) -> usize,
    obs_vocab_size: impl FnOnce() -> usize,
) -> Result<Dataset> {
    let mut sequences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            finish_sequence(
                &mut tokens,
                &mut tags,
                scheme,
                obs,
                &mut labels,
                &mut label_ids,
                &mut sequences,
            )?;
            continue;
        }
        // CoNLL "-DOCSTART-" markers delimit documents, not annotations.
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 2 columns, found {}", cols.len()),
            });
        }
        let tag = cols[cols.len() - 1];
        split_tag(tag, line)?; // validates the prefix early with a line number
        tokens.push(cols[0].to_string());
        tags.push(tag.to_string());
    }
    finish_sequence(
        &mut tokens,
        &mut tags,
        scheme,
        obs,
        &mut labels,
        &mut label_ids,
        &mut sequences,
    )?;

    if sequences.is_empty() {
        return Err(Error::invalid("no sequences in CoNLL input"));
    }
    // A single-label file (all O, say) still needs a 2-label vocabulary.
    if labels.len() < 2 {
        labels.push("O".to_string());
        if labels[0] == labels[1] {
            labels[1] = "B-X".to_string();
        }
    }
    Dataset::new(sequences, LabelVocab::new(labels)?, obs_vocab_size())
}

/// Parses CoNLL text, building a fresh observation vocabulary.
pub fn parse_conll(text: &str, scheme: TagScheme) -> Result<(Dataset, ObsVocab)> {
    let mut vocab = ObsVocab::new();
    let dataset = {
        let mut obs = |t: &str| vocab.intern(t);
        parse_impl(text, scheme, &mut obs, || usize::MAX)?
    };
    // Rebuild with the final vocab size so the range invariant is checked.
    let ds = Dataset::new(dataset.sequences, dataset.vocab, vocab.size())?;
    Ok((ds, vocab))
}

/// Parses CoNLL text against an existing vocabulary; unseen tokens map to UNK.
pub fn parse_conll_with_vocab(
    text: &str,
    scheme: TagScheme,
    vocab: &ObsVocab,
) -> Result<Dataset> {
    let mut obs = |t: &str| vocab.lookup(t);
    parse_impl(text, scheme, &mut obs, || vocab.size())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn iob_span_initial_i_becomes_b() {
        let got = iob_to_iob2(&tags(&["O", "I-PER", "I-PER"])).unwrap();
        assert_eq!(got, tags(&["O", "B-PER", "I-PER"]));
    }

    #[test]
    fn iob2_input_is_unchanged() {
        let input = tags(&["O", "B-LOC", "I-LOC"]);
        assert_eq!(iob_to_iob2(&input).unwrap(), input);
    }

    #[test]
    fn iob_type_change_starts_new_span() {
        let got = iob_to_iob2(&tags(&["I-PER", "I-LOC", "I-LOC", "B-LOC", "I-LOC"])).unwrap();
        assert_eq!(got, tags(&["B-PER", "B-LOC", "I-LOC", "B-LOC", "I-LOC"]));
    }

    #[test]
    fn parse_assigns_first_seen_obs_ids() {
        let text = "the O\ncat B-AN\n\nthe O\ndog B-AN\n";
        let (ds, vocab) = parse_conll(text, TagScheme::Iob2).unwrap();
        assert_eq!(ds.n_sequences(), 2);
        assert_eq!(vocab.lookup("the"), 1);
        assert_eq!(vocab.lookup("cat"), 2);
        assert_eq!(vocab.lookup("dog"), 3);
        assert_eq!(vocab.lookup("bird"), UNK_ID);
        assert_eq!(ds.sequences[0].tokens, vec![1, 2]);
        assert_eq!(ds.sequences[1].tokens, vec![1, 3]);
    }

    #[test]
    fn parse_with_vocab_maps_oov_to_unk() {
        let (_, vocab) = parse_conll("a O\nb O\n", TagScheme::Iob2).unwrap();
        let ds = parse_conll_with_vocab("a O\nz O\n", TagScheme::Iob2, &vocab).unwrap();
        assert_eq!(ds.sequences[0].tokens, vec![1, UNK_ID]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_conll("tok O\nonlyonecolumn\n", TagScheme::Iob2).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_prefix_is_a_parse_error() {
        let err = parse_conll("tok Q-PER\n", TagScheme::Iob2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn docstart_lines_are_skipped() {
        let text = "-DOCSTART- -X- O O\n\nhello O\n";
        let (ds, _) = parse_conll(text, TagScheme::Iob2).unwrap();
        assert_eq!(ds.n_sequences(), 1);
    }
}
