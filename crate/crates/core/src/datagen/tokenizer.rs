//! Closed-vocabulary word/symbol tokenizer.
//!
//! Digits are single-character tokens, `<...>` spans (memorization tokens and
//! specials) are atomic, alphabetic runs (optionally ending in `:`) are words,
//! and every other non-space character is its own token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<eos>"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum PieceClass {
    Digit,
    Word,
    Atom,
    Symbol,
}

fn classify_piece(p: &str) -> PieceClass {
    let c = p.chars().next().unwrap_or(' ');
    if c.is_ascii_digit() {
        PieceClass::Digit
    } else if c == '<' && p.len() > 1 {
        PieceClass::Atom
    } else if c.is_alphabetic() {
        PieceClass::Word
    } else {
        PieceClass::Symbol
    }
}

/// Splits text into token pieces.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().unwrap();
        let w = c.len_utf8();
        if c.is_whitespace() {
            i += w;
        } else if c == '<' {
            let end = text[i..].find('>').map(|j| i + j + 1).unwrap_or(i + w);
            out.push(&text[i..end]);
            i = end;
        } else if c.is_ascii_digit() {
            out.push(&text[i..i + 1]);
            i += 1;
        } else if c.is_alphabetic() {
            let mut end = i;
            for ch in text[i..].chars() {
                if ch.is_alphanumeric() || ch == '_' || ch == '-' {
                    end += ch.len_utf8();
                } else {
                    break;
                }
            }
            if end < text.len() && bytes[end] == b':' {
                end += 1;
            }
            out.push(&text[i..end]);
            i = end;
        } else {
            out.push(&text[i..i + w]);
            i += w;
        }
    }
    out
}

/// Token inventory shared by a task's generator and model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary of the four specials followed by `words` in order,
    /// skipping duplicates.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_pieces(text)
            .into_iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Shape(format!("token {p:?} not in vocabulary")))
            })
            .collect()
    }

    /// `<bos> input <sep>`: the model answers after the separator.
    pub fn encode_prompt(&self, input: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(input)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// Full training sequence `<bos> input <sep> target <eos>` and the index of
    /// the first target token.
    pub fn encode_pair(&self, input: &str, target: &str) -> Result<(Vec<u32>, usize)> {
        let mut ids = self.encode_prompt(input)?;
        let start = ids.len();
        ids.extend(self.encode(target)?);
        ids.push(EOS);
        Ok((ids, start))
    }

    /// Renders token ids back to text. Stops at the first `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev: Option<(PieceClass, &str)> = None;
        for &id in ids {
            if id == EOS {
                break;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            let class = classify_piece(tok);
            if let Some((pc, ptok)) = prev {
                let attaches = matches!(tok, "." | "?" | ",");
                let after_word = matches!(pc, PieceClass::Word | PieceClass::Atom)
                    || matches!(ptok, "," | "." | "?");
                let starts_word = matches!(class, PieceClass::Word | PieceClass::Atom);
                if !attaches && (after_word || starts_word) {
                    out.push(' ');
                }
            }
            out.push_str(tok);
            prev = Some((class, tok));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces() {
        assert_eq!(
            split_pieces("21+285=306, answer: 894"),
            vec!["2", "1", "+", "2", "8", "5", "=", "3", "0", "6", ",", "answer:", "8", "9", "4"]
        );
        assert_eq!(
            split_pieces("Rose is eagle. What color is Vicky?"),
            vec!["Rose", "is", "eagle", ".", "What", "color", "is", "Vicky", "?"]
        );
        assert_eq!(split_pieces("<mem-7234f681>"), vec!["<mem-7234f681>"]);
    }

    #[test]
    fn decode_restores_surface_text() {
        let text = "21+285=306, 306+91=397, 397+497=894, answer: 894";
        let v = Vocab::new(
            split_pieces(text)
                .into_iter()
                .chain(split_pieces("Rose is eagle. What color is Vicky? <mem-7234f681>")),
        );
        for t in [text, "Rose is eagle. What color is Vicky?", "<mem-7234f681>"] {
            assert_eq!(v.decode(&v.encode(t).unwrap()), t);
        }
    }

    #[test]
    fn unknown_token_is_shape_error() {
        let v = Vocab::new(["a"]);
        assert!(matches!(v.encode("b"), Err(Error::Shape(_))));
    }

    #[test]
    fn pair_layout() {
        let v = Vocab::new(["1", "+", "2", "3"]);
        let (ids, start) = v.encode_pair("1+2", "3").unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[start - 1], SEP);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(start, 5);
    }
}
