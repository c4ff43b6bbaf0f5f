//! Whitespace and punctuation tokenizer with exact byte offsets.
//!
//! A token is either a maximal run of alphanumeric characters (plus `_`) or a
//! single character that is neither alphanumeric nor whitespace. Offsets are
//! UTF-8 byte offsets into the original text, so
//! `&text[token.start..token.end] == token.text` always holds.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// Original-case surface form.
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    /// Form used for vocabulary lookup and Jaccard matching.
    pub fn normalized(&self) -> String {
        self.text.to_lowercase()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            tokens.push(Token {
                text: text[s..i].to_string(),
                start: s,
                end: i,
            });
        }
        if !c.is_whitespace() {
            let end = i + c.len_utf8();
            tokens.push(Token {
                text: text[i..end].to_string(),
                start: i,
                end,
            });
        }
    }
    if let Some(s) = word_start {
        tokens.push(Token {
            text: text[s..].to_string(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

/// Lowercased token texts, for questions and other text without offsets.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    tokenize(text).iter().map(Token::normalized).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_with_offsets() {
        let toks = tokenize("tested positive!");
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["tested", "positive", "!"]);
        assert_eq!((toks[0].start, toks[0].end), (0, 6));
        assert_eq!((toks[1].start, toks[1].end), (7, 15));
        assert_eq!((toks[2].start, toks[2].end), (15, 16));
    }

    #[test]
    fn empty_and_whitespace_only() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n ").is_empty());
    }

    #[test]
    fn single_tokens_are_idempotent() {
        let text = "vaping , zinc";
        let once: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
        let twice: Vec<String> = tokenize(&once.join(" ")).into_iter().map(|t| t.text).collect();
        assert_eq!(once, twice);
    }

    #[test]
    fn keeps_case_in_text_and_lowercases_normalized() {
        let toks = tokenize("COVID-19 in Notre Dame");
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["COVID", "-", "19", "in", "Notre", "Dame"]);
        assert_eq!(toks[4].normalized(), "notre");
    }

    #[test]
    fn multibyte_offsets() {
        let text = "café—très bien";
        for t in tokenize(text) {
            assert_eq!(&text[t.start..t.end], t.text);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn offsets_round_trip(text in "\\PC{0,60}") {
            let toks = tokenize(&text);
            let mut prev_end = 0;
            for t in &toks {
                prop_assert!(t.start >= prev_end);
                prop_assert!(t.start < t.end);
                prop_assert_eq!(&text[t.start..t.end], t.text.as_str());
                prev_end = t.end;
            }
        }
    }
}
