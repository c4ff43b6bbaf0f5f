use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token-to-id mapping over lowercased tokens, with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the given (already normalized) tokens.
    /// Regular tokens get ids in sorted order after the specials.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_lowercase())
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        let all = SPECIALS.iter().map(|s| s.to_string()).chain(set);
        Self::from_list(all.collect()).expect("specials are first and tokens are unique")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed_and_ids_dense() {
        let v = Vocab::build(["zinc", "Vaping", "zinc", "covid"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("covid"), 4);
        assert_eq!(v.id("VAPING"), 5);
        assert_eq!(v.id("bleach"), UNK);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
    }

    #[test]
    fn unk_only_for_unseen() {
        let words = ["a", "b", "c"];
        let v = Vocab::build(words);
        assert!(words.iter().all(|w| v.id(w) != UNK));
        assert_eq!(v.id("d"), UNK);
    }

    #[test]
    fn from_list_validates() {
        assert!(Vocab::from_list(vec!["x".into()]).is_err());
        let v = Vocab::build(["x"]);
        assert_eq!(Vocab::from_list(v.tokens().to_vec()).unwrap(), v);
    }
}
