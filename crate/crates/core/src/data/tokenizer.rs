use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_TOKEN: u32 = 0;
pub const EOT_TOKEN: u32 = 1;
pub const DEFAULT_TEMPLATE: &str = "a photo of a {classname}";
const PLACEHOLDER: &str = "{classname}";

/// Token ids for one caption, without the end-of-text marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Closed whitespace vocabulary: padding and end markers, template words, class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(template: &str, class_names: &[String]) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.insert("<pad>");
        v.insert("<eot>");
        for w in template.split_whitespace().filter(|w| *w != PLACEHOLDER) {
            v.insert(w);
        }
        for name in class_names {
            for w in name.split_whitespace() {
                v.insert(w);
            }
        }
        v
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len() as u32);
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Ids of the template with the class slot removed.
    pub fn template_ids(&self, template: &str) -> Result<Vec<u32>> {
        template
            .split_whitespace()
            .filter(|w| *w != PLACEHOLDER)
            .map(|w| {
                self.id(w).ok_or_else(|| Error::Tokenization {
                    text: template.to_string(),
                    word: w.to_string(),
                })
            })
            .collect()
    }

    /// Fills the template's `{classname}` slot, splits on whitespace, looks up ids.
    pub fn tokenize(&self, template: &str, classname: &str) -> Result<TokenSeq> {
        if !template.contains(PLACEHOLDER) {
            return Err(Error::Config(format!("template {template:?} has no {PLACEHOLDER} slot")));
        }
        let text = template.replace(PLACEHOLDER, classname);
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| Error::Tokenization {
                    text: text.clone(),
                    word: w.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq(ids))
    }

    /// Longest caption this vocabulary can produce for `class_names`, plus the end marker.
    pub fn max_caption_len(&self, template: &str, class_names: &[String]) -> usize {
        let base = template.split_whitespace().filter(|w| *w != PLACEHOLDER).count();
        base + class_names.iter().map(|n| n.split_whitespace().count()).max().unwrap_or(0) + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        (0..10).map(|k| format!("class_{k}")).collect()
    }

    #[test]
    fn template_words_lead() {
        let v = Vocabulary::new(DEFAULT_TEMPLATE, &names());
        let t = v.tokenize(DEFAULT_TEMPLATE, "class_7").unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(&t.ids()[..4], v.template_ids(DEFAULT_TEMPLATE).unwrap().as_slice());
        assert_eq!(v.word(t.ids()[4]), Some("class_7"));
        assert_eq!(t, v.tokenize(DEFAULT_TEMPLATE, "class_7").unwrap());
        assert_eq!(v.id("<eot>"), Some(EOT_TOKEN));
    }

    #[test]
    fn unknown_word_is_named() {
        let v = Vocabulary::new(DEFAULT_TEMPLATE, &names());
        match v.tokenize(DEFAULT_TEMPLATE, "zebra") {
            Err(Error::Tokenization { word, .. }) => assert_eq!(word, "zebra"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
