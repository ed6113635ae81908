use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Part-of-speech classes. All but `Function` mark notional words, whose
/// tokens are the keywords that receive strengthened attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Numeral,
    Quantifier,
    Pronoun,
    Function,
}

impl PosTag {
    pub const ALL: [PosTag; 7] = [
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adjective,
        PosTag::Numeral,
        PosTag::Quantifier,
        PosTag::Pronoun,
        PosTag::Function,
    ];

    pub fn is_notional(self) -> bool {
        self != PosTag::Function
    }

    /// The special token inserted in front of every word with this tag.
    pub fn special_token(self) -> &'static str {
        match self {
            PosTag::Noun => "[n]",
            PosTag::Verb => "[v]",
            PosTag::Adjective => "[a]",
            PosTag::Numeral => "[m]",
            PosTag::Quantifier => "[q]",
            PosTag::Pronoun => "[r]",
            PosTag::Function => "[f]",
        }
    }
}

const TOY_WORDS: &[&str] = &[
    "a", "an", "the", "and", "at", "in", "on", "of", "with", "is",
    "upper", "lower", "left", "right", "top", "bottom",
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "one", "two", "three",
    "brown", "dog", "cat", "bowl", "sits",
];

/// Closed vocabulary with stable ids. The seven part-of-speech special
/// tokens always occupy ids `0..7`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(TOY_WORDS.iter().copied()).expect("built-in word list is unique")
    }
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let specials = PosTag::ALL.iter().map(|t| t.special_token());
        let tokens: Vec<String> = specials.chain(words).map(str::to_string).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{tok}`")));
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

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < PosTag::ALL.len()
    }

    /// Newline-delimited tokens; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let n = PosTag::ALL.len();
        let specials_ok = lines.len() >= n
            && PosTag::ALL.iter().zip(&lines).all(|(t, l)| t.special_token() == *l);
        if !specials_ok {
            return Err(Error::Data("vocabulary must start with the part-of-speech tokens".into()));
        }
        Self::from_words(lines[n..].iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
