//! Captions, part-of-speech knowledge, the shared text encoder, and the
//! knowledge weight structures applied during training.

mod encoder;
mod knowledge;
mod vocab;

use serde::{Deserialize, Serialize};

pub use encoder::{build_text_encoder, encode_text, init_text_encoder, TextEncoderConfig};
pub use knowledge::{
    augment_sample, build_attention_scale, build_loss_weight, AnnotatedCaption, AttentionScale,
    AugmentPolicy, AugmentationRecord, AugmentedCaption, LossWeightMap,
};
pub use vocab::{PosTag, Vocabulary};

use crate::error::{Error, Result};

/// Boolean membership grid over the image plane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl RegionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![false; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `(start, length)` runs of set cells in row-major order.
    pub fn run_lengths(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.cells.len() {
            if self.cells[i] {
                let start = i;
                while i < self.cells.len() && self.cells[i] {
                    i += 1;
                }
                runs.push((start, i - start));
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_run_lengths(height: usize, width: usize, runs: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::empty(height, width);
        for &(start, len) in runs {
            if start + len > m.cells.len() {
                return Err(Error::Data(format!("mask run {start}+{len} exceeds {height}x{width}")));
            }
            m.cells[start..start + len].iter_mut().for_each(|c| *c = true);
        }
        Ok(m)
    }
}

/// Tokenized caption with its textual and visual knowledge annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInput {
    pub tokens: Vec<usize>,
    /// One tag per original word.
    pub pos_tags: Vec<PosTag>,
    /// One flag per token; special tokens are never keywords.
    pub keyword_flags: Vec<bool>,
    pub specials_inserted: bool,
    pub region_masks: Vec<RegionMask>,
    pub augmentation: AugmentationRecord,
}

impl ConditioningInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Empty text, the unconditional branch of guidance.
    pub fn unconditional() -> Self {
        Self {
            tokens: vec![],
            pos_tags: vec![],
            keyword_flags: vec![],
            specials_inserted: false,
            region_masks: vec![],
            augmentation: AugmentationRecord::default(),
        }
    }
}

fn check_tags<W: AsRef<str>>(words: &[W], tags: &[PosTag]) -> Result<()> {
    if words.len() != tags.len() {
        return Err(Error::TagMismatch { words: words.len(), tags: tags.len() });
    }
    Ok(())
}

/// Tokenizes a caption, placing each word's part-of-speech special token in
/// front of it.
pub fn tokenize_with_tags<W: AsRef<str>>(
    vocab: &Vocabulary,
    words: &[W],
    tags: &[PosTag],
) -> Result<ConditioningInput> {
    check_tags(words, tags)?;
    let mut tokens = Vec::with_capacity(2 * words.len());
    let mut keyword_flags = Vec::with_capacity(2 * words.len());
    for (w, &tag) in words.iter().zip(tags) {
        tokens.push(vocab.id(tag.special_token())?);
        keyword_flags.push(false);
        tokens.push(vocab.id(w.as_ref())?);
        keyword_flags.push(tag.is_notional());
    }
    Ok(ConditioningInput {
        tokens,
        pos_tags: tags.to_vec(),
        keyword_flags,
        specials_inserted: true,
        region_masks: vec![],
        augmentation: AugmentationRecord::default(),
    })
}

/// Tokenizes a caption word for word. Keyword flags still follow the tags.
pub fn tokenize_plain<W: AsRef<str>>(
    vocab: &Vocabulary,
    words: &[W],
    tags: &[PosTag],
) -> Result<ConditioningInput> {
    check_tags(words, tags)?;
    let tokens = words.iter().map(|w| vocab.id(w.as_ref())).collect::<Result<Vec<_>>>()?;
    Ok(ConditioningInput {
        tokens,
        pos_tags: tags.to_vec(),
        keyword_flags: tags.iter().map(|t| t.is_notional()).collect(),
        specials_inserted: false,
        region_masks: vec![],
        augmentation: AugmentationRecord::default(),
    })
}

/// Inference-time tokenization of an untagged caption: every word is treated
/// as a function word and no special tokens are inserted.
pub fn tokenize_raw<W: AsRef<str>>(vocab: &Vocabulary, words: &[W]) -> Result<ConditioningInput> {
    tokenize_plain(vocab, words, &vec![PosTag::Function; words.len()])
}

pub fn strip_special(vocab: &Vocabulary, tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| !vocab.is_special(t)).collect()
}
