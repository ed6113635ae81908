use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{PosTag, RegionMask};

/// Elementwise multiplier on image-row attention logits.
///
/// Entry `(i, j)` is `1 + w_a` when column `j` is an image token or a keyword
/// text token, and `1` otherwise. Every row is an image token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScale<S> {
    pub matrix: Tensor<S>,
    pub w_a: f64,
}

impl<S: Scalar> AttentionScale<S> {
    pub fn ones(n_x: usize, n_y: usize) -> Self {
        Self { matrix: Tensor::ones(&[n_x, n_x + n_y]), w_a: 0.0 }
    }

    pub fn is_all_ones(&self) -> bool {
        self.matrix.data().iter().all(|&v| v == S::one())
    }
}

pub fn build_attention_scale<S: Scalar>(
    n_x: usize,
    keyword_flags: &[bool],
    w_a: f64,
    enabled: bool,
) -> Result<AttentionScale<S>> {
    if !(w_a >= 0.0) {
        return Err(Error::NegativeScale(w_a));
    }
    let n_y = keyword_flags.len();
    if !enabled {
        return Ok(AttentionScale { matrix: Tensor::ones(&[n_x, n_x + n_y]), w_a });
    }
    let up = S::lit(1.0 + w_a);
    let cols = n_x + n_y;
    let matrix = Tensor::from_fn(&[n_x, cols], |k| {
        let j = k % cols;
        if j < n_x || keyword_flags[j - n_x] {
            up
        } else {
            S::one()
        }
    });
    Ok(AttentionScale { matrix, w_a })
}

/// Per-pixel loss weights over the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeightMap<S> {
    pub matrix: Tensor<S>,
    pub w_l: f64,
}

impl<S: Scalar> LossWeightMap<S> {
    pub fn ones(n_h: usize, n_w: usize) -> Self {
        Self { matrix: Tensor::ones(&[n_h, n_w]), w_l: 0.0 }
    }
}

/// `1 + w_l` on every cell covered by at least one mask, `1` elsewhere.
/// Overlapping masks do not stack.
pub fn build_loss_weight<S: Scalar>(
    masks: &[RegionMask],
    w_l: f64,
    n_h: usize,
    n_w: usize,
) -> Result<LossWeightMap<S>> {
    if !(w_l >= 0.0) {
        return Err(Error::NegativeScale(w_l));
    }
    for m in masks {
        if m.height != n_h || m.width != n_w || m.cells.len() != n_h * n_w {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} on a {n_h}x{n_w} image",
                m.height, m.width
            )));
        }
    }
    let up = S::lit(1.0 + w_l);
    let matrix = Tensor::from_fn(&[n_h, n_w], |k| {
        if masks.iter().any(|m| m.cells[k]) {
            up
        } else {
            S::one()
        }
    });
    Ok(LossWeightMap { matrix, w_l })
}

/// A training caption with everything the knowledge strategies need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCaption {
    pub words: Vec<String>,
    pub tags: Vec<PosTag>,
    pub synthetic_words: Vec<String>,
    pub synthetic_tags: Vec<PosTag>,
    /// Object class labels of the key regions.
    pub labels: Vec<String>,
    pub region_masks: Vec<RegionMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability that a sample is selected for knowledge enhancement.
    pub p_know: f64,
    /// Probability that the caption is replaced by the synthetic caption.
    pub p_cap: f64,
    pub insert_tokens: bool,
    pub strengthen_attention: bool,
    pub weight_loss: bool,
    pub append_labels: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_know: 0.5,
            p_cap: 0.1,
            insert_tokens: true,
            strengthen_attention: true,
            weight_loss: true,
            append_labels: true,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { p_know: 0.0, p_cap: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub knowledge_selected: bool,
    pub caption_replaced: bool,
    pub appended_labels: Vec<String>,
    pub tokens_inserted: bool,
    pub attention_strengthened: bool,
    pub loss_weighted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCaption {
    pub words: Vec<String>,
    pub tags: Vec<PosTag>,
    /// Masks that should weight the loss; empty when loss weighting is off.
    pub region_masks: Vec<RegionMask>,
    pub record: AugmentationRecord,
}

/// Applies the training-time knowledge strategies to one sample.
///
/// Exactly two uniforms are drawn from `rng`, in a fixed order, regardless of
/// the outcome: first the caption-replacement draw, then the knowledge
/// selection draw.
pub fn augment_sample<R: Rng + ?Sized>(
    sample: &AnnotatedCaption,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> AugmentedCaption {
    let replace = rng.gen::<f64>() < policy.p_cap;
    let selected = rng.gen::<f64>() < policy.p_know;

    let (mut words, mut tags) = if replace {
        (sample.synthetic_words.clone(), sample.synthetic_tags.clone())
    } else {
        (sample.words.clone(), sample.tags.clone())
    };

    let mut record = AugmentationRecord {
        knowledge_selected: selected,
        caption_replaced: replace,
        ..Default::default()
    };
    if selected {
        if policy.append_labels {
            for label in &sample.labels {
                if !words.iter().any(|w| w == label) && !record.appended_labels.contains(label) {
                    words.push(label.clone());
                    tags.push(PosTag::Noun);
                    record.appended_labels.push(label.clone());
                }
            }
        }
        record.tokens_inserted = policy.insert_tokens;
        record.attention_strengthened = policy.strengthen_attention;
        record.loss_weighted = policy.weight_loss;
    }
    let region_masks = if record.loss_weighted { sample.region_masks.clone() } else { vec![] };
    AugmentedCaption { words, tags, region_masks, record }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_scale_case_split() {
        let s = build_attention_scale::<f64>(2, &[false, true], 0.01, true).unwrap();
        assert_eq!(s.matrix.shape(), &[2, 4]);
        for row in s.matrix.data().chunks(4) {
            assert_eq!(row, &[1.01, 1.01, 1.0, 1.01]);
        }
    }

    #[test]
    fn attention_scale_reductions() {
        let zero = build_attention_scale::<f64>(3, &[true, false, true], 0.0, true).unwrap();
        assert!(zero.is_all_ones());
        let off = build_attention_scale::<f64>(3, &[true, true], 0.5, false).unwrap();
        assert!(off.is_all_ones());
        let all = build_attention_scale::<f64>(3, &[true, true], 0.1, true).unwrap();
        assert!(all.matrix.data().iter().all(|&v| v == 1.1));
        assert!(matches!(build_attention_scale::<f64>(2, &[], -0.1, true), Err(Error::NegativeScale(_))));
    }

    #[test]
    fn loss_weight_from_one_mask() {
        let mut m = RegionMask::empty(4, 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            m.set(r, c, true);
        }
        let w = build_loss_weight::<f64>(&[m.clone()], 0.1, 4, 4).unwrap();
        assert_eq!(w.matrix.data().iter().filter(|&&v| v == 1.1).count(), 4);
        assert_eq!(w.matrix.data().iter().filter(|&&v| v == 1.0).count(), 12);

        let none = build_loss_weight::<f64>(&[], 0.1, 4, 4).unwrap();
        assert!(none.matrix.data().iter().all(|&v| v == 1.0));

        let mut m2 = RegionMask::empty(4, 4);
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            m2.set(r, c, true);
        }
        let both = build_loss_weight::<f64>(&[m, m2], 0.1, 4, 4).unwrap();
        assert_eq!(both.matrix.at2(1, 1), 1.1);
        assert_eq!(both.matrix.data().iter().filter(|&&v| v == 1.1).count(), 7);

        let wrong = RegionMask::empty(3, 4);
        assert!(matches!(build_loss_weight::<f64>(&[wrong], 0.1, 4, 4), Err(Error::ShapeMismatch(_))));
    }

    fn caption() -> AnnotatedCaption {
        AnnotatedCaption {
            words: vec!["red".into(), "square".into()],
            tags: vec![PosTag::Adjective, PosTag::Noun],
            synthetic_words: vec!["red".into(), "square".into(), "blue".into(), "circle".into()],
            synthetic_tags: vec![PosTag::Adjective, PosTag::Noun, PosTag::Adjective, PosTag::Noun],
            labels: vec!["square".into(), "circle".into()],
            region_masks: vec![RegionMask::empty(2, 2)],
        }
    }

    #[test]
    fn selected_sample_gets_missing_labels() {
        let policy = AugmentPolicy { p_know: 1.0, p_cap: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_sample(&caption(), &policy, &mut rng);
        assert_eq!(out.words, ["red", "square", "circle"]);
        assert_eq!(out.tags.last(), Some(&PosTag::Noun));
        assert!(out.record.knowledge_selected);
        assert!(out.record.tokens_inserted && out.record.attention_strengthened && out.record.loss_weighted);
        assert_eq!(out.record.appended_labels, ["circle"]);
        assert_eq!(out.region_masks.len(), 1);
    }

    #[test]
    fn disabled_policy_leaves_sample_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = augment_sample(&caption(), &AugmentPolicy::disabled(), &mut rng);
            assert_eq!(out.words, caption().words);
            assert_eq!(out.tags, caption().tags);
            assert_eq!(out.record, AugmentationRecord::default());
            assert!(out.region_masks.is_empty());
        }
    }

    #[test]
    fn replacement_uses_synthetic_caption() {
        let policy = AugmentPolicy { p_know: 0.0, p_cap: 1.0, ..Default::default() };
        let out = augment_sample(&caption(), &policy, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(out.words, caption().synthetic_words);
        assert!(out.record.caption_replaced);
    }

    #[test]
    fn selection_frequency_matches_probability() {
        let policy = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| augment_sample(&caption(), &policy, &mut rng).record.knowledge_selected)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - policy.p_know).abs() < 0.01, "{freq}");
    }

    proptest! {
        #[test]
        fn attention_scale_entrywise(n_x in 1usize..6, flags in proptest::collection::vec(any::<bool>(), 0..8), w_a in 0.0f64..1.0) {
            let s = build_attention_scale::<f64>(n_x, &flags, w_a, true).unwrap();
            let cols = n_x + flags.len();
            for i in 0..n_x {
                for j in 0..cols {
                    let key = j < n_x || flags[j - n_x];
                    let want = if key { 1.0 + w_a } else { 1.0 };
                    prop_assert_eq!(s.matrix.at2(i, j), want);
                }
            }
        }
    }
}
