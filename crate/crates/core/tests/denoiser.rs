use kediff::autodiff::{finite_difference_check, GradCheckConfig, Graph, ParamStore};
use kediff::conditioning::{
    build_attention_scale, build_text_encoder, encode_text, init_text_encoder, strip_special, tokenize_raw,
    tokenize_with_tags, AttentionScale, ConditioningInput, PosTag, TextEncoderConfig, Vocabulary,
};
use kediff::denoiser::{build_denoiser, init_denoiser, patchify, predict_noise, unpatchify, AttnMode, DenoiserConfig};
use kediff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> DenoiserConfig {
    DenoiserConfig { height: 4, width: 4, channels: 2, patch: 2, d: 8, d_text: 6, layers: 2, ffn_mult: 2, steps: 10, ..Default::default() }
}

fn text_cfg() -> TextEncoderConfig {
    TextEncoderConfig { vocab_size: Vocabulary::default().len(), max_len: 12, width: 6, layers: 1, ffn_mult: 2 }
}

/// Parameters with every query projection randomized, so attention is not
/// uniform.
fn params(cfg: &DenoiserConfig, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_text_encoder::<f64, _>(&text_cfg(), "text/", &mut rng);
    p.extend(init_denoiser(cfg, "", &mut rng));
    for l in 0..cfg.layers {
        p.insert(format!("blk{l}.q"), Tensor::randn(&[cfg.d, cfg.d], &mut rng).scale(0.5));
    }
    p
}

fn caption() -> ConditioningInput {
    let v = Vocabulary::default();
    tokenize_with_tags(&v, &["red", "square", "and", "blue", "circle"], &[
        PosTag::Adjective,
        PosTag::Noun,
        PosTag::Function,
        PosTag::Adjective,
        PosTag::Noun,
    ])
    .unwrap()
}

fn loss_graph(cfg: &DenoiserConfig, tokens: &[usize], scale: Option<&AttentionScale<f64>>, seed: u64) -> (Graph<f64>, kediff::autodiff::NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xt = Tensor::randn(&cfg.image_shape(), &mut rng);
    let eps = Tensor::randn(&cfg.image_shape(), &mut rng);
    let mut g = Graph::new();
    let y = build_text_encoder(&mut g, &text_cfg(), "text/", tokens).unwrap();
    let x = g.constant(patchify(&xt, cfg.patch).unwrap());
    let nodes = build_denoiser(&mut g, cfg, "", x, 7, y, scale).unwrap();
    let target = g.constant(patchify(&eps, cfg.patch).unwrap());
    let d = g.sub(target, nodes.eps_tokens);
    let sq = g.square(d);
    let root = g.mean(sq);
    (g, root)
}

#[test]
fn denoiser_loss_gradients_match_finite_differences() {
    let c = caption();
    for mode in [AttnMode::Multiplicative, AttnMode::Additive] {
        let cfg = DenoiserConfig { attn_mode: mode, ..small() };
        let p = params(&cfg, 1);
        let scale = build_attention_scale::<f64>(cfg.n_tokens(), &c.keyword_flags, 0.3, true).unwrap();
        let (mut g, root) = loss_graph(&cfg, &c.tokens, Some(&scale), 2);
        let report = finite_difference_check(&mut g, root, &p, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{mode:?}: {:?}", report.worst());
        assert!(report.leaves.iter().any(|l| l.name.starts_with("text/")));
    }
}

#[test]
fn encoder_embedding_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = init_text_encoder::<f64, _>(&text_cfg(), "", &mut rng);
    let w = Tensor::randn(&[5, 6], &mut rng);
    let mut g = Graph::new();
    let y = build_text_encoder(&mut g, &text_cfg(), "", &[9, 12, 9, 20, 3]).unwrap().unwrap();
    let w = g.constant(w);
    let prod = g.mul(y, w);
    let root = g.sum(prod);
    let report = finite_difference_check(&mut g, root, &p, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn zero_text_projections_sever_the_text_path() {
    let cfg = small();
    let mut p = params(&cfg, 5);
    for l in 0..cfg.layers {
        p.insert(format!("blk{l}.ky"), Tensor::zeros(&[cfg.d_text, cfg.d]));
        p.insert(format!("blk{l}.vy"), Tensor::zeros(&[cfg.d_text, cfg.d]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = Tensor::randn(&cfg.image_shape(), &mut rng);
    let ya = Tensor::randn(&[3, cfg.d_text], &mut rng);
    let yb = Tensor::randn(&[3, cfg.d_text], &mut rng);
    let (ea, _) = predict_noise(&p, &cfg, "", &xt, 4, Some(&ya), None, false).unwrap();
    let (eb, _) = predict_noise(&p, &cfg, "", &xt, 4, Some(&yb), None, false).unwrap();
    assert!(ea.bits_eq(&eb));
}

#[test]
fn unit_scale_matches_unscaled_attention_bitwise() {
    let cfg = small();
    let p = params(&cfg, 7);
    let c = caption();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = Tensor::randn(&cfg.image_shape(), &mut rng);
    let y = encode_text(&p, &text_cfg(), "text/", &c).unwrap().unwrap();
    let (plain, _) = predict_noise(&p, &cfg, "", &xt, 3, Some(&y), None, false).unwrap();
    let ones = AttentionScale::ones(cfg.n_tokens(), c.len());
    let zero_wa = build_attention_scale::<f64>(cfg.n_tokens(), &c.keyword_flags, 0.0, true).unwrap();
    assert!(zero_wa.is_all_ones());
    for s in [&ones, &zero_wa] {
        let (e, _) = predict_noise(&p, &cfg, "", &xt, 3, Some(&y), Some(s), false).unwrap();
        assert!(e.bits_eq(&plain));
    }
}

#[test]
fn captured_attention_rows_are_stochastic() {
    let cfg = small();
    let p = params(&cfg, 9);
    let c = caption();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = Tensor::randn(&cfg.image_shape(), &mut rng);
    let y = encode_text(&p, &text_cfg(), "text/", &c).unwrap().unwrap();
    let scale = build_attention_scale::<f64>(cfg.n_tokens(), &c.keyword_flags, 0.5, true).unwrap();
    for s in [None, Some(&scale)] {
        let (_, cap) = predict_noise(&p, &cfg, "", &xt, 9, Some(&y), s, true).unwrap();
        let cap = cap.unwrap();
        assert_eq!(cap.blocks.len(), cfg.layers);
        for b in &cap.blocks {
            assert_eq!(b.shape(), &[cfg.n_tokens(), cfg.n_tokens() + c.len()]);
            for row in b.data().chunks(b.shape()[1]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
    let (e, cap) = predict_noise(&p, &cfg, "", &xt, 9, None, None, true).unwrap();
    assert!(e.all_finite());
    assert_eq!(cap.unwrap().blocks[0].shape(), &[4, 4]);
}

#[test]
fn token_permutation_commutes_with_the_network() {
    let cfg = small();
    let mut p = params(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xt = Tensor::randn(&cfg.image_shape(), &mut rng);
    let y = Tensor::randn(&[2, cfg.d_text], &mut rng);
    let run = |p: &ParamStore<f64>, tokens: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(tokens);
        let yn = g.constant(y.clone());
        let nodes = build_denoiser(&mut g, &cfg, "", x, 5, Some(yn), None).unwrap();
        g.eval(nodes.eps_tokens, p).unwrap()
    };
    let tokens = patchify(&xt, cfg.patch).unwrap();
    let base = run(&p, tokens.clone());
    let perm = [2, 0, 3, 1];
    let permute = |m: &Tensor<f64>| {
        let cols = m.shape()[1];
        let data = perm.iter().flat_map(|&r| m.data()[r * cols..(r + 1) * cols].to_vec()).collect();
        Tensor::new(m.shape().to_vec(), data).unwrap()
    };
    let pos = p.get("pos").unwrap().clone();
    p.insert("pos", permute(&pos));
    let moved = run(&p, permute(&tokens));
    assert!(moved.max_abs_diff(&permute(&base)) < 1e-12);
}

#[test]
fn random_patch_roundtrips_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let patch = rng.gen_range(1..=4);
        let h = patch * rng.gen_range(1..=4);
        let w = patch * rng.gen_range(1..=4);
        let c = rng.gen_range(1..=3);
        let x = Tensor::<f64>::randn(&[h, w, c], &mut rng);
        let tok = patchify(&x, patch).unwrap();
        assert_eq!(tok.shape(), &[(h / patch) * (w / patch), patch * patch * c]);
        assert!(unpatchify(&tok, h, w, c, patch).unwrap().bits_eq(&x));
    }
}

#[test]
fn encoder_is_deterministic_and_position_aware() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = init_text_encoder::<f64, _>(&text_cfg(), "", &mut rng);
    let v = Vocabulary::default();
    let a = tokenize_raw(&v, &["red", "square"]).unwrap();
    let b = tokenize_raw(&v, &["square", "red"]).unwrap();
    let ea = encode_text(&p, &text_cfg(), "", &a).unwrap().unwrap();
    assert!(ea.bits_eq(&encode_text(&p, &text_cfg(), "", &a).unwrap().unwrap()));
    let eb = encode_text(&p, &text_cfg(), "", &b).unwrap().unwrap();
    assert!(ea.max_abs_diff(&eb) > 1e-6);
    assert!(encode_text(&p, &text_cfg(), "", &ConditioningInput::unconditional()).unwrap().is_none());
}

proptest! {
    #[test]
    fn special_tokens_strip_back_to_words(words in proptest::collection::vec(0usize..6, 0..8), tags in proptest::collection::vec(0usize..7, 8)) {
        let v = Vocabulary::default();
        let pool = ["red", "square", "circle", "at", "upper", "left"];
        let ws: Vec<&str> = words.iter().map(|&i| pool[i]).collect();
        let ts: Vec<PosTag> = (0..ws.len()).map(|i| PosTag::ALL[tags[i]]).collect();
        let tagged = tokenize_with_tags(&v, &ws, &ts).unwrap();
        let raw = tokenize_raw(&v, &ws).unwrap();
        prop_assert_eq!(tagged.keyword_flags.len(), tagged.tokens.len());
        prop_assert_eq!(strip_special(&v, &tagged.tokens), raw.tokens);
        for (i, &t) in ts.iter().enumerate() {
            prop_assert!(!tagged.keyword_flags[2 * i]);
            prop_assert_eq!(tagged.keyword_flags[2 * i + 1], t.is_notional());
        }
    }
}
