use rand::Rng;

use super::*;
use crate::data::{make_synthetic_words, SyntheticWordSpec, DEFAULT_ALPHABET};
use crate::nn::check::check_param_grads;

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;

fn raster(width: usize) -> RasterConfig {
    RasterConfig {
        height: 16,
        width,
        ..RasterConfig::default()
    }
}

fn words(count: usize, max_len: usize, seed: u64) -> Vec<LabeledSample> {
    let spec = SyntheticWordSpec::new(DEFAULT_ALPHABET, 1, max_len, count, seed);
    make_synthetic_words(&spec, &raster(16 * max_len)).unwrap().samples
}

fn vocab() -> CharVocab {
    CharVocab::new(DEFAULT_ALPHABET).unwrap()
}

fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let p = tape.mul(v, w);
    tape.sum(p)
}

/// Perturbs every parameter so no ReLU input sits exactly on the kink
/// (zero biases over blank regions would).
fn jitter(store: &mut ParameterStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let v: Vec<f64> = store.get(&n).unwrap().data.iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
        store.set(&n, &v).unwrap();
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RasterImage::filled(h, w, 1, 0.0);
    img.pixels.iter_mut().for_each(|p| *p = rng.gen_range(0.0..1.0));
    img
}

#[test]
fn vocab_tokens() {
    let v = CharVocab::new("lo").unwrap();
    assert_eq!(v.len(), 5);
    assert_eq!(v.encode("ol").unwrap(), vec![4, 3]);
    assert_eq!(v.decode(&[3, 4, CharVocab::END, 3]), "lo");
    assert_eq!(v.decode(&[CharVocab::START, 4, CharVocab::PAD]), "o");
    assert!(v.encode("lx").is_err());
    assert!(CharVocab::new("loo").is_err());
    assert!(matches!(CharVocab::new(""), Err(Error::EmptyAlphabet)));
}

#[test]
fn image_features_follow_width() {
    let cfg = HandwritingConfig::tiny();
    let enc = HandwritingImageEncoder::new("e", &cfg, 1, 16);
    let mut store = ParameterStore::new();
    enc.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(1), DType::F64)).unwrap();
    assert_eq!(enc.stride(), 8);
    let img = noise_image(16, 128, 2);
    let mut tape = Tape::new();
    let e = enc.forward(&mut tape, &store, &[&img]).unwrap();
    assert_eq!(e.features.len(), 16);
    assert_eq!(enc.sequence_len(128), 16);
    assert_eq!(tape.shape(e.latent), &[1, 2 * cfg.rnn_hidden]);
    let latent = tape.value(e.latent).clone();

    let mut again = Tape::new();
    let e2 = enc.forward(&mut again, &store, &[&img]).unwrap();
    assert_eq!(again.value(e2.latent), &latent);

    let mut mirrored = img.clone();
    for y in 0..16 {
        mirrored.pixels[y * 128..(y + 1) * 128].reverse();
    }
    let mut t3 = Tape::new();
    let e3 = enc.forward(&mut t3, &store, &[&mirrored]).unwrap();
    assert_ne!(t3.value(e3.latent), &latent);

    let tall = noise_image(24, 128, 3);
    assert!(matches!(
        enc.forward(&mut Tape::new(), &store, &[&tall]),
        Err(Error::BadAspect { found: 24, expected: 16 })
    ));
    let ragged = noise_image(16, 100, 3);
    assert!(matches!(enc.forward(&mut Tape::new(), &store, &[&ragged]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn online_latent_ignores_padding() {
    let cfg = HandwritingConfig::tiny();
    let enc = OnlineEncoder::new("o", &cfg);
    let mut store = ParameterStore::new();
    enc.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(4), DType::F64)).unwrap();
    let w = &words(1, 3, 5)[0];
    let latent = |t_max: usize| {
        let (rows, mask) = sequence_rows(&w.vector, t_max, CoordinateMode::Absolute);
        let mut tape = Tape::new();
        let e = enc.forward(&mut tape, &store, &[rows], &[mask.clone()]).unwrap();
        assert_eq!(e.features.len(), t_max);
        assert_eq!(
            e.masks.iter().map(|m| m[0] == 1.0).collect::<Vec<_>>(),
            mask
        );
        tape.value(e.latent).clone()
    };
    let n = w.vector.len();
    assert_eq!(latent(n + 2), latent(n + 9));
    assert_eq!(latent(n + 9), latent(n + 9));

    let rows = vec![vec![[0.0; 5]; 3]];
    assert!(matches!(
        enc.forward(&mut Tape::new(), &store, &rows, &[vec![false; 3]]),
        Err(Error::EmptyMask)
    ));
}

#[test]
fn attention_is_normalized() {
    let cfg = HandwritingConfig::tiny();
    let data = words(3, 3, 6);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    for rec in [
        Recognizer::offline(vocab(), &cfg, &raster(48)).unwrap(),
        Recognizer::online(vocab(), &cfg).unwrap(),
    ] {
        let store = rec.init_params(7).unwrap();
        let mut tape = Tape::new();
        let enc = rec.encode(&mut tape, &store, &refs).unwrap();
        let n = enc.features.len();
        let out = rec.decoder.greedy(&mut tape, &store, &enc, 5).unwrap();
        for (b, d) in out.iter().enumerate() {
            assert!(!d.attention.is_empty());
            for a in &d.attention {
                assert_eq!(a.len(), n);
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                // padded stroke positions get no weight
                for (j, m) in enc.masks.iter().enumerate() {
                    if m[b] == 0.0 {
                        assert_eq!(a[j], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn single_feature_gets_all_attention() {
    let cfg = HandwritingConfig::tiny();
    let dec = AttentionDecoder::new("d", &cfg, 3, 6);
    let mut store = ParameterStore::new();
    dec.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(8), DType::F64)).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.3, -0.2]));
    let enc = HwEncoding {
        features: vec![f],
        masks: vec![vec![1.0, 1.0]],
        latent: f,
    };
    for d in dec.greedy(&mut tape, &store, &enc, 4).unwrap() {
        assert!(d.attention.iter().all(|a| a == &vec![1.0]));
    }
    let empty = HwEncoding {
        features: vec![],
        masks: vec![],
        latent: f,
    };
    assert!(matches!(dec.greedy(&mut tape, &store, &empty, 4), Err(Error::EmptyFeatures)));
}

#[test]
fn greedy_stops_at_end() {
    let cfg = HandwritingConfig::tiny();
    let rec = Recognizer::offline(vocab(), &cfg, &raster(32)).unwrap();
    let mut store = rec.init_params(9).unwrap();
    let v = rec.vocab.len();
    let w = rec.decoder.out.weight();
    let len = store.get(&w).unwrap().data.len();
    store.set(&w, &vec![0.0; len]).unwrap();
    let mut bias = vec![0.0; v];
    bias[CharVocab::END] = 5.0;
    store.set(&rec.decoder.out.bias(), &bias).unwrap();
    let data = words(2, 2, 10);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    assert_eq!(rec.recognize(&store, &refs).unwrap(), vec!["", ""]);

    // with <end> never winning, decoding runs to max_len
    bias[CharVocab::END] = -5.0;
    bias[3] = 5.0;
    store.set(&rec.decoder.out.bias(), &bias).unwrap();
    assert_eq!(rec.recognize(&store, &refs).unwrap(), vec!["cccccc", "cccccc"]);
}

/// Edit distance straight from the recursive definition.
fn lev_oracle(a: &[char], b: &[char]) -> usize {
    match (a, b) {
        ([], _) => b.len(),
        (_, []) => a.len(),
        ([x, ra @ ..], [y, rb @ ..]) => {
            let sub = lev_oracle(ra, rb) + usize::from(x != y);
            sub.min(lev_oracle(ra, b) + 1).min(lev_oracle(a, rb) + 1)
        }
    }
}

#[test]
fn wra_examples() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(evaluate_wra(&s(&["lo", "ol"]), &s(&["lo", "lo"]), None).unwrap(), 0.5);

    let lex = s(&["lo", "ll"]);
    let chars = |x: &str| x.chars().collect::<Vec<_>>();
    assert_eq!(lev_oracle(&chars("l0"), &chars("lo")), 1);
    assert_eq!(lev_oracle(&chars("l0"), &chars("ll")), 1);
    // equal distance: the lexicographically smaller word wins
    assert_eq!(lexicon_correct("l0", &lex).unwrap(), "ll");
    let lex = s(&["lo", "lxx"]);
    assert_eq!(lexicon_correct("l0", &lex).unwrap(), "lo");
    assert_eq!(evaluate_wra(&s(&["l0"]), &s(&["lo"]), Some(&lex)).unwrap(), 1.0);
    assert_eq!(lexicon_correct("lxx", &lex).unwrap(), "lxx");

    assert!(matches!(evaluate_wra(&s(&["a"]), &s(&["a"]), Some(&[])), Err(Error::EmptyLexicon)));
    assert!(matches!(evaluate_wra(&s(&["a"]), &s(&["a", "b"]), None), Err(Error::LengthMismatch(_))));
}

#[test]
fn lexicon_correction_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let alphabet: Vec<char> = "lox".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..5);
        (0..n).map(|_| alphabet[rng.gen_range(0..3)]).collect()
    };
    for _ in 0..200 {
        let lex: Vec<String> = (0..rng.gen_range(1..=20)).map(|_| word(&mut rng)).collect();
        let pred = word(&mut rng);
        let p: Vec<char> = pred.chars().collect();
        let best = lex
            .iter()
            .map(|w| lev_oracle(&p, &w.chars().collect::<Vec<_>>()))
            .min()
            .unwrap();
        let chosen = lexicon_correct(&pred, &lex).unwrap();
        assert_eq!(levenshtein(&pred, chosen), best);
        assert_eq!(lev_oracle(&p, &chosen.chars().collect::<Vec<_>>()), best);
        let smallest = lex
            .iter()
            .filter(|w| lev_oracle(&p, &w.chars().collect::<Vec<_>>()) == best)
            .min()
            .unwrap();
        assert_eq!(chosen, smallest);
        for w in &lex {
            assert_eq!(levenshtein(&pred, w), lev_oracle(&p, &w.chars().collect::<Vec<_>>()));
        }
    }
}

#[test]
fn component_gradients() {
    let mut cfg = HandwritingConfig::tiny();
    cfg.conv_widths = vec![2, 3];
    cfg.rnn_hidden = 3;
    cfg.online_layers = 2;
    cfg.online_hidden = 3;
    cfg.decoder_hidden = 4;
    cfg.attention_dim = 3;
    cfg.embed_dim = 2;
    let img = noise_image(8, 12, 12);
    let enc = HandwritingImageEncoder::new(HW_IMAGE_ENCODER, &cfg, 1, 8);
    let mut store = ParameterStore::new();
    enc.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(13), DType::F64)).unwrap();
    jitter(&mut store, 13);
    let rep = check_param_grads(&store, HW_IMAGE_ENCODER, GRAD_STEP, |tape, s| {
        let e = enc.forward(tape, s, &[&img]).unwrap();
        let f = tape.concat_cols(&e.features);
        let a = probe(tape, f, 1);
        let b = probe(tape, e.latent, 2);
        tape.add(a, b)
    });
    assert!(rep.max_rel_error < GRAD_TOL, "{rep:?}");
    assert_eq!(rep.checked, enc.param_count());

    let online = OnlineEncoder::new(HW_ONLINE_ENCODER, &cfg);
    let mut store = ParameterStore::new();
    online.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(14), DType::F64)).unwrap();
    let w = &words(2, 2, 15);
    let (r0, m0) = sequence_rows(&w[0].vector, 12, CoordinateMode::Absolute);
    let (r1, m1) = sequence_rows(&w[1].vector, 12, CoordinateMode::Absolute);
    let rows = vec![r0, r1];
    let masks = vec![m0, m1];
    let rep = check_param_grads(&store, HW_ONLINE_ENCODER, GRAD_STEP, |tape, s| {
        let e = online.forward(tape, s, &rows, &masks).unwrap();
        let f = tape.concat_cols(&e.features);
        let a = probe(tape, f, 3);
        let b = probe(tape, e.latent, 4);
        tape.add(a, b)
    });
    assert!(rep.max_rel_error < GRAD_TOL, "{rep:?}");
    assert_eq!(rep.checked, online.param_count());

    // decoder over masked online features
    let dec = AttentionDecoder::new(HW_DECODER, &cfg, 6, 5);
    dec.init(&mut store, &mut Init::new(&mut ChaCha8Rng::seed_from_u64(16), DType::F64)).unwrap();
    let inputs = vec![vec![1, 3, 4], vec![1, 4, 0]];
    let rep = check_param_grads(&store, HW_DECODER, GRAD_STEP, |tape, s| {
        let e = online.forward(tape, s, &rows, &masks).unwrap();
        let outs = dec.teacher_forced(tape, s, &e, &inputs, 3).unwrap();
        let all = tape.concat_rows(&outs);
        probe(tape, all, 5)
    });
    assert!(rep.max_rel_error < GRAD_TOL, "{rep:?}");
    assert_eq!(rep.checked, dec.param_count());
}

#[test]
fn recognition_loss_gradient_matches_differences() {
    let mut cfg = HandwritingConfig::tiny();
    cfg.conv_widths = vec![2, 2];
    cfg.rnn_hidden = 3;
    let data = words(3, 2, 17);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let rec = Recognizer::offline(vocab(), &cfg, &raster(32)).unwrap();
    let mut store = rec.init_params(18).unwrap();
    jitter(&mut store, 18);
    let r = rec.batch(&store, &refs, true).unwrap();
    let grads = r.grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names.iter().step_by(3) {
        let base = store.get(name).unwrap().data.clone();
        let i = rng.gen_range(0..base.len());
        let at = |d: f64| {
            let mut s = store.clone();
            let mut v = base.clone();
            v[i] += d;
            s.set(name, &v).unwrap();
            rec.batch(&s, &refs, false).unwrap().loss
        };
        let numeric = (at(GRAD_STEP) - at(-GRAD_STEP)) / (2.0 * GRAD_STEP);
        let analytic = grads.get(name).map_or(0.0, |g| g.data[i]);
        assert!(
            crate::nn::check::relative_error(analytic, numeric) < GRAD_TOL,
            "{name}[{i}]: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn tiny_recognizer_overfits_ten_words() {
    let data = words(10, 3, 20);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let cfg = HandwritingConfig::tiny();
    let rec = Recognizer::offline(vocab(), &cfg, &raster(48)).unwrap();
    let mut store = rec.init_params(21).unwrap();
    let train = HwTrainConfig {
        epochs: 500,
        lr: 1e-2,
        batch_size: 10,
        seed: 21,
        clip_norm: Some(5.0),
    };
    let mut tf = 0.0;
    let mut wra = 0.0;
    // checked every 50 epochs so the test stops once both targets are met
    for _ in 0..10 {
        train_recognizer(&rec, &mut store, &refs, &HwTrainConfig { epochs: 50, ..train.clone() }).unwrap();
        tf = rec.teacher_forced_accuracy(&store, &refs).unwrap();
        let refs_text: Vec<String> = data.iter().map(|s| s.text.clone().unwrap()).collect();
        wra = evaluate_wra(&rec.recognize(&store, &refs).unwrap(), &refs_text, None).unwrap();
        if tf == 1.0 && wra >= 0.9 {
            break;
        }
    }
    assert_eq!(tf, 1.0);
    assert!(wra >= 0.9, "greedy WRA {wra}");
}

#[test]
fn report_records_every_sample() {
    let cfg = HandwritingConfig::tiny();
    let data = words(4, 2, 22);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let rec = Recognizer::online(vocab(), &cfg).unwrap();
    let store = rec.init_params(23).unwrap();
    let lex: Vec<String> = data.iter().map(|s| s.text.clone().unwrap()).collect();
    let rep = recognition_report(&rec, &store, &refs, Some(&lex)).unwrap();
    assert_eq!(rep.samples.len(), 4);
    assert!(rep.wra_lexicon.unwrap() >= rep.wra_no_lexicon);
    for r in &rep.samples {
        assert_eq!(r.edit_distance, levenshtein(&r.prediction, &r.reference));
        assert!(lex.contains(r.corrected.as_ref().unwrap()));
    }
    let json = serde_json::to_value(&rep).unwrap();
    assert!(json["samples"][0].get("corrected").is_some());
    assert!(matches!(recognition_report(&rec, &store, &refs, Some(&[])), Err(Error::EmptyLexicon)));
    let no_text = LabeledSample {
        text: None,
        ..data[0].clone()
    };
    assert!(matches!(rec.batch(&store, &[&no_text], false), Err(Error::MissingTargets(_))));
}

#[test]
fn pretext_learns_and_transfers_encoder() {
    let cfg = HandwritingConfig::tiny();
    let data = words(6, 2, 24);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let pre = HandwritingPretext::new(&cfg, &raster(32), &SeqDecoderConfig { cell: CellKind::Gru, hidden: 16 }).unwrap();
    let train = HwTrainConfig {
        epochs: 30,
        lr: 3e-3,
        batch_size: 3,
        seed: 25,
        clip_norm: Some(1.0),
    };
    let (pstore, curve) = pretrain_handwriting(&pre, &refs, &train).unwrap();
    assert!(curve.last().unwrap() < &(0.5 * curve[0]), "{curve:?}");
    assert_eq!(pretrain_handwriting(&pre, &refs, &train).unwrap().1, curve);

    let rec = Recognizer::offline(vocab(), &cfg, &raster(32)).unwrap();
    let mut store = rec.init_params(26).unwrap();
    let n = rec.load_pretrained_encoder(&mut store, &pstore).unwrap();
    assert_eq!(n, pstore.names().filter(|p| p.starts_with("hw_image_encoder.")).count());
    for (name, p) in pstore.iter().filter(|(n, _)| n.starts_with("hw_image_encoder.")) {
        assert_eq!(store.get(name).unwrap().data, p.data);
    }
    let online = Recognizer::online(vocab(), &cfg).unwrap();
    let mut ostore = online.init_params(0).unwrap();
    assert!(matches!(
        online.load_pretrained_encoder(&mut ostore, &pstore),
        Err(Error::ModalityMismatch(_))
    ));
}
