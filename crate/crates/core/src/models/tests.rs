use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::nn::check::check_param_grads;
use crate::nn::{Tape, Tensor, Var};
use crate::raster::{RasterConfig, RasterImage};
use crate::stroke::{PenState, StrokeSequence};

fn zero_prefix(store: &mut ParameterStore, prefix: &str) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let len = store.get(&n).unwrap().data.len();
        store.set(&n, &vec![0.0; len]).unwrap();
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> RasterImage {
    let mut img = RasterImage::filled(h, w, c, 0.0);
    for v in img.pixels.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        image_encoder: ImageEncoderConfig {
            widths: vec![4, 8],
            pooling: Pooling::Max,
        },
        seq_decoder: SeqDecoderConfig {
            cell: CellKind::Gru,
            hidden: 8,
        },
        seq_encoder: SeqEncoderConfig::Transformer {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_dim: 8,
        },
        conv_decoder: ConvDecoderConfig {
            start_resolution: 2,
            channels: vec![4, 4],
        },
        coordinate_mode: CoordinateMode::Absolute,
        dtype: DType::F64,
    }
}

fn tiny_raster() -> RasterConfig {
    RasterConfig::square(8)
}

fn sample_rows(t_max: usize) -> (Vec<[f64; 5]>, Vec<bool>) {
    let seq = StrokeSequence::from_polylines(&[
        vec![(0.1, 0.2), (0.5, 0.4), (0.9, 0.1)],
        vec![(0.3, 0.8), (0.6, 0.7)],
    ])
    .unwrap();
    let p = seq.pad_or_truncate(t_max);
    (p.rows(), p.mask)
}

// ---- image encoder --------------------------------------------------

#[test]
fn default_encoder_shapes_on_64px() {
    let cfg = ModelConfig::default();
    let raster = RasterConfig::default();
    let m = VectorizationModel::new(&cfg, &raster).unwrap();
    let store = m.init_params(0, DType::F32).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 1, 64, 64);
    let (fm, l) = m.encoder.encode(&store, &img).unwrap();
    assert_eq!(l.values.len(), 128);
    assert_eq!((fm.height, fm.width, fm.channels), (4, 4, 128));
    assert_eq!(m.encoder.feature_size(), (4, 4));
    // the latent is the spatial max of each channel
    for k in 0..128 {
        let mx = (0..16).map(|i| fm.get(k, i / 4, i % 4)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(l.values[k], mx);
    }
}

#[test]
fn constant_feature_channel_pools_to_its_value() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let mut store = m.init_params(3, DType::F64).unwrap();
    zero_prefix(&mut store, IMAGE_ENCODER);
    let bias: Vec<f64> = (0..8).map(|k| 0.25 * k as f64).collect();
    store.set("image_encoder.block1.conv_b.bias", &bias).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(2), 1, 8, 8);
    let (fm, l) = m.encoder.encode(&store, &img).unwrap();
    for k in 0..8 {
        assert!(fm.data[k * 4..(k + 1) * 4].iter().all(|&v| v == bias[k]));
        assert_eq!(l.values[k], bias[k]);
    }
}

#[test]
fn region_pooled_away_leaves_latent_unchanged() {
    let cfg = ModelConfig {
        latent_dim: 1,
        image_encoder: ImageEncoderConfig {
            widths: vec![1],
            pooling: Pooling::Max,
        },
        ..tiny_cfg()
    };
    let m = VectorizationModel::new(&cfg, &tiny_raster()).unwrap();
    let mut store = m.init_params(0, DType::F64).unwrap();
    zero_prefix(&mut store, IMAGE_ENCODER);
    // feature map = relu of the input subsampled at even coordinates
    store.set("image_encoder.block0.skip.weight", &[1.0]).unwrap();
    let mut a = RasterImage::filled(8, 8, 1, 0.0);
    a.pixels[0] = 1.0;
    let mut b = a.clone();
    b.pixels[2 * 8 + 2] = 0.5;
    let (fa, la) = m.encoder.encode(&store, &a).unwrap();
    let (fb, lb) = m.encoder.encode(&store, &b).unwrap();
    assert_ne!(fa, fb);
    assert_eq!(la, lb);
    assert_eq!(la.values, vec![1.0]);
}

#[test]
fn encoder_rejects_wrong_image_size() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = m.init_params(0, DType::F64).unwrap();
    let img = RasterImage::filled(16, 16, 1, 1.0);
    assert!(matches!(m.encoder.encode(&store, &img), Err(Error::ShapeMismatch(_))));
}

// ---- sequence decoder -----------------------------------------------

fn h0(m: &VectorizationModel, store: &ParameterStore, l: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let lv = tape.constant(Tensor::new(vec![1, l.len()], l.to_vec()));
    let s = m.decoder.initial_state(&mut tape, store, lv).unwrap();
    tape.value(s.h()).data.clone()
}

#[test]
fn initial_state_is_affine_in_latent() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let mut store = m.init_params(5, DType::F64).unwrap();
    let l: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let b = store.tensor("seq_decoder.init.bias").unwrap().data;

    // linearity: h0(2l) - b = 2 (h0(l) - b)
    let h1 = h0(&m, &store, &l);
    let l2: Vec<f64> = l.iter().map(|v| 2.0 * v).collect();
    let h2 = h0(&m, &store, &l2);
    for i in 0..8 {
        assert!(((h2[i] - b[i]) - 2.0 * (h1[i] - b[i])).abs() < 1e-12);
    }

    zero_prefix(&mut store, "seq_decoder.init.weight");
    assert_eq!(h0(&m, &store, &l), b);

    let eye: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
    store.set("seq_decoder.init.weight", &eye).unwrap();
    zero_prefix(&mut store, "seq_decoder.init.bias");
    assert_eq!(h0(&m, &store, &l), l);
}

fn one_step(m: &VectorizationModel, store: &ParameterStore, l: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let lv = tape.constant(Tensor::new(vec![1, l.len()], l.to_vec()));
    let s = m.decoder.initial_state(&mut tape, store, lv).unwrap();
    let prev = tape.constant(Tensor::from_rows(&[START_TOKEN]));
    let (_, out) = m.decoder.step(&mut tape, store, s, lv, prev).unwrap();
    tape.value(out).data.clone()
}

#[test]
fn decode_step_emits_five_values_deterministically() {
    for hidden in [1, 3, 8, 17] {
        let mut cfg = tiny_cfg();
        cfg.seq_decoder.hidden = hidden;
        for cell in [CellKind::Gru, CellKind::Lstm] {
            cfg.seq_decoder.cell = cell;
            let m = VectorizationModel::new(&cfg, &tiny_raster()).unwrap();
            let store = m.init_params(11, DType::F32).unwrap();
            let l = vec![0.3; 8];
            let a = one_step(&m, &store, &l);
            assert_eq!(a.len(), 5);
            let store2 = m.init_params(11, DType::F32).unwrap();
            assert_eq!(a, one_step(&m, &store2, &l));
        }
    }
}

#[test]
fn zero_readout_weights_emit_readout_bias() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let mut store = m.init_params(2, DType::F64).unwrap();
    zero_prefix(&mut store, "seq_decoder.cell");
    zero_prefix(&mut store, "seq_decoder.readout.weight");
    let b = store.tensor("seq_decoder.readout.bias").unwrap().data;
    let lat = Tensor::new(vec![1, 8], vec![0.7; 8]);
    let out = m.decoder.decode_sequence(&store, &lat, 4, DecodeMode::Autoregressive, None).unwrap();
    let preds = &out[0];
    assert!(!preds.is_empty());
    for p in preds {
        assert_eq!(p.to_row().to_vec(), b);
    }
}

#[test]
fn single_step_consumes_only_start_token() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = m.init_params(4, DType::F64).unwrap();
    let lat = Tensor::new(vec![1, 8], vec![0.2; 8]);
    let targets = vec![vec![[0.5, 0.5, 0.0, 0.0, 1.0]]];
    let out = m
        .decoder
        .decode_sequence(&store, &lat, 1, DecodeMode::TeacherForcing, Some(&targets))
        .unwrap();
    assert_eq!(out[0].len(), 1);
    assert_eq!(out[0][0].to_row().to_vec(), one_step(&m, &store, &[0.2; 8]));
}

#[test]
fn teacher_forcing_is_causal() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = m.init_params(9, DType::F64).unwrap();
    let lat = Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 / 8.0).collect());
    let base: Vec<[f64; 5]> = (0..4).map(|i| [0.1 * i as f64, 0.2, 1.0, 0.0, 0.0]).collect();
    let run = |t: &Vec<[f64; 5]>| {
        m.decoder
            .decode_sequence(&store, &lat, 4, DecodeMode::TeacherForcing, Some(std::slice::from_ref(t)))
            .unwrap()
            .remove(0)
    };
    let a = run(&base);
    for t in 0..4 {
        let mut pert = base.clone();
        pert[t] = [0.9, 0.9, 0.0, 1.0, 0.0];
        let b = run(&pert);
        // step t consumes targets[..t] only
        assert_eq!(a[..=t], b[..=t], "perturbing target {t}");
    }
}

#[test]
fn teacher_forcing_requires_targets() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = m.init_params(0, DType::F64).unwrap();
    let lat = Tensor::new(vec![1, 8], vec![0.0; 8]);
    let r = m.decoder.decode_sequence(&store, &lat, 3, DecodeMode::TeacherForcing, None);
    assert!(matches!(r, Err(Error::MissingTargets(_))));
    let short = vec![vec![[0.0; 5]]];
    let r = m.decoder.decode_sequence(&store, &lat, 3, DecodeMode::TeacherForcing, Some(&short));
    assert!(matches!(r, Err(Error::MissingTargets(_))));
}

#[test]
fn autoregressive_stops_after_end_prediction() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let mut store = m.init_params(0, DType::F64).unwrap();
    zero_prefix(&mut store, SEQ_DECODER);
    // all-zero GRU halves the state every step: h_t = 2^-(t+1) from h0 = 1
    store.set("seq_decoder.init.bias", &[1.0; 8]).unwrap();
    // down logit = 8 * h[0] - 1.5 (2.5, 0.5, -0.5); lift logit -10; end 0
    let mut w = vec![0.0; 8 * 5];
    w[2] = 8.0;
    store.set("seq_decoder.readout.weight", &w).unwrap();
    store.set("seq_decoder.readout.bias", &[0.0, 0.0, -1.5, -10.0, 0.0]).unwrap();
    let lat = Tensor::new(vec![1, 8], vec![0.0; 8]);
    let out = m.decoder.decode_sequence(&store, &lat, 10, DecodeMode::Autoregressive, None).unwrap();
    let states: Vec<PenState> = out[0].iter().map(|p| PenState::argmax(&p.pen_logits)).collect();
    assert_eq!(states, vec![PenState::Down, PenState::Down, PenState::End]);
}

#[test]
fn softmax_of_pen_logits_sums_to_one() {
    let m = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = m.init_params(1, DType::F32).unwrap();
    let lat = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).sin()).collect());
    for preds in m.decoder.decode_sequence(&store, &lat, 5, DecodeMode::Autoregressive, None).unwrap() {
        for p in preds {
            assert!((p.pen_probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

// ---- sequence encoders -----------------------------------------------

fn rnn_cfg(cell: CellKind, layers: usize) -> ModelConfig {
    ModelConfig {
        seq_encoder: SeqEncoderConfig::Rnn { cell, layers, hidden: 8 },
        ..tiny_cfg()
    }
}

fn encoders() -> Vec<(String, RasterizationModel, ParameterStore)> {
    let mut out = Vec::new();
    for (name, cfg) in [
        ("lstm", rnn_cfg(CellKind::Lstm, 2)),
        ("gru", rnn_cfg(CellKind::Gru, 1)),
        ("transformer", tiny_cfg()),
    ] {
        let m = RasterizationModel::new(&cfg, &tiny_raster(), 20).unwrap();
        let s = m.init_params(7, DType::F64).unwrap();
        out.push((name.to_string(), m, s));
    }
    out
}

#[test]
fn vector_encoders_ignore_padding_length() {
    for (name, m, store) in encoders() {
        let (r10, m10) = sample_rows(10);
        let (r20, m20) = sample_rows(20);
        let a = m.encoder.encode(&store, &[r10], &[m10]).unwrap();
        let b = m.encoder.encode(&store, &[r20], &[m20]).unwrap();
        assert_eq!(a.shape, vec![1, 8], "{name}");
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn batched_encoding_matches_single() {
    for (name, m, store) in encoders() {
        let (r1, m1) = sample_rows(8);
        let seq = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (1.0, 1.0)]]).unwrap();
        let p = seq.pad_or_truncate(8);
        let both = m.encoder.encode(&store, &[r1.clone(), p.rows()], &[m1.clone(), p.mask.clone()]).unwrap();
        let one = m.encoder.encode(&store, &[r1], &[m1]).unwrap();
        for (x, y) in both.row(0).iter().zip(&one.data) {
            assert!((x - y).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn masked_rows_are_inert() {
    for (name, m, store) in encoders() {
        let (mut rows, mask) = sample_rows(10);
        let a = m.encoder.encode(&store, &[rows.clone()], &[mask.clone()]).unwrap();
        rows[7] = [0.9, 0.1, 0.0, 1.0, 0.0];
        rows.swap(8, 9);
        let b = m.encoder.encode(&store, &[rows], &[mask]).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn rnn_single_point_is_one_update() {
    let cfg = rnn_cfg(CellKind::Gru, 1);
    let m = RasterizationModel::new(&cfg, &tiny_raster(), 4).unwrap();
    let store = m.init_params(3, DType::F64).unwrap();
    let row = [0.4, 0.6, 0.0, 0.0, 1.0];
    let lat = m.encoder.encode(&store, &[vec![row]], &[vec![true]]).unwrap();
    let SeqEncoder::Rnn(enc) = &m.encoder else { unreachable!() };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[row]));
    let s0 = enc.cells[0].zero_state(&mut tape, 1);
    let s1 = enc.cells[0].step(&mut tape, &store, x, s0);
    assert_eq!(&lat.data, &tape.value(s1.h()).data);
}

#[test]
fn encoders_are_deterministic_and_sized() {
    for (name, m, store) in encoders() {
        let (r, k) = sample_rows(6);
        let a = m.encoder.encode(&store, &[r.clone()], &[k.clone()]).unwrap();
        let b = m.encoder.encode(&store, &[r], &[k]).unwrap();
        assert_eq!(a, b, "{name}");
        assert_eq!(a.data.len(), m.encoder.output_dim());
    }
}

#[test]
fn encoder_errors() {
    for (_, m, store) in encoders() {
        let r = vec![[0.0; 5]; 3];
        assert!(matches!(
            m.encoder.encode(&store, &[r], &[vec![false; 3]]),
            Err(Error::EmptyMask)
        ));
    }
    let m = RasterizationModel::new(&tiny_cfg(), &tiny_raster(), 4).unwrap();
    let store = m.init_params(0, DType::F64).unwrap();
    let r = vec![[0.0; 5]; 5];
    assert!(matches!(
        m.encoder.encode(&store, &[r], &[vec![true; 5]]),
        Err(Error::SequenceTooLong { len: 5, max: 4 })
    ));
}

// ---- conv decoder ----------------------------------------------------

#[test]
fn conv_decoder_reaches_canvas_size() {
    let cfg = ModelConfig::default();
    let m = RasterizationModel::new(&cfg, &RasterConfig::default(), 8).unwrap();
    let store = m.init_params(0, DType::F32).unwrap();
    let out = m.decoder.decode(&store, &Tensor::full(&[1, 128], 0.1)).unwrap();
    assert_eq!(out.shape, vec![1, 1, 64, 64]);
    assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(out, m.decoder.decode(&store, &Tensor::full(&[1, 128], 0.1)).unwrap());
}

#[test]
fn zero_decoder_is_constant_half() {
    let m = RasterizationModel::new(&tiny_cfg(), &tiny_raster(), 4).unwrap();
    let mut store = m.init_params(0, DType::F64).unwrap();
    zero_prefix(&mut store, CONV_DECODER);
    let out = m.decoder.decode(&store, &Tensor::full(&[2, 8], 3.0)).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.5));
}

#[test]
fn rasterization_config_mismatch_rejected() {
    let r = RasterizationModel::new(&tiny_cfg(), &RasterConfig::square(16), 4);
    assert!(matches!(r, Err(Error::InvalidModelConfig(_))));
    let mut cfg = tiny_cfg();
    cfg.latent_dim = 6;
    assert!(VectorizationModel::new(&cfg, &tiny_raster()).is_err());
}

#[test]
fn outputs_finite_at_extreme_inputs() {
    let m = RasterizationModel::new(&tiny_cfg(), &tiny_raster(), 4).unwrap();
    let store = m.init_params(0, DType::F32).unwrap();
    let out = m.decoder.decode(&store, &Tensor::full(&[1, 8], 1e6)).unwrap();
    assert!(out.is_finite());
    let rows = vec![[1e6, -1e6, 1.0, 0.0, 0.0], [1e6, 1e6, 0.0, 0.0, 1.0]];
    assert!(m.encoder.encode(&store, &[rows], &[vec![true; 2]]).unwrap().is_finite());

    let v = VectorizationModel::new(&tiny_cfg(), &tiny_raster()).unwrap();
    let store = v.init_params(0, DType::F32).unwrap();
    let mut img = RasterImage::filled(8, 8, 1, 1e6);
    assert!(v.encoder.encode(&store, &img).unwrap().1.values.iter().all(|x| x.is_finite()));
    img.pixels.iter_mut().for_each(|p| *p = -1e6);
    assert!(v.encoder.encode(&store, &img).unwrap().1.values.iter().all(|x| x.is_finite()));
    let lat = Tensor::full(&[1, 8], 1e6);
    for p in &v.decoder.decode_sequence(&store, &lat, 4, DecodeMode::Autoregressive, None).unwrap()[0] {
        assert!(p.to_row().iter().all(|x| x.is_finite()));
    }
}

// ---- parameter counts ------------------------------------------------

#[test]
fn parameter_counts_match_closed_forms() {
    let dense = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    for cfg in [ModelConfig::default(), ModelConfig::tiny(), tiny_cfg()] {
        let raster = RasterConfig::square(cfg.conv_decoder.output_resolution());
        let v = VectorizationModel::new(&cfg, &raster).unwrap();
        let store = v.init_params(0, DType::F32).unwrap();
        let mut cin = 1;
        let mut enc = 0;
        for &w in &cfg.image_encoder.widths {
            enc += conv(cin, w, 3) + conv(w, w, 3) + conv(cin, w, 1);
            cin = w;
        }
        let (d, h) = (cfg.latent_dim, cfg.seq_decoder.hidden);
        let cell = match cfg.seq_decoder.cell {
            CellKind::Gru => 3 * h * (d + 5 + h) + 6 * h,
            CellKind::Lstm => 4 * h * (d + 5 + h) + 4 * h,
        };
        let dec = dense(d, h) + cell + dense(h, 5);
        assert_eq!(store.count(IMAGE_ENCODER), enc);
        assert_eq!(store.count(SEQ_DECODER), dec);
        assert_eq!(v.param_count(), enc + dec);

        let t_max = 12;
        let r = RasterizationModel::new(&cfg, &raster, t_max).unwrap();
        let store = r.init_params(0, DType::F32).unwrap();
        let se = match cfg.seq_encoder {
            SeqEncoderConfig::Rnn { cell, layers, hidden: h } => (0..layers)
                .map(|l| {
                    let i = if l == 0 { 5 } else { h };
                    match cell {
                        CellKind::Gru => 3 * h * (i + h) + 6 * h,
                        CellKind::Lstm => 4 * h * (i + h) + 4 * h,
                    }
                })
                .sum(),
            SeqEncoderConfig::Transformer {
                layers, dim, mlp_dim, ..
            } => {
                let block = 2 * dim + dense(dim, 3 * dim) + dense(dim, dim) + 2 * dim + dense(dim, mlp_dim) + dense(mlp_dim, dim);
                dense(5, dim) + dim + (t_max + 1) * dim + layers * block + 2 * dim
            }
        };
        let ch = &cfg.conv_decoder.channels;
        let s = cfg.conv_decoder.start_resolution;
        let mut cd = dense(d, ch[0] * s * s);
        for i in 0..ch.len() {
            cd += conv(ch[i], *ch.get(i + 1).unwrap_or(&1), 4);
        }
        assert_eq!(store.count(SEQ_ENCODER), se);
        assert_eq!(store.count(CONV_DECODER), cd);
        assert_eq!(r.param_count(), se + cd);
    }
}

// ---- gradient checks -------------------------------------------------

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;

/// Fixed random projection of `v` to a scalar.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let w = tape.constant(w);
    let p = tape.mul(v, w);
    tape.sum(p)
}

#[test]
fn image_encoder_gradients() {
    for pooling in [Pooling::Max, Pooling::Avg] {
        let mut cfg = tiny_cfg();
        cfg.image_encoder.pooling = pooling;
        let m = VectorizationModel::new(&cfg, &tiny_raster()).unwrap();
        let store = m.init_params(21, DType::F64).unwrap();
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(22), 1, 8, 8);
        let x = m.encoder.batch_tensor(&[&img]).unwrap();
        let rep = check_param_grads(&store, IMAGE_ENCODER, GRAD_STEP, |tape, s| {
            let xv = tape.constant(x.clone());
            let enc = m.encoder.forward(tape, s, xv).unwrap();
            probe(tape, enc.latent, 1)
        });
        assert!(rep.max_rel_error < GRAD_TOL, "{pooling:?}: {rep:?}");
        assert_eq!(rep.checked, m.encoder.param_count());
    }
}

#[test]
fn seq_decoder_gradients() {
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let mut cfg = tiny_cfg();
        cfg.seq_decoder.cell = cell;
        let m = VectorizationModel::new(&cfg, &tiny_raster()).unwrap();
        let store = m.init_params(31, DType::F64).unwrap();
        let (rows, _) = sample_rows(4);
        let lat = Tensor::new(vec![1, 8], (0..8).map(|i| (i as f64 * 0.7).cos()).collect());
        let rep = check_param_grads(&store, SEQ_DECODER, GRAD_STEP, |tape, s| {
            let l = tape.constant(lat.clone());
            let outs = m.decoder.teacher_forced(tape, s, l, std::slice::from_ref(&rows), 4).unwrap();
            let all = tape.concat_rows(&outs);
            probe(tape, all, 2)
        });
        assert!(rep.max_rel_error < GRAD_TOL, "{cell:?}: {rep:?}");
        assert_eq!(rep.checked, m.decoder.param_count());
    }
}

#[test]
fn seq_encoder_gradients() {
    for (name, m, store) in encoders() {
        let (r1, m1) = sample_rows(4);
        let seq = StrokeSequence::from_polylines(&[vec![(0.2, 0.3), (0.7, 0.9)]]).unwrap();
        let p = seq.pad_or_truncate(4);
        let rows = vec![r1, p.rows()];
        let masks = vec![m1, p.mask];
        let rep = check_param_grads(&store, SEQ_ENCODER, GRAD_STEP, |tape, s| {
            let enc = m.encoder.forward(tape, s, &rows, &masks).unwrap();
            probe(tape, enc.latent, 3)
        });
        assert!(rep.max_rel_error < GRAD_TOL, "{name}: {rep:?}");
    }
}

#[test]
fn conv_decoder_gradients() {
    let m = RasterizationModel::new(&tiny_cfg(), &tiny_raster(), 4).unwrap();
    let store = m.init_params(42, DType::F64).unwrap();
    let lat = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64 * 0.37).sin()).collect());
    let rep = check_param_grads(&store, CONV_DECODER, GRAD_STEP, |tape, s| {
        let l = tape.constant(lat.clone());
        let out = m.decoder.forward(tape, s, l).unwrap();
        probe(tape, out, 4)
    });
    assert!(rep.max_rel_error < GRAD_TOL, "{rep:?}");
    assert_eq!(rep.checked, m.decoder.param_count());
}

