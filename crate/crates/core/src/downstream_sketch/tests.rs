use super::*;
use crate::data::{make_synthetic_sketches, SyntheticSketchSpec, SKETCH_CLASSES};
use crate::models::ModelConfig;

fn toy_table(points: &[(f64, usize)]) -> FeatureTable {
    FeatureTable {
        ids: (0..points.len()).map(|i| format!("t{i:03}")).collect(),
        features: Tensor::new(vec![points.len(), 1], points.iter().map(|p| p.0).collect()),
        labels: points.iter().map(|p| p.1).collect(),
        classes: vec!["neg".into(), "pos".into()],
        depth_tag: "final".into(),
    }
}

fn classes(n: usize) -> Vec<String> {
    SKETCH_CLASSES[..n].iter().map(|s| s.to_string()).collect()
}

fn corpus(per_class: usize, seed: u64) -> Vec<LabeledSample> {
    let spec = SyntheticSketchSpec::new(&SKETCH_CLASSES[..5], per_class, 0.01, seed);
    make_synthetic_sketches(&spec, &RasterConfig::square(32)).unwrap().samples
}

fn tiny(task: Task) -> PretrainConfig {
    let mut cfg = PretrainConfig::new(task);
    cfg.model = ModelConfig::tiny();
    cfg.raster = RasterConfig::square(32);
    cfg.t_max = 48;
    cfg
}

fn item(id: &str, label: usize, e: &[f64]) -> RetrievalItem {
    RetrievalItem {
        id: id.into(),
        label,
        embedding: e.to_vec(),
    }
}

#[test]
fn depth_parsing() {
    assert_eq!("final".parse::<Depth>().unwrap(), Depth::Final);
    assert_eq!("2".parse::<Depth>().unwrap(), Depth::Block(2));
    assert_eq!("block3".parse::<Depth>().unwrap(), Depth::Block(3));
    assert!(matches!("0".parse::<Depth>(), Err(Error::UnknownDepth(_))));
    assert!(matches!("deep".parse::<Depth>(), Err(Error::UnknownDepth(_))));
    assert_eq!(serde_json::to_string(&Depth::Block(2)).unwrap(), "\"block2\"");
}

#[test]
fn features_have_expected_shape_and_are_deterministic() {
    let data = corpus(2, 1);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    for task in [Task::Vectorization, Task::Rasterization] {
        let cfg = tiny(task);
        let enc = SketchEncoder::from_config(&cfg).unwrap();
        let store = SketchEncoder::random_params(&cfg).unwrap();
        let a = extract_features(&enc, &store, &refs, Depth::Final, &classes(5)).unwrap();
        assert_eq!(a.features.shape, vec![10, 32]);
        assert_eq!(a, extract_features(&enc, &store, &refs, Depth::Final, &classes(5)).unwrap());
        for d in 1..=enc.depth() {
            let t = extract_features(&enc, &store, &refs, Depth::Block(d), &classes(5)).unwrap();
            assert_eq!(t.dim(), enc.feature_dim(Depth::Block(d)).unwrap());
            assert_eq!(t.depth_tag, format!("block{d}"));
        }
        assert!(matches!(
            extract_features(&enc, &store, &refs, Depth::Block(enc.depth() + 1), &classes(5)),
            Err(Error::UnknownDepth(_))
        ));
    }
    // max pooling: the last block's pooled output is the final latent
    let cfg = tiny(Task::Vectorization);
    let enc = SketchEncoder::from_config(&cfg).unwrap();
    let store = SketchEncoder::random_params(&cfg).unwrap();
    let last = extract_features(&enc, &store, &refs, Depth::Block(3), &classes(5)).unwrap();
    let fin = extract_features(&enc, &store, &refs, Depth::Final, &classes(5)).unwrap();
    assert_eq!(last.features, fin.features);
}

#[test]
fn modality_mismatch_detected() {
    let data = corpus(1, 2);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let mut cfg = tiny(Task::Rasterization);
    cfg.epochs = 1;
    cfg.deterministic = true;
    let dir = tempfile::tempdir().unwrap();
    let run = crate::pretrain::pretrain(&refs, &cfg, dir.path(), None).unwrap();
    let p = Pretrained::load(&run.checkpoint).unwrap();
    assert!(matches!(
        extract_pretrained_features(&p, Modality::Image, &refs, Depth::Final, &classes(5)),
        Err(Error::ModalityMismatch(_))
    ));
    let t = extract_pretrained_features(&p, Modality::Vector, &refs, Depth::Final, &classes(5)).unwrap();
    assert_eq!(t.len(), 5);
}

#[test]
fn probe_separates_toy_classes() {
    let t = toy_table(&[(-1.0, 0), (-1.0, 0), (1.0, 1), (1.0, 1)]);
    let (probe, curve) = train_linear_probe(&t, &ProbeConfig::default()).unwrap();
    assert_eq!(curve.len(), 100);
    assert!(curve.last().unwrap() < &curve[0]);
    let r = eval_topk(&probe, &t, &[1, 2]).unwrap();
    assert_eq!(r.at(1), Some(1.0));
    assert_eq!(r.at(2), Some(1.0));
    assert_eq!(r.per_class_top1, vec![Some(1.0), Some(1.0)]);
}

#[test]
fn ties_rank_lower_class_first() {
    assert_eq!(rank_classes(&[0.5, 0.9, 0.9, 0.1]), vec![1, 2, 0, 3]);
    let t = toy_table(&[(3.0, 0), (3.0, 1)]);
    let untrained = LinearProbe::new(1, &t.classes, 1.0).unwrap();
    let r = eval_topk(&untrained, &t, &[1]).unwrap();
    assert_eq!(r.accuracy, vec![0.5]);
    assert_eq!(r.per_class_top1, vec![Some(1.0), Some(0.0)]);
}

#[test]
fn probe_rejects_other_class_universe() {
    let t = toy_table(&[(-1.0, 0), (1.0, 1)]);
    let (probe, _) = train_linear_probe(&t, &ProbeConfig { epochs: 3, ..Default::default() }).unwrap();
    let mut other = t.clone();
    other.classes = vec!["a".into(), "b".into()];
    assert!(matches!(eval_topk(&probe, &other, &[1]), Err(Error::ClassMismatch(_))));
    assert!(matches!(eval_topk(&probe, &t.duplicated(), &[1]), Err(Error::ClassMismatch(_))));
}

#[test]
fn duplicated_features_follow_the_same_trajectory() {
    let data = corpus(4, 3);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let cfg = tiny(Task::Vectorization);
    let enc = SketchEncoder::from_config(&cfg).unwrap();
    let store = SketchEncoder::random_params(&cfg).unwrap();
    let t = extract_features(&enc, &store, &refs, Depth::Final, &classes(5)).unwrap();
    let base = ProbeConfig {
        epochs: 30,
        ..Default::default()
    };
    let (p1, c1) = train_linear_probe(&t, &base).unwrap();
    let halved = ProbeConfig {
        lr: base.lr / 2.0,
        bias_lr_multiplier: 2.0,
        ..base
    };
    let d = t.duplicated();
    let (p2, c2) = train_linear_probe(&d, &halved).unwrap();
    // identical up to the summation order of the duplicated dot products
    for (a, b) in c1.iter().zip(&c2) {
        assert!((a - b).abs() <= 1e-7 * a.abs(), "{a} vs {b}");
    }
    let (l1, l2) = (p1.logits(&t.features), p2.logits(&d.features));
    for (a, b) in l1.data.iter().zip(&l2.data) {
        assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()));
    }
    assert_eq!(
        eval_topk(&p1, &t, &[1, 5]).unwrap().accuracy,
        eval_topk(&p2, &d, &[1, 5]).unwrap().accuracy
    );
}

#[test]
fn all_classes_is_always_a_hit() {
    let data = corpus(2, 4);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let cfg = tiny(Task::Rasterization);
    let enc = SketchEncoder::from_config(&cfg).unwrap();
    let store = SketchEncoder::random_params(&cfg).unwrap();
    let t = extract_features(&enc, &store, &refs, Depth::Final, &classes(5)).unwrap();
    let (p, _) = train_linear_probe(&t, &ProbeConfig { epochs: 5, ..Default::default() }).unwrap();
    assert_eq!(eval_topk(&p, &t, &[5]).unwrap().accuracy, vec![1.0]);
}

#[test]
fn hand_built_retrieval_case() {
    // query class 0; gallery ranked A B A B B ... by distance
    let q = item("q", 0, &[0.0]);
    let labels = [0, 1, 0, 1, 1, 1, 1, 1, 1, 1];
    let g: Vec<RetrievalItem> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| item(&format!("g{i:02}"), l, &[(i + 1) as f64]))
        .collect();
    let r = eval_retrieval(&[q.clone()], &g, DistanceMetric::Euclidean).unwrap();
    assert_eq!(r.acc_at_top1, 1.0);
    assert!((r.map_at_top10 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(r.ranked[0][..3], ["g00", "g01", "g02"]);

    let same: Vec<RetrievalItem> = (0..4).map(|i| item(&format!("s{i}"), 0, &[i as f64])).collect();
    let r = eval_retrieval(&[q.clone()], &same, DistanceMetric::Euclidean).unwrap();
    assert_eq!((r.acc_at_top1, r.map_at_top10), (1.0, 1.0));

    let other: Vec<RetrievalItem> = (0..4).map(|i| item(&format!("o{i}"), 1, &[i as f64])).collect();
    let r = eval_retrieval(&[q], &other, DistanceMetric::Euclidean).unwrap();
    assert_eq!((r.acc_at_top1, r.map_at_top10), (0.0, 0.0));
}

#[test]
fn retrieval_excludes_query_and_breaks_ties_by_id() {
    let q = item("b", 0, &[0.0, 0.0]);
    let g = vec![item("z", 1, &[1.0, 0.0]), item("a", 0, &[0.0, 1.0]), item("b", 0, &[0.0, 0.0])];
    let r = eval_retrieval(&[q.clone()], &g, DistanceMetric::Euclidean).unwrap();
    assert_eq!(r.ranked[0], vec!["a", "z"]);
    assert_eq!(r.acc_at_top1, 1.0);
    let without = eval_retrieval(&[q.clone()], &g[..2], DistanceMetric::Euclidean).unwrap();
    assert_eq!(r, without);
    assert!(matches!(eval_retrieval(&[q.clone()], &[], DistanceMetric::Euclidean), Err(Error::EmptyGallery)));
    assert!(matches!(
        eval_retrieval(&[q.clone()], &[q], DistanceMetric::Euclidean),
        Err(Error::EmptyGallery)
    ));
}

#[test]
fn cosine_distance_ignores_scale() {
    let m = DistanceMetric::Cosine;
    assert!((m.distance(&[1.0, 0.0], &[5.0, 0.0])).abs() < 1e-15);
    assert!((m.distance(&[1.0, 0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
    assert_eq!(m.distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
}

#[test]
fn ap_truncates_at_cutoff() {
    let mut rel = vec![false; 12];
    rel[10] = true;
    assert_eq!(average_precision_at(&rel, 10), 0.0);
    rel[9] = true;
    assert!((average_precision_at(&rel, 10) - 0.1).abs() < 1e-15);
}

#[test]
fn retrieval_head_shapes_and_errors() {
    assert_eq!(RetrievalHeadConfig::default().embed_dim, 256);
    let single = toy_table(&[(-1.0, 0), (1.0, 1)]);
    assert!(matches!(
        train_retrieval_head(&single, &RetrievalHeadConfig::default()),
        Err(Error::InsufficientClassSamples(_))
    ));
}

#[test]
fn retrieval_head_pulls_classes_apart() {
    let pts: Vec<(f64, usize)> = (0..12)
        .map(|i| {
            let l = i % 2;
            (if l == 0 { -1.0 } else { 1.0 } + 0.05 * i as f64, l)
        })
        .collect();
    let t = toy_table(&pts);
    let cfg = RetrievalHeadConfig {
        embed_dim: 16,
        epochs: 40,
        lr: 1e-2,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let (head, curve) = train_retrieval_head(&t, &cfg).unwrap();
    assert!(curve.last().unwrap() < &curve[0]);
    let items = head.items(&t);
    assert_eq!(items[0].embedding.len(), 16);
    let (intra, inter) = class_distance_means(&items, DistanceMetric::Euclidean);
    assert!(intra < inter, "intra {intra} inter {inter}");
    let r = eval_retrieval(&items, &items, DistanceMetric::Euclidean).unwrap();
    assert_eq!(r.acc_at_top1, 1.0);
}

#[test]
fn stratified_subset_arithmetic() {
    let labels: Vec<usize> = (0..500).map(|i| i / 100).collect();
    let s = stratified_subset(&labels, 5, 0.1, 9).unwrap();
    assert_eq!(s.len(), 50);
    for c in 0..5 {
        assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 10);
    }
    assert_eq!(s, stratified_subset(&labels, 5, 0.1, 9).unwrap());
    assert_ne!(s, stratified_subset(&labels, 5, 0.1, 10).unwrap());
    assert_eq!(stratified_subset(&labels, 5, 1.0, 0).unwrap(), (0..500).collect::<Vec<_>>());
    assert!(matches!(
        stratified_subset(&labels, 5, 0.005, 0),
        Err(Error::FractionTooSmall { .. })
    ));
    // one per class even when rounding gives zero
    let s = stratified_subset(&labels, 5, 0.01, 0).unwrap();
    assert_eq!(s.len(), 5);
}

#[test]
fn fully_frozen_finetune_equals_probe_path() {
    let data = corpus(10, 5);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let train: Vec<&LabeledSample> = refs.iter().enumerate().filter(|(i, _)| i % 5 != 0).map(|(_, s)| *s).collect();
    let test: Vec<&LabeledSample> = refs.iter().enumerate().filter(|(i, _)| i % 5 == 0).map(|(_, s)| *s).collect();
    for task in [Task::Vectorization, Task::Rasterization] {
        let cfg = tiny(task);
        let enc = SketchEncoder::from_config(&cfg).unwrap();
        let store = SketchEncoder::random_params(&cfg).unwrap();
        let ft = FinetuneConfig {
            freeze_depth: enc.depth(),
            epochs: 20,
            lr: 1e-2,
            seed: 1,
            ..FinetuneConfig::new(0.5)
        };
        let (report, tuned) = finetune(&enc, &store, &train, &test, &classes(5), &ft).unwrap();
        assert_eq!(report.labeled, 20);
        assert_eq!(report.labeled_per_class, vec![4; 5]);
        for (name, p) in store.iter() {
            assert_eq!(&tuned.get(name).unwrap().data, &p.data, "{name} moved while frozen");
        }

        let picked = stratified_subset(
            &train.iter().map(|s| s.label.unwrap()).collect::<Vec<_>>(),
            5,
            0.5,
            1,
        )
        .unwrap();
        let sub: Vec<&LabeledSample> = picked.iter().map(|&i| train[i]).collect();
        let tt = extract_features(&enc, &store, &sub, Depth::Final, &classes(5)).unwrap();
        let (probe, curve) = train_linear_probe(&tt, &ProbeConfig { epochs: 20, lr: 1e-2, bias_lr_multiplier: 1.0 }).unwrap();
        let et = extract_features(&enc, &store, &test, Depth::Final, &classes(5)).unwrap();
        assert_eq!(report.loss_curve, curve);
        assert_eq!(report.test, eval_topk(&probe, &et, &[1, 5]).unwrap());
    }
}

#[test]
fn partial_freeze_moves_only_upper_stages() {
    let data = corpus(6, 6);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let cfg = tiny(Task::Vectorization);
    let enc = SketchEncoder::from_config(&cfg).unwrap();
    let store = SketchEncoder::random_params(&cfg).unwrap();
    let ft = FinetuneConfig {
        freeze_depth: 1,
        epochs: 2,
        head: HeadKind::Retrieval,
        batch_size: Some(8),
        retrieval: RetrievalHeadConfig {
            embed_dim: 8,
            ..Default::default()
        },
        ..FinetuneConfig::new(1.0)
    };
    let (report, tuned) = finetune(&enc, &store, &refs, &refs, &classes(5), &ft).unwrap();
    assert!(report.retrieval.is_some());
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with("image_encoder.")) {
        let moved = tuned.get(name).unwrap().data != p.data;
        assert_eq!(moved, !name.starts_with("image_encoder.block0."), "{name}");
    }
    let too_deep = FinetuneConfig {
        freeze_depth: 4,
        ..ft
    };
    assert!(matches!(
        finetune(&enc, &store, &refs, &refs, &classes(5), &too_deep),
        Err(Error::UnknownDepth(_))
    ));
}
