use amilpath::inference::{predict_slide, Aggregation, EmbeddedBag, PredictConfig};
use amilpath::ingest::AlnLabel;
use amilpath::mil::{Checkpoint, MilConfig, MilModel};
use amilpath::training::{train, ScheduleConfig, TrainConfig, WarmRestarts};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(d: usize, clinical: usize, seed: u64) -> MilModel {
    let mut cfg = MilConfig::new(d, clinical, 2);
    cfg.attention_hidden = 16;
    MilModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bag(
    rng: &mut ChaCha8Rng,
    slide: &str,
    i: usize,
    d: usize,
    shift: f64,
    label: Option<AlnLabel>,
) -> EmbeddedBag {
    let n = rng.random_range(3..12);
    EmbeddedBag {
        bag_id: format!("{slide}_b{i}"),
        slide_id: slide.into(),
        features: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0) + shift),
        clinical: None,
        label,
    }
}

#[test]
fn median_matches_sort_and_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(4, 0, 9);
    let bags: Vec<EmbeddedBag> = (0..7)
        .map(|i| bag(&mut rng, "s", i, 4, 0.0, None))
        .collect();
    let cfg = PredictConfig {
        aggregation: Aggregation::Median,
        threshold: 0.5,
        merge_logits: false,
    };
    let pred = predict_slide(&bags, &m, &cfg).unwrap();
    let raw: Vec<f64> = (0..2)
        .map(|c| {
            let mut col: Vec<f64> = bags
                .iter()
                .map(|b| m.forward(b.features.view(), None).unwrap().probs[c])
                .collect();
            col.sort_by(f64::total_cmp);
            col[3]
        })
        .collect();
    let s: f64 = raw.iter().sum();
    for (got, want) in pred.class_probs.iter().zip(&raw) {
        assert!((got - want / s).abs() < 1e-12);
    }
    assert_eq!(pred.n_bags(), 7);
    assert_eq!(pred.predicted, usize::from(pred.class_probs[1] >= 0.5));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = model(6, 3, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::new("toy", m.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.embedder, "toy");
    assert_eq!(back.model, m);
    for i in 0..10 {
        let b = bag(&mut rng, "s", i, 6, 0.0, None);
        let clin: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = m.forward(b.features.view(), Some(&clin)).unwrap();
        let c = back.model.forward(b.features.view(), Some(&clin)).unwrap();
        assert_eq!(a.probs, c.probs);
        assert_eq!(a.attention.weights, c.attention.weights);
    }
}

#[test]
fn warm_restarts_follow_closed_form() {
    let cfg = ScheduleConfig {
        t_0: 3,
        t_mult: 2,
        lr_min: 1e-5,
    };
    let lr_max = 1e-3;
    let mut s = WarmRestarts::new(lr_max, &cfg).unwrap();
    // cycles of length 3 then 6
    let positions = [
        (0, 3),
        (1, 3),
        (2, 3),
        (0, 6),
        (1, 6),
        (2, 6),
        (3, 6),
        (4, 6),
        (5, 6),
    ];
    for (t_cur, t_i) in positions {
        assert_eq!(s.position(), (t_cur, t_i));
        let want = cfg.lr_min
            + 0.5
                * (lr_max - cfg.lr_min)
                * (1.0 + (std::f64::consts::PI * t_cur as f64 / t_i as f64).cos());
        assert!((s.lr() - want).abs() < 1e-15);
        s.step();
    }
    assert_eq!(s.position(), (0, 12));
    assert!((s.lr() - lr_max).abs() < 1e-15);
}

#[test]
fn separable_bags_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cohort = |tag: &str, n: usize| -> Vec<EmbeddedBag> {
        (0..n)
            .flat_map(|s| {
                let pos = s % 2 == 1;
                let label = if pos { AlnLabel::Low } else { AlnLabel::N0 };
                let shift = if pos { 0.8 } else { -0.8 };
                let slide = format!("{tag}{s}");
                (0..3)
                    .map(|i| bag(&mut rng, &slide, i, 4, shift, Some(label)))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let train_bags = cohort("t", 20);
    let val_bags = cohort("v", 10);
    let cfg = TrainConfig {
        lr_max: 1e-2,
        epochs: 15,
        ..TrainConfig::default()
    };
    let out = train(&train_bags, &val_bags, model(4, 0, 1), &cfg).unwrap();
    assert_eq!(out.history.len(), 15);
    let first = out.history[0].train_loss;
    let last = out.history[14].train_loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.history[out.best_epoch.unwrap() - 1].val_auc > 0.95);
}
