use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use amilpath::bagging::{split_cohorts, Cohort, CohortSize, SplitConfig};
use amilpath::cli::{pipeline, resolve, Cli};
use amilpath::inference::{predict_slide, EmbeddedBag, PredictConfig};
use amilpath::ingest::AlnLabel;
use amilpath::interpret::{nucleus_morphometry, Mask, DENSITY, FEATURE_NAMES};
use amilpath::mil::{cross_entropy, MilConfig, MilModel, MilParams, ParamSet};
use amilpath::stats::{clopper_pearson, delong_compare, mann_whitney_u, roc_auc};
use amilpath::training::synth::SynthConfig;
use amilpath::training::{ScheduleConfig, WarmRestarts};
use clap::Parser;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{bootstrap_p, concordance_auc, enumerated_mw_p, paired_case, random_case, report};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, clinical: usize, hidden: usize) -> MilModel {
    let mut cfg = MilConfig::new(d, clinical, 2);
    cfg.attention_hidden = hidden;
    MilModel::new(cfg, rng).unwrap()
}

fn mil_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, clin) = (16, 4);
    let m = random_model(&mut rng, d, clin, 128);
    let (mut worst_sum, mut worst_perm) = (0.0f64, 0.0f64);
    for b in 0..200 {
        let n = rng.random_range(1..=64);
        let f = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
        let c: Vec<f64> = (0..clin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let fp = f.select(Axis(0), &order);
        let a = m.forward(f.view(), Some(&c)).unwrap();
        let p = m.forward(fp.view(), Some(&c)).unwrap();
        worst_sum = worst_sum.max((a.attention.weights.iter().sum::<f64>() - 1.0).abs());
        for (x, y) in a.probs.iter().zip(&p.probs) {
            worst_perm = worst_perm.max((x - y).abs());
        }
        let bag = |i: usize, features: Array2<f64>| EmbeddedBag {
            bag_id: format!("b{b}_{i}"),
            slide_id: format!("s{b}"),
            features,
            clinical: Some(c.clone()),
            label: None,
        };
        let cfg = PredictConfig::default();
        let s1 = predict_slide(&[bag(0, f.clone()), bag(1, f.clone() * 0.5)], &m, &cfg).unwrap();
        let s2 = predict_slide(&[bag(0, fp.clone()), bag(1, fp * 0.5)], &m, &cfg).unwrap();
        for (x, y) in s1.class_probs.iter().zip(&s2.class_probs) {
            worst_perm = worst_perm.max((x - y).abs());
        }
    }
    check(
        worst_sum <= 1e-6 && worst_perm <= 1e-5,
        format!("max |sum w - 1| {worst_sum:.1e}, max permutation change {worst_perm:.1e}"),
    )
}

fn bag_loss(m: &MilModel, f: &Array2<f64>, c: Option<&[f64]>, label: usize) -> f64 {
    cross_entropy(&m.forward(f.view(), c).unwrap().probs, label).unwrap()
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (clin, label) in [(0usize, 1usize), (3, 0)] {
        let m = random_model(&mut rng, 5, clin, 8);
        let f = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.5..1.5));
        let c: Vec<f64> = (0..clin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = (clin > 0).then_some(c.as_slice());
        let g = m.loss_and_grad(f.view(), c, label, 1.0).unwrap();
        for t in 0..MilParams::NAMES.len() {
            for (i, &a) in g.params.tensors()[t].iter().enumerate() {
                let mut plus = m.clone();
                plus.params_mut().tensors_mut()[t][i] += eps;
                let mut minus = m.clone();
                minus.params_mut().tensors_mut()[t][i] -= eps;
                let num =
                    (bag_loss(&plus, &f, c, label) - bag_loss(&minus, &f, c, label)) / (2.0 * eps);
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
    }
    check(worst <= 1e-3, format!("max relative error {worst:.2e}"))
}

fn stats_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for k in 0..100 {
        let (s, l) = random_case(&mut rng, 50);
        if roc_auc(&s, &l).unwrap() != concordance_auc(&s, &l) {
            return Err(format!("AUC set {k} differs from pair enumeration"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let (a, b, y) = paired_case(&mut rng, 20, 20);
        let d = delong_compare(&a, &b, &y).unwrap();
        worst = worst.max((d.p_value - bootstrap_p(&a, &b, &y, 20_000, 1000 + k)).abs());
    }
    if worst > 0.02 {
        return Err(format!("DeLong vs bootstrap max |dp| {worst:.4}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for nx in 1..=8 {
        for ny in 1..=8 {
            let x: Vec<f64> = (0..nx)
                .map(|_| f64::from(rng.random_range(0..6u8)))
                .collect();
            let y: Vec<f64> = (0..ny)
                .map(|_| f64::from(rng.random_range(1..8u8)))
                .collect();
            let mw = mann_whitney_u(&x, &y).unwrap();
            let want = if mw.all_tied {
                1.0
            } else {
                enumerated_mw_p(&x, &y)
            };
            if !mw.exact || mw.p_value != want {
                return Err(format!(
                    "Mann-Whitney nx {nx} ny {ny}: {} vs {want}",
                    mw.p_value
                ));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let hits = (0..10_000)
        .filter(|_| {
            let k = (0..30).filter(|_| rng.random_bool(0.3)).count() as u64;
            let (lo, hi) = clopper_pearson(k, 30, 0.05).unwrap();
            lo <= 0.3 && 0.3 <= hi
        })
        .count();
    let cov = hits as f64 / 10_000.0;
    check(
        cov >= 0.945,
        format!(
            "AUC 100/100 exact, DeLong max |dp| {worst:.4}, MW n<=8 exact, CP coverage {cov:.4}"
        ),
    )
}

fn schedule() -> Outcome {
    let cfg = ScheduleConfig {
        t_0: 3,
        t_mult: 2,
        lr_min: 1e-5,
    };
    let lr_max = 1e-3;
    let mut s = WarmRestarts::new(lr_max, &cfg).unwrap();
    let steps = [
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
    for (t_cur, t_i) in steps {
        let want = cfg.lr_min
            + 0.5
                * (lr_max - cfg.lr_min)
                * (1.0 + (std::f64::consts::PI * t_cur as f64 / t_i as f64).cos());
        if s.lr() != want {
            return Err(format!("T_cur {t_cur} T_i {t_i}: {} vs {want}", s.lr()));
        }
        s.step();
    }
    check(
        s.position() == (0, 12),
        "9 epochs over cycles of 3 and 6 match exactly".into(),
    )
}

fn write_config(w: &Path, seed: u64) -> String {
    let d = w.join("synth");
    let text = format!(
        "seed = {seed}\n[paths]\nmanifest = {:?}\nclinical = {:?}\nannotations = {:?}\nworkdir = {:?}\n",
        d.join("manifest.csv"),
        d.join("clinical.csv"),
        d.join("annotations"),
        w
    );
    let path = w.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn config_for(toml: &str, command: &[&str]) -> amilpath::cli::config::RunConfig {
    let argv = ["amilpath", "--config", toml]
        .into_iter()
        .chain(command.iter().copied());
    resolve(&Cli::try_parse_from(argv).unwrap()).unwrap()
}

fn synth_corpus(
    w: &Path,
    seed: u64,
    density_gap: f64,
    elongation_gap: f64,
    age_gap: f64,
) -> String {
    let cfg = SynthConfig {
        n_slides: 60,
        seed,
        density_gap,
        elongation_gap,
        age_gap,
        ..SynthConfig::default()
    };
    pipeline::synth(&w.join("synth"), &cfg).unwrap();
    let toml = write_config(w, seed);
    pipeline::tile(&config_for(&toml, &["tile"])).unwrap();
    pipeline::build_bag_set(&config_for(&toml, &["build-bags"])).unwrap();
    toml
}

fn end_to_end_auc(seed: u64, null: bool) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let gap = if null { 0.0 } else { 1.0 };
    let toml = synth_corpus(dir.path(), seed, gap, gap, gap);
    pipeline::train_model(&config_for(
        &toml,
        &["train", "--lr", "1e-3", "--epochs", "30"],
    ))
    .unwrap();
    let test = Cohort::Test;
    pipeline::predict(&config_for(&toml, &["predict"]), test).unwrap();
    pipeline::evaluate(&config_for(&toml, &["evaluate"]), test, false)
        .unwrap()
        .report
        .auc
        .auc
}

fn synthetic_end_to_end() -> Outcome {
    let planted = end_to_end_auc(1, false);
    let null: Vec<f64> = (1..=5).map(|s| end_to_end_auc(s, true)).collect();
    let mean = null.iter().sum::<f64>() / 5.0;
    check(
        planted >= 0.85 && (0.4..=0.6).contains(&mean),
        format!("planted test AUC {planted:.3}; null AUCs {null:.3?} mean {mean:.3}"),
    )
}

fn morphometry() -> Outcome {
    let r = 20.0;
    let disk = Mask::rasterize(44, 44, |x, y| (x - 22.0).hypot(y - 22.0) <= r);
    let circ = nucleus_morphometry(&disk).unwrap().circularity;
    let square = Mask::rasterize(34, 34, |x, y| {
        (2.0..32.0).contains(&x) && (2.0..32.0).contains(&y)
    });
    let sq = nucleus_morphometry(&square).unwrap();
    let mut worst_angle = 0.0f64;
    for deg in [-75.0f64, -40.0, 0.0, 30.0, 60.0] {
        let (s, c) = deg.to_radians().sin_cos();
        let e = Mask::rasterize(66, 66, |x, y| {
            let (dx, dy) = (x - 33.0, y - 33.0);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            (u / 30.0).powi(2) + (v / 10.0).powi(2) <= 1.0
        });
        let got = nucleus_morphometry(&e).unwrap().orientation.unwrap();
        worst_angle = worst_angle.max((got - deg).abs());
    }
    let pi4 = std::f64::consts::FRAC_PI_4;
    check(
        (0.95..=1.02).contains(&circ)
            && (sq.rectangularity - 1.0).abs() <= 0.02
            && (sq.circularity - pi4).abs() <= 0.03
            && worst_angle <= 2.0,
        format!(
            "disk circularity {circ:.4}; square rectangularity {:.4} circularity {:.4}; ellipse max angle error {worst_angle:.2} deg",
            sq.rectangularity, sq.circularity
        ),
    )
}

fn importance(seed: u64, null: bool) -> (String, f64) {
    let dir = tempfile::tempdir().unwrap();
    let toml = if null {
        synth_corpus(dir.path(), seed, 0.0, 0.0, 0.0)
    } else {
        synth_corpus(dir.path(), seed, 1.0, 0.0, 0.0)
    };
    pipeline::nuclei(&config_for(&toml, &["nuclei"])).unwrap();
    let r = pipeline::feature_importance(&config_for(&toml, &["feature-importance"])).unwrap();
    let top = &r.features[r.ranking()[0]];
    let min_p = r
        .features
        .iter()
        .map(|f| f.p_value)
        .fold(f64::INFINITY, f64::min);
    (top.feature.clone(), min_p)
}

fn feature_importance() -> Outcome {
    let planted: Vec<String> = (1..=5).map(|s| importance(s, false).0).collect();
    let null: Vec<f64> = (1..=5).map(|s| importance(s, true).1).collect();
    let top = planted
        .iter()
        .filter(|f| f.as_str() == FEATURE_NAMES[DENSITY])
        .count();
    let clean = null.iter().filter(|&&p| p > 0.05).count();
    check(
        top >= 4 && clean >= 4,
        format!("density top-1 in {top}/5 ({planted:?}); null all p > 0.05 in {clean}/5 (min p {null:.3?})"),
    )
}

fn split_fixture() -> Outcome {
    let slides: Vec<(String, AlnLabel)> = (0..1058)
        .map(|i| {
            (
                format!("slide{i:04}"),
                if i < 403 { AlnLabel::Low } else { AlnLabel::N0 },
            )
        })
        .collect();
    let cfg = SplitConfig {
        test: CohortSize::Count(218),
        val_of_train: CohortSize::Ratio(0.25),
        seed: 3,
        stratify: true,
    };
    let s = split_cohorts(&slides, &cfg).unwrap();
    let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    let sizes = (
        s.train.len() + s.val.len(),
        s.test.len(),
        s.train.len(),
        s.val.len(),
    );
    check(
        sizes == (840, 218, 630, 210) && all.len() == 1058,
        format!("{}/{} then {}/{}", sizes.0, sizes.1, sizes.2, sizes.3),
    )
}

fn report_layout() -> Outcome {
    let want = "I-T & 0.831 [0.775, 0.878] & 75.69 [69.44, 81.23] & 89.29 [80.63, 94.98] & 67.16 [58.53, 75.03] & 63.03 [56.96, 68.71] & 90.91 [84.21, 94.94]";
    let got = report("I-T", (75, 9, 90, 44), (0.831, 0.775, 0.878)).row("I-T");
    check(got == want, got)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 MIL invariants", mil_invariants),
        ("2 gradient check", gradient_check),
        ("3 statistics oracles", stats_oracles),
        ("4 warm-restart schedule", schedule),
        ("5 synthetic end-to-end", synthetic_end_to_end),
        ("6 morphometry", morphometry),
        ("7 feature importance", feature_importance),
        ("8 split fixture", split_fixture),
        ("9 report formatting", report_layout),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} ({secs:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
