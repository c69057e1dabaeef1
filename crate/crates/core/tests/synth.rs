use std::collections::VecDeque;

use amilpath::ingest::load_manifest;
use amilpath::training::synth::{generate_synthetic_corpus, SynthConfig, NUCLEUS};

/// 8-connected components of exactly nucleus-coloured pixels.
fn components(img: &image::RgbImage) -> usize {
    let (w, h) = img.dimensions();
    let on = |x: u32, y: u32| img.get_pixel(x, y).0 == NUCLEUS;
    let mut seen = vec![false; (w * h) as usize];
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if seen[(y * w + x) as usize] || !on(x, y) {
                continue;
            }
            count += 1;
            seen[(y * w + x) as usize] = true;
            let mut queue = VecDeque::from([(x, y)]);
            while let Some((cx, cy)) = queue.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (i64::from(cx) + dx, i64::from(cy) + dy);
                        if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let k = (ny * w + nx) as usize;
                        if !seen[k] && on(nx, ny) {
                            seen[k] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
        }
    }
    count
}

#[test]
fn corpus_layout_and_blob_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_slides: 20,
        seed: 7,
        slide_size: 512,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic_corpus(dir.path(), &cfg).unwrap();
    let images: Vec<_> = std::fs::read_dir(dir.path().join("images"))
        .unwrap()
        .collect();
    let annotations: Vec<_> = std::fs::read_dir(&corpus.annotations).unwrap().collect();
    assert_eq!(images.len(), 20);
    assert_eq!(annotations.len(), 20);
    assert!(corpus.clinical.exists() && corpus.ground_truth.exists());
    let recs = load_manifest(
        &corpus.manifest,
        &corpus.annotations,
        Some(&corpus.clinical),
    )
    .unwrap();
    assert_eq!(recs.len(), 20);
    assert_eq!(
        recs.iter()
            .filter(|r| r.label.unwrap().is_positive())
            .count(),
        8
    );
    for t in &corpus.truth.slides {
        let want = (t.density * 512.0 * 512.0 / 65536.0).round() as usize;
        assert_eq!(t.n_blobs, want);
        let img = image::open(
            dir.path()
                .join("images")
                .join(format!("{}.png", t.slide_id)),
        )
        .unwrap()
        .to_rgb8();
        assert_eq!(components(&img), want, "{}", t.slide_id);
    }
}

#[test]
fn same_seed_same_corpus() {
    let cfg = SynthConfig {
        n_slides: 10,
        seed: 3,
        slide_size: 256,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = generate_synthetic_corpus(a.path(), &cfg).unwrap().truth;
    let tb = generate_synthetic_corpus(b.path(), &cfg).unwrap().truth;
    assert_eq!(
        serde_json::to_string(&ta).unwrap(),
        serde_json::to_string(&tb).unwrap()
    );
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("clinical.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}
