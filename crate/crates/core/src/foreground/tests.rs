use super::*;
use crate::gateway::{image_seed, StubBackend};
use crate::prompt::CaptionSource;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> SegmentParams {
    SegmentParams {
        color_threshold: 40.0,
        min_area_fraction: 0.001,
    }
}

fn stub_gateway(w: u32, h: u32) -> Gateway {
    Gateway::stub(StubBackend::default(), (w, h), 4)
}

fn fg_prompt(label: &str) -> String {
    format!("a photo of {label} in pure background")
}

/// Exhaustive border-ring histogram, independent of the bucketing code path.
fn border_mode_oracle(image: &RgbImage) -> [u8; 3] {
    let (w, h) = image.dimensions();
    let mut hist: std::collections::BTreeMap<(u8, u8, u8), Vec<[u8; 3]>> = Default::default();
    for y in 0..h {
        for x in 0..w {
            if x < 2 || y < 2 || x >= w - 2 || y >= h - 2 {
                let p = image.get_pixel(x, y).0;
                hist.entry((p[0] / 16, p[1] / 16, p[2] / 16)).or_default().push(p);
            }
        }
    }
    let max = hist.values().map(Vec::len).max().unwrap();
    let members = hist.values().find(|v| v.len() == max).unwrap();
    let n = members.len() as f64;
    [0, 1, 2].map(|c| (members.iter().map(|p| p[c] as f64).sum::<f64>() / n).round() as u8)
}

#[test]
fn uniform_image_background() {
    let img = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
    assert_eq!(estimate_background_color(&img), [255, 255, 255]);
}

#[test]
fn border_ring_beats_centre() {
    let img = RgbImage::from_fn(20, 20, |x, y| {
        if (4..16).contains(&x) && (4..16).contains(&y) {
            Rgb([220, 20, 20])
        } else {
            Rgb([250, 250, 250])
        }
    });
    assert_eq!(estimate_background_color(&img), border_mode_oracle(&img));
    assert_eq!(estimate_background_color(&img), [250, 250, 250]);
}

#[test]
fn noisy_gray_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gauss = || {
        let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let img = RgbImage::from_fn(64, 64, |_, _| {
        Rgb([0; 3].map(|_: u8| (200.0 + 5.0 * gauss()).round().clamp(0.0, 255.0) as u8))
    });
    let est = estimate_background_color(&img);
    assert_eq!(est, border_mode_oracle(&img));
    assert!(est.iter().all(|c| (*c as i32 - 200).abs() <= 8), "{est:?}");
}

#[test]
fn blank_image_has_no_candidates() {
    let img = RgbImage::from_pixel(32, 32, Rgb([240, 240, 240]));
    assert!(segment_candidates(&img, [240, 240, 240], params()).is_empty());
}

#[test]
fn two_blobs_larger_first() {
    let img = RgbImage::from_fn(40, 30, |x, y| {
        if (2..8).contains(&x) && (3..9).contains(&y) || (20..35).contains(&x) && (10..20).contains(&y) {
            Rgb([10, 10, 10])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let c = segment_candidates(&img, [255, 255, 255], params());
    assert_eq!(c.len(), 2);
    assert_eq!(c[0].area(), 150);
    assert_eq!(c[1].area(), 36);
    assert_eq!(c[0].bbox(), Some((20, 10, 15, 10)));
}

#[test]
fn holes_are_filled_and_small_specks_dropped() {
    let img = RgbImage::from_fn(30, 30, |x, y| {
        let ring = (5..20).contains(&x) && (5..20).contains(&y) && !((8..17).contains(&x) && (8..17).contains(&y));
        if ring || (x, y) == (27, 27) {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let p = SegmentParams {
        color_threshold: 40.0,
        min_area_fraction: 0.01,
    };
    let c = segment_candidates(&img, [255, 255, 255], p);
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].area(), 225);
}

#[test]
fn stub_polygon_is_recovered() {
    let stub = StubBackend::default();
    let prompt = fg_prompt("dog");
    for seed in 0..10 {
        let img = stub.render(&prompt, seed, 96, 96);
        let truth = stub.ground_truth(&prompt, seed, 96, 96).unwrap();
        let c = segment_candidates(&img, estimate_background_color(&img), params());
        assert_eq!(c.len(), 1);
        assert!(c[0].iou(&truth).unwrap() >= 0.95);
    }
}

#[test]
fn single_candidate_selected_and_none_rejected() {
    let gw = stub_gateway(64, 64);
    let img = RgbImage::from_fn(64, 64, |x, y| {
        if (10..40).contains(&x) && (10..40).contains(&y) {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let label = gw.embed_text("a photo of dog").unwrap();
    let c = segment_candidates(&img, [255, 255, 255], params());
    let sel = select_segment(&c, &img, &label, &gw, (0.02, 0.9)).unwrap().unwrap();
    assert_eq!(sel.mask.area(), 900);
    assert!((sel.area_fraction - 900.0 / 4096.0).abs() < 1e-12);
    assert_eq!(
        select_segment(&[], &img, &label, &gw, (0.02, 0.9))
            .unwrap()
            .unwrap_err(),
        RejectReason::NoCandidate
    );
    assert_eq!(
        select_segment(&c, &img, &label, &gw, (0.3, 0.9)).unwrap().unwrap_err(),
        RejectReason::AreaOutOfBounds
    );
}

#[test]
fn selection_follows_stub_embedding_oracle() {
    let stub = StubBackend::default();
    let gw = stub_gateway(64, 64);
    let img = RgbImage::from_fn(64, 64, |x, y| {
        if (4..24).contains(&x) && (4..24).contains(&y) {
            Rgb([220, 30, 30])
        } else if (36..60).contains(&x) && (30..60).contains(&y) {
            Rgb([40, 70, 200])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let c = segment_candidates(&img, [255, 255, 255], params());
    assert_eq!(c.len(), 2);
    for word in ["red", "blue"] {
        let label = EmbeddingVector::new(StubBackend::embed_text(word)).unwrap();
        let dot = |m: &InstanceMask| -> f64 {
            let e = stub.embed_image(&crop_on_gray(&img, m).unwrap());
            e.iter().zip(label.values()).map(|(a, b)| a * b).sum()
        };
        let expect = if dot(&c[0]) >= dot(&c[1]) { 0 } else { 1 };
        let sel = select_segment(&c, &img, &label, &gw, (0.0, 1.0)).unwrap().unwrap();
        assert_eq!(sel.mask, c[expect]);
    }
}

#[test]
fn asset_alpha_matches_mask_and_is_tight() {
    let stub = StubBackend::default();
    let gw = stub_gateway(80, 80);
    let label = gw.embed_text("a photo of cat").unwrap();
    let config = PipelineConfig::default();
    for seed in 0..5 {
        let prompt = fg_prompt("cat");
        let handle = ImageHandle {
            pixels: stub.render(&prompt, seed, 80, 80),
            prompt: Caption::new(prompt, CaptionSource::Synthesized, "t"),
            gen_seed: seed,
            backend_id: "stub".into(),
        };
        let a = extract_foreground(&handle, 1, &label, &gw, &config).unwrap().unwrap();
        let (w, h) = a.rgba.dimensions();
        assert_eq!(a.mask.dims(), (w, h));
        for y in 0..h {
            for x in 0..w {
                assert_eq!(a.rgba.get_pixel(x, y)[3] > 0, a.mask.get(x, y));
            }
        }
        assert_eq!(a.mask.bbox(), Some((0, 0, w, h)));
    }
}

#[test]
fn store_dedupes_and_round_trips() {
    let rgba = RgbaImage::from_fn(5, 4, |x, y| {
        if x > 0 && y > 0 {
            Rgba([1, 2, 3, 255])
        } else {
            Rgba([0; 4])
        }
    });
    let a = ForegroundAsset::from_rgba(2, rgba.clone(), "p".into(), 0.5, 0.1);
    let mut store = AssetStore::default();
    assert!(store.insert(a.clone()));
    assert!(!store.insert(a.clone()));
    assert_eq!(store.len(), 1);
    let mut other = rgba;
    other.put_pixel(0, 0, Rgba([9, 9, 9, 255]));
    assert!(store.insert(ForegroundAsset::from_rgba(1, other, "q".into(), 0.2, 0.2)));
    assert_eq!(store.counts(), [(1, 1), (2, 1)].into_iter().collect());
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let loaded = AssetStore::load(dir.path()).unwrap();
    assert_eq!(loaded.assets(), store.assets());
}

#[test]
fn empty_job_gives_empty_store() {
    let vocab = ClassVocabulary::new([("dog", Vec::<String>::new())]).unwrap();
    let config = PipelineConfig {
        fg_templates: vec!["a photo of <object> in pure background".into()],
        fg_images_per_template: 0,
        fg_keep_per_template: 0,
        ..PipelineConfig::default()
    };
    let gw = stub_gateway(32, 32);
    let (store, report, _) = build_foreground_assets(&vocab, &config, &gw).unwrap();
    assert!(store.is_empty());
    assert_eq!(report.generated, 0);
}

#[test]
fn build_matches_stepwise_oracle() {
    let vocab = ClassVocabulary::new([("dog", Vec::<String>::new())]).unwrap();
    let config = PipelineConfig {
        fg_templates: PipelineConfig::default().fg_templates[..2].to_vec(),
        fg_images_per_template: 4,
        fg_keep_per_template: 4,
        image_size: (64, 64),
        ..PipelineConfig::default()
    };
    let stub = StubBackend::default();
    let gw = stub_gateway(64, 64);
    let (store, report, log) = build_foreground_assets(&vocab, &config, &gw).unwrap();
    assert_eq!(report.generated, 8);
    assert_eq!(log.len(), 8);

    let cat = &vocab.categories()[0];
    let label = gw.embed_text(&class_prompt(&config, cat)).unwrap();
    let mut oracle = std::collections::BTreeSet::new();
    for (t, template) in config.fg_templates.iter().enumerate() {
        let prompt = template.replace("<object>", "dog");
        let job_seed = derive_seed(config.master_seed, "fg", t as u64);
        let chunk_seed = derive_seed(job_seed, "chunk", 0);
        for i in 0..4 {
            let img = stub.render(&prompt, image_seed(chunk_seed, i), 64, 64);
            let bg = estimate_background_color(&img);
            let c = segment_candidates(&img, bg, params());
            if let Ok(sel) = select_segment(&c, &img, &label, &gw, config.area_bounds).unwrap() {
                oracle.insert(ForegroundAsset::from_selection(1, &img, &sel, &prompt).digest);
            }
        }
    }
    assert_eq!(store.len(), oracle.len());
    assert!(store.iter().all(|a| oracle.contains(&a.digest)));
    assert_eq!(report.extracted as usize, store.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rejection_is_monotone_in_area_bounds(
        x0 in 0u32..30, y0 in 0u32..30, w in 1u32..34, h in 1u32..34,
        lo in 0.0f64..0.5, hi in 0.5f64..1.0, shrink_lo in 0.0f64..0.2, shrink_hi in 0.0f64..0.2,
    ) {
        let gw = stub_gateway(64, 64);
        let label = gw.embed_text("a photo of dog").unwrap();
        let img = RgbImage::from_fn(64, 64, |x, y| {
            if (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y) { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) }
        });
        let c = segment_candidates(&img, [255, 255, 255], SegmentParams { color_threshold: 40.0, min_area_fraction: 0.0 });
        let wide = select_segment(&c, &img, &label, &gw, (lo, hi)).unwrap().is_ok();
        let narrow = select_segment(&c, &img, &label, &gw, (lo + shrink_lo, hi - shrink_hi)).unwrap().is_ok();
        prop_assert!(wide || !narrow);
    }
}
