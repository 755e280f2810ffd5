//! End-to-end acceptance checks. Runs without the libtest harness so that one
//! PASS/FAIL line per criterion is always printed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

use synthcomp::background::{build_context_backgrounds, build_zero_shot_backgrounds, caption_cdis, BackgroundAsset};
use synthcomp::compose::{blend, build_dataset, PasteSchedule};
use synthcomp::config::PipelineConfig;
use synthcomp::dataset::{rle_decode, rle_encode, RleMask};
use synthcomp::filter::{filter_backgrounds, select_top_foregrounds, FilterDecision};
use synthcomp::foreground::{
    estimate_background_color, segment_candidates, select_segment, AssetStore, ForegroundAsset, SegmentParams,
};
use synthcomp::gateway::{EmbeddingVector, Gateway, StubBackend};
use synthcomp::mask::InstanceMask;
use synthcomp::pipeline::Pipeline;
use synthcomp::plan::expected_counts;
use synthcomp::prompt::{
    fill_template, intervene, Caption, CaptionSource, Intervention, Lexicon, Position, PromptTemplate, Slot,
};
use synthcomp::vocab::ClassVocabulary;

type Outcome = Result<String, String>;
type Fixture = (u32, u32, Vec<(u32, u32)>, Vec<u64>);
type RunOutput = (Vec<u8>, Vec<(String, String)>, Duration);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.1?}, limit {limit:?}");
    Ok(took)
}

fn stub_gateway(config: &PipelineConfig, workers: usize) -> Gateway {
    Gateway::stub(
        StubBackend::new(config.fg_templates.clone()),
        config.image_size,
        workers,
    )
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(2, |n| n.get()).clamp(2, 8)
}

fn count_fidelity() -> Outcome {
    let start = Instant::now();
    let config = PipelineConfig {
        image_size: (32, 32),
        ..PipelineConfig::default()
    };
    ensure!(
        (
            config.num_cdis_per_class,
            config.captions_per_cdi,
            config.images_per_caption,
            config.keep_per_caption
        ) == (1, 2, 80, 30),
        "defaults are not N=1, K=2, M=80, keep=30"
    );
    let gw = stub_gateway(&config, workers());
    let vocab = ClassVocabulary::voc();
    let cdi = RgbImage::from_fn(40, 40, |x, _| {
        if x < 20 {
            Rgb([40, 160, 50])
        } else {
            Rgb([90, 120, 200])
        }
    });
    let captions = caption_cdis(&[("cdi-0".into(), cdi)], config.captions_per_cdi, &gw).map_err(|e| e.to_string())?;
    ensure!(captions.len() == 2, "expected 2 captions, got {}", captions.len());
    let (_, report, log) =
        build_context_backgrounds(&captions, &vocab, &Lexicon::bundled(), &config, &gw).map_err(|e| e.to_string())?;
    ensure!(
        report.generated == 160,
        "generated {} images for one CDI, expected 160",
        report.generated
    );
    let mut per_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for entry in &log {
        let g = per_group.entry(entry.group.as_str()).or_default();
        g.0 += 1;
        g.1 += entry.decision.kept as usize;
    }
    ensure!(per_group.len() == 2, "expected 2 caption sets, got {}", per_group.len());
    for (group, (candidates, kept)) in &per_group {
        ensure!(
            *candidates == 80 && *kept == 30,
            "{group}: {kept} kept of {candidates}, expected 30 of 80"
        );
    }

    let (zero_shot, zreport, _) = build_zero_shot_backgrounds(&vocab, &config, &gw).map_err(|e| e.to_string())?;
    ensure!(
        zreport.generated == 9_600,
        "zero-shot generated {}, expected 9600",
        zreport.generated
    );
    ensure!(zreport.kept == 9_120, "zero-shot kept {}, expected 9120", zreport.kept);
    let plan = expected_counts(&config, &vocab);
    ensure!(
        plan.zero_shot_kept == 9_120 && plan.generated_per_cdi == 160,
        "count plan disagrees"
    );
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!(
        "160 generated, 30+30 kept per caption set; zero-shot 9600 -> 9120 ({} unique) in {took:.1?}",
        zero_shot.len()
    ))
}

/// Column-major run-length decode, written independently of the library.
fn decode_counts(h: usize, w: usize, counts: &[u64]) -> Result<Vec<Vec<bool>>, String> {
    ensure!(
        counts.iter().sum::<u64>() == (h * w) as u64,
        "counts sum {} != {}",
        counts.iter().sum::<u64>(),
        h * w
    );
    let mut grid = vec![vec![false; w]; h];
    let mut pos = 0usize;
    for (i, c) in counts.iter().enumerate() {
        for _ in 0..*c {
            if i % 2 == 1 {
                grid[pos % h][pos / h] = true;
            }
            pos += 1;
        }
    }
    Ok(grid)
}

fn annotation_dataset(root: &Path) -> Outcome {
    let config = PipelineConfig {
        zero_shot_templates: 4,
        images_per_zero_shot_template: 10,
        fg_images_per_template: 3,
        fg_keep_per_template: 2,
        target_dataset_size: 1_000,
        image_size: (96, 96),
        master_seed: 2024,
        ..PipelineConfig::default()
    };
    let gw = stub_gateway(&config, workers());
    let mut p = Pipeline::new(config, ClassVocabulary::voc(), Lexicon::bundled(), root, workers())
        .map_err(|e| e.to_string())?;
    let report = p.run_all(&gw, None, &[]).map_err(|e| e.to_string())?;
    ensure!(report.images == 1_000, "wrote {} images", report.images);
    Ok(format!("{} annotations", report.annotations))
}

struct DecodedAnn {
    image_id: u64,
    grid: Vec<Vec<bool>>,
}

fn load_annotations(root: &Path) -> Result<Vec<DecodedAnn>, String> {
    let doc: Value = serde_json::from_slice(&fs::read(root.join("annotations.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut dims = BTreeMap::new();
    for img in doc["images"].as_array().ok_or("no images array")? {
        dims.insert(
            img["id"].as_u64().unwrap(),
            (
                img["height"].as_u64().unwrap() as usize,
                img["width"].as_u64().unwrap() as usize,
            ),
        );
    }
    let mut out = Vec::new();
    for ann in doc["annotations"].as_array().ok_or("no annotations array")? {
        let id = ann["id"].as_u64().unwrap();
        let image_id = ann["image_id"].as_u64().unwrap();
        let (h, w) = *dims
            .get(&image_id)
            .ok_or(format!("annotation {id}: unknown image {image_id}"))?;
        let seg = &ann["segmentation"];
        let size: Vec<usize> = seg["size"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        ensure!(size == [h, w], "annotation {id}: rle size {size:?} != image [{h}, {w}]");
        let counts: Vec<u64> = seg["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        let grid = decode_counts(h, w, &counts).map_err(|e| format!("annotation {id}: {e}"))?;

        let mut area = 0u64;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (y, row) in grid.iter().enumerate() {
            for (x, set) in row.iter().enumerate() {
                if *set {
                    area += 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        ensure!(area > 0, "annotation {id}: empty mask");
        let bbox: Vec<u64> = ann["bbox"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        let tight = vec![x0 as u64, y0 as u64, (x1 - x0 + 1) as u64, (y1 - y0 + 1) as u64];
        ensure!(bbox == tight, "annotation {id}: bbox {bbox:?}, tight bound {tight:?}");
        ensure!(
            ann["area"].as_u64() == Some(area),
            "annotation {id}: area {} != popcount {area}",
            ann["area"]
        );
        out.push(DecodedAnn { image_id, grid });
    }
    Ok(out)
}

fn annotation_correctness(anns: &Result<Vec<DecodedAnn>, String>, setup: &Outcome, start: Instant) -> Outcome {
    setup.clone()?;
    let anns = anns.as_ref().map_err(|e| e.clone())?;
    ensure!(!anns.is_empty(), "dataset has no annotations");
    let images: BTreeSet<u64> = anns.iter().map(|a| a.image_id).collect();
    let took = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} annotations over {} annotated images, all tight, in {took:.1?}",
        anns.len(),
        images.len()
    ))
}

fn occlusion_disjointness(anns: &Result<Vec<DecodedAnn>, String>) -> Outcome {
    let anns = anns.as_ref().map_err(|e| e.clone())?;
    let mut by_image: BTreeMap<u64, Vec<&DecodedAnn>> = BTreeMap::new();
    for a in anns {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut pairs = 0u64;
    for (image, list) in &by_image {
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                pairs += 1;
                let overlap = list[i]
                    .grid
                    .iter()
                    .zip(&list[j].grid)
                    .any(|(r1, r2)| r1.iter().zip(r2).any(|(a, b)| *a && *b));
                ensure!(!overlap, "image {image}: instances {i} and {j} overlap");
            }
        }
    }
    Ok(format!("{pairs} instance pairs checked, none overlap"))
}

fn random_blob(rng: &mut ChaCha8Rng) -> InstanceMask {
    let w = rng.random_range(4..40);
    let h = rng.random_range(4..40);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(1.0..w as f64),
                rng.random_range(1.0..h as f64),
            )
        })
        .collect();
    let mut m = InstanceMask::from_fn(w, h, |x, y| {
        blobs.iter().any(|(cx, cy, rx, ry)| {
            let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            dx * dx + dy * dy <= 1.0
        })
    });
    if m.is_empty() {
        m.set(0, 0, true);
    }
    m
}

fn blend_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut far_pixels = 0u64;
    for sample in 0..100 {
        let mask = random_blob(&mut rng);
        let (mw, mh) = mask.dims();
        let tint = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        let rgba = RgbaImage::from_fn(mw, mh, |x, y| {
            if mask.get(x, y) {
                Rgba([tint[0] ^ (x * 13) as u8, tint[1] ^ (y * 7) as u8, tint[2], 255])
            } else {
                Rgba([0, 0, 0, 0])
            }
        });
        let (bw, bh) = (rng.random_range(20..70u32), rng.random_range(20..70u32));
        let bg = RgbImage::from_fn(bw, bh, |x, y| Rgb([(x * 5 + y) as u8, (y * 3) as u8, (x ^ y) as u8]));
        let off = (
            rng.random_range(-(mw as i64) + 1..bw as i64),
            rng.random_range(-(mh as i64) + 1..bh as i64),
        );
        let inside = |x: i64, y: i64| mask.get_signed(x - off.0, y - off.1);
        let fg_at = |x: i64, y: i64| {
            let p = rgba.get_pixel((x - off.0) as u32, (y - off.1) as u32);
            [p[0], p[1], p[2]]
        };

        let mut hard = bg.clone();
        blend(&mut hard, &rgba, &mask, off, 0.0);
        for (x, y, p) in hard.enumerate_pixels() {
            let (xi, yi) = (x as i64, y as i64);
            let want = if inside(xi, yi) {
                fg_at(xi, yi)
            } else {
                bg.get_pixel(x, y).0
            };
            ensure!(
                p.0 == want,
                "sample {sample}: sigma 0 pixel ({x},{y}) = {:?}, expected {want:?}",
                p.0
            );
        }

        let mut soft = bg.clone();
        blend(&mut soft, &rgba, &mask, off, 2.0);
        for (x, y, p) in soft.enumerate_pixels() {
            let (xi, yi) = (x as i64, y as i64);
            let me = inside(xi, yi);
            let near = (-6..=6i64).any(|dy| (-6..=6i64).any(|dx| inside(xi + dx, yi + dy) != me));
            if near {
                continue;
            }
            far_pixels += 1;
            let want = if me { fg_at(xi, yi) } else { bg.get_pixel(x, y).0 };
            ensure!(
                p.0 == want,
                "sample {sample}: sigma 2 pixel ({x},{y}) = {:?}, expected {want:?}",
                p.0
            );
        }
    }
    ensure!(far_pixels > 10_000, "only {far_pixels} pixels outside the band");
    Ok(format!(
        "100 samples, {far_pixels} pixels outside the band exact, sigma 0 exact everywhere"
    ))
}

fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// Repeatedly take the best remaining eligible index; ties go to the lower index.
fn selection_oracle(scores: &[f64], eligible: &[bool], keep: usize) -> Vec<Option<usize>> {
    let mut rank = vec![None; scores.len()];
    for r in 1..=keep {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if eligible[i] && rank[i].is_none() && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => rank[b] = Some(r),
            None => break,
        }
    }
    rank
}

fn ranks(d: &[FilterDecision]) -> Vec<Option<usize>> {
    d.iter().map(|d| d.rank).collect()
}

fn filter_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 6;
    let mut ties = 0u64;
    let vec_of = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect();
        if v.iter().all(|x| *x == 0.0) {
            EmbeddingVector::new(vec![1.0; dim]).unwrap()
        } else {
            EmbeddingVector::new(v).unwrap()
        }
    };
    for trial in 0..1_000 {
        let n = rng.random_range(0..=200usize);
        let palette: Vec<EmbeddingVector> = (0..rng.random_range(1..12)).map(|_| vec_of(&mut rng)).collect();
        let cands: Vec<EmbeddingVector> = (0..n)
            .map(|_| palette[rng.random_range(0..palette.len())].clone())
            .collect();
        let caption = vec_of(&mut rng);
        let classes: Vec<EmbeddingVector> = (0..rng.random_range(0..5)).map(|_| vec_of(&mut rng)).collect();
        let keep = rng.random_range(0..=n + 5);
        let thr = rng.random_range(-0.5..1.0);

        let cap: Vec<f64> = cands.iter().map(|c| dot(c, &caption)).collect();
        let cls: Vec<f64> = cands
            .iter()
            .map(|c| classes.iter().map(|k| dot(c, k)).fold(f64::NEG_INFINITY, f64::max))
            .map(|s| if classes.is_empty() { -1.0 } else { s })
            .collect();
        let distinct: BTreeSet<u64> = cap.iter().map(|s| s.to_bits()).collect();
        ties += (distinct.len() < n) as u64;
        let eligible: Vec<bool> = cls.iter().map(|s| *s <= thr).collect();
        let want = selection_oracle(&cap, &eligible, keep);
        let got = filter_backgrounds(&cands, &caption, &classes, keep, thr).map_err(|e| e.to_string())?;
        ensure!(
            ranks(&got) == want,
            "trial {trial}: filter_backgrounds ranks differ from oracle"
        );
        ensure!(
            got.iter().all(|d| d.kept == d.rank.is_some()),
            "trial {trial}: kept flag disagrees with rank"
        );

        let label = vec_of(&mut rng);
        let sims: Vec<f64> = cands.iter().map(|c| dot(c, &label)).collect();
        let want = selection_oracle(&sims, &vec![true; n], keep);
        let got = select_top_foregrounds(&cands, &label, keep).map_err(|e| e.to_string())?;
        ensure!(
            ranks(&got) == want,
            "trial {trial}: select_top_foregrounds ranks differ from oracle"
        );
    }
    ensure!(ties > 500, "only {ties} trials exercised ties");
    Ok(format!("1000 sets, {ties} with tied scores"))
}

fn rle_round_trip() -> Outcome {
    let fixtures: [Fixture; 3] = [
        (2, 2, vec![], vec![4]),
        (2, 2, vec![(0, 0), (0, 1), (1, 0), (1, 1)], vec![0, 4]),
        (3, 3, vec![(1, 1)], vec![4, 1, 4]),
    ];
    for (w, h, set, counts) in &fixtures {
        let mask = InstanceMask::from_fn(*w, *h, |x, y| set.contains(&(x, y)));
        let rle = rle_encode(&mask);
        ensure!(
            &rle.counts == counts && rle.size == [*h, *w],
            "fixture {w}x{h}: got {:?}",
            rle.counts
        );
        ensure!(
            rle_decode(&rle).map_err(|e| e.to_string())? == mask,
            "fixture {w}x{h}: decode mismatch"
        );
    }
    ensure!(
        rle_decode(&RleMask {
            size: [3, 3],
            counts: vec![4, 1, 3],
        })
        .is_err(),
        "short counts accepted"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10_000 {
        let (w, h) = (rng.random_range(1..=128u32), rng.random_range(1..=128u32));
        let density = [0.0, 0.02, 0.5, 0.97, 1.0][rng.random_range(0..5)];
        let mask = if trial % 3 == 0 {
            let (cx, cy, r) = (
                rng.random_range(0..w),
                rng.random_range(0..h),
                rng.random_range(1..64u32),
            );
            InstanceMask::from_fn(w, h, |x, y| x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2) <= r * r)
        } else {
            let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            InstanceMask::from_bits(w, h, bits).unwrap()
        };
        let rle = rle_encode(&mask);
        let grid = decode_counts(h as usize, w as usize, &rle.counts)?;
        ensure!(
            (0..h).all(|y| (0..w).all(|x| grid[y as usize][x as usize] == mask.get(x, y))),
            "trial {trial}: encoding disagrees with independent decoder"
        );
        ensure!(
            rle_decode(&rle).map_err(|e| e.to_string())? == mask,
            "trial {trial}: round trip failed at {w}x{h}"
        );
    }
    Ok("3 fixtures and 10000 random masks round-trip".into())
}

fn sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn determinism(tmp: &Path) -> Outcome {
    let cfg = tmp.join("det.cfg");
    fs::write(
        &cfg,
        "images_per_caption = 12\nkeep_per_caption = 5\nfg_images_per_template = 3\nfg_keep_per_template = 2\ntarget_dataset_size = 200\nimage_size = 128x128\nmaster_seed = 99\n",
    )
    .map_err(|e| e.to_string())?;
    let cdi = tmp.join("cdi");
    fs::create_dir_all(&cdi).map_err(|e| e.to_string())?;
    for i in 0..2u8 {
        RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 4) as u8, 100 + 50 * i, (y * 4) as u8]))
            .save(cdi.join(format!("cdi{i}.png")))
            .map_err(|e| e.to_string())?;
    }
    let run = |workers: &str, out: &str| -> Result<RunOutput, String> {
        let start = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_synthcomp"))
            .args([
                "--stub",
                "--config",
                cfg.to_str().unwrap(),
                "--workers",
                workers,
                "--out",
            ])
            .arg(tmp.join(out))
            .args(["run-all", "--cdi-dir"])
            .arg(&cdi)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        let took = start.elapsed();
        ensure!(
            o.status.success(),
            "run with {workers} workers failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let root = tmp.join(out);
        let ann = fs::read(root.join("annotations.json")).map_err(|e| e.to_string())?;
        let mut digests = Vec::new();
        let mut names: Vec<_> = fs::read_dir(root.join("images"))
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            digests.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                sha(&fs::read(&p).map_err(|e| e.to_string())?),
            ));
        }
        Ok((ann, digests, took))
    };
    let (a1, d1, t1) = run("1", "det1")?;
    let (a4, d4, t4) = run("4", "det4")?;
    ensure!(d1.len() == 200, "wrote {} images", d1.len());
    ensure!(a1 == a4, "annotations.json differs between 1 and 4 workers");
    ensure!(d1 == d4, "per-image digests differ between 1 and 4 workers");
    let limit = Duration::from_secs(60);
    ensure!(t1 < limit && t4 < limit, "runs took {t1:.1?} and {t4:.1?}");
    Ok(format!(
        "annotations {} identical, 200 image digests identical; runs {t1:.1?} / {t4:.1?}",
        &sha(&a1)[..12]
    ))
}

fn extraction_quality() -> Outcome {
    let config = PipelineConfig {
        image_size: (128, 128),
        ..PipelineConfig::default()
    };
    let stub = StubBackend::new(config.fg_templates.clone());
    let gw = stub_gateway(&config, workers());
    let vocab = ClassVocabulary::voc();
    let templates: Vec<PromptTemplate> = config
        .fg_templates
        .iter()
        .map(|t| PromptTemplate::parse(t).unwrap())
        .collect();
    let params = SegmentParams::from_config(&config);
    let (w, h) = config.image_size;
    let mut good = 0;
    let mut worst = 1.0f64;
    for k in 0..200u64 {
        let cat = &vocab.categories()[(k % 20) as usize];
        let t = &templates[(k / 20 % templates.len() as u64) as usize];
        let text = fill_template(t, &BTreeMap::from([(Slot::Object, cat.label.clone())]))
            .map_err(|e| e.to_string())?
            .text;
        let prompt = Caption::new(text.clone(), CaptionSource::Synthesized, "fixture");
        let handle = gw
            .generate_images(&prompt, 1, 1_000 + k)
            .map_err(|e| e.to_string())?
            .remove(0);
        let truth = stub
            .ground_truth(&text, handle.gen_seed, w, h)
            .ok_or(format!("fixture {k}: `{text}` has no ground truth"))?;
        let label = gw
            .embed_text(&format!("a photo of {}", cat.label))
            .map_err(|e| e.to_string())?;
        let candidates = segment_candidates(&handle.pixels, estimate_background_color(&handle.pixels), params);
        let iou = match select_segment(&candidates, &handle.pixels, &label, &gw, config.area_bounds)
            .map_err(|e| e.to_string())?
        {
            Ok(sel) => sel.mask.iou(&truth).map_err(|e| e.to_string())?,
            Err(_) => 0.0,
        };
        worst = worst.min(iou);
        good += (iou >= 0.95) as u32;
    }
    ensure!(good >= 190, "{good}/200 fixtures reach IoU 0.95");
    Ok(format!("{good}/200 fixtures reach IoU 0.95 (worst {worst:.3})"))
}

fn intervention_semantics() -> Outcome {
    let apply =
        |text: &str, edit: Intervention| intervene(&Caption::new(text, CaptionSource::CdiCaption, "f"), &edit).text;
    let removed = apply(
        "a man and a woman in a kitchen with a table",
        Intervention::remove("man and a woman").unwrap(),
    );
    ensure!(removed == "a kitchen with a table", "removal gave `{removed}`");
    let styled = apply(
        "a cartoon kitchen with a stove",
        Intervention::style_change("cartoon", "real").unwrap(),
    );
    ensure!(styled == "a real kitchen with a stove", "style change gave `{styled}`");

    const WORDS: &[&str] = &[
        "a", "the", "kitchen", "with", "and", "in", "table", "stove", "on", "of", "grass", "field", "street", "at",
        "night", "snowy", "road", "beach", "two", "near", "old", "wooden", "floor",
    ];
    const TARGETS: &[&str] = &[
        "sunlight",
        "morning fog",
        "bright window light",
        "rain",
        "people walking",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..500 {
        let len = rng.random_range(1..14);
        let text = (0..len)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ");
        let target = TARGETS[rng.random_range(0..TARGETS.len())];
        let pos = if rng.random_bool(0.5) {
            Position::Prepend
        } else {
            Position::Append
        };
        let added = apply(&text, Intervention::add(target, pos).unwrap());
        let back = apply(&added, Intervention::remove(target).unwrap());
        ensure!(back == text, "trial {trial}: `{text}` -> `{added}` -> `{back}`");
    }
    Ok("both fixtures match; add-then-remove identity on 500 captions".into())
}

fn solid_asset(i: u32) -> ForegroundAsset {
    let rgba = RgbaImage::from_pixel(
        4 + i % 5,
        5 + i % 3,
        Rgba([(i * 29) as u8, (i * 53) as u8, (i * 7) as u8, 255]),
    );
    ForegroundAsset::from_rgba(1 + i % 3, rgba, "asset".into(), 0.0, 0.1)
}

fn asset_usage_balance() -> Outcome {
    let mut store = AssetStore::default();
    for i in 0..8 {
        ensure!(store.insert(solid_asset(i)), "asset {i} collided");
    }
    let bg = [BackgroundAsset::new(
        RgbImage::from_pixel(64, 64, Rgb([10, 20, 30])),
        "bg".into(),
        "g".into(),
    )];
    let config = PipelineConfig {
        pastes_per_image: 4,
        target_dataset_size: 4,
        image_size: (64, 64),
        ..PipelineConfig::default()
    };
    let mut usage: BTreeMap<String, u32> = BTreeMap::new();
    build_dataset(&store, &bg, &config, 2, |s| {
        for p in &s.pastes {
            *usage.entry(p.asset_digest.clone()).or_default() += 1;
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure!(
        usage.len() == 8 && usage.values().all(|c| *c == 2),
        "usage {:?}",
        usage.values().collect::<Vec<_>>()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..500 {
        let n = rng.random_range(1..50usize);
        let g = rng.random_range(1..8u32);
        let target = rng.random_range(0..120u64);
        let mut schedule = PasteSchedule::new(n, rng.random());
        let mut counts = vec![0u64; n];
        for i in 0..target {
            for a in schedule.sample(i, g) {
                counts[a] += 1;
            }
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        ensure!(
            hi - lo <= 1,
            "trial {trial}: n={n} g={g} target={target} counts span {lo}..{hi}"
        );
    }
    Ok("8 assets pasted exactly twice; 500 random schedules within 1".into())
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let guard = |f: &mut dyn FnMut() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    let dataset_root = tmp.path().join("dataset");
    let dataset_start = Instant::now();
    let dataset = guard(&mut || annotation_dataset(&dataset_root));
    let anns = match &dataset {
        Ok(_) => load_annotations(&dataset_root),
        Err(e) => Err(e.clone()),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("count fidelity", guard(&mut count_fidelity)),
        (
            "annotation correctness",
            guard(&mut || annotation_correctness(&anns, &dataset, dataset_start)),
        ),
        ("occlusion disjointness", guard(&mut || occlusion_disjointness(&anns))),
        ("blend locality", guard(&mut blend_locality)),
        ("filter oracle equivalence", guard(&mut filter_oracle_equivalence)),
        ("rle round-trip", guard(&mut rle_round_trip)),
        ("determinism", guard(&mut || determinism(tmp.path()))),
        ("foreground extraction quality", guard(&mut extraction_quality)),
        ("intervention semantics", guard(&mut intervention_semantics)),
        ("asset-usage balance", guard(&mut asset_usage_balance)),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
