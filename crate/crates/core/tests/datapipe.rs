//! Data pipeline oracles and properties: resize against an independently
//! written bilinear formula, deterministic augmentation replay, epoch
//! coverage, and an end-to-end manifest -> store -> batch pass over real
//! files rendered by the synthetic generator.

use aupt_core::augment::{augment, AugmentConfig};
use aupt_core::batch::{iterate_batches, BatchSettings, ImageStore};
use aupt_core::manifest::load_manifest;
use aupt_core::preprocess::{bilinear_resize, preprocess, Raster};
use aupt_core::synth::{generate_dataset, SynthSpec};
use aupt_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

// Direct bilinear interpolation at one output pixel, written from the
// formula: half-pixel centers, edge-clamped taps, 4-point blend.
fn bilinear_at(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize, ox: usize, oy: usize) -> f64 {
    let fx = (ox as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5;
    let fy = (oy as f64 + 0.5) * (h as f64 / out_h as f64) - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (dx, dy) = (fx - x0, fy - y0);
    let at = |x: f64, y: f64| -> f64 {
        let xi = (x.max(0.0) as usize).min(w - 1);
        let yi = (y.max(0.0) as usize).min(h - 1);
        src[yi * w + xi]
    };
    at(x0, y0) * (1.0 - dx) * (1.0 - dy)
        + at(x0 + 1.0, y0) * dx * (1.0 - dy)
        + at(x0, y0 + 1.0) * (1.0 - dx) * dy
        + at(x0 + 1.0, y0 + 1.0) * dx * dy
}

#[test]
fn checkerboard_resize_matches_direct_formula() {
    let mut src = vec![0.0f64; 16];
    for y in 0..4 {
        for x in 0..4 {
            src[y * 4 + x] = if (x + y) % 2 == 0 { 255.0 } else { 0.0 };
        }
    }
    let out = bilinear_resize(&src, 4, 4, 64, 64);
    for oy in 0..64 {
        for ox in 0..64 {
            let want = bilinear_at(&src, 4, 4, 64, 64, ox, oy);
            let got = out[oy * 64 + ox];
            assert!((got - want).abs() < 1e-6, "pixel ({ox},{oy}): {got} vs {want}");
        }
    }
}

#[test]
fn random_resizes_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(w, h, ow, oh) in &[(7usize, 5usize, 64usize, 64usize), (100, 100, 64, 64), (3, 9, 16, 32)] {
        let src: Vec<f64> = (0..w * h).map(|_| rand::Rng::gen_range(&mut rng, 0.0..255.0)).collect();
        let out = bilinear_resize(&src, w, h, ow, oh);
        for oy in (0..oh).step_by(3) {
            for ox in (0..ow).step_by(3) {
                let want = bilinear_at(&src, w, h, ow, oh, ox, oy);
                assert!((out[oy * ow + ox] - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn augmentation_is_a_pure_function_of_seed_epoch_index() {
    let x = Tensor::<f32>::new(
        vec![1, 64, 64],
        (0..4096).map(|i| (i % 255) as f32 / 255.0 - 0.5).collect(),
    )
    .unwrap();
    let cfg = AugmentConfig::default();

    let run = |key: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        augment(&x, vec![1, 0], &cfg, &mut rng).unwrap().0.to_vec()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}

fn tiny_dataset(tag: &str) -> (std::path::PathBuf, SynthSpec) {
    let dir = std::env::temp_dir().join(format!("aupt-datapipe-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SynthSpec {
        n_subjects: 6,
        images_per_subject: 5,
        n_labels: 4,
        label_noise_rate: 0.1,
        image_size: 48,
        seed: 77,
    };
    generate_dataset(&spec, &dir).unwrap();
    (dir, spec)
}

#[test]
fn end_to_end_store_and_batches() {
    let (dir, _) = tiny_dataset("e2e");
    let manifest = load_manifest(dir.join("manifest.csv"), aupt_core::manifest::LabelKind::Binary).unwrap();
    assert_eq!(manifest.len(), 30);
    assert_eq!(manifest.subjects().len(), 6);

    let store = ImageStore::<f32>::load(&manifest, 1).unwrap();
    let settings = BatchSettings {
        batch_size: 8,
        seed: 5,
        training: true,
        augment: Some(AugmentConfig::default()),
    };

    // Epoch coverage: the multiset of emitted record indices equals 0..n,
    // batches are ceil(n/b) with a short tail.
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut batch_sizes = Vec::new();
    for batch in iterate_batches(&manifest, &store, &settings, 0).unwrap() {
        let batch = batch.unwrap();
        assert_eq!(batch.images.dims()[1..], [1, 64, 64]);
        assert_eq!(batch.labels.dims()[1], 4);
        batch_sizes.push(batch.indices.len());
        for &i in &batch.indices {
            *seen.entry(i).or_default() += 1;
        }
    }
    assert_eq!(batch_sizes, vec![8, 8, 8, 6]);
    assert_eq!(seen.len(), 30);
    assert!(seen.values().all(|&c| c == 1));

    // Identical settings replay bit-identically; epochs differ.
    let first = |epoch: u64| {
        let mut it = iterate_batches(&manifest, &store, &settings, epoch).unwrap();
        it.next().unwrap().unwrap()
    };
    let a = first(0);
    let b = first(0);
    assert_eq!(a.indices, b.indices);
    assert_eq!(a.images.to_vec(), b.images.to_vec());
    let c = first(1);
    assert_ne!(a.indices, c.indices);

    // Eval mode: manifest order, no augmentation, bitwise equal to the
    // stored preprocessed tensors.
    let eval = BatchSettings { batch_size: 7, seed: 9, training: false, augment: None };
    let batch = iterate_batches(&manifest, &store, &eval, 0).unwrap().next().unwrap().unwrap();
    assert_eq!(batch.indices, (0..7).collect::<Vec<_>>());

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn empty_manifest_is_config_error() {
    let (dir, _) = tiny_dataset("empty");
    let manifest = load_manifest(dir.join("manifest.csv"), aupt_core::manifest::LabelKind::Binary).unwrap();
    let store = ImageStore::<f32>::load(&manifest, 1).unwrap();
    let empty = manifest.filtered(|_| false);
    let settings = BatchSettings { batch_size: 4, seed: 0, training: false, augment: None };
    assert!(iterate_batches(&empty, &store, &settings, 0).is_err());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn preprocessed_store_tensors_are_zero_mean() {
    let (dir, _) = tiny_dataset("mean");
    let manifest = load_manifest(dir.join("manifest.csv"), aupt_core::manifest::LabelKind::Binary).unwrap();
    let store = ImageStore::<f64>::load(&manifest, 1).unwrap();
    let settings = BatchSettings { batch_size: 30, seed: 0, training: false, augment: None };
    let batch = iterate_batches(&manifest, &store, &settings, 0).unwrap().next().unwrap().unwrap();
    let data = batch.images.to_vec();
    for (i, sample) in data.chunks(64 * 64).enumerate() {
        let mean = sample.iter().sum::<f64>() / sample.len() as f64;
        assert!(mean.abs() < 1e-6, "sample {i} mean {mean}");
        assert!(sample.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn paper_scale_manifest_loads_with_exact_counts() {
    // 1,995 subjects / 162,070 rows, the pre-training corpus shape.
    let dir = std::env::temp_dir().join("aupt-datapipe-large");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("large.csv");
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
        writeln!(f, "image_path,subject_id,gender,region,{}", (1..=17).map(|i| format!("AU{i:02}")).collect::<Vec<_>>().join(",")).unwrap();
        let n_subjects = 1995usize;
        let total = 162_070usize;
        let per = total / n_subjects; // 81 each, remainder spread over the first subjects
        let extra = total - per * n_subjects;
        let mut row = 0usize;
        for s in 0..n_subjects {
            let count = per + usize::from(s < extra);
            let gender = if s % 2 == 0 { "M" } else { "F" };
            for i in 0..count {
                let labels: Vec<String> = (0..17).map(|l| (((row + l) % 3 == 0) as u8).to_string()).collect();
                writeln!(f, "img/{s}/{i}.png,celeb{s:05},{gender},region{r},{labels}", r = s % 7, labels = labels.join(",")).unwrap();
                row += 1;
            }
        }
        assert_eq!(row, total);
    }
    let m = load_manifest(&path, aupt_core::manifest::LabelKind::Binary).unwrap();
    assert_eq!(m.len(), 162_070);
    assert_eq!(m.subjects().len(), 1995);
    assert_eq!(m.label_width(), 17);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn raster_decode_roundtrip() {
    let dir = std::env::temp_dir().join("aupt-raster-io");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("gray.png");
    let data: Vec<u8> = (0..24 * 16).map(|i| (i % 251) as u8).collect();
    image::GrayImage::from_raw(24, 16, data.clone()).unwrap().save(&path).unwrap();
    let r = Raster::from_file(&path).unwrap();
    assert_eq!((r.width, r.height, r.channels), (24, 16, 1));
    assert_eq!(r.data, data);

    let t3 = preprocess::<f32>(&r, 3).unwrap();
    assert_eq!(t3.dims(), vec![3, 64, 64]);
    std::fs::remove_file(&path).unwrap();
}
