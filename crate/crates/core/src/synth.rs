//! Synthetic dataset generator: renderable binary attributes standing in for
//! AUs, persistent per-subject identity factors, and controllable label
//! noise standing in for automatic-annotator error.
//!
//! Each label, when truly present, draws an oriented bright bar in its own
//! grid cell, so the image-to-label mapping is local and learnable; recorded
//! labels flip independently at the configured noise rate, while true labels
//! go to a sidecar manifest for oracle use.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::batch::mix_seed;
use crate::error::{Error, Result};
use crate::manifest::{save_manifest, Gender, LabelKind, Manifest, SampleRecord};
use crate::preprocess::Raster;

const TAG_FACTORS: u64 = 0x464143;
const TAG_LABELS: u64 = 0x4c4142;
const TAG_NOISE: u64 = 0x4e4f49;
const TAG_RENDER: u64 = 0x52454e;

/// Pixel value above which a pixel counts as glyph ink; backgrounds stay
/// comfortably below (see `render_image`), which the template oracle and the
/// locality tests rely on.
pub const GLYPH_THRESHOLD: u8 = 200;

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub n_labels: usize,
    pub label_noise_rate: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.images_per_subject == 0 || self.n_labels == 0 {
            return Err(Error::config("subjects, images per subject and labels must all be >= 1"));
        }
        if !(0.0..0.5).contains(&self.label_noise_rate) {
            return Err(Error::config(format!(
                "label_noise_rate {} must lie in [0, 0.5) to keep labels informative",
                self.label_noise_rate
            )));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be >= 16"));
        }
        Ok(())
    }
}

/// Persistent identity of one synthetic subject.
#[derive(Debug, Clone, Copy)]
pub struct SubjectFactors {
    pub base_level: f64,
    pub texture_freq: f64,
    pub texture_phase: f64,
    /// Face-blob ellipse (center and radii as fractions of the image side).
    pub blob: (f64, f64, f64, f64),
    pub blob_gain: f64,
}

pub fn subject_factors(spec: &SynthSpec, subject_idx: usize) -> SubjectFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, TAG_FACTORS, subject_idx as u64]));
    SubjectFactors {
        base_level: rng.gen_range(30.0..90.0),
        texture_freq: rng.gen_range(0.05..0.25),
        texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        blob: (
            rng.gen_range(0.35..0.65),
            rng.gen_range(0.35..0.65),
            rng.gen_range(0.20..0.35),
            rng.gen_range(0.25..0.40),
        ),
        blob_gain: rng.gen_range(25.0..50.0),
    }
}

/// Grid cell (x0, y0, side) of label `l` for an `size`-pixel image.
pub fn glyph_cell(l: usize, n_labels: usize, size: usize) -> (usize, usize, usize) {
    let cols = (n_labels as f64).sqrt().ceil() as usize;
    let rows = n_labels.div_ceil(cols);
    let cell = size / cols.max(rows);
    let cx = (l % cols) * cell;
    let cy = (l / cols) * cell;
    (cx, cy, cell)
}

/// Deterministic rendering of one image given factors, true labels, and a
/// per-image rng. All rng draws happen before glyphs touch the canvas, so
/// two label vectors render identically outside the differing glyph cells.
pub fn render_image(
    factors: &SubjectFactors,
    true_labels: &[u8],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Raster {
    let n_labels = true_labels.len();
    // 1. unconditional draws: global drift, per-label jitter, pixel noise
    let drift_x = rng.gen_range(-1.5..1.5);
    let drift_y = rng.gen_range(-1.5..1.5);
    let jitter: Vec<(f64, f64)> = (0..n_labels)
        .map(|_| (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)))
        .collect();
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-8.0..8.0)).collect();

    // 2. background texture and face blob
    let mut canvas = vec![0.0f64; size * size];
    let (bx, by, brx, bry) = factors.blob;
    let (bx, by) = (bx * size as f64 + drift_x, by * size as f64 + drift_y);
    let (brx, bry) = (brx * size as f64, bry * size as f64);
    for y in 0..size {
        for x in 0..size {
            let tex = 15.0
                * ((x as f64 * factors.texture_freq) + (y as f64 * factors.texture_freq * 0.7)
                    + factors.texture_phase)
                    .sin();
            let mut v = factors.base_level + tex + noise[y * size + x];
            let ex = (x as f64 - bx) / brx;
            let ey = (y as f64 - by) / bry;
            if ex * ex + ey * ey <= 1.0 {
                v += factors.blob_gain;
            }
            canvas[y * size + x] = v;
        }
    }

    // 3. glyphs: an oriented bar in the label's cell when present
    for (l, &present) in true_labels.iter().enumerate() {
        if present == 0 {
            continue;
        }
        let (cx0, cy0, cell) = glyph_cell(l, n_labels, size);
        let (jx, jy) = jitter[l];
        let cx = cx0 as f64 + cell as f64 / 2.0 + jx;
        let cy = cy0 as f64 + cell as f64 / 2.0 + jy;
        let theta = std::f64::consts::PI * l as f64 / n_labels as f64;
        let (sin, cos) = theta.sin_cos();
        let half_len = cell as f64 * 0.35;
        let half_thick = (cell as f64 / 8.0).max(1.0);
        let y_lo = cy0.saturating_sub(2);
        let y_hi = (cy0 + cell + 2).min(size);
        let x_lo = cx0.saturating_sub(2);
        let x_hi = (cx0 + cell + 2).min(size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let along = dx * cos + dy * sin;
                let across = -dx * sin + dy * cos;
                if along.abs() <= half_len && across.abs() <= half_thick {
                    canvas[y * size + x] = 240.0;
                }
            }
        }
    }

    let data: Vec<u8> = canvas.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect();
    Raster { width: size, height: size, channels: 1, data }
}

/// True labels of one image: independent coin flips per label.
pub fn true_labels_for(spec: &SynthSpec, subject_idx: usize, image_idx: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        spec.seed,
        TAG_LABELS,
        subject_idx as u64,
        image_idx as u64,
    ]));
    (0..spec.n_labels).map(|_| u8::from(rng.gen_bool(0.5))).collect()
}

/// Recorded labels: true labels with independent flips at the noise rate.
pub fn noisy_labels_for(spec: &SynthSpec, subject_idx: usize, image_idx: usize, truth: &[u8]) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        spec.seed,
        TAG_NOISE,
        subject_idx as u64,
        image_idx as u64,
    ]));
    truth
        .iter()
        .map(|&t| if rng.gen::<f64>() < spec.label_noise_rate { 1 - t } else { t })
        .collect()
}

fn au_names(n_labels: usize) -> Vec<String> {
    (1..=n_labels).map(|i| format!("AU{i:02}")).collect()
}

fn record_for(subject_idx: usize, image_idx: usize, labels: Vec<u8>) -> SampleRecord {
    SampleRecord {
        image_ref: format!("images/s{subject_idx:04}_i{image_idx:04}.png"),
        subject_id: format!("subj{subject_idx:04}"),
        gender: if subject_idx % 2 == 0 { Gender::Male } else { Gender::Female },
        region: "synth".into(),
        labels,
    }
}

/// Manifests only (no rendering): the noisy manifest and its clean sidecar,
/// rooted at `base_dir`. Used directly by split/property tests, and by
/// `generate_dataset` after it renders the images.
pub fn manifest_skeleton(spec: &SynthSpec, base_dir: impl Into<PathBuf>) -> Result<(Manifest, Manifest)> {
    spec.validate()?;
    let base_dir = base_dir.into();
    let mut noisy = Vec::with_capacity(spec.n_subjects * spec.images_per_subject);
    let mut clean = Vec::with_capacity(noisy.capacity());
    for s in 0..spec.n_subjects {
        for i in 0..spec.images_per_subject {
            let truth = true_labels_for(spec, s, i);
            let recorded = noisy_labels_for(spec, s, i, &truth);
            clean.push(record_for(s, i, truth));
            noisy.push(record_for(s, i, recorded));
        }
    }
    let make = |records: Vec<SampleRecord>| Manifest {
        au_columns: au_names(spec.n_labels),
        label_kind: LabelKind::Binary,
        records,
        base_dir: base_dir.clone(),
    };
    Ok((make(noisy), make(clean)))
}

/// Outputs of one generation run.
pub struct GeneratedDataset {
    /// Recorded (noisy) labels — what the pipeline trains on.
    pub manifest: Manifest,
    /// True labels, for oracle evaluation.
    pub truth: Manifest,
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
}

/// Render every image and write `manifest.csv` (noisy labels) plus the
/// `manifest_true.csv` sidecar under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedDataset> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("images"))?;

    let (manifest, truth) = manifest_skeleton(spec, out_dir)?;

    let jobs: Vec<(usize, usize)> = (0..spec.n_subjects)
        .flat_map(|s| (0..spec.images_per_subject).map(move |i| (s, i)))
        .collect();
    jobs.par_iter().try_for_each(|&(s, i)| -> Result<()> {
        let factors = subject_factors(spec, s);
        let truth = true_labels_for(spec, s, i);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, TAG_RENDER, s as u64, i as u64]));
        let raster = render_image(&factors, &truth, spec.image_size, &mut rng);
        let img = image::GrayImage::from_raw(raster.width as u32, raster.height as u32, raster.data)
            .expect("raster dims match buffer");
        let path = out_dir.join(format!("images/s{s:04}_i{i:04}.png"));
        img.save(&path)?;
        Ok(())
    })?;

    let manifest_path = out_dir.join("manifest.csv");
    let truth_path = out_dir.join("manifest_true.csv");
    save_manifest(&manifest, &manifest_path)?;
    save_manifest(&truth, &truth_path)?;

    Ok(GeneratedDataset { manifest, truth, manifest_path, truth_path })
}

/// The pixel-template detector used as an oracle: a label reads as present
/// when its cell contains at least `min_ink` pixels above the glyph
/// threshold.
pub fn detect_labels(raster: &Raster, n_labels: usize) -> Vec<u8> {
    let size = raster.width;
    (0..n_labels)
        .map(|l| {
            let (x0, y0, cell) = glyph_cell(l, n_labels, size);
            let mut ink = 0usize;
            for y in y0..(y0 + cell).min(size) {
                for x in x0..(x0 + cell).min(size) {
                    if raster.data[y * size + x] > GLYPH_THRESHOLD {
                        ink += 1;
                    }
                }
            }
            let min_ink = (cell * cell) / 16;
            u8::from(ink >= min_ink.max(2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            n_subjects: 6,
            images_per_subject: 4,
            n_labels: 17,
            label_noise_rate: 0.2,
            image_size: 64,
            seed: 41,
        }
    }

    #[test]
    fn validation_rules() {
        let mut s = spec();
        s.label_noise_rate = 0.5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.n_subjects = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec();
        let f = subject_factors(&s, 0);
        let labels = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let a = render_image(&f, &labels, 64, &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_image(&f, &labels, 64, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn one_hot_changes_only_its_cell() {
        let s = spec();
        let f = subject_factors(&s, 1);
        let zeros = vec![0u8; 17];
        for l in [0usize, 8, 16] {
            let mut one_hot = zeros.clone();
            one_hot[l] = 1;
            let base = render_image(&f, &zeros, 64, &mut ChaCha8Rng::seed_from_u64(5));
            let hot = render_image(&f, &one_hot, 64, &mut ChaCha8Rng::seed_from_u64(5));
            let (x0, y0, cell) = glyph_cell(l, 17, 64);
            for y in 0..64 {
                for x in 0..64 {
                    let inside = x + 2 >= x0 && x < x0 + cell + 2 && y + 2 >= y0 && y < y0 + cell + 2;
                    if !inside {
                        assert_eq!(
                            base.data[y * 64 + x],
                            hot.data[y * 64 + x],
                            "pixel ({x},{y}) changed outside glyph {l} cell"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn template_detector_recovers_true_labels() {
        let s = spec();
        let mut total = 0usize;
        let mut correct = 0usize;
        for subj in 0..s.n_subjects {
            let f = subject_factors(&s, subj);
            for img in 0..s.images_per_subject {
                let truth = true_labels_for(&s, subj, img);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[s.seed, TAG_RENDER, subj as u64, img as u64]));
                let raster = render_image(&f, &truth, s.image_size, &mut rng);
                let detected = detect_labels(&raster, s.n_labels);
                total += truth.len();
                correct += truth.iter().zip(detected.iter()).filter(|(a, b)| a == b).count();
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "template oracle accuracy {acc}");
    }

    #[test]
    fn noise_zero_keeps_labels_and_counts_match() {
        let mut s = spec();
        s.label_noise_rate = 0.0;
        let (noisy, clean) = manifest_skeleton(&s, ".").unwrap();
        assert_eq!(noisy.len(), 24);
        assert_eq!(noisy.subjects().len(), 6);
        for (a, b) in noisy.records.iter().zip(clean.records.iter()) {
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn noise_rate_concentrates() {
        let mut s = spec();
        s.n_subjects = 40;
        s.images_per_subject = 20;
        s.label_noise_rate = 0.2;
        let (noisy, clean) = manifest_skeleton(&s, ".").unwrap();
        let mut flips = 0usize;
        let mut total = 0usize;
        for (a, b) in noisy.records.iter().zip(clean.records.iter()) {
            flips += a.labels.iter().zip(b.labels.iter()).filter(|(x, y)| x != y).count();
            total += a.labels.len();
        }
        let rate = flips as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.01, "flip rate {rate} over {total} labels");
    }

    #[test]
    fn genders_alternate_for_balanced_sampling() {
        let (m, _) = manifest_skeleton(&spec(), ".").unwrap();
        let males = m.subjects().iter().step_by(2).count();
        assert_eq!(males, 3);
        assert_eq!(m.records[0].gender, Gender::Male);
        assert_eq!(m.records[spec().images_per_subject].gender, Gender::Female);
    }
}
