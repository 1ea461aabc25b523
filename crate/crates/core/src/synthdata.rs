//! Deterministic synthetic corpus: one grayscale primitive per class with
//! position and size jitter, pixel noise, a low-contrast subset and planted
//! byte-exact duplicates.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, Digest, Manifest, ManifestEntry, Result};
use crate::imaging::{encode_image, Image};
use crate::rng::{derive_seed, SplitMix64};

pub const SHAPES: [&str; 4] = ["disc", "annulus", "square", "cross"];
const DUPLICATE_TAG: u64 = 0x0044_5550;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Files per class, duplicates included.
    pub per_class_counts: Vec<usize>,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub duplicate_count: usize,
    pub low_contrast_fraction: f64,
    /// Random position, size and brightness per image.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class_counts: vec![500; 4],
            image_size: 32,
            noise_sigma: 0.01,
            duplicate_count: 0,
            low_contrast_fraction: 0.3,
            jitter: true,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Class counts of the reference corpus, 7023 files before deduplication.
    pub fn full_scale() -> Self {
        Self { per_class_counts: vec![2000, 1621, 1645, 1757], duplicate_count: 194, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Manifest(format!("synthetic spec: {m}")));
        if !(2..=SHAPES.len()).contains(&self.num_classes) {
            return bad(format!("num_classes must be 2..={}, got {}", SHAPES.len(), self.num_classes));
        }
        if self.per_class_counts.len() != self.num_classes {
            return bad(format!("{} counts for {} classes", self.per_class_counts.len(), self.num_classes));
        }
        if self.per_class_counts.contains(&0) {
            return bad("every class needs at least one image".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be nonnegative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.low_contrast_fraction) {
            return bad(format!("low_contrast_fraction {} outside [0, 1]", self.low_contrast_fraction));
        }
        // Each class keeps its first slot as an original.
        let capacity: usize = self.per_class_counts.iter().map(|c| c - 1).sum();
        if self.duplicate_count > capacity {
            return bad(format!("duplicate_count {} exceeds the {capacity} available slots", self.duplicate_count));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("c{k}_{}", SHAPES[k])).collect()
    }

    pub fn total(&self) -> usize {
        self.per_class_counts.iter().sum()
    }
}

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    match class {
        0 => dy.hypot(dx) <= r,
        1 => {
            let d = dy.hypot(dx);
            d <= r && d >= 0.55 * r
        }
        2 => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
        _ => (dy.abs() <= 0.3 * r && dx.abs() <= r) || (dx.abs() <= 0.3 * r && dy.abs() <= r),
    }
}

/// Render one sample as 8-bit gray levels.
pub fn render(spec: &SynthSpec, class: usize, index: usize) -> Image {
    let mut rng = SplitMix64::new(derive_seed(spec.seed, &[class as u64, index as u64]));
    let s = spec.image_size as f64;
    let (cy, cx, r, fg) = if spec.jitter {
        (
            s / 2.0 + rng.uniform(-0.15, 0.15) * s,
            s / 2.0 + rng.uniform(-0.15, 0.15) * s,
            rng.uniform(0.22, 0.32) * s,
            rng.uniform(0.7, 0.95),
        )
    } else {
        (s / 2.0, s / 2.0, 0.27 * s, 0.85)
    };
    // Linear bias field across the frame, as in uncorrected scanner shading.
    let (gy, gx) = if spec.jitter {
        let theta = rng.uniform(0.0, std::f64::consts::TAU);
        (0.3 * theta.sin() / s, 0.3 * theta.cos() / s)
    } else {
        (0.0, 0.0)
    };
    let low_contrast = rng.bernoulli(spec.low_contrast_fraction);
    let n = spec.image_size;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let background = 0.2 + gy * (y as f64 + 0.5 - s / 2.0) + gx * (x as f64 + 0.5 - s / 2.0);
            let mut v = if inside(class, dy, dx, r) { fg } else { background };
            if low_contrast {
                v = 0.4 + 0.2 * v;
            }
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * rng.normal();
            }
            data.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
        }
    }
    Image::new(n, n, 1, data).expect("square gray image")
}

/// Pick the duplicate slots and their same-class sources.
fn plan_duplicates(spec: &SynthSpec) -> Vec<Option<(usize, usize)>> {
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (k, &c) in spec.per_class_counts.iter().enumerate() {
        slots.extend((1..c).map(|i| (k, i)));
    }
    let mut rng = SplitMix64::new(derive_seed(spec.seed, &[DUPLICATE_TAG]));
    rng.shuffle(&mut slots);
    let targets: std::collections::BTreeSet<(usize, usize)> = slots.into_iter().take(spec.duplicate_count).collect();
    let mut plan = Vec::with_capacity(spec.total());
    for (k, &c) in spec.per_class_counts.iter().enumerate() {
        let originals: Vec<usize> = (0..c).filter(|i| !targets.contains(&(k, *i))).collect();
        for i in 0..c {
            plan.push(targets.contains(&(k, i)).then(|| (k, originals[rng.below(originals.len() as u64) as usize])));
        }
    }
    plan
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Write `out_dir/<class>/<class>_<index>.pgm` for every slot plus
/// `manifest.json` with paths relative to `out_dir`. The returned manifest
/// carries absolute paths.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let names = spec.class_names();
    let slots: Vec<(usize, usize)> =
        spec.per_class_counts.iter().enumerate().flat_map(|(k, &c)| (0..c).map(move |i| (k, i))).collect();
    let plan = plan_duplicates(spec);
    let rel = |k: usize, i: usize| PathBuf::from(&names[k]).join(format!("{}_{i:05}.pgm", names[k]));
    let bytes: Vec<Vec<u8>> = slots
        .par_iter()
        .zip(plan.par_iter())
        .map(|(&(k, i), dup)| {
            let (sk, si) = dup.unwrap_or((k, i));
            encode_image(&render(spec, sk, si))
        })
        .collect();
    let entries = slots
        .par_iter()
        .zip(bytes.par_iter())
        .map(|(&(k, i), b)| {
            let path = rel(k, i);
            write_file(&out_dir.join(&path), b)?;
            Ok(ManifestEntry {
                sample_id: format!("{}/{}", names[k], path.file_name().unwrap().to_string_lossy()),
                path,
                label: k,
                digest: Digest::of_bytes(b),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(names, entries)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    let mut resolved = manifest;
    resolved.resolve_paths(out_dir);
    Ok(resolved)
}
