//! Slices, label views, augmentation, partitioning and the synthetic generator.

mod holdout;
mod io;
mod synth;

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use holdout::{
    holdout_list, holdout_split, seeded_split, DatasetPartition, IrLabel, SplitCounts, HOLDOUT_COUNT,
    HOLDOUT_LISTS, HOLDOUT_SEEDS, TEST_COUNT, VALIDATION_COUNT, VOLUME_COUNT,
};
pub use io::{load_dataset, save_dataset, DatasetManifest};
pub use synth::{synth_dataset, SynthSpec};

/// Label of the first (upper) structure.
pub const CLASS_A: u8 = 1;
/// Label of the second (lower) structure.
pub const CLASS_B: u8 = 2;

/// One 2D grayscale slice with its label mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub volume_id: u32,
    pub slice_index: u32,
    pub class_set: BTreeSet<u8>,
}

impl SampleRecord {
    pub fn new(height: usize, width: usize, image: Vec<f32>, mask: Vec<u8>, volume_id: u32, slice_index: u32) -> Result<Self> {
        if image.len() != height * width || mask.len() != height * width {
            return Err(Error::config(format!(
                "volume {volume_id} slice {slice_index}: image/mask size differs from {height}×{width}"
            )));
        }
        let class_set = classes_present(&mask);
        Ok(SampleRecord {
            height,
            width,
            image,
            mask,
            volume_id,
            slice_index,
            class_set,
        })
    }

    pub fn key(&self) -> (u32, u32) {
        (self.volume_id, self.slice_index)
    }

    pub fn contains(&self, class: u8) -> bool {
        self.class_set.contains(&class)
    }

    pub fn pixel_count(&self, class: u8) -> usize {
        self.mask.iter().filter(|&&y| y == class).count()
    }

    /// `1 × 1 × H × W` tensor of the image.
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(1, 1, self.height, self.width, self.image.clone())
    }

    /// Check the record's invariants against a class vocabulary.
    pub fn validate(&self, vocabulary: &BTreeSet<u8>) -> Result<()> {
        if self.image.len() != self.height * self.width || self.mask.len() != self.image.len() {
            return Err(Error::config("image and mask shapes differ"));
        }
        if let Some(bad) = self.mask.iter().find(|y| !vocabulary.contains(y)) {
            return Err(Error::config(format!("label {bad} outside the class vocabulary")));
        }
        if self.class_set != classes_present(&self.mask) {
            return Err(Error::config("class_set disagrees with the mask"));
        }
        Ok(())
    }
}

fn classes_present(mask: &[u8]) -> BTreeSet<u8> {
    let mut seen = [false; 256];
    for &y in mask {
        seen[y as usize] = true;
    }
    (1..=255u8).filter(|&c| seen[c as usize]).collect()
}

/// Relabel so `keep` maps to `1..=|keep|` in ascending order and everything else to 0.
pub fn restrict_labels(record: &SampleRecord, keep: &BTreeSet<u8>) -> Result<SampleRecord> {
    if keep.is_empty() {
        return Err(Error::config("restrict_labels needs a nonempty class set"));
    }
    let mut lut = [0u8; 256];
    for (i, &c) in keep.iter().enumerate() {
        if c != 0 {
            lut[c as usize] = (i + 1) as u8;
        }
    }
    let mask: Vec<u8> = record.mask.iter().map(|&y| lut[y as usize]).collect();
    let mut out = record.clone();
    out.class_set = classes_present(&mask);
    out.mask = mask;
    Ok(out)
}

/// Zero every label outside `keep`, leaving kept labels unchanged.
pub fn keep_labels(record: &SampleRecord, keep: &BTreeSet<u8>) -> SampleRecord {
    let mut out = record.clone();
    out.mask.iter_mut().for_each(|y| {
        if !keep.contains(y) {
            *y = 0
        }
    });
    out.class_set = classes_present(&out.mask);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("augment.flip_probability must be in [0, 1]"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("augment scale range must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// Horizontal mirror of image and mask.
pub fn flip_horizontal(record: &SampleRecord) -> SampleRecord {
    let mut out = record.clone();
    let w = record.width;
    for y in 0..record.height {
        let row = y * w..(y + 1) * w;
        out.image[row.clone()].reverse();
        out.mask[row].reverse();
    }
    out
}

/// Bilinear resample of one plane scaled by `factor` about its center, edges clamped.
pub fn rescale_plane(plane: &[f32], h: usize, w: usize, factor: f64) -> Vec<f32> {
    if factor == 1.0 {
        return plane.to_vec();
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let sy = (y as f64 - cy) / factor + cy;
        for x in 0..w {
            let sx = (x as f64 - cx) / factor + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn rescale_mask(mask: &[u8], h: usize, w: usize, factor: f64) -> Vec<u8> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let ny = ((y as f64 - cy) / factor + cy).round();
        for x in 0..w {
            let nx = ((x as f64 - cx) / factor + cx).round();
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                out[y * w + x] = mask[ny as usize * w + nx as usize];
            }
        }
    }
    out
}

/// Isotropic rescale about the image center, cropped or padded back to the
/// original size. Image: bilinear with edge clamping; mask: nearest, zero outside.
pub fn rescale(record: &SampleRecord, factor: f64) -> SampleRecord {
    if factor == 1.0 {
        return record.clone();
    }
    let (h, w) = (record.height, record.width);
    let mask = rescale_mask(&record.mask, h, w, factor);
    let mut out = record.clone();
    out.image = rescale_plane(&record.image, h, w, factor);
    out.class_set = classes_present(&mask);
    out.mask = mask;
    out
}

/// One drawn augmentation, applicable to a record and to any aligned maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub factor: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, factor: 1.0 };

    /// Always consumes exactly two draws.
    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_probability;
        let u = rng.random::<f64>();
        AugmentDraw {
            flip,
            factor: cfg.scale_min + u * (cfg.scale_max - cfg.scale_min),
        }
    }

    pub fn apply(&self, record: &SampleRecord) -> SampleRecord {
        let out = if self.flip { flip_horizontal(record) } else { record.clone() };
        rescale(&out, self.factor)
    }

    /// Same transform on every channel plane of a `1 × C × H × W` map.
    pub fn apply_map(&self, map: &Tensor) -> Tensor {
        let (h, w) = (map.h, map.w);
        let mut out = map.clone();
        for plane in out.data.chunks_mut(h * w) {
            if self.flip {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            }
            let scaled = rescale_plane(plane, h, w, self.factor);
            plane.copy_from_slice(&scaled);
        }
        out
    }
}

/// Random horizontal flip and isotropic rescale. Always consumes exactly two draws.
pub fn augment(record: &SampleRecord, cfg: &AugmentConfig, rng: &mut Rng) -> SampleRecord {
    AugmentDraw::sample(cfg, rng).apply(record)
}
