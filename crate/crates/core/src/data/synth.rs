//! Seeded synthetic knee-like volumes.
//!
//! Every slice shows two smooth, non-overlapping bright structures (label 1
//! in the upper half, label 2 in the lower half) with darker rims, an
//! unlabeled distractor blob, a soft-tissue envelope and textured background.
//! Each volume gets its own intensity gain/offset and a linear bias field so
//! that volumes differ the way scans from different centers do. Masks are the
//! exact inside tests of the same shapes the image is rendered from.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{SampleRecord, CLASS_A, CLASS_B};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub image_size: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_volumes < 4 {
            return Err(Error::config("synthetic dataset needs at least 4 volumes"));
        }
        if self.image_size < 32 {
            return Err(Error::config("synthetic image_size must be at least 32"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::config("synthetic slices_per_volume must be positive"));
        }
        Ok(())
    }
}

/// A star-shaped blob in normalized image coordinates.
#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// `(amplitude, phase)` of boundary harmonics 2, 3, 4.
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(rng: &mut Rng, cx: f64, cy: f64, rx: (f64, f64), ry: (f64, f64), jitter: f64) -> Self {
        let mut h = [(0.0, 0.0); 3];
        for slot in &mut h {
            *slot = (rng.random_range(0.0..0.07), rng.random_range(0.0..std::f64::consts::TAU));
        }
        Blob {
            cx: cx + rng.random_range(-jitter..=jitter),
            cy: cy + rng.random_range(-jitter..=jitter),
            rx: rng.random_range(rx.0..rx.1),
            ry: rng.random_range(ry.0..ry.1),
            harmonics: h,
        }
    }

    /// Cross-section at slice position `t ∈ [-0.5, 0.5]`.
    fn at_slice(&self, t: f64, drift: f64) -> Blob {
        let scale = (1.0 - (1.3 * t).powi(2)).max(0.05).sqrt();
        Blob {
            cx: self.cx + drift * t,
            rx: self.rx * scale,
            ry: self.ry * scale,
            ..self.clone()
        }
    }

    /// Normalized radius: `< 1` inside, `1` on the boundary.
    fn radius(&self, u: f64, v: f64) -> f64 {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        let rho = (du * du + dv * dv).sqrt();
        let theta = dv.atan2(du);
        let boundary: f64 = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).cos())
                .sum::<f64>();
        rho / boundary
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct VolumeStyle {
    upper: Blob,
    lower: Blob,
    distractor: Blob,
    envelope: Blob,
    gain: f64,
    offset: f64,
    bias: (f64, f64),
    texture: [(f64, f64, f64, f64); 3],
    upper_level: f64,
    lower_level: f64,
}

impl VolumeStyle {
    fn random(rng: &mut Rng) -> Self {
        let mut texture = [(0.0, 0.0, 0.0, 0.0); 3];
        for t in &mut texture {
            *t = (
                rng.random_range(2.0..7.0),
                rng.random_range(2.0..7.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            );
        }
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let strength = rng.random_range(0.0..0.15);
        VolumeStyle {
            upper: Blob::random(rng, 0.5, 0.29, (0.20, 0.27), (0.13, 0.18), 0.04),
            lower: Blob::random(rng, 0.5, 0.73, (0.18, 0.25), (0.12, 0.17), 0.04),
            distractor: Blob::random(rng, 0.84, 0.47, (0.05, 0.08), (0.07, 0.10), 0.03),
            envelope: Blob::random(rng, 0.5, 0.5, (0.40, 0.46), (0.50, 0.56), 0.02),
            gain: rng.random_range(0.7..1.3),
            offset: rng.random_range(-0.1..0.1),
            bias: (strength * angle.cos(), strength * angle.sin()),
            texture,
            upper_level: rng.random_range(0.70..0.85),
            lower_level: rng.random_range(0.65..0.80),
        }
    }
}

/// Intensity of a bright structure with a darker rim and soft edge.
fn bone(r: f64, level: f64, edge: f64) -> f64 {
    let rim = smoothstep(0.75, 0.92, r);
    let inside = level * (1.0 - 0.4 * rim);
    let w = 1.0 - smoothstep(1.0 - edge, 1.0 + edge, r);
    inside * w
}

fn render_slice(style: &VolumeStyle, t: f64, size: usize, rng: &mut Rng) -> (Vec<f32>, Vec<u8>) {
    let upper = style.upper.at_slice(t, 0.06);
    let lower = style.lower.at_slice(t + 0.08, -0.05);
    let distractor = style.distractor.at_slice(t, 0.0);
    let envelope = style.envelope.at_slice(0.3 * t, 0.0);
    let split = 0.5 * (upper.cy + lower.cy);
    let gap = 1.5 / size as f64;
    let edge = 1.2 / (size as f64 * 0.15);
    let mut image = vec![0.0f32; size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let texture: f64 = style
                .texture
                .iter()
                .map(|(fu, fv, p, a)| a * (std::f64::consts::TAU * (fu * u + fv * v) + p).sin())
                .sum();
            let env = 1.0 - smoothstep(0.95, 1.05, envelope.radius(u, v));
            let mut val = 0.08 + 0.25 * env + texture * (0.5 + env);
            let ru = upper.radius(u, v);
            let rl = lower.radius(u, v);
            let in_upper = ru < 1.0 && v < split - gap;
            let in_lower = rl < 1.0 && v > split + gap;
            let bu = if v < split { bone(ru, style.upper_level, edge) } else { 0.0 };
            let bl = if v > split { bone(rl, style.lower_level, edge) } else { 0.0 };
            let bd = bone(distractor.radius(u, v), 0.7, edge);
            val = val.max(bu).max(bl).max(bd);
            val = style.gain * val + style.offset + style.bias.0 * (u - 0.5) + style.bias.1 * (v - 0.5);
            val += 0.03 * (rng.random::<f64>() - 0.5) * 2.0;
            image[y * size + x] = val as f32;
            mask[y * size + x] = if in_upper {
                CLASS_A
            } else if in_lower {
                CLASS_B
            } else {
                0
            };
        }
    }
    (image, mask)
}

/// Volumes `1..=n_volumes`, `slices_per_volume` slices each, bit-identical
/// for identical arguments.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_volumes * spec.slices_per_volume);
    for vol in 1..=spec.n_volumes as u32 {
        let mut rng = rng::stream(spec.seed, &format!("synth-volume-{vol}"));
        let style = VolumeStyle::random(&mut rng);
        for s in 0..spec.slices_per_volume {
            let t = if spec.slices_per_volume == 1 {
                0.0
            } else {
                s as f64 / (spec.slices_per_volume - 1) as f64 - 0.5
            };
            let (image, mask) = render_slice(&style, t, spec.image_size, &mut rng);
            out.push(SampleRecord::new(spec.image_size, spec.image_size, image, mask, vol, s as u32)?);
        }
    }
    Ok(out)
}
