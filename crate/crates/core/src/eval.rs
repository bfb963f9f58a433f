//! Dice, mean surface distance, per-volume evaluation and metric reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::losses::stack;
use crate::network::Network;
use crate::tensor::Tensor;

/// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (pa, gb) = (a == class, b == class);
        p += pa as u64;
        g += gb as u64;
        both += (pa && gb) as u64;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Foreground pixels with a 4-neighbour outside the class (image border counts as outside).
pub fn boundary(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == class;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Sum over `from` of the distance to the nearest point of `to`.
fn directed_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Symmetric mean boundary distance of one slice in mm; ∞ if exactly one boundary is empty.
pub fn mean_surface_distance(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8, spacing: f64) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::usage("mask shapes differ"));
    }
    if !(spacing > 0.0) {
        return Err(Error::config("spacing must be positive"));
    }
    let pts = |m: &[u8]| -> Vec<[f64; 3]> {
        boundary(m, h, w, class)
            .into_iter()
            .map(|(y, x)| [0.0, y as f64 * spacing, x as f64 * spacing])
            .collect()
    };
    let (p, g) = (pts(pred), pts(gt));
    Ok(match (p.is_empty(), g.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ => (directed_sum(&p, &g) + directed_sum(&g, &p)) / (p.len() + g.len()) as f64,
    })
}

/// Dice over all voxels of a volume and the pooled slice-wise surface distance.
///
/// Boundary distances are taken within each slice; a slice where only one of
/// the two surfaces is present is matched to the nearest boundary point in any
/// slice, with `slice_spacing` between slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeScore {
    pub dice: f64,
    pub msd: f64,
    pub omitted: bool,
}

pub fn volume_metrics(pred: &[Vec<u8>], gt: &[Vec<u8>], h: usize, w: usize, class: u8, spacing: f64, slice_spacing: f64) -> Result<VolumeScore> {
    if pred.len() != gt.len() || pred.iter().chain(gt).any(|s| s.len() != h * w) {
        return Err(Error::usage("prediction and ground truth volumes differ in shape"));
    }
    let flat_p: Vec<u8> = pred.concat();
    let flat_g: Vec<u8> = gt.concat();
    let d = dice(&flat_p, &flat_g, class);
    let pts = |vol: &[Vec<u8>]| -> Vec<Vec<[f64; 3]>> {
        vol.iter()
            .enumerate()
            .map(|(z, m)| {
                boundary(m, h, w, class)
                    .into_iter()
                    .map(|(y, x)| [z as f64 * slice_spacing, y as f64 * spacing, x as f64 * spacing])
                    .collect()
            })
            .collect()
    };
    let (p, g) = (pts(pred), pts(gt));
    let (np, ng): (usize, usize) = (p.iter().map(Vec::len).sum(), g.iter().map(Vec::len).sum());
    let omitted = !flat_p.contains(&class);
    let msd = match (np == 0, ng == 0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ => {
            let all_p: Vec<[f64; 3]> = p.concat();
            let all_g: Vec<[f64; 3]> = g.concat();
            let mut total = 0.0;
            for (ps, gs) in p.iter().zip(&g) {
                total += if gs.is_empty() { directed_sum(ps, &all_g) } else { directed_sum(ps, gs) };
                total += if ps.is_empty() { directed_sum(gs, &all_p) } else { directed_sum(gs, ps) };
            }
            total / (np + ng) as f64
        }
    };
    Ok(VolumeScore { dice: d, msd, omitted })
}

/// Argmax labels of one head, mapped back to dataset labels through its class map.
pub fn predict_labels(net: &Network, records: &[&SampleRecord], head: usize, batch: usize) -> Result<Vec<Vec<u8>>> {
    let spec = net
        .head_spec(head)
        .ok_or_else(|| Error::usage(format!("head {head} does not exist")))?
        .clone();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let imgs: Vec<Tensor> = chunk.iter().map(|r| r.tensor()).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let probs = net.predict(&stack(&refs), head)?;
        let p = probs.plane();
        for i in 0..chunk.len() {
            let s = probs.sample(i);
            out.push(
                (0..p)
                    .map(|x| {
                        let mut best = 0;
                        for c in 1..probs.c {
                            if s[c * p + x] > s[best * p + x] {
                                best = c;
                            }
                        }
                        spec.class_map[best]
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Role of a class in the incremental setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cur,
    Inc,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cur => "cur",
            Role::Inc => "inc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub volume_id: u32,
    pub role: Role,
    pub class: u8,
    pub dice: f64,
    /// `None` when the surface distance is infinite.
    pub msd: Option<f64>,
    pub omitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_dice: Option<f64>,
    pub mean_msd: Option<f64>,
    pub counted: usize,
    pub omitted: usize,
}

/// Means over non-omitted volumes with the number left out.
pub fn aggregate(entries: &[&VolumeEntry]) -> Aggregate {
    let kept: Vec<&&VolumeEntry> = entries.iter().filter(|e| !e.omitted).collect();
    let mean = |xs: Vec<f64>| -> Option<f64> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    Aggregate {
        mean_dice: mean(kept.iter().map(|e| e.dice).collect()),
        mean_msd: mean(kept.iter().filter_map(|e| e.msd).collect()),
        counted: kept.len(),
        omitted: entries.len() - kept.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub ir: String,
    pub holdout: u32,
    pub seed: u64,
    pub per_volume: Vec<VolumeEntry>,
    pub aggregates: BTreeMap<Role, Aggregate>,
}

impl MetricsReport {
    pub fn new(strategy: &str, ir: &str, holdout: u32, seed: u64, mut per_volume: Vec<VolumeEntry>) -> Self {
        per_volume.sort_by_key(|e| (e.role, e.volume_id));
        let mut aggregates = BTreeMap::new();
        for role in [Role::Cur, Role::Inc] {
            let es: Vec<&VolumeEntry> = per_volume.iter().filter(|e| e.role == role).collect();
            if !es.is_empty() {
                aggregates.insert(role, aggregate(&es));
            }
        }
        MetricsReport {
            strategy: strategy.to_string(),
            ir: ir.to_string(),
            holdout,
            seed,
            per_volume,
            aggregates,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn mean_dice(&self, role: Role) -> Option<f64> {
        self.aggregates.get(&role).and_then(|a| a.mean_dice)
    }
}

/// Score one head's predictions on grouped test volumes.
pub fn evaluate_head(
    net: &Network,
    volumes: &BTreeMap<u32, Vec<&SampleRecord>>,
    head: usize,
    class: u8,
    role: Role,
    spacing: f64,
    slice_spacing: f64,
) -> Result<Vec<VolumeEntry>> {
    let mut out = Vec::with_capacity(volumes.len());
    for (&vid, slices) in volumes {
        let (h, w) = (slices[0].height, slices[0].width);
        let pred = predict_labels(net, slices, head, 8)?;
        let gt: Vec<Vec<u8>> = slices.iter().map(|r| r.mask.clone()).collect();
        let s = volume_metrics(&pred, &gt, h, w, class, spacing, slice_spacing)?;
        out.push(VolumeEntry {
            volume_id: vid,
            role,
            class,
            dice: s.dice,
            msd: s.msd.is_finite().then_some(s.msd),
            omitted: s.omitted,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for &(y, x) in on {
            m[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask(1, 10, &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]);
        let b = mask(1, 10, &[(0, 3), (0, 4), (0, 5), (0, 6)]);
        assert!((dice(&a, &b, 1) - 0.6).abs() < 1e-12);
        assert_eq!(dice(&a, &a, 1), 1.0);
        assert_eq!(dice(&a, &mask(1, 10, &[(0, 9)]), 1), 0.0);
        assert_eq!(dice(&[0; 4], &[0; 4], 1), 1.0);
        assert_eq!(dice(&a, &b, 1), dice(&b, &a, 1));
    }

    #[test]
    fn msd_examples() {
        let a = mask(8, 8, &[(2, 2)]);
        let b = mask(8, 8, &[(2, 5)]);
        assert!((mean_surface_distance(&a, &b, 8, 8, 1, 0.4).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(mean_surface_distance(&a, &a, 8, 8, 1, 0.4).unwrap(), 0.0);
        assert_eq!(mean_surface_distance(&[0; 64], &a, 8, 8, 1, 0.4).unwrap(), f64::INFINITY);
        assert_eq!(mean_surface_distance(&[0; 64], &[0; 64], 8, 8, 1, 0.4).unwrap(), 0.0);
        assert!(mean_surface_distance(&a, &b, 8, 8, 1, 0.0).is_err());
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let on: Vec<(usize, usize)> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
        let b = boundary(&mask(5, 5, &on), 5, 5, 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn empty_prediction_is_omitted() {
        let gt = vec![mask(4, 4, &[(1, 1)]), mask(4, 4, &[])];
        let pred = vec![vec![0; 16], vec![0; 16]];
        let s = volume_metrics(&pred, &gt, 4, 4, 1, 0.4, 1.0).unwrap();
        assert!(s.omitted && s.msd.is_infinite());
        assert_eq!(s.dice, 0.0);
    }

    #[test]
    fn one_sided_slices_search_across_slices() {
        // Prediction present only in slice 0, ground truth in slices 0 and 1.
        let gt = vec![mask(4, 4, &[(1, 1)]), mask(4, 4, &[(1, 1)])];
        let pred = vec![mask(4, 4, &[(1, 1)]), mask(4, 4, &[])];
        let s = volume_metrics(&pred, &gt, 4, 4, 1, 0.4, 1.0).unwrap();
        // Three boundary points: two at distance 0, the slice-1 point at 1 mm.
        assert!((s.msd - 1.0 / 3.0).abs() < 1e-12);
        assert!(!s.omitted);
    }

    #[test]
    fn aggregates_skip_omitted_volumes() {
        let e = |v, d, o: bool| VolumeEntry {
            volume_id: v,
            role: Role::Cur,
            class: 1,
            dice: d,
            msd: if o { None } else { Some(1.0) },
            omitted: o,
        };
        let r = MetricsReport::new("cur_seg", "IR01", 1, 0, vec![e(2, 0.8, false), e(1, 0.0, true), e(3, 0.6, false)]);
        let a = &r.aggregates[&Role::Cur];
        assert!((a.mean_dice.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!((a.counted, a.omitted), (2, 1));
        assert_eq!(r.per_volume[0].volume_id, 1);
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
