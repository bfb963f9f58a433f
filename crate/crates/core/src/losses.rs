//! Weighted cross-entropy segmentation loss, soft-target distillation loss,
//! their gradients with respect to logits, and inverse-frequency class weights.
//!
//! All maps here are pixel-major `f64` ([`ProbMap`]); a batch is simply a map
//! whose pixel count `Z` spans every image in it, so the `1/Z` normalization
//! averages over all pixels of the batch.

use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_EPS: f64 = 1e-7;

/// `pixels × n_classes` values, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub n_classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(n_classes: usize, data: Vec<f64>) -> Self {
        assert!(n_classes > 0 && data.len() % n_classes == 0, "ragged class map");
        ProbMap { n_classes, data }
    }

    pub fn pixels(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn pixel(&self, x: usize) -> &[f64] {
        &self.data[x * self.n_classes..(x + 1) * self.n_classes]
    }

    pub fn uniform(n_classes: usize, pixels: usize) -> Self {
        ProbMap::new(n_classes, vec![1.0 / n_classes as f64; n_classes * pixels])
    }

    pub fn one_hot(labels: &[u8], n_classes: usize) -> Self {
        let mut data = vec![0.0; labels.len() * n_classes];
        for (x, &y) in labels.iter().enumerate() {
            data[x * n_classes + y as usize] = 1.0;
        }
        ProbMap::new(n_classes, data)
    }

    /// Flatten an NCHW tensor into pixel-major order over `(n, y, x)`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, p) = (t.c, t.plane());
        let mut data = vec![0.0; t.data.len()];
        for i in 0..t.n {
            let s = t.sample(i);
            for x in 0..p {
                for ch in 0..c {
                    data[(i * p + x) * c + ch] = s[ch * p + x] as f64;
                }
            }
        }
        ProbMap::new(c, data)
    }

    /// Inverse of [`ProbMap::from_tensor`].
    pub fn to_tensor(&self, n: usize, h: usize, w: usize) -> Tensor {
        let (c, p) = (self.n_classes, h * w);
        assert_eq!(self.pixels(), n * p, "pixel count mismatch");
        let mut t = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            let s = t.sample_mut(i);
            for x in 0..p {
                for ch in 0..c {
                    s[ch * p + x] = self.data[(i * p + x) * c + ch] as f32;
                }
            }
        }
        t
    }
}

/// Per-pixel softmax of a logit map.
pub fn softmax(logits: &ProbMap) -> ProbMap {
    let c = logits.n_classes;
    let mut out = logits.data.clone();
    for px in out.chunks_mut(c) {
        let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        px.iter_mut().for_each(|v| *v /= z);
    }
    ProbMap::new(c, out)
}

/// Soft targets at temperature `t`: `softmax(logits / t)`, computed from
/// probabilities as `p^(1/t)` renormalized.
pub fn soften(probs: &ProbMap, temperature: f64) -> ProbMap {
    if temperature == 1.0 {
        return probs.clone();
    }
    let c = probs.n_classes;
    let mut out = probs.data.clone();
    for px in out.chunks_mut(c) {
        px.iter_mut().for_each(|v| *v = v.max(PROB_EPS).powf(1.0 / temperature));
        let z: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= z);
    }
    ProbMap::new(c, out)
}

/// Class weights of one head: inverse label frequency, mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        ClassWeights(vec![1.0; n_classes])
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!(
                "class {c} has no pixels in the training set; its inverse frequency is undefined"
            )));
        }
        let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        Ok(ClassWeights(inv.into_iter().map(|w| w / mean).collect()))
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        ClassWeights(self.0.iter().map(|w| w * lambda).collect())
    }
}

/// Count labels over a set of masks and convert to weights.
pub fn compute_class_weights<'a>(masks: impl IntoIterator<Item = &'a [u8]>, n_classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0u64; n_classes];
    for m in masks {
        for &y in m {
            let y = y as usize;
            if y >= n_classes {
                return Err(Error::config(format!("label {y} outside the {n_classes}-class vocabulary")));
            }
            counts[y] += 1;
        }
    }
    ClassWeights::from_counts(&counts)
}

fn check_shapes(p: &ProbMap, t: &ProbMap, w: &ClassWeights) -> Result<()> {
    if p.n_classes != t.n_classes || p.data.len() != t.data.len() {
        return Err(Error::usage("prediction and target maps differ in shape"));
    }
    if w.0.len() != p.n_classes {
        return Err(Error::usage("class weight count differs from class count"));
    }
    Ok(())
}

/// `(1/Z) Σ_x Σ_c w_c t_c(x) (−log max(p_c(x), ε))`.
pub fn cross_entropy(p: &ProbMap, t: &ProbMap, w: &ClassWeights) -> Result<f64> {
    check_shapes(p, t, w)?;
    let c = p.n_classes;
    let mut total = 0.0;
    for (pp, tp) in p.data.chunks(c).zip(t.data.chunks(c)) {
        for k in 0..c {
            if tp[k] != 0.0 {
                total += w.0[k] * tp[k] * -pp[k].clamp(PROB_EPS, 1.0).ln();
            }
        }
    }
    Ok(total / p.pixels() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits behind `p`:
/// `(1/Z) (p_k Σ_c a_c − a_k)` with `a_c = w_c t_c` over unclamped terms.
pub fn cross_entropy_grad(p: &ProbMap, t: &ProbMap, w: &ClassWeights) -> Result<ProbMap> {
    check_shapes(p, t, w)?;
    let c = p.n_classes;
    let z = p.pixels() as f64;
    let mut g = vec![0.0; p.data.len()];
    let mut a = vec![0.0; c];
    for ((pp, tp), gp) in p.data.chunks(c).zip(t.data.chunks(c)).zip(g.chunks_mut(c)) {
        let mut sum_a = 0.0;
        for k in 0..c {
            a[k] = if pp[k] >= PROB_EPS { w.0[k] * tp[k] } else { 0.0 };
            sum_a += a[k];
        }
        for k in 0..c {
            gp[k] = (pp[k] * sum_a - a[k]) / z;
        }
    }
    Ok(ProbMap::new(c, g))
}

/// Pixel-averaged weighted cross-entropy against hard labels.
pub fn seg_loss(p: &ProbMap, labels: &[u8], w: &ClassWeights) -> Result<f64> {
    check_labels(p, labels)?;
    cross_entropy(p, &ProbMap::one_hot(labels, p.n_classes), w)
}

pub fn seg_loss_grad(p: &ProbMap, labels: &[u8], w: &ClassWeights) -> Result<ProbMap> {
    check_labels(p, labels)?;
    cross_entropy_grad(p, &ProbMap::one_hot(labels, p.n_classes), w)
}

fn check_labels(p: &ProbMap, labels: &[u8]) -> Result<()> {
    if labels.len() != p.pixels() {
        return Err(Error::usage("label count differs from pixel count"));
    }
    if labels.iter().any(|&y| y as usize >= p.n_classes) {
        return Err(Error::usage("label outside the head's class range"));
    }
    Ok(())
}

/// Sum over old heads of the pixel-averaged soft-target cross-entropy.
pub fn distill_loss(preds: &[ProbMap], targets: &[ProbMap], weights: &[ClassWeights]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != weights.len() {
        return Err(Error::usage("distillation needs one target and weight set per old head"));
    }
    preds
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, t), w)| cross_entropy(p, t, w))
        .sum()
}

pub fn distill_grad(preds: &[ProbMap], targets: &[ProbMap], weights: &[ClassWeights]) -> Result<Vec<ProbMap>> {
    if preds.len() != targets.len() || preds.len() != weights.len() {
        return Err(Error::usage("distillation needs one target and weight set per old head"));
    }
    preds
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, t), w)| cross_entropy_grad(p, t, w))
        .collect()
}

/// Which loss terms a batch contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// `L_seg` on the trained head only (single-head baselines, finetuning).
    SegOnly,
    /// `L_seg` on the new head plus `L_dis` on every old head.
    SegPlusDistill,
    /// An exemplar batch from old dataset `j`: `L_dis` at head `j` only.
    ExemplarDistill { head: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossComponents {
    pub seg: Option<f64>,
    /// `(head, L_dis(H_head))` for each old head evaluated on the batch.
    pub distill: Vec<(usize, f64)>,
}

pub fn total_loss(routing: Routing, parts: &LossComponents) -> f64 {
    let seg = parts.seg.unwrap_or(0.0);
    match routing {
        Routing::SegOnly => seg,
        Routing::SegPlusDistill => seg + parts.distill.iter().map(|(_, l)| l).sum::<f64>(),
        Routing::ExemplarDistill { head } => parts
            .distill
            .iter()
            .filter(|(h, _)| *h == head)
            .map(|(_, l)| l)
            .sum(),
    }
}

/// Old-head probability maps for a fixed image set, produced once in
/// deterministic inference mode and never modified afterwards.
#[derive(Debug, Clone)]
pub struct SoftTargetCache {
    heads: Vec<usize>,
    /// `maps[sample][k]` is the `1 × n_classes × H × W` map of `heads[k]`.
    maps: Vec<Vec<Tensor>>,
}

impl SoftTargetCache {
    pub fn generate(net: &Network, images: &[&Tensor], heads: &[usize], temperature: f64, batch: usize) -> Result<Self> {
        let mut maps = Vec::with_capacity(images.len());
        let mut unused: Rng = crate::rng::stream(0, "unused");
        if heads.is_empty() {
            return Ok(SoftTargetCache {
                heads: Vec::new(),
                maps: vec![Vec::new(); images.len()],
            });
        }
        for chunk in images.chunks(batch.max(1)) {
            let x = stack(chunk);
            let out = net.forward(&x, heads, Mode::Infer, &mut unused)?;
            for i in 0..chunk.len() {
                maps.push(
                    out.iter()
                        .map(|t| {
                            let one = Tensor::from_vec(1, t.c, t.h, t.w, t.sample(i).to_vec());
                            if temperature == 1.0 {
                                one
                            } else {
                                soften(&ProbMap::from_tensor(&one), temperature).to_tensor(1, t.h, t.w)
                            }
                        })
                        .collect(),
                );
            }
        }
        Ok(SoftTargetCache {
            heads: heads.to_vec(),
            maps,
        })
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, sample: usize, head: usize) -> Option<&Tensor> {
        let k = self.heads.iter().position(|&h| h == head)?;
        self.maps.get(sample).map(|m| &m[k])
    }
}

/// Stack single-image tensors into one batch.
pub fn stack(images: &[&Tensor]) -> Tensor {
    let first = images[0];
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for t in images {
        assert!(t.n == 1 && t.c == first.c && t.h == first.h && t.w == first.w);
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(images.len(), first.c, first.h, first.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_logits(n_classes: usize, pixels: usize, rng: &mut Rng) -> ProbMap {
        ProbMap::new(n_classes, (0..n_classes * pixels).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        assert_eq!(ClassWeights::from_counts(&[50, 50]).unwrap().0, vec![1.0, 1.0]);
    }

    #[test]
    fn ninety_ten_counts_give_point_two_and_one_point_eight() {
        let w = ClassWeights::from_counts(&[90, 10]).unwrap();
        assert!((w.0[0] - 0.2).abs() < 1e-12 && (w.0[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn quarter_foreground_gives_ratio_three() {
        let mask: Vec<u8> = (0..4096).map(|i| (i < 1024) as u8).collect();
        let w = compute_class_weights([mask.as_slice()], 2).unwrap();
        assert!((w.0[1] / w.0[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequency_class_is_named() {
        let mask = [0u8; 16];
        match compute_class_weights([&mask[..]], 2) {
            Err(Error::Config(msg)) => assert!(msg.contains("class 1")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn perfect_prediction_has_zero_seg_loss() {
        let labels = [0u8, 1, 1, 0, 1];
        let p = ProbMap::one_hot(&labels, 2);
        assert!(seg_loss(&p, &labels, &ClassWeights::uniform(2)).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let labels = [0u8, 1, 1, 0];
        let p = ProbMap::uniform(2, 4);
        let l = seg_loss(&p, &labels, &ClassWeights::uniform(2)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let d = distill_loss(&[p.clone()], &[ProbMap::uniform(2, 4)], &[ClassWeights::uniform(2)]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let mut rng = crate::rng::stream(1, "t");
        let p = softmax(&random_logits(2, 16, &mut rng));
        let labels: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let w = ClassWeights(vec![0.4, 1.6]);
        let a = seg_loss(&p, &labels, &w).unwrap();
        let b = seg_loss(&p, &labels, &w.scaled(2.0)).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn self_distillation_of_hard_targets_is_zero() {
        let t = ProbMap::one_hot(&[1, 0, 0, 1], 2);
        assert!(distill_loss(&[t.clone()], &[t], &[ClassWeights::uniform(2)]).unwrap() < 1e-6);
    }

    #[test]
    fn self_distillation_equals_mean_entropy() {
        let mut rng = crate::rng::stream(2, "t");
        let t = softmax(&random_logits(3, 10, &mut rng));
        let entropy: f64 = t
            .data
            .chunks(3)
            .map(|px| -px.iter().map(|v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / 10.0;
        let l = distill_loss(&[t.clone()], &[t], &[ClassWeights::uniform(3)]).unwrap();
        assert!((l - entropy).abs() < 1e-12);
    }

    #[test]
    fn mismatched_head_lists_are_rejected() {
        let p = ProbMap::uniform(2, 4);
        assert!(distill_loss(&[p.clone(), p.clone()], &[p.clone()], &[ClassWeights::uniform(2)]).is_err());
    }

    #[test]
    fn routing_selects_components() {
        let parts = LossComponents {
            seg: Some(0.5),
            distill: vec![(0, 0.25), (1, 0.125)],
        };
        assert_eq!(total_loss(Routing::SegOnly, &parts), 0.5);
        assert_eq!(total_loss(Routing::SegPlusDistill, &parts), 0.875);
        assert_eq!(total_loss(Routing::ExemplarDistill { head: 0 }, &parts), 0.25);
        let no_dis = LossComponents {
            seg: Some(0.5),
            distill: vec![(0, 0.0)],
        };
        assert_eq!(total_loss(Routing::SegPlusDistill, &no_dis), 0.5);
    }

    #[test]
    fn tensor_round_trip_preserves_values() {
        let t = Tensor::from_vec(2, 3, 2, 2, (0..24).map(|v| v as f32 * 0.5).collect());
        let m = ProbMap::from_tensor(&t);
        assert_eq!(m.pixel(5), &[6.5, 8.5, 10.5]);
        assert_eq!(m.to_tensor(2, 2, 2), t);
    }

    #[test]
    fn soften_at_unit_temperature_is_identity_and_higher_flattens() {
        let p = ProbMap::new(2, vec![0.9, 0.1]);
        assert_eq!(soften(&p, 1.0), p);
        let s = soften(&p, 2.0);
        assert!(s.data[0] < 0.9 && (s.data[0] + s.data[1] - 1.0).abs() < 1e-12);
    }
}
