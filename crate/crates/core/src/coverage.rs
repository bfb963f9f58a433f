//! Pruning a pool to representatives by greedy coverage in descriptor space.
//!
//! The objective is facility-location style: the cost of a selection `F` is
//! `Σ_e min_{f∈F} d(e, f)`. Gains are measured against a phantom
//! representative at the largest pairwise distance, which makes the first
//! greedy pick the 1-medoid and keeps every marginal gain finite.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::confidence::ExemplarPool;
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::network::Network;

pub const BRUTE_FORCE_LIMIT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    /// Diagnostic only.
    Euclidean,
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    if a == b && a.iter().any(|&v| v != 0.0) {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

pub fn euclidean_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Dense symmetric pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(descriptors: &[Vec<f32>], metric: Metric) -> Result<Self> {
        let n = descriptors.len();
        if let Some(first) = descriptors.first() {
            if descriptors.iter().any(|v| v.len() != first.len()) {
                return Err(Error::usage("descriptors must all have the same length"));
            }
        }
        let f = match metric {
            Metric::Cosine => cosine_distance,
            Metric::Euclidean => euclidean_distance,
        };
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(&descriptors[i], &descriptors[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// `Σ_e min_{f ∈ selected} d(e, f)`; the empty selection costs `n · max d`.
    pub fn coverage_cost(&self, selected: &[usize]) -> f64 {
        let baseline = self.max();
        (0..self.n)
            .map(|e| selected.iter().map(|&f| self.get(e, f)).fold(baseline, f64::min))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cover<K> {
    /// Selected keys in selection order.
    pub selected: Vec<K>,
    /// Positions of the selected keys in the input.
    pub indices: Vec<usize>,
    /// Cost reduction contributed by each pick.
    pub marginal_gains: Vec<f64>,
    /// Coverage cost after each pick.
    pub costs: Vec<f64>,
}

impl<K> Cover<K> {
    pub fn cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Greedy selection of `min(n_rep, |E|)` representatives. Ties go to the smallest key.
pub fn greedy_cover<K: Ord + Copy>(keys: &[K], dm: &DistanceMatrix, n_rep: usize) -> Result<Cover<K>> {
    if keys.is_empty() || dm.is_empty() {
        return Err(Error::usage("cannot select representatives from an empty pool"));
    }
    if keys.len() != dm.len() {
        return Err(Error::usage("key count differs from distance matrix size"));
    }
    if n_rep == 0 {
        return Err(Error::config("n_rep must be at least 1"));
    }
    let n = keys.len();
    let target = n_rep.min(n);
    let mut nearest = vec![dm.max(); n];
    let mut cost: f64 = nearest.iter().sum();
    let mut chosen = vec![false; n];
    let mut out = Cover {
        selected: Vec::with_capacity(target),
        indices: Vec::with_capacity(target),
        marginal_gains: Vec::with_capacity(target),
        costs: Vec::with_capacity(target),
    };
    while out.indices.len() < target {
        let mut best: Option<(f64, usize)> = None;
        for cand in (0..n).filter(|&c| !chosen[c]) {
            let gain: f64 = (0..n).map(|e| (nearest[e] - dm.get(e, cand)).max(0.0)).sum();
            let better = match best {
                None => true,
                Some((g, b)) => gain > g || (gain == g && keys[cand] < keys[b]),
            };
            if better {
                best = Some((gain, cand));
            }
        }
        let (gain, pick) = best.expect("a candidate remains while below target");
        chosen[pick] = true;
        for (e, near) in nearest.iter_mut().enumerate() {
            *near = near.min(dm.get(e, pick));
        }
        cost = nearest.iter().sum();
        out.selected.push(keys[pick]);
        out.indices.push(pick);
        out.marginal_gains.push(gain);
        out.costs.push(cost);
    }
    debug_assert!(cost.is_finite());
    Ok(out)
}

/// Exhaustive minimizer of the coverage cost over all `n_rep`-subsets
/// (first in lexicographic index order on ties).
pub fn brute_force_cover(dm: &DistanceMatrix, n_rep: usize) -> Result<(Vec<usize>, f64)> {
    let n = dm.len();
    if n == 0 {
        return Err(Error::usage("cannot select representatives from an empty pool"));
    }
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::usage(format!("brute force is limited to {BRUTE_FORCE_LIMIT} elements, got {n}")));
    }
    if n_rep == 0 || n_rep > n {
        return Err(Error::config(format!("n_rep must be in 1..={n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut combo: Vec<usize> = (0..n_rep).collect();
    loop {
        let c = dm.coverage_cost(&combo);
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((combo.clone(), c));
        }
        // Next combination in lexicographic order.
        let mut i = n_rep;
        while i > 0 && combo[i - 1] == n - n_rep + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..n_rep {
            combo[j] = combo[j - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

pub type SampleKey = (u32, u32);

/// Representatives chosen per class from the confident pool.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub per_class: BTreeMap<u8, Cover<SampleKey>>,
}

impl RepresentativeSet {
    pub fn keys(&self) -> BTreeSet<SampleKey> {
        self.per_class.values().flat_map(|c| c.selected.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.keys().len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(|c| c.selected.is_empty())
    }

    /// One line per pick: `class order volume_id slice_index marginal_gain cost_after`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# class order volume_id slice_index marginal_gain cost_after\n");
        for (class, cover) in &self.per_class {
            for (i, ((v, sl), (g, c))) in cover.selected.iter().zip(cover.marginal_gains.iter().zip(&cover.costs)).enumerate() {
                let _ = writeln!(s, "{class} {i} {v} {sl} {g:.9e} {c:.9e}");
            }
        }
        s
    }
}

/// Greedy cover of each class's part of the pool with `n_rep` picks.
pub fn cover_pool(pool: &ExemplarPool, descriptors: &BTreeMap<SampleKey, Vec<f32>>, n_rep: usize, metric: Metric) -> Result<RepresentativeSet> {
    let mut per_class = BTreeMap::new();
    for class in pool.classes() {
        let mut keys: Vec<SampleKey> = pool.for_class(class).iter().map(|e| (e.volume_id, e.slice_index)).collect();
        keys.sort();
        let descs = keys
            .iter()
            .map(|k| {
                descriptors
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::usage(format!("no descriptor for volume {} slice {}", k.0, k.1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let dm = DistanceMatrix::new(&descs, metric)?;
        per_class.insert(class, greedy_cover(&keys, &dm, n_rep)?);
    }
    Ok(RepresentativeSet { per_class })
}

/// Bottleneck descriptors for every pooled sample.
pub fn pool_descriptors(net: &Network, pool: &ExemplarPool, records: &[SampleRecord]) -> Result<BTreeMap<SampleKey, Vec<f32>>> {
    let wanted = pool.keys();
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| wanted.contains(&r.key())) {
        out.insert(r.key(), net.abstraction_descriptor(&r.tensor())?);
    }
    Ok(out)
}
