//! Monte-Carlo dropout confidence and selection of the confident pool.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::losses::stack;
use crate::network::{Mode, Network};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_N_MC: usize = 29;
pub const DEFAULT_N_CONF: usize = 1000;

/// `n_mc` probability maps of one image, laid out `[k][channel][pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct McStack {
    pub n_mc: usize,
    pub n_classes: usize,
    pub pixels: usize,
    pub data: Vec<f32>,
}

impl McStack {
    pub fn new(n_mc: usize, n_classes: usize, pixels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_mc * n_classes * pixels {
            return Err(Error::usage("MC stack data length does not match its shape"));
        }
        Ok(McStack {
            n_mc,
            n_classes,
            pixels,
            data,
        })
    }

    pub fn map(&self, k: usize, channel: usize) -> &[f32] {
        let off = (k * self.n_classes + channel) * self.pixels;
        &self.data[off..off + self.pixels]
    }

    /// Population variance over `k` at every pixel of one channel.
    pub fn variance_map(&self, channel: usize) -> Vec<f64> {
        let k = self.n_mc as f64;
        let mut mean = vec![0.0f64; self.pixels];
        for s in 0..self.n_mc {
            for (m, &v) in mean.iter_mut().zip(self.map(s, channel)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0f64; self.pixels];
        for s in 0..self.n_mc {
            for ((acc, &v), m) in var.iter_mut().zip(self.map(s, channel)).zip(&mean) {
                let d = v as f64 - m;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= k);
        var
    }

    /// Negative mean pixel variance of one channel.
    pub fn score(&self, channel: usize) -> f64 {
        let var = self.variance_map(channel);
        -var.iter().sum::<f64>() / self.pixels as f64
    }
}

/// `n_mc` stochastic passes of a single image through one head.
pub fn mc_samples(net: &Network, image: &Tensor, head: usize, n_mc: usize, rng: &mut Rng) -> Result<McStack> {
    if n_mc < 2 {
        return Err(Error::config(format!("n_mc must be at least 2, got {n_mc}")));
    }
    if image.n != 1 {
        return Err(Error::usage("mc_samples takes a single image"));
    }
    let copies: Vec<&Tensor> = vec![image; n_mc];
    let batch = stack(&copies);
    let probs = net.forward(&batch, &[head], Mode::McDropout, rng)?.remove(0);
    McStack::new(n_mc, probs.c, probs.h * probs.w, probs.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub volume_id: u32,
    pub slice_index: u32,
    pub class: u8,
    /// `-inf` is serialized as `null`.
    #[serde(with = "neg_inf_as_null")]
    pub m: f64,
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Per-sample MC stream, independent of scoring order.
pub fn mc_stream(seed: u64, record: &SampleRecord) -> Rng {
    rng::stream(seed, &format!("mc-dropout/{}/{}", record.volume_id, record.slice_index))
}

fn channel_of(net: &Network, head: usize, class: u8) -> Result<usize> {
    let spec = net
        .head_spec(head)
        .ok_or_else(|| Error::usage(format!("head {head} does not exist")))?;
    spec.class_map
        .iter()
        .position(|&c| c == class)
        .filter(|&ch| ch > 0)
        .ok_or_else(|| Error::usage(format!("head {head} does not predict class {class}")))
}

/// Confidence of `head` on `class` in `record`; `-inf` if the class is not annotated there.
pub fn confidence(net: &Network, record: &SampleRecord, head: usize, class: u8, n_mc: usize, seed: u64) -> Result<ConfidenceScore> {
    let channel = channel_of(net, head, class)?;
    let m = if record.contains(class) {
        let stack = mc_samples(net, &record.tensor(), head, n_mc, &mut mc_stream(seed, record))?;
        stack.score(channel)
    } else {
        f64::NEG_INFINITY
    };
    Ok(ConfidenceScore {
        volume_id: record.volume_id,
        slice_index: record.slice_index,
        class,
        m,
    })
}

/// Scores for every record and class, one MC stack per record.
pub fn score_all(net: &Network, records: &[SampleRecord], head: usize, classes: &[u8], n_mc: usize, seed: u64) -> Result<Vec<ConfidenceScore>> {
    let channels = classes.iter().map(|&c| channel_of(net, head, c)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(records.len() * classes.len());
    for r in records {
        let stack = if classes.iter().any(|&c| r.contains(c)) {
            Some(mc_samples(net, &r.tensor(), head, n_mc, &mut mc_stream(seed, r))?)
        } else {
            None
        };
        for (&class, &ch) in classes.iter().zip(&channels) {
            let m = match &stack {
                Some(s) if r.contains(class) => s.score(ch),
                _ => f64::NEG_INFINITY,
            };
            out.push(ConfidenceScore {
                volume_id: r.volume_id,
                slice_index: r.slice_index,
                class,
                m,
            });
        }
    }
    Ok(out)
}

/// The confident pool, tagged by qualifying class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarPool {
    /// Sorted by class, then rank within the class.
    pub entries: Vec<ConfidenceScore>,
}

impl ExemplarPool {
    pub fn classes(&self) -> BTreeSet<u8> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn for_class(&self, class: u8) -> Vec<ConfidenceScore> {
        self.entries.iter().filter(|e| e.class == class).copied().collect()
    }

    /// Distinct `(volume_id, slice_index)` keys in the pool.
    pub fn keys(&self) -> BTreeSet<(u32, u32)> {
        self.entries.iter().map(|e| (e.volume_id, e.slice_index)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One line per entry: `class volume_id slice_index m`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# class volume_id slice_index m\n");
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {:.9e}", e.class, e.volume_id, e.slice_index, e.m);
        }
        s
    }
}

/// Descending `m`, ties by lower volume then lower slice.
pub fn rank_order(a: &ConfidenceScore, b: &ConfidenceScore) -> std::cmp::Ordering {
    b.m.total_cmp(&a.m)
        .then(a.volume_id.cmp(&b.volume_id))
        .then(a.slice_index.cmp(&b.slice_index))
}

/// Up to `n_conf` finite-score samples per class, best first.
pub fn select_from_scores(scores: &[ConfidenceScore], n_conf: usize) -> Result<ExemplarPool> {
    if n_conf == 0 {
        return Err(Error::config("n_conf must be at least 1"));
    }
    let classes: BTreeSet<u8> = scores.iter().map(|s| s.class).collect();
    let mut entries = Vec::new();
    for c in classes {
        let mut cs: Vec<ConfidenceScore> = scores.iter().filter(|s| s.class == c && s.m.is_finite()).copied().collect();
        cs.sort_by(rank_order);
        entries.extend(cs.into_iter().take(n_conf));
    }
    Ok(ExemplarPool { entries })
}

pub fn select_confident(
    net: &Network,
    records: &[SampleRecord],
    head: usize,
    classes: &[u8],
    n_conf: usize,
    n_mc: usize,
    seed: u64,
) -> Result<ExemplarPool> {
    if n_conf == 0 {
        return Err(Error::config("n_conf must be at least 1"));
    }
    select_from_scores(&score_all(net, records, head, classes, n_mc, seed)?, n_conf)
}
