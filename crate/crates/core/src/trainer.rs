//! Training strategies: single-head baselines, the incremental step with
//! optional distillation and exemplar replay, and exemplar store construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::{select_confident, ExemplarPool};
use crate::coverage::{cover_pool, pool_descriptors, Metric, RepresentativeSet};
use crate::data::{keep_labels, AugmentConfig, AugmentDraw, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{dice, predict_labels};
use crate::losses::{
    compute_class_weights, cross_entropy, cross_entropy_grad, stack, ClassWeights, ProbMap, SoftTargetCache,
};
use crate::network::{BodySpec, HeadSpec, Network};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CurSeg,
    IncSeg,
    CurIncSeg,
    Finetune,
    ReSeg,
    LwfSeg,
    AeiSeg,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::CurSeg,
        Strategy::IncSeg,
        Strategy::CurIncSeg,
        Strategy::Finetune,
        Strategy::ReSeg,
        Strategy::LwfSeg,
        Strategy::AeiSeg,
    ];

    /// Identifier used in configs and directory names.
    pub fn key(self) -> &'static str {
        match self {
            Strategy::CurSeg => "cur_seg",
            Strategy::IncSeg => "inc_seg",
            Strategy::CurIncSeg => "cur_inc_seg",
            Strategy::Finetune => "finetune",
            Strategy::ReSeg => "re_seg",
            Strategy::LwfSeg => "lwf_seg",
            Strategy::AeiSeg => "aei_seg",
        }
    }

    /// Name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::CurSeg => "CurSeg",
            Strategy::IncSeg => "IncSeg",
            Strategy::CurIncSeg => "CurIncSeg",
            Strategy::Finetune => "finetune",
            Strategy::ReSeg => "ReSeg",
            Strategy::LwfSeg => "LwfSeg",
            Strategy::AeiSeg => "AeiSeg",
        }
    }

    pub fn is_base(self) -> bool {
        matches!(self, Strategy::CurSeg | Strategy::IncSeg | Strategy::CurIncSeg)
    }

    pub fn distills(self) -> bool {
        matches!(self, Strategy::ReSeg | Strategy::LwfSeg | Strategy::AeiSeg)
    }

    pub fn exemplar_mode(self) -> Option<ExemplarMode> {
        match self {
            Strategy::AeiSeg => Some(ExemplarMode::ConfidenceCoverage),
            Strategy::ReSeg => Some(ExemplarMode::Random),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.key().replace('_', "") == norm)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarMode {
    ConfidenceCoverage,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_stp: usize,
    /// Steps of the incremental stage; `None` uses `n_stp`.
    pub n_stp_incremental: Option<usize>,
    pub lr: f64,
    pub eval_every: usize,
    pub n_mc: usize,
    pub n_conf: usize,
    pub n_rep: usize,
    /// Chance of an exemplar batch; `None` means `|F| / (|F| + |D_i|)`.
    pub mix_probability: Option<f64>,
    pub temperature: f64,
    pub reset_adam: bool,
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            n_stp: 2000,
            n_stp_incremental: None,
            lr: 1e-3,
            eval_every: 250,
            n_mc: crate::confidence::DEFAULT_N_MC,
            n_conf: crate::confidence::DEFAULT_N_CONF,
            n_rep: 100,
            mix_probability: None,
            temperature: 1.0,
            reset_adam: true,
            flip_probability: 0.5,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("trainer.eval_every must be at least 1"));
        }
        if self.n_mc < 2 {
            return Err(Error::config("trainer.n_mc must be at least 2"));
        }
        if self.n_conf == 0 {
            return Err(Error::config("trainer.n_conf must be at least 1"));
        }
        if let Some(p) = self.mix_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("trainer.mix_probability must be in [0, 1]"));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("trainer.temperature must be positive"));
        }
        self.adam()
            .validate()
            .map_err(|_| Error::config("trainer.lr must be positive"))?;
        self.augment()
            .validate()
            .map_err(|e| Error::config(format!("trainer augmentation: {e}")))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_probability: self.flip_probability,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
        }
    }

    pub fn incremental_steps(&self) -> usize {
        self.n_stp_incremental.unwrap_or(self.n_stp)
    }
}

/// Validation volumes with full labels.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub volumes: BTreeMap<u32, Vec<SampleRecord>>,
}

impl ValidationSet {
    pub fn new(records: &[SampleRecord]) -> Self {
        let mut volumes: BTreeMap<u32, Vec<SampleRecord>> = BTreeMap::new();
        for r in records {
            volumes.entry(r.volume_id).or_default().push(r.clone());
        }
        for v in volumes.values_mut() {
            v.sort_by_key(|r| r.slice_index);
        }
        ValidationSet { volumes }
    }

    /// Mean volume Dice of `head` on dataset label `class`.
    pub fn dice(&self, net: &Network, head: usize, class: u8) -> Result<f64> {
        if self.volumes.is_empty() {
            return Err(Error::usage("validation set is empty"));
        }
        let mut total = 0.0;
        for slices in self.volumes.values() {
            let refs: Vec<&SampleRecord> = slices.iter().collect();
            let pred = predict_labels(net, &refs, head, 8)?.concat();
            let gt: Vec<u8> = slices.iter().flat_map(|r| r.mask.iter().copied()).collect();
            total += dice(&pred, &gt, class);
        }
        Ok(total / self.volumes.len() as f64)
    }
}

/// Which `(head, dataset label)` pairs the checkpoint metric averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub targets: Vec<(usize, u8)>,
    pub eval_every: usize,
}

impl CheckpointPolicy {
    pub fn score(&self, net: &Network, val: &ValidationSet) -> Result<(f64, BTreeMap<String, f64>)> {
        let mut per = BTreeMap::new();
        for &(h, c) in &self.targets {
            per.insert(format!("head{h}/class{c}"), val.dice(net, h, c)?);
        }
        let mean = per.values().sum::<f64>() / per.len().max(1) as f64;
        Ok((mean, per))
    }

    /// Steps at which the metric is evaluated: every `eval_every` and the last.
    pub fn is_eval_step(&self, step: usize, n_stp: usize) -> bool {
        step == n_stp || (step > 0 && step % self.eval_every == 0)
    }
}

/// Line-oriented JSON training log.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    lines: Vec<String>,
}

impl TrainLog {
    pub fn push(&mut self, value: serde_json::Value) {
        self.lines.push(value.to_string());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best state under the checkpoint policy.
    pub net: Network,
    pub best_step: usize,
    pub best_metric: f64,
    pub log: TrainLog,
}

/// Replay material from one old dataset: images, masks and the old model's soft targets.
#[derive(Debug, Clone)]
pub struct ExemplarStore {
    pub head: usize,
    pub mode: ExemplarMode,
    pub records: Vec<SampleRecord>,
    pub targets: SoftTargetCache,
    pub pool: Option<ExemplarPool>,
    pub representatives: Option<RepresentativeSet>,
}

impl ExemplarStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> Vec<(u32, u32)> {
        self.records.iter().map(|r| r.key()).collect()
    }

    /// One `volume_id slice_index` line per stored exemplar.
    pub fn manifest(&self) -> String {
        let mut s = String::from("# volume_id slice_index\n");
        for (v, sl) in self.keys() {
            s.push_str(&format!("{v} {sl}\n"));
        }
        s
    }
}

/// Select `F` from the old dataset `records` (labels of `classes` only) for
/// replay through `head`.
#[allow(clippy::too_many_arguments)]
pub fn build_exemplar_store(
    base: &Network,
    head: usize,
    records: &[SampleRecord],
    classes: &[u8],
    mode: ExemplarMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ExemplarStore> {
    let keep: BTreeSet<u8> = classes.iter().copied().collect();
    let records: Vec<SampleRecord> = records.iter().map(|r| keep_labels(r, &keep)).collect();
    let (chosen, pool, reps): (BTreeSet<(u32, u32)>, _, _) = if cfg.n_rep == 0 {
        (BTreeSet::new(), None, None)
    } else {
        match mode {
            ExemplarMode::ConfidenceCoverage => {
                let pool = select_confident(base, &records, head, classes, cfg.n_conf, cfg.n_mc, seed)?;
                let descs = pool_descriptors(base, &pool, &records)?;
                for c in pool.classes() {
                    let n = pool.for_class(c).len();
                    if cfg.n_rep > n {
                        log::warn!("n_rep {} exceeds the {n} confident samples of class {c}; keeping all", cfg.n_rep);
                    }
                }
                let reps = cover_pool(&pool, &descs, cfg.n_rep, Metric::Cosine)?;
                (reps.keys(), Some(pool), Some(reps))
            }
            ExemplarMode::Random => {
                let mut rng = rng::stream(seed, "exemplars/random");
                let mut keys = BTreeSet::new();
                for &c in classes {
                    let mut with_c: Vec<(u32, u32)> = records.iter().filter(|r| r.contains(c)).map(|r| r.key()).collect();
                    with_c.sort();
                    let n = cfg.n_rep.min(with_c.len());
                    if n < cfg.n_rep {
                        log::warn!("n_rep {} exceeds the {} samples containing class {c}; keeping all", cfg.n_rep, with_c.len());
                    }
                    let mut picks: Vec<usize> = sample_indices(&mut rng, with_c.len(), n).into_vec();
                    picks.sort();
                    keys.extend(picks.into_iter().map(|i| with_c[i]));
                }
                (keys, None, None)
            }
        }
    };
    let mut stored: Vec<SampleRecord> = records.into_iter().filter(|r| chosen.contains(&r.key())).collect();
    stored.sort_by_key(|r| r.key());
    let images: Vec<Tensor> = stored.iter().map(|r| r.tensor()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let targets = SoftTargetCache::generate(base, &refs, &[head], cfg.temperature, 8)?;
    Ok(ExemplarStore {
        head,
        mode,
        records: stored,
        targets,
        pool,
        representatives: reps,
    })
}

/// Dataset-label → channel lookup for a head; unknown labels map to background.
fn channel_lut(net: &Network, head: usize) -> Result<[u8; 256]> {
    let spec = net
        .head_spec(head)
        .ok_or_else(|| Error::usage(format!("head {head} does not exist")))?;
    let mut lut = [0u8; 256];
    for (ch, &label) in spec.class_map.iter().enumerate() {
        lut[label as usize] = ch as u8;
    }
    Ok(lut)
}

/// Inverse-frequency weights of a head's channels over a training set.
pub fn head_class_weights(net: &Network, head: usize, records: &[SampleRecord]) -> Result<ClassWeights> {
    let lut = channel_lut(net, head)?;
    let n = net.head_spec(head).expect("checked").n_classes;
    let masks: Vec<Vec<u8>> = records.iter().map(|r| r.mask.iter().map(|&y| lut[y as usize]).collect()).collect();
    compute_class_weights(masks.iter().map(|m| m.as_slice()), n)
}

struct Streams {
    batch: Rng,
    augment: Rng,
    mix: Rng,
    dropout: Rng,
}

impl Streams {
    fn new(seed: u64, phase: &str) -> Self {
        Streams {
            batch: rng::stream(seed, &format!("{phase}/batch")),
            augment: rng::stream(seed, &format!("{phase}/augment")),
            mix: rng::stream(seed, &format!("{phase}/mix")),
            dropout: rng::stream(seed, &format!("{phase}/dropout")),
        }
    }
}

/// Old head kept alive by distillation.
struct OldHead<'a> {
    head: usize,
    weights: ClassWeights,
    /// Targets for the primary dataset, indexed like it.
    primary_targets: Option<&'a SoftTargetCache>,
}

struct Plan<'a> {
    phase: &'static str,
    new_head: usize,
    new_weights: ClassWeights,
    primary: &'a [SampleRecord],
    old: Vec<OldHead<'a>>,
    exemplars: Option<&'a ExemplarStore>,
    n_stp: usize,
}

struct Batch {
    images: Tensor,
    labels: Vec<u8>,
    draws: Vec<AugmentDraw>,
    indices: Vec<usize>,
}

fn draw_batch(records: &[SampleRecord], cfg: &TrainConfig, lut: &[u8; 256], s: &mut Streams) -> Batch {
    let aug = cfg.augment();
    let indices: Vec<usize> = (0..cfg.batch_size).map(|_| s.batch.random_range(0..records.len())).collect();
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::new();
    let mut draws = Vec::with_capacity(indices.len());
    for &i in &indices {
        let d = AugmentDraw::sample(&aug, &mut s.augment);
        let r = d.apply(&records[i]);
        images.push(r.tensor());
        labels.extend(r.mask.iter().map(|&y| lut[y as usize]));
        draws.push(d);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Batch {
        images: stack(&refs),
        labels,
        draws,
        indices,
    }
}

fn batch_targets(cache: &SoftTargetCache, head: usize, batch: &Batch) -> Result<ProbMap> {
    let maps = batch
        .indices
        .iter()
        .zip(&batch.draws)
        .map(|(&i, d)| {
            cache
                .get(i, head)
                .map(|t| d.apply_map(t))
                .ok_or_else(|| Error::usage(format!("no soft target for sample {i} at head {head}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = maps.iter().collect();
    Ok(ProbMap::from_tensor(&stack(&refs)))
}

fn train(mut net: Network, plan: &Plan<'_>, cfg: &TrainConfig, val: &ValidationSet, policy: &CheckpointPolicy, seed: u64) -> Result<TrainOutcome> {
    if plan.primary.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut streams = Streams::new(seed, plan.phase);
    let mut adam = Adam::new(cfg.adam());
    let mut log = TrainLog::default();
    let new_lut = channel_lut(&net, plan.new_head)?;
    let exemplars = plan.exemplars.filter(|e| !e.is_empty());
    let mix = match (exemplars, cfg.mix_probability) {
        (None, _) => 0.0,
        (Some(_), Some(p)) => p,
        (Some(e), None) => e.len() as f64 / (e.len() + plan.primary.len()) as f64,
    };
    let ex_lut = match exemplars {
        Some(e) => Some(channel_lut(&net, e.head)?),
        None => None,
    };
    let (h, w) = (plan.primary[0].height, plan.primary[0].width);

    let mut best = net.clone();
    let mut best_step = 0;
    let (mut best_metric, per) = policy.score(&net, val)?;
    log.push(serde_json::json!({"kind": "eval", "step": 0, "val_dice": per, "metric": best_metric}));

    for step in 1..=plan.n_stp {
        let u: f64 = streams.mix.random();
        net.zero_grad();
        let n = cfg.batch_size;
        if let (true, Some(store), Some(lut)) = (u < mix, exemplars, ex_lut.as_ref()) {
            let old = plan
                .old
                .iter()
                .find(|o| o.head == store.head)
                .ok_or_else(|| Error::usage("exemplar head is not an old head"))?;
            let batch = draw_batch(&store.records, cfg, lut, &mut streams);
            let (probs, tape) = net.forward_train(&batch.images, &[store.head], &mut streams.dropout)?;
            let p = ProbMap::from_tensor(&probs[0]);
            let t = batch_targets(&store.targets, store.head, &batch)?;
            let loss = cross_entropy(&p, &t, &old.weights)?;
            let g = cross_entropy_grad(&p, &t, &old.weights)?;
            net.backward(&tape, &[g.to_tensor(n, h, w)])?;
            adam.step(&mut net, &[store.head]);
            log.push(serde_json::json!({
                "kind": "step", "step": step, "source": "exemplar",
                "loss_dis": {store.head.to_string(): loss}, "total": loss,
            }));
        } else {
            let batch = draw_batch(plan.primary, cfg, &new_lut, &mut streams);
            let mut heads = vec![plan.new_head];
            heads.extend(plan.old.iter().filter(|o| o.primary_targets.is_some()).map(|o| o.head));
            let (probs, tape) = net.forward_train(&batch.images, &heads, &mut streams.dropout)?;
            let p_new = ProbMap::from_tensor(&probs[0]);
            let onehot = ProbMap::one_hot(&batch.labels, p_new.n_classes);
            let seg = cross_entropy(&p_new, &onehot, &plan.new_weights)?;
            let mut grads = vec![cross_entropy_grad(&p_new, &onehot, &plan.new_weights)?.to_tensor(n, h, w)];
            let mut dis = serde_json::Map::new();
            let mut total = seg;
            for (k, old) in plan.old.iter().filter(|o| o.primary_targets.is_some()).enumerate() {
                let p = ProbMap::from_tensor(&probs[k + 1]);
                let t = batch_targets(old.primary_targets.expect("filtered"), old.head, &batch)?;
                let l = cross_entropy(&p, &t, &old.weights)?;
                total += l;
                dis.insert(old.head.to_string(), l.into());
                grads.push(cross_entropy_grad(&p, &t, &old.weights)?.to_tensor(n, h, w));
            }
            net.backward(&tape, &grads)?;
            adam.step(&mut net, &heads);
            log.push(serde_json::json!({
                "kind": "step", "step": step, "source": "primary",
                "loss_seg": seg, "loss_dis": dis, "total": total,
            }));
        }
        if policy.is_eval_step(step, plan.n_stp) {
            let (metric, per) = policy.score(&net, val)?;
            let improved = metric > best_metric;
            if improved {
                best = net.clone();
                best_metric = metric;
                best_step = step;
            }
            log.push(serde_json::json!({"kind": "eval", "step": step, "val_dice": per, "metric": metric, "best": improved}));
        }
    }
    log.push(serde_json::json!({"kind": "select", "best_step": best_step, "metric": best_metric}));
    Ok(TrainOutcome {
        net: best,
        best_step,
        best_metric,
        log,
    })
}

/// Fresh network with one head on `classes`, trained with the segmentation loss only.
pub fn train_base(
    strategy: Strategy,
    spec: BodySpec,
    records: &[SampleRecord],
    classes: &[u8],
    val: &ValidationSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if !strategy.is_base() {
        return Err(Error::usage(format!("{strategy} is not a single-head baseline")));
    }
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::config(format!("{strategy}: training set is empty")));
    }
    let mut init = rng::stream(seed, "init/body");
    let mut net = Network::build(spec, &mut init)?;
    net.attach_head(HeadSpec::new(0, classes), &mut rng::stream(seed, "init/head0"))?;
    let keep: BTreeSet<u8> = classes.iter().copied().collect();
    let train_set: Vec<SampleRecord> = records.iter().map(|r| keep_labels(r, &keep)).collect();
    let plan = Plan {
        phase: "base",
        new_head: 0,
        new_weights: head_class_weights(&net, 0, &train_set)?,
        primary: &train_set,
        old: Vec::new(),
        exemplars: None,
        n_stp: cfg.n_stp,
    };
    let policy = CheckpointPolicy {
        targets: classes.iter().map(|&c| (0, c)).collect(),
        eval_every: cfg.eval_every,
    };
    train(net, &plan, cfg, val, &policy, seed)
}

/// Inputs of one incremental step besides the base state.
pub struct IncrementalInputs<'a> {
    /// New dataset `D_i`.
    pub records: &'a [SampleRecord],
    /// Labels the new head learns.
    pub classes: &'a [u8],
    /// `(head, dataset label)` pairs of the old heads, used for validation.
    pub old_targets: &'a [(usize, u8)],
    /// Inverse-frequency weights of each old head over its own training data.
    pub old_weights: &'a BTreeMap<usize, ClassWeights>,
    pub exemplars: Option<&'a ExemplarStore>,
}

/// Attach a new head to `base` and train it on `D_i` under `strategy`.
pub fn incremental_step(
    strategy: Strategy,
    base: &Network,
    inputs: &IncrementalInputs<'_>,
    val: &ValidationSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if strategy.is_base() {
        return Err(Error::usage(format!("{strategy} is not an incremental strategy")));
    }
    cfg.validate()?;
    if inputs.records.is_empty() {
        return Err(Error::config(format!("{strategy}: incremental training set is empty")));
    }
    let exemplars = match strategy.exemplar_mode() {
        Some(_) => Some(
            inputs
                .exemplars
                .ok_or_else(|| Error::usage(format!("{strategy} needs an exemplar store")))?,
        ),
        None => None,
    };
    let mut net = base.clone();
    let new_head = net.head_count();
    net.attach_head(
        HeadSpec::new(new_head, inputs.classes),
        &mut rng::stream(seed, &format!("init/head{new_head}")),
    )?;
    let keep: BTreeSet<u8> = inputs.classes.iter().copied().collect();
    let train_set: Vec<SampleRecord> = inputs.records.iter().map(|r| keep_labels(r, &keep)).collect();
    let old_heads: Vec<usize> = (0..new_head).collect();
    let cache = if strategy.distills() {
        let images: Vec<Tensor> = inputs.records.iter().map(|r| r.tensor()).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        Some(SoftTargetCache::generate(base, &refs, &old_heads, cfg.temperature, 8)?)
    } else {
        None
    };
    let old = old_heads
        .iter()
        .map(|&h| {
            let weights = inputs
                .old_weights
                .get(&h)
                .cloned()
                .ok_or_else(|| Error::usage(format!("no class weights for old head {h}")))?;
            Ok(OldHead {
                head: h,
                weights,
                primary_targets: cache.as_ref(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = Plan {
        phase: "incremental",
        new_head,
        new_weights: head_class_weights(&net, new_head, &train_set)?,
        primary: &train_set,
        old,
        exemplars,
        n_stp: cfg.incremental_steps(),
    };
    let mut targets = inputs.old_targets.to_vec();
    targets.extend(inputs.classes.iter().map(|&c| (new_head, c)));
    let policy = CheckpointPolicy {
        targets,
        eval_every: cfg.eval_every,
    };
    train(net, &plan, cfg, val, &policy, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn data() -> Vec<SampleRecord> {
        synth_dataset(&SynthSpec {
            seed: 1,
            n_volumes: 6,
            slices_per_volume: 3,
            image_size: 32,
        })
        .unwrap()
    }

    fn spec() -> BodySpec {
        BodySpec {
            n_fil: 4,
            depth: 2,
            dropout_rate: 0.5,
            input_size: 32,
        }
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            n_stp: steps,
            eval_every: 2,
            n_mc: 3,
            n_conf: 4,
            n_rep: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.key().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn zero_steps_returns_the_initial_state() {
        let d = data();
        let val = ValidationSet::new(&d[15..]);
        let out = train_base(Strategy::CurSeg, spec(), &d[..15], &[1], &val, &cfg(0), 4).unwrap();
        let mut init = rng::stream(4, "init/body");
        let mut fresh = Network::build(spec(), &mut init).unwrap();
        fresh.attach_head(HeadSpec::new(0, &[1]), &mut rng::stream(4, "init/head0")).unwrap();
        assert_eq!(out.net.checksum(), fresh.checksum());
        assert_eq!(out.best_step, 0);
    }

    #[test]
    fn training_is_reproducible_and_selects_the_best_evaluation() {
        let d = data();
        let val = ValidationSet::new(&d[15..]);
        let a = train_base(Strategy::CurSeg, spec(), &d[..15], &[1], &val, &cfg(5), 4).unwrap();
        let b = train_base(Strategy::CurSeg, spec(), &d[..15], &[1], &val, &cfg(5), 4).unwrap();
        assert_eq!(a.log.checksum(), b.log.checksum());
        assert_eq!(a.net.checksum(), b.net.checksum());
        let evals: Vec<f64> = a
            .log
            .lines()
            .iter()
            .filter_map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["kind"] == "eval").then(|| v["metric"].as_f64().unwrap())
            })
            .collect();
        assert_eq!(evals.len(), 4); // steps 0, 2, 4, 5
        let max = evals.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(a.best_metric, max);
        assert!((a.net.checksum() == b.net.checksum()) && a.best_metric >= evals[0]);
    }

    #[test]
    fn aei_without_exemplars_matches_lwf_and_heads_stay_isolated() {
        let d = data();
        let val = ValidationSet::new(&d[15..]);
        let base = train_base(Strategy::CurSeg, spec(), &d[..12], &[1], &val, &cfg(2), 4).unwrap().net;
        let weights = BTreeMap::from([(0, head_class_weights(&base, 0, &d[..12]).unwrap())]);
        let mut c = cfg(3);
        c.n_rep = 0;
        let store = build_exemplar_store(&base, 0, &d[..12], &[1], ExemplarMode::ConfidenceCoverage, &c, 4).unwrap();
        assert!(store.is_empty());
        let inputs = IncrementalInputs {
            records: &d[12..15],
            classes: &[2],
            old_targets: &[(0, 1)],
            old_weights: &weights,
            exemplars: Some(&store),
        };
        let lwf = incremental_step(Strategy::LwfSeg, &base, &inputs, &val, &c, 4).unwrap();
        let aei = incremental_step(Strategy::AeiSeg, &base, &inputs, &val, &c, 4).unwrap();
        assert_eq!(lwf.log.checksum(), aei.log.checksum());
        assert_eq!(lwf.net.checksum(), aei.net.checksum());
        assert_eq!(lwf.net.head_count(), 2);

        let no_store = IncrementalInputs { exemplars: None, ..inputs };
        assert!(incremental_step(Strategy::ReSeg, &base, &no_store, &val, &c, 4).is_err());
        assert!(incremental_step(Strategy::CurSeg, &base, &no_store, &val, &c, 4).is_err());
    }

    #[test]
    fn exemplar_stores_are_reproducible_and_bounded() {
        let d = data();
        let val = ValidationSet::new(&d[15..]);
        let base = train_base(Strategy::CurSeg, spec(), &d[..12], &[1], &val, &cfg(1), 4).unwrap().net;
        for mode in [ExemplarMode::Random, ExemplarMode::ConfidenceCoverage] {
            let a = build_exemplar_store(&base, 0, &d[..12], &[1], mode, &cfg(0), 9).unwrap();
            let b = build_exemplar_store(&base, 0, &d[..12], &[1], mode, &cfg(0), 9).unwrap();
            assert_eq!(a.keys(), b.keys());
            assert_eq!(a.len(), 2);
            assert_eq!(a.targets.len(), 2);
            assert!(a.records.iter().all(|r| r.contains(1) && !r.contains(2)));
        }
    }
}
