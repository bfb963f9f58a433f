//! Experiment configuration and the end-to-end runner.
//!
//! Output layout under `out`:
//!
//! ```text
//! config.toml                   the config text as given
//! resolved.toml                 the config after presets and overrides
//! splits/h{H}_{IR}.json         volume partition
//! h{H}/{IR}/seed{S}/{strategy}/ model.ckpt, train_log.jsonl, outcome.json, metrics.json
//! h{H}/{IR}/seed{S}/exemplars/{strategy}/  E_manifest.txt, F_manifest.txt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    holdout_split, load_dataset, DatasetManifest, seeded_split, synth_dataset, DatasetPartition, IrLabel, SampleRecord, SplitCounts,
    SynthSpec, CLASS_A, CLASS_B, HOLDOUT_COUNT,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_head, MetricsReport, Role, VolumeEntry};
use crate::network::{BodySpec, Network};
use crate::trainer::{
    build_exemplar_store, head_class_weights, incremental_step, train_base, IncrementalInputs, Strategy, TrainConfig,
    TrainOutcome, ValidationSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Root of an on-disk dataset when `source = "directory"`.
    pub path: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub volumes: usize,
    pub slices: usize,
    pub image_size: usize,
    /// In-plane pixel spacing in mm (a directory dataset's manifest takes precedence).
    pub spacing_mm: f64,
    pub slice_spacing_mm: f64,
    pub cur_class: u8,
    pub inc_class: u8,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            path: None,
            synthetic_seed: 0,
            volumes: 100,
            slices: 8,
            image_size: 32,
            spacing_mm: 0.4,
            slice_spacing_mm: 1.0,
            cur_class: CLASS_A,
            inc_class: CLASS_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub holdouts: Vec<u32>,
    pub irs: Vec<IrLabel>,
    /// Custom volume counts; replaces the fixed lists with a seeded shuffle
    /// (seed = holdout id) and ignores `irs`.
    pub counts: Option<SplitCounts>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            holdouts: vec![1],
            irs: vec![IrLabel::Ir01],
            counts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_network")]
    pub network: BodySpec,
    #[serde(default)]
    pub trainer: TrainConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn default_strategies() -> Vec<Strategy> {
    vec![
        Strategy::CurSeg,
        Strategy::IncSeg,
        Strategy::Finetune,
        Strategy::ReSeg,
        Strategy::LwfSeg,
        Strategy::AeiSeg,
    ]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_network() -> BodySpec {
    BodySpec {
        input_size: 32,
        ..BodySpec::desk()
    }
}

pub const PRESETS: [&str; 2] = ["paper-table2-desk", "paper-table2-full"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Desk scale grid (synthetic data) or the full-size grid (directory data).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-table2-desk" => Ok(ExperimentConfig {
                name: name.into(),
                out: PathBuf::from("runs").join(name),
                strategies: default_strategies(),
                seeds: vec![0],
                dataset: DatasetConfig::default(),
                split: SplitConfig {
                    holdouts: vec![1, 2],
                    irs: IrLabel::ALL.to_vec(),
                    counts: None,
                },
                network: default_network(),
                trainer: TrainConfig {
                    n_stp: 2000,
                    n_mc: 8,
                    n_conf: 100,
                    n_rep: 10,
                    ..TrainConfig::default()
                },
            }),
            "paper-table2-full" => Ok(ExperimentConfig {
                name: name.into(),
                out: PathBuf::from("runs").join(name),
                strategies: default_strategies(),
                seeds: vec![0],
                dataset: DatasetConfig {
                    source: DatasetSource::Directory,
                    image_size: 224,
                    ..DatasetConfig::default()
                },
                split: SplitConfig {
                    holdouts: (1..=HOLDOUT_COUNT as u32).collect(),
                    irs: IrLabel::ALL.to_vec(),
                    counts: None,
                },
                network: BodySpec::full(),
                trainer: TrainConfig {
                    n_stp: 20000,
                    ..TrainConfig::default()
                },
            }),
            other => Err(Error::config(format!("unknown preset {other:?}; available: {}", PRESETS.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("strategies must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let d = &self.dataset;
        match d.source {
            DatasetSource::Directory if d.path.is_none() => {
                return Err(Error::config("dataset.path is required when dataset.source = \"directory\""))
            }
            DatasetSource::Synthetic => {
                self.synth_spec().validate().map_err(|e| Error::config(format!("dataset: {e}")))?;
            }
            _ => {}
        }
        if !(d.spacing_mm > 0.0) || !(d.slice_spacing_mm > 0.0) {
            return Err(Error::config("dataset.spacing_mm and dataset.slice_spacing_mm must be positive"));
        }
        if d.cur_class == 0 || d.inc_class == 0 || d.cur_class == d.inc_class {
            return Err(Error::config("dataset.cur_class and dataset.inc_class must be distinct foreground labels"));
        }
        if self.split.holdouts.is_empty() {
            return Err(Error::config("split.holdouts must not be empty"));
        }
        if self.split.counts.is_none() {
            if self.split.irs.is_empty() {
                return Err(Error::config("split.irs must not be empty"));
            }
            for &h in &self.split.holdouts {
                if !(1..=HOLDOUT_COUNT as u32).contains(&h) {
                    return Err(Error::config(format!("split.holdouts: {h} is not in 1..={HOLDOUT_COUNT}")));
                }
            }
        }
        self.network
            .validate()
            .map_err(|e| Error::config(format!("network: {e}")))?;
        if d.source == DatasetSource::Synthetic && self.network.input_size != d.image_size {
            return Err(Error::config("network.input_size must equal dataset.image_size"));
        }
        self.trainer.validate()
    }

    fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.dataset.synthetic_seed,
            n_volumes: self.dataset.volumes,
            slices_per_volume: self.dataset.slices,
            image_size: self.dataset.image_size,
        }
    }

    /// `(holdout, split label, partition)` for every grid cell.
    pub fn partitions(&self, n_volumes: usize) -> Result<Vec<(u32, String, DatasetPartition)>> {
        let mut out = Vec::new();
        for &h in &self.split.holdouts {
            match self.split.counts {
                Some(c) => {
                    let mut p = seeded_split(n_volumes, c, "custom", h as u64)?;
                    p.holdout_id = h;
                    out.push((h, "custom".to_string(), p));
                }
                None => {
                    if n_volumes != 100 {
                        return Err(Error::config(format!(
                            "the fixed holdout lists need 100 volumes, the dataset has {n_volumes}; set split.counts"
                        )));
                    }
                    for &ir in &self.split.irs {
                        out.push((h, ir.to_string(), holdout_split(h, ir)?));
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs_base(&self) -> bool {
        self.strategies.iter().any(|s| *s == Strategy::CurSeg || !s.is_base())
    }
}

/// Loaded slices plus spacing.
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub spacing_mm: f64,
    pub n_volumes: usize,
}

pub fn load(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset.source {
        DatasetSource::Synthetic => Ok(Dataset {
            records: synth_dataset(&cfg.synth_spec())?,
            spacing_mm: cfg.dataset.spacing_mm,
            n_volumes: cfg.dataset.volumes,
        }),
        DatasetSource::Directory => {
            let root = cfg.dataset.path.as_ref().expect("validated");
            let (manifest, records) = load_dataset(root)?;
            Ok(Dataset {
                records,
                spacing_mm: manifest.spacing_mm,
                n_volumes: manifest.volume_count,
            })
        }
    }
}

/// Human-readable list of the cells a run would execute.
pub fn plan(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let n_volumes = match cfg.dataset.source {
        DatasetSource::Synthetic => cfg.dataset.volumes,
        DatasetSource::Directory => {
            let path = cfg.dataset.path.as_ref().expect("validated").join("manifest.txt");
            let text = fs::read_to_string(&path).map_err(|_| Error::Missing(format!("dataset manifest {}", path.display())))?;
            DatasetManifest::parse(&text, &path)?.volume_count
        }
    };
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} -> {}", cfg.name, cfg.out.display());
    let _ = writeln!(
        s,
        "network n_fil={} depth={} input={} dropout={}; trainer n_stp={} incremental={} batch={} lr={} eval_every={}",
        cfg.network.n_fil,
        cfg.network.depth,
        cfg.network.input_size,
        cfg.network.dropout_rate,
        cfg.trainer.n_stp,
        cfg.trainer.incremental_steps(),
        cfg.trainer.batch_size,
        cfg.trainer.lr,
        cfg.trainer.eval_every
    );
    let mut cells = 0;
    for (h, label, p) in cfg.partitions(n_volumes)? {
        for seed in &cfg.seeds {
            let names: Vec<&str> = cfg.strategies.iter().map(|s| s.label()).collect();
            let _ = writeln!(
                s,
                "holdout {h} {label} seed {seed}: cur={} inc={} val={} test={} strategies {}",
                p.current_ids.len(),
                p.incremental_ids.len(),
                p.validation_ids.len(),
                p.test_ids.len(),
                names.join(",")
            );
            cells += cfg.strategies.len();
        }
    }
    let _ = writeln!(s, "{cells} strategy cells");
    Ok(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub strategy: Strategy,
    pub holdout: u32,
    pub split: String,
    pub seed: u64,
    pub best_step: usize,
    pub best_metric: f64,
    pub log_sha256: String,
    pub model_sha256: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub metrics: Vec<PathBuf>,
    pub trained: usize,
    pub resumed: usize,
}

struct Views<'a> {
    cur: Vec<SampleRecord>,
    inc: Vec<SampleRecord>,
    val: ValidationSet,
    test: BTreeMap<u32, Vec<&'a SampleRecord>>,
}

fn views<'a>(records: &'a [SampleRecord], p: &DatasetPartition) -> Views<'a> {
    let ids = |v: &[u32]| v.iter().copied().collect::<BTreeSet<u32>>();
    let (cur, inc, val, test) = (ids(&p.current_ids), ids(&p.incremental_ids), ids(&p.validation_ids), ids(&p.test_ids));
    let pick = |set: &BTreeSet<u32>| records.iter().filter(|r| set.contains(&r.volume_id)).cloned().collect::<Vec<_>>();
    let mut test_map: BTreeMap<u32, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| test.contains(&r.volume_id)) {
        test_map.entry(r.volume_id).or_default().push(r);
    }
    for v in test_map.values_mut() {
        v.sort_by_key(|r| r.slice_index);
    }
    Views {
        cur: pick(&cur),
        inc: pick(&inc),
        val: ValidationSet::new(&pick(&val)),
        test: test_map,
    }
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    holdout: u32,
    split: String,
    seed: u64,
    resume: bool,
}

impl Cell<'_> {
    fn strategy_dir(&self, s: Strategy) -> PathBuf {
        self.dir.join(s.key())
    }

    fn done(&self, s: Strategy) -> bool {
        let d = self.strategy_dir(s);
        self.resume && d.join("model.ckpt").exists() && d.join("outcome.json").exists()
    }

    fn save(&self, s: Strategy, out: &TrainOutcome) -> Result<()> {
        let d = self.strategy_dir(s);
        fs::create_dir_all(&d)?;
        checkpoint::save(&out.net, &d.join("model.ckpt"), serde_json::json!({"strategy": s.key(), "best_step": out.best_step}))?;
        fs::write(d.join("train_log.jsonl"), out.log.text())?;
        let outcome = CellOutcome {
            strategy: s,
            holdout: self.holdout,
            split: self.split.clone(),
            seed: self.seed,
            best_step: out.best_step,
            best_metric: out.best_metric,
            log_sha256: out.log.checksum(),
            model_sha256: out.net.checksum(),
        };
        fs::write(d.join("outcome.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
        Ok(())
    }

    fn load(&self, s: Strategy) -> Result<Network> {
        Ok(checkpoint::load(&self.strategy_dir(s).join("model.ckpt"))?.0)
    }

    fn evaluate(&self, s: Strategy, net: &Network, v: &Views<'_>, spacing: f64, summary: &mut RunSummary) -> Result<()> {
        let d = &self.cfg.dataset;
        let mut entries: Vec<VolumeEntry> = Vec::new();
        let (cur_head, inc_head) = match s {
            Strategy::CurSeg => (Some(0), None),
            Strategy::IncSeg => (None, Some(0)),
            Strategy::CurIncSeg => (Some(0), Some(0)),
            _ => (Some(0), Some(1)),
        };
        if let Some(h) = cur_head {
            entries.extend(evaluate_head(net, &v.test, h, d.cur_class, Role::Cur, spacing, d.slice_spacing_mm)?);
        }
        if let Some(h) = inc_head {
            entries.extend(evaluate_head(net, &v.test, h, d.inc_class, Role::Inc, spacing, d.slice_spacing_mm)?);
        }
        let report = MetricsReport::new(s.label(), &self.split, self.holdout, self.seed, entries);
        let path = self.strategy_dir(s).join("metrics.json");
        fs::write(&path, report.to_json()?)?;
        summary.metrics.push(path);
        Ok(())
    }
}

/// Execute every cell of the grid, skipping finished cells when `resume` is set.
pub fn run(cfg: &ExperimentConfig, config_text: &str, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load(cfg)?;
    let vocab = data.records.iter().flat_map(|r| r.class_set.iter().copied()).collect::<BTreeSet<u8>>();
    for c in [cfg.dataset.cur_class, cfg.dataset.inc_class] {
        if !vocab.contains(&c) {
            return Err(Error::config(format!("dataset has no pixels of class {c}")));
        }
    }
    if let Some(r) = data.records.first() {
        if r.height != cfg.network.input_size || r.width != cfg.network.input_size {
            return Err(Error::config(format!(
                "network.input_size {} does not match {}×{} slices",
                cfg.network.input_size, r.height, r.width
            )));
        }
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), config_text)?;
    fs::write(cfg.out.join("resolved.toml"), cfg.to_toml()?)?;
    fs::create_dir_all(cfg.out.join("splits"))?;
    let mut summary = RunSummary::default();
    for (h, label, partition) in cfg.partitions(data.n_volumes)? {
        fs::write(cfg.out.join("splits").join(format!("h{h}_{label}.json")), partition.to_json()?)?;
        let v = views(&data.records, &partition);
        for &seed in &cfg.seeds {
            let cell = Cell {
                cfg,
                dir: cfg.out.join(format!("h{h}")).join(&label).join(format!("seed{seed}")),
                holdout: h,
                split: label.clone(),
                seed,
                resume,
            };
            run_cell(&cell, &v, data.spacing_mm, &mut summary)?;
        }
    }
    Ok(summary)
}

fn timed<T>(what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    log::info!("{what} done in {:.1}s", t.elapsed().as_secs_f64());
    Ok(out)
}

fn run_cell(cell: &Cell<'_>, v: &Views<'_>, spacing: f64, summary: &mut RunSummary) -> Result<()> {
    let cfg = cell.cfg;
    let (cur_c, inc_c) = (cfg.dataset.cur_class, cfg.dataset.inc_class);
    let tag = format!("holdout {} {} seed {}", cell.holdout, cell.split, cell.seed);
    let listed = |s: Strategy| cfg.strategies.contains(&s);

    let base = if cfg.needs_base() {
        let s = Strategy::CurSeg;
        let net = if cell.done(s) {
            summary.resumed += 1;
            cell.load(s)?
        } else {
            let out = timed(&format!("{tag} CurSeg"), || {
                train_base(s, cfg.network, &v.cur, &[cur_c], &v.val, &cfg.trainer, cell.seed)
            })?;
            cell.save(s, &out)?;
            summary.trained += 1;
            out.net
        };
        if listed(s) {
            cell.evaluate(s, &net, v, spacing, summary)?;
        }
        Some(net)
    } else {
        None
    };

    for (s, records, classes) in [
        (Strategy::IncSeg, v.inc.clone(), vec![inc_c]),
        (Strategy::CurIncSeg, [v.cur.clone(), v.inc.clone()].concat(), {
            let mut c = vec![cur_c, inc_c];
            c.sort();
            c
        }),
    ] {
        if !listed(s) {
            continue;
        }
        let net = if cell.done(s) {
            summary.resumed += 1;
            cell.load(s)?
        } else {
            let out = timed(&format!("{tag} {s}"), || {
                train_base(s, cfg.network, &records, &classes, &v.val, &cfg.trainer, cell.seed)
            })?;
            cell.save(s, &out)?;
            summary.trained += 1;
            out.net
        };
        cell.evaluate(s, &net, v, spacing, summary)?;
    }

    let Some(base) = base else { return Ok(()) };
    let cur_only: BTreeSet<u8> = [cur_c].into();
    let cur_train: Vec<SampleRecord> = v.cur.iter().map(|r| crate::data::keep_labels(r, &cur_only)).collect();
    let old_weights = BTreeMap::from([(0usize, head_class_weights(&base, 0, &cur_train)?)]);
    for &s in cfg.strategies.iter().filter(|s| !s.is_base()) {
        let net = if cell.done(s) {
            summary.resumed += 1;
            cell.load(s)?
        } else {
            let store = match s.exemplar_mode() {
                Some(mode) => {
                    let store = timed(&format!("{tag} {s} exemplars"), || {
                        build_exemplar_store(&base, 0, &v.cur, &[cur_c], mode, &cfg.trainer, cell.seed)
                    })?;
                    let d = cell.dir.join("exemplars").join(s.key());
                    fs::create_dir_all(&d)?;
                    if let Some(pool) = &store.pool {
                        fs::write(d.join("E_manifest.txt"), pool.to_manifest())?;
                    }
                    match &store.representatives {
                        Some(reps) => fs::write(d.join("F_manifest.txt"), reps.to_manifest())?,
                        None => fs::write(d.join("F_manifest.txt"), store.manifest())?,
                    }
                    Some(store)
                }
                None => None,
            };
            let inputs = IncrementalInputs {
                records: &v.inc,
                classes: &[inc_c],
                old_targets: &[(0, cur_c)],
                old_weights: &old_weights,
                exemplars: store.as_ref(),
            };
            let out = timed(&format!("{tag} {s}"), || incremental_step(s, &base, &inputs, &v.val, &cfg.trainer, cell.seed))?;
            cell.save(s, &out)?;
            summary.trained += 1;
            out.net
        };
        cell.evaluate(s, &net, v, spacing, summary)?;
    }
    Ok(())
}

/// Every `metrics.json` below `dir`, in path order.
pub fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "metrics.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        ExperimentConfig::preset("paper-table2-desk").unwrap().validate().unwrap();
        assert!(ExperimentConfig::preset("paper-table2-full").unwrap().validate().is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = ExperimentConfig::parse("[trainer]\nn_mc = 1\n").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("trainer.n_mc"), "{e}");
        let e = ExperimentConfig::parse("[trainer]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::parse("[split]\nholdouts = [9]\n").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("split.holdouts"), "{e}");
    }

    #[test]
    fn plan_lists_every_cell_without_writing() {
        let mut cfg = ExperimentConfig::preset("paper-table2-desk").unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.out = dir.path().join("never");
        let text = plan(&cfg).unwrap();
        assert!(text.contains("48 strategy cells"), "{text}");
        assert!(text.contains("holdout 2 IR01 seed 0: cur=69 inc=1 val=5 test=25"));
        assert!(!cfg.out.exists());
    }

    #[test]
    fn custom_counts_use_a_seeded_shuffle() {
        let mut cfg = ExperimentConfig::parse("").unwrap();
        cfg.split.counts = Some(SplitCounts {
            current: 2,
            incremental: 1,
            validation: 1,
            test: 1,
        });
        let parts = cfg.partitions(5).unwrap();
        assert!(cfg.partitions(6).is_err());
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].2.all_ids().count(), 5);
        cfg.split.counts = None;
        assert!(cfg.partitions(6).is_err());
    }
}
