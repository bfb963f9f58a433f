//! Volume-level current/incremental/validation/test partitioning.
//!
//! The five shuffled index lists are embedded verbatim; they are the ground
//! truth for the 100-volume layout. The seeds that produced them are kept for
//! reference only, since shuffle semantics differ between PRNG libraries.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const HOLDOUT_COUNT: usize = 5;
pub const VOLUME_COUNT: usize = 100;
pub const VALIDATION_COUNT: usize = 5;
pub const TEST_COUNT: usize = 25;

/// Seeds behind the fixed lists, holdout 1..=5.
pub const HOLDOUT_SEEDS: [u32; HOLDOUT_COUNT] = [1991, 1881, 1938, 905, 42];

/// Shuffled volume ids per holdout set, in selection order.
pub const HOLDOUT_LISTS: [[u8; VOLUME_COUNT]; HOLDOUT_COUNT] = [
    [
        47, 100, 54, 13, 45, 20, 1, 68, 71, 55, 33, 38, 58, 53, 85, 60, 97, 84, 63, 40,
        28, 34, 69, 90, 57, 42, 46, 62, 75, 77, 7, 10, 78, 3, 24, 5, 74, 4, 26, 15,
        31, 29, 87, 92, 44, 16, 73, 88, 21, 56, 94, 89, 41, 51, 93, 9, 17, 99, 18, 61,
        19, 91, 43, 27, 11, 67, 37, 96, 83, 80, 98, 32, 22, 76, 82, 36, 30, 50, 59, 49,
        48, 6, 95, 81, 2, 86, 25, 66, 39, 23, 35, 12, 64, 70, 72, 8, 14, 52, 79, 65,
    ],
    [
        18, 70, 7, 8, 58, 40, 21, 46, 50, 19, 54, 64, 52, 36, 85, 3, 24, 94, 72, 67,
        57, 37, 23, 96, 68, 32, 83, 55, 66, 26, 48, 11, 6, 98, 38, 31, 14, 27, 13, 4,
        81, 74, 80, 20, 5, 89, 47, 33, 22, 9, 78, 45, 65, 97, 63, 56, 43, 1, 87, 84,
        86, 35, 34, 2, 93, 15, 77, 53, 100, 60, 79, 42, 39, 71, 62, 59, 75, 16, 41, 69,
        95, 82, 10, 44, 28, 92, 25, 17, 76, 99, 88, 12, 30, 73, 91, 49, 51, 90, 61, 29,
    ],
    [
        91, 98, 23, 57, 3, 77, 36, 24, 30, 82, 44, 99, 85, 79, 19, 48, 81, 87, 8, 56,
        40, 83, 29, 47, 42, 18, 89, 45, 11, 39, 43, 74, 20, 52, 92, 53, 50, 69, 62, 66,
        58, 12, 59, 54, 6, 84, 38, 60, 5, 15, 86, 14, 25, 78, 90, 68, 27, 33, 10, 32,
        17, 100, 88, 9, 96, 76, 67, 41, 80, 97, 93, 65, 70, 49, 73, 37, 95, 46, 4, 1,
        63, 2, 13, 64, 71, 55, 7, 22, 61, 16, 35, 34, 72, 31, 28, 94, 75, 26, 51, 21,
    ],
    [
        12, 82, 42, 95, 54, 5, 3, 60, 4, 33, 89, 24, 21, 65, 35, 43, 17, 91, 50, 61,
        2, 59, 81, 7, 34, 53, 87, 80, 62, 38, 32, 27, 77, 67, 79, 52, 100, 49, 98, 20,
        22, 84, 48, 94, 85, 96, 9, 41, 29, 44, 39, 92, 31, 75, 66, 69, 45, 70, 99, 18,
        46, 6, 97, 26, 83, 37, 11, 16, 88, 90, 68, 36, 57, 19, 8, 74, 93, 14, 64, 56,
        55, 78, 23, 10, 63, 13, 47, 1, 15, 86, 40, 72, 30, 28, 76, 25, 51, 58, 71, 73,
    ],
    [
        84, 54, 71, 46, 45, 40, 23, 81, 11, 1, 19, 31, 74, 34, 91, 5, 77, 78, 13, 32,
        56, 89, 27, 43, 70, 16, 41, 97, 10, 73, 12, 48, 86, 29, 94, 6, 67, 66, 36, 17,
        50, 35, 8, 96, 28, 20, 82, 26, 63, 14, 25, 4, 18, 39, 9, 79, 7, 65, 37, 90,
        57, 100, 55, 44, 51, 68, 47, 69, 62, 98, 80, 42, 59, 49, 99, 58, 76, 33, 95, 60,
        64, 85, 38, 30, 2, 53, 22, 3, 24, 88, 92, 75, 87, 83, 21, 61, 72, 15, 93, 52,
    ],
];

/// Incremental-to-current volume ratio setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IrLabel {
    #[serde(rename = "IR100")]
    Ir100,
    #[serde(rename = "IR17")]
    Ir17,
    #[serde(rename = "IR04")]
    Ir04,
    #[serde(rename = "IR01")]
    Ir01,
}

impl IrLabel {
    pub const ALL: [IrLabel; 4] = [IrLabel::Ir100, IrLabel::Ir17, IrLabel::Ir04, IrLabel::Ir01];

    /// `(current, incremental, validation, test)` volume counts.
    pub fn counts(self) -> SplitCounts {
        let (current, incremental) = match self {
            IrLabel::Ir100 => (35, 35),
            IrLabel::Ir17 => (60, 10),
            IrLabel::Ir04 => (67, 3),
            IrLabel::Ir01 => (69, 1),
        };
        SplitCounts {
            current,
            incremental,
            validation: VALIDATION_COUNT,
            test: TEST_COUNT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IrLabel::Ir100 => "IR100",
            IrLabel::Ir17 => "IR17",
            IrLabel::Ir04 => "IR04",
            IrLabel::Ir01 => "IR01",
        }
    }
}

impl fmt::Display for IrLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IrLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches(['I', 'i']).trim_start_matches(['R', 'r']);
        match digits {
            "100" => Ok(IrLabel::Ir100),
            "17" => Ok(IrLabel::Ir17),
            "04" | "4" => Ok(IrLabel::Ir04),
            "01" | "1" => Ok(IrLabel::Ir01),
            _ => Err(Error::config(format!("unknown incremental ratio '{s}' (expected IR100, IR17, IR04 or IR01)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub current: usize,
    pub incremental: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.current + self.incremental + self.validation + self.test
    }
}

/// Disjoint volume-id lists for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub ir_label: String,
    pub holdout_id: u32,
    pub current_ids: Vec<u32>,
    pub incremental_ids: Vec<u32>,
    pub validation_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

impl DatasetPartition {
    /// Take the four sets consecutively from `order`.
    pub fn from_order(order: &[u32], counts: SplitCounts, ir_label: &str, holdout_id: u32) -> Result<Self> {
        if counts.total() != order.len() {
            return Err(Error::config(format!(
                "split counts sum to {} but {} volumes are available",
                counts.total(),
                order.len()
            )));
        }
        if counts.current == 0 || counts.incremental == 0 || counts.validation == 0 || counts.test == 0 {
            return Err(Error::config("every split needs at least one volume"));
        }
        let distinct: BTreeSet<_> = order.iter().collect();
        if distinct.len() != order.len() {
            return Err(Error::config("volume order contains duplicates"));
        }
        let (cur, rest) = order.split_at(counts.current);
        let (inc, rest) = rest.split_at(counts.incremental);
        let (val, test) = rest.split_at(counts.validation);
        Ok(DatasetPartition {
            ir_label: ir_label.to_string(),
            holdout_id,
            current_ids: cur.to_vec(),
            incremental_ids: inc.to_vec(),
            validation_ids: val.to_vec(),
            test_ids: test.to_vec(),
        })
    }

    pub fn all_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.current_ids
            .iter()
            .chain(&self.incremental_ids)
            .chain(&self.validation_ids)
            .chain(&self.test_ids)
            .copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn holdout_list(holdout_id: u32) -> Result<Vec<u32>> {
    if !(1..=HOLDOUT_COUNT as u32).contains(&holdout_id) {
        return Err(Error::config(format!("holdout id {holdout_id} is not in 1..=5")));
    }
    Ok(HOLDOUT_LISTS[holdout_id as usize - 1].iter().map(|&v| v as u32).collect())
}

/// The fixed partition for a holdout set and incremental ratio.
pub fn holdout_split(holdout_id: u32, ir: IrLabel) -> Result<DatasetPartition> {
    DatasetPartition::from_order(&holdout_list(holdout_id)?, ir.counts(), ir.as_str(), holdout_id)
}

/// Partition for a volume set without a fixed list: ids `1..=n`
/// shuffled with a seeded generator, then split consecutively.
pub fn seeded_split(n_volumes: usize, counts: SplitCounts, ir_label: &str, seed: u64) -> Result<DatasetPartition> {
    let mut order: Vec<u32> = (1..=n_volumes as u32).collect();
    order.shuffle(&mut rng::stream(seed, "holdout"));
    DatasetPartition::from_order(&order, counts, ir_label, 0)
}
