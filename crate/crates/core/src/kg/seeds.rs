use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EntityId, MultiModalKG};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSplit {
    /// Indices into `pairs`, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Known equivalent pairs `(KG1 entity, KG2 entity)` and an optional
/// train/test partition of their indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSeedSet {
    pub pairs: Vec<(EntityId, EntityId)>,
    pub split: Option<SeedSplit>,
}

impl AlignmentSeedSet {
    pub fn new(pairs: Vec<(EntityId, EntityId)>) -> Result<Self> {
        let set = AlignmentSeedSet { pairs, split: None };
        set.check()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn train_pairs(&self) -> Vec<(EntityId, EntityId)> {
        self.split
            .as_ref()
            .map(|s| s.train.iter().map(|&i| self.pairs[i]).collect())
            .unwrap_or_default()
    }

    /// Test pairs; every pair when the set is unsplit.
    pub fn test_pairs(&self) -> Vec<(EntityId, EntityId)> {
        match &self.split {
            Some(s) => s.test.iter().map(|&i| self.pairs[i]).collect(),
            None => self.pairs.clone(),
        }
    }

    /// Uniqueness on both sides plus the partition invariant.
    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut left = HashSet::new();
        let mut right = HashSet::new();
        for (i, &(l, r)) in self.pairs.iter().enumerate() {
            if !left.insert(l) {
                problems.push(format!("pair {i}: left entity {l} already aligned"));
            }
            if !right.insert(r) {
                problems.push(format!("pair {i}: right entity {r} already aligned"));
            }
        }
        if let Some(split) = &self.split {
            let mut seen = vec![false; self.pairs.len()];
            for &i in split.train.iter().chain(&split.test) {
                match seen.get_mut(i) {
                    Some(s) if !*s => *s = true,
                    Some(_) => {
                        problems.push(format!("pair index {i} in both or repeated in a split"))
                    }
                    None => problems.push(format!("split index {i} out of range")),
                }
            }
            if seen.iter().any(|s| !s) {
                problems.push("split does not cover every pair".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Shuffle-and-cut partition: `|train| = floor(train_fraction · |pairs|)`.
pub fn split_seeds(
    seeds: &AlignmentSeedSet,
    train_fraction: f64,
    rng_seed: u64,
) -> Result<AlignmentSeedSet> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = seeds.pairs.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(rng_seed, "split", &[]));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(AlignmentSeedSet {
        pairs: seeds.pairs.clone(),
        split: Some(SeedSplit { train, test }),
    })
}

/// Read `left \t right` name pairs, resolved against the two graphs.
pub fn load_seeds(path: &Path, kg1: &MultiModalKG, kg2: &MultiModalKG) -> Result<AlignmentSeedSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (i1, i2) = (kg1.name_index(), kg2.name_index());
    let mut pairs = Vec::new();
    let mut dangling = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                n + 1,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        match (i1.get(fields[0]), i2.get(fields[1])) {
            (Some(&l), Some(&r)) => pairs.push((l, r)),
            (l, r) => {
                if l.is_none() {
                    dangling.push(format!(
                        "line {}: left entity {:?} not in KG1",
                        n + 1,
                        fields[0]
                    ));
                }
                if r.is_none() {
                    dangling.push(format!(
                        "line {}: right entity {:?} not in KG2",
                        n + 1,
                        fields[1]
                    ));
                }
            }
        }
    }
    if !dangling.is_empty() {
        return Err(Error::Validation(dangling));
    }
    AlignmentSeedSet::new(pairs)
}

pub fn write_seeds(
    path: &Path,
    seeds: &AlignmentSeedSet,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
) -> Result<()> {
    let body: String = seeds
        .pairs
        .iter()
        .map(|&(l, r)| format!("{}\t{}\n", kg1.entities[l.index()], kg2.entities[r.index()]))
        .collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}
