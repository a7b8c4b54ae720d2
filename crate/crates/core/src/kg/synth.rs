//! Paired synthetic graphs with known alignment and controllable
//! contextual gaps.
//!
//! KG2 is an id-permuted copy of KG1's relational structure. Each aligned
//! KG2 entity receives noisy copies of its counterpart's attribute vectors,
//! then a per-modality count gap: either extra near-duplicates of existing
//! attributes or deletions. With `missing_modality_rate` an aligned KG2
//! entity additionally loses one whole modality.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    AlignmentSeedSet, AttributeId, EntityId, Modality, MultiModalKG, RelationTypeId, Triple,
};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_relation_types: usize,
    pub avg_degree: f64,
    /// Inclusive range of KG1 text attributes per entity.
    pub text_attr_count_range: (usize, usize),
    pub image_attr_count_range: (usize, usize),
    /// Maximum text attribute-count difference injected between aligned pairs.
    pub gap_level: usize,
    /// Same for images; `None` reuses `gap_level`.
    pub image_gap_level: Option<usize>,
    pub missing_modality_rate: f64,
    pub feature_noise_sigma: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_entities: 200,
            n_relation_types: 8,
            avg_degree: 4.0,
            text_attr_count_range: (1, 6),
            image_attr_count_range: (1, 3),
            gap_level: 3,
            image_gap_level: None,
            missing_modality_rate: 0.0,
            feature_noise_sigma: 0.01,
            text_dim: 32,
            image_dim: 32,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_entities < 2 {
            return bad(format!(
                "n_entities must be at least 2, got {}",
                self.n_entities
            ));
        }
        if self.n_relation_types == 0 {
            return bad("n_relation_types must be positive".into());
        }
        if !(self.avg_degree.is_finite() && self.avg_degree >= 0.0) {
            return bad(format!(
                "avg_degree must be finite and >= 0, got {}",
                self.avg_degree
            ));
        }
        for (name, (lo, hi)) in [
            ("text", self.text_attr_count_range),
            ("image", self.image_attr_count_range),
        ] {
            if lo > hi {
                return bad(format!("{name} attribute count range {lo}..={hi} is empty"));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_modality_rate) {
            return bad(format!(
                "missing_modality_rate {} outside [0, 1]",
                self.missing_modality_rate
            ));
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return bad(format!(
                "feature_noise_sigma must be >= 0, got {}",
                self.feature_noise_sigma
            ));
        }
        if self.text_dim == 0 || self.image_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        let max_triples = self.n_entities * (self.n_entities - 1) * self.n_relation_types;
        if self.n_triples() > max_triples / 2 {
            return bad(format!(
                "avg_degree {} is too dense for {} entities",
                self.avg_degree, self.n_entities
            ));
        }
        Ok(())
    }

    fn n_triples(&self) -> usize {
        (self.n_entities as f64 * self.avg_degree / 2.0).round() as usize
    }

    fn gap_for(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.gap_level,
            Modality::Image => self.image_gap_level.unwrap_or(self.gap_level),
        }
    }

    fn dim_for(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_dim,
            Modality::Image => self.image_dim,
        }
    }

    fn range_for(&self, modality: Modality) -> (usize, usize) {
        match modality {
            Modality::Text => self.text_attr_count_range,
            Modality::Image => self.image_attr_count_range,
        }
    }
}

struct AttrBuilder {
    attrs: BTreeMap<EntityId, Vec<AttributeId>>,
    table: FeatureTable<AttributeId>,
}

impl AttrBuilder {
    fn new(dim: usize) -> Self {
        AttrBuilder {
            attrs: BTreeMap::new(),
            table: FeatureTable::new(dim),
        }
    }

    fn add(&mut self, entity: EntityId, v: Vec<f64>) {
        let id = AttributeId::from(self.table.len());
        self.table.vectors.insert(id, v);
        self.attrs.entry(entity).or_default().push(id);
    }
}

fn noisy(rng: &mut StreamRng, v: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    v.iter().map(|x| x + noise.sample(rng)).collect()
}

/// Two aligned graphs and the full seed set (unsplit), deterministic in
/// `cfg.rng_seed`.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
) -> Result<(MultiModalKG, MultiModalKG, AlignmentSeedSet)> {
    cfg.validate()?;
    let n = cfg.n_entities;
    let mut rng = crate::rng::stream(cfg.rng_seed, "synthetic", &[]);

    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(cfg.n_triples());
    while triples.len() < cfg.n_triples() {
        let head = rng.random_range(0..n);
        let tail = rng.random_range(0..n);
        let rel = rng.random_range(0..cfg.n_relation_types);
        if head != tail && seen.insert((head, rel, tail)) {
            triples.push(Triple {
                head: EntityId::from(head),
                rel: RelationTypeId::from(rel),
                tail: EntityId::from(tail),
            });
        }
    }

    // KG1 attribute vectors, kept per entity so KG2 can copy them.
    let mut source: [Vec<Vec<Vec<f64>>>; 2] = [Vec::new(), Vec::new()];
    let mut left = [
        AttrBuilder::new(cfg.text_dim),
        AttrBuilder::new(cfg.image_dim),
    ];
    for (m, modality) in Modality::ALL.into_iter().enumerate() {
        let (lo, hi) = cfg.range_for(modality);
        for v in 0..n {
            let count = rng.random_range(lo..=hi);
            let vecs: Vec<Vec<f64>> = (0..count)
                .map(|_| {
                    (0..cfg.dim_for(modality))
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            for x in &vecs {
                left[m].add(EntityId::from(v), x.clone());
            }
            source[m].push(vecs);
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut right = [
        AttrBuilder::new(cfg.text_dim),
        AttrBuilder::new(cfg.image_dim),
    ];
    let mut right_vecs: [Vec<Vec<Vec<f64>>>; 2] = [vec![Vec::new(); n], vec![Vec::new(); n]];
    for v in 0..n {
        for (m, modality) in Modality::ALL.into_iter().enumerate() {
            let base = &source[m][v];
            let mut vecs: Vec<Vec<f64>> = base
                .iter()
                .map(|x| noisy(&mut rng, x, cfg.feature_noise_sigma))
                .collect();
            let gap = rng.random_range(0..=cfg.gap_for(modality));
            let grow: bool = rng.random();
            if gap > 0 {
                if grow && !base.is_empty() {
                    for _ in 0..gap {
                        let pick = &base[rng.random_range(0..base.len())];
                        vecs.push(noisy(&mut rng, pick, cfg.feature_noise_sigma));
                    }
                } else if !grow {
                    for _ in 0..gap.min(vecs.len()) {
                        let drop = rng.random_range(0..vecs.len());
                        vecs.remove(drop);
                    }
                }
            }
            vecs.shuffle(&mut rng);
            right_vecs[m][perm[v]] = vecs;
        }
        if rng.random_bool(cfg.missing_modality_rate) {
            let m = rng.random_range(0..2);
            right_vecs[m][perm[v]].clear();
        }
    }
    for (m, vecs) in right_vecs.into_iter().enumerate() {
        for (j, list) in vecs.into_iter().enumerate() {
            for x in list {
                right[m].add(EntityId::from(j), x);
            }
        }
    }

    let mut right_triples: Vec<Triple> = triples
        .iter()
        .map(|t| Triple {
            head: EntityId::from(perm[t.head.index()]),
            rel: t.rel,
            tail: EntityId::from(perm[t.tail.index()]),
        })
        .collect();
    right_triples.shuffle(&mut rng);

    let relation_types: Vec<String> = (0..cfg.n_relation_types)
        .map(|r| format!("rel{r}"))
        .collect();
    let [lt, li] = left;
    let [rt, ri] = right;
    let kg1 = MultiModalKG {
        entities: (0..n).map(|i| format!("kg1/e{i}")).collect(),
        relation_types: relation_types.clone(),
        triples,
        text_attrs: lt.attrs,
        image_attrs: li.attrs,
        text_features: lt.table,
        image_features: li.table,
    };
    let kg2 = MultiModalKG {
        entities: (0..n).map(|j| format!("kg2/e{j}")).collect(),
        relation_types,
        triples: right_triples,
        text_attrs: rt.attrs,
        image_attrs: ri.attrs,
        text_features: rt.table,
        image_features: ri.table,
    };
    let seeds = AlignmentSeedSet::new(
        (0..n)
            .map(|v| (EntityId::from(v), EntityId::from(perm[v])))
            .collect(),
    )?;
    Ok((kg1, kg2, seeds))
}
