//! TransE entity and relation initialization.
//!
//! L2 scoring `‖h + r − t‖`, margin ranking against one corrupted triple
//! per negative (head or tail replaced with equal odds), plain SGD, and
//! entity vectors projected back to the unit sphere after every step.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::kg::{EntityId, MultiModalKG, RelationTypeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_triple: usize,
    pub rng_seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 128,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 200,
            negatives_per_triple: 1,
            rng_seed: 0,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.epochs == 0 || self.negatives_per_triple == 0 {
            return Err(Error::Config(
                "TransE dim, epochs and negatives must be positive".into(),
            ));
        }
        if !(self.margin > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "TransE margin and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransEModel {
    pub entities: FeatureTable<EntityId>,
    pub relations: FeatureTable<RelationTypeId>,
    /// Mean margin loss per epoch.
    pub loss_history: Vec<f64>,
}

/// `‖h + r − t‖₂`
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(Error::DimMismatch {
            context: "transe_score",
            expected: h.len(),
            found: if r.len() != h.len() { r.len() } else { t.len() },
        });
    }
    Ok(h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (h + r - t).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// `max(0, γ + s_pos − s_neg)`
pub fn margin_loss(pos_score: f64, neg_score: f64, margin: f64) -> f64 {
    (margin + pos_score - neg_score).max(0.0)
}

pub fn train_transe(kg: &MultiModalKG, cfg: &TransEConfig) -> Result<TransEModel> {
    let triples: Vec<_> = kg
        .triples
        .iter()
        .map(|t| (t.head.index(), t.rel.index(), t.tail.index()))
        .collect();
    let fit = fit(kg.n_entities(), kg.n_relation_types(), &triples, cfg)?;
    Ok(TransEModel {
        entities: to_table(fit.dim, fit.entities.iter().cloned().enumerate()),
        relations: to_table(fit.dim, fit.relations.iter().cloned().enumerate()),
        loss_history: fit.loss_history,
    })
}

/// Train one embedding space over both graphs. Each anchor pair shares a
/// single entity vector, and relation types with equal names share a
/// relation vector, so the two resulting tables are directly comparable.
pub fn train_transe_joint(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    anchors: &[(EntityId, EntityId)],
    cfg: &TransEConfig,
) -> Result<(TransEModel, TransEModel)> {
    let n1 = kg1.n_entities();
    let anchor_of: HashMap<usize, usize> = anchors
        .iter()
        .map(|&(l, r)| (r.index(), l.index()))
        .collect();
    let mut right_index = Vec::with_capacity(kg2.n_entities());
    let mut next = n1;
    for j in 0..kg2.n_entities() {
        match anchor_of.get(&j) {
            Some(&i) => right_index.push(i),
            None => {
                right_index.push(next);
                next += 1;
            }
        }
    }

    let mut rel_names: HashMap<&str, usize> = kg1
        .relation_types
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut right_rel = Vec::with_capacity(kg2.n_relation_types());
    for name in &kg2.relation_types {
        let len = rel_names.len();
        right_rel.push(*rel_names.entry(name.as_str()).or_insert(len));
    }

    let mut triples: Vec<_> = kg1
        .triples
        .iter()
        .map(|t| (t.head.index(), t.rel.index(), t.tail.index()))
        .collect();
    triples.extend(kg2.triples.iter().map(|t| {
        (
            right_index[t.head.index()],
            right_rel[t.rel.index()],
            right_index[t.tail.index()],
        )
    }));
    let fit = fit(next, rel_names.len(), &triples, cfg)?;

    let left = TransEModel {
        entities: to_table(fit.dim, (0..n1).map(|i| (i, fit.entities[i].clone()))),
        relations: to_table(
            fit.dim,
            (0..kg1.n_relation_types()).map(|i| (i, fit.relations[i].clone())),
        ),
        loss_history: fit.loss_history.clone(),
    };
    let right = TransEModel {
        entities: to_table(
            fit.dim,
            right_index
                .iter()
                .enumerate()
                .map(|(j, &u)| (j, fit.entities[u].clone())),
        ),
        relations: to_table(
            fit.dim,
            right_rel
                .iter()
                .enumerate()
                .map(|(j, &u)| (j, fit.relations[u].clone())),
        ),
        loss_history: fit.loss_history,
    };
    Ok((left, right))
}

fn to_table<K: Ord + From<usize>>(
    dim: usize,
    rows: impl Iterator<Item = (usize, Vec<f64>)>,
) -> FeatureTable<K> {
    FeatureTable {
        dim,
        vectors: rows.map(|(i, v)| (K::from(i), v)).collect(),
    }
}

struct Fit {
    dim: usize,
    entities: Vec<Vec<f64>>,
    relations: Vec<Vec<f64>>,
    loss_history: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn residual(h: &[f64], r: &[f64], t: &[f64]) -> (Vec<f64>, f64) {
    let d: Vec<f64> = h
        .iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| h + r - t)
        .collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d, n)
}

fn fit(
    n_entities: usize,
    n_relations: usize,
    triples: &[(usize, usize, usize)],
    cfg: &TransEConfig,
) -> Result<Fit> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Empty("TransE needs at least one triple"));
    }
    if n_entities < 2 {
        return Err(Error::Empty("TransE needs at least two entities"));
    }
    let dim = cfg.dim;
    let bound = 6.0 / (dim as f64).sqrt();
    let mut init = crate::rng::stream(cfg.rng_seed, "transe-init", &[]);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| init.random_range(-bound..bound)).collect();
                normalize(&mut v);
                v
            })
            .collect()
    };
    let mut ent = draw(n_entities);
    let mut rel = draw(n_relations);

    let lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = crate::rng::stream(cfg.rng_seed, "transe-epoch", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &ti in &order {
            let (h, r, t) = triples[ti];
            for _ in 0..cfg.negatives_per_triple {
                let corrupt_head: bool = rng.random();
                let original = if corrupt_head { h } else { t };
                let mut other = rng.random_range(0..n_entities - 1);
                if other >= original {
                    other += 1;
                }
                let (nh, nt) = if corrupt_head { (other, t) } else { (h, other) };

                let (dp, sp) = residual(&ent[h], &rel[r], &ent[t]);
                let (dn, sn) = residual(&ent[nh], &rel[r], &ent[nt]);
                let loss = margin_loss(sp, sn, cfg.margin);
                total += loss;
                if loss <= 0.0 {
                    continue;
                }
                // d/dθ of s_pos − s_neg through the residuals
                let gp: Vec<f64> = if sp > 0.0 {
                    dp.iter().map(|x| x / sp).collect()
                } else {
                    vec![0.0; dim]
                };
                let gn: Vec<f64> = if sn > 0.0 {
                    dn.iter().map(|x| -x / sn).collect()
                } else {
                    vec![0.0; dim]
                };
                for k in 0..dim {
                    ent[h][k] -= lr * gp[k];
                    ent[t][k] += lr * gp[k];
                    rel[r][k] -= lr * (gp[k] + gn[k]);
                    ent[nh][k] -= lr * gn[k];
                    ent[nt][k] += lr * gn[k];
                }
                for e in [h, t, nh, nt] {
                    normalize(&mut ent[e]);
                }
            }
        }
        history.push(total / (triples.len() * cfg.negatives_per_triple) as f64);
    }
    Ok(Fit {
        dim,
        entities: ent,
        relations: rel,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{MultiModalKG, Triple};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn chain(n: usize) -> MultiModalKG {
        MultiModalKG {
            entities: (0..n).map(|i| format!("e{i}")).collect(),
            relation_types: vec!["next".into()],
            triples: (0..n - 1)
                .map(|i| Triple {
                    head: EntityId::from(i),
                    rel: RelationTypeId(0),
                    tail: EntityId::from(i + 1),
                })
                .collect(),
            text_attrs: BTreeMap::new(),
            image_attrs: BTreeMap::new(),
            text_features: FeatureTable::new(1),
            image_features: FeatureTable::new(1),
        }
    }

    fn score(m: &TransEModel, h: usize, r: usize, t: usize) -> f64 {
        transe_score(
            m.entities.get(&EntityId::from(h)).unwrap(),
            m.relations.get(&RelationTypeId::from(r)).unwrap(),
            m.entities.get(&EntityId::from(t)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(
            transe_score(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            transe_score(&[0.3, -2.0], &[0.0, 0.0], &[0.3, -2.0]).unwrap(),
            0.0
        );
        assert_relative_eq!(
            transe_score(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]).unwrap(),
            2f64.sqrt()
        );
        assert!(transe_score(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn margin_loss_saturates() {
        assert_eq!(margin_loss(0.0, 2.0, 1.0), 0.0);
        assert_eq!(margin_loss(1.0, 0.5, 1.0), 1.5);
    }

    #[test]
    fn score_rotation_invariant() {
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let (h, r, t) = ([0.3, -1.2], [0.5, 0.25], [1.0, 0.7]);
        assert_relative_eq!(
            transe_score(&h, &r, &t).unwrap(),
            transe_score(&rot(h), &rot(r), &rot(t)).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_triple_score_decreases() {
        let kg = chain(2);
        let cfg = TransEConfig {
            dim: 16,
            epochs: 200,
            ..TransEConfig::default()
        };
        let before = train_transe(
            &kg,
            &TransEConfig {
                epochs: 1,
                learning_rate: 1e-12,
                ..cfg.clone()
            },
        )
        .unwrap();
        let after = train_transe(&kg, &cfg).unwrap();
        assert!(score(&after, 0, 0, 1) < score(&before, 0, 0, 1));
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let kg = chain(20);
        let cfg = TransEConfig {
            dim: 8,
            epochs: 30,
            rng_seed: 5,
            ..TransEConfig::default()
        };
        let a = train_transe(&kg, &cfg).unwrap();
        assert_eq!(a, train_transe(&kg, &cfg).unwrap());
        for v in a.entities.vectors.values() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.entities.len(), 20);
        assert_eq!(a.relations.len(), 1);
    }

    #[test]
    fn chain_separates_true_from_corrupted() {
        let kg = chain(20);
        let cfg = TransEConfig {
            dim: 16,
            epochs: 300,
            rng_seed: 1,
            ..TransEConfig::default()
        };
        let m = train_transe(&kg, &cfg).unwrap();
        let pos: f64 = (0..19).map(|i| score(&m, i, 0, i + 1)).sum::<f64>() / 19.0;
        let mut rng = crate::rng::stream(3, "corrupt", &[]);
        let mut neg = 0.0;
        for _ in 0..100 {
            let (h, t) = loop {
                let h = rng.random_range(0..20);
                let t = rng.random_range(0..20);
                if t != h + 1 {
                    break (h, t);
                }
            };
            neg += score(&m, h, 0, t);
        }
        neg /= 100.0;
        assert!(pos < neg, "pos {pos} neg {neg}");
        let first = m.loss_history[..10].iter().sum::<f64>();
        let last = m.loss_history[m.loss_history.len() - 10..]
            .iter()
            .sum::<f64>();
        assert!(last < first);
    }

    #[test]
    fn empty_triples_rejected() {
        let mut kg = chain(3);
        kg.triples.clear();
        assert!(matches!(
            train_transe(&kg, &TransEConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn joint_training_shares_anchor_vectors() {
        let a = chain(6);
        let b = chain(6);
        let anchors = [(EntityId(0), EntityId(0)), (EntityId(3), EntityId(3))];
        let cfg = TransEConfig {
            dim: 8,
            epochs: 20,
            ..TransEConfig::default()
        };
        let (l, r) = train_transe_joint(&a, &b, &anchors, &cfg).unwrap();
        assert_eq!(l.entities.get(&EntityId(3)), r.entities.get(&EntityId(3)));
        assert_ne!(l.entities.get(&EntityId(1)), r.entities.get(&EntityId(1)));
        assert_eq!(l.relations, r.relations);
    }
}
