//! Alignment objectives.
//!
//! The entity and attribute terms use cosine distance; the neighbor term is
//! an InfoNCE over cosine similarities with the positive kept in the
//! denominator. Builders take the full representation tables of both graphs
//! and index them by seed, so one backward pass covers a whole batch.

use std::rc::Rc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiModalKG};
use crate::tape::{Mat, Sparse, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 3.0,
            lambda3: 2.0,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    /// KG1 entities standing in for the seed's left entity.
    pub neg_left: Vec<EntityId>,
    /// KG2 entities standing in for the seed's right entity.
    pub neg_right: Vec<EntityId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub entity: f64,
    pub attribute: f64,
    pub neighbor: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

/// `1 − cos(u, v)`; a zero vector on either side counts as orthogonal.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            context: "cosine_distance",
            expected: u.len(),
            found: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn draw_excluding(
    n: usize,
    exclude: usize,
    k: usize,
    rng: &mut crate::rng::StreamRng,
) -> Vec<EntityId> {
    index::sample(rng, n - 1, k)
        .into_iter()
        .map(|j| EntityId::from(if j >= exclude { j + 1 } else { j }))
        .collect()
}

/// `k` negatives per side per seed, without replacement, never the true
/// entity; deterministic per `(rng_seed, epoch)`.
pub fn sample_negatives(
    seeds: &[(EntityId, EntityId)],
    k: usize,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    rng_seed: u64,
    epoch: u64,
) -> Result<Vec<NegativeSample>> {
    let (n1, n2) = (kg1.n_entities(), kg2.n_entities());
    if n1 <= k || n2 <= k {
        return Err(Error::Config(format!(
            "{k} negatives need more than {k} entities per graph (have {n1} and {n2})"
        )));
    }
    Ok(seeds
        .iter()
        .enumerate()
        .map(|(i, &(l, r))| {
            let mut rng = crate::rng::stream(rng_seed, "negatives", &[epoch, i as u64]);
            let neg_left = draw_excluding(n1, l.index(), k, &mut rng);
            let neg_right = draw_excluding(n2, r.index(), k, &mut rng);
            NegativeSample {
                neg_left,
                neg_right,
            }
        })
        .collect())
}

fn gather(tape: &mut Tape, table: Var, rows: &[usize]) -> Var {
    let n = tape.shape(table).0;
    tape.spmm(Rc::new(Sparse::gather(rows, n)), table)
}

/// Row-wise cosine distance as an n × 1 column.
fn distance(tape: &mut Tape, a: Var, b: Var) -> Var {
    let cos = tape.row_cosine(a, b);
    let ones = tape.leaf(Mat::ones(tape.shape(cos)));
    tape.sub(ones, cos)
}

fn group_means(tape: &mut Tape, x: Var, groups: usize, k: usize) -> Var {
    let g: Vec<Vec<usize>> = (0..groups)
        .map(|i| (i * k..(i + 1) * k).collect())
        .collect();
    tape.spmm(Rc::new(Sparse::mean_rows(&g, groups * k)), x)
}

/// Batch-mean entity term. `margin: Some(γ)` switches to the per-side hinge.
pub fn entity_alignment_term(
    tape: &mut Tape,
    left: Var,
    right: Var,
    seeds: &[(EntityId, EntityId)],
    negatives: &[NegativeSample],
    margin: Option<f64>,
) -> Var {
    let b = seeds.len();
    let k = negatives.first().map_or(0, |n| n.neg_right.len());
    let ls: Vec<usize> = seeds.iter().map(|(l, _)| l.index()).collect();
    let rs: Vec<usize> = seeds.iter().map(|(_, r)| r.index()).collect();
    let lp = gather(tape, left, &ls);
    let rp = gather(tape, right, &rs);
    let pos = distance(tape, lp, rp);

    let rep = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .flat_map(|&i| std::iter::repeat_n(i, k))
            .collect()
    };
    let l_rep = gather(tape, left, &rep(&ls));
    let r_neg = gather(
        tape,
        right,
        &negatives
            .iter()
            .flat_map(|n| n.neg_right.iter().map(|e| e.index()))
            .collect::<Vec<_>>(),
    );
    let d_right = distance(tape, l_rep, r_neg);
    let neg_right = group_means(tape, d_right, b, k);
    let l_neg = gather(
        tape,
        left,
        &negatives
            .iter()
            .flat_map(|n| n.neg_left.iter().map(|e| e.index()))
            .collect::<Vec<_>>(),
    );
    let r_rep = gather(tape, right, &rep(&rs));
    let d_left = distance(tape, l_neg, r_rep);
    let neg_left = group_means(tape, d_left, b, k);

    let per_seed = match margin {
        None => {
            let t = tape.sub(pos, neg_right);
            tape.sub(t, neg_left)
        }
        Some(gamma) => {
            let g = tape.leaf(Mat::from_elem((b, 1), gamma));
            let shifted = tape.add(pos, g);
            let a = tape.sub(shifted, neg_right);
            let c = tape.sub(shifted, neg_left);
            let a = tape.relu(a);
            let c = tape.relu(c);
            tape.add(a, c)
        }
    };
    tape.mean(per_seed)
}

/// Batch-mean of the summed per-modality distances; `pairs` holds the
/// (left table, right table) of each modality taking part.
pub fn attribute_term(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    seeds: &[(EntityId, EntityId)],
) -> Var {
    if pairs.is_empty() || seeds.is_empty() {
        return tape.leaf(Mat::zeros((1, 1)));
    }
    let ls: Vec<usize> = seeds.iter().map(|(l, _)| l.index()).collect();
    let rs: Vec<usize> = seeds.iter().map(|(_, r)| r.index()).collect();
    let mut terms = Vec::new();
    for &(lt, rt) in pairs {
        let a = gather(tape, lt, &ls);
        let b = gather(tape, rt, &rs);
        terms.push(distance(tape, a, b));
    }
    let s = tape.add_all(&terms);
    tape.mean(s)
}

/// Batch-mean InfoNCE; `right_neighbors[v]` lists the neighbors of KG2 entity `v`.
/// Seeds whose right entity has no neighbors contribute exactly 0.
pub fn neighbor_contrastive_term(
    tape: &mut Tape,
    left: Var,
    right: Var,
    seeds: &[(EntityId, EntityId)],
    right_neighbors: &[Vec<EntityId>],
    tau: f64,
) -> Var {
    let mut queries = Vec::new();
    let mut candidates = Vec::new();
    let mut groups = Vec::new();
    let mut positives = Vec::new();
    for &(l, r) in seeds {
        let nbrs = &right_neighbors[r.index()];
        if nbrs.is_empty() {
            continue;
        }
        let start = candidates.len();
        positives.push(start);
        candidates.push(r.index());
        candidates.extend(nbrs.iter().map(|u| u.index()));
        queries.extend(std::iter::repeat_n(l.index(), nbrs.len() + 1));
        groups.push((start..candidates.len()).collect::<Vec<_>>());
    }
    if groups.is_empty() {
        return tape.leaf(Mat::zeros((1, 1)));
    }
    let q = gather(tape, left, &queries);
    let c = gather(tape, right, &candidates);
    let cos = tape.row_cosine(q, c);
    let logits = tape.scale(1.0 / tau, cos);
    let ex = tape.exp(logits);
    let mut sums = Sparse::new(groups.len(), candidates.len());
    for (i, g) in groups.iter().enumerate() {
        for &j in g {
            sums.push(i, j, 1.0);
        }
    }
    let z = tape.spmm(Rc::new(sums), ex);
    let lse = tape.ln(z);
    let pos = tape.spmm(
        Rc::new(Sparse::gather(&positives, candidates.len())),
        logits,
    );
    let per = tape.sub(lse, pos);
    let s = tape.sum(per);
    tape.scale(1.0 / seeds.len() as f64, s)
}

pub fn weighted_total(
    tape: &mut Tape,
    entity: Var,
    attribute: Var,
    neighbor: Var,
    w: &LossWeights,
) -> Var {
    let a = tape.scale(w.lambda1, entity);
    let b = tape.scale(w.lambda2, attribute);
    let c = tape.scale(w.lambda3, neighbor);
    tape.add_all(&[a, b, c])
}

fn rows(vs: &[&[f64]]) -> Result<Mat> {
    let d = vs.first().map_or(0, |v| v.len());
    if let Some(bad) = vs.iter().find(|v| v.len() != d) {
        return Err(Error::DimMismatch {
            context: "loss inputs",
            expected: d,
            found: bad.len(),
        });
    }
    Ok(Mat::from_shape_vec(
        (vs.len(), d),
        vs.iter().flat_map(|v| v.iter().copied()).collect(),
    )
    .expect("uniform rows"))
}

/// Single-seed entity term: `e` and `e_prime` are the aligned pair,
/// `neg_left` KG1 negatives and `neg_right` KG2 negatives (same count).
pub fn entity_alignment_loss(
    e: &[f64],
    e_prime: &[f64],
    neg_left: &[&[f64]],
    neg_right: &[&[f64]],
    margin: Option<f64>,
) -> Result<f64> {
    let k = neg_right.len();
    if neg_left.len() != k || k == 0 {
        return Err(Error::Config(
            "entity loss needs the same positive number of negatives per side".into(),
        ));
    }
    let mut left_rows = vec![e];
    left_rows.extend_from_slice(neg_left);
    let mut right_rows = vec![e_prime];
    right_rows.extend_from_slice(neg_right);
    let mut tape = Tape::new();
    let l = tape.leaf(rows(&left_rows)?);
    let r = tape.leaf(rows(&right_rows)?);
    if tape.shape(l).1 != tape.shape(r).1 {
        return Err(Error::DimMismatch {
            context: "entity loss",
            expected: e.len(),
            found: e_prime.len(),
        });
    }
    let neg = NegativeSample {
        neg_left: (1..=k).map(EntityId::from).collect(),
        neg_right: (1..=k).map(EntityId::from).collect(),
    };
    let out = entity_alignment_term(
        &mut tape,
        l,
        r,
        &[(EntityId(0), EntityId(0))],
        &[neg],
        margin,
    );
    Ok(tape.scalar(out))
}

/// Single-seed attribute term over (text, image).
pub fn attribute_similarity_loss(text: (&[f64], &[f64]), image: (&[f64], &[f64])) -> Result<f64> {
    Ok(cosine_distance(text.0, text.1)? + cosine_distance(image.0, image.1)?)
}

pub fn neighbor_contrastive_loss(
    e: &[f64],
    e_prime: &[f64],
    neighbor_reps: &[&[f64]],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if e.len() != e_prime.len() {
        return Err(Error::DimMismatch {
            context: "contrastive loss",
            expected: e.len(),
            found: e_prime.len(),
        });
    }
    let mut right_rows = vec![e_prime];
    right_rows.extend_from_slice(neighbor_reps);
    let mut tape = Tape::new();
    let l = tape.leaf(rows(&[e])?);
    let r = tape.leaf(rows(&right_rows)?);
    let mut nbrs = vec![Vec::new(); right_rows.len()];
    nbrs[0] = (1..right_rows.len()).map(EntityId::from).collect();
    let out = neighbor_contrastive_term(&mut tape, l, r, &[(EntityId(0), EntityId(0))], &nbrs, tau);
    Ok(tape.scalar(out))
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.entity + w.lambda2 * c.attribute + w.lambda3 * c.neighbor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::tests::three_entity_kg;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn rand_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, "test", &[]);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect()
            })
            .collect()
    }

    fn as_refs(t: &[Vec<f64>]) -> Vec<&[f64]> {
        t.iter().map(Vec::as_slice).collect()
    }

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt()
            * v.iter().map(|a| a * a).sum::<f64>().sqrt())
    }

    #[test]
    fn cosine_distance_examples() {
        assert_abs_diff_eq!(
            cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cosine_distance(&[1.0, -3.0], &[-1.0, 3.0]).unwrap(),
            2.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn kg_with(n: usize) -> MultiModalKG {
        let mut kg = three_entity_kg();
        kg.entities = (0..n).map(|i| format!("e{i}")).collect();
        kg
    }

    #[test]
    fn negative_sampling_examples() {
        let (kg1, kg2) = (kg_with(40), kg_with(30));
        let seeds: Vec<_> = (0..5u32).map(|i| (EntityId(i), EntityId(29 - i))).collect();
        let negs = sample_negatives(&seeds, 15, &kg1, &kg2, 3, 0).unwrap();
        for (n, &(l, r)) in negs.iter().zip(&seeds) {
            assert_eq!(n.neg_left.len(), 15);
            assert_eq!(n.neg_right.len(), 15);
            assert!(!n.neg_left.contains(&l) && !n.neg_right.contains(&r));
            assert!(
                n.neg_left.iter().all(|e| e.index() < 40)
                    && n.neg_right.iter().all(|e| e.index() < 30)
            );
            assert_eq!(n.neg_left.iter().collect::<BTreeSet<_>>().len(), 15);
        }
        assert_eq!(
            negs,
            sample_negatives(&seeds, 15, &kg1, &kg2, 3, 0).unwrap()
        );
        assert_ne!(
            negs,
            sample_negatives(&seeds, 15, &kg1, &kg2, 3, 1).unwrap()
        );

        let small = kg_with(16);
        let negs =
            sample_negatives(&[(EntityId(4), EntityId(9))], 15, &small, &small, 0, 0).unwrap();
        let left: BTreeSet<usize> = negs[0].neg_left.iter().map(|e| e.index()).collect();
        assert_eq!(left, (0..16).filter(|&i| i != 4).collect());
        let right: BTreeSet<usize> = negs[0].neg_right.iter().map(|e| e.index()).collect();
        assert_eq!(right, (0..16).filter(|&i| i != 9).collect());
        assert!(sample_negatives(
            &[(EntityId(0), EntityId(0))],
            15,
            &kg_with(15),
            &small,
            0,
            0
        )
        .is_err());
    }

    #[test]
    fn entity_loss_examples() {
        let v = [0.3, -0.7, 1.1];
        assert_abs_diff_eq!(
            entity_alignment_loss(&v, &v, &[&v], &[&v], None).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let (a, b) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(
            entity_alignment_loss(&a, &a, &[&b], &[&b], None).unwrap(),
            -2.0,
            epsilon = 1e-12
        );
        // hinge per side: max(0, 1 + 0 − 1) twice
        assert_abs_diff_eq!(
            entity_alignment_loss(&a, &a, &[&b], &[&b], Some(1.0)).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            entity_alignment_loss(&a, &a, &[&b], &[&b], Some(1.5)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn entity_term_batch_matches_scalar_oracle() {
        let left = rand_rows(6, 3, 1);
        let right = rand_rows(6, 3, 2);
        let seeds = [(EntityId(0), EntityId(1)), (EntityId(2), EntityId(3))];
        let negs = vec![
            NegativeSample {
                neg_left: vec![EntityId(4), EntityId(5)],
                neg_right: vec![EntityId(0), EntityId(2)],
            },
            NegativeSample {
                neg_left: vec![EntityId(1), EntityId(3)],
                neg_right: vec![EntityId(4), EntityId(5)],
            },
        ];
        let mut tape = Tape::new();
        let l = tape.leaf(rows(&as_refs(&left)).unwrap());
        let r = tape.leaf(rows(&as_refs(&right)).unwrap());
        let got = entity_alignment_term(&mut tape, l, r, &seeds, &negs, None);
        let dist = |u: &[f64], v: &[f64]| 1.0 - cos(u, v);
        let mut want = 0.0;
        for (&(li, ri), n) in seeds.iter().zip(&negs) {
            let (e, ep) = (&left[li.index()], &right[ri.index()]);
            let nr: f64 = n
                .neg_right
                .iter()
                .map(|j| dist(e, &right[j.index()]))
                .sum::<f64>()
                / 2.0;
            let nl: f64 = n
                .neg_left
                .iter()
                .map(|j| dist(&left[j.index()], ep))
                .sum::<f64>()
                / 2.0;
            want += dist(e, ep) - nr - nl;
        }
        assert_abs_diff_eq!(tape.scalar(got), want / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn attribute_loss_examples() {
        let (t, i) = ([0.5, 0.2], [1.0, -1.0]);
        assert_abs_diff_eq!(
            attribute_similarity_loss((&t, &t), (&i, &i)).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            attribute_similarity_loss((&t, &t), (&[1.0, 0.0], &[0.0, 2.0])).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let v = rand_rows(4, 3, 9);
        let want = (1.0 - cos(&v[0], &v[1])) + (1.0 - cos(&v[2], &v[3]));
        assert_abs_diff_eq!(
            attribute_similarity_loss((&v[0], &v[1]), (&v[2], &v[3])).unwrap(),
            want,
            epsilon = 1e-12
        );

        let mut tape = Tape::new();
        let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        let a = tape.leaf(rows(&refs[..2]).unwrap());
        let b = tape.leaf(rows(&refs[2..]).unwrap());
        let term = attribute_term(
            &mut tape,
            &[(a, b), (b, a)],
            &[(EntityId(0), EntityId(1)), (EntityId(1), EntityId(0))],
        );
        let want = ((1.0 - cos(&v[0], &v[3]))
            + (1.0 - cos(&v[2], &v[1]))
            + (1.0 - cos(&v[1], &v[2]))
            + (1.0 - cos(&v[3], &v[0])))
            / 2.0;
        assert_abs_diff_eq!(tape.scalar(term), want, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_examples() {
        let e = [0.4, 0.9];
        assert_eq!(neighbor_contrastive_loss(&e, &e, &[], 0.5).unwrap(), 0.0);
        let ep = [1.0, 0.3];
        let got = neighbor_contrastive_loss(&e, &ep, &[&ep], 0.5).unwrap();
        assert_abs_diff_eq!(got, std::f64::consts::LN_2, epsilon = 1e-12);

        let unit = |v: &Vec<f64>| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n).collect::<Vec<_>>()
        };
        let vs: Vec<Vec<f64>> = rand_rows(5, 4, 13).iter().map(unit).collect();
        let nb: Vec<&[f64]> = vs[2..].iter().map(Vec::as_slice).collect();
        let got = neighbor_contrastive_loss(&vs[0], &vs[1], &nb, 0.5).unwrap();
        let pos = (cos(&vs[0], &vs[1]) / 0.5).exp();
        let z: f64 = pos
            + vs[2..]
                .iter()
                .map(|n| (cos(&vs[0], n) / 0.5).exp())
                .sum::<f64>();
        assert_abs_diff_eq!(got, -(pos / z).ln(), epsilon = 1e-12);
        assert!(neighbor_contrastive_loss(&e, &e, &[], 0.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let c = LossComponents {
            entity: 0.0,
            attribute: 0.0,
            neighbor: std::f64::consts::LN_2,
        };
        assert_abs_diff_eq!(
            total_loss(&c, &w),
            2.0 * std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        let c = LossComponents {
            entity: -0.7,
            attribute: 1.3,
            neighbor: 0.4,
        };
        let w = LossWeights {
            lambda1: 0.2,
            lambda2: 1.7,
            lambda3: 3.1,
            tau: 1.0,
        };
        assert_abs_diff_eq!(
            c.total(&w),
            0.2 * -0.7 + 1.7 * 1.3 + 3.1 * 0.4,
            epsilon = 1e-15
        );
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let left = rand_rows(6, 4, 21);
        let right = rand_rows(6, 4, 22);
        let seeds = [
            (EntityId(0), EntityId(1)),
            (EntityId(2), EntityId(3)),
            (EntityId(5), EntityId(0)),
        ];
        let negs = vec![
            NegativeSample {
                neg_left: vec![EntityId(4), EntityId(5)],
                neg_right: vec![EntityId(0), EntityId(2)],
            },
            NegativeSample {
                neg_left: vec![EntityId(1), EntityId(3)],
                neg_right: vec![EntityId(4), EntityId(5)],
            },
            NegativeSample {
                neg_left: vec![EntityId(0), EntityId(1)],
                neg_right: vec![EntityId(3), EntityId(4)],
            },
        ];
        let nbrs: Vec<Vec<EntityId>> = vec![
            vec![EntityId(2)],
            vec![EntityId(3), EntityId(4)],
            vec![],
            vec![EntityId(1)],
            vec![],
            vec![],
        ];
        let base = (
            rows(&as_refs(&left)).unwrap(),
            rows(&as_refs(&right)).unwrap(),
        );
        let eval = |lm: &Mat, rm: &Mat, grads: bool| {
            let mut tape = Tape::new();
            let l = tape.leaf(lm.clone());
            let r = tape.leaf(rm.clone());
            let ea = entity_alignment_term(&mut tape, l, r, &seeds, &negs, None);
            let at = attribute_term(&mut tape, &[(l, r)], &seeds);
            let ct = neighbor_contrastive_term(&mut tape, l, r, &seeds, &nbrs, 0.5);
            let tot = weighted_total(&mut tape, ea, at, ct, &LossWeights::default());
            let g = grads.then(|| {
                let g = tape.backward(tot);
                (g.get_or_zeros(l, lm.dim()), g.get_or_zeros(r, rm.dim()))
            });
            (tape.scalar(tot), g)
        };
        let (_, g) = eval(&base.0, &base.1, true);
        let (gl, gr) = g.unwrap();
        let h = 1e-5;
        for side in 0..2 {
            for idx in 0..24 {
                let (i, j) = (idx / 4, idx % 4);
                let mut plus = base.clone();
                let mut minus = base.clone();
                if side == 0 {
                    plus.0[[i, j]] += h;
                    minus.0[[i, j]] -= h;
                } else {
                    plus.1[[i, j]] += h;
                    minus.1[[i, j]] -= h;
                }
                let num = (eval(&plus.0, &plus.1, false).0 - eval(&minus.0, &minus.1, false).0)
                    / (2.0 * h);
                let ana = if side == 0 { gl[[i, j]] } else { gr[[i, j]] };
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "side {side} [{i},{j}]: {ana} vs {num}");
            }
        }
    }

    proptest! {
        #[test]
        fn distance_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 3), v in prop::collection::vec(-5.0f64..5.0, 3), c in 0.01f64..100.0) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
            let a = cosine_distance(&u, &v).unwrap();
            prop_assert!((a - cosine_distance(&scaled, &v).unwrap()).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
        }

        #[test]
        fn contrastive_nonnegative(seed in 0u64..10_000, n in 0usize..6, tau in 0.05f64..2.0) {
            let vs = rand_rows(n + 2, 3, seed);
            let nb: Vec<&[f64]> = vs[2..].iter().map(Vec::as_slice).collect();
            prop_assert!(neighbor_contrastive_loss(&vs[0], &vs[1], &nb, tau).unwrap() >= 0.0);
        }

        #[test]
        fn entity_loss_bounded(seed in 0u64..10_000, k in 1usize..4) {
            let vs = rand_rows(2 + 2 * k, 3, seed);
            let nl: Vec<&[f64]> = vs[2..2 + k].iter().map(Vec::as_slice).collect();
            let nr: Vec<&[f64]> = vs[2 + k..].iter().map(Vec::as_slice).collect();
            let l = entity_alignment_loss(&vs[0], &vs[1], &nl, &nr, None).unwrap();
            prop_assert!((-4.0 - 1e-12..=2.0 + 1e-12).contains(&l));
        }

        #[test]
        fn total_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, t in -3.0f64..3.0) {
            let w = LossWeights::default();
            let base = LossComponents { entity: a, attribute: b, neighbor: c };
            let moved = LossComponents { attribute: b + t, ..base };
            prop_assert!((moved.total(&w) - base.total(&w) - w.lambda2 * t).abs() < 1e-12);
        }
    }
}
