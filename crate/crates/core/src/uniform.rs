//! Attribute uniformization: one vector per entity per modality.
//!
//! Entities owning attributes in a modality merge them with an
//! entity-conditioned attention; attribute-less entities generate one from
//! the mean of their already-resolved neighbors, breadth-first by hop; the
//! rest fall back to the global mean of all resolved vectors.
//!
//! The plan depends only on graph structure and is built once per graph.
//! [`ModalityLayout`] turns it into constant sparse operators so the
//! uniformized table can be rebuilt on a [`Tape`] every step.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::kg::{AttributeId, EntityId, Modality, MultiModalKG};
use crate::tape::{Mat, Sparse, Tape, Var};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Merge { attrs: Vec<AttributeId> },
    Generate { sources: Vec<EntityId>, hop: u32 },
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformizationPlan {
    /// Indexed by entity.
    pub text: Vec<Slot>,
    pub image: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlotCounts {
    pub merge: usize,
    pub generate: usize,
    pub fallback: usize,
    pub max_hop: u32,
}

impl UniformizationPlan {
    pub fn slots(&self, modality: Modality) -> &[Slot] {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn counts(&self, modality: Modality) -> SlotCounts {
        let mut c = SlotCounts::default();
        for s in self.slots(modality) {
            match s {
                Slot::Merge { .. } => c.merge += 1,
                Slot::Generate { hop, .. } => {
                    c.generate += 1;
                    c.max_hop = c.max_hop.max(*hop);
                }
                Slot::Fallback => c.fallback += 1,
            }
        }
        c
    }

    /// Plan invariants against `kg`.
    pub fn check(&self, kg: &MultiModalKG) -> Result<()> {
        for modality in Modality::ALL {
            let slots = self.slots(modality);
            if slots.len() != kg.n_entities() {
                return Err(Error::DimMismatch {
                    context: "plan slots per entity",
                    expected: kg.n_entities(),
                    found: slots.len(),
                });
            }
            let neighbors = kg.neighbors();
            for (i, slot) in slots.iter().enumerate() {
                let e = EntityId::from(i);
                match slot {
                    Slot::Merge { attrs } => {
                        if attrs.is_empty() || attrs.as_slice() != kg.entity_attrs(e, modality) {
                            return Err(Error::Config(format!(
                                "{modality} merge slot of entity {e} does not list its attributes"
                            )));
                        }
                    }
                    Slot::Generate { sources, hop } => {
                        let ok = !sources.is_empty()
                            && sources.iter().all(|s| {
                                neighbors[i].contains(s)
                                    && match &slots[s.index()] {
                                        Slot::Merge { .. } => true,
                                        Slot::Generate { hop: h, .. } => h < hop,
                                        Slot::Fallback => false,
                                    }
                            });
                        if !ok {
                            return Err(Error::Config(format!(
                                "{modality} generate slot of entity {e} has unresolvable sources"
                            )));
                        }
                    }
                    Slot::Fallback => {}
                }
            }
        }
        Ok(())
    }
}

/// Breadth-first plan over first-order neighbors.
pub fn build_plan(kg: &MultiModalKG) -> UniformizationPlan {
    let neighbors = kg.neighbors();
    let plan_for = |modality: Modality| {
        let n = kg.n_entities();
        let mut slots: Vec<Option<Slot>> = vec![None; n];
        let mut level: Vec<Option<u32>> = vec![None; n];
        for e in kg.entity_ids() {
            let attrs = kg.entity_attrs(e, modality);
            if !attrs.is_empty() {
                slots[e.index()] = Some(Slot::Merge {
                    attrs: attrs.to_vec(),
                });
                level[e.index()] = Some(0);
            }
        }
        let mut hop = 0;
        loop {
            hop += 1;
            let mut found = Vec::new();
            for v in 0..n {
                if level[v].is_some() {
                    continue;
                }
                let sources: Vec<EntityId> = neighbors[v]
                    .iter()
                    .copied()
                    .filter(|u| level[u.index()].is_some_and(|l| l < hop))
                    .collect();
                if !sources.is_empty() {
                    found.push((v, sources));
                }
            }
            if found.is_empty() {
                break;
            }
            for (v, sources) in found {
                level[v] = Some(hop);
                slots[v] = Some(Slot::Generate { sources, hop });
            }
        }
        slots
            .into_iter()
            .map(|s| s.unwrap_or(Slot::Fallback))
            .collect()
    };
    UniformizationPlan {
        text: plan_for(Modality::Text),
        image: plan_for(Modality::Image),
    }
}

/// Column dimension `d` shared by every projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// d_E × d
    pub entity: Mat,
    /// d_T × d
    pub text: Mat,
    /// d_I × d
    pub image: Mat,
}

impl ProjectionParams {
    pub fn for_modality(&self, modality: Modality) -> &Mat {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    /// W_M, d × d, applied as `W_M · e`.
    pub weight: Mat,
    /// 1 × 2d; scores `aᵀ [entity ‖ W_M e_i]`.
    pub attention: Mat,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    /// W_G, d × d
    pub weight: Mat,
}

/// Which uniformization operators are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformMode {
    /// Off: attributed entities mean-pool their projected attributes.
    pub merge: bool,
    /// Off: attribute-less entities get a zero vector.
    pub generate: bool,
}

impl Default for UniformMode {
    fn default() -> Self {
        UniformMode {
            merge: true,
            generate: true,
        }
    }
}

/// Tape handles for one modality's merge and generate parameters.
#[derive(Debug, Clone, Copy)]
pub struct OperatorVars {
    pub merge_weight: Var,
    pub attention: Var,
    pub leaky_slope: f64,
    pub generate_weight: Var,
}

/// `E_X = F_X · W_X`
pub fn project_features<K: Ord + Clone>(
    table: &FeatureTable<K>,
    w: &Mat,
) -> Result<FeatureTable<K>> {
    if table.dim != w.nrows() {
        return Err(Error::DimMismatch {
            context: "project_features",
            expected: w.nrows(),
            found: table.dim,
        });
    }
    let mut out = FeatureTable::new(w.ncols());
    for (k, v) in &table.vectors {
        let row = ndarray::ArrayView1::from(v.as_slice()).dot(w);
        out.vectors.insert(k.clone(), row.to_vec());
    }
    Ok(out)
}

/// Merge every group of attribute rows into one vector.
///
/// `owner_rows[i]` is the entity vector owning attribute row `i`;
/// `groups[k]` lists the attribute rows of output row `k`.
/// Returns the merged rows and the attention weights (one per attribute row).
pub fn merge_rows(
    tape: &mut Tape,
    owner_rows: Var,
    attr_rows: Var,
    groups: &Rc<Vec<Vec<usize>>>,
    group_sum: &Rc<Sparse>,
    ops: &OperatorVars,
) -> (Var, Var) {
    let transformed = tape.matmul_bt(attr_rows, ops.merge_weight);
    let joint = tape.concat(&[owner_rows, transformed]);
    let raw = tape.matmul_bt(joint, ops.attention);
    let scores = tape.leaky_relu(ops.leaky_slope, raw);
    let alpha = tape.segment_softmax(groups.clone(), scores);
    let weighted = tape.mul_col(transformed, alpha);
    let summed = tape.spmm(group_sum.clone(), weighted);
    (tape.relu(summed), alpha)
}

/// `ReLU(W_G · mean)` for each row of neighbor means.
pub fn generate_rows(tape: &mut Tape, neighbor_means: Var, ops: &OperatorVars) -> Var {
    let t = tape.matmul_bt(neighbor_means, ops.generate_weight);
    tape.relu(t)
}

fn bind_operators(
    tape: &mut Tape,
    merge: Option<&MergeParams>,
    generate: Option<&GenerateParams>,
    d: usize,
) -> OperatorVars {
    let merge_weight = tape.leaf(merge.map_or_else(|| Mat::zeros((d, d)), |m| m.weight.clone()));
    let attention =
        tape.leaf(merge.map_or_else(|| Mat::zeros((1, 2 * d)), |m| m.attention.clone()));
    let generate_weight =
        tape.leaf(generate.map_or_else(|| Mat::zeros((d, d)), |g| g.weight.clone()));
    OperatorVars {
        merge_weight,
        attention,
        leaky_slope: merge.map_or(DEFAULT_LEAKY_SLOPE, |m| m.leaky_slope),
        generate_weight,
    }
}

fn row_matrix(rows: &[&[f64]], d: usize) -> Mat {
    let mut m = Mat::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    m
}

fn check_merge_dims(d: usize, p: &MergeParams) -> Result<()> {
    if p.weight.dim() != (d, d) || p.attention.dim() != (1, 2 * d) {
        return Err(Error::DimMismatch {
            context: "merge parameters",
            expected: d,
            found: p.weight.nrows(),
        });
    }
    Ok(())
}

/// Merge one entity's attributes; returns the merged vector and α.
pub fn merge_with_weights(
    entity_vec: &[f64],
    attr_vecs: &[Vec<f64>],
    p: &MergeParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if attr_vecs.is_empty() {
        return Err(Error::Empty("merge needs at least one attribute"));
    }
    let d = entity_vec.len();
    check_merge_dims(d, p)?;
    if let Some(bad) = attr_vecs.iter().find(|a| a.len() != d) {
        return Err(Error::DimMismatch {
            context: "merge attribute",
            expected: d,
            found: bad.len(),
        });
    }
    let mut tape = Tape::new();
    let ops = bind_operators(&mut tape, Some(p), None, d);
    let owners = tape.leaf(row_matrix(&vec![entity_vec; attr_vecs.len()], d));
    let attrs = tape.leaf(row_matrix(
        &attr_vecs.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        d,
    ));
    let groups = Rc::new(vec![(0..attr_vecs.len()).collect()]);
    let mut sum = Sparse::new(1, attr_vecs.len());
    for j in 0..attr_vecs.len() {
        sum.push(0, j, 1.0);
    }
    let sum = Rc::new(sum);
    let (out, alpha) = merge_rows(&mut tape, owners, attrs, &groups, &sum, &ops);
    Ok((
        tape.value(out).row(0).to_vec(),
        tape.value(alpha).column(0).to_vec(),
    ))
}

pub fn merge(entity_vec: &[f64], attr_vecs: &[Vec<f64>], p: &MergeParams) -> Result<Vec<f64>> {
    merge_with_weights(entity_vec, attr_vecs, p).map(|(v, _)| v)
}

pub fn generate(neighbor_uniform_vecs: &[Vec<f64>], p: &GenerateParams) -> Result<Vec<f64>> {
    let first = neighbor_uniform_vecs
        .first()
        .ok_or(Error::Empty("generate needs at least one neighbor vector"))?;
    let d = first.len();
    if p.weight.dim() != (d, d) {
        return Err(Error::DimMismatch {
            context: "generate weight",
            expected: d,
            found: p.weight.nrows(),
        });
    }
    if let Some(bad) = neighbor_uniform_vecs.iter().find(|v| v.len() != d) {
        return Err(Error::DimMismatch {
            context: "generate neighbor",
            expected: d,
            found: bad.len(),
        });
    }
    let mut tape = Tape::new();
    let ops = bind_operators(&mut tape, None, Some(p), d);
    let n = neighbor_uniform_vecs.len();
    let rows = tape.leaf(row_matrix(
        &neighbor_uniform_vecs
            .iter()
            .map(Vec::as_slice)
            .collect::<Vec<_>>(),
        d,
    ));
    let mean = tape.spmm(Rc::new(Sparse::mean_rows(&[(0..n).collect()], n)), rows);
    let out = generate_rows(&mut tape, mean, &ops);
    Ok(tape.value(out).row(0).to_vec())
}

struct HopStep {
    mean: Rc<Sparse>,
    scatter: Rc<Sparse>,
}

/// Constant sparse operators realizing a plan for one modality.
pub struct ModalityLayout {
    n_entities: usize,
    /// Attribute ids in row order of the modality's feature matrix.
    attr_ids: Vec<AttributeId>,
    /// Occurrence rows (grouped by merged entity) from the feature matrix.
    occurrence_attrs: Rc<Sparse>,
    occurrence_owners: Rc<Sparse>,
    groups: Rc<Vec<Vec<usize>>>,
    group_sum: Rc<Sparse>,
    group_mean: Rc<Sparse>,
    merge_scatter: Rc<Sparse>,
    hops: Vec<HopStep>,
    fallback: Option<HopStep>,
}

impl ModalityLayout {
    pub fn new(kg: &MultiModalKG, plan: &UniformizationPlan, modality: Modality) -> Result<Self> {
        plan.check(kg)?;
        let n = kg.n_entities();
        let attr_ids: Vec<AttributeId> = kg.features(modality).vectors.keys().copied().collect();
        let row_of: BTreeMap<AttributeId, usize> =
            attr_ids.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let slots = plan.slots(modality);

        let mut occ_rows = Vec::new();
        let mut occ_owner = Vec::new();
        let mut groups = Vec::new();
        let mut merged = Vec::new();
        let mut by_hop: BTreeMap<u32, Vec<(usize, &[EntityId])>> = BTreeMap::new();
        let mut fallback = Vec::new();
        for (e, slot) in slots.iter().enumerate() {
            match slot {
                Slot::Merge { attrs } => {
                    let start = occ_rows.len();
                    for a in attrs {
                        let row = *row_of.get(a).ok_or_else(|| Error::Lookup {
                            kind: "attribute feature",
                            id: a.to_string(),
                        })?;
                        occ_rows.push(row);
                        occ_owner.push(e);
                    }
                    groups.push((start..occ_rows.len()).collect::<Vec<_>>());
                    merged.push(e);
                }
                Slot::Generate { sources, hop } => {
                    by_hop.entry(*hop).or_default().push((e, sources))
                }
                Slot::Fallback => fallback.push(e),
            }
        }

        let scatter = |targets: &[usize]| {
            let mut s = Sparse::new(n, targets.len());
            for (k, &e) in targets.iter().enumerate() {
                s.push(e, k, 1.0);
            }
            Rc::new(s)
        };

        let mut group_sum = Sparse::new(groups.len(), occ_rows.len());
        for (k, g) in groups.iter().enumerate() {
            for &i in g {
                group_sum.push(k, i, 1.0);
            }
        }

        let mut resolved: Vec<usize> = merged.clone();
        let hops = by_hop
            .into_values()
            .map(|entries| {
                let targets: Vec<usize> = entries.iter().map(|(e, _)| *e).collect();
                let srcs: Vec<Vec<usize>> = entries
                    .iter()
                    .map(|(_, s)| s.iter().map(|u| u.index()).collect())
                    .collect();
                resolved.extend(&targets);
                HopStep {
                    mean: Rc::new(Sparse::mean_rows(&srcs, n)),
                    scatter: scatter(&targets),
                }
            })
            .collect();

        let fallback = (!fallback.is_empty()).then(|| {
            resolved.sort_unstable();
            let groups = vec![resolved.clone(); fallback.len()];
            HopStep {
                mean: Rc::new(Sparse::mean_rows(&groups, n)),
                scatter: scatter(&fallback),
            }
        });

        Ok(ModalityLayout {
            n_entities: n,
            occurrence_attrs: Rc::new(Sparse::gather(&occ_rows, attr_ids.len())),
            occurrence_owners: Rc::new(Sparse::gather(&occ_owner, n)),
            group_mean: Rc::new(Sparse::mean_rows(&groups, occ_rows.len())),
            groups: Rc::new(groups),
            group_sum: Rc::new(group_sum),
            merge_scatter: scatter(&merged),
            attr_ids,
            hops,
            fallback,
        })
    }

    pub fn attr_ids(&self) -> &[AttributeId] {
        &self.attr_ids
    }

    /// Raw attribute features as a matrix in layout row order.
    pub fn feature_matrix(&self, kg: &MultiModalKG, modality: Modality, dim: usize) -> Result<Mat> {
        let table = kg.features(modality);
        if !self.attr_ids.is_empty() && table.dim != dim {
            return Err(Error::DimMismatch {
                context: "attribute features",
                expected: dim,
                found: table.dim,
            });
        }
        let mut m = Mat::zeros((self.attr_ids.len(), dim));
        for (i, a) in self.attr_ids.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(
                table.get(a).expect("layout ids come from table"),
            ));
        }
        Ok(m)
    }

    /// The n_E × d uniform table for this modality.
    ///
    /// `entity_proj` is the projected entity table (merge queries) and
    /// `attr_proj` the projected attribute matrix in layout row order.
    /// Slots resolve in order: merges, generates by ascending hop, fallback.
    pub fn uniform(
        &self,
        tape: &mut Tape,
        entity_proj: Var,
        attr_proj: Var,
        ops: &OperatorVars,
        mode: UniformMode,
    ) -> Var {
        let attrs = tape.spmm(self.occurrence_attrs.clone(), attr_proj);
        let merged = if mode.merge {
            let owners = tape.spmm(self.occurrence_owners.clone(), entity_proj);
            merge_rows(tape, owners, attrs, &self.groups, &self.group_sum, ops).0
        } else {
            tape.spmm(self.group_mean.clone(), attrs)
        };
        let mut table = tape.spmm(self.merge_scatter.clone(), merged);
        if !mode.generate {
            return table;
        }
        for step in &self.hops {
            let means = tape.spmm(step.mean.clone(), table);
            let generated = generate_rows(tape, means, ops);
            let placed = tape.spmm(step.scatter.clone(), generated);
            table = tape.add(table, placed);
        }
        if let Some(fb) = &self.fallback {
            let means = tape.spmm(fb.mean.clone(), table);
            let placed = tape.spmm(fb.scatter.clone(), means);
            table = tape.add(table, placed);
        }
        debug_assert_eq!(tape.shape(table).0, self.n_entities);
        table
    }
}

/// Evaluate a plan with fixed parameters: one d-vector per entity per modality.
pub fn apply_plan(
    kg: &MultiModalKG,
    plan: &UniformizationPlan,
    proj: &ProjectionParams,
    merge_params: [&MergeParams; 2],
    generate_params: [&GenerateParams; 2],
    entity_table: &FeatureTable<EntityId>,
) -> Result<(FeatureTable<EntityId>, FeatureTable<EntityId>)> {
    let d = proj.entity.ncols();
    let mut tape = Tape::new();
    let entity_ids: Vec<EntityId> = kg.entity_ids().collect();
    if entity_table.dim != proj.entity.nrows() {
        return Err(Error::DimMismatch {
            context: "entity table",
            expected: proj.entity.nrows(),
            found: entity_table.dim,
        });
    }
    let fe = tape.leaf(entity_table.matrix_for(&entity_ids)?);
    let we = tape.leaf(proj.entity.clone());
    let entity_proj = tape.matmul(fe, we);

    let mut out = Vec::new();
    for (m, modality) in Modality::ALL.into_iter().enumerate() {
        let layout = ModalityLayout::new(kg, plan, modality)?;
        let w = proj.for_modality(modality);
        check_merge_dims(d, merge_params[m])?;
        let feats = tape.leaf(layout.feature_matrix(kg, modality, w.nrows())?);
        let wv = tape.leaf(w.clone());
        let attr_proj = tape.matmul(feats, wv);
        let ops = bind_operators(
            &mut tape,
            Some(merge_params[m]),
            Some(generate_params[m]),
            d,
        );
        let table = layout.uniform(
            &mut tape,
            entity_proj,
            attr_proj,
            &ops,
            UniformMode::default(),
        );
        let values = tape.value(table);
        out.push(FeatureTable {
            dim: d,
            vectors: entity_ids
                .iter()
                .map(|&e| (e, values.row(e.index()).to_vec()))
                .collect(),
        });
    }
    let image = out.pop().expect("two modalities");
    let text = out.pop().expect("two modalities");
    Ok((text, image))
}
