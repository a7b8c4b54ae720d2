//! The layered encoder.
//!
//! Layer 0 combines projected entity features with the uniform attribute
//! tables; relation representations live per triple. Each later layer
//! updates relations from their endpoints' attributes, averages surviving
//! neighbors (after Bernoulli dropout) into the entity update, and refreshes
//! the attribute representations from the previous entity state.
//!
//! Weight matrices keep their mathematical shapes (`W · x` for column
//! vectors); on the tape inputs are row-stacked, so those products become
//! `X · Wᵀ`.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::kg::{EntityId, Modality, MultiModalKG, RelationTypeId};
use crate::tape::{Mat, Sparse, Tape, Var};
use crate::uniform::{
    GenerateParams, MergeParams, ModalityLayout, OperatorVars, ProjectionParams, UniformMode,
    UniformizationPlan, DEFAULT_LEAKY_SLOPE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub entity_in: usize,
    pub text_in: usize,
    pub image_in: usize,
    pub d: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// d × d
    pub w_ee: Mat,
    /// d × 2d
    pub w_et: Mat,
    pub w_ei: Mat,
    /// d × 3d
    pub w_he: Mat,
    /// d × 2d
    pub w_ht: Mat,
    pub w_hi: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub proj: ProjectionParams,
    pub merge_text: MergeParams,
    pub merge_image: MergeParams,
    pub gen_text: GenerateParams,
    pub gen_image: GenerateParams,
    /// d_E × d, applied to relation-type embeddings.
    pub w0: Mat,
    pub w0_text: Mat,
    pub w0_image: Mat,
    pub wc_entity: Mat,
    pub wc_text: Mat,
    pub wc_image: Mat,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.d;
        let sq = || Mat::zeros((d, d));
        let merge = || MergeParams {
            weight: sq(),
            attention: Mat::zeros((1, 2 * d)),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        ModelParams {
            proj: ProjectionParams {
                entity: Mat::zeros((dims.entity_in, d)),
                text: Mat::zeros((dims.text_in, d)),
                image: Mat::zeros((dims.image_in, d)),
            },
            merge_text: merge(),
            merge_image: merge(),
            gen_text: GenerateParams { weight: sq() },
            gen_image: GenerateParams { weight: sq() },
            w0: Mat::zeros((dims.entity_in, d)),
            w0_text: sq(),
            w0_image: sq(),
            wc_entity: sq(),
            wc_text: sq(),
            wc_image: sq(),
            layers: (0..dims.layers)
                .map(|_| LayerParams {
                    w_ee: sq(),
                    w_et: Mat::zeros((d, 2 * d)),
                    w_ei: Mat::zeros((d, 2 * d)),
                    w_he: Mat::zeros((d, 3 * d)),
                    w_ht: Mat::zeros((d, 2 * d)),
                    w_hi: Mat::zeros((d, 2 * d)),
                })
                .collect(),
        }
    }

    /// Uniform in ±√(6/(rows+cols)) per tensor, one stream per tensor.
    pub fn xavier(dims: ModelDims, rng_seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        for (i, (_, m)) in p.tensors_mut().into_iter().enumerate() {
            let (r, c) = m.dim();
            if r + c == 0 {
                continue;
            }
            let bound = (6.0 / (r + c) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = crate::rng::stream(rng_seed, "init", &[i as u64]);
            m.mapv_inplace(|_| dist.sample(&mut rng));
        }
        p
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            entity_in: self.proj.entity.nrows(),
            text_in: self.proj.text.nrows(),
            image_in: self.proj.image.nrows(),
            d: self.proj.entity.ncols(),
            layers: self.layers.len(),
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("proj.entity".into(), &self.proj.entity),
            ("proj.text".into(), &self.proj.text),
            ("proj.image".into(), &self.proj.image),
            ("merge.text.weight".into(), &self.merge_text.weight),
            ("merge.text.attention".into(), &self.merge_text.attention),
            ("merge.image.weight".into(), &self.merge_image.weight),
            ("merge.image.attention".into(), &self.merge_image.attention),
            ("generate.text".into(), &self.gen_text.weight),
            ("generate.image".into(), &self.gen_image.weight),
            ("w0".into(), &self.w0),
            ("w0.text".into(), &self.w0_text),
            ("w0.image".into(), &self.w0_image),
            ("wc.entity".into(), &self.wc_entity),
            ("wc.text".into(), &self.wc_text),
            ("wc.image".into(), &self.wc_image),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            let l = l + 1;
            out.push((format!("layer{l}.w_ee"), &p.w_ee));
            out.push((format!("layer{l}.w_et"), &p.w_et));
            out.push((format!("layer{l}.w_ei"), &p.w_ei));
            out.push((format!("layer{l}.w_he"), &p.w_he));
            out.push((format!("layer{l}.w_ht"), &p.w_ht));
            out.push((format!("layer{l}.w_hi"), &p.w_hi));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("proj.entity".into(), &mut self.proj.entity),
            ("proj.text".into(), &mut self.proj.text),
            ("proj.image".into(), &mut self.proj.image),
            ("merge.text.weight".into(), &mut self.merge_text.weight),
            (
                "merge.text.attention".into(),
                &mut self.merge_text.attention,
            ),
            ("merge.image.weight".into(), &mut self.merge_image.weight),
            (
                "merge.image.attention".into(),
                &mut self.merge_image.attention,
            ),
            ("generate.text".into(), &mut self.gen_text.weight),
            ("generate.image".into(), &mut self.gen_image.weight),
            ("w0".into(), &mut self.w0),
            ("w0.text".into(), &mut self.w0_text),
            ("w0.image".into(), &mut self.w0_image),
            ("wc.entity".into(), &mut self.wc_entity),
            ("wc.text".into(), &mut self.wc_text),
            ("wc.image".into(), &mut self.wc_image),
        ];
        for (l, p) in self.layers.iter_mut().enumerate() {
            let l = l + 1;
            out.push((format!("layer{l}.w_ee"), &mut p.w_ee));
            out.push((format!("layer{l}.w_et"), &mut p.w_et));
            out.push((format!("layer{l}.w_ei"), &mut p.w_ei));
            out.push((format!("layer{l}.w_he"), &mut p.w_he));
            out.push((format!("layer{l}.w_ht"), &mut p.w_ht));
            out.push((format!("layer{l}.w_hi"), &mut p.w_hi));
        }
        out
    }

    /// Rebuild from named tensors; every name must be present with the
    /// shape `dims` implies.
    pub fn from_tensors(dims: ModelDims, mut tensors: BTreeMap<String, Mat>) -> Result<Self> {
        let mut p = Self::zeros(dims);
        for (name, slot) in p.tensors_mut() {
            let m = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if m.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.dim(),
                    slot.dim()
                )));
            }
            *slot = m;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unknown tensor {extra}")));
        }
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let expected = Self::zeros(self.dims());
        for ((name, m), (_, e)) in self.tensors().into_iter().zip(expected.tensors()) {
            if m.dim() != e.dim() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.dim(),
                    e.dim()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "tensor {name} has non-finite entries"
                )));
            }
        }
        Ok(())
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Drop,
    Replace,
    None,
}

impl std::str::FromStr for DropoutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(DropoutMode::Drop),
            "replace" => Ok(DropoutMode::Replace),
            "none" => Ok(DropoutMode::None),
            other => Err(Error::Config(format!(
                "unknown dropout mode {other:?} (drop, replace, none)"
            ))),
        }
    }
}

impl std::fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutMode::Drop => "drop",
            DropoutMode::Replace => "replace",
            DropoutMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rho: f64,
    pub mode: DropoutMode,
    pub rng_seed: u64,
}

impl DropoutConfig {
    pub fn none() -> Self {
        DropoutConfig {
            rho: 0.0,
            mode: DropoutMode::None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1]",
                self.rho
            )));
        }
        Ok(())
    }
}

/// For each input neighbor (by position): the entity that takes its place,
/// or nothing if dropped.
fn draw_neighbors(
    neighbors: &[EntityId],
    cfg: &DropoutConfig,
    n_entities: usize,
    key: &[u64],
) -> Vec<Option<EntityId>> {
    if cfg.mode == DropoutMode::None || cfg.rho == 0.0 {
        return neighbors.iter().copied().map(Some).collect();
    }
    let mut rng = crate::rng::stream(cfg.rng_seed, "dropout", key);
    neighbors
        .iter()
        .map(|&u| {
            let keep = rng.random::<f64>() >= cfg.rho;
            match (keep, cfg.mode) {
                (true, _) => Some(u),
                (false, DropoutMode::Replace) if n_entities > 0 => {
                    Some(EntityId::from(rng.random_range(0..n_entities)))
                }
                _ => None,
            }
        })
        .collect()
}

/// Bernoulli neighbor dropout, deterministic per `(cfg.rng_seed, key)`.
///
/// The encoder keys each draw by `[epoch, layer, graph, entity]`.
pub fn dropout_neighbors(
    neighbors: &[EntityId],
    cfg: &DropoutConfig,
    n_entities: usize,
    key: &[u64],
) -> Vec<EntityId> {
    draw_neighbors(neighbors, cfg, n_entities, key)
        .into_iter()
        .flatten()
        .collect()
}

/// How the final alignment representation is read off the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    LastLayer,
    ConcatLayers,
}

impl std::str::FromStr for RepresentationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer" => Ok(RepresentationMode::LastLayer),
            "concat_layers" => Ok(RepresentationMode::ConcatLayers),
            other => Err(Error::Config(format!(
                "unknown representation mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for RepresentationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RepresentationMode::LastLayer => "last_layer",
            RepresentationMode::ConcatLayers => "concat_layers",
        })
    }
}

/// Structural switches of the encoder (ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderOptions {
    pub uniform: UniformMode,
    pub use_text: bool,
    pub use_image: bool,
    pub representation: RepresentationMode,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        EncoderOptions {
            uniform: UniformMode::default(),
            use_text: true,
            use_image: true,
            representation: RepresentationMode::LastLayer,
        }
    }
}

impl EncoderOptions {
    pub fn uses(&self, modality: Modality) -> bool {
        match modality {
            Modality::Text => self.use_text,
            Modality::Image => self.use_image,
        }
    }
}

/// Frozen per-graph tensors and sparse structure, built once per run.
pub struct GraphInputs {
    n_entities: usize,
    entity_features: Mat,
    /// Relation-type embedding of each triple.
    triple_types: Mat,
    heads: Rc<Sparse>,
    tails: Rc<Sparse>,
    attr_features: [Mat; 2],
    layouts: [ModalityLayout; 2],
    /// Per entity: distinct neighbors and the triples joining them.
    adjacency: Vec<Vec<(EntityId, Vec<usize>)>>,
    neighbors: Vec<Vec<EntityId>>,
}

impl GraphInputs {
    pub fn new(
        kg: &MultiModalKG,
        plan: &UniformizationPlan,
        entity_table: &FeatureTable<EntityId>,
        relation_table: &FeatureTable<RelationTypeId>,
        dims: ModelDims,
    ) -> Result<Self> {
        if entity_table.dim != dims.entity_in || relation_table.dim != dims.entity_in {
            return Err(Error::DimMismatch {
                context: "entity/relation initial tables",
                expected: dims.entity_in,
                found: if entity_table.dim != dims.entity_in {
                    entity_table.dim
                } else {
                    relation_table.dim
                },
            });
        }
        let ids: Vec<EntityId> = kg.entity_ids().collect();
        let n = ids.len();
        let entity_features = entity_table.matrix_for(&ids)?;
        let types: Vec<RelationTypeId> = kg.triples.iter().map(|t| t.rel).collect();
        let triple_types = relation_table.matrix_for(&types)?;
        let heads = Rc::new(Sparse::gather(
            &kg.triples
                .iter()
                .map(|t| t.head.index())
                .collect::<Vec<_>>(),
            n,
        ));
        let tails = Rc::new(Sparse::gather(
            &kg.triples
                .iter()
                .map(|t| t.tail.index())
                .collect::<Vec<_>>(),
            n,
        ));

        let text = ModalityLayout::new(kg, plan, Modality::Text)?;
        let image = ModalityLayout::new(kg, plan, Modality::Image)?;
        let attr_features = [
            text.feature_matrix(kg, Modality::Text, dims.text_in)?,
            image.feature_matrix(kg, Modality::Image, dims.image_in)?,
        ];

        let mut adj: Vec<BTreeMap<EntityId, Vec<usize>>> = vec![BTreeMap::new(); n];
        for (i, t) in kg.triples.iter().enumerate() {
            if t.head == t.tail {
                continue;
            }
            adj[t.head.index()].entry(t.tail).or_default().push(i);
            adj[t.tail.index()].entry(t.head).or_default().push(i);
        }
        let adjacency: Vec<Vec<(EntityId, Vec<usize>)>> =
            adj.into_iter().map(|m| m.into_iter().collect()).collect();
        let neighbors = adjacency
            .iter()
            .map(|a| a.iter().map(|(u, _)| *u).collect())
            .collect();
        Ok(GraphInputs {
            n_entities: n,
            entity_features,
            triple_types,
            heads,
            tails,
            attr_features,
            layouts: [text, image],
            adjacency,
            neighbors,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_triples(&self) -> usize {
        self.triple_types.nrows()
    }

    /// Distinct first-order neighbors (no dropout), sorted.
    pub fn neighbors(&self) -> &[Vec<EntityId>] {
        &self.neighbors
    }

    /// Neighbor-averaging operators for one layer: `(A_ent, A_rel)` with
    /// `A_ent · E` the mean surviving neighbor rep and `A_rel · R` the mean
    /// relation rep over the same survivors (parallel triples averaged).
    fn aggregation(
        &self,
        dropout: &DropoutConfig,
        epoch: u64,
        layer: u64,
        graph: u64,
    ) -> (Rc<Sparse>, Rc<Sparse>) {
        let n = self.n_entities;
        let mut a_ent = Sparse::new(n, n);
        let mut a_rel = Sparse::new(n, self.n_triples());
        for (v, adj) in self.adjacency.iter().enumerate() {
            let nbrs: Vec<EntityId> = adj.iter().map(|(u, _)| *u).collect();
            let drawn = draw_neighbors(&nbrs, dropout, n, &[epoch, layer, graph, v as u64]);
            let survivors = drawn.iter().flatten().count();
            if survivors == 0 {
                continue;
            }
            let w = 1.0 / survivors as f64;
            for ((_, triples), chosen) in adj.iter().zip(&drawn) {
                if let Some(u) = chosen {
                    a_ent.push(v, u.index(), w);
                    let wt = w / triples.len() as f64;
                    for &t in triples {
                        a_rel.push(v, t, wt);
                    }
                }
            }
        }
        (Rc::new(a_ent), Rc::new(a_rel))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w_ee: Var,
    pub w_et: Var,
    pub w_ei: Var,
    pub w_he: Var,
    pub w_ht: Var,
    pub w_hi: Var,
}

/// Model parameters placed on a tape as leaves.
pub struct BoundModel {
    /// Same order as [`ModelParams::tensors`].
    pub vars: Vec<Var>,
    pub proj_entity: Var,
    pub proj: [Var; 2],
    pub ops: [OperatorVars; 2],
    pub w0: Var,
    pub w0_attr: [Var; 2],
    pub wc_entity: Var,
    pub wc_attr: [Var; 2],
    pub layers: Vec<BoundLayer>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let tensors = params.tensors();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|(_, m)| tape.leaf((*m).clone()))
            .collect();
        let by: HashMap<&str, Var> = tensors
            .iter()
            .zip(&vars)
            .map(|((n, _), v)| (n.as_str(), *v))
            .collect();
        let ops = |m: &str, mp: &MergeParams| OperatorVars {
            merge_weight: by[format!("merge.{m}.weight").as_str()],
            attention: by[format!("merge.{m}.attention").as_str()],
            leaky_slope: mp.leaky_slope,
            generate_weight: by[format!("generate.{m}").as_str()],
        };
        let layers = (1..=params.layers.len())
            .map(|l| BoundLayer {
                w_ee: by[format!("layer{l}.w_ee").as_str()],
                w_et: by[format!("layer{l}.w_et").as_str()],
                w_ei: by[format!("layer{l}.w_ei").as_str()],
                w_he: by[format!("layer{l}.w_he").as_str()],
                w_ht: by[format!("layer{l}.w_ht").as_str()],
                w_hi: by[format!("layer{l}.w_hi").as_str()],
            })
            .collect();
        BoundModel {
            proj_entity: by["proj.entity"],
            proj: [by["proj.text"], by["proj.image"]],
            ops: [
                ops("text", &params.merge_text),
                ops("image", &params.merge_image),
            ],
            w0: by["w0"],
            w0_attr: [by["w0.text"], by["w0.image"]],
            wc_entity: by["wc.entity"],
            wc_attr: [by["wc.text"], by["wc.image"]],
            layers,
            vars,
        }
    }
}

/// `types · W_0 + Σ_A |Δ_A| · W_0A`
fn relation_init_rows(tape: &mut Tape, types: Var, w0: Var, attr_terms: &[(Var, Var)]) -> Var {
    let mut terms = vec![tape.matmul(types, w0)];
    for &(abs_diff, w) in attr_terms {
        terms.push(tape.matmul(abs_diff, w));
    }
    tape.add_all(&terms)
}

/// `ReLU(E · W_cE + Σ_A U_A · W_cA)`
fn entity_init_rows(
    tape: &mut Tape,
    entity: Var,
    wc_entity: Var,
    attr_terms: &[(Var, Var)],
) -> Var {
    let mut terms = vec![tape.matmul(entity, wc_entity)];
    for &(u, w) in attr_terms {
        terms.push(tape.matmul(u, w));
    }
    let s = tape.add_all(&terms);
    tape.relu(s)
}

/// `ReLU(W_EE r + Σ_A W_EA [e_u,A ‖ e_v,A])` with `attr_pairs` already concatenated.
fn relation_step_rows(tape: &mut Tape, r_prev: Var, w_ee: Var, attr_pairs: &[(Var, Var)]) -> Var {
    let mut terms = vec![tape.matmul_bt(r_prev, w_ee)];
    for &(pair, w) in attr_pairs {
        terms.push(tape.matmul_bt(pair, w));
    }
    let s = tape.add_all(&terms);
    tape.relu(s)
}

/// `W [a ‖ b]`, no activation.
fn joint_step_rows(tape: &mut Tape, parts: &[Var], w: Var) -> Var {
    let x = tape.concat(parts);
    tape.matmul_bt(x, w)
}

#[derive(Debug, Clone)]
pub struct EncodedLayer {
    pub entity: Var,
    pub attrs: [Var; 2],
    pub relations: Var,
}

pub struct Encoded {
    /// Final alignment representation per entity.
    pub entity: Var,
    pub layers: Vec<EncodedLayer>,
}

impl Encoded {
    pub fn last(&self) -> &EncodedLayer {
        self.layers.last().expect("layer 0 always present")
    }
}

/// Build the whole encoder for one graph on `tape`.
///
/// `graph` distinguishes the two graphs' dropout streams.
pub fn encode(
    tape: &mut Tape,
    inputs: &GraphInputs,
    model: &BoundModel,
    options: &EncoderOptions,
    dropout: &DropoutConfig,
    epoch: u64,
    graph: u64,
) -> Encoded {
    let n = inputs.n_entities;
    let fe = tape.leaf(inputs.entity_features.clone());
    let entity_proj = tape.matmul(fe, model.proj_entity);
    let d = tape.shape(entity_proj).1;

    let mut attrs0 = [None, None];
    for m in Modality::ALL {
        let i = m as usize;
        if !options.uses(m) {
            continue;
        }
        let f = tape.leaf(inputs.attr_features[i].clone());
        let attr_proj = tape.matmul(f, model.proj[i]);
        attrs0[i] = Some(inputs.layouts[i].uniform(
            tape,
            entity_proj,
            attr_proj,
            &model.ops[i],
            options.uniform,
        ));
    }

    let enabled = |a: &[Option<Var>; 2], w: [Var; 2]| -> Vec<(Var, Var)> {
        a.iter()
            .zip(w)
            .filter_map(|(v, w)| v.map(|v| (v, w)))
            .collect()
    };
    let entity0 = entity_init_rows(
        tape,
        entity_proj,
        model.wc_entity,
        &enabled(&attrs0, model.wc_attr),
    );
    let types = tape.leaf(inputs.triple_types.clone());
    let mut abs_diffs = [None, None];
    for i in 0..2 {
        if let Some(u) = attrs0[i] {
            let h = tape.spmm(inputs.heads.clone(), u);
            let t = tape.spmm(inputs.tails.clone(), u);
            let diff = tape.sub(t, h);
            abs_diffs[i] = Some(tape.abs(diff));
        }
    }
    let relations0 = relation_init_rows(tape, types, model.w0, &enabled(&abs_diffs, model.w0_attr));

    let zeros = tape.leaf(Mat::zeros((n, d)));
    let mut layers = vec![EncodedLayer {
        entity: entity0,
        attrs: [attrs0[0].unwrap_or(zeros), attrs0[1].unwrap_or(zeros)],
        relations: relations0,
    }];

    for (l, lp) in model.layers.iter().enumerate() {
        let prev = layers.last().expect("nonempty").clone();
        let mut pairs = Vec::new();
        for (i, w) in [lp.w_et, lp.w_ei].into_iter().enumerate() {
            if attrs0[i].is_some() {
                let h = tape.spmm(inputs.heads.clone(), prev.attrs[i]);
                let t = tape.spmm(inputs.tails.clone(), prev.attrs[i]);
                pairs.push((tape.concat(&[h, t]), w));
            }
        }
        let relations = relation_step_rows(tape, prev.relations, lp.w_ee, &pairs);

        let (a_ent, a_rel) = inputs.aggregation(dropout, epoch, l as u64 + 1, graph);
        let nbr_ent = tape.spmm(a_ent, prev.entity);
        let nbr_rel = tape.spmm(a_rel, relations);
        let entity = joint_step_rows(tape, &[prev.entity, nbr_ent, nbr_rel], lp.w_he);

        let mut attrs = prev.attrs;
        for (i, w) in [lp.w_ht, lp.w_hi].into_iter().enumerate() {
            if attrs0[i].is_some() {
                attrs[i] = joint_step_rows(tape, &[prev.attrs[i], prev.entity], w);
            }
        }
        layers.push(EncodedLayer {
            entity,
            attrs,
            relations,
        });
    }

    let entity = match options.representation {
        RepresentationMode::LastLayer => layers.last().expect("nonempty").entity,
        RepresentationMode::ConcatLayers => {
            let all: Vec<Var> = layers.iter().map(|l| l.entity).collect();
            tape.concat(&all)
        }
    };
    Encoded { entity, layers }
}

/// Encoder state after one layer, as plain tables.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub layer: usize,
    pub entity_reps: FeatureTable<EntityId>,
    pub text_reps: FeatureTable<EntityId>,
    pub image_reps: FeatureTable<EntityId>,
    /// Indexed by triple.
    pub edge_relation_reps: Vec<Vec<f64>>,
}

fn table_of(m: &Mat) -> FeatureTable<EntityId> {
    FeatureTable {
        dim: m.ncols(),
        vectors: m
            .outer_iter()
            .enumerate()
            .map(|(i, r)| (EntityId::from(i), r.to_vec()))
            .collect(),
    }
}

/// States for layers `0..=L`.
#[allow(clippy::too_many_arguments)]
pub fn forward_layers(
    kg: &MultiModalKG,
    plan: &UniformizationPlan,
    params: &ModelParams,
    entity_table: &FeatureTable<EntityId>,
    relation_table: &FeatureTable<RelationTypeId>,
    options: &EncoderOptions,
    dropout: &DropoutConfig,
    epoch: u64,
) -> Result<Vec<GraphState>> {
    params.check()?;
    dropout.validate()?;
    let inputs = GraphInputs::new(kg, plan, entity_table, relation_table, params.dims())?;
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let enc = encode(&mut tape, &inputs, &model, options, dropout, epoch, 0);
    Ok(enc
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| GraphState {
            layer,
            entity_reps: table_of(tape.value(l.entity)),
            text_reps: table_of(tape.value(l.attrs[0])),
            image_reps: table_of(tape.value(l.attrs[1])),
            edge_relation_reps: tape
                .value(l.relations)
                .outer_iter()
                .map(|r| r.to_vec())
                .collect(),
        })
        .collect())
}

/// Layer-L state.
pub fn forward(
    kg: &MultiModalKG,
    plan: &UniformizationPlan,
    params: &ModelParams,
    entity_table: &FeatureTable<EntityId>,
    relation_table: &FeatureTable<RelationTypeId>,
    dropout: &DropoutConfig,
) -> Result<GraphState> {
    let mut states = forward_layers(
        kg,
        plan,
        params,
        entity_table,
        relation_table,
        &EncoderOptions::default(),
        dropout,
        0,
    )?;
    Ok(states.pop().expect("layer 0 always present"))
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimMismatch {
            context,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

fn check_shape(context: &'static str, m: &Mat, shape: (usize, usize)) -> Result<()> {
    if m.dim() != shape {
        return Err(Error::DimMismatch {
            context,
            expected: shape.0 * shape.1,
            found: m.len(),
        });
    }
    Ok(())
}

/// Per-triple layer-0 relation representations.
pub fn init_relation_reps(
    kg: &MultiModalKG,
    e_t0: &FeatureTable<EntityId>,
    e_i0: &FeatureTable<EntityId>,
    relation_table: &FeatureTable<RelationTypeId>,
    params: &ModelParams,
) -> Result<Vec<Vec<f64>>> {
    let d = params.dims().d;
    check_shape("w0", &params.w0, (relation_table.dim, d))?;
    let mut out = Vec::with_capacity(kg.triples.len());
    for t in &kg.triples {
        let ty = relation_table.get(&t.rel).ok_or_else(|| Error::Lookup {
            kind: "relation type embedding",
            id: t.rel.to_string(),
        })?;
        let mut tape = Tape::new();
        let types = tape.leaf(row(ty));
        let w0 = tape.leaf(params.w0.clone());
        let mut terms = Vec::new();
        for (table, w) in [(e_t0, &params.w0_text), (e_i0, &params.w0_image)] {
            let lookup = |e: EntityId| {
                table.get(&e).ok_or_else(|| Error::Lookup {
                    kind: "uniform attribute",
                    id: e.to_string(),
                })
            };
            let (h, tl) = (lookup(t.head)?, lookup(t.tail)?);
            check_len("uniform attribute", d, h)?;
            let diff: Vec<f64> = tl.iter().zip(h).map(|(a, b)| (a - b).abs()).collect();
            terms.push((tape.leaf(row(&diff)), tape.leaf(w.clone())));
        }
        let r = relation_init_rows(&mut tape, types, w0, &terms);
        out.push(tape.value(r).row(0).to_vec());
    }
    Ok(out)
}

/// Layer-0 entity representations from the projected entity table.
pub fn init_entity_reps(
    e_e: &FeatureTable<EntityId>,
    e_t0: &FeatureTable<EntityId>,
    e_i0: &FeatureTable<EntityId>,
    params: &ModelParams,
) -> Result<FeatureTable<EntityId>> {
    let ids: Vec<EntityId> = e_e.vectors.keys().copied().collect();
    let d = params.dims().d;
    for t in [e_e, e_t0, e_i0] {
        if t.dim != d {
            return Err(Error::DimMismatch {
                context: "init_entity_reps input",
                expected: d,
                found: t.dim,
            });
        }
    }
    if e_t0.vectors.keys().ne(ids.iter()) || e_i0.vectors.keys().ne(ids.iter()) {
        return Err(Error::Config(
            "entity and attribute tables are keyed by different entities".into(),
        ));
    }
    let mut tape = Tape::new();
    let e = tape.leaf(e_e.matrix_for(&ids)?);
    let wce = tape.leaf(params.wc_entity.clone());
    let terms = [
        (
            tape.leaf(e_t0.matrix_for(&ids)?),
            tape.leaf(params.wc_text.clone()),
        ),
        (
            tape.leaf(e_i0.matrix_for(&ids)?),
            tape.leaf(params.wc_image.clone()),
        ),
    ];
    let out = entity_init_rows(&mut tape, e, wce, &terms);
    let m = tape.value(out);
    Ok(FeatureTable {
        dim: d,
        vectors: ids
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, m.row(i).to_vec()))
            .collect(),
    })
}

pub fn relation_update(
    r_prev: &[f64],
    text_uv: (&[f64], &[f64]),
    image_uv: (&[f64], &[f64]),
    layer: &LayerParams,
) -> Result<Vec<f64>> {
    let d = r_prev.len();
    check_shape("w_ee", &layer.w_ee, (d, d))?;
    check_shape("w_et", &layer.w_et, (d, 2 * d))?;
    check_shape("w_ei", &layer.w_ei, (d, 2 * d))?;
    let mut tape = Tape::new();
    let r = tape.leaf(row(r_prev));
    let w_ee = tape.leaf(layer.w_ee.clone());
    let mut pairs = Vec::new();
    for ((u, v), w) in [(text_uv, &layer.w_et), (image_uv, &layer.w_ei)] {
        check_len("relation_update endpoint", d, u)?;
        check_len("relation_update endpoint", d, v)?;
        let joined: Vec<f64> = u.iter().chain(v).copied().collect();
        pairs.push((tape.leaf(row(&joined)), tape.leaf(w.clone())));
    }
    let out = relation_step_rows(&mut tape, r, w_ee, &pairs);
    Ok(tape.value(out).row(0).to_vec())
}

/// `W_hE [e_v ‖ mean_u (e_u ‖ r_uv)]` over the surviving `(e_u, r_uv)` pairs.
pub fn entity_update(e_v: &[f64], neighbors: &[(&[f64], &[f64])], w_he: &Mat) -> Result<Vec<f64>> {
    let d = e_v.len();
    check_shape("w_he", w_he, (d, 3 * d))?;
    let mut tape = Tape::new();
    let ev = tape.leaf(row(e_v));
    let mut stacked = Mat::zeros((neighbors.len(), 2 * d));
    for (i, (eu, r)) in neighbors.iter().enumerate() {
        check_len("entity_update neighbor", d, eu)?;
        check_len("entity_update relation", d, r)?;
        for c in 0..d {
            stacked[[i, c]] = eu[c];
            stacked[[i, d + c]] = r[c];
        }
    }
    let nb = tape.leaf(stacked);
    let mean = tape.spmm(
        Rc::new(Sparse::mean_rows(
            &[(0..neighbors.len()).collect()],
            neighbors.len(),
        )),
        nb,
    );
    let w = tape.leaf(w_he.clone());
    let out = joint_step_rows(&mut tape, &[ev, mean], w);
    Ok(tape.value(out).row(0).to_vec())
}

/// `W_hA [e_A ‖ e_E]`
pub fn attribute_update(a_prev: &[f64], e_prev: &[f64], w_ha: &Mat) -> Result<Vec<f64>> {
    let d = a_prev.len();
    check_len("attribute_update entity", d, e_prev)?;
    check_shape("w_ha", w_ha, (d, 2 * d))?;
    let mut tape = Tape::new();
    let a = tape.leaf(row(a_prev));
    let e = tape.leaf(row(e_prev));
    let w = tape.leaf(w_ha.clone());
    let out = joint_step_rows(&mut tape, &[a, e], w);
    Ok(tape.value(out).row(0).to_vec())
}
