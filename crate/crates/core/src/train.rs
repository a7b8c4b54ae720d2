//! Training: configuration, the objective, AdamW and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::gnn::{
    encode, BoundModel, DropoutConfig, DropoutMode, EncoderOptions, GraphInputs, ModelDims,
    ModelParams, RepresentationMode,
};
use crate::kg::{AlignmentSeedSet, EntityId, Modality, MultiModalKG, RelationTypeId};
use crate::loss::{
    attribute_term, entity_alignment_term, neighbor_contrastive_term, sample_negatives,
    weighted_total, LossComponents, LossWeights, NegativeSample,
};
use crate::tape::{Mat, Tape};
use crate::transe::{train_transe_joint, TransEConfig};
use crate::uniform::{build_plan, UniformMode};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    TestCounterparts,
    AllEntities,
}

impl std::str::FromStr for CandidateSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_counterparts" => Ok(CandidateSet::TestCounterparts),
            "all_entities" => Ok(CandidateSet::AllEntities),
            other => Err(Error::Config(format!(
                "unknown candidate set {other:?} (test_counterparts, all_entities)"
            ))),
        }
    }
}

impl std::fmt::Display for CandidateSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CandidateSet::TestCounterparts => "test_counterparts",
            CandidateSet::AllEntities => "all_entities",
        })
    }
}

/// Every hyperparameter and switch of a run. Defaults are the published
/// settings; `set` addresses each field by its key=value name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub negatives: usize,
    pub train_fraction: f64,
    pub rng_seed: u64,
    pub no_uniformization: bool,
    pub no_merge: bool,
    pub no_generate: bool,
    pub no_text: bool,
    pub no_image: bool,
    pub dropout_mode: DropoutMode,
    pub no_attr_loss: bool,
    pub no_neighbor_loss: bool,
    pub margin_mode: bool,
    pub margin: f64,
    pub eval_candidate_set: CandidateSet,
    pub representation_mode: RepresentationMode,
    pub bidirectional: bool,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Share of train seeds held out to monitor early stopping (0 = train loss).
    pub validation_fraction: f64,
    pub transe_dim: usize,
    pub transe_epochs: usize,
    pub transe_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 128,
            layers: 2,
            epochs: 200,
            batch_size: 512,
            learning_rate: 0.001,
            weight_decay: 0.01,
            rho: 0.35,
            tau: 0.5,
            lambda1: 5.0,
            lambda2: 3.0,
            lambda3: 2.0,
            negatives: 15,
            train_fraction: 0.2,
            rng_seed: 0,
            no_uniformization: false,
            no_merge: false,
            no_generate: false,
            no_text: false,
            no_image: false,
            dropout_mode: DropoutMode::Drop,
            no_attr_loss: false,
            no_neighbor_loss: false,
            margin_mode: false,
            margin: 1.0,
            eval_candidate_set: CandidateSet::TestCounterparts,
            representation_mode: RepresentationMode::LastLayer,
            bidirectional: false,
            patience: 100,
            validation_fraction: 0.0,
            transe_dim: 128,
            transe_epochs: 200,
            transe_learning_rate: 0.01,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for config key `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 32] = [
        "d",
        "layers",
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "rho",
        "tau",
        "lambda1",
        "lambda2",
        "lambda3",
        "negatives",
        "train_fraction",
        "rng_seed",
        "no_uniformization",
        "no_merge",
        "no_generate",
        "no_text",
        "no_image",
        "dropout_mode",
        "no_attr_loss",
        "no_neighbor_loss",
        "margin_mode",
        "margin",
        "eval_candidate_set",
        "representation_mode",
        "bidirectional",
        "patience",
        "validation_fraction",
        "transe_dim",
        "transe_epochs",
        "transe_learning_rate",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "rho" => self.rho = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "lambda3" => self.lambda3 = parse_value(key, v)?,
            "negatives" => self.negatives = parse_value(key, v)?,
            "train_fraction" => self.train_fraction = parse_value(key, v)?,
            "rng_seed" | "seed" => self.rng_seed = parse_value(key, v)?,
            "no_uniformization" => self.no_uniformization = parse_value(key, v)?,
            "no_merge" => self.no_merge = parse_value(key, v)?,
            "no_generate" => self.no_generate = parse_value(key, v)?,
            "no_text" => self.no_text = parse_value(key, v)?,
            "no_image" => self.no_image = parse_value(key, v)?,
            "dropout_mode" => self.dropout_mode = v.parse()?,
            "no_attr_loss" => self.no_attr_loss = parse_value(key, v)?,
            "no_neighbor_loss" => self.no_neighbor_loss = parse_value(key, v)?,
            "margin_mode" => self.margin_mode = parse_value(key, v)?,
            "margin" => self.margin = parse_value(key, v)?,
            "eval_candidate_set" => self.eval_candidate_set = v.parse()?,
            "representation_mode" => self.representation_mode = v.parse()?,
            "bidirectional" => self.bidirectional = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, v)?,
            "transe_dim" => self.transe_dim = parse_value(key, v)?,
            "transe_epochs" => self.transe_epochs = parse_value(key, v)?,
            "transe_learning_rate" => self.transe_learning_rate = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d" => self.d.to_string(),
            "layers" => self.layers.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "rho" => self.rho.to_string(),
            "tau" => self.tau.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "negatives" => self.negatives.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "rng_seed" => self.rng_seed.to_string(),
            "no_uniformization" => self.no_uniformization.to_string(),
            "no_merge" => self.no_merge.to_string(),
            "no_generate" => self.no_generate.to_string(),
            "no_text" => self.no_text.to_string(),
            "no_image" => self.no_image.to_string(),
            "dropout_mode" => self.dropout_mode.to_string(),
            "no_attr_loss" => self.no_attr_loss.to_string(),
            "no_neighbor_loss" => self.no_neighbor_loss.to_string(),
            "margin_mode" => self.margin_mode.to_string(),
            "margin" => self.margin.to_string(),
            "eval_candidate_set" => self.eval_candidate_set.to_string(),
            "representation_mode" => self.representation_mode.to_string(),
            "bidirectional" => self.bidirectional.to_string(),
            "patience" => self.patience.to_string(),
            "validation_fraction" => self.validation_fraction.to_string(),
            "transe_dim" => self.transe_dim.to_string(),
            "transe_epochs" => self.transe_epochs.to_string(),
            "transe_learning_rate" => self.transe_learning_rate.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, found {line:?}",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("d", self.d),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("negatives", self.negatives),
            ("transe_dim", self.transe_dim),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("margin", self.margin),
            ("transe_learning_rate", self.transe_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            bad.push(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bad.push(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bad.push(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions {
            uniform: UniformMode {
                merge: !(self.no_merge || self.no_uniformization),
                generate: !(self.no_generate || self.no_uniformization),
            },
            use_text: !self.no_text,
            use_image: !self.no_image,
            representation: self.representation_mode,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: if self.no_attr_loss { 0.0 } else { self.lambda2 },
            lambda3: if self.no_neighbor_loss {
                0.0
            } else {
                self.lambda3
            },
            tau: self.tau,
        }
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig {
            rho: self.rho,
            mode: self.dropout_mode,
            rng_seed: self.rng_seed,
        }
    }

    pub fn transe(&self) -> TransEConfig {
        TransEConfig {
            dim: self.transe_dim,
            epochs: self.transe_epochs,
            learning_rate: self.transe_learning_rate,
            rng_seed: self.rng_seed,
            ..TransEConfig::default()
        }
    }
}

/// Frozen initial tables of both graphs: entity features and relation-type
/// embeddings, indexed `[kg1, kg2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTables {
    pub entities: [FeatureTable<EntityId>; 2],
    pub relations: [FeatureTable<RelationTypeId>; 2],
}

impl InitTables {
    /// Joint TransE over both graphs with the train seeds as shared anchors.
    pub fn transe(
        kg1: &MultiModalKG,
        kg2: &MultiModalKG,
        seeds: &AlignmentSeedSet,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let (a, b) = train_transe_joint(kg1, kg2, &seeds.train_pairs(), &cfg.transe())?;
        Ok(InitTables {
            entities: [a.entities, b.entities],
            relations: [a.relations, b.relations],
        })
    }

    pub fn dim(&self) -> usize {
        self.entities[0].dim
    }
}

fn modality_dim(kg1: &MultiModalKG, kg2: &MultiModalKG, m: Modality) -> Result<usize> {
    let dims: Vec<usize> = [kg1, kg2]
        .iter()
        .map(|k| k.features(m))
        .filter(|t| !t.is_empty())
        .map(|t| t.dim)
        .collect();
    match dims.as_slice() {
        [] => Ok(0),
        [a] => Ok(*a),
        [a, b] if a == b => Ok(*a),
        [a, b] => Err(Error::DimMismatch {
            context: "attribute feature dim across graphs",
            expected: *a,
            found: *b,
        }),
        _ => unreachable!(),
    }
}

/// Value (and optionally gradient) of the training objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub components: LossComponents,
    /// Aligned with [`ModelParams::tensors`].
    pub grads: Option<Vec<Mat>>,
    pub activation_signature: Vec<i8>,
    pub zero_norm_rows: usize,
}

/// Frozen per-run state: both graphs' sparse structure, options and weights.
pub struct Trainer<'a> {
    kgs: [&'a MultiModalKG; 2],
    inputs: [GraphInputs; 2],
    dims: ModelDims,
    cfg: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        kg1: &'a MultiModalKG,
        kg2: &'a MultiModalKG,
        init: &InitTables,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if init.entities[1].dim != init.dim() || init.relations.iter().any(|r| r.dim != init.dim())
        {
            return Err(Error::Config(
                "initial entity and relation tables disagree on dimension".into(),
            ));
        }
        let dims = ModelDims {
            entity_in: init.dim(),
            text_in: modality_dim(kg1, kg2, Modality::Text)?,
            image_in: modality_dim(kg1, kg2, Modality::Image)?,
            d: cfg.d,
            layers: cfg.layers,
        };
        let inputs = [
            GraphInputs::new(
                kg1,
                &build_plan(kg1),
                &init.entities[0],
                &init.relations[0],
                dims,
            )?,
            GraphInputs::new(
                kg2,
                &build_plan(kg2),
                &init.entities[1],
                &init.relations[1],
                dims,
            )?,
        ];
        Ok(Trainer {
            kgs: [kg1, kg2],
            inputs,
            dims,
            cfg: cfg.clone(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn init_params(&self) -> ModelParams {
        ModelParams::xavier(self.dims, self.cfg.rng_seed)
    }

    pub fn negatives(
        &self,
        pairs: &[(EntityId, EntityId)],
        epoch: u64,
    ) -> Result<Vec<NegativeSample>> {
        sample_negatives(
            pairs,
            self.cfg.negatives,
            self.kgs[0],
            self.kgs[1],
            self.cfg.rng_seed,
            epoch,
        )
    }

    /// Total loss over `batch`; `dropout` off evaluates the deterministic encoder.
    pub fn objective(
        &self,
        params: &ModelParams,
        batch: &[(EntityId, EntityId)],
        negatives: &[NegativeSample],
        epoch: u64,
        dropout: bool,
        with_grads: bool,
    ) -> Objective {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, params);
        let options = self.cfg.encoder_options();
        let drop = if dropout {
            self.cfg.dropout()
        } else {
            DropoutConfig::none()
        };
        let left = encode(
            &mut tape,
            &self.inputs[0],
            &model,
            &options,
            &drop,
            epoch,
            0,
        );
        let right = encode(
            &mut tape,
            &self.inputs[1],
            &model,
            &options,
            &drop,
            epoch,
            1,
        );
        let weights = self.cfg.loss_weights();
        let margin = self.cfg.margin_mode.then_some(self.cfg.margin);
        let ea = entity_alignment_term(
            &mut tape,
            left.entity,
            right.entity,
            batch,
            negatives,
            margin,
        );
        let pairs: Vec<_> = Modality::ALL
            .into_iter()
            .filter(|&m| options.uses(m))
            .map(|m| {
                (
                    left.last().attrs[m as usize],
                    right.last().attrs[m as usize],
                )
            })
            .collect();
        let at = attribute_term(&mut tape, &pairs, batch);
        let ct = neighbor_contrastive_term(
            &mut tape,
            left.entity,
            right.entity,
            batch,
            self.inputs[1].neighbors(),
            weights.tau,
        );
        let total = weighted_total(&mut tape, ea, at, ct, &weights);
        let grads = with_grads.then(|| {
            let g = tape.backward(total);
            params
                .tensors()
                .iter()
                .zip(&model.vars)
                .map(|((_, m), &v)| g.get_or_zeros(v, m.dim()))
                .collect()
        });
        Objective {
            loss: tape.scalar(total),
            components: LossComponents {
                entity: tape.scalar(ea),
                attribute: tape.scalar(at),
                neighbor: tape.scalar(ct),
            },
            grads,
            activation_signature: tape.activation_signature(),
            zero_norm_rows: tape.zero_norm_rows(),
        }
    }

    /// Final alignment representations of both graphs, dropout off.
    pub fn embed(&self, params: &ModelParams) -> (Mat, Mat) {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, params);
        let options = self.cfg.encoder_options();
        let none = DropoutConfig::none();
        let l = encode(&mut tape, &self.inputs[0], &model, &options, &none, 0, 0);
        let r = encode(&mut tape, &self.inputs[1], &model, &options, &none, 0, 1);
        (tape.value(l.entity).clone(), tape.value(r.entity).clone())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ModelParams, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|(_, m)| Mat::zeros(m.dim()))
            .collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Mat]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    *p -= self.learning_rate * (update + self.weight_decay * *p);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub data: Vec<f64>,
}

/// Self-describing training snapshot, stored as one JSON document with the
/// version field first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub rng_state: RngState,
    pub params: Vec<TensorRecord>,
    pub init: InitTables,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        cfg: &TrainConfig,
        epoch: usize,
        loss_history: &[f64],
        init: &InitTables,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            dims: params.dims(),
            epoch,
            loss_history: loss_history.to_vec(),
            rng_state: RngState {
                seed: cfg.rng_seed,
                next_epoch: epoch as u64,
            },
            params: params
                .tensors()
                .into_iter()
                .map(|(name, m)| TensorRecord {
                    name,
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                })
                .collect(),
            init: init.clone(),
        }
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let mut map = BTreeMap::new();
        for t in &self.params {
            let m =
                Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|_| {
                    Error::Checkpoint(format!(
                        "tensor {} data does not fit shape {:?}",
                        t.name, t.shape
                    ))
                })?;
            map.insert(t.name.clone(), m);
        }
        ModelParams::from_tensors(self.dims, map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ck.model_params()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Parameters at the start of the epoch with the lowest monitored loss.
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub loss_history: Vec<f64>,
    pub components_history: Vec<LossComponents>,
    pub validation_history: Vec<f64>,
    pub stopped_early: bool,
    /// Cosine evaluations that met a zero vector (treated as orthogonal).
    pub zero_norm_rows: usize,
}

/// Split off the early-stopping holdout from the train pairs.
fn holdout(
    pairs: &[(EntityId, EntityId)],
    fraction: f64,
    seed: u64,
) -> (Vec<(EntityId, EntityId)>, Vec<(EntityId, EntityId)>) {
    let n_val = (fraction * pairs.len() as f64).floor() as usize;
    if n_val == 0 {
        return (pairs.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut crate::rng::stream(seed, "validation", &[]));
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (
        train.iter().map(|&i| pairs[i]).collect(),
        val.iter().map(|&i| pairs[i]).collect(),
    )
}

pub fn train(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    init: &InitTables,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    seeds.check()?;
    if seeds.split.is_none() {
        return Err(Error::Config(
            "training needs a train/test split of the seeds".into(),
        ));
    }
    let trainer = Trainer::new(kg1, kg2, init, cfg)?;
    let (train_pairs, val_pairs) =
        holdout(&seeds.train_pairs(), cfg.validation_fraction, cfg.rng_seed);
    if train_pairs.is_empty() {
        return Err(Error::Empty("no training seed pairs"));
    }
    let mut params = trainer.init_params();
    let mut opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);

    let mut history = Vec::new();
    let mut components_history = Vec::new();
    let mut validation_history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut zero_norm_rows = 0;

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let start_params = params.clone();
        let negatives = trainer.negatives(&train_pairs, e)?;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut crate::rng::stream(cfg.rng_seed, "batches", &[e]));

        let mut epoch_loss = 0.0;
        let mut comps = LossComponents::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train_pairs[i]).collect();
            let negs: Vec<_> = chunk.iter().map(|&i| negatives[i].clone()).collect();
            let obj = trainer.objective(&params, &batch, &negs, e, true, true);
            if !obj.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    value: obj.loss,
                });
            }
            zero_norm_rows += obj.zero_norm_rows;
            let w = batch.len() as f64 / train_pairs.len() as f64;
            epoch_loss += w * obj.loss;
            comps.entity += w * obj.components.entity;
            comps.attribute += w * obj.components.attribute;
            comps.neighbor += w * obj.components.neighbor;
            opt.step(&mut params, &obj.grads.expect("requested"));
        }
        if params
            .tensors()
            .iter()
            .any(|(_, m)| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Divergence {
                epoch,
                value: f64::NAN,
            });
        }
        history.push(epoch_loss);
        components_history.push(comps);

        let monitored = if val_pairs.is_empty() {
            epoch_loss
        } else {
            let negs = sample_negatives(
                &val_pairs,
                cfg.negatives,
                kg1,
                kg2,
                cfg.rng_seed ^ 0x5EED,
                e,
            )?;
            let v = trainer
                .objective(&start_params, &val_pairs, &negs, e, false, false)
                .loss;
            validation_history.push(v);
            v
        };
        if monitored < best.0 {
            best = (monitored, epoch, start_params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let epochs_run = history.len();
    let final_checkpoint = Checkpoint::new(&params, cfg, epochs_run, &history, init);
    let best_checkpoint = Checkpoint::new(&best.2, cfg, best.1, &history[..best.1], init);
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_epoch: best.1,
        loss_history: history,
        components_history,
        validation_history,
        stopped_early,
        zero_norm_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTable;
    use crate::kg::{generate_synthetic, split_seeds, AttributeId, SyntheticConfig, Triple};

    fn twin() -> (MultiModalKG, MultiModalKG, AlignmentSeedSet) {
        let mut text = FeatureTable::new(2);
        text.insert(AttributeId(0), vec![1.0, 0.2]).unwrap();
        text.insert(AttributeId(1), vec![-0.3, 0.8]).unwrap();
        let kg = MultiModalKG {
            entities: vec!["a".into(), "b".into()],
            relation_types: vec!["r".into()],
            triples: vec![Triple {
                head: EntityId(0),
                rel: RelationTypeId(0),
                tail: EntityId(1),
            }],
            text_attrs: BTreeMap::from([
                (EntityId(0), vec![AttributeId(0)]),
                (EntityId(1), vec![AttributeId(1)]),
            ]),
            image_attrs: BTreeMap::new(),
            text_features: text,
            image_features: FeatureTable::new(0),
        };
        let seeds = AlignmentSeedSet {
            pairs: vec![(EntityId(0), EntityId(0)), (EntityId(1), EntityId(1))],
            split: Some(crate::kg::SeedSplit {
                train: vec![0],
                test: vec![1],
            }),
        };
        (kg.clone(), kg, seeds)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            d: 4,
            negatives: 1,
            epochs: 50,
            transe_dim: 4,
            transe_epochs: 20,
            rho: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_and_kv_round_trip() {
        let cfg = TrainConfig::from_kv_text("").unwrap();
        assert_eq!(
            (
                cfg.epochs,
                cfg.learning_rate,
                cfg.rho,
                cfg.tau,
                cfg.negatives,
                cfg.batch_size
            ),
            (200, 0.001, 0.35, 0.5, 15, 512)
        );
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lambda3), (5.0, 3.0, 2.0));
        let mut c = cfg.clone();
        c.apply_kv_text("d = 64  # comment\nno_image=true\ndropout_mode = replace\n\nrepresentation_mode=concat_layers").unwrap();
        assert_eq!(
            (c.d, c.no_image, c.dropout_mode),
            (64, true, DropoutMode::Replace)
        );
        assert_eq!(TrainConfig::from_kv_text(&c.to_kv_text()).unwrap(), c);
        let err = TrainConfig::from_kv_text("lambda9 = 1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("lambda9"), "{err}");
        assert!(TrainConfig::from_kv_text("rho = lots").is_err());
        assert!(TrainConfig::from_kv_text("rho = 1.5")
            .unwrap()
            .validate()
            .is_err());
        for k in TrainConfig::KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn twin_loss_decreases() {
        let (kg1, kg2, seeds) = twin();
        let cfg = small_cfg();
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 50);
        assert!(
            out.loss_history[49] < out.loss_history[0],
            "{:?}",
            out.loss_history
        );
    }

    #[test]
    fn training_is_deterministic() {
        let syn = SyntheticConfig {
            n_entities: 40,
            text_dim: 8,
            image_dim: 8,
            rng_seed: 3,
            ..Default::default()
        };
        let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
        let seeds = split_seeds(&seeds, 0.5, 3).unwrap();
        let cfg = TrainConfig {
            d: 8,
            epochs: 5,
            transe_dim: 8,
            transe_epochs: 5,
            negatives: 3,
            ..TrainConfig::default()
        };
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let a = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        let b = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.final_checkpoint.to_json(), b.final_checkpoint.to_json());
    }

    #[test]
    fn zero_weights_leave_params_unchanged() {
        let (kg1, kg2, seeds) = twin();
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            weight_decay: 0.0,
            epochs: 7,
            ..small_cfg()
        };
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        let trainer = Trainer::new(&kg1, &kg2, &init, &cfg).unwrap();
        assert_eq!(
            out.final_checkpoint.model_params().unwrap(),
            trainer.init_params()
        );
    }

    #[test]
    fn no_uniformization_zeroes_missing_modalities() {
        let (kg1, mut kg2, seeds) = twin();
        kg2.text_attrs.remove(&EntityId(1));
        let cfg = TrainConfig {
            no_uniformization: true,
            layers: 0,
            ..small_cfg()
        };
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let trainer = Trainer::new(&kg1, &kg2, &init, &cfg).unwrap();
        let params = trainer.init_params();
        let plan = build_plan(&kg2);
        let state = crate::gnn::forward_layers(
            &kg2,
            &plan,
            &params,
            &init.entities[1],
            &init.relations[1],
            &cfg.encoder_options(),
            &DropoutConfig::none(),
            0,
        )
        .unwrap();
        assert!(state[0]
            .text_reps
            .get(&EntityId(1))
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        // attributed entity: plain projection of its single attribute
        let want = crate::uniform::project_features(&kg2.text_features, &params.proj.text).unwrap();
        for (a, b) in state[0]
            .text_reps
            .get(&EntityId(0))
            .unwrap()
            .iter()
            .zip(want.get(&AttributeId(0)).unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward() {
        let (kg1, kg2, seeds) = twin();
        let cfg = TrainConfig {
            epochs: 3,
            ..small_cfg()
        };
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        out.final_checkpoint.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"version\":1,"));
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.final_checkpoint);
        let trainer = Trainer::new(&kg1, &kg2, &back.init, &back.config).unwrap();
        let a = trainer.embed(&out.final_checkpoint.model_params().unwrap());
        let b = trainer.embed(&back.model_params().unwrap());
        assert_eq!(a, b);

        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_json("{}").is_err());
    }

    #[test]
    fn early_stop_and_holdout() {
        let syn = SyntheticConfig {
            n_entities: 30,
            text_dim: 4,
            image_dim: 4,
            rng_seed: 5,
            ..Default::default()
        };
        let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
        let seeds = split_seeds(&seeds, 0.5, 5).unwrap();
        let cfg = TrainConfig {
            d: 4,
            epochs: 30,
            patience: 2,
            learning_rate: 0.5,
            transe_dim: 4,
            transe_epochs: 3,
            negatives: 2,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        };
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        assert_eq!(out.validation_history.len(), out.loss_history.len());
        if out.stopped_early {
            assert!(out.loss_history.len() < 30);
            assert_eq!(out.loss_history.len() - 1 - out.best_epoch, 2);
        }
        assert_eq!(out.best_checkpoint.epoch, out.best_epoch);
    }

    #[test]
    fn unsplit_seeds_rejected() {
        let (kg1, kg2, mut seeds) = twin();
        let cfg = small_cfg();
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        seeds.split = None;
        assert!(matches!(
            train(&kg1, &kg2, &seeds, &init, &cfg),
            Err(Error::Config(_))
        ));
    }
}
