//! Multi-modal knowledge graphs and alignment seeds.

mod io;
mod seeds;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;

pub use io::{load_canonical, load_mmkb, write_canonical};
pub use seeds::{load_seeds, split_seeds, write_seeds, AlignmentSeedSet, SeedSplit};
pub use synth::{generate_synthetic, SyntheticConfig};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(i: usize) -> Self {
                $name(u32::try_from(i).expect("id overflows u32"))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl FromStr for $name {
            type Err = std::num::ParseIntError;
            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }
    };
}

dense_id!(
    /// Index into [`MultiModalKG::entities`].
    EntityId
);
dense_id!(
    /// Index into [`MultiModalKG::relation_types`].
    RelationTypeId
);
dense_id!(
    /// One attribute occurrence; keys the modality's feature table.
    AttributeId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Image];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationTypeId,
    pub tail: EntityId,
}

/// Entities, typed relation triples and per-entity text/image attributes.
///
/// Fields are public so that malformed graphs can be represented and
/// reported by [`validate`]; loaders and the generator always return
/// graphs that validate cleanly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalKG {
    /// Entity names; `EntityId(i)` names `entities[i]`.
    pub entities: Vec<String>,
    pub relation_types: Vec<String>,
    pub triples: Vec<Triple>,
    pub text_attrs: BTreeMap<EntityId, Vec<AttributeId>>,
    pub image_attrs: BTreeMap<EntityId, Vec<AttributeId>>,
    pub text_features: FeatureTable<AttributeId>,
    pub image_features: FeatureTable<AttributeId>,
}

impl MultiModalKG {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relation_types(&self) -> usize {
        self.relation_types.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len()).map(EntityId::from)
    }

    pub fn attrs(&self, modality: Modality) -> &BTreeMap<EntityId, Vec<AttributeId>> {
        match modality {
            Modality::Text => &self.text_attrs,
            Modality::Image => &self.image_attrs,
        }
    }

    pub fn features(&self, modality: Modality) -> &FeatureTable<AttributeId> {
        match modality {
            Modality::Text => &self.text_features,
            Modality::Image => &self.image_features,
        }
    }

    /// Attributes of `entity` in `modality` (empty if none).
    pub fn entity_attrs(&self, entity: EntityId, modality: Modality) -> &[AttributeId] {
        self.attrs(modality).get(&entity).map_or(&[], Vec::as_slice)
    }

    pub fn attr_count(&self, entity: EntityId, modality: Modality) -> usize {
        self.entity_attrs(entity, modality).len()
    }

    pub fn contains(&self, entity: EntityId) -> bool {
        entity.index() < self.entities.len()
    }

    pub fn name_index(&self) -> HashMap<&str, EntityId> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), EntityId::from(i)))
            .collect()
    }

    /// Distinct first-order neighbors of every entity, ignoring direction,
    /// in ascending id order.
    pub fn neighbors(&self) -> Vec<Vec<EntityId>> {
        let mut sets = vec![BTreeSet::new(); self.n_entities()];
        for t in &self.triples {
            sets[t.head.index()].insert(t.tail);
            sets[t.tail.index()].insert(t.head);
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

/// |count_left − count_right| of raw attributes in one modality.
pub fn attribute_gap(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    pair: (EntityId, EntityId),
    modality: Modality,
) -> Result<usize> {
    for (kg, e) in [(kg1, pair.0), (kg2, pair.1)] {
        if !kg.contains(e) {
            return Err(Error::Lookup {
                kind: "entity",
                id: e.to_string(),
            });
        }
    }
    Ok(kg1
        .attr_count(pair.0, modality)
        .abs_diff(kg2.attr_count(pair.1, modality)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    DanglingEntity,
    DanglingRelation,
    MissingFeature,
    DimMismatch,
    NonFinite,
    SelfLoop,
    DuplicateTriple,
    DuplicateName,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(
                self.violations.iter().map(ToString::to_string).collect(),
            ))
        }
    }
}

/// Check every graph invariant; the report is empty iff all hold.
pub fn validate(kg: &MultiModalKG) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = kg.n_entities();

    let mut names = BTreeSet::new();
    for name in &kg.entities {
        if !names.insert(name.as_str()) {
            report.push(
                ViolationKind::DuplicateName,
                format!("entity name {name:?} repeated"),
            );
        }
    }

    let mut seen = BTreeSet::new();
    for (i, t) in kg.triples.iter().enumerate() {
        for e in [t.head, t.tail] {
            if e.index() >= n {
                report.push(
                    ViolationKind::DanglingEntity,
                    format!("triple {i} references entity {e}"),
                );
            }
        }
        if t.rel.index() >= kg.n_relation_types() {
            report.push(
                ViolationKind::DanglingRelation,
                format!("triple {i} references relation type {}", t.rel),
            );
        }
        if t.head == t.tail {
            report.push(
                ViolationKind::SelfLoop,
                format!("triple {i} is a self-loop on {}", t.head),
            );
        }
        if !seen.insert(*t) {
            report.push(
                ViolationKind::DuplicateTriple,
                format!("triple {i} repeats an earlier triple"),
            );
        }
    }

    for modality in Modality::ALL {
        let table = kg.features(modality);
        for (entity, attrs) in kg.attrs(modality) {
            if entity.index() >= n {
                report.push(
                    ViolationKind::DanglingEntity,
                    format!("{modality} attributes attached to unknown entity {entity}"),
                );
            }
            for a in attrs {
                if table.get(a).is_none() {
                    report.push(
                        ViolationKind::MissingFeature,
                        format!(
                            "{modality} attribute {a} of entity {entity} has no feature vector"
                        ),
                    );
                }
            }
        }
        for (a, v) in &table.vectors {
            if v.len() != table.dim {
                report.push(
                    ViolationKind::DimMismatch,
                    format!(
                        "{modality} feature {a} has length {}, table dim {}",
                        v.len(),
                        table.dim
                    ),
                );
            }
            if v.iter().any(|x| !x.is_finite()) {
                report.push(
                    ViolationKind::NonFinite,
                    format!("{modality} feature {a} is not finite"),
                );
            }
        }
    }
    report
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// a -r-> b -r-> c, one text attribute on each entity, one image on a.
    pub(crate) fn three_entity_kg() -> MultiModalKG {
        let mut text = FeatureTable::new(2);
        let mut image = FeatureTable::new(3);
        let mut text_attrs = BTreeMap::new();
        for i in 0..3u32 {
            text.insert(AttributeId(i), vec![i as f64, 1.0]).unwrap();
            text_attrs.insert(EntityId(i), vec![AttributeId(i)]);
        }
        image.insert(AttributeId(0), vec![0.1, 0.2, 0.3]).unwrap();
        MultiModalKG {
            entities: vec!["a".into(), "b".into(), "c".into()],
            relation_types: vec!["r".into()],
            triples: vec![
                Triple {
                    head: EntityId(0),
                    rel: RelationTypeId(0),
                    tail: EntityId(1),
                },
                Triple {
                    head: EntityId(1),
                    rel: RelationTypeId(0),
                    tail: EntityId(2),
                },
            ],
            text_attrs,
            image_attrs: BTreeMap::from([(EntityId(0), vec![AttributeId(0)])]),
            text_features: text,
            image_features: image,
        }
    }

    #[test]
    fn well_formed_kg_validates() {
        assert!(validate(&three_entity_kg()).is_empty());
    }

    #[test]
    fn dangling_triple_entity() {
        let mut kg = three_entity_kg();
        kg.triples.push(Triple {
            head: EntityId(0),
            rel: RelationTypeId(0),
            tail: EntityId(9),
        });
        let report = validate(&kg);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.count(ViolationKind::DanglingEntity), 1);
    }

    #[test]
    fn wrong_length_text_vector() {
        let mut kg = three_entity_kg();
        kg.text_features
            .vectors
            .insert(AttributeId(1), vec![1.0, 2.0, 3.0]);
        let report = validate(&kg);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.count(ViolationKind::DimMismatch), 1);
    }

    #[test]
    fn self_loop_duplicate_and_missing_feature() {
        let mut kg = three_entity_kg();
        kg.triples.push(Triple {
            head: EntityId(2),
            rel: RelationTypeId(0),
            tail: EntityId(2),
        });
        kg.triples.push(kg.triples[0]);
        kg.image_attrs.insert(EntityId(1), vec![AttributeId(5)]);
        let report = validate(&kg);
        assert_eq!(report.count(ViolationKind::SelfLoop), 1);
        assert_eq!(report.count(ViolationKind::DuplicateTriple), 1);
        assert_eq!(report.count(ViolationKind::MissingFeature), 1);
        assert!(report.into_result().is_err());
    }

    #[test]
    fn attribute_gap_counts() {
        let mut left = three_entity_kg();
        let right = three_entity_kg();
        left.text_attrs.insert(
            EntityId(0),
            vec![AttributeId(0), AttributeId(1), AttributeId(2)],
        );
        assert_eq!(
            attribute_gap(&left, &right, (EntityId(0), EntityId(0)), Modality::Text).unwrap(),
            2
        );
        assert_eq!(
            attribute_gap(&left, &right, (EntityId(1), EntityId(2)), Modality::Text).unwrap(),
            0
        );
        assert!(attribute_gap(&left, &right, (EntityId(7), EntityId(0)), Modality::Text).is_err());

        let mut wide = three_entity_kg();
        let mut table = FeatureTable::new(2);
        let ids: Vec<_> = (0..24u32).map(AttributeId).collect();
        for &a in &ids {
            table.insert(a, vec![0.0, 1.0]).unwrap();
        }
        wide.text_features = table;
        wide.text_attrs = BTreeMap::from([(EntityId(1), ids)]);
        let mut empty = three_entity_kg();
        empty.text_attrs.clear();
        assert_eq!(
            attribute_gap(&empty, &wide, (EntityId(0), EntityId(1)), Modality::Text).unwrap(),
            24
        );
    }

    #[test]
    fn neighbors_are_undirected_and_distinct() {
        let mut kg = three_entity_kg();
        kg.relation_types.push("s".into());
        kg.triples.push(Triple {
            head: EntityId(1),
            rel: RelationTypeId(1),
            tail: EntityId(0),
        });
        let nb = kg.neighbors();
        assert_eq!(nb[0], vec![EntityId(1)]);
        assert_eq!(nb[1], vec![EntityId(0), EntityId(2)]);
        assert_eq!(nb[2], vec![EntityId(1)]);
    }
}
