//! Attribute-consistent multi-modal entity alignment.
//!
//! The pipeline, bottom-up:
//!
//! * [`kg`]: multi-modal knowledge graphs, seed sets, file formats and a
//!   synthetic twin-graph generator.
//! * [`features`], [`transe`]: initial representation tables.
//! * [`uniform`]: merge/generate uniformization so every entity holds
//!   exactly one vector per modality.
//! * [`gnn`]: the relation-aware encoder with neighbor dropout.
//! * [`loss`]: entity, attribute and neighbor alignment losses.
//! * [`train`], [`eval`]: optimization, checkpoints, ranking metrics,
//!   sweeps and ablations.

pub mod error;
pub mod eval;
pub mod features;
pub mod gnn;
pub mod kg;
pub mod loss;
pub mod rng;
pub mod tape;
pub mod train;
pub mod transe;
pub mod uniform;

pub use error::{Error, Result};
pub use features::FeatureTable;
pub use kg::{
    AlignmentSeedSet, AttributeId, EntityId, Modality, MultiModalKG, RelationTypeId, Triple,
};
