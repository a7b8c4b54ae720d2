//! Shared fixtures for the benchmarks.

use mmea_core::features::random_features;
use mmea_core::kg::{generate_synthetic, split_seeds, AlignmentSeedSet, SyntheticConfig};
use mmea_core::train::InitTables;
use mmea_core::{MultiModalKG, RelationTypeId};

pub struct Fixture {
    pub kg1: MultiModalKG,
    pub kg2: MultiModalKG,
    pub seeds: AlignmentSeedSet,
    pub init: InitTables,
}

/// Synthetic pair of `n` entities with random `dim`-wide init tables.
pub fn fixture(n: usize, dim: usize) -> Fixture {
    let syn = SyntheticConfig {
        n_entities: n,
        avg_degree: 4.0,
        gap_level: 3,
        rng_seed: 17,
        ..Default::default()
    };
    let (kg1, kg2, seeds) = generate_synthetic(&syn).expect("synthetic pair");
    let seeds = split_seeds(&seeds, 0.3, 17).expect("split");
    let ents = |kg: &MultiModalKG, s| {
        random_features(&kg.entity_ids().collect::<Vec<_>>(), dim, s).expect("table")
    };
    let rels = |kg: &MultiModalKG, s| {
        let ids: Vec<RelationTypeId> = (0..kg.n_relation_types())
            .map(RelationTypeId::from)
            .collect();
        random_features(&ids, dim, s).expect("table")
    };
    let init = InitTables {
        entities: [ents(&kg1, 1), ents(&kg2, 2)],
        relations: [rels(&kg1, 3), rels(&kg2, 4)],
    };
    Fixture {
        kg1,
        kg2,
        seeds,
        init,
    }
}
