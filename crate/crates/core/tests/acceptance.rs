//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use mmea_core::eval::{
    default_gap_buckets, evaluate, evaluate_embeddings, gap_bucket_eval, ranks_from_matrix,
    Direction, Metrics, Variant,
};
use mmea_core::features::random_features;
use mmea_core::gnn::{dropout_neighbors, DropoutConfig, DropoutMode, ModelDims, ModelParams};
use mmea_core::kg::{generate_synthetic, split_seeds, SyntheticConfig};
use mmea_core::tape::Mat;
use mmea_core::train::{train, CandidateSet, InitTables, TrainConfig, Trainer};
use mmea_core::uniform::{apply_plan, build_plan};
use mmea_core::{EntityId, MultiModalKG, RelationTypeId};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("uniformization totality", totality),
        ("gradient correctness", gradients),
        ("metric oracle equivalence", metric_oracle),
        ("dropout statistics", dropout_statistics),
        ("synthetic alignment recovery", alignment_recovery),
        ("gap-robustness direction", gap_robustness),
        ("determinism", determinism),
        ("full-scale protocol documented", documentation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {}: {status} {name}: {} [{:.1}s]",
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn tables_for(kg1: &MultiModalKG, kg2: &MultiModalKG, dim: usize, seed: u64) -> InitTables {
    let ents = |kg: &MultiModalKG, s| {
        random_features(&kg.entity_ids().collect::<Vec<_>>(), dim, s).unwrap()
    };
    let rels = |kg: &MultiModalKG, s| {
        let ids: Vec<RelationTypeId> = (0..kg.n_relation_types())
            .map(RelationTypeId::from)
            .collect();
        random_features(&ids, dim, s).unwrap()
    };
    InitTables {
        entities: [ents(kg1, seed), ents(kg2, seed + 1)],
        relations: [rels(kg1, seed + 2), rels(kg2, seed + 3)],
    }
}

fn totality() -> Outcome {
    let mut rng = mmea_core::rng::stream(1, "test", &[]);
    let mut violations = 0;
    let mut graphs = 0;
    let mut isolated = 0;
    let mut generated = 0;
    for i in 0..100u64 {
        let cfg = SyntheticConfig {
            n_entities: rng.random_range(5..60),
            n_relation_types: rng.random_range(1..4),
            // low degrees leave isolated entities and many components
            avg_degree: rng.random_range(0.0..4.0),
            text_attr_count_range: (0, rng.random_range(0..5)),
            image_attr_count_range: (0, rng.random_range(0..3)),
            gap_level: rng.random_range(0..9),
            missing_modality_rate: rng.random_range(0.0..=0.5),
            text_dim: 3,
            image_dim: 2,
            rng_seed: i,
            ..Default::default()
        };
        let (kg1, kg2, _) = generate_synthetic(&cfg).unwrap();
        let dims = ModelDims {
            entity_in: 4,
            text_in: 3,
            image_in: 2,
            d: 5,
            layers: 1,
        };
        let p = ModelParams::xavier(dims, i);
        for kg in [&kg1, &kg2] {
            graphs += 1;
            isolated += kg.neighbors().iter().filter(|n| n.is_empty()).count();
            let plan = build_plan(kg);
            generated += plan.counts(mmea_core::Modality::Text).generate;
            let ids: Vec<EntityId> = kg.entity_ids().collect();
            let ent = random_features(&ids, 4, i).unwrap();
            let (text, image) = apply_plan(
                kg,
                &plan,
                &p.proj,
                [&p.merge_text, &p.merge_image],
                [&p.gen_text, &p.gen_image],
                &ent,
            )
            .unwrap();
            for table in [&text, &image] {
                let exact = table.len() == ids.len()
                    && ids.iter().all(|e| {
                        table
                            .get(e)
                            .is_some_and(|v| v.len() == 5 && v.iter().all(|x| x.is_finite()))
                    });
                violations += usize::from(!exact) * ids.len().max(1);
            }
        }
    }
    outcome(
        violations == 0,
        format!("{graphs} graphs, {isolated} isolated entities, {generated} generated text slots, {violations} violations"),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let syn = SyntheticConfig {
        n_entities: 6,
        n_relation_types: 2,
        avg_degree: 2.0,
        text_attr_count_range: (0, 3),
        image_attr_count_range: (1, 2),
        gap_level: 1,
        missing_modality_rate: 0.3,
        feature_noise_sigma: 0.1,
        text_dim: 3,
        image_dim: 2,
        rng_seed: 5,
        ..Default::default()
    };
    let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
    let seeds = split_seeds(&seeds, 0.5, 5).unwrap();
    let cfg = TrainConfig {
        d: 4,
        layers: 2,
        negatives: 2,
        ..TrainConfig::default()
    };
    let init = tables_for(&kg1, &kg2, 4, 11);
    let trainer = Trainer::new(&kg1, &kg2, &init, &cfg).unwrap();
    let batch = seeds.train_pairs();
    let negatives = trainer.negatives(&batch, 0).unwrap();
    let params = trainer.init_params();
    let base = trainer.objective(&params, &batch, &negatives, 0, false, true);
    let grads = base.grads.unwrap();
    let h = 1e-5;
    // central differences cannot resolve gradients below rounding noise of the loss
    let resolution = 10.0 * f64::EPSILON * base.loss.abs().max(1.0) / h;
    let (mut checked, mut skipped, mut flat, mut flat_bad, mut worst) = (0, 0, 0, 0, 0.0f64);
    for (k, (_, m)) in params.tensors().into_iter().enumerate() {
        for idx in 0..m.len() {
            let (r, c) = (idx / m.ncols(), idx % m.ncols());
            let shifted = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[k].1[[r, c]] += delta;
                trainer.objective(&p, &batch, &negatives, 0, false, false)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            if plus.activation_signature != base.activation_signature
                || minus.activation_signature != base.activation_signature
            {
                skipped += 1;
                continue;
            }
            let num = (plus.loss - minus.loss) / (2.0 * h);
            let ana = grads[k][[r, c]];
            checked += 1;
            if ana.abs().max(num.abs()) < resolution {
                flat += 1;
                flat_bad += usize::from((ana - num).abs() >= resolution);
            } else {
                worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()));
            }
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst < 1e-4 && flat_bad == 0 && checked > 0 && elapsed < Duration::from_secs(30),
        format!(
            "{checked} parameters checked ({flat} below FD resolution {resolution:.1e}, {flat_bad} of those off by more), {skipped} at activation kinks skipped, max relative error {worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Independent oracle: full sort with ties resolved against the true item.
fn sorted_metrics(scores: &Mat, truth: &[usize]) -> Metrics {
    let ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut order: Vec<(f64, bool)> = scores
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, &s)| (s, j == t))
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            order.iter().position(|x| x.1).unwrap() + 1
        })
        .collect();
    let n = ranks.len() as f64;
    Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        hits10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
        count: ranks.len(),
    }
}

fn cosine_matrix(left: &Mat, right: &Mat) -> Mat {
    Mat::from_shape_fn((left.nrows(), right.nrows()), |(i, j)| {
        let (u, v) = (left.row(i), right.row(j));
        u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt())
    })
}

fn metric_oracle() -> Outcome {
    let mut rng = mmea_core::rng::stream(3, "test", &[]);
    let truth: Vec<usize> = (0..50).collect();
    let pairs: Vec<(EntityId, EntityId)> = (0..50)
        .map(|i| (EntityId::from(i), EntityId::from(i)))
        .collect();
    let mut mismatches = 0;
    let mut tied = 0;
    for k in 0..200 {
        // score matrices on a coarse grid, so ties are frequent
        let scores = Mat::from_shape_fn((50, 50), |_| rng.random_range(0..12) as f64);
        let got = Metrics::from_ranks(&ranks_from_matrix(&scores, &truth)).unwrap();
        mismatches += usize::from(got != sorted_metrics(&scores, &truth));
        tied += (0..50)
            .filter(|&i| {
                scores
                    .row(i)
                    .iter()
                    .filter(|&&s| s == scores[[i, i]])
                    .count()
                    > 1
            })
            .count();

        // the same through evaluate; right rows drawn from a small pool to force exact ties
        let left = Mat::from_shape_fn((50, 6), |_| rng.random_range(-1.0..1.0));
        let pool = Mat::from_shape_fn((if k % 2 == 0 { 50 } else { 8 }, 6), |_| {
            rng.random_range(-1.0..1.0)
        });
        let pick: Vec<usize> = (0..50).map(|_| rng.random_range(0..pool.nrows())).collect();
        let right = pool.select(ndarray::Axis(0), &pick);
        let report = evaluate_embeddings(
            &left,
            &right,
            &pairs,
            CandidateSet::TestCounterparts,
            Direction::LeftToRight,
        )
        .unwrap();
        let want = sorted_metrics(&cosine_matrix(&left, &right), &truth);
        mismatches += usize::from(
            (report.mrr, report.hits1, report.hits10) != (want.mrr, want.hits1, want.hits10),
        );
    }
    outcome(
        mismatches == 0,
        format!("400 matrices (200 score grids, 200 embedding pairs), {tied} tied true scores, {mismatches} mismatches"),
    )
}

fn dropout_statistics() -> Outcome {
    let n = 100_000;
    let neighbors: Vec<EntityId> = (0..n).map(EntityId::from).collect();
    let cfg = |rho| DropoutConfig {
        rho,
        mode: DropoutMode::Drop,
        rng_seed: 9,
    };
    let kept = dropout_neighbors(&neighbors, &cfg(0.35), n, &[0, 0, 0, 0]).len();
    let frac = kept as f64 / n as f64;
    let bound = 3.0 * (0.35f64 * 0.65 / n as f64).sqrt();
    let identity = dropout_neighbors(&neighbors, &cfg(0.0), n, &[0, 0, 0, 0]) == neighbors;
    let empty = dropout_neighbors(&neighbors, &cfg(1.0), n, &[0, 0, 0, 0]).is_empty();
    outcome(
        (frac - 0.65).abs() <= bound && identity && empty,
        format!("retained {frac:.5} (|dev| {:.5} vs bound {bound:.5}), rho=0 identity {identity}, rho=1 empty {empty}", (frac - 0.65).abs()),
    )
}

fn alignment_recovery() -> Outcome {
    let t = Instant::now();
    let syn = SyntheticConfig {
        n_entities: 200,
        avg_degree: 4.0,
        gap_level: 3,
        feature_noise_sigma: 0.01,
        rng_seed: 7,
        ..Default::default()
    };
    let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
    let cfg = TrainConfig {
        d: 32,
        transe_dim: 32,
        train_fraction: 0.5,
        rng_seed: 7,
        ..TrainConfig::default()
    };
    let seeds = split_seeds(&seeds, cfg.train_fraction, cfg.rng_seed).unwrap();
    let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
    let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
    let report = evaluate(&out.best_checkpoint, &kg1, &kg2, &seeds.test_pairs()).unwrap();
    let elapsed = t.elapsed();
    outcome(
        report.hits1 >= 0.9 && elapsed < Duration::from_secs(300),
        format!(
            "Hits@1 {:.3} (target 0.90), MRR {:.3}, {} epochs, best epoch {}, {:.1}s",
            report.hits1,
            report.mrr,
            out.loss_history.len(),
            out.best_epoch,
            elapsed.as_secs_f64()
        ),
    )
}

fn gap_robustness() -> Outcome {
    let buckets: Vec<(usize, usize)> = default_gap_buckets().into_iter().take(9).collect();
    // pooled bucket tallies: (pairs, hits@1 count) per variant
    let mut pooled = [
        vec![(0usize, 0.0f64); buckets.len()],
        vec![(0usize, 0.0f64); buckets.len()],
    ];
    let mut per_seed = Vec::new();
    for seed in [1u64, 2, 3] {
        let syn = SyntheticConfig {
            n_entities: 200,
            gap_level: 8,
            image_gap_level: Some(0),
            text_attr_count_range: (1, 8),
            rng_seed: seed,
            ..Default::default()
        };
        let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
        let cfg = TrainConfig {
            d: 32,
            transe_dim: 32,
            train_fraction: 0.5,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let seeds = split_seeds(&seeds, cfg.train_fraction, seed).unwrap();
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let mut line = format!("seed {seed}");
        for (v, variant) in [Variant::Full, Variant::NoUniformization]
            .into_iter()
            .enumerate()
        {
            let out = train(&kg1, &kg2, &seeds, &init, &variant.apply(&cfg)).unwrap();
            let gaps = gap_bucket_eval(
                &out.best_checkpoint,
                &kg1,
                &kg2,
                &seeds.test_pairs(),
                mmea_core::Modality::Text,
                &buckets,
            )
            .unwrap();
            for (acc, b) in pooled[v].iter_mut().zip(&gaps.buckets) {
                acc.0 += b.count;
                acc.1 += b.metrics.map_or(0.0, |m| m.hits1 * b.count as f64);
            }
            line += &format!(" {variant} {:.3}", gaps.mean_hits1().unwrap_or(0.0));
        }
        per_seed.push(line);
    }
    let summary = |acc: &[(usize, f64)]| {
        let n: usize = acc.iter().map(|a| a.0).sum();
        let mean = acc.iter().map(|a| a.1).sum::<f64>() / n as f64;
        let pts: Vec<(f64, f64)> = buckets
            .iter()
            .zip(acc)
            .filter(|(_, a)| a.0 > 0)
            .map(|(b, a)| (b.0 as f64, a.1 / a.0 as f64))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        (mean, slope)
    };
    let (full_mean, full_slope) = summary(&pooled[0]);
    let (nu_mean, nu_slope) = summary(&pooled[1]);
    // degradation is the downward part of the slope
    let (full_deg, nu_deg) = ((-full_slope).max(0.0), (-nu_slope).max(0.0));
    outcome(
        full_mean >= nu_mean && full_deg <= nu_deg,
        format!(
            "pooled mean Hits@1 full {full_mean:.4} vs no_uniformization {nu_mean:.4}; slope per gap {full_slope:+.4} vs {nu_slope:+.4} ({})",
            per_seed.join("; ")
        ),
    )
}

fn determinism() -> Outcome {
    let syn = SyntheticConfig {
        n_entities: 60,
        text_dim: 8,
        image_dim: 8,
        rng_seed: 4,
        ..Default::default()
    };
    let (kg1, kg2, seeds) = generate_synthetic(&syn).unwrap();
    let cfg = TrainConfig {
        d: 16,
        epochs: 20,
        transe_dim: 16,
        transe_epochs: 20,
        rng_seed: 4,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |k: usize| {
        let seeds = split_seeds(&seeds, cfg.train_fraction, cfg.rng_seed).unwrap();
        let init = InitTables::transe(&kg1, &kg2, &seeds, &cfg).unwrap();
        let out = train(&kg1, &kg2, &seeds, &init, &cfg).unwrap();
        let path = dir.path().join(format!("run{k}.json"));
        out.final_checkpoint.save(&path).unwrap();
        (out.loss_history, std::fs::read(&path).unwrap())
    };
    let (la, ca) = run(0);
    let (lb, cb) = run(1);
    let max_dev = la
        .iter()
        .zip(&lb)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let same_bytes = ca == cb;
    outcome(
        la.len() == lb.len() && max_dev <= 1e-12 && same_bytes,
        format!("{} epochs, max loss deviation {max_dev:.1e}, checkpoints byte-identical {same_bytes} ({} bytes)", la.len(), ca.len()),
    )
}

fn documentation() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).unwrap_or_default();
    let required = [
        "## Full-scale protocol",
        "2:8",
        "5:5",
        "8:2",
        "Feature-file contract",
        "not reproduced",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|k| !text.contains(k))
        .collect();
    outcome(
        missing.is_empty(),
        if missing.is_empty() {
            "published full-scale numbers are not reproduced here; README documents the full-scale protocol"
                .into()
        } else {
            format!("README lacks {missing:?}")
        },
    )
}
