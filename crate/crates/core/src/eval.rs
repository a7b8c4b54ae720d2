//! Ranking evaluation, the attribute-gap analysis, dropout sweeps and ablations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{attribute_gap, AlignmentSeedSet, EntityId, Modality, MultiModalKG};
use crate::tape::Mat;
use crate::train::{
    train, CandidateSet, Checkpoint, InitTables, TrainConfig, TrainOutcome, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LeftToRight,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Option<Self> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len() as f64;
        Some(Metrics {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
            hits10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
            count: ranks.len(),
        })
    }

    fn average(a: &Metrics, b: &Metrics) -> Metrics {
        Metrics {
            mrr: (a.mrr + b.mrr) / 2.0,
            hits1: (a.hits1 + b.hits1) / 2.0,
            hits10: (a.hits10 + b.hits10) / 2.0,
            count: a.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    /// `None` for an empty bucket.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
    pub direction: Direction,
    pub per_gap_bucket: Vec<BucketMetrics>,
}

impl EvalReport {
    fn from_metrics(m: Metrics, direction: Direction) -> Self {
        EvalReport {
            mrr: m.mrr,
            hits1: m.hits1,
            hits10: m.hits10,
            count: m.count,
            direction,
            per_gap_bucket: Vec::new(),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "pairs   {}\nMRR     {:.4}\nHits@1  {:.4}\nHits@10 {:.4}\n",
            self.count, self.mrr, self.hits1, self.hits10
        )
    }
}

/// Pessimistic rank from a score row: `1 + #{j ≠ t : s_j ≥ s_t}`.
pub fn rank_from_scores(scores: &[f64], true_index: usize) -> usize {
    let s = scores[true_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| j != true_index && x >= s)
        .count()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Rank of `candidates[true_index]` by cosine similarity to `query`.
pub fn rank(query: &[f64], candidates: &[&[f64]], true_index: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("rank needs candidates"));
    }
    if true_index >= candidates.len() {
        return Err(Error::Lookup {
            kind: "true candidate index",
            id: true_index.to_string(),
        });
    }
    let scores: Vec<f64> = candidates.iter().map(|c| cosine(query, c)).collect();
    Ok(rank_from_scores(&scores, true_index))
}

fn normalized(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Ranks of each query's true candidate; rows of `scores` are queries.
pub fn ranks_from_matrix(scores: &Mat, truth: &[usize]) -> Vec<usize> {
    truth
        .par_iter()
        .enumerate()
        .map(|(i, &t)| rank_from_scores(scores.row(i).as_slice().expect("standard layout"), t))
        .collect()
}

/// Queries `query_ids` of `queries` against candidates `cand_ids` of `cands`.
fn direction_ranks(
    queries: &Mat,
    cands: &Mat,
    query_ids: &[usize],
    cand_ids: &[usize],
    truth: &[usize],
) -> Vec<usize> {
    let q = normalized(&queries.select(ndarray::Axis(0), query_ids));
    let c = normalized(&cands.select(ndarray::Axis(0), cand_ids));
    let scores = q.dot(&c.t());
    ranks_from_matrix(&scores, truth)
}

/// Left-to-right ranks for `pairs` over the chosen candidate set.
pub fn pair_ranks(
    left: &Mat,
    right: &Mat,
    pairs: &[(EntityId, EntityId)],
    candidates: CandidateSet,
) -> (Vec<usize>, Vec<usize>) {
    let ls: Vec<usize> = pairs.iter().map(|(l, _)| l.index()).collect();
    let rs: Vec<usize> = pairs.iter().map(|(_, r)| r.index()).collect();
    match candidates {
        CandidateSet::TestCounterparts => {
            let truth: Vec<usize> = (0..pairs.len()).collect();
            (
                direction_ranks(left, right, &ls, &rs, &truth),
                direction_ranks(right, left, &rs, &ls, &truth),
            )
        }
        CandidateSet::AllEntities => {
            let all_r: Vec<usize> = (0..right.nrows()).collect();
            let all_l: Vec<usize> = (0..left.nrows()).collect();
            (
                direction_ranks(left, right, &ls, &all_r, &rs),
                direction_ranks(right, left, &rs, &all_l, &ls),
            )
        }
    }
}

/// Metrics from final representations (rows indexed by entity id).
pub fn evaluate_embeddings(
    left: &Mat,
    right: &Mat,
    pairs: &[(EntityId, EntityId)],
    candidates: CandidateSet,
    direction: Direction,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no test pairs to evaluate"));
    }
    let (lr, rl) = pair_ranks(left, right, pairs, candidates);
    let a = Metrics::from_ranks(&lr).expect("nonempty");
    let m = match direction {
        Direction::LeftToRight => a,
        Direction::Bidirectional => {
            Metrics::average(&a, &Metrics::from_ranks(&rl).expect("nonempty"))
        }
    };
    Ok(EvalReport::from_metrics(m, direction))
}

fn embed_checkpoint(
    checkpoint: &Checkpoint,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
) -> Result<(Mat, Mat)> {
    let trainer = Trainer::new(kg1, kg2, &checkpoint.init, &checkpoint.config)?;
    if trainer.dims() != checkpoint.dims {
        return Err(Error::Config(format!(
            "checkpoint dimensions {:?} do not match these graphs ({:?})",
            checkpoint.dims,
            trainer.dims()
        )));
    }
    Ok(trainer.embed(&checkpoint.model_params()?))
}

/// Rank every test pair with dropout off, using the checkpoint's config for
/// the candidate set and direction.
pub fn evaluate(
    checkpoint: &Checkpoint,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    test_pairs: &[(EntityId, EntityId)],
) -> Result<EvalReport> {
    let (l, r) = embed_checkpoint(checkpoint, kg1, kg2)?;
    let cfg = &checkpoint.config;
    let direction = if cfg.bidirectional {
        Direction::Bidirectional
    } else {
        Direction::LeftToRight
    };
    evaluate_embeddings(&l, &r, test_pairs, cfg.eval_candidate_set, direction)
}

/// Single-value buckets `0..=24`.
pub fn default_gap_buckets() -> Vec<(usize, usize)> {
    (0..=24).map(|g| (g, g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub buckets: Vec<BucketMetrics>,
    /// Pairs kept after the equal-count filter on the other modality.
    pub considered: usize,
    /// Considered pairs whose gap lies in no bucket.
    pub out_of_range: usize,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_lo,bucket_hi,count,mrr,hits1,hits10\n");
        for b in &self.buckets {
            match &b.metrics {
                Some(m) => writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    b.lo, b.hi, b.count, m.mrr, m.hits1, m.hits10
                ),
                None => writeln!(s, "{},{},0,,,", b.lo, b.hi),
            }
            .expect("string write");
        }
        s
    }

    /// Count-weighted mean Hits@1 over populated buckets.
    pub fn mean_hits1(&self) -> Option<f64> {
        let n: usize = self.buckets.iter().map(|b| b.count).sum();
        (n > 0).then(|| {
            self.buckets
                .iter()
                .filter_map(|b| b.metrics.map(|m| m.hits1 * b.count as f64))
                .sum::<f64>()
                / n as f64
        })
    }

    /// Least-squares slope of Hits@1 against bucket midpoint (populated buckets).
    pub fn hits1_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .buckets
            .iter()
            .filter_map(|b| b.metrics.map(|m| ((b.lo + b.hi) as f64 / 2.0, m.hits1)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

/// Group already-computed ranks by attribute gap.
pub fn bucket_ranks(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    pairs: &[(EntityId, EntityId)],
    ranks: &[usize],
    modality: Modality,
    buckets: &[(usize, usize)],
) -> Result<GapReport> {
    if let Some(&(lo, hi)) = buckets.iter().find(|(lo, hi)| lo > hi) {
        return Err(Error::Config(format!(
            "bucket [{lo}, {hi}] is empty by construction"
        )));
    }
    let other = match modality {
        Modality::Text => Modality::Image,
        Modality::Image => Modality::Text,
    };
    let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); buckets.len()];
    let mut considered = 0;
    let mut out_of_range = 0;
    for (&pair, &r) in pairs.iter().zip(ranks) {
        if attribute_gap(kg1, kg2, pair, other)? != 0 {
            continue;
        }
        considered += 1;
        let gap = attribute_gap(kg1, kg2, pair, modality)?;
        match buckets
            .iter()
            .position(|&(lo, hi)| (lo..=hi).contains(&gap))
        {
            Some(b) => grouped[b].push(r),
            None => out_of_range += 1,
        }
    }
    Ok(GapReport {
        buckets: buckets
            .iter()
            .zip(&grouped)
            .map(|(&(lo, hi), ranks)| BucketMetrics {
                lo,
                hi,
                count: ranks.len(),
                metrics: Metrics::from_ranks(ranks),
            })
            .collect(),
        considered,
        out_of_range,
    })
}

/// Metrics per attribute-gap bucket in `modality`, over test pairs with
/// equal attribute counts in the other modality. Ranks come from the
/// regular left-to-right evaluation over the configured candidate set.
pub fn gap_bucket_eval(
    checkpoint: &Checkpoint,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    test_pairs: &[(EntityId, EntityId)],
    modality: Modality,
    buckets: &[(usize, usize)],
) -> Result<GapReport> {
    if test_pairs.is_empty() {
        return Err(Error::Empty("no test pairs to evaluate"));
    }
    let (l, r) = embed_checkpoint(checkpoint, kg1, kg2)?;
    let (ranks, _) = pair_ranks(&l, &r, test_pairs, checkpoint.config.eval_candidate_set);
    bucket_ranks(kg1, kg2, test_pairs, &ranks, modality, buckets)
}

/// Train and evaluate one configuration (the best-loss checkpoint is scored).
pub fn run(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    init: &InitTables,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(kg1, kg2, seeds, init, cfg)?;
    let report = evaluate(&outcome.best_checkpoint, kg1, kg2, &seeds.test_pairs())?;
    Ok((outcome, report))
}

pub fn sweep_dropout(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    init: &InitTables,
    cfg: &TrainConfig,
    rho_values: &[f64],
) -> Result<Vec<(f64, EvalReport)>> {
    rho_values
        .par_iter()
        .map(|&rho| {
            let cfg = TrainConfig { rho, ..cfg.clone() };
            run(kg1, kg2, seeds, init, &cfg).map(|(_, r)| (rho, r))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("rho,mrr,hits1,hits10\n");
    for (rho, r) in rows {
        writeln!(s, "{rho},{},{},{}", r.mrr, r.hits1, r.hits10).expect("string write");
    }
    s
}

/// Named model variants; each is a set of config flags on top of the base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoUniformization,
    NoMerge,
    NoGenerate,
    NoText,
    NoImage,
    NoAttrLoss,
    NoNeighborLoss,
    NoDropout,
    ReplaceDropout,
    MarginMode,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::NoUniformization,
        Variant::NoMerge,
        Variant::NoGenerate,
        Variant::NoText,
        Variant::NoImage,
        Variant::NoAttrLoss,
        Variant::NoNeighborLoss,
        Variant::NoDropout,
        Variant::ReplaceDropout,
        Variant::MarginMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoUniformization => "no_uniformization",
            Variant::NoMerge => "no_merge",
            Variant::NoGenerate => "no_generate",
            Variant::NoText => "no_text",
            Variant::NoImage => "no_image",
            Variant::NoAttrLoss => "no_attr_loss",
            Variant::NoNeighborLoss => "no_neighbor_loss",
            Variant::NoDropout => "no_dropout",
            Variant::ReplaceDropout => "replace_dropout",
            Variant::MarginMode => "margin_mode",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoUniformization => c.no_uniformization = true,
            Variant::NoMerge => c.no_merge = true,
            Variant::NoGenerate => c.no_generate = true,
            Variant::NoText => c.no_text = true,
            Variant::NoImage => c.no_image = true,
            Variant::NoAttrLoss => c.no_attr_loss = true,
            Variant::NoNeighborLoss => c.no_neighbor_loss = true,
            Variant::NoDropout => c.dropout_mode = crate::gnn::DropoutMode::None,
            Variant::ReplaceDropout => c.dropout_mode = crate::gnn::DropoutMode::Replace,
            Variant::MarginMode => c.margin_mode = true,
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant {s:?} (known: {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    /// Variant minus full model.
    pub delta_mrr: f64,
    pub delta_hits1: f64,
    pub delta_hits10: f64,
}

/// One run per variant plus the full model; rows follow `variants` with the
/// full model first.
pub fn ablate(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    init: &InitTables,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut all = vec![Variant::Full];
    all.extend(variants.iter().copied().filter(|&v| v != Variant::Full));
    let reports: Vec<EvalReport> = all
        .par_iter()
        .map(|v| run(kg1, kg2, seeds, init, &v.apply(cfg)).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    let full = reports[0].clone();
    Ok(all
        .into_iter()
        .zip(reports)
        .map(|(variant, report)| AblationRow {
            variant,
            delta_mrr: report.mrr - full.mrr,
            delta_hits1: report.hits1 - full.hits1,
            delta_hits10: report.hits10 - full.hits10,
            report,
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mrr,hits1,hits10,delta_mrr,delta_hits1,delta_hits10\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.report.mrr,
            r.report.hits1,
            r.report.hits10,
            r.delta_mrr,
            r.delta_hits1,
            r.delta_hits10
        )
        .expect("string write");
    }
    s
}
