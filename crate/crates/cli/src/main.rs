//! `mmea`: command-line entry points for multi-modal entity alignment.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmea_core::eval::{
    ablate, ablation_csv, evaluate, gap_bucket_eval, sweep_csv, sweep_dropout, EvalReport, Variant,
};
use mmea_core::features::load_feature_table;
use mmea_core::kg::{
    attribute_gap, generate_synthetic, load_canonical, load_mmkb, load_seeds, split_seeds,
    validate, write_canonical, write_seeds, AlignmentSeedSet, SyntheticConfig,
};
use mmea_core::train::{train, Checkpoint, InitTables, TrainConfig};
use mmea_core::uniform::build_plan;
use mmea_core::{Error, Modality, MultiModalKG};

use manifest::RunManifest;

const OUTPUT_ROOT_VAR: &str = "MMEA_OUTPUT_ROOT";

const AFTER_HELP: &str = "\
Configuration precedence: built-in defaults < --config file < --set KEY=VALUE and flags.
Training config keys (key = value, `#` comments):
  d layers epochs batch_size learning_rate weight_decay rho tau lambda1 lambda2 lambda3
  negatives train_fraction rng_seed no_uniformization no_merge no_generate no_text no_image
  dropout_mode no_attr_loss no_neighbor_loss margin_mode margin eval_candidate_set
  representation_mode bidirectional patience validation_fraction transe_dim transe_epochs
  transe_learning_rate
Synthetic keys (synth --config): entities relations degree text_attrs image_attrs gap_level
  image_gap_level missing_rate noise text_dim image_dim seed
Output directory: --out, else $MMEA_OUTPUT_ROOT/<command>, else ./mmea-out/<command>.
Exit codes: 0 success, 1 I/O failure, 2 configuration or validation failure, 3 numeric failure.";

#[derive(Parser)]
#[command(name = "mmea", version, about = "Attribute-consistent multi-modal entity alignment", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import one mmkb-style graph into the canonical layout
    Import(ImportArgs),
    /// Generate a twin synthetic graph pair and its seed file
    Synth(SynthArgs),
    /// Train joint TransE entity and relation tables
    InitTranse(TrainArgs),
    /// Show the uniformization plan of one graph
    Plan(PlanArgs),
    /// Counts and attribute-gap statistics of a graph pair
    Stats(StatsArgs),
    /// Train a model and evaluate its best checkpoint on the test pairs
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test pairs
    Eval(EvalArgs),
    /// Train and evaluate one model per neighbor dropout rate
    Sweep(SweepArgs),
    /// Train and evaluate ablation variants against the full model
    Ablate(AblateArgs),
    /// Metrics bucketed by attribute-count gap
    Gap(GapArgs),
    /// Print the resolved training configuration
    Config(ConfigOnly),
}

#[derive(Args)]
struct Output {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigSource {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root random seed (same as --set rng_seed=N)
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn explicit(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut kv = config::explicit(self.config.as_ref(), &self.sets)?;
        if let Some(s) = self.seed {
            kv.push(("rng_seed".into(), s.to_string()));
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct Pair {
    /// Canonical directory of the left graph
    #[arg(long)]
    kg1: PathBuf,
    /// Canonical directory of the right graph
    #[arg(long)]
    kg2: PathBuf,
}

#[derive(Args)]
struct Data {
    #[command(flatten)]
    pair: Pair,
    /// Seed pairs, one `left<TAB>right` entity-name pair per line
    #[arg(long)]
    seeds: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    /// Relational triples: head, relation, tail
    #[arg(long)]
    rel: PathBuf,
    /// Attribute triples: entity, attribute, feature key
    #[arg(long)]
    attr: PathBuf,
    /// Text feature table keyed by feature key
    #[arg(long)]
    text_feats: PathBuf,
    /// Image feature table keyed by feature key
    #[arg(long)]
    image_feats: PathBuf,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct SynthArgs {
    /// key = value file of synthetic keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    entities: Option<usize>,
    /// Number of relation types
    #[arg(long)]
    relations: Option<usize>,
    /// Average entity degree
    #[arg(long)]
    degree: Option<f64>,
    /// Text attributes per left entity, as lo-hi
    #[arg(long)]
    text_attrs: Option<String>,
    /// Image attributes per left entity, as lo-hi
    #[arg(long)]
    image_attrs: Option<String>,
    /// Maximum attribute-count gap per aligned pair
    #[arg(long)]
    gap_level: Option<usize>,
    /// Image gap, when it should differ from --gap-level
    #[arg(long)]
    image_gap_level: Option<usize>,
    /// Probability that a right entity loses one whole modality
    #[arg(long)]
    missing_rate: Option<f64>,
    /// Feature noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    image_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct PlanArgs {
    /// Canonical graph directory
    #[arg(long)]
    kg: PathBuf,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    pair: Pair,
    /// Seed pairs; enables the per-pair gap report
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    cfg: ConfigSource,
    /// Directory written by init-transe; TransE runs in-process otherwise
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by train
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: Data,
    /// Keys given here must agree with the checkpoint, except
    /// eval_candidate_set and bidirectional, which override it
    #[command(flatten)]
    cfg: ConfigSource,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated dropout rates
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.1,0.2,0.3,0.35,0.4,0.5,0.6,0.7"
    )]
    rho: Vec<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated variant names; all variants by default
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct GapArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Modality whose attribute-count gap is bucketed
    #[arg(long, default_value = "text")]
    modality: Modality,
    /// Comma-separated inclusive lo-hi buckets; single values 0..=24 by default
    #[arg(long, value_delimiter = ',')]
    buckets: Vec<String>,
}

#[derive(Args)]
struct ConfigOnly {
    #[command(flatten)]
    cfg: ConfigSource,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug)]
pub enum Failure {
    Io(String),
    Config(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            Error::Divergence { .. } => Failure::Numeric(e.to_string()),
            Error::Validation(items) => {
                let mut m = format!("validation failed with {} violation(s):", items.len());
                for i in &items {
                    let _ = write!(m, "\n  {i}");
                }
                Failure::Config(m)
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

/// Everything recorded about one invocation.
struct Run {
    command: &'static str,
    output_dir: PathBuf,
    config_path: Option<PathBuf>,
    config: Vec<(String, String)>,
    inputs: BTreeMap<String, PathBuf>,
    artifacts: Vec<String>,
}

impl Run {
    fn new(command: &'static str, out: &Output) -> Self {
        let output_dir = out.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ROOT_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("mmea-out"))
                .join(command)
        });
        Run {
            command,
            output_dir,
            config_path: None,
            config: Vec::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn ensure_dir(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| Failure::Io(format!("{}: {e}", self.output_dir.display())))
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        self.ensure_dir()?;
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// Register files some library call already wrote under `output_dir`.
    fn written(&mut self, names: impl IntoIterator<Item = String>) {
        self.artifacts.extend(names);
    }

    fn manifest(
        &self,
        argv: Vec<String>,
        started_at: String,
        failure: Option<&Failure>,
    ) -> RunManifest {
        let artifacts = self
            .artifacts
            .iter()
            .filter_map(|a| {
                manifest::sha256_file(&self.path(a))
                    .ok()
                    .map(|h| (a.clone(), h))
            })
            .collect();
        RunManifest {
            command: self.command.to_string(),
            argv,
            config_path: self.config_path.clone(),
            config: self.config.iter().cloned().collect(),
            inputs: self.inputs.clone(),
            output_dir: self.output_dir.clone(),
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            exit_code: failure.map_or(0, Failure::code),
            error: failure.map(|f| f.message().to_string()),
            artifacts,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started_at = chrono::Utc::now().to_rfc3339();
    let (mut run, result) = dispatch(cli.command);
    let failure = result.err();
    if let Some(f) = &failure {
        eprintln!("error: {}", f.message());
    }
    if let Err(e) = run
        .manifest(std::env::args().collect(), started_at, failure.as_ref())
        .append()
    {
        eprintln!(
            "error: cannot append run manifest in {}: {e}",
            run.output_dir.display()
        );
        return ExitCode::from(failure.map_or(1, |f| f.code()));
    }
    run.artifacts.clear();
    ExitCode::from(failure.map_or(0, |f| f.code()))
}

type Step = dyn FnOnce(&mut Run) -> Result<(), Failure>;

fn dispatch(command: Command) -> (Run, Result<(), Failure>) {
    let (mut run, go): (Run, Box<Step>) = match command {
        Command::Import(a) => (
            Run::new("import", &a.out),
            Box::new(move |r: &mut Run| cmd_import(r, &a)),
        ),
        Command::Synth(a) => (
            Run::new("synth", &a.out),
            Box::new(move |r: &mut Run| cmd_synth(r, &a)),
        ),
        Command::InitTranse(a) => (
            Run::new("init-transe", &a.out),
            Box::new(move |r: &mut Run| cmd_init_transe(r, &a)),
        ),
        Command::Plan(a) => (
            Run::new("plan", &a.out),
            Box::new(move |r: &mut Run| cmd_plan(r, &a)),
        ),
        Command::Stats(a) => (
            Run::new("stats", &a.out),
            Box::new(move |r: &mut Run| cmd_stats(r, &a)),
        ),
        Command::Train(a) => (
            Run::new("train", &a.out),
            Box::new(move |r: &mut Run| cmd_train(r, &a)),
        ),
        Command::Eval(a) => (
            Run::new("eval", &a.out),
            Box::new(move |r: &mut Run| cmd_eval(r, &a)),
        ),
        Command::Sweep(a) => (
            Run::new("sweep", &a.train.out),
            Box::new(move |r: &mut Run| cmd_sweep(r, &a)),
        ),
        Command::Ablate(a) => (
            Run::new("ablate", &a.train.out),
            Box::new(move |r: &mut Run| cmd_ablate(r, &a)),
        ),
        Command::Gap(a) => (
            Run::new("gap", &a.eval.out),
            Box::new(move |r: &mut Run| cmd_gap(r, &a)),
        ),
        Command::Config(a) => (
            Run::new("config", &a.out),
            Box::new(move |r: &mut Run| cmd_config(r, &a)),
        ),
    };
    let result = go(&mut run);
    (run, result)
}

fn graph_stats(name: &str, kg: &MultiModalKG) -> String {
    let mut s = String::new();
    let count = |m| kg.attrs(m).values().map(Vec::len).sum::<usize>();
    let lacking = |m| {
        kg.entity_ids()
            .filter(|&e| kg.attr_count(e, m) == 0)
            .count()
    };
    let _ = writeln!(
        s,
        "{name}: {} entities, {} relation types, {} triples",
        kg.n_entities(),
        kg.n_relation_types(),
        kg.triples.len()
    );
    for m in Modality::ALL {
        let _ = writeln!(
            s,
            "{name}: {} {m} attributes (dim {}), {} entities without {m}",
            count(m),
            kg.features(m).dim,
            lacking(m)
        );
    }
    let either = kg
        .entity_ids()
        .filter(|&e| Modality::ALL.iter().any(|&m| kg.attr_count(e, m) == 0))
        .count();
    let _ = writeln!(
        s,
        "{name}: {either} entities lack at least one modality ({:.1}%)",
        100.0 * either as f64 / kg.n_entities().max(1) as f64
    );
    s
}

fn load_pair(run: &mut Run, pair: &Pair) -> Result<(MultiModalKG, MultiModalKG), Failure> {
    run.input("kg1", &pair.kg1);
    run.input("kg2", &pair.kg2);
    Ok((load_canonical(&pair.kg1)?, load_canonical(&pair.kg2)?))
}

fn load_data(
    run: &mut Run,
    data: &Data,
) -> Result<(MultiModalKG, MultiModalKG, AlignmentSeedSet), Failure> {
    let (kg1, kg2) = load_pair(run, &data.pair)?;
    run.input("seeds", &data.seeds);
    let seeds = load_seeds(&data.seeds, &kg1, &kg2)?;
    Ok((kg1, kg2, seeds))
}

fn cmd_import(run: &mut Run, a: &ImportArgs) -> Result<(), Failure> {
    for (k, p) in [
        ("rel", &a.rel),
        ("attr", &a.attr),
        ("text_feats", &a.text_feats),
        ("image_feats", &a.image_feats),
    ] {
        run.input(k, p);
    }
    match load_mmkb(&a.rel, &a.attr, &a.text_feats, &a.image_feats) {
        Ok(kg) => {
            write_canonical(&kg, &run.output_dir)?;
            run.written(
                [
                    "entities.txt",
                    "relations.txt",
                    "triples.tsv",
                    "attributes.tsv",
                    "text_features.txt",
                    "image_features.txt",
                ]
                .map(String::from),
            );
            run.write("validation.txt", "0 violations\n")?;
            let stats = graph_stats("graph", &kg);
            print!("{stats}");
            run.write("stats.txt", &stats)
        }
        Err(Error::Validation(items)) => {
            let body: String = std::iter::once(format!("{} violation(s)\n", items.len()))
                .chain(items.iter().map(|i| format!("{i}\n")))
                .collect();
            run.write("validation.txt", &body)?;
            Err(Error::Validation(items).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_synth(run: &mut Run, a: &SynthArgs) -> Result<(), Failure> {
    let mut cfg = SyntheticConfig::default();
    if let Some(p) = &a.config {
        run.config_path = Some(p.clone());
        let text =
            fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        for (k, v) in config::parse_kv(&text, &p.display().to_string())? {
            config::synth_set(&mut cfg, &k, &v)?;
        }
    }
    let flags: [(&str, Option<String>); 12] = [
        ("entities", a.entities.map(|v| v.to_string())),
        ("relations", a.relations.map(|v| v.to_string())),
        ("degree", a.degree.map(|v| v.to_string())),
        ("text_attrs", a.text_attrs.clone()),
        ("image_attrs", a.image_attrs.clone()),
        ("gap_level", a.gap_level.map(|v| v.to_string())),
        ("image_gap_level", a.image_gap_level.map(|v| v.to_string())),
        ("missing_rate", a.missing_rate.map(|v| v.to_string())),
        ("noise", a.noise.map(|v| v.to_string())),
        ("text_dim", a.text_dim.map(|v| v.to_string())),
        ("image_dim", a.image_dim.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            config::synth_set(&mut cfg, k, &v)?;
        }
    }
    run.config = config::synth_kv(&cfg);
    let (kg1, kg2, seeds) = generate_synthetic(&cfg)?;
    write_canonical(&kg1, &run.path("kg1"))?;
    write_canonical(&kg2, &run.path("kg2"))?;
    for side in ["kg1", "kg2"] {
        run.written(
            [
                "entities.txt",
                "relations.txt",
                "triples.tsv",
                "attributes.tsv",
                "text_features.txt",
                "image_features.txt",
            ]
            .map(|f| format!("{side}/{f}")),
        );
    }
    write_seeds(&run.path("seeds.tsv"), &seeds, &kg1, &kg2)?;
    run.written(["seeds.tsv".to_string()]);
    run.write("synth.txt", &config::kv_text(&run.config))?;
    println!(
        "wrote {} aligned pairs to {}",
        seeds.len(),
        run.output_dir.display()
    );
    Ok(())
}

fn resolve(run: &mut Run, src: &ConfigSource) -> Result<TrainConfig, Failure> {
    run.config_path = src.config.clone();
    let cfg = config::train_config(&src.explicit()?)?;
    run.config = config::train_kv(&cfg);
    Ok(cfg)
}

const INIT_FILES: [&str; 4] = [
    "entities1.txt",
    "entities2.txt",
    "relations1.txt",
    "relations2.txt",
];

fn init_tables(
    run: &mut Run,
    init: Option<&PathBuf>,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    cfg: &TrainConfig,
) -> Result<InitTables, Failure> {
    let Some(dir) = init else {
        return Ok(InitTables::transe(kg1, kg2, seeds, cfg)?);
    };
    run.input("init", dir);
    let tables = InitTables {
        entities: [
            load_feature_table(&dir.join(INIT_FILES[0]), None)?,
            load_feature_table(&dir.join(INIT_FILES[1]), None)?,
        ],
        relations: [
            load_feature_table(&dir.join(INIT_FILES[2]), None)?,
            load_feature_table(&dir.join(INIT_FILES[3]), None)?,
        ],
    };
    for (kg, t) in [(kg1, &tables.entities[0]), (kg2, &tables.entities[1])] {
        if let Some(e) = kg.entity_ids().find(|e| t.get(e).is_none()) {
            return Err(Failure::Config(format!(
                "init table lacks entity {e} ({})",
                kg.entities[e.index()]
            )));
        }
    }
    Ok(tables)
}

fn split(seeds: &AlignmentSeedSet, cfg: &TrainConfig) -> Result<AlignmentSeedSet, Failure> {
    Ok(split_seeds(seeds, cfg.train_fraction, cfg.rng_seed)?)
}

fn cmd_init_transe(run: &mut Run, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = resolve(run, &a.cfg)?;
    let (kg1, kg2, seeds) = load_data(run, &a.data)?;
    let seeds = split(&seeds, &cfg)?;
    let t = InitTables::transe(&kg1, &kg2, &seeds, &cfg)?;
    run.ensure_dir()?;
    for (name, table) in INIT_FILES[..2].iter().zip(&t.entities) {
        table.write(&run.path(name))?;
    }
    for (name, table) in INIT_FILES[2..].iter().zip(&t.relations) {
        table.write(&run.path(name))?;
    }
    run.written(INIT_FILES.map(String::from));
    println!(
        "wrote TransE tables (dim {}) to {}",
        t.dim(),
        run.output_dir.display()
    );
    Ok(())
}

fn cmd_plan(run: &mut Run, a: &PlanArgs) -> Result<(), Failure> {
    run.input("kg", &a.kg);
    let kg = load_canonical(&a.kg)?;
    let plan = build_plan(&kg);
    plan.check(&kg)?;
    let mut s = String::from("modality,merge,generate,fallback,max_hop\n");
    for m in Modality::ALL {
        let c = plan.counts(m);
        let _ = writeln!(
            s,
            "{m},{},{},{},{}",
            c.merge, c.generate, c.fallback, c.max_hop
        );
    }
    print!("{s}");
    run.write("plan.csv", &s)
}

fn gap_histogram(
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &AlignmentSeedSet,
    m: Modality,
) -> Result<BTreeMap<usize, usize>, Failure> {
    let mut h = BTreeMap::new();
    for &p in &seeds.pairs {
        *h.entry(attribute_gap(kg1, kg2, p, m)?).or_insert(0) += 1;
    }
    Ok(h)
}

fn cmd_stats(run: &mut Run, a: &StatsArgs) -> Result<(), Failure> {
    let (kg1, kg2) = load_pair(run, &a.pair)?;
    let mut s = graph_stats("kg1", &kg1) + &graph_stats("kg2", &kg2);
    for (name, kg) in [("kg1", &kg1), ("kg2", &kg2)] {
        let report = validate(kg);
        let _ = writeln!(
            s,
            "{name}: {} validation violations",
            report.violations.len()
        );
    }
    if let Some(path) = &a.seeds {
        run.input("seeds", path);
        let seeds = load_seeds(path, &kg1, &kg2)?;
        let _ = writeln!(s, "pairs: {}", seeds.len());
        for m in Modality::ALL {
            let h = gap_histogram(&kg1, &kg2, &seeds, m)?;
            let cells: Vec<String> = h.iter().map(|(g, n)| format!("{g}:{n}")).collect();
            let _ = writeln!(s, "{m} gap histogram (gap:pairs): {}", cells.join(" "));
            let _ = writeln!(s, "{m} max gap: {}", h.keys().last().copied().unwrap_or(0));
        }
    }
    print!("{s}");
    run.write("stats.txt", &s)
}

fn report_csv(r: &EvalReport) -> String {
    format!(
        "mrr,hits1,hits10,count\n{},{},{},{}\n",
        r.mrr, r.hits1, r.hits10, r.count
    )
}

fn cmd_train(run: &mut Run, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = resolve(run, &a.cfg)?;
    let (kg1, kg2, seeds) = load_data(run, &a.data)?;
    let seeds = split(&seeds, &cfg)?;
    let init = init_tables(run, a.init.as_ref(), &kg1, &kg2, &seeds, &cfg)?;
    let out = train(&kg1, &kg2, &seeds, &init, &cfg)?;
    run.ensure_dir()?;
    out.final_checkpoint.save(&run.path("checkpoint.json"))?;
    out.best_checkpoint.save(&run.path("best.json"))?;
    run.written(["checkpoint.json".to_string(), "best.json".to_string()]);
    let mut loss = String::from("epoch,loss,entity,attribute,neighbor,validation\n");
    for (i, (l, c)) in out
        .loss_history
        .iter()
        .zip(&out.components_history)
        .enumerate()
    {
        let v = out
            .validation_history
            .get(i)
            .map(f64::to_string)
            .unwrap_or_default();
        let _ = writeln!(
            loss,
            "{},{l},{},{},{},{v}",
            i + 1,
            c.entity,
            c.attribute,
            c.neighbor
        );
    }
    run.write("loss.csv", &loss)?;
    run.write("config.txt", &cfg.to_kv_text())?;
    let report = evaluate(&out.best_checkpoint, &kg1, &kg2, &seeds.test_pairs())?;
    run.write("report.csv", &report_csv(&report))?;
    println!(
        "trained {} epochs (best {}{}), final loss {:.6}",
        out.loss_history.len(),
        out.best_epoch,
        if out.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        out.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    if out.zero_norm_rows > 0 {
        eprintln!(
            "note: {} cosine evaluations met a zero vector and counted as orthogonal",
            out.zero_norm_rows
        );
    }
    print!("{}", report.table());
    Ok(())
}

/// Checkpoint plus the eval-time overrides from the command line.
fn checkpoint_for_eval(run: &mut Run, a: &EvalArgs) -> Result<Checkpoint, Failure> {
    run.input("checkpoint", &a.checkpoint);
    run.config_path = a.cfg.config.clone();
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let requested = config::train_config(&a.cfg.explicit()?)?;
    let mut mismatches = Vec::new();
    for (k, _) in a.cfg.explicit()? {
        let key = if k == "seed" {
            "rng_seed".to_string()
        } else {
            k
        };
        let want = requested.get(&key).expect("validated key");
        match key.as_str() {
            "eval_candidate_set" | "bidirectional" => ckpt.config.set(&key, &want)?,
            _ => {
                let have = ckpt.config.get(&key).expect("known key");
                if have != want {
                    mismatches.push(format!("{key} = {want} but the checkpoint has {have}"));
                }
            }
        }
    }
    if !mismatches.is_empty() {
        mismatches.dedup();
        return Err(Failure::Config(format!(
            "config/checkpoint mismatch: {}",
            mismatches.join("; ")
        )));
    }
    run.config = config::train_kv(&ckpt.config);
    Ok(ckpt)
}

fn cmd_eval(run: &mut Run, a: &EvalArgs) -> Result<(), Failure> {
    let ckpt = checkpoint_for_eval(run, a)?;
    let (kg1, kg2, seeds) = load_data(run, &a.data)?;
    let seeds = split(&seeds, &ckpt.config)?;
    let report = evaluate(&ckpt, &kg1, &kg2, &seeds.test_pairs())?;
    print!("{}", report.table());
    run.write("report.csv", &report_csv(&report))
}

fn cmd_sweep(run: &mut Run, a: &SweepArgs) -> Result<(), Failure> {
    let cfg = resolve(run, &a.train.cfg)?;
    run.config.push((
        "sweep_rho".into(),
        a.rho
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    ));
    let (kg1, kg2, seeds) = load_data(run, &a.train.data)?;
    let seeds = split(&seeds, &cfg)?;
    let init = init_tables(run, a.train.init.as_ref(), &kg1, &kg2, &seeds, &cfg)?;
    let rows = sweep_dropout(&kg1, &kg2, &seeds, &init, &cfg, &a.rho)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    run.write("sweep.csv", &csv)
}

fn cmd_ablate(run: &mut Run, a: &AblateArgs) -> Result<(), Failure> {
    let cfg = resolve(run, &a.train.cfg)?;
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants
            .iter()
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()?
    };
    run.config.push((
        "ablate_variants".into(),
        variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(","),
    ));
    let (kg1, kg2, seeds) = load_data(run, &a.train.data)?;
    let seeds = split(&seeds, &cfg)?;
    let init = init_tables(run, a.train.init.as_ref(), &kg1, &kg2, &seeds, &cfg)?;
    let rows = ablate(&kg1, &kg2, &seeds, &init, &cfg, &variants)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    run.write("ablation.csv", &csv)
}

fn parse_buckets(specs: &[String]) -> Result<Vec<(usize, usize)>, Failure> {
    if specs.is_empty() {
        return Ok(mmea_core::eval::default_gap_buckets());
    }
    specs
        .iter()
        .map(|s| {
            let (lo, hi) = s.split_once('-').unwrap_or((s, s));
            let num = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Failure::Config(format!("bad bucket {s:?}; expected lo-hi")))
            };
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}

fn cmd_gap(run: &mut Run, a: &GapArgs) -> Result<(), Failure> {
    let buckets = parse_buckets(&a.buckets)?;
    let ckpt = checkpoint_for_eval(run, &a.eval)?;
    let (kg1, kg2, seeds) = load_data(run, &a.eval.data)?;
    let seeds = split(&seeds, &ckpt.config)?;
    let report = gap_bucket_eval(&ckpt, &kg1, &kg2, &seeds.test_pairs(), a.modality, &buckets)?;
    if report.out_of_range > 0 {
        eprintln!(
            "note: {} pairs have gaps outside every bucket",
            report.out_of_range
        );
    }
    let csv = report.to_csv();
    print!("{csv}");
    run.write("gap.csv", &csv)
}

fn cmd_config(run: &mut Run, a: &ConfigOnly) -> Result<(), Failure> {
    let cfg = resolve(run, &a.cfg)?;
    let text = cfg.to_kv_text();
    print!("{text}");
    run.write("config.txt", &text)
}
