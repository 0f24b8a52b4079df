mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use unitcraft::eval::{self, EvalConfig, SplitReport};
use unitcraft::model::{ModelConfig, UnitTransformer};
use unitcraft::offline_env::{self, StoreCache};
use unitcraft::pathing;
use unitcraft::scenegen::{self, Corpus, Split, SplitRatios};
use unitcraft::segmentation::{self, EdhInstance, StatsTable, UnitInstance};
use unitcraft::training::{self, EpochStats, GlobalStateMatrix, TrainMode, UnitTrace};
use unitcraft::world::{Grid, Pose, WorldConfig};
use unitcraft::{par, Error};

#[derive(Parser)]
#[command(name = "unitcraft", version, about = "Gridworld dialogue-task pipeline: generate, segment, snapshot, train, evaluate")]
struct Cli {
    /// key=value config file; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a corpus of sessions as JSON-lines.
    Gen(GenArgs),
    /// Cut sessions into units and EDH instances.
    Segment(SegmentArgs),
    /// Prebuild panorama stores for every unit.
    Snapshot(SnapshotArgs),
    /// Unit or EDH statistics per split.
    Stats(StatsArgs),
    /// Train a model on units.
    Train(TrainArgs),
    /// Closed-loop evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Check that sessions, and optionally their unit chains, replay.
    Replay(ReplayArgs),
    /// Parameter counts per named block.
    ModelInfo(ModelInfoArgs),
    /// Print an optimal pose path as text arrows.
    Path(PathArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    val_seen_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    val_unseen_ratio: f64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnapshotArgs {
    /// Directory written by `segment`.
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Splits to snapshot; all when omitted.
    #[arg(long)]
    split: Vec<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Unit,
    Edh,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory written by `segment`.
    #[arg(long)]
    units: PathBuf,
    #[arg(long, value_enum, default_value_t = Level::Unit)]
    level: Level,
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hybrid,
    TeacherOnly,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    units: PathBuf,
    /// Store directory; stores missing there are built and saved.
    #[arg(long)]
    stores: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Units per optimizer step.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalLevel {
    Edh,
    Session,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Splits to evaluate; all non-empty splits when omitted.
    #[arg(long)]
    split: Vec<String>,
    #[arg(long, value_enum, default_value_t = EvalLevel::Edh)]
    level: EvalLevel,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Writes metrics.csv and trajectories.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also check the unit chains written by `segment`.
    #[arg(long)]
    units: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInfoArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
}

#[derive(Args)]
struct PathArgs {
    /// Grid file, one row per line, '.' floor and '#' wall.
    #[arg(long)]
    grid: PathBuf,
    /// Start pose as x,y,heading,pitch.
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Validation(String),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                Error::Io(_) | Error::Json(_) | Error::StoreFormat(_) | Error::Checkpoint(_) => 3,
                Error::Config(_) => 2,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Validation(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    apply_flags(&cli.verb, &mut cfg)?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_kv(&text)?;
    }
    cfg.apply_env()?;
    match cli.verb {
        Verb::Gen(a) => gen(&a, &cfg),
        Verb::Segment(a) => segment(&a, &cfg),
        Verb::Snapshot(a) => snapshot(&a, &cfg),
        Verb::Stats(a) => stats(&a),
        Verb::Train(a) => train(&a, &cfg),
        Verb::Eval(a) => evaluate(&a, &cfg),
        Verb::Replay(a) => replay(&a, &cfg),
        Verb::ModelInfo(a) => model_info(&a, &cfg),
        Verb::Path(a) => path(&a),
    }
}

fn apply_flags(verb: &Verb, cfg: &mut RunConfig) -> CliResult<()> {
    match verb {
        Verb::Gen(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            cfg.corpus_dir = a.out.clone();
        }
        Verb::Segment(a) => cfg.corpus_dir = a.corpus.clone(),
        Verb::Snapshot(a) => cfg.store_dir = a.out.clone(),
        Verb::Train(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            let r = &mut cfg.train.rollout;
            if let Some(e) = a.epochs {
                r.epochs = e;
            }
            if let Some(lr) = a.lr {
                r.lr = lr;
            }
            if let Some(m) = a.mode {
                r.mode = match m {
                    ModeArg::Hybrid => TrainMode::Hybrid,
                    ModeArg::TeacherOnly => TrainMode::TeacherOnly,
                };
            }
            if let Some(j) = a.jobs {
                r.jobs = j;
            }
            if let Some(d) = a.d_model {
                cfg.train.model.d_model = d;
            }
            cfg.store_dir = a.stores.clone();
            cfg.checkpoint_dir = a.out.clone();
        }
        Verb::Eval(a) => {
            cfg.corpus_dir = a.corpus.clone();
            cfg.log_dir = a.out.clone();
        }
        Verb::Replay(a) => cfg.corpus_dir = a.corpus.clone(),
        Verb::ModelInfo(a) => {
            if let Some(d) = a.d_model {
                cfg.train.model.d_model = d;
            }
        }
        Verb::Stats(_) | Verb::Path(_) => {}
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config)")))
}

fn world() -> WorldConfig {
    WorldConfig::default()
}

fn parse_splits(names: &[String]) -> CliResult<Vec<Split>> {
    if names.is_empty() {
        return Ok(Split::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| Split::from_name(n).ok_or_else(|| CliError::Usage(format!("unknown split {n}"))))
        .collect()
}

fn units_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.units.jsonl", split.name()))
}

fn edh_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.edh.jsonl", split.name()))
}

fn load_units(dir: &Path, split: Split) -> CliResult<Vec<UnitInstance>> {
    Ok(scenegen::read_jsonl(&units_file(dir, split))?)
}

fn gen(a: &GenArgs, cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.corpus_dir, "--out")?;
    cfg.ensure_dirs()?;
    let ratios = SplitRatios {
        train: a.train_ratio,
        val_seen: a.val_seen_ratio,
        val_unseen: a.val_unseen_ratio,
    };
    let corpus = scenegen::generate_corpus(&cfg.gen, a.n, ratios)?;
    corpus.write(out)?;
    let s = |sp| corpus.split(sp).len();
    println!(
        "wrote {} sessions to {} (train {}, val_seen {}, val_unseen {})",
        a.n,
        out.display(),
        s(Split::Train),
        s(Split::ValSeen),
        s(Split::ValUnseen)
    );
    Ok(())
}

fn segment(a: &SegmentArgs, cfg: &RunConfig) -> CliResult<()> {
    let corpus = Corpus::read(required(&cfg.corpus_dir, "--corpus")?)?;
    std::fs::create_dir_all(&a.out)?;
    let wc = world();
    let mut chains: BTreeMap<&str, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    for split in Split::ALL {
        let mut units = Vec::new();
        let mut edh = Vec::new();
        let chain = chains.entry(split.name()).or_default();
        for s in corpus.split(split) {
            let u = segmentation::segment_units(s, &wc)?;
            chain.insert(s.session_id.clone(), u.iter().map(|u| u.unit_id.key()).collect());
            units.extend(u);
            edh.extend(segmentation::segment_edh(s, &wc)?);
        }
        scenegen::write_jsonl(&units_file(&a.out, split), &units)?;
        scenegen::write_jsonl(&edh_file(&a.out, split), &edh)?;
        println!("{}: {} units, {} edh instances", split.name(), units.len(), edh.len());
    }
    let mut f = std::fs::File::create(a.out.join("chains.json"))?;
    serde_json::to_writer_pretty(&mut f, &chains).map_err(Error::from)?;
    std::io::Write::write_all(&mut f, b"\n")?;
    Ok(())
}

fn snapshot(a: &SnapshotArgs, cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.store_dir, "--out")?;
    cfg.ensure_dirs()?;
    let wc = world();
    let mut total = 0;
    for split in parse_splits(&a.split)? {
        let units = load_units(&a.units, split)?;
        let stores = par::with_jobs(a.jobs, || offline_env::build_stores(&units, &wc))??;
        for s in &stores {
            s.save(&offline_env::store_path(out, &s.unit_id))?;
        }
        let views: usize = stores.iter().map(|s| s.len()).sum();
        println!("{}: {} stores, {} views", split.name(), stores.len(), views);
        total += stores.len();
    }
    println!("wrote {total} stores to {}", out.display());
    Ok(())
}

fn stats(a: &StatsArgs) -> CliResult<()> {
    let mut columns = Vec::new();
    for split in Split::ALL {
        let report = match a.level {
            Level::Unit => {
                let u = load_units(&a.units, split)?;
                if u.is_empty() {
                    continue;
                }
                segmentation::corpus_stats(&u)?
            }
            Level::Edh => {
                let e: Vec<EdhInstance> = scenegen::read_jsonl(&edh_file(&a.units, split))?;
                if e.is_empty() {
                    continue;
                }
                segmentation::corpus_stats(&e)?
            }
        };
        columns.push((split.name().to_string(), report));
    }
    let table = StatsTable {
        level: match a.level {
            Level::Unit => "Unit".into(),
            Level::Edh => "EDH".into(),
        },
        columns,
    };
    print!("{}", if a.csv { table.to_csv() } else { table.to_text() });
    Ok(())
}

fn train(a: &TrainArgs, cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.checkpoint_dir, "--out")?.to_path_buf();
    cfg.ensure_dirs()?;
    let split = Split::from_name(&a.split).ok_or_else(|| CliError::Usage(format!("unknown split {}", a.split)))?;
    let units = load_units(&a.units, split)?;
    let tc = cfg.train;
    let mut model = UnitTransformer::new(tc.model)?;
    let cache = match &cfg.store_dir {
        Some(d) => StoreCache::on_disk(d, world()),
        None => StoreCache::in_memory(world()),
    };
    let matrix = GlobalStateMatrix::new();
    let every = tc.checkpoint_every;
    let mut hook = |e: &EpochStats, m: &UnitTransformer, _: &[UnitTrace]| -> unitcraft::Result<()> {
        println!("epoch {:>3}  loss {:.6}  reached {:.3}", e.epoch, e.mean_loss, e.reached_fraction);
        if every > 0 && e.epoch % every == 0 {
            m.save(&out.join(format!("epoch-{:04}.uckp", e.epoch)))?;
        }
        Ok(())
    };
    let report = training::train_corpus(&mut model, &units, &cache, &matrix, &tc.rollout, Some(&mut hook), None)?;
    model.save(&out.join("model.uckp"))?;
    std::fs::write(out.join("loss.csv"), report.to_csv())?;
    std::fs::write(out.join("train.cfg"), tc.to_kv())?;
    println!("wrote {}", out.join("model.uckp").display());
    Ok(())
}

fn evaluate(a: &EvalArgs, cfg: &RunConfig) -> CliResult<()> {
    let corpus = Corpus::read(required(&cfg.corpus_dir, "--corpus")?)?;
    let model = UnitTransformer::load(&a.checkpoint)?;
    let ec = EvalConfig::default();
    let explicit = !a.split.is_empty();
    let mut reports: Vec<SplitReport> = Vec::new();
    let mut records = Vec::new();
    for split in parse_splits(&a.split)? {
        let mut inst = Vec::new();
        for s in corpus.split(split) {
            match a.level {
                EvalLevel::Edh => inst.extend(segmentation::segment_edh(s, &ec.world)?),
                EvalLevel::Session => inst.push(segmentation::whole_session(s, &ec.world)?),
            }
        }
        let inst = eval::scorable(&inst);
        if inst.is_empty() {
            if explicit {
                return Err(CliError::Validation(format!("split {} has no scorable instances", split.name())));
            }
            continue;
        }
        let (report, recs) = par::with_jobs(a.jobs, || eval::evaluate_split(&model, split.name(), &inst, &ec))??;
        reports.push(report);
        records.extend(recs);
    }
    if reports.is_empty() {
        return Err(CliError::Validation("no scorable instances".into()));
    }
    print!("{}", eval::format_table(&reports));
    if let Some(dir) = &cfg.log_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), eval::reports_csv(&reports))?;
        std::fs::write(dir.join("trajectories.jsonl"), eval::trajectories_jsonl(&records)?)?;
    }
    Ok(())
}

fn replay(a: &ReplayArgs, cfg: &RunConfig) -> CliResult<()> {
    let corpus = Corpus::read(required(&cfg.corpus_dir, "--corpus")?)?;
    let wc = world();
    let mut failures = Vec::new();
    let mut checked = 0;
    for split in Split::ALL {
        let units = match &a.units {
            Some(d) => Some(load_units(d, split)?),
            None => None,
        };
        let mut by_session: BTreeMap<&str, Vec<&UnitInstance>> = BTreeMap::new();
        for u in units.iter().flatten() {
            by_session.entry(u.unit_id.session_id.as_str()).or_default().push(u);
        }
        for s in corpus.split(split) {
            checked += 1;
            if let Err(e) = s.validate(&wc) {
                failures.push(format!("{}: {e}", s.session_id));
                continue;
            }
            if units.is_some() {
                let chain = by_session.remove(s.session_id.as_str()).unwrap_or_default();
                if let Err(m) = check_chain(s, &chain, &wc) {
                    failures.push(format!("{}: {m}", s.session_id));
                }
            }
        }
        for orphan in by_session.keys() {
            failures.push(format!("{orphan}: units without a session"));
        }
    }
    for f in &failures {
        println!("FAIL {f}");
    }
    println!("{} sessions checked, {} failed", checked, failures.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} sessions failed replay", failures.len())))
    }
}

fn check_chain(s: &scenegen::Session, chain: &[&UnitInstance], wc: &WorldConfig) -> std::result::Result<(), String> {
    if chain.is_empty() {
        return Err("no units".into());
    }
    let mut state = s.scene.clone();
    let mut actions = Vec::new();
    for (i, u) in chain.iter().enumerate() {
        if u.unit_id.index != i {
            return Err(format!("unit {} out of order", u.unit_id));
        }
        if u.initial_state != state {
            return Err(format!("unit {} does not start where its predecessor ended", u.unit_id));
        }
        state = u.replay(wc).map_err(|e| format!("unit {}: {e}", u.unit_id))?;
        let n = u.actions.len() - usize::from(u.synthesized_stop);
        actions.extend(u.actions[..n].iter().cloned());
    }
    if actions != s.demo_actions {
        return Err("concatenated unit actions differ from the demonstration".into());
    }
    if state != s.final_state {
        return Err("chain ends in a different state".into());
    }
    Ok(())
}

fn model_info(a: &ModelInfoArgs, cfg: &RunConfig) -> CliResult<()> {
    let model = match &a.checkpoint {
        Some(p) => UnitTransformer::load(p)?,
        None => {
            let mc: ModelConfig = cfg.train.model;
            UnitTransformer::new(mc)?
        }
    };
    let counts = model.block_counts();
    let w = counts.keys().map(|k| k.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    for (block, n) in &counts {
        let _ = writeln!(out, "{block:<w$}  {n:>9}");
    }
    let _ = writeln!(out, "{:<w$}  {:>9}", "total", counts.values().sum::<usize>());
    print!("{out}");
    Ok(())
}

fn parse_pose(s: &str) -> CliResult<Pose> {
    let v: Vec<i32> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad pose {s}: expected x,y,heading,pitch")))?;
    match v[..] {
        [x, y, h, p] => Ok(Pose::new(x, y, h, p)),
        _ => Err(CliError::Usage(format!("bad pose {s}: expected x,y,heading,pitch"))),
    }
}

fn path(a: &PathArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.grid)?;
    let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let grid = Grid::from_rows(&rows)?;
    let p = pathing::optimal_path(&grid, parse_pose(&a.from)?, parse_pose(&a.to)?)?;
    println!("cost {}", p.cost);
    println!("{}", p.arrows());
    Ok(())
}
