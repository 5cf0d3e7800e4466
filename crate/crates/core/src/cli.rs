//! Command-line front end.
//!
//! Settings resolve as built-in defaults, then the `--config` file, then
//! flags. Every output is a pure function of the inputs and `--seed`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cfm::{sway_time_grid, SolverConfig};
use crate::conditioning::LanguageId;
use crate::corpus::{
    curate_benchmark, filter_training, rank_top_hours, read_jsonl, write_jsonl, write_report,
    BenchmarkPair, Clip, CorpusRecord, CurationConfig, FilterConfig, LangPolicy, RatePolicy,
    ScorerSuite,
};
use crate::eval::{eval_cases, evaluate, EvalCase};
use crate::features::FeatureSequence;
use crate::field_net::{
    sample, train_stage1, train_stage2, Checkpoint, PromptText, SampleRequest, TrainConfig,
    TrainLog,
};
use crate::guidance::{schedule_dump, write_schedule_csv, GuidanceConfig, GuidanceMode};
use crate::infill::Stage;
use crate::pairs::{make_pairs, PairConfig, PairRecord};
use crate::phonemes::builtin_lexica;
use crate::seed;
use crate::toy::{gen_corpus, ToyWorld, WorldSpec};

/// Environment variable naming the default data directory.
pub const HOME_VAR: &str = "XVOICE_TOY_HOME";
const DEFAULT_HOME: &str = "xvoice-toy";

#[derive(Debug, Parser)]
#[command(
    name = "xvoice",
    version,
    about = "Flow-matching voice synthesis on a toy acoustic world"
)]
pub struct Cli {
    /// JSON file with `train`, `guidance`, `solver`, `filter`, `curation` and `world` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for record and sample parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy world, its corpus and text pool.
    GenToy(GenToyArgs),
    /// Run the training filter, or benchmark curation with `--benchmark`.
    Filter(FilterArgs),
    /// Curate benchmark pairs.
    Curate(CurateArgs),
    /// Keep the best-scored records up to an hour budget per language.
    Rank(RankArgs),
    /// Train the transcript-conditioned model.
    TrainStage1(TrainStage1Args),
    /// Synthesise prompts for real records with a stage-1 checkpoint.
    MakePairs(MakePairsArgs),
    /// Fine-tune on synthetic/real pairs without prompt transcripts.
    TrainStage2(TrainStage2Args),
    /// Generate features for a text in a prompt's voice.
    Sample(SampleArgs),
    /// Print the guidance strengths at each solver step as CSV.
    ScheduleDump(ScheduleArgs),
    /// Score generations against toy ground truth.
    EvalToy(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub utterances_per_lang: usize,
    #[arg(long, default_value_t = 200)]
    pub text_pool_size: usize,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Corpus manifest, or benchmark pair manifest with `--benchmark`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lang_policy: Option<PathBuf>,
    #[arg(long)]
    pub quality_threshold: Option<f64>,
    #[arg(long)]
    pub dedup_limit: Option<usize>,
    #[arg(long)]
    pub benchmark: bool,
    /// World whose lexica and prototypes back the toy scorers.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the surviving rows here.
    #[arg(long)]
    pub accepted: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub accepted: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub budget_hours: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub drop_audio_p: Option<f64>,
    #[arg(long)]
    pub drop_all_p: Option<f64>,
    /// Write per-step losses as JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainStage1Args {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ablation: train without language-ID injection.
    #[arg(long)]
    pub no_injection: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Default)]
pub struct SamplingFlags {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<GuidanceMode>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub w_a: Option<f64>,
    #[arg(long)]
    pub w_l: Option<f64>,
    #[arg(long)]
    pub t_warm: Option<f64>,
    #[arg(long)]
    pub t_decay: Option<f64>,
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub sway: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MakePairsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub budget_hours: f64,
    #[arg(long)]
    pub text_pool: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Directory for `pairs.jsonl` and the synthetic prompts.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct TrainStage2Args {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Prompt features (binary).
    #[arg(long)]
    pub prompt: PathBuf,
    /// Prompt transcript; required by stage-1 checkpoints, refused by stage-2 ones.
    #[arg(long)]
    pub prompt_text: Option<String>,
    /// Prompt language; defaults to `--lang`.
    #[arg(long)]
    pub prompt_lang: Option<String>,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub lang: String,
    /// Output features; JSON when the extension is `.json`, binary otherwise.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Prompt manifest; defaults to the held-out split.
    #[arg(long, conflicts_with = "pairs")]
    pub manifest: Option<PathBuf>,
    /// Use the synthetic prompts of a paired manifest instead.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long)]
    pub cross_lingual: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown guidance mode {s:?} (joint, decoupled, decoupled_a_warmup)"))
}

/// Contents of `--config`; absent sections and fields keep their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub solver: SolverConfig,
    pub filter: FilterConfig,
    pub curation: CurationConfig,
    pub world: WorldSpec,
}

struct Ctx {
    cfg: FileConfig,
    seed: u64,
    jobs: usize,
}

impl Ctx {
    fn train(&self, f: &TrainFlags) -> TrainConfig {
        let mut t = self.cfg.train;
        t.seed = self.seed;
        set(&mut t.steps, f.steps);
        set(&mut t.batch_size, f.batch_size);
        set(&mut t.lr_peak, f.lr_peak);
        set(&mut t.warmup_steps, f.warmup_steps);
        set(&mut t.weight_decay, f.weight_decay);
        set(&mut t.cond_drop_audio_p, f.drop_audio_p);
        set(&mut t.cond_drop_all_p, f.drop_all_p);
        t
    }

    fn sampling(&self, f: &SamplingFlags) -> (GuidanceConfig, SolverConfig) {
        let (mut g, mut s) = (self.cfg.guidance, self.cfg.solver);
        set(&mut g.mode, f.mode);
        set(&mut g.w, f.w);
        set(&mut g.w_a_start, f.w_a);
        set(&mut g.w_l_start, f.w_l);
        set(&mut g.t_warm, f.t_warm);
        set(&mut g.t_decay, f.t_decay);
        set(&mut s.nfe, f.nfe);
        set(&mut s.sway_coefficient, f.sway);
        (g, s)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// `$XVOICE_TOY_HOME`, or `./xvoice-toy`.
pub fn toy_home() -> PathBuf {
    std::env::var_os(HOME_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_HOME))
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn world_at(explicit: Option<&PathBuf>, near: &Path) -> anyhow::Result<ToyWorld> {
    let path = explicit
        .cloned()
        .unwrap_or_else(|| parent(near).join("world.json"));
    ToyWorld::load(&path).with_context(|| format!("loading world {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&PathBuf>, body: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(body)?),
    }
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    let dir = parent(p);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    Ok(())
}

/// Feature paths in a manifest are relative to the manifest's directory.
fn load_features(rec: &CorpusRecord, dir: &Path, rate: f64) -> anyhow::Result<FeatureSequence> {
    let rel = rec
        .features
        .as_ref()
        .with_context(|| format!("record {:?} has no features", rec.id))?;
    let path = dir.join(rel);
    FeatureSequence::load(&path, rate).with_context(|| format!("loading {}", path.display()))
}

fn load_clips(manifest: &Path, rate: f64) -> anyhow::Result<Vec<Clip>> {
    let dir = parent(manifest);
    read_jsonl::<CorpusRecord>(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?
        .into_iter()
        .map(|record| {
            Ok(Clip {
                features: load_features(&record, &dir, rate)?,
                record,
            })
        })
        .collect()
}

/// Rewrites a record's feature path from `from` to be relative to `to`.
fn rebase(rec: &CorpusRecord, from: &Path, to: &Path) -> anyhow::Result<CorpusRecord> {
    let mut rec = rec.clone();
    if let Some(rel) = &rec.features {
        let abs = fs::canonicalize(from.join(rel)).with_context(|| format!("resolving {rel}"))?;
        let base = fs::canonicalize(if to.as_os_str().is_empty() {
            Path::new(".")
        } else {
            to
        })?;
        let rel =
            pathdiff::diff_paths(&abs, &base).context("no relative path between manifests")?;
        rec.features = Some(rel.to_string_lossy().into_owned());
    }
    Ok(rec)
}

/// One row of a benchmark pair manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub id: String,
    pub prompt: CorpusRecord,
    pub truth: CorpusRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg: FileConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let jobs = cli.jobs.or(cfg.jobs).unwrap_or(1).max(1);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global();
    let ctx = Ctx { cfg, seed, jobs };
    match cli.command {
        Command::GenToy(a) => gen_toy(&ctx, a, cli.seed),
        Command::Filter(a) if a.benchmark => curate(
            &ctx,
            CurateArgs {
                manifest: a.manifest,
                world: a.world,
                out: a.out,
                accepted: a.accepted,
            },
        ),
        Command::Filter(a) => filter(&ctx, a),
        Command::Curate(a) => curate(&ctx, a),
        Command::Rank(a) => rank(a),
        Command::TrainStage1(a) => stage1(&ctx, a),
        Command::MakePairs(a) => pairs(&ctx, a),
        Command::TrainStage2(a) => stage2(&ctx, a),
        Command::Sample(a) => sample_cmd(&ctx, a),
        Command::ScheduleDump(a) => schedule(&ctx, a),
        Command::EvalToy(a) => eval_toy(&ctx, a),
    }
}

fn gen_toy(ctx: &Ctx, a: GenToyArgs, seed_flag: Option<u64>) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(toy_home);
    let mut spec = ctx.cfg.world.clone();
    set(&mut spec.seed, seed_flag.or(ctx.cfg.seed));
    let world = ToyWorld::new(spec)?;
    let corpus = gen_corpus(&world, a.utterances_per_lang, a.text_pool_size)?;
    fs::create_dir_all(out.join("features"))?;
    world.save_spec(&out.join("world.json"))?;
    for (name, clips) in [
        ("train.jsonl", &corpus.train),
        ("heldout.jsonl", &corpus.heldout),
    ] {
        let mut rows = Vec::with_capacity(clips.len());
        for c in clips {
            let rel = format!("features/{}.xvft", c.record.id);
            c.features.save(&out.join(&rel))?;
            rows.push(CorpusRecord {
                features: Some(rel),
                ..c.record.clone()
            });
        }
        write_jsonl(&out.join(name), &rows)?;
    }
    write_json(&out.join("text_pool.json"), &corpus.text_pool)?;
    let policy: LangPolicy = world
        .spec
        .languages
        .iter()
        .map(|l| (l.clone(), RatePolicy::Iqr))
        .collect();
    write_json(&out.join("lang_policy.json"), &policy)?;
    println!(
        "{} training and {} held-out utterances in {}",
        corpus.train.len(),
        corpus.heldout.len(),
        out.display()
    );
    Ok(())
}

fn scorers(world: Option<&PathBuf>) -> anyhow::Result<(ScorerSuite, f64)> {
    match world {
        Some(p) => {
            let w = ToyWorld::load(p).with_context(|| format!("loading world {}", p.display()))?;
            Ok((w.scorers(), w.spec.frame_rate_hz))
        }
        None => Ok((
            ScorerSuite::toy(builtin_lexica(), None),
            WorldSpec::default().frame_rate_hz,
        )),
    }
}

fn filter(ctx: &Ctx, a: FilterArgs) -> anyhow::Result<()> {
    let records: Vec<CorpusRecord> =
        read_jsonl(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let policy: LangPolicy = match &a.lang_policy {
        Some(p) => read_json(p)?,
        None => records
            .iter()
            .map(|r| (r.lang.clone(), RatePolicy::default()))
            .collect(),
    };
    let mut cfg = ctx.cfg.filter;
    if a.quality_threshold.is_some() {
        cfg.quality_threshold = a.quality_threshold;
    }
    set(&mut cfg.dedup_limit, a.dedup_limit);
    let (suite, _) = scorers(a.world.as_ref())?;
    let report = filter_training(&records, &policy, &suite, &cfg)?;
    let mut buf = Vec::new();
    write_report(&mut buf, &report)?;
    emit(a.out.as_ref(), &buf)?;
    if let Some(path) = &a.accepted {
        ensure_parent(path)?;
        let keep: std::collections::BTreeSet<&str> =
            report.accepted.iter().map(String::as_str).collect();
        let (from, to) = (parent(&a.manifest), parent(path));
        let rows = records
            .iter()
            .filter(|r| keep.contains(r.id.as_str()))
            .map(|r| rebase(r, &from, &to))
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_jsonl(path, &rows)?;
    }
    Ok(())
}

fn curate(ctx: &Ctx, a: CurateArgs) -> anyhow::Result<()> {
    let rows: Vec<BenchmarkRow> =
        read_jsonl(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let (suite, rate) = scorers(a.world.as_ref())?;
    let dir = parent(&a.manifest);
    let pairs = rows
        .iter()
        .map(|r| {
            Ok(BenchmarkPair {
                id: r.id.clone(),
                prompt: Clip {
                    features: load_features(&r.prompt, &dir, rate)?,
                    record: r.prompt.clone(),
                },
                truth: Clip {
                    features: load_features(&r.truth, &dir, rate)?,
                    record: r.truth.clone(),
                },
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (report, kept) = curate_benchmark(&pairs, &suite, &ctx.cfg.curation)?;
    let mut buf = Vec::new();
    write_report(&mut buf, &report)?;
    emit(a.out.as_ref(), &buf)?;
    if let Some(path) = &a.accepted {
        ensure_parent(path)?;
        let to = parent(path);
        let out = kept
            .iter()
            .map(|p| {
                Ok(BenchmarkRow {
                    id: p.id.clone(),
                    prompt: rebase(&p.prompt.record, &dir, &to)?,
                    truth: rebase(&p.truth.record, &dir, &to)?,
                    similarity: Some(p.similarity),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_jsonl(path, &out)?;
    }
    Ok(())
}

fn rank(a: RankArgs) -> anyhow::Result<()> {
    let records: Vec<CorpusRecord> =
        read_jsonl(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    ensure_parent(&a.out)?;
    let (from, to) = (parent(&a.manifest), parent(&a.out));
    let rows = rank_top_hours(&records, a.budget_hours)?
        .iter()
        .map(|r| rebase(r, &from, &to))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_jsonl(&a.out, &rows)?;
    Ok(())
}

fn finish_training(
    ckpt: &Checkpoint,
    log: &TrainLog,
    out: &Path,
    log_path: Option<&PathBuf>,
) -> anyhow::Result<()> {
    ensure_parent(out)?;
    ckpt.save(out)?;
    if let Some(p) = log_path {
        write_json(p, log)?;
    }
    let last = log.step_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "eval loss {:.6} -> {:.6}, last step loss {last:.6}",
        log.eval_initial, log.eval_final
    );
    Ok(())
}

fn stage1(ctx: &Ctx, a: TrainStage1Args) -> anyhow::Result<()> {
    let manifest = a.manifest.unwrap_or_else(|| toy_home().join("train.jsonl"));
    let world = world_at(a.world.as_ref(), &manifest)?;
    let clips = load_clips(&manifest, world.spec.frame_rate_hz)?;
    let init = Checkpoint::init(
        world.vocabulary(),
        world.language_table(),
        world.spec.feat_dim,
        !a.no_injection,
        seed::sub_seed(ctx.seed, "init"),
    );
    let utts = clips
        .iter()
        .map(|c| world.train_utterance(c, &init.vocab))
        .collect::<crate::Result<Vec<_>>>()?;
    let (ckpt, log) = train_stage1(&init, &utts, &ctx.train(&a.train))?;
    finish_training(&ckpt, &log, &a.out, a.train.log.as_ref())
}

fn pairs(ctx: &Ctx, a: MakePairsArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let world = world_at(a.world.as_ref(), &a.manifest)?;
    let clips = load_clips(&a.manifest, world.spec.frame_rate_hz)?;
    let pool: BTreeMap<String, Vec<String>> = read_json(&a.text_pool)?;
    let (guidance, solver) = ctx.sampling(&a.sampling);
    let cfg = PairConfig {
        per_lang_budget_hours: a.budget_hours,
        guidance,
        solver,
        seed: ctx.seed,
        jobs: ctx.jobs,
    };
    let made = make_pairs(&ckpt, &world, &clips, &pool, &cfg)?;
    fs::create_dir_all(a.out.join("prompts"))?;
    let from = parent(&a.manifest);
    let mut rows: Vec<PairRecord> = Vec::with_capacity(made.len());
    for p in &made {
        let rel = format!("prompts/{}.xvft", p.id);
        p.prompt.save(&a.out.join(&rel))?;
        let target = rebase(&p.target.record, &from, &a.out)?;
        rows.push(p.record(rel, target.features.context("target without features")?));
    }
    write_jsonl(&a.out.join("pairs.jsonl"), &rows)?;
    println!("{} pairs in {}", rows.len(), a.out.display());
    Ok(())
}

/// Synthetic prompts and real targets of a paired manifest, as clips whose
/// record is the target's (speaker and language of the prompt).
fn load_pairs(
    path: &Path,
    rate: f64,
) -> anyhow::Result<Vec<(PairRecord, FeatureSequence, FeatureSequence)>> {
    let dir = parent(path);
    read_jsonl::<PairRecord>(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_iter()
        .map(|r| {
            let pp = dir.join(&r.prompt_features);
            let prompt = FeatureSequence::load(&pp, rate)
                .with_context(|| format!("loading {}", pp.display()))?;
            let tp = dir.join(&r.target_features);
            let target = FeatureSequence::load(&tp, rate)
                .with_context(|| format!("loading {}", tp.display()))?;
            Ok((r, prompt, target))
        })
        .collect()
}

fn stage2(ctx: &Ctx, a: TrainStage2Args) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let world = world_at(a.world.as_ref(), &a.pairs)?;
    let pairs = load_pairs(&a.pairs, world.spec.frame_rate_hz)?
        .into_iter()
        .map(|(r, prompt, features)| {
            let target = world.train_utterance(
                &Clip {
                    record: r.target_record(&features),
                    features,
                },
                &ckpt.vocab,
            )?;
            Ok(crate::field_net::TrainPair {
                id: r.id,
                prompt,
                target,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (out, log) = train_stage2(&ckpt, &pairs, &ctx.train(&a.train))?;
    finish_training(&out, &log, &a.out, a.train.log.as_ref())
}

fn sample_cmd(ctx: &Ctx, a: SampleArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let world = world_at(a.world.as_ref(), &a.ckpt)?;
    let prompt = FeatureSequence::load(&a.prompt, world.spec.frame_rate_hz)
        .with_context(|| format!("loading {}", a.prompt.display()))?;
    let tl = world.lang_index(&a.lang)?;
    let pl = world.lang_index(a.prompt_lang.as_deref().unwrap_or(&a.lang))?;
    let prompt_text = match &a.prompt_text {
        Some(t) => Some(PromptText {
            ids: ckpt.vocab.encode(&world.tokenize(pl, t)?)?,
            lid: LanguageId::Lang(pl as u16),
        }),
        None => None,
    };
    let req = SampleRequest {
        prompt,
        prompt_text,
        target_ids: ckpt.vocab.encode(&world.tokenize(tl, &a.text)?)?,
        target_lid: LanguageId::Lang(tl as u16),
    };
    let (guidance, solver) = ctx.sampling(&a.sampling);
    let out = sample(
        &ckpt,
        &req,
        &guidance,
        &solver,
        seed::sub_seed(ctx.seed, "cli.sample"),
    )?;
    ensure_parent(&a.out)?;
    out.save(&a.out)?;
    Ok(())
}

fn schedule(ctx: &Ctx, a: ScheduleArgs) -> anyhow::Result<()> {
    let (guidance, solver) = ctx.sampling(&a.sampling);
    guidance.validate()?;
    let grid = sway_time_grid(&solver)?;
    // one row per solver step, at the time the field is evaluated
    let rows = schedule_dump(&guidance, &grid[..grid.len() - 1])?;
    let mut buf = Vec::new();
    write_schedule_csv(&mut buf, &rows)?;
    emit(a.out.as_ref(), &buf)
}

fn eval_toy(ctx: &Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let (guidance, solver) = ctx.sampling(&a.sampling);
    let near = match (&a.pairs, &a.manifest) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => toy_home().join("heldout.jsonl"),
    };
    let world = world_at(a.world.as_ref(), &near)?;
    let rate = world.spec.frame_rate_hz;
    let prompts = if a.pairs.is_some() {
        if ckpt.stage == Stage::S1 {
            bail!("synthetic prompts carry no transcript; use a stage-2 checkpoint");
        }
        load_pairs(&near, rate)?
            .into_iter()
            .map(|(r, features, target)| Clip {
                record: r.target_record(&target),
                features,
            })
            .collect()
    } else {
        load_clips(&near, rate)?
    };
    let cases: Vec<EvalCase> = eval_cases(
        &world,
        &prompts,
        a.cases,
        a.cross_lingual,
        seed::sub_seed(ctx.seed, "cli.cases"),
    )?;
    let summary = evaluate(
        &ckpt,
        &world,
        &cases,
        &guidance,
        &solver,
        seed::sub_seed(ctx.seed, "cli.eval"),
    )?;
    #[derive(Serialize)]
    struct Out {
        cases: usize,
        correct_language_rate: f64,
        mean_prototype_distance: f64,
        offset_cosine: f64,
        contested_tokens: usize,
        tokens: usize,
    }
    let out = Out {
        cases: summary.cases,
        correct_language_rate: summary.language.rate(),
        mean_prototype_distance: summary.language.mean_distance(),
        offset_cosine: summary.offset_cosine,
        contested_tokens: summary.language.contested,
        tokens: summary.language.tokens,
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    emit(a.out.as_ref(), text.as_bytes())
}
