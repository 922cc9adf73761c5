use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentprobe::activation_store::{ActivationStore, LatentProfile, RejectedLine, UnscoreableLatent};
use latentprobe::annotation_service::{self, AnnotationService, ServiceOptions};
use latentprobe::embedding_scorer::{
    decile_pair_matrix, score_profile, Embedder, EmbeddingConfig, HashingEmbedder, HttpEmbedder,
    PrecomputedEmbeddings, DEFAULT_EMBEDDING_MODEL,
};
use latentprobe::llm_evaluator::{self, EvaluatorConfig, API_KEY_VARS};
use latentprobe::scoring_stats::{agreement_table, score_report, ScoreLine, ScoreReport, ScoreSet};
use latentprobe::seeding::{mix_str, rng_from};
use latentprobe::synthetic_bench::{
    generate_corpus, oracle_evaluate_all, random_evaluate_all, read_bench, write_bench,
    write_corpus, BenchSpec,
};
use latentprobe::task_builder::{build_batch, build_decile_sweep, BatchConfig, SkippedTask, TaskVariant};
use latentprobe::{jsonl, IntruderTask, Verdict};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "latentprobe", version, about = "Intruder detection and example-embedding scoring for SAE latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize, Deserialize, Debug, Clone)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic corpus with planted latents.
    Synth(SynthArgs),
    /// Compute decile profiles for every latent of an activation dump.
    Profile(ProfileArgs),
    /// Build intruder tasks.
    BuildTasks(BuildTasksArgs),
    /// Ask an OpenAI-compatible chat endpoint to solve tasks.
    EvalLlm(EvalLlmArgs),
    /// Ground-truth answers for tasks built from a synthetic corpus.
    EvalOracle(EvalOracleArgs),
    /// Uniformly random answers.
    EvalRandom(EvalRandomArgs),
    /// Example-embedding AUROC per latent.
    ScoreEmbedding(ScoreEmbeddingArgs),
    /// Scores, bins, decile matrices and agreement tables.
    Stats(StatsArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Re-run a command from its config snapshot.
    #[serde(skip)]
    Rerun {
        /// Snapshot written by an earlier run.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct SynthArgs {
    /// Output directory for corpus.jsonl and bench.json.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bench description; overrides the latent counts below.
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    monosemantic: usize,
    #[arg(long, default_value_t = 10)]
    scalar: usize,
    #[arg(long, default_value_t = 20)]
    noise: usize,
    /// Activating contexts per latent.
    #[arg(long, default_value_t = 120)]
    contexts: usize,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct ProfileArgs {
    /// Activation dump (JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct BuildTasksArgs {
    /// Activation dump (JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    tasks_per_latent: usize,
    #[arg(long, default_value_t = TaskVariant::Standard)]
    variant: TaskVariant,
    /// Instead of random decile pairs, cover all 90 ordered pairs this many
    /// times per latent (decile variant only).
    #[arg(long)]
    sweep: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct EvalLlmArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    #[arg(long, default_value_t = 2)]
    max_retries: u32,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct EvalOracleArgs {
    #[arg(long)]
    tasks: PathBuf,
    /// bench.json written by `synth`.
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct EvalRandomArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct ScoreEmbeddingArgs {
    /// Activation dump (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Score file (JSONL) to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    set_size: usize,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    /// Precomputed `{text, vector}` JSONL file.
    #[arg(long, conflicts_with_all = ["endpoint", "hashing"])]
    embeddings: Option<PathBuf>,
    /// OpenAI-compatible embeddings server.
    #[arg(long, conflicts_with = "hashing")]
    endpoint: Option<String>,
    #[arg(long, default_value = DEFAULT_EMBEDDING_MODEL)]
    model: String,
    /// Offline bag-of-words embedder with this many buckets.
    #[arg(long)]
    hashing: Option<usize>,
    /// Also write decile-pair AUROC matrices next to the output.
    #[arg(long)]
    pairs: bool,
    /// Restrict scoring to these latents.
    #[arg(long = "latent")]
    latents: Vec<String>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct StatsArgs {
    /// Task set the verdicts refer to.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Verdict files (JSONL); repeatable.
    #[arg(long)]
    verdicts: Vec<PathBuf>,
    /// External score files (JSONL); repeatable.
    #[arg(long)]
    scores: Vec<PathBuf>,
    /// Report (JSON) to write.
    #[arg(long)]
    output: PathBuf,
    /// Directory for one score file per evaluator.
    #[arg(long)]
    export_scores: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
struct ServeArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Built annotation UI to serve under /ui.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Tell annotators whether each answer was right.
    #[arg(long)]
    feedback: bool,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    version: &'a str,
    #[serde(flatten)]
    command: &'a Command,
}

#[derive(Deserialize)]
struct SnapshotIn {
    #[serde(flatten)]
    command: Command,
}

fn snapshot_path(output: &Path) -> PathBuf {
    sibling(output, "config.json")
}

fn write_snapshot(path: &Path, command: &Command) -> Result<()> {
    let snapshot = Snapshot {
        version: env!("CARGO_PKG_VERSION"),
        command,
    };
    jsonl::write_json(path, &snapshot)?;
    log::info!("config snapshot: {}", path.display());
    Ok(())
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{flag}: no such file {}", path.display());
    }
    Ok(())
}

fn prepare_output(flag: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("{flag}: cannot create {}", parent.display()))?;
    }
    Ok(())
}

fn load_tasks(flag: &str, path: &Path) -> Result<Vec<IntruderTask>> {
    require_file(flag, path)?;
    let tasks: Vec<IntruderTask> =
        jsonl::read(path).with_context(|| format!("{flag}: cannot read tasks"))?;
    if tasks.is_empty() {
        bail!("{flag}: {} holds no tasks", path.display());
    }
    Ok(tasks)
}

fn load_store(flag: &str, path: &Path) -> Result<ActivationStore> {
    require_file(flag, path)?;
    let store = ActivationStore::ingest(path).with_context(|| format!("{flag}: cannot load activations"))?;
    for r in store.rejects().iter().take(5) {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    if store.rejects().len() > 5 {
        log::warn!("{} rejected lines in total", store.rejects().len());
    }
    Ok(store)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let bench = match &args.bench {
        Some(path) => {
            require_file("--bench", path)?;
            read_bench(path).context("--bench: invalid bench description")?
        }
        None => BenchSpec::standard(args.monosemantic, args.scalar, args.noise, args.contexts),
    };
    std::fs::create_dir_all(&args.output)
        .with_context(|| format!("--output: cannot create {}", args.output.display()))?;
    let corpus = generate_corpus(&bench, args.seed)?;
    write_corpus(&args.output.join("corpus.jsonl"), &corpus)?;
    write_bench(&args.output.join("bench.json"), &bench)?;
    write_snapshot(&args.output.join("synth.config.json"), &Command::Synth(args.clone()))?;
    println!(
        "wrote {} records for {} latents to {}",
        corpus.len(),
        bench.latents.len(),
        args.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ProfileReport<'a> {
    profiles: &'a BTreeMap<String, LatentProfile>,
    unscoreable: &'a [UnscoreableLatent],
    rejected_lines: &'a [RejectedLine],
}

fn profile(args: &ProfileArgs) -> Result<()> {
    let store = load_store("--input", &args.input)?;
    prepare_output("--output", &args.output)?;
    let set = store.profiles();
    jsonl::write_json(
        &args.output,
        &ProfileReport {
            profiles: &set.profiles,
            unscoreable: &set.unscoreable,
            rejected_lines: store.rejects(),
        },
    )?;
    write_snapshot(&snapshot_path(&args.output), &Command::Profile(args.clone()))?;
    println!(
        "{} scoreable latents, {} unscoreable, {} rejected lines",
        set.profiles.len(),
        set.unscoreable.len(),
        store.rejects().len()
    );
    Ok(())
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct BatchSummary<'a> {
    tasks: usize,
    skipped: BTreeMap<&'a str, usize>,
    reused_examples: BTreeMap<&'a str, usize>,
}

fn build_tasks(args: &BuildTasksArgs) -> Result<()> {
    if args.sweep.is_some() && args.variant != TaskVariant::Decile {
        bail!("--sweep requires --variant decile");
    }
    let store = load_store("--input", &args.input)?;
    prepare_output("--output", &args.output)?;
    let profiles = store.profiles();
    for u in &profiles.unscoreable {
        log::warn!("latent {} unscoreable: {} positive examples", u.latent_id, u.positives);
    }
    let batch = match args.sweep {
        Some(reps) => build_decile_sweep(&store, &profiles, reps, args.seed),
        None => build_batch(
            &store,
            &profiles,
            &BatchConfig {
                tasks_per_latent: args.tasks_per_latent,
                variant: args.variant,
            },
            args.seed,
        ),
    };
    jsonl::write(&args.output, &batch.tasks)?;
    let skipped: &[SkippedTask] = &batch.skipped;
    jsonl::write(&sibling(&args.output, "skipped.jsonl"), skipped)?;
    let reuse = batch.reuse_counts();
    for (latent, repeats) in reuse.iter().filter(|(_, r)| **r > 0) {
        log::info!("latent {latent}: {repeats} example slots reuse earlier contexts");
    }
    jsonl::write_json(
        &sibling(&args.output, "summary.json"),
        &BatchSummary {
            tasks: batch.tasks.len(),
            skipped: batch.skip_counts(),
            reused_examples: reuse.clone(),
        },
    )?;
    write_snapshot(&snapshot_path(&args.output), &Command::BuildTasks(args.clone()))?;
    println!(
        "{} tasks over {} latents, {} skipped, {} reused example slots",
        batch.tasks.len(),
        profiles.profiles.len(),
        batch.skipped.len(),
        reuse.values().sum::<usize>()
    );
    Ok(())
}

fn write_verdicts(output: &Path, verdicts: &[Verdict]) -> Result<()> {
    prepare_output("--output", output)?;
    jsonl::write(output, verdicts)?;
    let correct = verdicts.iter().filter(|v| v.is_correct()).count();
    let invalid = verdicts.iter().filter(|v| !v.is_valid()).count();
    println!(
        "{} verdicts, {} correct ({:.3}), {} invalid",
        verdicts.len(),
        correct,
        correct as f64 / verdicts.len().max(1) as f64,
        invalid
    );
    Ok(())
}

fn eval_llm(args: &EvalLlmArgs) -> Result<()> {
    let tasks = load_tasks("--tasks", &args.tasks)?;
    let config = EvaluatorConfig {
        endpoint: args.endpoint.clone(),
        model: args.model.clone(),
        temperature: args.temperature,
        max_retries: args.max_retries,
        concurrency: args.concurrency,
        timeout: Duration::from_secs(args.timeout),
        ..EvaluatorConfig::default()
    }
    .with_env_api_key();
    config.validate()?;
    if config.api_key.is_none() {
        log::info!("no API key in {}; sending unauthenticated requests", API_KEY_VARS.join(" or "));
    }
    let runtime = tokio::runtime::Runtime::new()?;
    let verdicts = runtime.block_on(llm_evaluator::evaluate(&tasks, &config))?;
    write_verdicts(&args.output, &verdicts)?;
    write_snapshot(&snapshot_path(&args.output), &Command::EvalLlm(args.clone()))
}

fn eval_oracle(args: &EvalOracleArgs) -> Result<()> {
    let tasks = load_tasks("--tasks", &args.tasks)?;
    require_file("--bench", &args.bench)?;
    let bench = read_bench(&args.bench).context("--bench: invalid bench description")?;
    let verdicts = oracle_evaluate_all(&tasks, &bench, args.seed)?;
    write_verdicts(&args.output, &verdicts)?;
    write_snapshot(&snapshot_path(&args.output), &Command::EvalOracle(args.clone()))
}

fn eval_random(args: &EvalRandomArgs) -> Result<()> {
    let tasks = load_tasks("--tasks", &args.tasks)?;
    let verdicts = random_evaluate_all(&tasks, args.seed);
    write_verdicts(&args.output, &verdicts)?;
    write_snapshot(&snapshot_path(&args.output), &Command::EvalRandom(args.clone()))
}

fn embedder(args: &ScoreEmbeddingArgs) -> Result<Box<dyn Embedder>> {
    Ok(match (&args.embeddings, &args.endpoint, args.hashing) {
        (Some(path), _, _) => {
            require_file("--embeddings", path)?;
            Box::new(PrecomputedEmbeddings::load(path).context("--embeddings: cannot load vectors")?)
        }
        (None, Some(endpoint), _) => {
            let key = API_KEY_VARS
                .iter()
                .find_map(|var| std::env::var(var).ok().filter(|v| !v.is_empty()));
            Box::new(HttpEmbedder::new(endpoint, &args.model)?.with_api_key(key))
        }
        (None, None, Some(dim)) => Box::new(HashingEmbedder { dim }),
        (None, None, None) => bail!("choose an embedding backend: --embeddings, --endpoint or --hashing"),
    })
}

#[derive(Serialize)]
struct PairMatrices {
    latents: BTreeMap<String, Vec<Vec<Option<f64>>>>,
}

fn score_embedding(args: &ScoreEmbeddingArgs) -> Result<()> {
    let store = load_store("--input", &args.input)?;
    let backend = embedder(args)?;
    prepare_output("--output", &args.output)?;
    let config = EmbeddingConfig {
        set_size: args.set_size,
        iterations: args.iterations,
    };
    let profiles = store.profiles();
    for wanted in &args.latents {
        if !profiles.profiles.contains_key(wanted) {
            bail!("--latent: {wanted} is not a scoreable latent of the input");
        }
    }
    let mut lines = Vec::new();
    let mut pairs = PairMatrices { latents: BTreeMap::new() };
    for (latent_id, profile) in &profiles.profiles {
        if !args.latents.is_empty() && !args.latents.contains(latent_id) {
            continue;
        }
        let mut rng = rng_from(mix_str(args.seed, latent_id));
        let scored = score_profile(&store, profile, &config, backend.as_ref(), &mut rng)?;
        for (d, reason) in &scored.skipped {
            log::info!("{latent_id} decile {d} skipped: {reason}");
        }
        match scored.score {
            Some(score) => lines.push(ScoreLine {
                latent_id: latent_id.clone(),
                score,
                per_decile: Some(scored.per_decile),
            }),
            None => log::warn!("{latent_id}: no decile could be scored"),
        }
        if args.pairs {
            let mut rng = rng_from(mix_str(mix_str(args.seed, "pairs"), latent_id));
            pairs.latents.insert(
                latent_id.clone(),
                decile_pair_matrix(&store, profile, &config, backend.as_ref(), &mut rng)?,
            );
        }
    }
    jsonl::write(&args.output, &lines)?;
    if args.pairs {
        jsonl::write_json(&sibling(&args.output, "pairs.json"), &pairs)?;
    }
    write_snapshot(&snapshot_path(&args.output), &Command::ScoreEmbedding(args.clone()))?;
    let mean = lines.iter().map(|l| l.score).sum::<f64>() / lines.len().max(1) as f64;
    println!("{} latents scored, mean AUROC {mean:.3}", lines.len());
    Ok(())
}

fn print_agreement(report: &ScoreReport) {
    let Some(table) = &report.agreement else {
        return;
    };
    println!("agreement over {} latents (pearson / spearman):", table.latents.len());
    for (a, id) in table.ids.iter().enumerate() {
        let cells: Vec<String> = (0..table.ids.len())
            .map(|b| {
                let f = |v: Option<f64>| v.map_or("  n/a".to_string(), |x| format!("{x:+.2}"));
                format!("{}/{}", f(table.pearson[a][b]), f(table.spearman[a][b]))
            })
            .collect();
        println!("  {id:<20} {}", cells.join("  "));
    }
}

fn stats(args: &StatsArgs) -> Result<()> {
    if args.verdicts.is_empty() && args.scores.len() < 2 {
        bail!("give --tasks with --verdicts, or at least two --scores files");
    }
    let mut verdicts = Vec::new();
    for path in &args.verdicts {
        require_file("--verdicts", path)?;
        let vs: Vec<Verdict> = jsonl::read(path).context("--verdicts: cannot read verdicts")?;
        verdicts.extend(vs);
    }
    let mut report = if verdicts.is_empty() {
        ScoreReport { evaluators: Vec::new(), agreement: None }
    } else {
        let tasks_path = args.tasks.as_ref().context("--tasks is required with --verdicts")?;
        let tasks = load_tasks("--tasks", tasks_path)?;
        score_report(&tasks, &verdicts)?
    };
    let mut sets: Vec<ScoreSet> = report
        .evaluators
        .iter()
        .map(|e| ScoreSet {
            id: e.evaluator_id.clone(),
            scores: e
                .latents
                .iter()
                .map(|l| (l.score.latent_id.clone(), l.score.overall))
                .collect(),
        })
        .collect();
    for path in &args.scores {
        require_file("--scores", path)?;
        let set = ScoreSet::load(path).with_context(|| format!("--scores: cannot read {}", path.display()))?;
        if sets.iter().any(|s| s.id == set.id) {
            bail!("--scores: score set id {} is used twice", set.id);
        }
        sets.push(set);
    }
    if sets.len() >= 2 {
        report.agreement = Some(agreement_table(&sets).context("agreement table")?);
    }
    prepare_output("--output", &args.output)?;
    jsonl::write_json(&args.output, &report)?;
    if let Some(dir) = &args.export_scores {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("--export-scores: cannot create {}", dir.display()))?;
        for e in &report.evaluators {
            let lines: Vec<ScoreLine> = e.latents.iter().map(|l| ScoreLine::from(&l.score)).collect();
            jsonl::write(&dir.join(format!("{}.jsonl", e.evaluator_id)), &lines)?;
        }
    }
    write_snapshot(&snapshot_path(&args.output), &Command::Stats(args.clone()))?;
    for e in &report.evaluators {
        println!(
            "{}: {} latents, mean score {}, bins {:?}, {} invalid verdicts",
            e.evaluator_id,
            e.latents.len(),
            e.mean_overall.map_or("n/a".into(), |m| format!("{m:.3}")),
            e.bin_counts,
            e.invalid_verdicts
        );
    }
    print_agreement(&report);
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let tasks = load_tasks("--tasks", &args.tasks)?;
    if let Some(ui) = &args.ui_dir {
        if !ui.is_dir() {
            bail!("--ui-dir: no such directory {}", ui.display());
        }
    }
    std::fs::create_dir_all(&args.data_dir)
        .with_context(|| format!("--data-dir: cannot create {}", args.data_dir.display()))?;
    let service = AnnotationService::open(
        tasks,
        &args.data_dir,
        ServiceOptions {
            feedback: args.feedback,
            ui_dir: args.ui_dir.clone(),
        },
    )
    .map_err(|e| anyhow::anyhow!("--data-dir: {e}"))?;
    write_snapshot(&args.data_dir.join("serve.config.json"), &Command::Serve(args.clone()))?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("--host/--port: invalid address")?;
    println!("annotation service on http://{addr}");
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(annotation_service::serve(Arc::new(service), addr))?;
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Profile(a) => profile(a),
        Command::BuildTasks(a) => build_tasks(a),
        Command::EvalLlm(a) => eval_llm(a),
        Command::EvalOracle(a) => eval_oracle(a),
        Command::EvalRandom(a) => eval_random(a),
        Command::ScoreEmbedding(a) => score_embedding(a),
        Command::Stats(a) => stats(a),
        Command::Serve(a) => serve(a),
        Command::Rerun { config } => {
            require_file("--config", config)?;
            let snapshot: SnapshotIn =
                jsonl::read_json(config).context("--config: not a config snapshot")?;
            run(&snapshot.command)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
