use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use gcfuse::config::{config_hash, RunConfig};
use gcfuse::data::{generate_synthetic, load_corpus, write_corpus, DocumentGraph};
use gcfuse::error::GcError;
use gcfuse::fusion::ArchitectureSpec;
use gcfuse::train::{aggregate_runs, prepare_corpus, train_model, Aggregate, RunResult, TrainedModel};

#[derive(Parser)]
#[command(name = "gcfuse", version, about = "Graph-context text classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list (overrides the config).
    #[arg(long)]
    seeds: Option<String>,
    /// Parallel single-run workers (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic citation corpus and write it with a manifest.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one architecture variant across all seeds.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Architecture variant name (overrides the config).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the full variant grid and emit a sorted comparison table.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check every differentiable op and both models against finite differences.
    Gradcheck,
    /// Merge result files and report per-variant statistics.
    Aggregate {
        /// Result files to merge.
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            GcError::Config(_) | GcError::Contract(_) | GcError::Parse { .. } => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), GcError> {
    match cli.command {
        Command::GenData { common } => cmd_gen_data(load_config(&common)?),
        Command::Train { common, variant } => {
            let mut config = load_config(&common)?;
            if let Some(v) = variant {
                config.variant = v;
            }
            cmd_train(config)
        }
        Command::Grid { common } => cmd_grid(load_config(&common)?),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Aggregate { files, out } => cmd_aggregate(&files, out.as_deref()),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, GcError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        config.out_dir = out.display().to_string();
    }
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| GcError::Config(format!("bad seed '{s}' in --seeds")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> GcError + '_ {
    move |e| GcError::io(path.display().to_string(), e)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<(), GcError> {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, s).map_err(io_err(path))
}

fn cmd_gen_data(config: RunConfig) -> Result<(), GcError> {
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let graph = generate_synthetic(&config.synthetic)?;
    let corpus_path = out.join("corpus.tsv");
    write_corpus(&graph, &corpus_path)?;
    let homophily = graph.measured_homophily();
    write_manifest(
        &out.join("corpus.manifest"),
        &[
            ("config_hash", config_hash(&config.serialize())),
            ("timestamp", unix_now().to_string()),
            ("documents", graph.len().to_string()),
            ("classes", graph.num_classes.to_string()),
            ("edges", graph.edges.len().to_string()),
            ("generator_seed", config.synthetic.seed.to_string()),
            ("measured_homophily", format!("{homophily:.4}")),
        ],
    )?;
    println!(
        "wrote {} documents ({} edges, measured homophily {:.3}) to {}",
        graph.len(),
        graph.edges.len(),
        homophily,
        corpus_path.display()
    );
    Ok(())
}

fn load_graph(config: &RunConfig) -> Result<DocumentGraph, GcError> {
    match &config.corpus_path {
        Some(p) => load_corpus(Path::new(p)),
        None => generate_synthetic(&config.synthetic),
    }
}

/// All seeds of one variant, at most `workers` in flight; results come back
/// in seed order regardless of completion order.
fn run_variant(
    config: &RunConfig,
    graph: &DocumentGraph,
    variant: &str,
) -> Result<Vec<TrainedModel>, GcError> {
    let arch = ArchitectureSpec::parse(variant)?;
    let mut trained = Vec::with_capacity(config.seeds.len());
    for chunk in config.seeds.chunks(config.workers.max(1)) {
        let mut batch: Vec<Result<TrainedModel, GcError>> = Vec::with_capacity(chunk.len());
        if chunk.len() == 1 {
            let (corpus, split, lm_config) = prepare_corpus(config, graph, chunk[0])?;
            batch.push(train_model(&corpus, &split, arch, lm_config, &config.train_config(chunk[0])));
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| {
                        scope.spawn(move || {
                            let (corpus, split, lm_config) = prepare_corpus(config, graph, seed)?;
                            train_model(&corpus, &split, arch, lm_config, &config.train_config(seed))
                        })
                    })
                    .collect();
                for h in handles {
                    batch.push(h.join().expect("worker thread panicked"));
                }
            });
        }
        for r in batch {
            trained.push(r?);
        }
    }
    Ok(trained)
}

fn result_row(r: &RunResult) -> String {
    format!(
        "{}\t{}\t{:.4}\t{:.4}\t{}\n",
        r.variant, r.seed, r.balanced_error, r.macro_f1, r.best_epoch
    )
}

fn aggregate_row(a: &Aggregate) -> String {
    format!("{}\tmean\t{:.4}\t{:.4}\t-\n", a.variant, a.mean_error, a.mean_f1)
}

const RESULTS_HEADER: &str = "variant\tseed\tbalanced_error\tmacro_f1\tbest_epoch\n";

fn append_results(path: &Path, body: &str) -> Result<(), GcError> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    if file.metadata().map_err(io_err(path))?.len() == 0 {
        file.write_all(RESULTS_HEADER.as_bytes()).map_err(io_err(path))?;
    }
    file.write_all(body.as_bytes()).map_err(io_err(path))
}

fn cmd_train(config: RunConfig) -> Result<(), GcError> {
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let graph = load_graph(&config)?;
    let results_path = out.join("results.tsv");
    // a fresh invocation owns this file; reruns must reproduce it byte for byte
    fs::write(&results_path, RESULTS_HEADER).map_err(io_err(&results_path))?;
    let started = Instant::now();
    let variant = config.variant.clone();
    let mut results = Vec::new();
    for chunk_start in (0..config.seeds.len()).step_by(config.workers.max(1)) {
        let chunk_end = (chunk_start + config.workers.max(1)).min(config.seeds.len());
        let sub = RunConfig {
            seeds: config.seeds[chunk_start..chunk_end].to_vec(),
            ..config.clone()
        };
        for trained in run_variant(&sub, &graph, &variant)? {
            append_results(&results_path, &result_row(&trained.result))?;
            let model_path = out.join(format!(
                "model_{}_seed{}.bin",
                trained.result.variant, trained.result.seed
            ));
            trained.store.save(&model_path, &variant)?;
            println!(
                "{} seed {}: balanced error {:.2}%, macro F1 {:.2}%, best epoch {}",
                trained.result.variant,
                trained.result.seed,
                trained.result.balanced_error,
                trained.result.macro_f1,
                trained.result.best_epoch
            );
            results.push(trained.result);
        }
    }
    let agg = aggregate_runs(&results)?;
    append_results(&results_path, &aggregate_row(&agg))?;
    write_manifest(
        &out.join(format!("manifest_{variant}.txt")),
        &manifest_entries(&config, &variant, started, &graph),
    )?;
    println!(
        "{variant}: mean balanced error {:.2}% (std {:.2}), mean macro F1 {:.2}%",
        agg.mean_error, agg.std_error, agg.mean_f1
    );
    Ok(())
}

fn manifest_entries(
    config: &RunConfig,
    variant: &str,
    started: Instant,
    graph: &DocumentGraph,
) -> Vec<(&'static str, String)> {
    vec![
        ("config_hash", config_hash(&config.serialize())),
        ("variant", variant.to_string()),
        (
            "seeds",
            config.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("status", "complete".to_string()),
        ("timestamp", unix_now().to_string()),
        ("wall_seconds", format!("{:.1}", started.elapsed().as_secs_f64())),
        ("documents", graph.len().to_string()),
        ("measured_homophily", format!("{:.4}", graph.measured_homophily())),
    ]
}

fn manifest_marks_complete(path: &Path, hash: &str) -> bool {
    let Ok(text) = fs::read_to_string(path) else { return false };
    let mut complete = false;
    let mut hash_ok = false;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            complete |= k == "status" && v == "complete";
            hash_ok |= k == "config_hash" && v == hash;
        }
    }
    complete && hash_ok
}

fn cmd_grid(config: RunConfig) -> Result<(), GcError> {
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let graph = load_graph(&config)?;
    let results_path = out.join("results.tsv");
    // the hash covers everything but the variant under comparison
    let hash = config_hash(&RunConfig { variant: String::new(), ..config.clone() }.serialize());
    let mut failures = Vec::new();
    let mut aggregates = Vec::new();
    for variant in config.grid_variants.clone() {
        let manifest_path = out.join(format!("manifest_{variant}.txt"));
        if manifest_marks_complete(&manifest_path, &hash) {
            println!("{variant}: already complete, skipping");
        } else {
            let started = Instant::now();
            match run_variant(&config, &graph, &variant) {
                Ok(trained) => {
                    let mut body = String::new();
                    let results: Vec<RunResult> =
                        trained.into_iter().map(|t| t.result).collect();
                    for r in &results {
                        body.push_str(&result_row(r));
                    }
                    append_results(&results_path, &body)?;
                    let sub = RunConfig { variant: String::new(), ..config.clone() };
                    write_manifest(
                        &manifest_path,
                        &manifest_entries(&sub, &variant, started, &graph),
                    )?;
                    let agg = aggregate_runs(&results)?;
                    println!(
                        "{variant}: mean balanced error {:.2}% (std {:.2}) in {:.0}s",
                        agg.mean_error,
                        agg.std_error,
                        started.elapsed().as_secs_f64()
                    );
                }
                Err(e) => {
                    eprintln!("{variant} failed: {e}");
                    write_manifest(
                        &manifest_path,
                        &[
                            ("config_hash", hash.clone()),
                            ("variant", variant.clone()),
                            ("status", "failed".to_string()),
                            ("error", e.to_string()),
                        ],
                    )?;
                    failures.push(variant.clone());
                    continue;
                }
            }
        }
        if results_path.exists() {
            if let Some(rows) = read_results(&results_path)?.get(&variant) {
                aggregates.push(aggregate_runs(rows)?);
            }
        }
    }
    aggregates.sort_by(|a, b| b.mean_error.partial_cmp(&a.mean_error).unwrap());
    let table = render_table(&aggregates);
    print!("{table}");
    let summary_path = out.join("summary.tsv");
    fs::write(&summary_path, &table).map_err(io_err(&summary_path))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(GcError::Numeric(format!("{} variant(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

fn render_table(aggregates: &[Aggregate]) -> String {
    let mut s = String::from(
        "variant\truns\tmean_error\tstd_error\tmin_error\tmax_error\tmean_f1\tstd_f1\n",
    );
    for a in aggregates {
        s.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            a.variant, a.runs, a.mean_error, a.std_error, a.min_error, a.max_error, a.mean_f1, a.std_f1
        ));
    }
    s
}

fn read_results(path: &Path) -> Result<BTreeMap<String, Vec<RunResult>>, GcError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut by_variant: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| GcError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 columns, got {}", fields.len())));
        }
        if fields[1] == "mean" {
            continue;
        }
        let num =
            |i: usize| -> Result<f64, GcError> { fields[i].parse().map_err(|_| parse_err(format!("bad number '{}'", fields[i]))) };
        by_variant.entry(fields[0].to_string()).or_default().push(RunResult {
            variant: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| parse_err(format!("bad seed '{}'", fields[1])))?,
            balanced_error: num(2)?,
            macro_f1: num(3)?,
            best_epoch: fields[4]
                .parse()
                .map_err(|_| parse_err(format!("bad epoch '{}'", fields[4])))?,
            trace: vec![],
        });
    }
    Ok(by_variant)
}

fn cmd_aggregate(files: &[PathBuf], out: Option<&Path>) -> Result<(), GcError> {
    if files.is_empty() {
        return Err(GcError::Contract("no result files given".into()));
    }
    let mut pooled: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for file in files {
        for (variant, rows) in read_results(file)? {
            pooled.entry(variant).or_default().extend(rows);
        }
    }
    if pooled.is_empty() {
        return Err(GcError::Contract("result files contain no runs".into()));
    }
    let mut aggregates = pooled
        .values()
        .map(|rows| aggregate_runs(rows))
        .collect::<Result<Vec<_>, _>>()?;
    aggregates.sort_by(|a, b| b.mean_error.partial_cmp(&a.mean_error).unwrap());
    let table = render_table(&aggregates);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("aggregate.tsv");
        fs::write(&path, &table).map_err(io_err(&path))?;
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<(), GcError> {
    let started = Instant::now();
    let results = gcfuse::gradcheck::run_all()?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<34} max rel error {:>10.3e} (tolerance {:.0e})  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!(
        "{} of {} checks passed in {:.2}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(GcError::Numeric(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
