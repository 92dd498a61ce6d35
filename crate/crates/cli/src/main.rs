use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ontorel::onto_store::{parse_ontology, OntologyFormat, OntologyGraph};
use ontorel::path_reasoner::{path_generation, DEFAULT_MAX_HOPS};
use ontorel::pipeline::synth::{generate, SynthConfig};
use ontorel::pipeline::{
    bench_parse, entity_coverage, evaluate, format_bench_report, hop_ablation, load_dataset_file,
    load_ontologies, load_unlabeled, precompute_contexts, predict_instances, train, DatasetSchema,
    PipelineError, RunConfig, TrainedModel,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ontorel", version, about = "Ontology-guided relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse ontology files and write each in the exchange format.
    Ingest {
        #[arg(long, required = true, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge ontologies on shared CUIs.
    Merge {
        #[arg(long, required = true, num_args = 2..)]
        onto: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the plain and axiom paths between two CUIs.
    Paths {
        #[arg(long, required = true, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long)]
        head: String,
        #[arg(long)]
        tail: String,
        #[arg(long, default_value_t = DEFAULT_MAX_HOPS, value_parser = positive)]
        hops: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of dataset CUIs found in the ontologies.
    Coverage {
        #[arg(long, required = true, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "pairwise-json")]
        schema: DatasetSchema,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute symbolic contexts for every entity pair into a cache.
    Precompute {
        #[arg(long, required = true, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_HOPS, value_parser = positive)]
        hops: usize,
        #[arg(long, default_value = "pairwise-json")]
        schema: DatasetSchema,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the ontologies the checkpoint was trained with.
        #[arg(long, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long)]
        schema: Option<DatasetSchema>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict relations and print one trace per record.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, num_args = 1..)]
        onto: Vec<PathBuf>,
        #[arg(long)]
        schema: Option<DatasetSchema>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test once per hop limit.
    AblateHops {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, required = true, value_delimiter = ',')]
        hops_list: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time ontology parsing and path queries.
    BenchParse {
        #[arg(long, required = true, num_args = 1..)]
        onto: Vec<PathBuf>,
        /// `HEAD_CUI:TAIL_CUI`.
        #[arg(long, num_args = 1.., value_parser = parse_pair)]
        pair: Vec<(String, String)>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus with its ontologies.
    Synth {
        #[arg(long, default_value_t = 600)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings given as flags. A `--config` file overrides them.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    onto: Vec<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_hops: Option<usize>,
    #[arg(long)]
    bias_mode: Option<String>,
    #[arg(long)]
    bias_weight: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    state_dim: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    context_cache: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        fn is_usage(e: &PipelineError) -> bool {
            match e {
                PipelineError::Config(_) => true,
                PipelineError::File { source, .. } => is_usage(source),
                _ => false,
            }
        }
        if is_usage(&e) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once(':') {
        Some((h, t)) if !h.is_empty() && !t.is_empty() => Ok((h.to_string(), t.to_string())),
        _ => Err(format!("expected HEAD:TAIL, got `{s}`")),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

impl RunArgs {
    fn flag_values(&self) -> toml::Table {
        let mut t = toml::Table::new();
        let int = |v: usize| toml::Value::Integer(v as i64);
        if !self.onto.is_empty() {
            t.insert("ontologies".into(), toml::Value::Array(self.onto.iter().map(|p| path_value(p)).collect()));
        }
        let paths = [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("context_cache", &self.context_cache),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                t.insert(k.into(), path_value(p));
            }
        }
        let strings = [("schema", &self.schema), ("bias_mode", &self.bias_mode), ("optimizer", &self.optimizer)];
        for (k, v) in strings {
            if let Some(s) = v {
                t.insert(k.into(), toml::Value::String(s.clone()));
            }
        }
        let ints = [
            ("threads", self.threads),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_hops", self.max_hops),
            ("state_dim", self.state_dim),
            ("text_dim", self.text_dim),
        ];
        for (k, v) in ints {
            if let Some(v) = v {
                t.insert(k.into(), int(v));
            }
        }
        if let Some(s) = self.seed {
            t.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        for (k, v) in [("learning_rate", self.learning_rate), ("bias_weight", self.bias_weight)] {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Float(v));
            }
        }
        t
    }

    /// Defaults, then flags, then the config file.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut table = self.flag_values();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
            RunConfig::from_toml(&text).map_err(|e| bad(e.to_string()))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
            table.extend(file);
        }
        let text = toml::to_string(&table).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(RunConfig::from_toml(&text)?)
    }
}

/// Create `dir` and write every file into it.
fn write_outputs(dir: &Path, files: &[(&str, &str)]) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_error(&p, e))?;
    }
    Ok(())
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("record serializes") + "\n")
        .collect()
}

fn load_data(paths: &[PathBuf], schema: DatasetSchema) -> CliResult<Vec<ontorel::encoder::SentenceInstance>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_dataset_file(p, schema, None)?);
    }
    Ok(out)
}

fn require<'a>(v: &'a Option<PathBuf>, what: &str) -> CliResult<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("no {what} set given (flag or config file)")))
}

fn checkpoint_graph(model: &TrainedModel, onto: &[PathBuf]) -> CliResult<OntologyGraph> {
    let files = if onto.is_empty() { &model.config.ontologies[..] } else { onto };
    Ok(load_ontologies(files)?)
}

fn stats_line(name: &str, g: &OntologyGraph) -> String {
    json!({
        "ontology": name,
        "concepts": g.concept_count(),
        "edges": g.edge_count(),
        "axioms": g.axiom_count(),
        "stats": g.stats(),
    })
    .to_string()
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Ingest { onto, out } => {
            let mut files = Vec::new();
            for p in &onto {
                let format = match p.extension().and_then(|e| e.to_str()) {
                    Some("json") | Some("jsonl") => OntologyFormat::AxiomJson,
                    _ => OntologyFormat::Triples,
                };
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("ontology").to_string();
                let file = File::open(p).map_err(|e| io_error(p, e))?;
                let g = parse_ontology(file, format, &stem)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                println!("{}", stats_line(&stem, &g));
                files.push((format!("{stem}.txt"), g.to_exchange_format()));
            }
            let refs: Vec<(&str, &str)> = files.iter().map(|(n, b)| (n.as_str(), b.as_str())).collect();
            write_outputs(&out, &refs)
        }
        Command::Merge { onto, out } => {
            let g = load_ontologies(&onto)?;
            println!("{}", stats_line("merged", &g));
            write_outputs(&out, &[("merged.txt", &g.to_exchange_format())])
        }
        Command::Paths {
            onto,
            head,
            tail,
            hops,
            out,
        } => {
            let g = load_ontologies(&onto)?;
            let trace = path_generation(&g, &head, &tail, hops)
                .map_err(|e| CliError::Data(e.to_string()))?
                .trace();
            for p in &trace.paths {
                let kind = serde_json::to_value(p.kind).expect("kind serializes");
                println!("{}\t{}\t{}", kind.as_str().unwrap_or_default(), p.hop_count, p.verbalization);
            }
            match out {
                Some(dir) => write_outputs(&dir, &[("paths.jsonl", &jsonl(&trace.paths))]),
                None => Ok(()),
            }
        }
        Command::Coverage {
            onto,
            data,
            schema,
            out,
        } => {
            let g = load_ontologies(&onto)?;
            let instances = load_data(&data, schema)?;
            let line = json!({
                "instances": instances.len(),
                "coverage": entity_coverage(&instances, &g),
            })
            .to_string();
            println!("{line}");
            match out {
                Some(dir) => write_outputs(&dir, &[("coverage.json", &(line + "\n"))]),
                None => Ok(()),
            }
        }
        Command::Precompute {
            onto,
            data,
            hops,
            schema,
            out,
        } => {
            let g = load_ontologies(&onto)?;
            let instances = load_data(&data, schema)?;
            let store = precompute_contexts(&instances, &g, hops, Some(&out))?;
            let non_empty = store.contexts.values().filter(|c| !c.is_empty()).count();
            println!(
                "{}",
                json!({"pairs": store.len(), "non_empty": non_empty, "cache_hits": store.cache_hits})
            );
            Ok(())
        }
        Command::Train { run, out } => {
            let config = run.resolve()?;
            let train_path = require(&config.train, "training")?;
            let train_set = load_dataset_file(train_path, config.schema, None)?;
            let valid_set = match &config.valid {
                Some(p) => load_dataset_file(p, config.schema, None)?,
                None => Vec::new(),
            };
            let test_set = match &config.test {
                Some(p) => Some(load_dataset_file(p, config.schema, None)?),
                None => None,
            };
            let graph = load_ontologies(&config.ontologies)?;
            let outcome = train(&config, &train_set, &valid_set, &graph)?;
            let mut files = vec![
                ("model.json", outcome.model.to_json()),
                ("train_log.jsonl", outcome.log_lines()),
                ("config.toml", config.to_toml()),
            ];
            if let Some(test_set) = test_set {
                let eval = evaluate(&outcome.model, &test_set, &graph)?;
                files.push(("metrics.json", serde_json::to_string(&eval.metrics).expect("metrics") + "\n"));
                files.push(("predictions.jsonl", jsonl(&eval.predictions)));
            }
            println!(
                "{}",
                json!({
                    "epochs": config.epochs,
                    "best_epoch": outcome.best_epoch,
                    "final_train_loss": outcome.train_losses.last(),
                })
            );
            let refs: Vec<(&str, &str)> = files.iter().map(|(n, b)| (*n, b.as_str())).collect();
            write_outputs(&out, &refs)
        }
        Command::Eval {
            checkpoint,
            data,
            onto,
            schema,
            threads,
            out,
        } => {
            let mut model = TrainedModel::load(&checkpoint)?;
            model.config.context_cache = None;
            if let Some(t) = threads {
                model.config.threads = t;
                model.config.validate()?;
            }
            let instances = load_dataset_file(&data, schema.unwrap_or(model.config.schema), None)?;
            let graph = checkpoint_graph(&model, &onto)?;
            let eval = evaluate(&model, &instances, &graph)?;
            let metrics = serde_json::to_string(&eval.metrics).expect("metrics serialize");
            println!("{metrics}");
            write_outputs(
                &out,
                &[("metrics.json", &(metrics + "\n")), ("predictions.jsonl", &jsonl(&eval.predictions))],
            )
        }
        Command::Predict {
            checkpoint,
            input,
            onto,
            schema,
            out,
        } => {
            let mut model = TrainedModel::load(&checkpoint)?;
            model.config.context_cache = None;
            let file = File::open(&input).map_err(|e| io_error(&input, e))?;
            let instances = load_unlabeled(file, schema.unwrap_or(model.config.schema))
                .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let graph = checkpoint_graph(&model, &onto)?;
            let (records, ..) = predict_instances(&model, &instances, &graph)?;
            let lines = jsonl(&records);
            print!("{lines}");
            match out {
                Some(dir) => write_outputs(&dir, &[("predictions.jsonl", &lines)]),
                None => Ok(()),
            }
        }
        Command::AblateHops { run, hops_list, out } => {
            if hops_list.contains(&0) {
                return Err(CliError::Usage("hop limits must be positive".into()));
            }
            let config = run.resolve()?;
            let train_set = load_dataset_file(require(&config.train, "training")?, config.schema, None)?;
            let test_set = load_dataset_file(require(&config.test, "test")?, config.schema, None)?;
            let valid_set = match &config.valid {
                Some(p) => load_dataset_file(p, config.schema, None)?,
                None => Vec::new(),
            };
            let graph = load_ontologies(&config.ontologies)?;
            let rows = hop_ablation(&config, &train_set, &valid_set, &test_set, &graph, &hops_list)?;
            let mut table = String::from("max_hops\tmacro_f1\tmicro_f1\taccuracy\n");
            for r in &rows {
                table.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", r.max_hops, r.macro_f1, r.micro_f1, r.accuracy));
            }
            print!("{table}");
            write_outputs(&out, &[("hops.tsv", &table)])
        }
        Command::BenchParse {
            onto,
            pair,
            repeats,
            out,
        } => {
            let report = format_bench_report(&bench_parse(&onto, &pair, repeats));
            print!("{report}");
            write_outputs(&out, &[("bench.tsv", &report)])
        }
        Command::Synth { instances, seed, out } => {
            let corpus = generate(&SynthConfig {
                instances,
                seed,
                ..SynthConfig::default()
            })?;
            corpus.write_to(&out)?;
            println!(
                "{}",
                json!({
                    "train": corpus.train.records.len(),
                    "valid": corpus.valid.records.len(),
                    "test": corpus.test.records.len(),
                    "relations": corpus.relations,
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
