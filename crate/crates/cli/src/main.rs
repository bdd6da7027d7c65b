//! `bsr`: run belief elicitation and rectification experiments.
//!
//! Exit codes: 0 on success, 1 on invalid input (flag, config field or
//! method), 2 when a pipeline stage fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use belief_space::analysis::overlap_report;
use belief_space::corpus::CorpusIndex;
use belief_space::elicitation::{read_belief_dump, Generator};
use belief_space::model::load_checkpoint;
use belief_space::pipeline::{
    cross_domain, generator_comparison, run_rectification, run_through, top_n_sweep, Method, RunConfig, RunError, Stage,
    ENV_PREFIX, TOP_N_VALUES,
};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bsr", version, about = "Belief elicitation and belief-space rectification experiments")]
#[command(after_help = "Config keys can be overridden with BSR_<SECTION>__<KEY>=value, e.g. BSR_UNLEARN__BETA=0.5.")]
struct Cli {
    /// Random seed for data, pretraining, batching and bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory; every artifact path is relative to it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for elicitation, inference and attribution.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct RunFlags {
    /// belief-sr, answer-sr or knowledge-sr.
    #[arg(long)]
    method: Option<Method>,
    /// fbbs, fbs, bbs or posthoc.
    #[arg(long)]
    generator: Option<Generator>,
    /// Enhance weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Unlearning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Unlearning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Beliefs (or attributed documents) used per instance.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or load data, splits and the vanilla model.
    Prepare,
    /// Answer the training set with the vanilla model and partition it.
    BaselineEval,
    /// Elicit beliefs (or rank evidence) for the incorrect instances.
    Elicit(RunFlags),
    /// Unlearn spurious beliefs and write the rectified checkpoint.
    Rectify(RunFlags),
    /// Evaluate the rectified model against vanilla.
    Evaluate(RunFlags),
    /// Analyses over a run directory.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Print the report of a finished run.
    Report {
        /// md or tsv.
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Full runs over several seeds, one directory each.
    Sweep {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Longest corpus match of each elicited belief.
    Overlap {
        /// Ratio at which a belief counts as contained in the corpus.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
    },
    /// Rectify with the top n beliefs for each n.
    SweepN {
        /// Comma-separated values of n.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Rectify once per belief generator.
    CompareGenerators {
        /// Comma-separated generators.
        #[arg(long, value_delimiter = ',')]
        generators: Option<Vec<Generator>>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Rectify per relation domain and swap evaluation sets.
    CrossEval(RunFlags),
}

enum Failure {
    Invalid(String),
    Stage(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => Failure::Invalid(m),
            e @ RunError::Stage { .. } => Failure::Stage(e.to_string()),
        }
    }
}

fn load_config(cli: &Cli, flags: &RunFlags) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("--config {}: {e}", p.display())))?),
        None => None,
    };
    let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    let mut c = RunConfig::from_sources(text.as_deref(), env).map_err(|e| Failure::Invalid(e.0))?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    if let Some(m) = flags.method {
        c.method = m;
    }
    if let Some(g) = flags.generator {
        c.generator = g;
    }
    if let Some(b) = flags.beta {
        c.unlearn.beta = b;
    }
    if let Some(lr) = flags.lr {
        c.unlearn.learning_rate = lr;
    }
    if let Some(e) = flags.epochs {
        c.unlearn.epochs = e;
    }
    if let Some(k) = flags.top_k {
        c.unlearn.top_k_beliefs = k;
    }
    let c = c.resolved();
    c.validate().map_err(|e| Failure::Invalid(e.0))?;
    Ok(c)
}

fn write_out(path: &Path, text: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Stage(format!("stage analyze failed: {}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

fn stage(c: &RunConfig, last: Stage) -> Result<(), Failure> {
    run_through(c, last)?;
    println!("{last}: done in {}", c.out_dir.display());
    Ok(())
}

fn overlap(c: &RunConfig, threshold: f64) -> Result<(), Failure> {
    let root = &c.out_dir;
    let missing = |what: &str| Failure::Invalid(format!("{what} not found under {}; run elicit first", root.display()));
    let dump = fs::File::open(root.join("beliefs/beliefs.jsonl")).map_err(|_| missing("beliefs/beliefs.jsonl"))?;
    let records = read_belief_dump(std::io::BufReader::new(dump)).map_err(Failure::Invalid)?;
    let corpus = fs::read_to_string(root.join("data/corpus.txt")).map_err(|_| missing("data/corpus.txt"))?;
    let ck = load_checkpoint(&root.join("model/vanilla.json")).map_err(|_| missing("model/vanilla.json"))?;
    let index = CorpusIndex::build(corpus.lines().map(str::to_string).collect(), &ck.vocab);
    let items: Vec<_> = records
        .iter()
        .map(|r| (format!("{}:{}", r.generator, r.side), r.instance_id.clone(), r.tokens.clone()))
        .collect();
    let (rows, _) = overlap_report(&items, &index, threshold).map_err(|e| Failure::Invalid(e.to_string()))?;
    let mut tsv = String::from("group\tbeliefs\tcontained\tpercentage\tmean_ratio\n");
    for r in &rows {
        tsv.push_str(&format!("{}\t{}\t{}\t{:.2}\t{:.4}\n", r.group, r.beliefs, r.contained, r.percentage, r.mean_ratio));
    }
    write_out(&root.join("analysis/overlap.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let none = RunFlags::default();
    match &cli.command {
        Command::Prepare => stage(&load_config(cli, &none)?, Stage::Prepare),
        Command::BaselineEval => stage(&load_config(cli, &none)?, Stage::BaselineEval),
        Command::Elicit(f) => stage(&load_config(cli, f)?, Stage::Elicit),
        Command::Rectify(f) => stage(&load_config(cli, f)?, Stage::Rectify),
        Command::Evaluate(f) => {
            let r = run_rectification(&load_config(cli, f)?)?;
            print!("{}", fs::read_to_string(&r.report_md).unwrap_or_default());
            Ok(())
        }
        Command::Report { format } => {
            let c = load_config(cli, &none)?;
            let rel = match format.as_str() {
                "md" => "reports/report.md",
                "tsv" => "reports/report.tsv",
                other => return Err(Failure::Invalid(format!("--format must be md or tsv, got {other}"))),
            };
            let text = fs::read_to_string(c.out_dir.join(rel))
                .map_err(|_| Failure::Invalid(format!("no {rel} under {}; run evaluate first", c.out_dir.display())))?;
            print!("{text}");
            Ok(())
        }
        Command::Sweep { seeds, run } => {
            let base = load_config(cli, run)?;
            let mut rows = Vec::new();
            for &s in seeds {
                let mut c = base.clone();
                c.seed = s;
                c.out_dir = base.out_dir.join(format!("seed{s}"));
                let r = run_rectification(&c.resolved())?;
                rows.push((s.to_string(), r.rectified));
            }
            let table = belief_space::analysis::SweepTable::from_reports("seed", &rows);
            write_out(&base.out_dir.join("sweep.tsv"), &table.to_tsv())?;
            print!("{}", table.to_tsv());
            Ok(())
        }
        Command::Analyze(a) => match a {
            Analysis::Overlap { threshold } => overlap(&load_config(cli, &none)?, *threshold),
            Analysis::SweepN { values, run } => {
                let c = load_config(cli, run)?;
                let values = values.clone().unwrap_or(TOP_N_VALUES.to_vec());
                let (table, _) = top_n_sweep(&c, &values)?;
                write_out(&c.out_dir.join("sweep-n/table.tsv"), &table.to_tsv())?;
                print!("{}", table.to_tsv());
                Ok(())
            }
            Analysis::CompareGenerators { generators, run } => {
                let c = load_config(cli, run)?;
                let gens = generators.clone().unwrap_or(Generator::ALL.to_vec());
                let (table, _) = generator_comparison(&c, &gens)?;
                write_out(&c.out_dir.join("generators/table.tsv"), &table.to_tsv())?;
                print!("{}", table.to_tsv());
                Ok(())
            }
            Analysis::CrossEval(run) => {
                let c = load_config(cli, run)?;
                let (matrix, _) = cross_domain(&c)?;
                write_out(&c.out_dir.join("cross/matrix.tsv"), &matrix.to_tsv())?;
                write_out(&c.out_dir.join("cross/matrix.md"), &matrix.to_markdown())?;
                print!("{}", matrix.to_markdown());
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
