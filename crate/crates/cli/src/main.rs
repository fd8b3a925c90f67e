use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use treegls::io::{self, fmt_sig, Dataset, LabeledStore, SimConfigFile};
use treegls::oracle::{build_stacked_system, compare_store, dense_gls, PairScope};
use treegls::query::{estimate_query, estimate_query_aggregated};
use treegls::sim::{coverage_experiment, ks_statistic, qq_export};
use treegls::{local_gls, run_two_pass_with, Error, ErrorKind, Parallelism};

#[derive(Parser)]
#[command(name = "treegls", version)]
#[command(about = "Consistent GLS estimates and confidence intervals for hierarchical measurements")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a measurements file: tree shape, design rank, noise definiteness.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the two-pass estimator and write a state store.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        /// Store file to write.
        #[arg(long, alias = "store")]
        out: PathBuf,
    },
    /// Answer region queries (JSON lines) against a state store.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Default significance level for records without one.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Clamp interval endpoints at zero unless a record says otherwise.
        #[arg(long)]
        clamp: bool,
        /// Use level-by-level region aggregation instead of pairwise covariances.
        #[arg(long)]
        aggregate: bool,
    },
    /// Print the covariance block between two vertices.
    Cov {
        #[arg(long)]
        store: PathBuf,
        u: String,
        v: String,
    },
    /// Compare two-pass results with the dense solution.
    OracleCheck {
        #[arg(long)]
        input: PathBuf,
        /// Check this store instead of re-estimating.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Run a coverage simulation and write coverage.csv and qq.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads.filter(|&t| t > 0) {
        // ignore failure: the pool may already exist in embedded use
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

/// Replace numeric vertex ids in an error with the file's vertex names.
fn name_vertex(e: Error, names: &[String]) -> anyhow::Error {
    anyhow::Error::new(e.named(names))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let par = Parallelism::from_threads(cli.threads);
    match cli.command {
        Command::Validate { input } => validate(&input),
        Command::Estimate { input, out } => estimate(&input, &out, par),
        Command::Query {
            store,
            queries,
            out,
            alpha,
            clamp,
            aggregate,
        } => query(&store, &queries, out.as_deref(), alpha, clamp, aggregate),
        Command::Cov { store, u, v } => cov(&store, &u, &v),
        Command::OracleCheck {
            input,
            store,
            tolerance,
        } => oracle_check(&input, store.as_deref(), tolerance, par),
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
    }
}

fn validate(input: &Path) -> Result<ExitCode> {
    let ds = Dataset::load(input)?;
    let mut first: Option<Error> = None;
    for (g, m) in ds.meas.iter().enumerate() {
        if let Err(e) = local_gls(m) {
            eprintln!("vertex {:?}: {e}", ds.names[g]);
            first.get_or_insert(e.at_vertex(g));
        }
    }
    if let Some(e) = first {
        return Err(name_vertex(e, &ds.names));
    }
    println!(
        "OK: {} vertices, L={}, n={}",
        ds.tree.len(),
        ds.tree.depth(),
        ds.meas[0].cols()
    );
    Ok(ExitCode::SUCCESS)
}

fn estimate(input: &Path, out: &Path, par: Parallelism) -> Result<ExitCode> {
    let ds = Dataset::load(input)?;
    let store = run_two_pass_with(&ds.tree, &ds.meas, par).map_err(|e| name_vertex(e, &ds.names))?;
    let root = store.tree().root();
    let ls = LabeledStore {
        names: ds.names,
        store: store.without_detail(),
    };
    ls.save(out)?;
    let beta: Vec<String> = ls.store.beta_final(root).iter().map(|&x| fmt_sig(x)).collect();
    println!(
        "wrote {} ({} vertices); root estimate [{}]",
        out.display(),
        ls.store.tree().len(),
        beta.join(", ")
    );
    Ok(ExitCode::SUCCESS)
}

fn query(
    store: &Path,
    queries: &Path,
    out: Option<&Path>,
    alpha: f64,
    clamp: bool,
    aggregate: bool,
) -> Result<ExitCode> {
    let ls = LabeledStore::load(store)?;
    let records = io::load_queries(queries)?;
    let names = ls.name_index();
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let ctx = format!("{}: query {:?} (record {})", queries.display(), rec.id, i + 1);
        let rq = rec.resolve(&names, ls.store.n(), alpha, clamp, &ctx)?;
        let res = if aggregate {
            estimate_query_aggregated(&ls.store, &rq)
        } else {
            estimate_query(&ls.store, &rq)
        };
        let res = res
            .map_err(|e| name_vertex(e, &ls.names))
            .with_context(|| ctx.clone())?;
        rows.push((rec.id.clone(), res));
    }
    let csv = io::query_csv(&rows);
    match out {
        Some(p) => io::write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cov(store: &Path, u: &str, v: &str) -> Result<ExitCode> {
    let ls = LabeledStore::load(store)?;
    let find = |name: &str| {
        ls.lookup(name).ok_or_else(|| Error::Parse {
            context: "cov".into(),
            message: format!("unknown vertex {name:?}"),
        })
    };
    let c = treegls::compute_covariance(&ls.store, find(u)?, find(v)?)?;
    for row in c.row_iter() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_sig(x)).collect();
        println!("{}", cells.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle_check(input: &Path, store: Option<&Path>, tolerance: f64, par: Parallelism) -> Result<ExitCode> {
    let ds = Dataset::load(input)?;
    let sol = dense_gls(&build_stacked_system(&ds.tree, &ds.meas)?)?;
    let store = match store {
        Some(p) => {
            let ls = LabeledStore::load(p)?;
            if ls.names != ds.names || ls.store.tree().parent_pairs() != ds.tree.parent_pairs() {
                return Err(anyhow!(Error::Config(format!(
                    "{} does not describe the tree in {}",
                    p.display(),
                    input.display()
                ))));
            }
            ls.store
        }
        None => run_two_pass_with(&ds.tree, &ds.meas, par).map_err(|e| name_vertex(e, &ds.names))?,
    };
    let cmp = compare_store(&ds.tree, &store, &sol, PairScope::Leaves)?;
    let name = |g: usize| ds.names[g].as_str();
    println!(
        "max relative deviation: estimate {} at {:?}, variance {} at {:?}, leaf covariance {} at ({:?}, {:?})",
        fmt_sig(cmp.beta.value),
        name(cmp.beta.at.0),
        fmt_sig(cmp.var.value),
        name(cmp.var.at.0),
        fmt_sig(cmp.cov.value),
        name(cmp.cov.at.0),
        name(cmp.cov.at.1),
    );
    if cmp.passes(tolerance) {
        println!("PASS (tolerance {})", fmt_sig(tolerance));
        Ok(ExitCode::SUCCESS)
    } else {
        let worst = [cmp.beta, cmp.var, cmp.cov]
            .into_iter()
            .find(|d| !(d.value <= tolerance))
            .expect("some deviation exceeds the tolerance");
        println!(
            "FAIL (tolerance {}): offending vertex {:?}",
            fmt_sig(tolerance),
            name(worst.at.0)
        );
        Ok(ExitCode::from(2))
    }
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let (cfg, queries) = SimConfigFile::load(config, seed)?;
    let report = coverage_experiment(&cfg, &queries)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_atomic(&out.join("coverage.csv"), io::coverage_csv(&report).as_bytes())?;
    io::write_atomic(&out.join("qq.csv"), io::qq_csv(&qq_export(&report.z_scores)?).as_bytes())?;
    for r in &report.rows {
        println!(
            "{} alpha={} clamped={} coverage={} mean_width={}",
            r.query_id,
            fmt_sig(r.alpha),
            r.clamped,
            fmt_sig(r.coverage),
            fmt_sig(r.mean_width)
        );
    }
    println!(
        "{} replicates, KS distance of z-scores {}",
        report.replicates,
        fmt_sig(ks_statistic(&report.z_scores)?)
    );
    Ok(ExitCode::SUCCESS)
}
