//! `arithwave` command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use arithwave::chaos::{
    exact_grid_size, leray_chaos_projection, leray_second_chaos, nodal_chaos_projection, nodal_fourth_chaos_closed,
    nodal_fourth_chaos_quadrature,
};
use arithwave::field::{evaluate_field, replicate_rng, sample_coefficients, write_grid_binary, write_grid_csv};
use arithwave::harness::{run_experiment, write_outputs, EpsilonPolicy, ExperimentConfig, ExperimentKind, GridSpec};
use arithwave::lattice::{
    enumerate_lattice_points, mu_hat_4, select_frequencies, spectral_correlation_count, LatticePointSet,
};
use arithwave::limits::{summarize, wasserstein1_vs_standard_normal, MEtaLaw};
use arithwave::nodal::{default_epsilon, leray_estimate, marching_squares_length, Region};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "arithwave", version, about = "Arithmetic random waves on the torus: nodal length, Leray measure and chaos studies")]
struct Cli {
    /// Master seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for study outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON experiment config (studies only).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lattice points, fourth Fourier coefficient and spectral correlations.
    Lattice(LatticeArgs),
    /// Synthesize one field realization on a grid.
    Field(FieldArgs),
    /// Nodal length and Leray estimates per replicate.
    Nodal(NodalArgs),
    /// Chaos projections by closed form and/or quadrature.
    Chaos(ChaosArgs),
    /// Sample a limit law and summarize it.
    Limits(LimitsArgs),
    /// Leray measure study.
    LerayStudy(StudyArgs),
    /// Nodal length study.
    NodalStudy(StudyArgs),
    /// Joint Leray/nodal study.
    JointStudy(StudyArgs),
    /// Berry–Esseen rate study.
    RateStudy(StudyArgs),
}

#[derive(Args)]
struct LatticeArgs {
    /// A single frequency; otherwise all n ≤ limit are scanned.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    limit: u64,
    #[arg(long, default_value_t = 1)]
    min_points: usize,
    #[arg(long)]
    mu4_target: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    mu4_tol: f64,
    /// Highest correlation order K to count (S_2K).
    #[arg(long, default_value_t = 2)]
    correlations: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridFormat {
    Csv,
    Binary,
}

#[derive(Args)]
struct FieldArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    gradient: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: GridFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NodalArgs {
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Sub-rectangle x0,y0,x1,y1 of the unit torus.
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Component {
    Leray2,
    Nodal4,
    NodalQ,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Closed,
    Quadrature,
    Both,
}

#[derive(Args)]
struct ChaosArgs {
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, value_enum, default_value = "leray2")]
    component: Component,
    #[arg(long, value_enum, default_value = "both")]
    method: Method,
    /// Chaos half-order for `nodal-q` (2, 3 or 4).
    #[arg(long, default_value_t = 3)]
    q: u32,
    /// Quadrature grid; defaults to the exactness rule.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Meta,
    Normal,
}

#[derive(Args)]
struct LimitsArgs {
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, value_enum, default_value = "meta")]
    target: Target,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Frequencies, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Vec<u64>,
    /// Grid size or "auto".
    #[arg(long, default_value = "auto")]
    grid: String,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long)]
    closed_replicates: Option<usize>,
    /// Window half-width or "auto".
    #[arg(long, default_value = "auto")]
    epsilon: String,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    reference_draws: usize,
    #[arg(long, default_value_t = 50)]
    quadrature_checks: usize,
    /// Skip gradient synthesis (disables the nodal quadrature check).
    #[arg(long)]
    no_gradient: bool,
    /// Run different frequencies concurrently.
    #[arg(long)]
    parallel_frequencies: bool,
}

enum Failure {
    Usage(String),
    Targets,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn lattice_set(n: u64) -> Result<Arc<LatticePointSet>, Failure> {
    Ok(Arc::new(enumerate_lattice_points(n)?))
}

fn cmd_lattice(args: &LatticeArgs) -> CliResult {
    let ns: Vec<u64> = match args.n {
        Some(n) => vec![n],
        None => select_frequencies(args.limit, args.min_points, args.mu4_target, args.mu4_tol)
            .into_iter()
            .map(|f| f.frequency.n())
            .collect(),
    };
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["n", "N_n", "mu4", "S2", "S4", "S6"])?;
    for n in ns {
        let set = enumerate_lattice_points(n)?;
        let mut rec = vec![n.to_string(), set.cardinality().to_string(), mu_hat_4(&set)?.to_string()];
        for k in 1..=3 {
            let cell = if k <= args.correlations {
                match spectral_correlation_count(&set, k) {
                    Ok(c) => c.to_string(),
                    Err(arithwave::Error::CorrelationCap { .. }) => String::new(),
                    Err(e) => return Err(e.into()),
                }
            } else {
                String::new()
            };
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_field(args: &FieldArgs, seed: u64) -> CliResult {
    let set = lattice_set(args.n)?;
    let c = sample_coefficients(&set, seed, args.replicate)?;
    let g = evaluate_field(&c, args.grid, args.gradient)?;
    let out = output(args.out.as_deref())?;
    match args.format {
        GridFormat::Csv => write_grid_csv(&g, out)?,
        GridFormat::Binary => write_grid_binary(&g, out)?,
    }
    Ok(())
}

fn cmd_nodal(args: &NodalArgs, seed: u64) -> CliResult {
    let set = lattice_set(args.n)?;
    let region = match &args.region {
        Some(r) if r.len() == 4 => Some(Region::new(r[0], r[1], r[2], r[3])?),
        Some(r) => return Err(Failure::Usage(format!("--region needs 4 values, got {}", r.len()))),
        None => None,
    };
    let eps = args.epsilon.unwrap_or_else(|| default_epsilon(args.grid));
    let rows: Vec<(f64, f64)> = (0..args.replicates as u64)
        .into_par_iter()
        .map(|r| -> arithwave::Result<(f64, f64)> {
            let c = sample_coefficients(&set, seed, r)?;
            let g = evaluate_field(&c, args.grid, false)?;
            let len = marching_squares_length(&g, region.as_ref())?.total_length;
            Ok((len, leray_estimate(&g, eps)?))
        })
        .collect::<arithwave::Result<_>>()?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["replicate", "length", "leray_estimate"])?;
    for (r, (len, z)) in rows.iter().enumerate() {
        w.write_record([r.to_string(), len.to_string(), z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_chaos(args: &ChaosArgs, seed: u64) -> CliResult {
    let set = lattice_set(args.n)?;
    let q = match args.component {
        Component::Leray2 => 1,
        Component::Nodal4 => 2,
        Component::NodalQ => args.q,
    };
    if args.component == Component::NodalQ && args.method != Method::Quadrature && q != 2 {
        return Err(Failure::Usage(format!("no closed form for the nodal chaos at q={q}; use --method quadrature")));
    }
    let m = args.grid.unwrap_or_else(|| exact_grid_size(args.n, q));
    let want_closed = args.method != Method::Quadrature;
    let want_quad = args.method != Method::Closed;
    let rows: Vec<(Option<f64>, Option<f64>)> = (0..args.replicates as u64)
        .into_par_iter()
        .map(|r| -> arithwave::Result<(Option<f64>, Option<f64>)> {
            let c = sample_coefficients(&set, seed, r)?;
            let closed = want_closed.then(|| match args.component {
                Component::Leray2 => leray_second_chaos(&c),
                _ => nodal_fourth_chaos_closed(&c),
            });
            let quad = if want_quad {
                let g = evaluate_field(&c, m, args.component != Component::Leray2)?;
                Some(match args.component {
                    Component::Leray2 => leray_chaos_projection(&g, 1)?.value,
                    Component::Nodal4 => nodal_fourth_chaos_quadrature(&g)?.value,
                    Component::NodalQ => nodal_chaos_projection(&g, q)?.value,
                })
            } else {
                None
            };
            Ok((closed, quad))
        })
        .collect::<arithwave::Result<_>>()?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["replicate", "value_closed", "value_quadrature", "abs_diff"])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for (r, &(c, qv)) in rows.iter().enumerate() {
        let diff = c.zip(qv).map(|(a, b)| (a - b).abs());
        w.write_record([r.to_string(), cell(c), cell(qv), cell(diff)])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_limits(args: &LimitsArgs, seed: u64) -> CliResult {
    let law = MEtaLaw::new(args.eta)?;
    let mut rng = replicate_rng(seed, 0);
    let x: Vec<f64> = match args.target {
        Target::Meta => law.sample_many(&mut rng, args.draws),
        Target::Normal => (0..args.draws).map(|_| rng.sample(StandardNormal)).collect(),
    };
    let s = summarize(&x)?;
    let central = |r: i32| x.iter().map(|v| (v - s.mean).powi(r)).sum::<f64>() / x.len() as f64;
    let (a3, a4) = match args.target {
        Target::Meta => (law.raw_moment(3), law.raw_moment(4)),
        Target::Normal => (0.0, 3.0),
    };
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["statistic", "sample", "analytic"])?;
    let rows: [(&str, f64, f64); 6] = [
        ("draws", x.len() as f64, x.len() as f64),
        ("mean", s.mean, 0.0),
        ("variance", s.variance, 1.0),
        ("third_moment", central(3), a3),
        ("fourth_moment", central(4), a4),
        ("w1_standard_normal", wasserstein1_vs_standard_normal(&x)?, f64::NAN),
    ];
    for (name, v, a) in rows {
        let a = if a.is_nan() { String::new() } else { a.to_string() };
        w.write_record([name.to_string(), v.to_string(), a])?;
    }
    w.write_record(["eta".to_string(), law.eta().to_string(), law.eta().to_string()])?;
    w.flush()?;
    Ok(())
}

fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    if s == "auto" {
        return Ok(GridSpec::Auto);
    }
    s.parse().map(GridSpec::Fixed).map_err(|_| Failure::Usage(format!("--grid must be a size or \"auto\", got {s:?}")))
}

fn parse_epsilon(s: &str) -> Result<EpsilonPolicy, Failure> {
    if s == "auto" {
        return Ok(EpsilonPolicy::Auto);
    }
    s.parse().map(EpsilonPolicy::Fixed).map_err(|_| Failure::Usage(format!("--epsilon must be a number or \"auto\", got {s:?}")))
}

fn cmd_study(kind: ExperimentKind, args: &StudyArgs, cli: &Cli) -> CliResult {
    let mut config = match &cli.config {
        Some(path) => {
            let c = ExperimentConfig::from_json_file(path)?;
            if c.kind != kind {
                return Err(Failure::Usage(format!("config is a {} experiment, not {}", c.kind.name(), kind.name())));
            }
            c
        }
        None => {
            if args.n.is_empty() {
                return Err(Failure::Usage("--n (or --config) is required".into()));
            }
            let mut c = ExperimentConfig::new(kind, args.n.clone(), args.replicates, 0);
            c.grid = parse_grid(&args.grid)?;
            c.epsilon = parse_epsilon(&args.epsilon)?;
            c.closed_form_replicates = args.closed_replicates;
            c.eta = args.eta;
            c.reference_draws = args.reference_draws;
            c.quadrature_checks = args.quadrature_checks;
            c.gradients = !args.no_gradient;
            c.chaos_quadrature = !args.no_gradient;
            c.parallel_frequencies = args.parallel_frequencies;
            c
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = Some(dir.clone());
    }
    let table = run_experiment(&config)?;
    print!("{}", table.render());
    if let Some(dir) = &config.out_dir {
        let paths = write_outputs(&table, dir, &config.stem())?;
        eprintln!("wrote {} and {}", paths.csv.display(), paths.manifest.display());
    }
    if table.all_passed() {
        println!("PASS");
        Ok(())
    } else {
        for r in table.failures() {
            println!("FAIL n={} {}: estimate {} target {:?}", r.n, r.estimator, r.estimate, r.target);
        }
        Err(Failure::Targets)
    }
}

fn run(cli: &Cli) -> CliResult {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Lattice(a) => cmd_lattice(a),
        Command::Field(a) => cmd_field(a, seed),
        Command::Nodal(a) => cmd_nodal(a, seed),
        Command::Chaos(a) => cmd_chaos(a, seed),
        Command::Limits(a) => cmd_limits(a, seed),
        Command::LerayStudy(a) => cmd_study(ExperimentKind::Leray, a, cli),
        Command::NodalStudy(a) => cmd_study(ExperimentKind::Nodal, a, cli),
        Command::JointStudy(a) => cmd_study(ExperimentKind::Joint, a, cli),
        Command::RateStudy(a) => cmd_study(ExperimentKind::Rates, a, cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Targets) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
