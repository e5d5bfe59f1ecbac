use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pipesim::fixtures::{figure, Fixture, FIGURES};
use pipesim::planner::{plan, validate_plan};
use pipesim::semantics::{loss_curve_compare, verify_grid, Grid, ToyModel, TrainerConfig};
use pipesim::{render_timeline, ClusterSpec, ModelProfile, ParallelConfig, PipelinePolicy, RenderFormat, SimReport};

/// Simulate, verify and plan pipeline-parallel training schedules.
#[derive(Parser)]
#[command(name = "pipesim", version)]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration through the event simulator.
    Simulate(SimulateArgs),
    /// Search for the fastest configuration that fits in memory.
    Plan(PlanArgs),
    /// Check that every schedule reproduces its reference update rule.
    Verify(VerifyArgs),
    /// Draw a saved simulation report as a Gantt chart.
    Render(RenderArgs),
    /// List or write the built-in timeline fixtures.
    Fixtures(FixturesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in fixture to run instead of --model/--cluster and the shape flags.
    #[arg(long, conflicts_with_all = ["model", "cluster", "policy", "width", "depth", "microbatch", "accum", "recompute", "batches"])]
    fixture: Option<String>,
    #[arg(long, required_unless_present = "fixture")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "fixture")]
    cluster: Option<PathBuf>,
    #[arg(long, default_value = "2bw")]
    policy: PipelinePolicy,
    #[arg(long, default_value_t = 1)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    microbatch: u32,
    /// Microbatches per stage per batch (m = depth·accum).
    #[arg(long, default_value_t = 1)]
    accum: usize,
    #[arg(long)]
    recompute: bool,
    #[arg(long, default_value_t = 8)]
    batches: usize,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cluster: PathBuf,
    /// Largest safe global batch size.
    #[arg(long)]
    max_batch: u64,
    /// Simulate the chosen configuration and report the prediction error.
    #[arg(long)]
    validate: bool,
    /// Batches simulated by --validate.
    #[arg(long, default_value_t = 50)]
    batches: usize,
    /// Write the plan as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GridArg {
    Small,
    Full,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "small")]
    grid: GridArg,
    /// Write vanilla and delayed loss curves of the quadratic fixture as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Replace the reference gradient delay (negative control).
    #[arg(long, hide = true)]
    inject_delay: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "ascii")]
    format: RenderFormat,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixturesArgs {
    /// Directory to write `<name>.model.json`, `<name>.cluster.json` and `<name>.fixture.json` into.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only this fixture.
    #[arg(long)]
    name: Option<String>,
}

/// Failure of a check or an infeasible request, as opposed to bad input.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_check_failure(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<io::Error>(), Some(io) if io.kind() == io::ErrorKind::BrokenPipe))
}

fn is_check_failure(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<CheckFailed>() || matches!(c.downcast_ref::<pipesim::Error>(), Some(pipesim::Error::Infeasible(_)))
    })
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Render(a) => render(a),
        Command::Fixtures(a) => fixtures(a),
    }
}

fn load_model(path: &Path) -> anyhow::Result<ModelProfile> {
    let file = File::open(path).with_context(|| format!("cannot open model profile {}", path.display()))?;
    ModelProfile::load(file).with_context(|| format!("invalid model profile {}", path.display()))
}

fn load_cluster(path: &Path) -> anyhow::Result<ClusterSpec> {
    let file = File::open(path).with_context(|| format!("cannot open cluster spec {}", path.display()))?;
    ClusterSpec::load(file).with_context(|| format!("invalid cluster spec {}", path.display()))
}

fn write_output(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, json: String) -> anyhow::Result<()> {
    write_output(path, format!("{json}\n").as_bytes())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let fixture = match &a.fixture {
        Some(name) => figure(name)?,
        None => Fixture {
            name: a.policy.name().to_string(),
            description: String::new(),
            policy: a.policy,
            model: load_model(a.model.as_deref().expect("required by clap"))?,
            cluster: load_cluster(a.cluster.as_deref().expect("required by clap"))?,
            config: ParallelConfig::new(a.width, a.depth, a.microbatch, a.recompute, a.accum),
            num_batches: a.batches,
        },
    };
    let report = fixture.simulate().context("simulation failed")?;
    let mut out = io::stdout().lock();
    print_report(&mut out, &fixture, &report)?;
    if let Some(path) = &a.out {
        write_json(path, report.to_json())?;
    }
    Ok(())
}

fn print_report(out: &mut impl Write, fixture: &Fixture, report: &SimReport) -> io::Result<()> {
    let cfg = &fixture.config;
    writeln!(
        out,
        "policy={} w={} d={} b={} g={} m={} recompute={} batches={}",
        fixture.policy,
        cfg.width,
        cfg.depth,
        cfg.microbatch_size,
        cfg.grad_accum,
        report.microbatches_per_batch,
        cfg.recompute,
        report.num_batches
    )?;
    writeln!(out, "throughput: {:.6} samples/s", report.throughput)?;
    writeln!(out, "steady batch time: {:.6} s", report.steady_batch_time)?;
    writeln!(out, "bubble fraction: {:.4}", report.bubble_fraction)?;
    writeln!(out, "{:>8} {:>16} {:>9} {:>8}", "worker", "peak bytes", "versions", "stashes")?;
    for (w, trace) in report.memory.iter().enumerate() {
        writeln!(
            out,
            "{:>8} {:>16} {:>9} {:>8}",
            w + 1,
            trace.peak_bytes(),
            trace.peak_versions(),
            trace.peak_stashes()
        )?;
    }
    let versions = report.memory.iter().map(|t| t.peak_versions()).max().unwrap_or(0);
    let stashes = report.memory.iter().map(|t| t.peak_stashes()).max().unwrap_or(0);
    writeln!(out, "weight versions held: {versions}")?;
    writeln!(out, "activation stashes held: {stashes}")
}

fn plan_cmd(a: PlanArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let cluster = load_cluster(&a.cluster)?;
    let result = plan(&model, &cluster, a.max_batch)?;
    let mut out = io::stdout().lock();
    write!(out, "{}", result.to_table())?;
    if let Some(path) = &a.out {
        write_json(path, result.to_json())?;
    }
    if a.validate {
        let v = validate_plan(&result, &model, &cluster, a.batches)?;
        writeln!(
            out,
            "\nvalidation: simulated {:.3} samples/s, throughput error {:.3}%, simulated memory {} bytes, memory error {:.3}%",
            v.simulated_throughput,
            100.0 * v.throughput_error,
            v.simulated_memory,
            100.0 * v.memory_error
        )?;
        if v.throughput_error > 0.02 || v.memory_error != 0.0 {
            bail!(CheckFailed("prediction differs from simulation beyond tolerance".into()));
        }
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let grid = match a.grid {
        GridArg::Small => Grid::Small,
        GridArg::Full => Grid::Full,
    };
    let results = verify_grid(grid, a.inject_delay)?;
    let mut out = io::stdout().lock();
    let mut failed = 0;
    for r in &results {
        writeln!(out, "{} {} (relative error {:.3e})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.error)?;
        failed += usize::from(!r.passed);
    }
    if let Some(path) = &a.loss_csv {
        let model = ToyModel::linear_regression(3, 4, 8);
        let cfg = TrainerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            m: 4,
            num_batches: 200,
        };
        let cmp = loss_curve_compare(&model, &cfg)?;
        write_output(path, cmp.to_csv().as_bytes())?;
        writeln!(out, "loss curves: tail gap {:.3e} of initial loss", cmp.relative_tail_gap())?;
    }
    writeln!(out, "{} of {} cases passed", results.len() - failed, results.len())?;
    if failed > 0 {
        bail!(CheckFailed(format!("{failed} equivalence cases failed")));
    }
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("cannot read report {}", a.report.display()))?;
    let report = SimReport::from_json_str(&text).with_context(|| format!("invalid report {}", a.report.display()))?;
    let bytes = render_timeline(&report, a.format)?;
    match &a.out {
        Some(path) => write_output(path, &bytes),
        None => Ok(io::stdout().lock().write_all(&bytes)?),
    }
}

fn fixtures(a: FixturesArgs) -> anyhow::Result<()> {
    let names: Vec<&str> = match &a.name {
        Some(n) => vec![n.as_str()],
        None => FIGURES.to_vec(),
    };
    for name in names {
        let f = figure(name)?;
        let cfg = f.config;
        writeln!(
            io::stdout().lock(),
            "{name}: {} (pipesim simulate --fixture {name}; equivalently --policy {} --width {} --depth {} --microbatch {} --accum {} --batches {})",
            f.description, f.policy, cfg.width, cfg.depth, cfg.microbatch_size, cfg.grad_accum, f.num_batches
        )?;
        if let Some(dir) = &a.out {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_json(&dir.join(format!("{name}.model.json")), f.model.to_json())?;
            write_json(&dir.join(format!("{name}.cluster.json")), f.cluster.to_json())?;
            write_json(&dir.join(format!("{name}.fixture.json")), f.to_json())?;
        }
    }
    Ok(())
}
