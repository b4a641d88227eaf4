use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vguard_core::crypto::VerifyCache;
use vguard_core::harness::{self, Axis, ChurnEvent, RunSpec};
use vguard_core::ledger::Ledger;
use vguard_core::node::ByzantineProfile;
use vguard_core::realtime;

#[derive(Parser)]
#[command(
    name = "vguard",
    version,
    about = "Simulate consensus deployments with dynamic booths"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its report, ledgers and trace.
    Run(RunArgs),
    /// Run one configuration per value of a parameter and write a combined CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Audit an exported ledger file.
    Verify {
        ledger: PathBuf,
        /// Require windows to tile time from zero.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    Beta,
    M,
    Delay,
    Gamma,
    Churn,
}

impl From<SweepAxis> for Axis {
    fn from(a: SweepAxis) -> Self {
        match a {
            SweepAxis::Beta => Axis::Beta,
            SweepAxis::M => Axis::M,
            SweepAxis::Delay => Axis::Delay,
            SweepAxis::Gamma => Axis::Gamma,
            SweepAxis::Churn => Axis::Churn,
        }
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Deterministic discrete-event simulation.
    #[default]
    Reference,
    /// One thread per node against the wall clock.
    Benchmark,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON: any subset of run-spec fields. Flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
    /// Entries per batch.
    #[arg(long)]
    beta: Option<usize>,
    /// Bytes per entry.
    #[arg(long)]
    m: Option<usize>,
    /// Consensus window length in ms.
    #[arg(long)]
    delta_ms: Option<f64>,
    /// Co-located instances per node.
    #[arg(long)]
    gamma: Option<usize>,
    /// Gossip lifetime; setting it turns gossip on.
    #[arg(long)]
    lifetime: Option<u32>,
    /// Temporary storage retention in ms.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delay_mean: Option<f64>,
    #[arg(long)]
    delay_sd: Option<f64>,
    /// Per-fragment loss probability.
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long)]
    dup: Option<f64>,
    /// JSON list of {time_ms, node_id, status} events.
    #[arg(long)]
    churn_file: Option<PathBuf>,
    /// JSON list of {node_id, behaviors} profiles.
    #[arg(long)]
    byz_file: Option<PathBuf>,
    /// Run length in ms.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    mode: Mode,
    /// Write trace.jsonl with every send, delivery and drop.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

impl RunArgs {
    fn spec(&self) -> Result<RunSpec> {
        let mut s: RunSpec = match &self.spec {
            Some(p) => read_json(p)?,
            None => RunSpec::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { s.$($field).+ = v; })*
            };
        }
        set!(n => n, f => f, beta => beta, m => m, delta_ms => delta_ms, gamma => gamma,
             tau => tau_ms, delay_mean => sim.delay.mean_ms, delay_sd => sim.delay.sd_ms,
             drop => sim.drop_rate, dup => sim.dup_rate, duration => duration_ms, seed => seed);
        if let Some(l) = self.lifetime {
            s.lifetime = l;
            s.gossip = true;
        }
        if let Some(p) = &self.churn_file {
            s.churn = read_json::<Vec<ChurnEvent>>(p)?;
        }
        if let Some(p) = &self.byz_file {
            s.byzantine = read_json::<Vec<ByzantineProfile>>(p)?;
        }
        s.trace |= self.trace;
        Ok(s)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn run(args: &RunArgs) -> Result<()> {
    let spec = args.spec()?;
    fs::create_dir_all(&args.out)?;
    let report = match args.mode {
        Mode::Benchmark => realtime::run(&spec)?,
        Mode::Reference => {
            let run = harness::run_full(&spec)?;
            for node in run.sim.nodes() {
                let instances: Vec<u32> = node
                    .proposing
                    .keys()
                    .chain(node.validating.keys())
                    .copied()
                    .collect();
                for &instance in &instances {
                    let name = if spec.gamma == 1 {
                        format!("ledger-{}.jsonl", node.id.0)
                    } else {
                        format!("ledger-{}-{instance}.jsonl", node.id.0)
                    };
                    let (_, ledger) = node.instance_state(instance).expect("listed above");
                    let mut w = create(&args.out, &name)?;
                    ledger.export_jsonl(&mut w)?;
                    w.flush()?;
                }
            }
            if let Some(trace) = run.sim.trace() {
                let mut w = create(&args.out, "trace.jsonl")?;
                trace.write_jsonl(&mut w)?;
                w.flush()?;
            }
            run.report
        }
    };
    fs::write(args.out.join("report.json"), report.to_json())?;
    let mut w = create(&args.out, "report.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "ordering {:.0} tps, consensus {:.0} tps, consensus p50 {:.2} ms, windows {}/{}, checks {}",
        report.ordering_tps,
        report.consensus_tps,
        report.consensus_latency_ms.p50,
        report.committed_windows,
        report.windows,
        if report.ok { "passed" } else { "FAILED" }
    );
    for f in &report.checks.failures {
        println!("  {f}");
    }
    if !report.ok {
        bail!("post-run audit failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(&args),
        Command::Sweep { run, axis, values } => {
            if values.windows(2).any(|w| w[0] > w[1]) {
                bail!("--values must be ascending");
            }
            if run.mode == Mode::Benchmark {
                bail!("sweeps run in reference mode only");
            }
            let spec = run.spec()?;
            let axis = Axis::from(axis);
            fs::create_dir_all(&run.out)?;
            let cells = harness::sweep(&spec, axis, &values);
            for (v, cell) in &cells {
                match cell {
                    Ok(r) => println!(
                        "{}={v}: consensus {:.0} tps, p50 {:.2} ms, checks {}",
                        axis.name(),
                        r.consensus_tps,
                        r.consensus_latency_ms.p50,
                        if r.ok { "passed" } else { "FAILED" }
                    ),
                    Err(e) => println!("{}={v}: {e}", axis.name()),
                }
            }
            let mut w = create(&run.out, "sweep.csv")?;
            harness::write_sweep_csv(axis, &cells, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Verify { ledger, full } => {
            let file =
                File::open(&ledger).with_context(|| format!("opening {}", ledger.display()))?;
            let ledger = Ledger::import_jsonl(BufReader::new(file))?;
            let cache = VerifyCache::new();
            let verdict = if full {
                ledger.verify_chain(&cache)
            } else {
                ledger.verify_records(&cache)
            };
            match verdict {
                Ok(()) => {
                    println!(
                        "ok: {} windows, {} entries, tiled until {} ms",
                        ledger.len(),
                        ledger.committed_entries(),
                        ledger.tiled_until() as f64 / 1e6
                    );
                    Ok(())
                }
                Err(v) => bail!("ledger rejected: {v}"),
            }
        }
    }
}
