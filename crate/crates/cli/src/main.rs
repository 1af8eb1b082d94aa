use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use fetchsim_core::experiment::{ExperimentConfig, Prepared};
use fetchsim_core::scheduler::{build_schedule, select_top_requests, Admission, SchedulePlan, ValueTable};
use fetchsim_core::simulator::{save_metrics_csv, Metrics};
use fetchsim_core::smartttl::{
    build_ttl_table, load_fetch_log, save_fetch_log, ClusterKey, TtlPipelineConfig, TtlTable,
    TtlTrainingSet,
};
use fetchsim_core::trace::{ingest_trace, write_trace};
use fetchsim_core::{SimClock, DAY};

#[derive(Parser)]
#[command(name = "fetchsim", version, about = "Price-cache prefetch planning and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdmissionArg {
    Atomic,
    Partial,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a search trace (and optionally a training fetch log) from an
    /// experiment config.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output trace; `.gz` compresses.
        #[arg(long)]
        out: PathBuf,
        /// Also write the fetch log of the training period.
        #[arg(long)]
        fetch_log: Option<PathBuf>,
    },
    /// Build a TTL table from a supplier fetch log.
    BuildTtl {
        #[arg(long)]
        fetch_log: PathBuf,
        /// Search trace for gap times; without it, gaps between fetches
        /// are used.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Date of simulation second 0.
        #[arg(long, default_value = "2019-09-30")]
        epoch: NaiveDate,
        #[arg(long, default_value_t = 30)]
        min_samples: usize,
    },
    /// Plan one day of refreshes under a QPS budget.
    BuildSchedule {
        #[arg(long)]
        ttl_table: PathBuf,
        #[arg(long)]
        value_table: PathBuf,
        #[arg(long)]
        qps: u32,
        /// Day being planned; TTLs are looked up at this date's leads.
        #[arg(long, default_value = "2019-09-30")]
        date: NaiveDate,
        #[arg(long, value_enum, default_value = "atomic")]
        admission: AdmissionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an exported plan against the QPS cap and TTL coverage.
    AuditPlan {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        ttl_table: PathBuf,
        #[arg(long)]
        qps: u32,
        #[arg(long, default_value = "2019-09-30")]
        date: NaiveDate,
    },
    /// Run every arm of an experiment on the full trace and budget.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seeds with this one.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the first two arms as a 50/50 user split.
    Ab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every audit passed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::GenTrace { config, seed, out, fetch_log } => gen_trace(&config, seed, &out, fetch_log.as_deref()),
        Command::BuildTtl { fetch_log, trace, out, epoch, min_samples } => {
            build_ttl(&fetch_log, trace.as_deref(), &out, epoch, min_samples)
        }
        Command::BuildSchedule { ttl_table, value_table, qps, date, admission, out } => {
            build_plan(&ttl_table, &value_table, qps, date, admission, &out)
        }
        Command::AuditPlan { plan, ttl_table, qps, date } => audit_plan(&plan, &ttl_table, qps, date),
        Command::Run { config, seed, out } => run(&config, seed, &out),
        Command::Ab { config, seed, out } => ab(&config, seed, &out),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).context("config")?;
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn gen_trace(config: &Path, seed: Option<u64>, out: &Path, fetch_log: Option<&Path>) -> Result<bool> {
    let config = load_config(config, seed)?;
    let seed = config.seeds[0];
    if config.trace.is_some() {
        bail!("config: gen-trace needs a generated workload, not a trace file");
    }
    let scenario = config.scenario(seed).context("trace")?;
    write_trace(out, &scenario.searches).context("trace")?;
    println!("wrote {} searches to {}", scenario.searches.len(), out.display());
    if let Some(path) = fetch_log {
        let prepared = Prepared::new(&config, seed).context("simulator")?;
        let est = prepared.estimates.as_ref().context("config: fetch log needs training_days >= 1")?;
        save_fetch_log(path, &est.training.fetch_log).context("smartttl")?;
        println!("wrote {} fetches to {}", est.training.fetch_log.len(), path.display());
    }
    Ok(true)
}

fn build_ttl(fetch_log: &Path, trace: Option<&Path>, out: &Path, epoch: NaiveDate, min_samples: usize) -> Result<bool> {
    let log = load_fetch_log(fetch_log).context("smartttl")?;
    let searches = trace.map(ingest_trace).transpose().context("trace")?;
    let clock = SimClock::new(epoch);
    let pipeline = TtlPipelineConfig { min_duration_samples: min_samples, ..TtlPipelineConfig::default() };
    let set = TtlTrainingSet::from_fetch_log(&log, searches.as_deref(), &clock, pipeline.lead_cap)
        .context("smartttl")?;
    let table = build_ttl_table(&set, &pipeline).context("smartttl")?;
    table.save_csv(out).context("smartttl")?;
    let own: Vec<f64> = table.rows().values().filter_map(|r| r.objective).collect();
    let mean = if own.is_empty() { 0.0 } else { own.iter().sum::<f64>() / own.len() as f64 };
    let ttls: Vec<i64> = table.rows().values().map(|r| r.ttl).collect();
    println!(
        "clusters={} assigned_from_own_data={} inherited={} mean_objective={mean:.6} ttl_min={} ttl_max={}",
        table.len(),
        own.len(),
        table.len() - own.len(),
        ttls.iter().min().unwrap_or(&0),
        ttls.iter().max().unwrap_or(&0)
    );
    Ok(true)
}

fn ttl_lookup(table: &TtlTable, date: NaiveDate) -> impl Fn(&fetchsim_core::Itinerary) -> i64 + '_ {
    let clock = SimClock::new(date);
    move |it| table.lookup(&ClusterKey::at(it, &clock, 0, true, table.lead_cap()))
}

fn print_audit(plan: &SchedulePlan) -> bool {
    let audit = plan.audit();
    let items = plan.items();
    let times = plan.send_times();
    let worst_gap = times
        .iter()
        .zip(items)
        .filter(|(t, item)| !t.is_empty() && !item.partial)
        .map(|(t, item)| {
            let wrap = t[0] + DAY - t[t.len() - 1];
            let gap = t.windows(2).map(|w| w[1] - w[0]).chain([wrap]).max().unwrap_or(DAY);
            gap as f64 / item.ttl as f64
        })
        .fold(0.0, f64::max);
    println!("{}", audit.summary());
    println!("max_gap_over_ttl={worst_gap:.6} budget_used={:.6}", audit.total_sends as f64 / audit.budget.max(1) as f64);
    for &s in audit.overloaded_seconds.iter().take(10) {
        println!("violation: second {s} carries {} sends, limit {}", plan.load(s), plan.mu());
    }
    for &(i, gap) in audit.gap_violations.iter().take(10) {
        println!("violation: hotel {} gap {gap} s exceeds ttl {} s", items[i].itinerary.hotel, items[i].ttl);
    }
    for &(i, want, got) in audit.count_violations.iter().take(10) {
        println!("violation: hotel {} sent {got} times, expected {want}", items[i].itinerary.hotel);
    }
    audit.is_ok()
}

fn build_plan(
    ttl_table: &Path,
    value_table: &Path,
    qps: u32,
    date: NaiveDate,
    admission: AdmissionArg,
    out: &Path,
) -> Result<bool> {
    if qps == 0 {
        bail!("scheduler: --qps must be > 0");
    }
    let table = TtlTable::load_csv(ttl_table, 900).context("smartttl")?;
    let values = ValueTable::load_csv(value_table).context("scheduler")?;
    let entries = values.plan_entries(ttl_lookup(&table, date)).context("scheduler")?;
    let admission = match admission {
        AdmissionArg::Atomic => Admission::Atomic,
        AdmissionArg::Partial => Admission::Partial,
    };
    let selected = select_top_requests(&entries, qps as u64 * DAY as u64, admission);
    let plan = build_schedule(&selected, qps).context("scheduler")?;
    plan.save_csv(out).context("scheduler")?;
    println!("selected={} of {} itineraries", selected.len(), entries.len());
    Ok(print_audit(&plan))
}

fn audit_plan(plan: &Path, ttl_table: &Path, qps: u32, date: NaiveDate) -> Result<bool> {
    let table = TtlTable::load_csv(ttl_table, 900).context("smartttl")?;
    let lookup = ttl_lookup(&table, date);
    let plan = SchedulePlan::load_csv(plan, qps, |it| Ok(lookup(it))).context("scheduler")?;
    Ok(print_audit(&plan))
}

fn write_plot_script(dir: &Path, metrics_file: &str, arms: &[String]) -> Result<()> {
    let mut gp = String::new();
    gp.push_str("set datafile separator ','\n");
    gp.push_str("set key outside top center horizontal\n");
    gp.push_str("set xlabel 'day'\nset ylabel 'bookings'\nset y2label 'cache hit'\n");
    gp.push_str("set y2range [0:1]\nset ytics nomirror\nset y2tics\n");
    gp.push_str("set style data histogram\nset style histogram cluster gap 1\nset style fill solid 0.6\n");
    gp.push_str("set terminal pngcairo size 1000,500\nset output 'metrics.png'\n");
    let mut parts = Vec::new();
    for arm in arms {
        parts.push(format!(
            "'{metrics_file}' using (strcol(2) eq '{arm}' && strcol(1) ne 'total' ? $9 : 1/0):xtic(1) title '{arm} bookings'"
        ));
    }
    for arm in arms {
        parts.push(format!(
            "'' using 0:(strcol(2) eq '{arm}' && strcol(1) ne 'total' ? $5 : 1/0) axes x1y2 with linespoints title '{arm} hit'"
        ));
    }
    gp.push_str(&format!("plot {}\n", parts.join(", \\\n     ")));
    fs::write(dir.join("plot.gp"), gp).with_context(|| format!("{}", dir.join("plot.gp").display()))?;
    Ok(())
}

fn print_totals(seed: u64, metrics: &[Metrics]) {
    for m in metrics {
        let t = &m.total;
        println!(
            "seed={seed} arm={} searches={} hit_rate={:.4} fetches={} rejected={} attempts={} bookings={} accuracy={:.4}",
            m.arm, t.searches, t.hit_rate(), t.fetches, t.rejected, t.attempts, t.bookings, t.accuracy()
        );
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))
}

fn save_models(prepared: &Prepared, out: &Path) -> Result<()> {
    if let Some(est) = &prepared.estimates {
        est.ttl_table.save_csv(&out.join(format!("ttl_table_seed{}.csv", prepared.seed))).context("smartttl")?;
        est.values.save_csv(&out.join(format!("value_table_seed{}.csv", prepared.seed))).context("scheduler")?;
    }
    Ok(())
}

fn save_qps(metrics: &[Metrics], start: i64, out: &Path, seed: u64, suffix: &str) -> Result<()> {
    for m in metrics {
        let path = out.join(format!("qps_{}{suffix}_seed{seed}.csv", m.arm));
        let mut w = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("{}", path.display()))?);
        m.write_qps_csv(&mut w, start).context("simulator")?;
        w.flush()?;
    }
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: &Path) -> Result<bool> {
    let config = load_config(config, seed)?;
    prepare_out(out)?;
    let arms: Vec<String> = config.arms.iter().map(|a| a.label.clone()).collect();
    for &seed in &config.seeds {
        let prepared = Prepared::new(&config, seed).context("simulator")?;
        let metrics = prepared.run_arms().context("simulator")?;
        let name = format!("metrics_seed{seed}.csv");
        save_metrics_csv(&out.join(&name), &metrics.iter().collect::<Vec<_>>()).context("simulator")?;
        save_qps(&metrics, config.test_window().start, out, seed, "")?;
        save_models(&prepared, out)?;
        write_plot_script(out, &name, &arms)?;
        print_totals(seed, &metrics);
    }
    Ok(true)
}

fn ab(config: &Path, seed: Option<u64>, out: &Path) -> Result<bool> {
    let config = load_config(config, seed)?;
    prepare_out(out)?;
    for &seed in &config.seeds {
        let prepared = Prepared::new(&config, seed).context("simulator")?;
        let report = prepared.run_ab().context("simulator")?;
        let name = format!("ab_metrics_seed{seed}.csv");
        save_metrics_csv(&out.join(&name), &report.arms.iter().collect::<Vec<_>>()).context("simulator")?;
        let mut deltas = String::from("day,bookings_delta,hit_rate_delta\n");
        for d in &report.deltas {
            deltas.push_str(&format!("{},{},{:.6}\n", d.day, d.bookings, d.hit_rate));
        }
        let path = out.join(format!("ab_deltas_seed{seed}.csv"));
        fs::write(&path, deltas).with_context(|| format!("{}", path.display()))?;
        save_qps(&report.arms, config.test_window().start, out, seed, "_ab")?;
        save_models(&prepared, out)?;
        let arms: Vec<String> = report.arms.iter().map(|m| m.arm.clone()).collect();
        write_plot_script(out, &name, &arms)?;
        print_totals(seed, &report.arms);
    }
    Ok(true)
}
