//! Command-line driver: analytic cost accounting, oracle equivalence
//! checks, gradient certification, runtime-scaling benchmarks, and
//! synthetic-task training.
//!
//! Every subcommand ends with a machine-parsable `RESULT pass=<k> fail=<j>`
//! line on stdout and exits 0 only when nothing failed. Row output (table
//! or `--csv`) goes to stdout or, with `--out PATH`, to that file; progress
//! chatter stays on stderr so captured output is reproducible.

use std::path::PathBuf;
use std::process::ExitCode;

use atnz_core::attention::AttentionKind;
use atnz_core::bench::{self, BenchOptions};
use atnz_core::config;
use atnz_core::cost;
use atnz_core::error::Error;
use atnz_core::model::Model;
use atnz_core::train;
use atnz_core::verify;
use atnz_core::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "atnz",
    version,
    about = "Attention-variant laboratory: cost model, verification suites, scaling benchmarks, synthetic training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer parameter and MAC census for one configuration
    Count(CountArgs),
    /// Oracle equivalences and identity reductions for every mixer
    Equiv(EquivArgs),
    /// Finite-difference certification of every backward path
    Gradcheck(GradArgs),
    /// Runtime-vs-N scaling sweep with fitted log-log slopes
    Bench(BenchArgs),
    /// Train on the stripe task and emit the epoch history
    Train(TrainArgs),
    /// Recompute the published parameter/GFLOP table and diff it
    Table2(OutArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Emit rows as CSV instead of an aligned table
    #[arg(long)]
    csv: bool,
    /// Write rows to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Configuration file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: OutArgs,
}

#[derive(Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Negative control: corrupt one kernel and confirm the suite notices
    #[arg(long)]
    self_test: bool,
    #[command(flatten)]
    output: OutArgs,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Gradient checks are defined in f64; f32 is rejected
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(flatten)]
    output: OutArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated mixer labels (sa, la, ea, pa, aa, xca, window)
    #[arg(long, default_value = "sa,la,ea,pa,aa,xca")]
    variants: String,
    /// Token counts: comma list, or `lo..hi` for a doubling ladder
    #[arg(long = "Ns", alias = "ns", default_value = "256..8192")]
    ns: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(flatten)]
    output: OutArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

/// Buffers row output so it can be diffed byte-for-byte between runs and
/// written whole to `--out`.
struct Sink {
    csv: bool,
    out: Option<PathBuf>,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    notes: Vec<String>,
}

impl Sink {
    fn new(args: &OutArgs, header: Vec<&'static str>) -> Sink {
        Sink {
            csv: args.csv,
            out: args.out.clone(),
            header,
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    fn note(&mut self, line: String) {
        self.notes.push(line);
    }

    fn render(&self) -> String {
        let mut body = String::new();
        if self.csv {
            body.push_str(&self.header.join(","));
            body.push('\n');
            for row in &self.rows {
                body.push_str(&row.join(","));
                body.push('\n');
            }
        } else {
            let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
            for row in &self.rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut line = String::new();
            for (i, h) in self.header.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(&format!("{h:<w$}", w = widths[i]));
            }
            body.push_str(line.trim_end());
            body.push('\n');
            for row in &self.rows {
                let mut line = String::new();
                for (i, cell) in row.iter().enumerate() {
                    if i > 0 {
                        line.push_str("  ");
                    }
                    line.push_str(&format!("{cell:<w$}", w = widths[i]));
                }
                body.push_str(line.trim_end());
                body.push('\n');
            }
        }
        body
    }

    /// Writes rows (to stdout or --out) and the notes, in that order.
    fn flush(self) -> Result<()> {
        let body = self.render();
        match &self.out {
            Some(path) => std::fs::write(path, body)
                .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?,
            None => print!("{body}"),
        }
        for note in &self.notes {
            println!("{note}");
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Reads ATNZ_THREADS once and configures the compute pool.
    let _ = atnz_core::parallel_active();
    let outcome = match cli.cmd {
        Cmd::Count(args) => cmd_count(args),
        Cmd::Equiv(args) => cmd_equiv(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Table2(args) => cmd_table2(args),
    };
    match outcome {
        Ok((pass, fail)) => {
            println!("RESULT pass={pass} fail={fail}");
            if fail == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("RESULT pass=0 fail=1");
            ExitCode::from(2)
        }
    }
}

fn cmd_count(args: CountArgs) -> Result<(usize, usize)> {
    let cfg = config::parse_file(&args.config)?;
    let report = cost::analyze(&cfg.model)?;
    let mut sink = Sink::new(&args.output, vec!["layer", "params", "macs"]);
    for layer in &report.layers {
        sink.row(vec![
            layer.name.clone(),
            layer.params.to_string(),
            layer.macs.to_string(),
        ]);
    }
    sink.row(vec![
        "total".into(),
        report.total_params.to_string(),
        report.total_macs.to_string(),
    ]);
    sink.note(format!(
        "total {:.2}M params, {:.3} GMACs, mixer {}",
        report.params_millions(),
        report.gflops(),
        cost::complexity_term(cfg.model.attention.kind)
    ));
    sink.flush()?;
    Ok((1, 0))
}

fn cmd_equiv(args: EquivArgs) -> Result<(usize, usize)> {
    let outcomes = verify::equivalence_suite(args.seed, args.self_test)?;
    let mut sink = Sink::new(&args.output, vec!["check", "max_dev", "tol", "status"]);
    let mut pass = 0;
    let mut fail = 0;
    for o in &outcomes {
        if o.pass {
            pass += 1;
        } else {
            fail += 1;
        }
        sink.row(vec![
            o.name.clone(),
            format!("{:.3e}", o.max_dev),
            format!("{:.0e}", o.tol),
            if o.pass { "pass".into() } else { "FAIL".into() },
        ]);
    }
    if args.self_test {
        sink.note("self-test: a deliberate corruption must make the suite fail".into());
    }
    sink.flush()?;
    Ok((pass, fail))
}

fn cmd_gradcheck(args: GradArgs) -> Result<(usize, usize)> {
    if args.precision == Precision::F32 {
        return Err(Error::Config(
            "gradient checks run in f64 only; pass --precision f64 or drop the flag".into(),
        ));
    }
    let reports = verify::gradcheck_suite(args.seed)?;
    let mut sink = Sink::new(
        &args.output,
        vec!["check", "max_rel", "mean_rel", "probes", "precision", "status"],
    );
    let mut pass = 0;
    let mut fail = 0;
    for r in &reports {
        let ok = r.passes(verify::GRAD_TOL);
        if ok {
            pass += 1;
        } else {
            fail += 1;
        }
        sink.row(vec![
            r.name.clone(),
            format!("{:.3e}", r.max_rel),
            format!("{:.3e}", r.mean_rel),
            r.probes.to_string(),
            r.precision.into(),
            if ok { "pass".into() } else { "FAIL".into() },
        ]);
    }
    sink.note(format!("tolerance {:.0e}", verify::GRAD_TOL));
    sink.flush()?;
    Ok((pass, fail))
}

fn parse_variants(list: &str) -> Result<Vec<AttentionKind>> {
    list.split(',')
        .map(|part| AttentionKind::parse(part.trim()))
        .collect()
}

/// `lo..hi` doubles from lo until hi (inclusive); otherwise a comma list.
fn parse_ns(text: &str) -> Result<Vec<usize>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad token count '{lo}'")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad token count '{hi}'")))?;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad range '{text}'")));
        }
        let mut ns = Vec::new();
        let mut n = lo;
        while n <= hi {
            ns.push(n);
            n *= 2;
        }
        return Ok(ns);
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad token count '{part}'")))
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<(usize, usize)> {
    let opts = BenchOptions {
        variants: parse_variants(&args.variants)?,
        ns: parse_ns(&args.ns)?,
        ..BenchOptions::default()
    };
    let records = bench::sweep(&opts, args.seed)?;
    let mut sink = Sink::new(
        &args.output,
        vec!["variant", "n", "d", "reps", "median_s", "mad_s"],
    );
    for r in &records {
        sink.row(vec![
            r.variant.clone(),
            r.n.to_string(),
            r.d.to_string(),
            r.reps.to_string(),
            format!("{:.9}", r.median_s),
            format!("{:.9}", r.mad_s),
        ]);
    }
    let mut pass = 0;
    let mut fail = 0;
    for kind in &opts.variants {
        let label = kind.label();
        let own: Vec<_> = records
            .iter()
            .filter(|r| r.variant == label)
            .cloned()
            .collect();
        let full = bench::fit_slope(&own)?;
        // Quadratic mixers must scale clearly superlinearly in N; the
        // linear family must hug slope 1. The bound is checked in the
        // asymptotic regime, where cache locality no longer flatters the
        // small cells; the whole-ladder fit is reported alongside.
        let slope = bench::asymptotic_slope(&own)?;
        let (bound, ok) = match kind {
            AttentionKind::Softmax => (">= 1.7", slope >= 1.7),
            _ => ("<= 1.3", slope <= 1.3),
        };
        if ok {
            pass += 1;
        } else {
            fail += 1;
        }
        sink.note(format!(
            "slope {label} {slope:.3} (n >= {}, bound {bound}, full ladder {full:.3}) {}",
            bench::ASYMPTOTIC_MIN_N,
            if ok { "pass" } else { "FAIL" }
        ));
    }
    sink.flush()?;
    Ok((pass, fail))
}

fn cmd_train(args: TrainArgs) -> Result<(usize, usize)> {
    let mut cfg = config::parse_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let mut sink = Sink::new(&args.output, vec!["epoch", "split", "loss", "accuracy"]);
    let history = match args.precision {
        Precision::F32 => {
            let mut model: Model<f32> = Model::init(cfg.model)?;
            train::train(&mut model, &cfg.train, live_stat)?
        }
        Precision::F64 => {
            let mut model: Model<f64> = Model::init(cfg.model)?;
            train::train(&mut model, &cfg.train, live_stat)?
        }
    };
    for stat in &history {
        sink.row(vec![
            stat.epoch.to_string(),
            stat.split.into(),
            format!("{:.6}", stat.loss),
            format!("{:.4}", stat.accuracy),
        ]);
    }
    let final_eval = history
        .iter()
        .rev()
        .find(|s| s.split == "eval")
        .ok_or_else(|| Error::Contract("training produced no eval rows".into()))?;
    let ok = final_eval.accuracy > cfg.train.target_acc;
    sink.note(format!(
        "final eval accuracy {:.4} (target > {:.4}) {}",
        final_eval.accuracy,
        cfg.train.target_acc,
        if ok { "pass" } else { "FAIL" }
    ));
    sink.flush()?;
    Ok(if ok { (1, 0) } else { (0, 1) })
}

fn live_stat(stat: &train::EpochStat) {
    eprintln!(
        "epoch {:>3} {:<5} loss {:.4} acc {:.4}",
        stat.epoch, stat.split, stat.loss, stat.accuracy
    );
}

fn cmd_table2(args: OutArgs) -> Result<(usize, usize)> {
    let mut sink = Sink::new(
        &args,
        vec![
            "config", "params_m", "ref_m", "dparams", "gflops", "ref_g", "dflops", "ratio",
            "ref_r", "top1", "status",
        ],
    );
    let mut pass = 0;
    let mut fail = 0;
    for row in cost::REFERENCE.iter() {
        let report = cost::analyze(&cost::config_for(row.label)?)?;
        let base = cost::analyze(&cost::config_for(row.baseline)?)?;
        let params_m = report.params_millions();
        let gflops = report.gflops();
        let ratio = report.total_macs as f64 / base.total_macs as f64;
        let dparams = (params_m - row.params_m).abs() / row.params_m;
        let dflops = (gflops - row.gflops).abs() / row.gflops;
        let dratio = (ratio - row.ratio).abs();
        // Published numbers are rounded to 2-3 digits; the conv sub-block's
        // internals are reconstructed, so its rows get double slack.
        let params_tol = if row.label.starts_with("lpi") { 0.02 } else { 0.01 };
        let ok = dparams <= params_tol && dflops <= 0.03 && dratio <= 0.02;
        if ok {
            pass += 1;
        } else {
            fail += 1;
        }
        sink.row(vec![
            row.label.to_string(),
            format!("{params_m:.2}"),
            format!("{:.2}", row.params_m),
            format!("{:.2}%", dparams * 100.0),
            format!("{gflops:.3}"),
            format!("{:.3}", row.gflops),
            format!("{:.2}%", dflops * 100.0),
            format!("{ratio:.2}"),
            format!("{:.2}", row.ratio),
            "n/a".into(),
            if ok { "pass".into() } else { "FAIL".into() },
        ]);
    }
    sink.note("top1 accuracy needs full-scale image training; out of scope here".into());
    sink.flush()?;
    Ok((pass, fail))
}
