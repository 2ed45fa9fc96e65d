//! The workspace's acceptance gates, one test per bar: published-table
//! reproduction, kernel-vs-reference agreement on fresh random instances,
//! algebraic identities, gradient certification, complexity-class
//! separation, synthetic-task learnability, and byte-identical reruns.
//!
//! Every tolerance and budget is pinned where it is enforced; loosening
//! one here is a contract change, not a fix. Published top-1 accuracies
//! are the one column deliberately not recomputed — they need full-scale
//! image training — and `a3` checks that the table output says so instead
//! of silently dropping the column. The learnability and determinism
//! gates stand in for it.

use std::path::PathBuf;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use atnz_core::attention::{self, AttentionKind, XcaTemperature};
use atnz_core::autodiff::Tape;
use atnz_core::bench::{self, BenchOptions};
use atnz_core::config;
use atnz_core::cost;
use atnz_core::model::Model;
use atnz_core::oracle;
use atnz_core::rng::{derive, Rng};
use atnz_core::tensor::{orthogonal_gaussian, Tensor};
use atnz_core::train;
use atnz_core::verify;

/// Timing and training tests distort each other when the harness runs
/// tests on several threads, so every gate takes this lock and the suite
/// is sequential regardless of harness settings.
static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn randn(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.normal()).collect()
}

fn max_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "outputs differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --- 1. parameter census ---------------------------------------------------

#[test]
fn a1_parameter_census_matches_published_table() {
    let _g = serial();
    let start = Instant::now();
    for row in cost::REFERENCE.iter() {
        let report = cost::analyze(&cost::config_for(row.label).unwrap()).unwrap();
        let got = report.params_millions();
        let rel = (got - row.params_m).abs() / row.params_m;
        // Conv sub-block internals are reconstructed, so those rows get
        // double slack; everything else must land within 1%.
        let tol = if row.label.starts_with("lpi") { 0.02 } else { 0.01 };
        assert!(
            rel <= tol,
            "{}: {got:.3}M params vs published {:.2}M ({:.2}% off, tol {:.0}%)",
            row.label,
            row.params_m,
            rel * 100.0,
            tol * 100.0
        );
    }
    assert!(start.elapsed() < Duration::from_secs(1), "census budget is 1s");
}

// --- 2. MAC census and compute ratios --------------------------------------

#[test]
fn a2_mac_census_and_ratios_match_published_table() {
    let _g = serial();
    let start = Instant::now();
    for row in cost::REFERENCE.iter() {
        let report = cost::analyze(&cost::config_for(row.label).unwrap()).unwrap();
        let base = cost::analyze(&cost::config_for(row.baseline).unwrap()).unwrap();
        let gflops = report.gflops();
        let rel = (gflops - row.gflops).abs() / row.gflops;
        assert!(
            rel <= 0.03,
            "{}: {gflops:.3}G vs published {:.3}G ({:.2}% off, tol 3%)",
            row.label,
            row.gflops,
            rel * 100.0
        );
        let ratio = report.total_macs as f64 / base.total_macs as f64;
        assert!(
            (ratio - row.ratio).abs() <= 0.02,
            "{}: ratio {ratio:.3} vs published {:.2} (tol 0.02 absolute)",
            row.label,
            row.ratio
        );
    }
    assert!(start.elapsed() < Duration::from_secs(1), "census budget is 1s");
}

// --- 3. the column that is not recomputed -----------------------------------

#[test]
fn a3_top1_column_is_declared_out_of_scope() {
    let _g = serial();
    let output = Command::new(env!("CARGO_BIN_EXE_atnz"))
        .args(["table2", "--csv"])
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "table2 must pass");
    let stdout = String::from_utf8(output.stdout).unwrap();
    let mut rows = 0;
    for line in stdout.lines().skip(1) {
        if line.starts_with("RESULT") || !line.contains(',') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[9], "n/a", "top1 must be reported as unavailable: {line}");
        rows += 1;
    }
    assert_eq!(rows, cost::REFERENCE.len());
    assert!(
        stdout.contains("out of scope"),
        "the output must say why top1 is missing"
    );
}

// --- 4. kernels vs straight-line references ---------------------------------

const REFERENCE_TOL: f64 = 1e-10;
const REFERENCE_INSTANCES: usize = 100;

/// Runs one graph kernel and its straight-line reference on the same
/// random instance; returns the elementwise deviation.
fn one_instance(kind: AttentionKind, i: usize, rng: &mut Rng) -> f64 {
    // window kernels need a square grid that the window side tiles
    let (n, d, side, w) = match kind {
        AttentionKind::Window => {
            let (side, w) = [(2, 1), (2, 2), (3, 1), (3, 3), (4, 1), (4, 2), (4, 4)][i % 7];
            (side * side, 2 + i % 7, side, w)
        }
        _ => (2 + i % 15, 2 + i % 7, 0, 0),
    };
    let q = randn(rng, n * d);
    let k = randn(rng, n * d);
    let v = randn(rng, n * d);

    let mut t: Tape<f64> = Tape::new();
    let qn = t.constant(Tensor::new(vec![n, d], q.clone()).unwrap());
    let kn = t.constant(Tensor::new(vec![n, d], k.clone()).unwrap());
    let vn = t.constant(Tensor::new(vec![n, d], v.clone()).unwrap());

    let (got, want) = match kind {
        AttentionKind::Softmax => (
            attention::softmax_attention(&mut t, qn, kn, vn).unwrap(),
            oracle::softmax_attention(&q, &k, &v, n, d),
        ),
        AttentionKind::Linformer => {
            let m = 1 + i % n;
            let w_proj = randn(rng, m * n);
            let wn = t.constant(Tensor::new(vec![m, n], w_proj.clone()).unwrap());
            (
                attention::linformer_attention(&mut t, qn, kn, vn, wn).unwrap(),
                oracle::linformer_attention(&q, &k, &v, &w_proj, n, m, d),
            )
        }
        AttentionKind::Efficient => (
            attention::efficient_attention(&mut t, qn, kn, vn).unwrap(),
            oracle::efficient_attention(&q, &k, &v, n, d),
        ),
        AttentionKind::Performer => {
            let r = [2, 4, 8, 12][i % 4];
            let omega: Tensor<f64> = orthogonal_gaussian(rng, r, d).unwrap();
            let on = t.constant(omega.clone());
            (
                attention::performer_attention(&mut t, qn, kn, vn, on).unwrap(),
                oracle::performer_attention(&q, &k, &v, omega.data(), n, d, r),
            )
        }
        AttentionKind::CrossCovariance => {
            let tau = [0.7, 1.0, 1.6][i % 3];
            let normalize = i % 2 == 0;
            (
                attention::cross_covariance_attention(
                    &mut t,
                    qn,
                    kn,
                    vn,
                    XcaTemperature::Fixed(tau),
                    normalize,
                )
                .unwrap(),
                oracle::cross_covariance_attention(&q, &k, &v, n, d, tau, normalize),
            )
        }
        AttentionKind::Additive => {
            let gq = randn(rng, d);
            let gk = randn(rng, d);
            let gqn = t.constant(Tensor::new(vec![d, 1], gq.clone()).unwrap());
            let gkn = t.constant(Tensor::new(vec![d, 1], gk.clone()).unwrap());
            (
                attention::additive_attention_pooled(&mut t, qn, kn, vn, gqn, gkn).unwrap(),
                oracle::additive_attention_pooled(&q, &k, &v, &gq, &gk, n, d),
            )
        }
        AttentionKind::Window => (
            attention::window_attention(&mut t, qn, kn, vn, w, (side, side)).unwrap(),
            oracle::window_attention(&q, &k, &v, n, d, (side, side), w),
        ),
    };
    max_abs_dev(t.value(got).data(), &want)
}

#[test]
fn a4_kernels_match_straight_line_references() {
    let _g = serial();
    let start = Instant::now();
    for kind in AttentionKind::ALL {
        let mut rng = Rng::new(derive(0xACC4, kind as u64));
        let mut worst: f64 = 0.0;
        for i in 0..REFERENCE_INSTANCES {
            worst = worst.max(one_instance(kind, i, &mut rng));
        }
        assert!(
            worst <= REFERENCE_TOL,
            "{}: {REFERENCE_INSTANCES} instances, worst deviation {worst:.3e} > {REFERENCE_TOL:.0e}",
            kind.label()
        );
    }
    assert!(start.elapsed() < Duration::from_secs(60), "reference budget is seconds");
}

// --- 5. identities and feature convergence ----------------------------------

#[test]
fn a5_identities_and_feature_convergence_hold() {
    let _g = serial();
    let start = Instant::now();
    let outcomes = verify::equivalence_suite(7, false).unwrap();
    for o in &outcomes {
        assert!(o.pass, "{o}");
    }
    // The three non-oracle checks must be present with their pinned
    // tolerances: full-rank compression and full-grid windows reproduce
    // dense attention exactly, and feature-count growth never makes the
    // random-feature approximation worse.
    for name in ["identity/la_full_rank", "identity/window_full_grid"] {
        let o = outcomes.iter().find(|o| o.name == name).expect(name);
        assert_eq!(o.tol, 1e-10, "{name} tolerance is pinned");
    }
    assert!(
        outcomes.iter().any(|o| o.name == "convergence/pa_features"),
        "feature-convergence check missing"
    );
    // Negative control: a corrupted comparison must be caught.
    let corrupted = verify::equivalence_suite(7, true).unwrap();
    assert!(
        corrupted.iter().any(|o| !o.pass),
        "the suite failed to notice a deliberate corruption"
    );
    assert!(start.elapsed() < Duration::from_secs(60), "identity budget is 1min");
}

// --- 6. gradient certification ----------------------------------------------

#[test]
fn a6_every_backward_path_is_certified() {
    let _g = serial();
    let start = Instant::now();
    assert_eq!(verify::GRAD_TOL, 1e-4, "gradient tolerance is pinned");
    let reports = verify::gradcheck_suite(11).unwrap();
    let mut names: Vec<&str> = Vec::new();
    for r in &reports {
        assert!(r.passes(verify::GRAD_TOL), "{r}");
        assert!(r.probes >= 64, "{}: {} probes < 64", r.name, r.probes);
        assert_eq!(r.precision, "f64", "{}", r.name);
        names.push(&r.name);
    }
    // Seven kernels, the composite pieces, and the end-to-end tiny model
    // under every mixer.
    for kind in AttentionKind::ALL {
        assert!(names.contains(&format!("kernel/{}", kind.label()).as_str()));
        assert!(names.contains(&format!("model/{}", kind.label()).as_str()));
    }
    for name in [
        "composite/block",
        "composite/merge",
        "composite/lpi_input",
        "composite/lpi_kernel",
    ] {
        assert!(names.contains(&name), "{name} missing");
    }
    assert_eq!(reports.len(), 18);
    assert!(start.elapsed() < Duration::from_secs(300), "gradient budget is 5min");
}

// --- 7. complexity-class separation ------------------------------------------

#[test]
fn a7_runtime_slopes_separate_complexity_classes() {
    let _g = serial();
    let start = Instant::now();
    let opts = BenchOptions::default();
    // The certified window must be fully measured.
    for n in [256usize, 512, 1024, 2048, 4096] {
        assert!(opts.ns.contains(&n), "ladder must include n={n}");
    }
    let records = bench::sweep(&opts, 0).unwrap();
    let mut quadratic: f64 = f64::INFINITY;
    let mut linear: f64 = f64::NEG_INFINITY;
    for kind in &opts.variants {
        let label = kind.label();
        let own: Vec<_> = records.iter().filter(|r| r.variant == label).cloned().collect();
        assert_eq!(own.len(), opts.ns.len(), "{label}: every cell must be measured");
        let slope = bench::asymptotic_slope(&own).unwrap();
        match kind {
            AttentionKind::Softmax => {
                assert!(slope >= 1.7, "{label}: slope {slope:.3} < 1.7");
                quadratic = quadratic.min(slope);
            }
            _ => {
                assert!(slope <= 1.3, "{label}: slope {slope:.3} > 1.3");
                linear = linear.max(slope);
            }
        }
    }
    assert!(
        quadratic - linear >= 0.4,
        "classes are not separated: {quadratic:.3} vs {linear:.3}"
    );
    assert!(start.elapsed() < Duration::from_secs(600), "scaling budget is 10min");
}

// --- 8. learnability ----------------------------------------------------------

#[test]
fn a8_every_variant_learns_the_stripe_task() {
    let _g = serial();
    let start = Instant::now();
    for kind in AttentionKind::ALL {
        let path = repo_path(&format!("configs/tiny_{}.conf", kind.label()));
        let cfg = config::parse_file(&path).unwrap();
        assert_eq!(cfg.train.samples, 2000);
        assert_eq!(cfg.train.epochs, 31);

        let mut model: Model<f32> = Model::init(cfg.model.clone()).unwrap();
        let history = train::train(&mut model, &cfg.train, |_| {}).unwrap();
        let eval = history.iter().rev().find(|s| s.split == "eval").unwrap();
        assert!(
            eval.accuracy > 0.9,
            "{}: eval accuracy {:.4} <= 0.9",
            kind.label(),
            eval.accuracy
        );

        // A fresh model must drive 8 memorized samples below 0.1 loss
        // within 200 full-batch steps.
        let mut probe: Model<f32> = Model::init(cfg.model).unwrap();
        let (steps, loss) = train::overfit_probe(&mut probe, cfg.train.seed, 200, 0.1).unwrap();
        assert!(
            loss < 0.1,
            "{}: overfit loss {loss:.4} after {steps} steps",
            kind.label()
        );
    }
    assert!(start.elapsed() < Duration::from_secs(1800), "training budget is 30min");
}

// --- 9. byte-identical reruns ---------------------------------------------------

/// Runs the binary once, capturing stdout, the `--out` file, and the exit
/// code. Progress chatter on stderr is not part of the contract.
fn run_once(args: &[&str], out: &PathBuf) -> (String, Vec<u8>, Option<i32>) {
    let output = Command::new(env!("CARGO_BIN_EXE_atnz"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    let rows = std::fs::read(out).expect("row output written");
    (String::from_utf8(output.stdout).unwrap(), rows, output.status.code())
}

#[test]
fn a9_reruns_are_byte_identical() {
    let _g = serial();
    let dir = std::env::temp_dir().join("atnz-acceptance");
    std::fs::create_dir_all(&dir).unwrap();

    // A cut-down training config so the f64 double run stays cheap.
    let train_conf = dir.join("rerun_train.conf");
    std::fs::write(
        &train_conf,
        "structure = pyramid\n\
         image_size = 32\n\
         patch_size = 4\n\
         dims = 16, 32, 64, 128\n\
         depths = 1, 1, 1, 1\n\
         head_dim = 16\n\
         num_classes = 2\n\
         seed = 3\n\
         attention.kind = ea\n\
         attention.w = 2\n\
         train.samples = 64\n\
         train.epochs = 4\n\
         train.batch = 16\n\
         train.lr = 5e-4\n\
         train.wd = 0.05\n\
         train.warmup = 1\n\
         train.cooldown = 1\n\
         train.target_acc = 0.0\n",
    )
    .unwrap();
    let count_conf = repo_path("configs/sa4.conf");
    let count_conf = count_conf.to_str().unwrap();
    let train_conf = train_conf.to_str().unwrap();

    // Timing medians are wall-clock measurements, not functions of the
    // flags, so `bench` rows carry no rerun guarantee; every other
    // subcommand must reproduce byte for byte.
    let cases: [&[&str]; 5] = [
        &["count", "--config", count_conf, "--csv"],
        &["equiv", "--seed", "7", "--csv"],
        &["gradcheck", "--seed", "11", "--precision", "f64", "--csv"],
        &["table2", "--csv"],
        &[
            "train",
            "--config",
            train_conf,
            "--precision",
            "f64",
            "--seed",
            "3",
            "--csv",
        ],
    ];
    for args in cases {
        let first = run_once(args, &dir.join("first.csv"));
        let second = run_once(args, &dir.join("second.csv"));
        assert_eq!(first.2, second.2, "{}: exit codes differ", args[0]);
        assert_eq!(first.0, second.0, "{}: stdout differs", args[0]);
        assert!(
            first.1 == second.1,
            "{}: row output differs between identical runs",
            args[0]
        );
        assert_eq!(first.2, Some(0), "{}: rerun case must itself pass", args[0]);
    }
}
