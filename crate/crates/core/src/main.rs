use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use prcn::alloc_track::CountingAllocator;
use prcn::arch::ModelSpec;
use prcn::experiment::{self, ExperimentConfig};
use prcn::invariance::{self, EnsembleFamily, UnitaryEnsemble};
use prcn::mnist::{self, AugmentSpec, Source, Split};
use prcn::optim::SgdConfig;
use prcn::pool_kernel::{self, PoolPlan};
use prcn::rng::Rng;
use prcn::train::{evaluate, prepare_test, TrainConfig};
use prcn::{connectome::Connectome, gradcheck, report};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "prcn", version, about = "Permanent random connectome networks: training, grids and diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Download MNIST (or copy it from a local directory) and verify checksums.
    Fetch {
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Copy from a directory holding the four IDX files (raw or .gz).
        #[arg(long, conflicts_with = "url")]
        from: Option<PathBuf>,
        #[arg(long)]
        url: Option<String>,
    },
    /// Train one model and print its final metrics as JSON.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the (augmented) test set.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Override the augmentation stored in the checkpoint.
        #[arg(long)]
        rot: Option<f64>,
        #[arg(long)]
        trans: Option<usize>,
    },
    /// Run a (model × augmentation × seed) grid from a JSON config.
    Grid {
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Finite-difference checks of every layer's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Variance of the max of n uniforms: closed form against Monte Carlo.
    Lemma {
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also estimate pooled vs unpooled invariance under a unitary ensemble.
        #[arg(long)]
        ensemble: Option<Family>,
    },
    /// Time the indirect channel max pool against gather-then-pool.
    BenchPool {
        #[arg(long, default_value_t = 48)]
        expansion: usize,
        #[arg(long, default_value_t = 3)]
        cmp: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = Dtype::F64)]
        dtype: Dtype,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-channel variance of a trained PRC-NPTN layer across a rotation sweep.
    ProbeInvariance {
        checkpoint: PathBuf,
        /// Model layer index; defaults to the first PRC-NPTN layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results CSV into mean ± std and an SVG plot.
    Report {
        results: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::Rotation)]
        x: Axis,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Rotation,
    Translation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Orthogonal,
    PatchRotation,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    test_subset: usize,
}

impl DataArgs {
    fn dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(mnist::default_dir)
    }

    fn test(&self) -> prcn::Result<mnist::IdxDataset> {
        mnist::load_split(&self.dir(), Split::Test)?.take(self.test_subset)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelSpec,
    #[arg(long, default_value_t = 0.0)]
    rot: f64,
    #[arg(long, default_value_t = 0)]
    trans: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    train_subset: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let dir = a.data.dir();
    let tr = mnist::load_split(&dir, Split::Train)?.take(a.train_subset)?;
    let te = a.data.test()?;
    let mut sgd = SgdConfig::default();
    if let Some(lr) = a.lr {
        sgd.lr = lr;
    }
    if let Some(b) = a.batch_size {
        sgd.batch_size = b;
    }
    let tcfg = TrainConfig {
        epochs: a.epochs,
        sgd,
        augment: AugmentSpec::new(a.rot, a.trans),
        seed: a.seed,
        eval_every: a.eval_every,
    };
    eprintln!("{}: {} parameters", a.model, a.model.count_params()?);
    let run = experiment::train_model(&a.model, &tcfg, &tr, &te, a.metrics.as_deref(), a.checkpoint.as_deref())?;
    for e in &run.epochs {
        eprintln!(
            "epoch {:>3} lr {:.4} loss {:.4} train {:.4} test {:.4} ({:.1}s)",
            e.epoch, e.lr, e.train_loss, e.train_err, e.test_err, e.seconds
        );
    }
    println!(
        "{}",
        serde_json::json!({
            "model": a.model.to_string(),
            "seed": run.seed,
            "train_err": run.train_err,
            "test_err": run.test_err,
            "seconds": run.seconds,
        })
    );
    Ok(())
}

fn cmd_grid(
    config: PathBuf,
    workers: Option<usize>,
    output_dir: Option<PathBuf>,
    epochs: Option<usize>,
    data_dir: Option<PathBuf>,
    dry_run: bool,
) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(o) = output_dir {
        cfg.output_dir = o;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    if dry_run {
        println!("{}", cfg.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }
    let total = cfg.cells().len();
    let mut done = 0;
    let out = experiment::run_grid(&cfg, None, |row, err| {
        done += 1;
        match err {
            Some(e) => eprintln!("[{done}] {} rot {} trans {} seed {}: ERROR {e}", row.model, row.theta_deg, row.trans_px, row.seed),
            None => eprintln!(
                "[{done}] {} rot {} trans {} seed {}: test_err {:.4} ({:.0}s)",
                row.model, row.theta_deg, row.trans_px, row.seed, row.test_err, row.seconds
            ),
        }
    })?;
    eprintln!(
        "{} cells: {} ran, {} already complete, {} errored; results in {}",
        total,
        out.ran,
        out.skipped,
        out.errored(),
        cfg.output_dir.join(experiment::RESULTS_FILE).display()
    );
    Ok(if out.errored() == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_gradcheck(cases: usize, seed: u64) -> anyhow::Result<ExitCode> {
    let results = gradcheck::run_suite(seed, cases)?;
    let mut failed = 0;
    for kind in gradcheck::SUITE_KINDS {
        let of_kind: Vec<_> = results.iter().filter(|r| r.kind == kind).collect();
        let worst = of_kind.iter().map(|r| r.check.rel_err).fold(0.0, f64::max);
        let bad: Vec<_> = of_kind.iter().filter(|r| !r.passes()).collect();
        failed += bad.len();
        println!(
            "{kind:<10} {} cases  worst rel err {worst:.2e}  {}",
            of_kind.len(),
            if bad.is_empty() { "ok" } else { "FAIL" }
        );
        for r in bad {
            println!("  case {}: {} {:?}", r.case, r.description, r.check);
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_lemma(max_n: usize, samples: usize, seed: u64, ensemble: Option<Family>) -> anyhow::Result<()> {
    let root = Rng::new(seed);
    let mut out = std::io::stdout().lock();
    writeln!(out, "n,closed_form,mc_estimate,stderr")?;
    for n in 1..=max_n {
        let cf = invariance::var_max_closed_form(n)?;
        let mc = invariance::mc_var_max_uniform(n, samples, &mut root.fork(n as u64))?;
        writeln!(out, "{n},{cf},{},{}", mc.estimate, mc.stderr)?;
    }
    if let Some(f) = ensemble {
        let family = match f {
            Family::Orthogonal => EnsembleFamily::Orthogonal,
            Family::PatchRotation => EnsembleFamily::PatchRotation,
        };
        let d = 9;
        let ens = UnitaryEnsemble::new(d, family)?;
        let mut rng = root.fork(u64::MAX);
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        writeln!(out)?;
        writeln!(out, "n_pool,pooled_var,pooled_stderr,unpooled_var,unpooled_stderr")?;
        for n_pool in [1, 2, 4, 8] {
            let est = invariance::mc_invariance(&x, &w, &ens, n_pool, 20_000, &mut rng)?;
            writeln!(
                out,
                "{n_pool},{:.6e},{:.2e},{:.6e},{:.2e}",
                est.pooled.estimate, est.pooled.stderr, est.unpooled.estimate, est.unpooled.stderr
            )?;
        }
    }
    Ok(())
}

fn cmd_bench(expansion: usize, cmp: usize, batch: usize, size: usize, reps: usize, dtype: Dtype, seed: u64) -> anyhow::Result<()> {
    let conn = Connectome::build(seed, expansion, cmp, true)?;
    let plan = PoolPlan::from_connectome(&conn);
    let report = match dtype {
        Dtype::F32 => pool_kernel::bench::<f32>(&plan, batch, size, size, reps, seed)?,
        Dtype::F64 => pool_kernel::bench::<f64>(&plan, batch, size, size, reps, seed)?,
    };
    println!("{}", pool_kernel::AllocReport::CSV_HEADER);
    for row in report.csv_rows() {
        println!("{row}");
    }
    eprintln!(
        "expanded tensor {} B, pooled output + argmax {} B",
        report.expanded_bytes, report.output_bytes
    );
    Ok(())
}

fn cmd_probe(checkpoint: PathBuf, layer: Option<usize>, probes: usize, data: DataArgs, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (mut model, _) = experiment::load_checkpoint(&checkpoint)?;
    let idx = match layer.or_else(|| model.first_prcn()) {
        Some(i) => i,
        None => bail!("model has no PRC-NPTN layer"),
    };
    let images = mnist::load_split(&data.dir(), Split::Test)?.take(probes)?.images;
    let rep = invariance::layer_invariance_probe(&mut model, idx, &images, &invariance::default_sweep())?;
    match out {
        Some(p) => rep.write_csv(&mut fs::File::create(p)?)?,
        None => rep.write_csv(&mut std::io::stdout().lock())?,
    }
    eprintln!(
        "layer {idx}: mean pre-CMP variance {:.4e}, mean post-CMP variance {:.4e}, support bound holds for {:.1}% of channels",
        rep.mean_pre(),
        rep.mean_post(),
        100.0 * rep.support_bound_fraction()
    );
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data: DataArgs, rot: Option<f64>, trans: Option<usize>) -> anyhow::Result<()> {
    let (mut model, meta) = experiment::load_checkpoint(&checkpoint)?;
    let mut aug = meta.train.augment;
    if let Some(r) = rot {
        aug.max_rotation_deg = r;
    }
    if let Some(t) = trans {
        aug.max_translation_px = t;
    }
    aug.validate()?;
    let te = data.test()?;
    let images = prepare_test(&te, &aug, meta.train.seed)?;
    let err = evaluate(&mut model, &images, &te.labels_usize(), meta.train.sgd.batch_size)?;
    println!(
        "{}",
        serde_json::json!({
            "model": meta.model.to_string(),
            "theta_deg": aug.max_rotation_deg,
            "trans_px": aug.max_translation_px,
            "seed": meta.train.seed,
            "test_err": err,
        })
    );
    Ok(())
}

fn cmd_report(results: PathBuf, out_dir: PathBuf, x: Axis) -> anyhow::Result<()> {
    let rows = experiment::read_results(&results)?;
    if rows.is_empty() {
        bail!("{} has no rows", results.display());
    }
    fs::create_dir_all(&out_dir)?;
    let summary = report::aggregate(&rows);
    report::write_summary(&out_dir.join("summary.csv"), &summary)?;
    let svg = report::render_svg(&summary, matches!(x, Axis::Rotation))?;
    fs::write(out_dir.join("summary.svg"), svg)?;
    for s in &summary {
        println!(
            "{:<24} rot {:>5} trans {:>2}  n={}  {:.4} ± {:.4}",
            s.model, s.theta_deg, s.trans_px, s.n, s.mean, s.std
        );
    }
    Ok(())
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Fetch { dest, from, url } => {
            let dest = dest.unwrap_or_else(mnist::default_dir);
            let source = match from {
                Some(d) => Source::Dir(d),
                None => Source::Url(url.unwrap_or_else(|| mnist::DEFAULT_MIRROR.to_string())),
            };
            for p in mnist::fetch(&dest, &source)? {
                println!("{}", p.display());
            }
        }
        Cmd::Train(a) => cmd_train(a)?,
        Cmd::Eval { checkpoint, data, rot, trans } => cmd_eval(checkpoint, data, rot, trans)?,
        Cmd::Grid { config, workers, output_dir, epochs, data_dir, dry_run } => {
            return cmd_grid(config, workers, output_dir, epochs, data_dir, dry_run)
        }
        Cmd::Gradcheck { cases, seed } => return cmd_gradcheck(cases, seed),
        Cmd::Lemma { max_n, samples, seed, ensemble } => cmd_lemma(max_n, samples, seed, ensemble)?,
        Cmd::BenchPool { expansion, cmp, batch, size, reps, dtype, seed } => {
            cmd_bench(expansion, cmp, batch, size, reps, dtype, seed)?
        }
        Cmd::ProbeInvariance { checkpoint, layer, probes, data, out } => cmd_probe(checkpoint, layer, probes, data, out)?,
        Cmd::Report { results, out_dir, x } => cmd_report(results, out_dir, x)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
