use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use czsl_core::error::{Error, Result};
use czsl_core::evaluation::{read_summary_csv, World};
use czsl_core::model::Variant;
use czsl_core::numeric::GradCheckOptions;
use czsl_core::workbench::config::RunConfig;
use czsl_core::workbench::gradcheck;
use czsl_core::workbench::run;
use czsl_core::workbench::splits::write_dataset;
use czsl_core::workbench::synthetic::gen_synthetic;

#[derive(Parser)]
#[command(name = "czsl", version, about = "Compositional zero-shot learning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task and write it as a split directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides $CZSL_RUN_ROOT.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Re-evaluate a run directory; fails unless stored validation metrics reproduce.
    Eval {
        run: PathBuf,
        #[arg(long)]
        world: Option<World>,
    },
    /// Train each variant on each seed and write a summary CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "full,agg_a,agg_b,ms_a,ms_b,df")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Train with n = m over a range of layer counts.
    SweepLayers {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Mean and standard deviation over seeds of summary CSV files.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

fn config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData { config: c, seed, out } => {
            let cfg = config(c.as_deref(), seed)?;
            let ds = gen_synthetic(&cfg.synthetic_spec())?;
            write_dataset(&out, &ds)?;
            println!("wrote {} ({} train, {} val, {} test samples)", out.display(), ds.train.len(), ds.val.len(), ds.test.len());
        }
        Command::Train { config: c, seed, root } => {
            let cfg = config(c.as_deref(), seed)?;
            let dir = run::run_dir(&root.unwrap_or_else(run::run_root), &cfg);
            let (ds, out) = run::train(&cfg)?;
            run::write_run(&dir, &cfg, &ds, &out)?;
            let t = out.eval.test.curve.summary;
            println!(
                "{}: best epoch {}, test S {:.4} U {:.4} HM {:.4} AUC {:.4} ({:.1}s)",
                dir.display(),
                out.fit.best_epoch,
                t.seen,
                t.unseen,
                t.hm,
                t.auc,
                out.seconds
            );
        }
        Command::Eval { run: dir, world } => {
            let r = run::reevaluate(&dir, world)?;
            let (v, t) = (r.eval.val.curve.summary, r.eval.test.curve.summary);
            println!("world {}", r.cfg.eval.world);
            if let Some(theta) = r.eval.threshold {
                println!("threshold {theta}");
            }
            if let Some(w) = &r.eval.test.warning {
                println!("warning: {w}");
            }
            println!("val  S {:.4} U {:.4} HM {:.4} AUC {:.4}", v.seen, v.unseen, v.hm, v.auc);
            println!("test S {:.4} U {:.4} HM {:.4} AUC {:.4}", t.seen, t.unseen, t.hm, t.auc);
            let ok = r.reproduces();
            println!("stored validation metrics {}", if ok { "reproduced" } else { "NOT reproduced" });
            return Ok(ok);
        }
        Command::Ablate { config: c, variants, seeds, out } => {
            let cfg = config(c.as_deref(), None)?;
            let rows = run::run_ablation(&cfg, &variants, &seeds)?;
            for r in &rows {
                println!("{} seed {}: test AUC {:.4} HM {:.4} ({:.1}s)", r.variant, r.seed, r.test.auc, r.test.hm, r.seconds);
            }
            let name = cfg.data.dir.as_deref().map_or("synthetic".into(), |d| d.display().to_string());
            run::write_ablation_csv(&out, &name, cfg.eval.world, &rows)?;
        }
        Command::SweepLayers { config: c, n, seeds, out } => {
            let cfg = config(c.as_deref(), None)?;
            let rows = run::run_layer_sweep(&cfg, &n, &seeds)?;
            for r in &rows {
                println!("n = m = {} seed {}: test AUC {:.4}", r.n, r.seed, r.test.auc);
            }
            run::write_sweep_csv(&out, &rows)?;
        }
        Command::Gradcheck { seed, step, tolerance } => {
            let opts = GradCheckOptions { seed, step, tolerance, ..Default::default() };
            let mut ok = true;
            for (name, report) in gradcheck::run_all(&opts)? {
                let pass = report.passed();
                ok &= pass;
                println!(
                    "{:<14} {} max rel error {:.2e} over {} coordinates",
                    name,
                    if pass { "pass" } else { "FAIL" },
                    report.max_rel_error,
                    report.checked
                );
            }
            return Ok(ok);
        }
        Command::Report { summaries } => {
            let mut rows = Vec::new();
            for p in &summaries {
                rows.extend(read_summary_csv(&fs::read_to_string(p)?)?);
            }
            print!("{}", run::format_report(&run::merge_summaries(&rows)));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("czsl: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
