use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gd_core::crossval::{epoch_cost, run_kfold_on, CostModel};
use gd_core::harness::analyze::{analyze, write_analysis};
use gd_core::harness::compare::{compare_gd_vs_cv, write_compare, Method};
use gd_core::harness::report::{self, write_run_csv};
use gd_core::harness::sweep::run_sweep;
use gd_core::harness::{prepare_data, train_on, ExperimentConfig, Termination};
use gd_core::par::Exec;
use gd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gdstop", version, about = "Gradient-disparity early stopping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write `run.csv`.
    Train(Common),
    /// Run the `[sweep]` section of the config.
    Sweep(Common),
    /// k-fold cross-validation with `crossval.k` folds.
    Kfold(Common),
    /// GD stopping against k-fold and k+-fold CV.
    Compare(Common),
    /// Correlations and sensitivity over a results directory.
    Analyze {
        dir: PathBuf,
        /// Epochs ignored at the start of each run.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Per-epoch cost of CV and GD from measured unit times.
    Cost {
        #[arg(long)]
        t1: f64,
        #[arg(long)]
        t2: f64,
        #[arg(long)]
        t3: f64,
        #[arg(long)]
        t4: f64,
        #[arg(long)]
        batches: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        s: usize,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok((cfg, out))
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            let splits = prepare_data(&cfg)?;
            let r = train_on(&cfg, &splits, Exec::default())?;
            let path = out.join("run.csv");
            write_run_csv(&path, &r)?;
            if let Some(last) = r.last() {
                say(
                    c.quiet,
                    format!(
                        "{} epochs, test loss {:.4}, test acc {:.4}; wrote {}",
                        r.epochs(),
                        last.test_loss,
                        1.0 - last.test_err,
                        path.display()
                    ),
                );
            }
            if let Termination::Diverged(e) = r.termination {
                return Err(Error::Numerical(format!("training diverged at epoch {e}")));
            }
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            let sw = cfg
                .sweep
                .clone()
                .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
            let seeds = if let Some(s) = c.seed {
                vec![s]
            } else if sw.seeds.is_empty() {
                vec![cfg.seed]
            } else {
                sw.seeds.clone()
            };
            let rep = run_sweep(&cfg, sw.axis, &sw.values, &seeds, Exec::default(), Some(&out))?;
            for row in &rep.summary {
                say(
                    c.quiet,
                    format!(
                        "{}={}: gd {} test err {:.4}",
                        sw.axis.label(),
                        row.value,
                        row.gd.map(|g| format!("{:.4}", g.mean)).unwrap_or_else(|| "-".into()),
                        row.final_test_err.mean
                    ),
                );
            }
            for r in &rep.correlations {
                say(c.quiet, format!("rho({}, {}) = {}", r.x, r.y, report::fmt_opt(r.rho)));
            }
            if rep.runs.iter().any(|r| r.result.diverged()) {
                return Err(Error::Numerical("at least one sweep run diverged".into()));
            }
        }
        Command::Kfold(c) => {
            let (cfg, out) = load(&c)?;
            cfg.validate()?;
            let splits = prepare_data(&cfg)?;
            let cv = run_kfold_on(&cfg, cfg.crossval.k, &splits, Exec::default())?;
            for (i, f) in cv.folds.iter().enumerate() {
                write_run_csv(&out.join(format!("fold{i}.csv")), f)?;
            }
            write_kfold_summary(&out.join("kfold.csv"), &cv.mean_val_loss, &cv.val_loss)?;
            say(
                c.quiet,
                format!(
                    "cv stop epoch {}, mean test acc {:.4}",
                    cv.stop_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
                    1.0 - cv.mean_test_err()
                ),
            );
        }
        Command::Compare(c) => {
            let (cfg, out) = load(&c)?;
            let seeds = match (c.seed, &cfg.sweep) {
                (Some(s), _) => vec![s],
                (None, Some(sw)) if !sw.seeds.is_empty() => sw.seeds.clone(),
                _ => vec![cfg.seed],
            };
            let rep = compare_gd_vs_cv(&cfg, cfg.crossval.k, &seeds, Exec::default())?;
            write_compare(&out, &rep)?;
            for m in [Method::Gd, Method::Kfold, Method::Kplus] {
                say(
                    c.quiet,
                    format!(
                        "{:6} test acc {:.4}  s/epoch {:.4}",
                        m.label(),
                        rep.mean_acc(m),
                        rep.mean_epoch_seconds(m)
                    ),
                );
            }
        }
        Command::Analyze {
            dir,
            warmup,
            out,
            quiet,
        } => {
            let a = analyze(&dir, warmup)?;
            let out = out.unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_analysis(&out, &a)?;
            for r in a.correlations.iter().filter(|r| r.scope == "pooled") {
                say(quiet, format!("rho({}, {}) = {} (n={})", r.x, r.y, report::fmt_opt(r.rho), r.n));
            }
            for s in &a.sensitivity {
                say(quiet, format!("sensitivity {} {} = {}", s.method, s.outcome, report::fmt_opt(s.sensitivity)));
            }
        }
        Command::Cost {
            t1,
            t2,
            t3,
            t4,
            batches,
            k,
            s,
        } => {
            let c = epoch_cost(&CostModel {
                t1,
                t2,
                t3,
                t4,
                batches,
                k,
                s,
            })?;
            println!("cv_seconds,gd_seconds");
            println!("{},{}", c.cv_seconds, c.gd_seconds);
        }
    }
    Ok(())
}

fn write_kfold_summary(path: &Path, mean: &[f64], folds: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e))?;
    let mut header = vec!["epoch".to_string(), "mean_val_loss".to_string()];
    header.extend((0..folds.len()).map(|i| format!("fold{i}_val_loss")));
    w.write_record(&header)?;
    for (e, m) in mean.iter().enumerate() {
        let mut row = vec![(e + 1).to_string(), report::fmt(*m)];
        row.extend(folds.iter().map(|f| report::fmt(f[e])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
