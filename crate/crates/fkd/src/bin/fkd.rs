//! Command-line driver: dataset generation, rewiring, teacher training,
//! distillation, analysis, tightness checks, and full experiment runs, all
//! from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fkd::analysis::{band_energies, perturbed_energy};
use fkd::config::{DatasetSpec, ExperimentConfig};
use fkd::error::Result;
use fkd::experiment::{
    grid_search, prepare_run, run_experiment, sensitivity_csv, student_config, teacher_config,
};
use fkd::framelet::{mode_tolerance, tightness_residual, FrameletMode};
use fkd::graph::{edge_homophily, save_graph};
use fkd::nn::checkpoint::{load_checkpoint, save_checkpoint};
use fkd::rewire::{curvature_report, sdrf_rewire};
use fkd::student::train_student;
use fkd::teacher::train_teacher;

#[derive(Parser)]
#[command(
    name = "fkd",
    about = "Framelet teachers, frameless MLP students, and the analysis around them",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph and write it in the edge/features/labels
    /// file formats.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewire the configured graph and export the result plus a change log.
    Rewire {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured teacher and write a checkpoint + manifest.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the configured student from a teacher checkpoint (trains the
    /// teacher first when no checkpoint is given).
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the distillation loss balance.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Energy decomposition, homophily, curvature, and (small graphs)
    /// sensitivity reports.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the framelet tightness residual; non-zero exit above tolerance.
    CheckTightness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full pipeline over every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive hyperparameter sweep; emits the grid table and the
    /// best-by-validation rows.
    GridSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    fkd::mat::configure_threads();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn first_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0))
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.out_dir.clone())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let seed = first_seed(&cfg, seed);
            let dir = out_dir(&cfg, out);
            let DatasetSpec::Synthetic(params) = &cfg.dataset else {
                return Err(fkd::FkdError::Config(
                    "generate requires a synthetic dataset spec".into(),
                ));
            };
            let g = fkd::graph::generate_synthetic(params, seed)?;
            let (e, f, l) = save_graph(&g, &dir)?;
            let h = edge_homophily(&g)?;
            println!(
                "generated n={} edges={} homophily={h:.4} -> {}, {}, {}",
                g.n,
                g.edges.len(),
                e.display(),
                f.display(),
                l.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Rewire { config, seed, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let seed = first_seed(&cfg, seed);
            let dir = out_dir(&cfg, out);
            let g = load_dataset(&cfg, seed)?;
            let res = sdrf_rewire(&g, &cfg.rewire.params, seed)?;
            save_graph(&res.graph, &dir)?;
            let mut log = String::from("iter,min_curvature,max_curvature\n");
            for (it, mn, mx) in &res.curvature_trace {
                log.push_str(&format!("{it},{mn},{mx}\n"));
            }
            log.push_str("change,edge_i,edge_j\n");
            for &(i, j) in &res.added {
                log.push_str(&format!("added,{i},{j}\n"));
            }
            for &(i, j) in &res.removed {
                log.push_str(&format!("removed,{i},{j}\n"));
            }
            std::fs::write(dir.join("rewire_log.csv"), log).map_err(|e| fkd::FkdError::Io {
                path: dir.join("rewire_log.csv"),
                source: e,
            })?;
            println!(
                "rewired: +{} -{} (delta {})",
                res.added.len(),
                res.removed.len(),
                res.delta_edges
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainTeacher { config, seed, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let seed = first_seed(&cfg, seed);
            let dir = out_dir(&cfg, out);
            std::fs::create_dir_all(&dir).ok();
            let prep = prepare_run(&cfg, seed)?;
            let trained = train_teacher(
                &prep.graph.x,
                &prep.graph.y,
                prep.graph.c,
                &prep.masks,
                &prep.fs,
                &prep.ba,
                &prep.ops,
                &teacher_config(&cfg, seed),
            )?;
            let ckpt = dir.join("teacher.fkdp");
            save_checkpoint(&ckpt, &trained.params.named_tensors())?;
            let manifest = serde_json::json!({
                "kind": cfg.teacher.kind,
                "depth": cfg.teacher.depth,
                "hidden": cfg.teacher.hidden,
                "bands": prep.fs.index_set,
                "eps": cfg.teacher.eps,
                "seed": seed,
                "config_hash": cfg.content_hash(),
                "best_epoch": trained.best_epoch,
                "val_acc": trained.best_val_acc,
                "test_acc": trained.test_acc,
            });
            std::fs::write(
                dir.join("teacher.manifest.json"),
                serde_json::to_string_pretty(&manifest).unwrap(),
            )
            .map_err(|e| fkd::FkdError::Io {
                path: dir.join("teacher.manifest.json"),
                source: e,
            })?;
            println!(
                "teacher {:?}: val {:.4} test {:.4} -> {}",
                cfg.teacher.kind,
                trained.best_val_acc,
                trained.test_acc,
                ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Distill {
            config,
            seed,
            out,
            lambda,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(l) = lambda {
                cfg.student.lambda = l;
                cfg.validate()?;
            }
            let seed = first_seed(&cfg, seed);
            let dir = out_dir(&cfg, out);
            std::fs::create_dir_all(&dir).ok();
            let prep = prepare_run(&cfg, seed)?;
            let teacher = train_teacher(
                &prep.graph.x,
                &prep.graph.y,
                prep.graph.c,
                &prep.masks,
                &prep.fs,
                &prep.ba,
                &prep.ops,
                &teacher_config(&cfg, seed),
            )?;
            let student = train_student(
                &prep.graph.x,
                &prep.graph.y,
                prep.graph.c,
                &prep.masks,
                &teacher.probs,
                &prep.ba,
                &student_config(&cfg, seed),
            )?;
            let ckpt = dir.join("student.fkdp");
            save_checkpoint(&ckpt, &student.params.named_tensors())?;
            let manifest = serde_json::json!({
                "variant": cfg.student.variant,
                "d_enc": cfg.student.d_enc,
                "lambda": cfg.student.lambda,
                "power": cfg.student.power,
                "bands": prep.fs.index_set,
                "teacher_kind": cfg.teacher.kind,
                "seed": seed,
                "config_hash": cfg.content_hash(),
                "best_epoch": student.best_epoch,
                "val_acc": student.best_val_acc,
                "test_acc": student.test_acc,
            });
            std::fs::write(
                dir.join("student.manifest.json"),
                serde_json::to_string_pretty(&manifest).unwrap(),
            )
            .map_err(|e| fkd::FkdError::Io {
                path: dir.join("student.manifest.json"),
                source: e,
            })?;
            let mut alpha = String::from("band_r,band_j,round,mean,std\n");
            for a in &student.alpha_summary {
                alpha.push_str(&format!(
                    "{},{},{},{},{}\n",
                    a.band_r, a.band_j, a.round, a.mean, a.std
                ));
            }
            std::fs::write(dir.join("alpha.csv"), alpha).map_err(|e| fkd::FkdError::Io {
                path: dir.join("alpha.csv"),
                source: e,
            })?;
            println!(
                "student {:?}: val {:.4} test {:.4} (teacher test {:.4}) -> {}",
                cfg.student.variant,
                student.best_val_acc,
                student.test_acc,
                teacher.test_acc,
                ckpt.display()
            );
            // Round-trip sanity on the checkpoint we just wrote.
            let _ = load_checkpoint(&ckpt)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { config, seed, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let seed = first_seed(&cfg, seed);
            let dir = out_dir(&cfg, out);
            std::fs::create_dir_all(&dir).ok();
            let prep = prepare_run(&cfg, seed)?;
            let g = &prep.graph;
            let report = band_energies(&prep.fs, &g.x, &prep.ops)?;
            let mut energy = String::from("graph_id,mode,band_r,band_j,value\n");
            energy.push_str(&format!("g{seed},total,,,{}\n", report.total));
            for ((r, j), e) in &report.per_band {
                energy.push_str(&format!("g{seed},framelet,{r},{j},{e}\n"));
            }
            for eps in [0.05, 0.1, 0.2] {
                let ep = perturbed_energy(&prep.fs, &g.x, &prep.ops, eps)?;
                energy.push_str(&format!("g{seed},perturbed[{eps}],,,{ep}\n"));
            }
            std::fs::write(dir.join("energy.csv"), energy).map_err(|e| fkd::FkdError::Io {
                path: dir.join("energy.csv"),
                source: e,
            })?;

            let curv = curvature_report(g)?;
            let mut curv_csv = String::from("edge_i,edge_j,curvature\n");
            for ((i, j), c) in &curv.per_edge {
                curv_csv.push_str(&format!("{i},{j},{c}\n"));
            }
            std::fs::write(dir.join("curvature.csv"), curv_csv).map_err(|e| {
                fkd::FkdError::Io {
                    path: dir.join("curvature.csv"),
                    source: e,
                }
            })?;

            if g.n <= 64 {
                let sens = sensitivity_csv(&prep.ba, g.d0(), g.n, 2, seed)?;
                std::fs::write(dir.join("sensitivity.csv"), sens).map_err(|e| {
                    fkd::FkdError::Io {
                        path: dir.join("sensitivity.csv"),
                        source: e,
                    }
                })?;
            }
            println!(
                "n={} homophily={:.4} energy_total={:.6} band_residual={:.2e} curvature_min={:.4}",
                g.n,
                prep.homophily,
                report.total,
                (report.total - report.band_sum()).abs(),
                curv.min
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckTightness { config, seed } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let seed = first_seed(&cfg, seed);
            let prep = prepare_run(&cfg, seed)?;
            let residual = tightness_residual(&prep.fs);
            let tol = mode_tolerance(prep.fs.mode);
            let mode = match prep.fs.mode {
                FrameletMode::Exact => "exact".to_string(),
                FrameletMode::Chebyshev(d) => format!("chebyshev({d})"),
            };
            println!("mode={mode} n={} residual={residual:.3e} tolerance={tol:.0e}", prep.graph.n);
            if residual <= tol {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = out_dir(&cfg, out);
            let summary = run_experiment(&cfg, &dir)?;
            println!(
                "config {}: teacher {:.4} ± {:.4}, student {:.4} ± {:.4} over {} seeds -> {}",
                summary.config_hash,
                summary.teacher_mean,
                summary.teacher_std,
                summary.student_mean,
                summary.student_std,
                summary.outcomes.len(),
                dir.display()
            );
            if !summary.failures.is_empty() {
                for (seed, msg) in &summary.failures {
                    eprintln!("seed {seed} failed: {msg}");
                }
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GridSearch { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = out_dir(&cfg, out);
            let outcome = grid_search(&cfg, &dir)?;
            println!(
                "best teacher: lr={} wd={} hidden={} val={:.4} test={:.4}",
                outcome.best_teacher.lr,
                outcome.best_teacher.weight_decay,
                outcome.best_teacher.hidden,
                outcome.best_teacher.mean_val_acc,
                outcome.best_teacher.mean_test_acc
            );
            println!(
                "best student: lr={} wd={} d_enc={} val={:.4} test={:.4}",
                outcome.best_student.lr,
                outcome.best_student.weight_decay,
                outcome.best_student.d_enc,
                outcome.best_student.mean_val_acc,
                outcome.best_student.mean_test_acc
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<fkd::graph::Graph> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(p) => fkd::graph::generate_synthetic(p, seed),
        DatasetSpec::Files {
            edges,
            features,
            labels,
        } => fkd::graph::load_graph(edges, features, labels),
    }
}
