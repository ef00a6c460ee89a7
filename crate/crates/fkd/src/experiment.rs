//! Experiment orchestration: the per-seed pipeline (load/generate → rewire →
//! framelet → teacher → student → analysis), grid search, and CSV metrics.
//!
//! Determinism contract: everything written to `epochs.csv`, `results.csv`,
//! `alpha.csv`, `energy.csv`, and `summary.csv` is a pure function of the
//! config and seed list, so reruns are byte-identical. Wall-clock timings go
//! to `timing.csv`, which is excluded from that guarantee.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::analysis::{band_energies, perturbed_energy};
use crate::config::{DatasetSpec, ExperimentConfig, FrameletModeSpec, GridSpec};
use crate::error::{FkdError, Result};
use crate::framelet::{
    band_adjacencies, exact_framelet_matrices, haar_filter_bank, quasi_framelet_matrices,
    BandAdjacencies, FrameletSystem,
};
use crate::graph::{
    edge_homophily, generate_synthetic, load_graph, normalized_operators, split_masks, Graph,
    Operators, SplitMasks,
};
use crate::mat::Mat;
use crate::rewire::sdrf_rewire;
use crate::student::{train_student, StudentConfig, TrainedStudent};
use crate::teacher::{train_teacher, TeacherConfig, TeacherKind, TrainedTeacher};

/// Everything the model stages need, built once per seed.
pub struct PreparedRun {
    pub graph: Graph,
    pub ops: Operators,
    pub masks: SplitMasks,
    pub fs: FrameletSystem,
    pub ba: BandAdjacencies,
    pub homophily: f64,
    pub rewire_delta: Option<i64>,
}

/// Build the data side of the pipeline for one seed.
pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedRun> {
    let mut graph = match &cfg.dataset {
        DatasetSpec::Synthetic(p) => generate_synthetic(p, seed)?,
        DatasetSpec::Files {
            edges,
            features,
            labels,
        } => load_graph(edges, features, labels)?,
    };
    let mut rewire_delta = None;
    if cfg.rewire.enabled {
        let res = sdrf_rewire(&graph, &cfg.rewire.params, seed)?;
        rewire_delta = Some(res.delta_edges);
        graph = res.graph;
    }
    let homophily = edge_homophily(&graph)?;
    let masks = split_masks(&graph, cfg.split, seed)?;
    let ops = normalized_operators(&graph);
    let fb = haar_filter_bank(1, cfg.filter_bank.scales, 2.0);
    let fs = match cfg.filter_bank.mode {
        FrameletModeSpec::Exact => exact_framelet_matrices(&ops, &fb)?,
        FrameletModeSpec::Chebyshev { degree } => quasi_framelet_matrices(&ops, &fb, degree)?,
    };
    let l_max = required_l_max(cfg);
    let ba = band_adjacencies(&fs, &ops, l_max);
    Ok(PreparedRun {
        graph,
        ops,
        masks,
        fs,
        ba,
        homophily,
        rewire_delta,
    })
}

fn required_l_max(cfg: &ExperimentConfig) -> usize {
    let teacher_need = match cfg.teacher.kind {
        TeacherKind::Simplified => cfg.teacher.depth,
        _ => 1,
    };
    teacher_need.max(cfg.student.power).max(2)
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub homophily: f64,
    pub rewire_delta: Option<i64>,
    pub teacher: TrainedTeacher,
    pub student: TrainedStudent,
    pub energy_rows: Vec<EnergyRow>,
    pub prep_secs: f64,
    pub teacher_secs: f64,
    pub student_secs: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub graph_id: String,
    pub mode: String,
    pub band_r: Option<usize>,
    pub band_j: Option<usize>,
    pub value: f64,
}

pub fn teacher_config(cfg: &ExperimentConfig, seed: u64) -> TeacherConfig {
    TeacherConfig {
        kind: cfg.teacher.kind,
        depth: cfg.teacher.depth,
        hidden: cfg.teacher.hidden,
        lr: cfg.teacher.lr,
        weight_decay: cfg.teacher.weight_decay,
        epochs: cfg.epochs,
        dropout: cfg.teacher.dropout,
        eps: cfg.teacher.eps,
        seed,
    }
}

pub fn student_config(cfg: &ExperimentConfig, seed: u64) -> StudentConfig {
    StudentConfig {
        variant: cfg.student.variant,
        d_enc: cfg.student.d_enc,
        lambda: cfg.student.lambda,
        power: cfg.student.power,
        lr: cfg.student.lr,
        weight_decay: cfg.student.weight_decay,
        epochs: cfg.epochs,
        dropout: cfg.student.dropout,
        seed,
    }
}

/// The full per-seed pipeline.
pub fn run_seed(cfg: &ExperimentConfig, config_hash: &str, seed: u64) -> Result<SeedOutcome> {
    let t0 = Instant::now();
    let prep = prepare_run(cfg, seed)?;
    let prep_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let teacher = train_teacher(
        &prep.graph.x,
        &prep.graph.y,
        prep.graph.c,
        &prep.masks,
        &prep.fs,
        &prep.ba,
        &prep.ops,
        &teacher_config(cfg, seed),
    )?;
    let teacher_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let student = train_student(
        &prep.graph.x,
        &prep.graph.y,
        prep.graph.c,
        &prep.masks,
        &teacher.probs,
        &prep.ba,
        &student_config(cfg, seed),
    )?;
    let student_secs = t2.elapsed().as_secs_f64();

    let graph_id = format!("{config_hash}-s{seed}");
    let mut energy_rows = Vec::new();
    let report = band_energies(&prep.fs, &prep.graph.x, &prep.ops)?;
    energy_rows.push(EnergyRow {
        graph_id: graph_id.clone(),
        mode: "total".into(),
        band_r: None,
        band_j: None,
        value: report.total,
    });
    for ((r, j), e) in &report.per_band {
        energy_rows.push(EnergyRow {
            graph_id: graph_id.clone(),
            mode: "framelet".into(),
            band_r: Some(*r),
            band_j: Some(*j),
            value: *e,
        });
    }
    if cfg.teacher.eps != 0.0 {
        let ep = perturbed_energy(&prep.fs, &prep.graph.x, &prep.ops, cfg.teacher.eps)?;
        energy_rows.push(EnergyRow {
            graph_id: graph_id.clone(),
            mode: format!("perturbed[{}]", cfg.teacher.eps),
            band_r: None,
            band_j: None,
            value: ep,
        });
    }

    Ok(SeedOutcome {
        seed,
        homophily: prep.homophily,
        rewire_delta: prep.rewire_delta,
        teacher,
        student,
        energy_rows,
        prep_secs,
        teacher_secs,
        student_secs,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub outcomes: Vec<SeedOutcome>,
    pub failures: Vec<(u64, String)>,
    pub teacher_mean: f64,
    pub teacher_std: f64,
    pub student_mean: f64,
    pub student_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Run the full pipeline for every seed (seeds execute in parallel; all
/// output ordering follows the seed list) and write the metrics files.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    crate::mat::configure_threads();
    let config_hash = cfg.content_hash();
    std::fs::create_dir_all(out_dir).map_err(|e| FkdError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let results: Vec<(u64, Result<SeedOutcome>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, &config_hash, seed)))
        .collect();

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if outcomes.is_empty() {
        let (seed, msg) = failures
            .first()
            .cloned()
            .unwrap_or((0, "no seeds".to_string()));
        return Err(FkdError::Config(format!(
            "every seed failed; first failure (seed {seed}): {msg}"
        )));
    }

    write_metrics(cfg, &config_hash, &outcomes, &failures, out_dir)?;

    let t_accs: Vec<f64> = outcomes.iter().map(|o| o.teacher.test_acc).collect();
    let s_accs: Vec<f64> = outcomes.iter().map(|o| o.student.test_acc).collect();
    let (teacher_mean, teacher_std) = mean_std(&t_accs);
    let (student_mean, student_std) = mean_std(&s_accs);
    Ok(ExperimentSummary {
        config_hash,
        outcomes,
        failures,
        teacher_mean,
        teacher_std,
        student_mean,
        student_std,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| FkdError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn teacher_model_name(kind: TeacherKind) -> &'static str {
    match kind {
        TeacherKind::Spatial => "teacher-spatial",
        TeacherKind::Simplified => "teacher-simplified",
        TeacherKind::Spectral => "teacher-spectral",
    }
}

fn student_model_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.student.variant {
        crate::student::StudentVariant::FmlpO => "student-fmlp-o",
        crate::student::StudentVariant::FmlpS => "student-fmlp-s",
    }
}

fn write_metrics(
    cfg: &ExperimentConfig,
    config_hash: &str,
    outcomes: &[SeedOutcome],
    failures: &[(u64, String)],
    out_dir: &Path,
) -> Result<()> {
    let tname = teacher_model_name(cfg.teacher.kind);
    let sname = student_model_name(cfg);

    let mut epochs = String::from(
        "run_id,config_hash,seed,model,epoch,train_loss,train_acc,val_loss,val_acc\n",
    );
    let mut results = String::from(
        "run_id,config_hash,seed,model,val_acc,test_acc,best_epoch,homophily,rewire_delta\n",
    );
    let mut alpha = String::from("run_id,config_hash,seed,model,band_r,band_j,round,mean,std\n");
    let mut energy = String::from("graph_id,mode,band_r,band_j,value\n");
    let mut timing = String::from("run_id,prep_secs,teacher_secs,student_secs\n");

    for o in outcomes {
        let base = format!("{config_hash}-s{}", o.seed);
        for (model, metrics) in [(tname, &o.teacher.metrics), (sname, &o.student.metrics)] {
            let run_id = format!("{base}-{model}");
            for m in metrics {
                writeln!(
                    epochs,
                    "{run_id},{config_hash},{},{model},{},{},{},{},{}",
                    o.seed, m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc
                )
                .unwrap();
            }
        }
        let delta = o
            .rewire_delta
            .map(|d| d.to_string())
            .unwrap_or_default();
        writeln!(
            results,
            "{base}-{tname},{config_hash},{},{tname},{},{},{},{},{delta}",
            o.seed, o.teacher.best_val_acc, o.teacher.test_acc, o.teacher.best_epoch, o.homophily
        )
        .unwrap();
        writeln!(
            results,
            "{base}-{sname},{config_hash},{},{sname},{},{},{},{},{delta}",
            o.seed, o.student.best_val_acc, o.student.test_acc, o.student.best_epoch, o.homophily
        )
        .unwrap();
        for a in &o.student.alpha_summary {
            writeln!(
                alpha,
                "{base}-{sname},{config_hash},{},{sname},{},{},{},{},{}",
                o.seed, a.band_r, a.band_j, a.round, a.mean, a.std
            )
            .unwrap();
        }
        for row in &o.energy_rows {
            writeln!(
                energy,
                "{},{},{},{},{}",
                row.graph_id,
                row.mode,
                row.band_r.map(|v| v.to_string()).unwrap_or_default(),
                row.band_j.map(|v| v.to_string()).unwrap_or_default(),
                row.value
            )
            .unwrap();
        }
        writeln!(
            timing,
            "{base},{},{},{}",
            o.prep_secs, o.teacher_secs, o.student_secs
        )
        .unwrap();
    }

    let t_accs: Vec<f64> = outcomes.iter().map(|o| o.teacher.test_acc).collect();
    let s_accs: Vec<f64> = outcomes.iter().map(|o| o.student.test_acc).collect();
    let (tm, ts) = mean_std(&t_accs);
    let (sm, ss) = mean_std(&s_accs);
    let mut summary = String::from("config_hash,model,mean_test_acc,std_test_acc,seeds\n");
    writeln!(summary, "{config_hash},{tname},{tm},{ts},{}", t_accs.len()).unwrap();
    writeln!(summary, "{config_hash},{sname},{sm},{ss},{}", s_accs.len()).unwrap();

    write_file(&out_dir.join("epochs.csv"), &epochs)?;
    write_file(&out_dir.join("results.csv"), &results)?;
    write_file(&out_dir.join("alpha.csv"), &alpha)?;
    write_file(&out_dir.join("energy.csv"), &energy)?;
    write_file(&out_dir.join("summary.csv"), &summary)?;
    write_file(&out_dir.join("timing.csv"), &timing)?;

    if !failures.is_empty() {
        let mut errs = String::from("seed,stage_error\n");
        for (seed, msg) in failures {
            writeln!(errs, "{seed},{:?}", msg).unwrap();
        }
        write_file(&out_dir.join("errors.csv"), &errs)?;
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GridRow {
    pub model: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub d_enc: usize,
    pub dropout: f64,
    pub mean_val_acc: f64,
    pub mean_test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best_teacher: GridRow,
    pub best_student: GridRow,
}

/// Exhaustive grid search. The teacher sweeps lr × wd × hidden × dropout;
/// the student then distills from the per-seed best teacher over
/// lr × wd × d_enc × dropout. Ties in mean validation accuracy break
/// lexicographically toward lower lr, lower wd, smaller hidden/d_enc.
pub fn grid_search(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GridOutcome> {
    cfg.validate()?;
    crate::mat::configure_threads();
    let grid = cfg.grid.clone().unwrap_or_else(GridSpec::default);
    let dropouts = if grid.dropout.is_empty() {
        vec![cfg.teacher.dropout]
    } else {
        grid.dropout.clone()
    };
    let d_encs = if grid.d_enc.is_empty() {
        vec![cfg.student.d_enc]
    } else {
        grid.d_enc.clone()
    };

    std::fs::create_dir_all(out_dir).map_err(|e| FkdError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    // The data pipeline is hyperparameter-independent; prepare once per seed.
    let prepared: Vec<PreparedRun> = cfg
        .seeds
        .par_iter()
        .map(|&s| prepare_run(cfg, s))
        .collect::<Result<_>>()?;

    // Teacher sweep.
    let mut teacher_points = Vec::new();
    for &lr in &grid.lr {
        for &wd in &grid.weight_decay {
            for &hidden in &grid.hidden {
                for &dropout in &dropouts {
                    teacher_points.push((lr, wd, hidden, dropout));
                }
            }
        }
    }
    let teacher_results: Vec<(usize, Vec<TrainedTeacher>)> = teacher_points
        .par_iter()
        .enumerate()
        .map(|(idx, &(lr, wd, hidden, dropout))| {
            let runs: Vec<TrainedTeacher> = cfg
                .seeds
                .iter()
                .zip(&prepared)
                .map(|(&seed, prep)| {
                    let mut tc = teacher_config(cfg, seed);
                    tc.lr = lr;
                    tc.weight_decay = wd;
                    tc.hidden = hidden;
                    tc.dropout = dropout;
                    train_teacher(
                        &prep.graph.x,
                        &prep.graph.y,
                        prep.graph.c,
                        &prep.masks,
                        &prep.fs,
                        &prep.ba,
                        &prep.ops,
                        &tc,
                    )
                })
                .collect::<Result<_>>()?;
            Ok((idx, runs))
        })
        .collect::<Result<_>>()?;

    let tname = teacher_model_name(cfg.teacher.kind);
    let mut rows = Vec::new();
    let mut teacher_scored: Vec<(usize, f64, f64)> = Vec::new();
    for (idx, runs) in &teacher_results {
        let vals: Vec<f64> = runs.iter().map(|r| r.best_val_acc).collect();
        let tests: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mv, _) = mean_std(&vals);
        let (mt, _) = mean_std(&tests);
        let (lr, wd, hidden, dropout) = teacher_points[*idx];
        rows.push(GridRow {
            model: tname.to_string(),
            lr,
            weight_decay: wd,
            hidden,
            d_enc: 0,
            dropout,
            mean_val_acc: mv,
            mean_test_acc: mt,
        });
        teacher_scored.push((*idx, mv, mt));
    }
    let best_teacher_idx = select_best(&teacher_scored, |idx| {
        let (lr, wd, hidden, dropout) = teacher_points[idx];
        (lr, wd, hidden as f64, dropout, 0.0)
    });
    let best_teacher_runs = &teacher_results
        .iter()
        .find(|(idx, _)| *idx == best_teacher_idx)
        .unwrap()
        .1;

    // Student sweep against the best teacher's per-seed probabilities.
    let mut student_points = Vec::new();
    for &lr in &grid.lr {
        for &wd in &grid.weight_decay {
            for &d_enc in &d_encs {
                for &dropout in &dropouts {
                    student_points.push((lr, wd, d_enc, dropout));
                }
            }
        }
    }
    let student_results: Vec<(usize, Vec<TrainedStudent>)> = student_points
        .par_iter()
        .enumerate()
        .map(|(idx, &(lr, wd, d_enc, dropout))| {
            let runs: Vec<TrainedStudent> = cfg
                .seeds
                .iter()
                .zip(&prepared)
                .zip(best_teacher_runs.iter())
                .map(|((&seed, prep), teacher)| {
                    let mut sc = student_config(cfg, seed);
                    sc.lr = lr;
                    sc.weight_decay = wd;
                    sc.d_enc = d_enc;
                    sc.dropout = dropout;
                    train_student(
                        &prep.graph.x,
                        &prep.graph.y,
                        prep.graph.c,
                        &prep.masks,
                        &teacher.probs,
                        &prep.ba,
                        &sc,
                    )
                })
                .collect::<Result<_>>()?;
            Ok((idx, runs))
        })
        .collect::<Result<_>>()?;

    let sname = student_model_name(cfg);
    let mut student_scored: Vec<(usize, f64, f64)> = Vec::new();
    for (idx, runs) in &student_results {
        let vals: Vec<f64> = runs.iter().map(|r| r.best_val_acc).collect();
        let tests: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mv, _) = mean_std(&vals);
        let (mt, _) = mean_std(&tests);
        let (lr, wd, d_enc, dropout) = student_points[*idx];
        rows.push(GridRow {
            model: sname.to_string(),
            lr,
            weight_decay: wd,
            hidden: 0,
            d_enc,
            dropout,
            mean_val_acc: mv,
            mean_test_acc: mt,
        });
        student_scored.push((*idx, mv, mt));
    }
    let best_student_idx = select_best(&student_scored, |idx| {
        let (lr, wd, d_enc, dropout) = student_points[idx];
        (lr, wd, d_enc as f64, dropout, 0.0)
    });

    let mut table = String::from(
        "model,lr,weight_decay,hidden,d_enc,dropout,mean_val_acc,mean_test_acc\n",
    );
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.model, r.lr, r.weight_decay, r.hidden, r.d_enc, r.dropout, r.mean_val_acc,
            r.mean_test_acc
        )
        .unwrap();
    }
    write_file(&out_dir.join("grid.csv"), &table)?;

    let find_row = |model: &str, idx: usize, points_len: usize| -> GridRow {
        let offset = if model == tname { 0 } else { points_len };
        rows[offset + idx].clone()
    };
    let best_teacher = find_row(tname, best_teacher_idx, teacher_points.len());
    let best_student = find_row(sname, best_student_idx, teacher_points.len());

    Ok(GridOutcome {
        rows,
        best_teacher,
        best_student,
    })
}

/// Highest mean validation accuracy; exact ties resolved by the
/// lexicographic key (lower is better).
fn select_best(
    scored: &[(usize, f64, f64)],
    key: impl Fn(usize) -> (f64, f64, f64, f64, f64),
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for &(idx, val, _) in scored {
        match best {
            None => best = Some((idx, val)),
            Some((bidx, bval)) => {
                let better = val > bval || (val == bval && key(idx) < key(bidx));
                if better {
                    best = Some((idx, val));
                }
            }
        }
    }
    best.expect("non-empty grid").0
}

/// Sensitivity report rows for the analyze subcommand: every node pair's
/// empirical linear sensitivity against its bound, on small graphs.
pub fn sensitivity_csv(
    ba: &BandAdjacencies,
    d0: usize,
    n: usize,
    layers: usize,
    seed: u64,
) -> Result<String> {
    use crate::analysis::{sensitivity_bound, sensitivity_exact, LinearModel, SensitivityMode};
    use crate::nn::init::glorot;
    let mut rng = crate::rng::substream(seed, "sensitivity");
    let weights: Vec<Vec<Mat>> = (0..layers)
        .map(|l| {
            let (din, dout) = if l == 0 { (d0, d0) } else { (d0, d0) };
            (0..ba.num_bands())
                .map(|_| glorot(&mut rng, din, dout))
                .collect()
        })
        .collect();
    let model = LinearModel::Spatial {
        ba,
        weights: &weights,
    };
    let bound = sensitivity_bound(
        ba,
        model.beta(),
        model.width_bound(d0),
        layers,
        SensitivityMode::Spatial,
    );
    let mut out = String::from("u,v,p,q,layers,empirical,bound\n");
    for u in 0..n {
        for v in 0..n {
            let emp = sensitivity_exact(&model, d0, n, u, v, 0, 0)?;
            writeln!(out, "{u},{v},0,0,{layers},{},{}", emp, bound.get(u, v)).unwrap();
        }
    }
    Ok(out)
}
