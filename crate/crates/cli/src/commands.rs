use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gradtail_core::analysis::{entropy_split, label_examples, Classifier, DEFAULT_BAND};
use gradtail_core::baselines::WeightingStrategy;
use gradtail_core::data::{dominance_holds, Dataset2D, DenseGrid, GridSpec};
use gradtail_core::experiment::{dense_eval, toy_run_on, ToyVariant};
use gradtail_core::figures::{
    entropy_figure, prediction_figure, scatter_figure, sweep_panel, tail_label_figure,
};
use gradtail_core::gradtail::{GradTailConfig, GradTailState};
use gradtail_core::nn::MlpModel;
use gradtail_core::record::Record;
use gradtail_core::report::{comparison_table, median_summary, ExperimentReport};
use gradtail_core::train::{
    read_traces, train_dense, write_patch_traces, write_step_log, write_traces, DenseTrainConfig, Snapshot,
    TrainConfig,
};
use gradtail_core::Error;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, GridEntry, Kind, SweepParam, SweepSpec};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET: &str = "dataset.csv";
pub const MODEL: &str = "model.txt";
pub const GRADTAIL_STATE: &str = "gradtail_state.txt";
pub const STEP_LOG: &str = "step_log.csv";
pub const TRACES: &str = "traces.csv";
pub const PATCH_TRACES: &str = "patch_traces.csv";
pub const REPORT: &str = "report.txt";
pub const REPORT_TABLE: &str = "report_table.txt";
pub const ABORT_MODEL: &str = "abort_model.txt";

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn data_dir(config: &ExperimentConfig, data_seed: u64) -> PathBuf {
    config.out.join("data").join(format!("seed{data_seed}"))
}

/// One training run: a strategy at one seed pair, written to `dir`.
#[derive(Debug, Clone)]
pub struct Job {
    pub label: String,
    pub strategy: WeightingStrategy,
    pub data_seed: u64,
    pub model_seed: u64,
    pub dir: PathBuf,
}

fn jobs_for(config: &ExperimentConfig, grid: &[GridEntry], root: &Path) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (data_seed, model_seed) in config.seed_pairs() {
        for entry in grid {
            jobs.push(Job {
                label: entry.label.clone(),
                strategy: entry.strategy.clone(),
                data_seed,
                model_seed,
                dir: root.join(format!("{}-m{model_seed}-d{data_seed}", entry.label)),
            });
        }
    }
    jobs
}

fn toy_variant(config: &ExperimentConfig) -> Option<ToyVariant> {
    match config.kind {
        Kind::Toy(v) => Some(v),
        Kind::Dense => None,
    }
}

/// Writes the dataset for every distinct data seed. The hard variant is
/// checked for dominance before anything is written.
pub fn gen_data(config: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let mut seeds = config.data_seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if let Some(variant) = toy_variant(config) {
        check_dominance(variant)?;
    }
    seeds.iter().map(|&s| write_dataset(config, s)).collect()
}

fn check_dominance(variant: ToyVariant) -> CliResult<()> {
    if variant == ToyVariant::Hard {
        let data = variant.dataset(0);
        if !dominance_holds(&data.common, &data.uncommon, GridSpec::dominance()) {
            return Err(CliError::Config(
                "hard variant: common density does not dominate on the check grid".into(),
            ));
        }
    }
    Ok(())
}

fn write_dataset(config: &ExperimentConfig, seed: u64) -> CliResult<PathBuf> {
    let dir = data_dir(config, seed);
    create_dir(&dir)?;
    match config.kind {
        Kind::Toy(variant) => {
            let data = variant.dataset(seed);
            let mut manifest = data.manifest();
            manifest.set("experiment.kind", variant.name());
            manifest.write(&dir.join(MANIFEST))?;
            data.write_csv(&dir.join(DATASET))?;
        }
        Kind::Dense => {
            let setup = &config.dense_setup;
            let (train, eval) = setup.grids(seed)?;
            let mut manifest = Record::new("dense-dataset");
            manifest.set("experiment.kind", "dense_demo");
            manifest.set("data.seed", seed);
            manifest.set("dense_task.height", setup.height);
            manifest.set("dense_task.width", setup.width);
            manifest.set("dense_task.rare_fraction", setup.rare_fraction);
            manifest.set("dense_task.train_images", setup.train_images);
            manifest.set("dense_task.eval_images", setup.eval_images);
            manifest.set("data.columns", "pixel,row,col,feature0,feature1,feature2,target,valid,rare");
            manifest.write(&dir.join(MANIFEST))?;
            for (k, g) in train.iter().enumerate() {
                write_grid_csv(g, &dir.join(format!("train_{k}.csv")))?;
            }
            for (k, g) in eval.iter().enumerate() {
                write_grid_csv(g, &dir.join(format!("eval_{k}.csv")))?;
            }
        }
    }
    Ok(dir)
}

fn write_grid_csv(grid: &DenseGrid, path: &Path) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["pixel", "row", "col", "feature0", "feature1", "feature2", "target", "valid", "rare"])
        .map_err(csv_err)?;
    for p in 0..grid.pixels() {
        let x = grid.input(p);
        let mut row = vec![p.to_string(), (p / grid.width).to_string(), (p % grid.width).to_string()];
        row.extend(x.iter().map(f64::to_string));
        row.push(grid.targets[p].to_string());
        row.push((grid.mask[p] as u8).to_string());
        row.push((grid.rare[p] as u8).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// The toy dataset for `seed`, read from the data directory, which is
/// generated first when missing.
fn load_toy_dataset(config: &ExperimentConfig, seed: u64) -> CliResult<Dataset2D> {
    let dir = data_dir(config, seed);
    if !dir.join(DATASET).exists() {
        write_dataset(config, seed)?;
    }
    let manifest = Record::read(&dir.join(MANIFEST))?;
    Ok(Dataset2D::read_csv(&dir.join(DATASET), &manifest)?)
}

fn write_snapshots(dir: &Path, snapshots: &[Snapshot], gradtail: &GradTailConfig) -> CliResult<()> {
    for s in snapshots {
        let sdir = dir.join("snapshots").join(format!("step{:06}", s.steps_done));
        create_dir(&sdir)?;
        s.model.save(&sdir.join(MODEL))?;
        write_state(&sdir.join(GRADTAIL_STATE), &s.gradtail_state, gradtail, &s.model)?;
    }
    Ok(())
}

fn write_state(
    path: &Path,
    state: &GradTailState,
    config: &GradTailConfig,
    model: &MlpModel,
) -> CliResult<()> {
    Ok(state.to_snapshot(config, model.layer_dims()).write(path)?)
}

fn abort(job: &Job, err: Error) -> CliError {
    match err {
        Error::NumericalAbort { step, snapshot, .. } => {
            let path = job.dir.join(ABORT_MODEL);
            if let Err(e) = snapshot.save(&path) {
                return e.into();
            }
            CliError::Abort {
                run: job.dir.display().to_string(),
                step,
                snapshot: path,
            }
        }
        other => other.into(),
    }
}

fn run_toy_job(config: &ExperimentConfig, data: &Dataset2D, job: &Job) -> CliResult<()> {
    let train = TrainConfig {
        strategy: job.strategy.clone(),
        batch_seed: job.model_seed,
        ..config.train.clone()
    };
    let outcome = toy_run_on(data, job.model_seed, &train).map_err(|e| abort(job, e))?;
    outcome.model.save(&job.dir.join(MODEL))?;
    write_state(&job.dir.join(GRADTAIL_STATE), &outcome.gradtail_state, &outcome.gradtail_config, &outcome.model)?;
    write_step_log(&outcome.log, &job.dir.join(STEP_LOG))?;
    if train.trace_logging {
        write_traces(&outcome.traces, &job.dir.join(TRACES))?;
    }
    write_snapshots(&job.dir, &outcome.snapshots, &outcome.gradtail_config)
}

fn run_dense_job(config: &ExperimentConfig, job: &Job) -> CliResult<()> {
    let (train_grids, _) = config.dense_setup.grids(job.data_seed)?;
    let init = config.dense_setup.init(job.model_seed)?;
    let dense = DenseTrainConfig {
        strategy: job.strategy.clone(),
        batch_seed: job.model_seed,
        ..config.dense.clone()
    };
    let outcome = train_dense(&train_grids, &init, &dense).map_err(|e| abort(job, e))?;
    outcome.model.save(&job.dir.join(MODEL))?;
    write_state(&job.dir.join(GRADTAIL_STATE), &outcome.gradtail_state, &outcome.gradtail_config, &outcome.model)?;
    write_step_log(&outcome.log, &job.dir.join(STEP_LOG))?;
    write_patch_traces(&outcome.patch_traces, &job.dir.join(PATCH_TRACES))?;
    write_snapshots(&job.dir, &outcome.snapshots, &outcome.gradtail_config)
}

/// Runs every job, in parallel unless in reference mode. Each run directory
/// gets its manifest before training starts. Returns the first error in job
/// order after all jobs have finished.
pub fn run_jobs(config: &ExperimentConfig, jobs: &[Job]) -> CliResult<()> {
    for job in jobs {
        config.check_strategy(&job.strategy)?;
    }
    let mut datasets: BTreeMap<u64, Dataset2D> = BTreeMap::new();
    if let Some(variant) = toy_variant(config) {
        check_dominance(variant)?;
        for job in jobs {
            if let Entry::Vacant(slot) = datasets.entry(job.data_seed) {
                slot.insert(load_toy_dataset(config, job.data_seed)?);
            }
        }
    }
    for job in jobs {
        create_dir(&job.dir)?;
        config
            .run_manifest(&job.label, &job.strategy, job.data_seed, job.model_seed)
            .write(&job.dir.join(MANIFEST))?;
    }
    let one = |job: &Job| -> CliResult<()> {
        let result = match config.kind {
            Kind::Toy(_) => run_toy_job(config, &datasets[&job.data_seed], job),
            Kind::Dense => run_dense_job(config, job),
        };
        match &result {
            Ok(()) => eprintln!("finished {}", job.dir.display()),
            Err(e) => eprintln!("failed {}: {e}", job.dir.display()),
        }
        result
    };
    let results: Vec<CliResult<()>> = if config.reference_mode {
        jobs.iter().map(one).collect()
    } else {
        jobs.par_iter().map(one).collect()
    };
    results.into_iter().collect()
}

pub fn train(config: &ExperimentConfig) -> CliResult<Vec<Job>> {
    let jobs = jobs_for(config, &config.effective_grid(), &config.out.join("runs"));
    run_jobs(config, &jobs)?;
    Ok(jobs)
}

/// A run directory's report, with figures for toy runs. Missing traces give
/// a report with explicit gaps.
pub fn analyze_run(dir: &Path, figures: bool) -> CliResult<(String, ExperimentReport)> {
    let manifest = Record::read(&dir.join(MANIFEST))?;
    let config = ExperimentConfig::from_record(&manifest)?;
    let entry = config.effective_grid().remove(0);
    let (data_seed, model_seed) = config.seed_pairs()[0];
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| entry.label.clone());
    let model = MlpModel::load(&dir.join(MODEL))?;
    let mut report = match config.kind {
        Kind::Toy(variant) => {
            let data = variant.dataset(data_seed);
            let traces_path = dir.join(TRACES);
            let traces = if traces_path.exists() {
                Some(read_traces(&traces_path)?)
            } else {
                None
            };
            let report = ExperimentReport::for_toy_run(name.clone(), &model, &data, traces.as_deref())?;
            if figures {
                toy_figures(dir, &name, &model, &data, traces.as_deref())?;
            }
            report
        }
        Kind::Dense => {
            let (_, eval) = config.dense_setup.grids(data_seed)?;
            let mut report = ExperimentReport::new(name.clone());
            report.add_band_mre(&dense_eval(&model, &eval)?);
            report
        }
    };
    report.push("seed.data", Some(data_seed as f64));
    report.push("seed.model", Some(model_seed as f64));
    report.save(&dir.join(REPORT))?;
    write_text(&dir.join(REPORT_TABLE), &comparison_table(std::slice::from_ref(&report), false))?;
    Ok((entry.label, report))
}

fn toy_figures(
    dir: &Path,
    name: &str,
    model: &MlpModel,
    data: &Dataset2D,
    traces: Option<&[gradtail_core::train::ExampleTrace]>,
) -> CliResult<()> {
    let fig = dir.join("figures");
    create_dir(&fig)?;
    let grid = GridSpec::evaluation();
    write_text(&fig.join("scatter.svg"), &scatter_figure(data, grid, &format!("{name}: data")))?;
    write_text(
        &fig.join("prediction.svg"),
        &prediction_figure(model, data, grid, &format!("{name}: predicted class")),
    )?;
    if let Some(traces) = traces {
        let labels = label_examples(traces, DEFAULT_BAND);
        write_text(
            &fig.join("tail_labels.svg"),
            &tail_label_figure(data, &labels, grid, &format!("{name}: mean-θ labels")),
        )?;
        write_text(
            &fig.join("entropy.svg"),
            &entropy_figure(data, &entropy_split(traces), grid, &format!("{name}: entropy split")),
        )?;
    }
    Ok(())
}

/// Median of every metric within each group, in order of first appearance.
pub fn group_medians(reports: &[(String, ExperimentReport)]) -> Vec<ExperimentReport> {
    let mut groups: Vec<(String, Vec<ExperimentReport>)> = Vec::new();
    for (label, report) in reports {
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, list)) => list.push(report.clone()),
            None => groups.push((label.clone(), vec![report.clone()])),
        }
    }
    groups
        .into_iter()
        .map(|(label, list)| {
            let mut summary = ExperimentReport::new(label);
            summary.push("runs", Some(list.len() as f64));
            summary.metrics.extend(
                median_summary(&list)
                    .into_iter()
                    .filter(|m| !m.name.starts_with("seed.")),
            );
            summary
        })
        .collect()
}

pub fn list_runs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(root, e))?.path();
        if path.join(MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Reports every run and, for more than one run, writes the per-group
/// median summary to `summary_dir`. Returns the table that was printed.
pub fn analyze(runs: &[PathBuf], summary_dir: &Path, figures: bool) -> CliResult<String> {
    if runs.is_empty() {
        return Err(CliError::Config("no run directories to analyze".into()));
    }
    let reports: Vec<(String, ExperimentReport)> =
        runs.iter().map(|d| analyze_run(d, figures)).collect::<CliResult<_>>()?;
    if reports.len() == 1 {
        let report = &reports[0].1;
        let mut text = comparison_table(std::slice::from_ref(report), false);
        for gap in &report.gaps {
            text.push_str(&format!("gap: {gap}\n"));
        }
        return Ok(text);
    }
    let groups = group_medians(&reports);
    let table = comparison_table(&groups, false);
    create_dir(summary_dir)?;
    write_text(&summary_dir.join("summary.txt"), &table)?;
    for g in &groups {
        g.save(&summary_dir.join(format!("summary_{}.txt", g.label)))?;
    }
    Ok(table)
}

/// The grid entry a sweep varies: the configured one of the right strategy,
/// or that strategy's defaults.
fn sweep_base(config: &ExperimentConfig, param: SweepParam) -> CliResult<WeightingStrategy> {
    let want = param.strategy_name();
    if let Some(entry) = config.grid.iter().find(|g| g.strategy.name() == want) {
        return Ok(entry.strategy.clone());
    }
    let from_train = match config.kind {
        Kind::Toy(_) => &config.train.strategy,
        Kind::Dense => &config.dense.strategy,
    };
    if from_train.name() == want {
        return Ok(from_train.clone());
    }
    Ok(WeightingStrategy::from_name(want)?)
}

fn value_label(param: SweepParam, value: f64) -> String {
    format!("{}={value}", param.name())
}

/// One run per value per seed, then a comparative table of medians and,
/// for toy kinds, a panel of predictions at the first seed.
pub fn sweep(config: &ExperimentConfig, spec: &SweepSpec) -> CliResult<String> {
    let base = sweep_base(config, spec.param)?;
    let mut grid = Vec::new();
    for &v in &spec.values {
        let strategy = spec.param.apply(&base, v)?;
        config.check_strategy(&strategy)?;
        grid.push(GridEntry {
            label: value_label(spec.param, v),
            strategy,
        });
    }
    let root = config.out.join("sweep").join(spec.param.name());
    let jobs = jobs_for(config, &grid, &root.join("runs"));
    run_jobs(config, &jobs)?;

    let reports: Vec<(String, ExperimentReport)> =
        jobs.iter().map(|j| analyze_run(&j.dir, false)).collect::<CliResult<_>>()?;
    let groups = group_medians(&reports);
    let table = comparison_table(&groups, false);
    write_text(&root.join("table.txt"), &table)?;
    for g in &groups {
        g.save(&root.join(format!("summary_{}.txt", g.label)))?;
    }

    if let Kind::Toy(variant) = config.kind {
        let (data_seed, model_seed) = config.seed_pairs()[0];
        let data = variant.dataset(data_seed);
        let models: Vec<(String, MlpModel)> = jobs
            .iter()
            .filter(|j| j.data_seed == data_seed && j.model_seed == model_seed)
            .map(|j| Ok((j.label.clone(), MlpModel::load(&j.dir.join(MODEL))?)))
            .collect::<CliResult<_>>()?;
        let columns: Vec<(String, &dyn Classifier)> =
            models.iter().map(|(l, m)| (l.clone(), m as &dyn Classifier)).collect();
        write_text(&root.join("panel.svg"), &sweep_panel(&columns, &data, GridSpec::evaluation()))?;
    }
    Ok(table)
}

pub fn default_dense_grid() -> Vec<GridEntry> {
    let gradtail = DenseTrainConfig::default().strategy;
    vec![
        GridEntry {
            label: "uniform".into(),
            strategy: WeightingStrategy::Uniform,
        },
        GridEntry {
            label: "gradtail".into(),
            strategy: gradtail,
        },
    ]
}

/// Uniform against GradTail (or the configured grid) on the dense task,
/// reported as per-band MRE medians.
pub fn dense_demo(config: &ExperimentConfig) -> CliResult<String> {
    if config.kind != Kind::Dense {
        return Err(CliError::Config(format!(
            "dense-demo needs experiment.kind = dense_demo, got `{}`",
            config.kind.name()
        )));
    }
    let grid = if config.grid.is_empty() {
        default_dense_grid()
    } else {
        config.grid.clone()
    };
    let root = config.out.join("dense_demo");
    let jobs = jobs_for(config, &grid, &root.join("runs"));
    run_jobs(config, &jobs)?;
    let reports: Vec<(String, ExperimentReport)> =
        jobs.iter().map(|j| analyze_run(&j.dir, false)).collect::<CliResult<_>>()?;
    let table = comparison_table(&group_medians(&reports), false);
    write_text(&root.join("table.txt"), &table)?;
    Ok(table)
}
