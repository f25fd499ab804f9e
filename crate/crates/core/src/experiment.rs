//! The experiment harness: seeded multi-trial training runs, sweeps, and the
//! gated-rule consistency oracle.
//!
//! Every trial derives three named streams from (base seed, trial): parameter
//! initialization, epoch shuffling, and Bernoulli gating. The synthetic
//! dataset (and any validation split of a loaded one) derives from the base
//! seed alone, so all trials of a run see the same data.

use crate::config::{DatasetSpec, ExperimentConfig, ModelSpec};
use crate::data::{
    load_csv, load_idx, make_blobs, make_digits, plan_epoch, split_validation, subsample, Dataset,
    Normalizer,
};
use crate::error::{ConfigError, GraphError, RunError};
use crate::graph::{
    backward, classify_scores, eval_scores, forward, forward_frozen, ModelGraph, ModelState,
    ParameterStore, Targets,
};
use crate::metrics::{self, MetricsRecord, Summary};
use crate::model::{build_mlp, build_small_cnn, init_params};
use crate::optim::{self, GateState, OptimParams, SbsCma, StepEnv, UpdateRule};
use crate::prob::{self, ProbParams};
use crate::rng::{self, Purpose};
use crate::schedule::{self, LrSchedule};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Observer events fired by the training loop; used by instrumentation and
/// the state-invariant tests.
pub struct TrainEvent<'a> {
    pub trial: usize,
    pub epoch: usize,
    pub kind: TrainEventKind,
    pub gate: Option<&'a GateState>,
    pub batches_per_epoch: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEventKind {
    /// Fired after the epoch-start state reset, before the first batch.
    EpochStart,
    /// Fired after one optimizer step.
    StepDone { batch: usize, applied: usize, total: usize },
}

pub type Observer<'a> = &'a mut dyn FnMut(&TrainEvent);

/// Outcome of a single trial. A numerical failure aborts the trial but keeps
/// the records produced so far.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub records: Vec<MetricsRecord>,
    pub abort: Option<String>,
}

/// Outcome of a full multi-trial run. The summary is absent when no trial
/// completed (every trial aborted numerically); partial records are always
/// retained.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Option<Summary>,
    pub aborted: Vec<(usize, String)>,
    pub metrics_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
}

/// A prepared experiment: parsed config, constructed model graph, and the
/// base datasets shared by all trials.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub graph: ModelGraph,
    train_full: Dataset,
    val: Dataset,
    schedule: Box<dyn LrSchedule>,
}

fn model_field_err(msg: String) -> RunError {
    RunError::Config(ConfigError::Field {
        section: "model",
        key: "kind",
        msg,
    })
}

/// Flattens image-shaped batches for models that declare a flat input.
fn conform(graph: &ModelGraph, x: crate::tensor::Tensor) -> crate::tensor::Tensor {
    if graph.input_shape().len() == 1 && x.shape().len() > 2 {
        let n = x.rows();
        let d = x.row_len();
        x.into_reshaped(&[n, d])
    } else {
        x
    }
}

impl Experiment {
    /// Loads or synthesizes the datasets and builds the model graph.
    pub fn prepare(cfg: ExperimentConfig) -> Result<Experiment, RunError> {
        let (train_full, val) = build_datasets(&cfg)?;
        let graph = build_graph(&cfg, &train_full)?;
        let schedule = schedule::build(&cfg.schedule, &cfg.schedule_params)?;
        Ok(Experiment {
            cfg,
            graph,
            train_full,
            val,
            schedule,
        })
    }

    pub fn train_size(&self) -> usize {
        self.train_full.len()
    }

    pub fn val_size(&self) -> usize {
        self.val.len()
    }

    /// The (train, val) pair one trial sees: the training-fraction
    /// subsample, with both splits standardized from training statistics
    /// when normalization is on.
    pub fn trial_datasets(&self, trial: usize) -> Result<(Dataset, Dataset), RunError> {
        let cfg = &self.cfg;
        let mut train = subsample(
            &self.train_full,
            cfg.fraction,
            rng::derive_seed(cfg.seed, trial as u64, Purpose::Subsample),
        )?;
        let mut val = self.val.clone();
        if cfg.normalize {
            let norm = Normalizer::fit(&train);
            norm.apply(&mut train);
            norm.apply(&mut val);
        }
        Ok((train, val))
    }

    /// Flattens image batches when the model expects flat inputs.
    pub fn conform_input(&self, x: crate::tensor::Tensor) -> crate::tensor::Tensor {
        conform(&self.graph, x)
    }

    /// Central-difference check of the backward pass against the first
    /// training batch a trial would see.
    pub fn gradcheck(&self, trial: usize, step: f64) -> Result<crate::graph::FdReport, RunError> {
        let cfg = &self.cfg;
        let (train, _) = self.trial_datasets(trial)?;
        let params = init_params(
            &self.graph,
            rng::derive_seed(cfg.seed, trial as u64, Purpose::Init),
        );
        let state = self.graph.init_state();
        let plan = plan_epoch(
            train.len(),
            cfg.batch_size.min(train.len()),
            rng::derive_seed(cfg.seed, trial as u64, Purpose::Shuffle),
            0,
        )?;
        let (x, y) = train.batch(&plan.batches[0]);
        let x = conform(&self.graph, x);
        let report = crate::graph::finite_difference_check(
            &self.graph,
            &params,
            &state,
            &x,
            Targets::Classes(&y),
            step,
        )?;
        Ok(report)
    }

    /// Runs one seeded trial. Numerical failures abort the trial and are
    /// reported in the outcome; structural failures propagate as errors.
    pub fn run_trial(
        &self,
        trial: usize,
        mut observer: Option<Observer>,
    ) -> Result<TrialOutcome, RunError> {
        let cfg = &self.cfg;
        let (train, val) = self.trial_datasets(trial)?;

        let mut params = init_params(
            &self.graph,
            rng::derive_seed(cfg.seed, trial as u64, Purpose::Init),
        );
        let mut state = self.graph.init_state();
        let shuffle_seed = rng::derive_seed(cfg.seed, trial as u64, Purpose::Shuffle);
        let gate_seed = cfg
            .gate_seed
            .unwrap_or_else(|| rng::derive_seed(cfg.seed, trial as u64, Purpose::Gate));
        let scheme = prob::build(&cfg.scheme, &cfg.prob)?;
        let mut rule = optim::build(
            &cfg.rule,
            self.graph.param_count(),
            scheme,
            &OptimParams {
                momentum: cfg.effective_momentum(),
                source: cfg.gradient_source,
            },
            rng::stream(gate_seed, &[]),
        )?;

        let n_train = train.len();
        let start = Instant::now();
        let mut records = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let lr = self.schedule.lr_at(epoch, cfg.epochs);
            rule.epoch_reset();
            let plan = plan_epoch(n_train, cfg.batch_size, shuffle_seed, epoch)?;
            let batches_per_epoch = plan.batch_count();
            if let Some(obs) = observer.as_deref_mut() {
                obs(&TrainEvent {
                    trial,
                    epoch,
                    kind: TrainEventKind::EpochStart,
                    gate: rule.gate(),
                    batches_per_epoch,
                });
            }

            let mut loss_sum = 0.0;
            let mut applied_sum = 0usize;
            let mut total_sum = 0usize;
            let mut failed: Option<String> = None;

            for (b, batch) in plan.batches.iter().enumerate() {
                let (x, y) = train.batch(batch);
                let x = conform(&self.graph, x);
                let step_result = (|| -> Result<(f64, usize, usize), RunError> {
                    let (loss, tape) =
                        forward(&self.graph, &params, &mut state, &x, Targets::Classes(&y))?;
                    let grads = backward(&self.graph, &tape, &params)?;
                    let graph = &self.graph;
                    let train_ref = &train;
                    let state_ref = &state;
                    let plan_ref = &plan;
                    let mut recompute = move |p: &ParameterStore,
                                              first: usize,
                                              last: usize|
                          -> Result<Vec<f64>, GraphError> {
                        let union: Vec<usize> = plan_ref.batches[first..=last].concat();
                        let (ux, uy) = train_ref.batch(&union);
                        let ux = conform(graph, ux);
                        let (_, tape) =
                            forward_frozen(graph, p, state_ref, &ux, Targets::Classes(&uy))?;
                        backward(graph, &tape, p)
                    };
                    let mut env = StepEnv {
                        groups: self.graph.groups(),
                        recompute: Some(&mut recompute),
                    };
                    let stats = rule.step(&mut params, &grads, batch.len(), lr, &mut env)?;
                    Ok((loss.scalar, stats.applied, stats.total))
                })();
                match step_result {
                    Ok((loss, applied, total)) => {
                        loss_sum += loss * batch.len() as f64;
                        applied_sum += applied;
                        total_sum += total;
                        if let Some(obs) = observer.as_deref_mut() {
                            obs(&TrainEvent {
                                trial,
                                epoch,
                                kind: TrainEventKind::StepDone {
                                    batch: b,
                                    applied,
                                    total,
                                },
                                gate: rule.gate(),
                                batches_per_epoch,
                            });
                        }
                    }
                    Err(err) if err.is_numerical() => {
                        failed = Some(err.to_string());
                        break;
                    }
                    Err(err) => return Err(err),
                }
            }
            if let Some(reason) = failed {
                return Ok(TrialOutcome {
                    records,
                    abort: Some(reason),
                });
            }

            let (val_loss, val_accuracy) = evaluate(&self.graph, &params, &state, &val)?;
            records.push(MetricsRecord {
                trial,
                epoch,
                train_loss: loss_sum / n_train as f64,
                val_loss,
                val_accuracy,
                applied_update_fraction: applied_sum as f64 / total_sum.max(1) as f64,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            });
        }
        Ok(TrialOutcome {
            records,
            abort: None,
        })
    }

    /// Runs every trial sequentially and aggregates.
    pub fn run(&self) -> Result<RunOutput, RunError> {
        let mut records = Vec::new();
        let mut aborted = Vec::new();
        for trial in 0..self.cfg.trials {
            let outcome = self.run_trial(trial, None)?;
            records.extend(outcome.records);
            if let Some(reason) = outcome.abort {
                aborted.push((trial, reason));
            }
        }
        let summary = match metrics::aggregate(&self.cfg.hash(), &records, "run") {
            Ok(s) => Some(s),
            Err(RunError::EmptyMetrics { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(RunOutput {
            records,
            summary,
            aborted,
            metrics_path: None,
            summary_path: None,
        })
    }
}

/// Eval-mode validation loss and accuracy (percent), in fixed-size chunks.
pub fn evaluate(
    graph: &ModelGraph,
    params: &ParameterStore,
    state: &ModelState,
    ds: &Dataset,
) -> Result<(f64, f64), GraphError> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = ds.batch(&idx);
        let x = conform(graph, x);
        let scores = eval_scores(graph, params, state, &x)?;
        let (loss, c) = classify_scores(&scores, &y)?;
        loss_sum += loss.scalar * y.len() as f64;
        correct += c;
        start = end;
    }
    Ok((loss_sum / n as f64, 100.0 * correct as f64 / n as f64))
}

fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), RunError> {
    let seed = cfg.seed;
    match &cfg.dataset {
        DatasetSpec::Blobs {
            n,
            classes,
            dim,
            separation,
            val_n,
        } => {
            let train = make_blobs(
                *n,
                *classes,
                *dim,
                *separation,
                rng::derive_global_seed(seed, Purpose::Dataset),
            )?;
            // The validation set comes from the same cluster layout: same
            // generation seed, larger draw, disjoint tail portion.
            let combined = make_blobs(
                n + val_n,
                *classes,
                *dim,
                *separation,
                rng::derive_global_seed(seed, Purpose::Dataset),
            )?;
            let tail: Vec<usize> = (*n..n + val_n).collect();
            let (inputs, labels) = combined.batch(&tail);
            let val = Dataset {
                inputs,
                labels,
                class_count: combined.class_count,
            };
            Ok((train, val))
        }
        DatasetSpec::Digits { n, noise, val_n } => {
            let combined = make_digits(
                n + val_n,
                *noise,
                rng::derive_global_seed(seed, Purpose::Dataset),
            )?;
            let head: Vec<usize> = (0..*n).collect();
            let tail: Vec<usize> = (*n..n + val_n).collect();
            let (ti, tl) = combined.batch(&head);
            let (vi, vl) = combined.batch(&tail);
            Ok((
                Dataset {
                    inputs: ti,
                    labels: tl,
                    class_count: combined.class_count,
                },
                Dataset {
                    inputs: vi,
                    labels: vl,
                    class_count: combined.class_count,
                },
            ))
        }
        DatasetSpec::Idx {
            images,
            labels,
            val_images,
            val_labels,
            val_fraction,
        } => {
            let train = load_idx(Path::new(images), Path::new(labels))?;
            match (val_images, val_labels) {
                (Some(vi), Some(vl)) => {
                    let val = load_idx(Path::new(vi), Path::new(vl))?;
                    Ok((train, val))
                }
                _ => {
                    let (train, val) = split_validation(
                        &train,
                        *val_fraction,
                        rng::derive_global_seed(seed, Purpose::ValSplit),
                    )?;
                    Ok((train, val))
                }
            }
        }
        DatasetSpec::Csv {
            path,
            val_path,
            val_fraction,
        } => {
            let train = load_csv(Path::new(path))?;
            match val_path {
                Some(vp) => Ok((train, load_csv(Path::new(vp))?)),
                None => {
                    let (train, val) = split_validation(
                        &train,
                        *val_fraction,
                        rng::derive_global_seed(seed, Purpose::ValSplit),
                    )?;
                    Ok((train, val))
                }
            }
        }
    }
}

fn build_graph(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelGraph, RunError> {
    let shape = train.inputs.shape();
    match &cfg.model {
        ModelSpec::Mlp { hidden, batchnorm } => {
            let input_dim: usize = shape[1..].iter().product();
            let graph = build_mlp(input_dim, hidden, train.class_count, *batchnorm)?;
            // MLPs flatten internally, so reshape image data at batch time.
            Ok(graph)
        }
        ModelSpec::Cnn { channels } => {
            if shape.len() != 4 {
                return Err(model_field_err(format!(
                    "cnn needs image-shaped inputs (n, c, h, w), dataset has shape {shape:?}"
                )));
            }
            let graph = build_small_cnn((shape[1], shape[2], shape[3]), channels, train.class_count)?;
            Ok(graph)
        }
    }
}

/// Prepares, runs, and persists an experiment. `out_override` replaces the
/// config's output directory.
pub fn run_experiment(
    cfg: ExperimentConfig,
    out_override: Option<&Path>,
) -> Result<RunOutput, RunError> {
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out));
    let exp = Experiment::prepare(cfg)?;
    let mut output = exp.run()?;
    let metrics_path = out_dir.join("metrics.jsonl");
    metrics::write_jsonl(&metrics_path, &exp.cfg.hash(), &output.records)?;
    output.metrics_path = Some(metrics_path);
    if let Some(summary) = &output.summary {
        let summary_path = out_dir.join("summary.csv");
        metrics::write_summary_csv(&summary_path, summary)?;
        output.summary_path = Some(summary_path);
    }
    Ok(output)
}

/// Axis swept by [`sweep`].
#[derive(Debug, Clone)]
pub enum SweepAxis {
    Fraction(Vec<f64>),
    Batch(Vec<usize>),
    Scheme(Vec<String>),
}

impl SweepAxis {
    pub fn default_fractions() -> SweepAxis {
        SweepAxis::Fraction(vec![0.5, 0.25, 0.125])
    }
    pub fn default_batches() -> SweepAxis {
        SweepAxis::Batch(vec![16, 32, 64, 128])
    }
    pub fn default_schemes() -> SweepAxis {
        SweepAxis::Scheme(prob::names().iter().map(|s| s.to_string()).collect())
    }
}

/// One sweep cell: the candidate rule vs the SGD baseline on identical
/// seeds, with per-trial window means retained for paired statistics.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub batch_size: usize,
    pub axis_label: String,
    pub candidate_mean: f64,
    pub baseline_mean: f64,
    pub gain: f64,
    /// Population std over trials of the per-trial paired gains.
    pub gain_std: f64,
    pub candidate_trials: Vec<f64>,
    pub baseline_trials: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: String,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    /// Grid CSV: one row per batch size, one column block per axis value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("batch_size,axis,baseline,candidate,gain,gain_std\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.batch_size, c.axis_label, c.baseline_mean, c.candidate_mean, c.gain, c.gain_std
            ));
        }
        out
    }
}

fn run_summary_trials(cfg: &ExperimentConfig) -> Result<Vec<f64>, RunError> {
    let exp = Experiment::prepare(cfg.clone())?;
    let out = exp.run()?;
    let summary = out.summary.ok_or(RunError::EmptyMetrics {
        path: "sweep run".to_string(),
    })?;
    Ok(summary.per_trial.iter().map(|&(_, m, _)| m).collect())
}

/// Runs the config's optimizer against an SGD baseline along one axis. The
/// baseline differs from the candidate only in the update rule, so identical
/// optimizers yield exactly zero gain.
pub fn sweep(cfg: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepReport, RunError> {
    let mut cells = Vec::new();
    let configs: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::Fraction(fractions) => fractions
            .iter()
            .map(|&f| {
                let mut c = cfg.clone();
                c.fraction = f;
                (format!("fraction={f}"), c)
            })
            .collect(),
        SweepAxis::Batch(batches) => batches
            .iter()
            .map(|&b| {
                let mut c = cfg.clone();
                c.batch_size = b;
                (format!("batch={b}"), c)
            })
            .collect(),
        SweepAxis::Scheme(schemes) => schemes
            .iter()
            .map(|s| {
                let mut c = cfg.clone();
                c.scheme = s.clone();
                (format!("scheme={s}"), c)
            })
            .collect(),
    };
    for (label, candidate_cfg) in configs {
        let mut baseline_cfg = candidate_cfg.clone();
        baseline_cfg.rule = "sgd".to_string();
        let candidate_trials = run_summary_trials(&candidate_cfg)?;
        let baseline_trials = run_summary_trials(&baseline_cfg)?;
        let n = candidate_trials.len().min(baseline_trials.len()) as f64;
        let candidate_mean = candidate_trials.iter().sum::<f64>() / n;
        let baseline_mean = baseline_trials.iter().sum::<f64>() / n;
        let gains: Vec<f64> = candidate_trials
            .iter()
            .zip(&baseline_trials)
            .map(|(c, b)| c - b)
            .collect();
        let gain = gains.iter().sum::<f64>() / n;
        let gain_var = gains.iter().map(|g| (g - gain) * (g - gain)).sum::<f64>() / n;
        cells.push(SweepCell {
            batch_size: candidate_cfg.batch_size,
            axis_label: label,
            candidate_mean,
            baseline_mean,
            gain,
            gain_std: gain_var.sqrt(),
            candidate_trials,
            baseline_trials,
        });
    }
    Ok(SweepReport {
        axis: match axis {
            SweepAxis::Fraction(_) => "fraction".into(),
            SweepAxis::Batch(_) => "batch".into(),
            SweepAxis::Scheme(_) => "scheme".into(),
        },
        cells,
    })
}

/// Gap between the folded cumulative-moving-average gradient and the
/// recomputed accumulated-batch gradient at the same pre-update iterate,
/// measured at every applied update along a gated training trajectory.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub eta: f64,
    pub max_gap: f64,
    pub mean_gap: f64,
    pub applications: usize,
}

/// Runs the gated rule for `epochs` epochs at learning rate `eta` with a
/// constant update probability `p`, recomputing the reference gradient over
/// each applied parameter's accumulated window at the current iterate.
/// With `eta == 0` the two quantities must agree to rounding.
pub fn cma_reference_gap(
    exp: &Experiment,
    eta: f64,
    epochs: usize,
    p: f64,
    trial: usize,
) -> Result<GapReport, RunError> {
    let cfg = &exp.cfg;
    let graph = &exp.graph;
    let m = graph.param_count();
    let (train, _) = exp.trial_datasets(trial)?;
    let mut params = init_params(
        graph,
        rng::derive_seed(cfg.seed, trial as u64, Purpose::Init),
    );
    let mut state = graph.init_state();
    let shuffle_seed = rng::derive_seed(cfg.seed, trial as u64, Purpose::Shuffle);
    let mut gate_rng = rng::trial_stream(cfg.seed, trial as u64, Purpose::Gate);

    let scheme = prob::build(
        "constant",
        &ProbParams {
            constant_p: p,
            ..ProbParams::default()
        },
    )?;
    let mut rule = SbsCma::new(
        m,
        scheme,
        crate::optim::GradientSource::Cma,
        0.0,
        rng::stream(0, &[]),
    );

    let mut max_gap = 0.0f64;
    let mut gap_sum = 0.0f64;
    let mut applications = 0usize;

    for epoch in 0..epochs {
        rule.epoch_reset();
        let mut window_start = vec![0usize; m];
        let plan = plan_epoch(train.len(), cfg.batch_size, shuffle_seed, epoch)?;
        for (t, batch) in plan.batches.iter().enumerate() {
            let (x, y) = train.batch(batch);
            let x = conform(graph, x);
            let (_, tape) = forward(graph, &params, &mut state, &x, Targets::Classes(&y))?;
            let grads = backward(graph, &tape, &params)?;
            rule.fold(&grads, batch.len(), graph.groups())?;
            let indicators: Vec<bool> = (0..m).map(|_| gate_rng.random::<f64>() < p).collect();

            // Reference gradients over each distinct open window, evaluated
            // at the current (pre-update) iterate.
            let mut starts: Vec<usize> = indicators
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c)
                .map(|(j, _)| window_start[j])
                .collect();
            starts.sort_unstable();
            starts.dedup();
            let mut reference: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for &start in &starts {
                let union: Vec<usize> = plan.batches[start..=t].concat();
                let (ux, uy) = train.batch(&union);
                let ux = conform(graph, ux);
                let (_, rtape) = forward_frozen(graph, &params, &state, &ux, Targets::Classes(&uy))?;
                reference.insert(start, backward(graph, &rtape, &params)?);
            }
            for j in 0..m {
                if indicators[j] {
                    let gap = (rule.gate_state().avg[j] - reference[&window_start[j]][j]).abs();
                    max_gap = max_gap.max(gap);
                    gap_sum += gap;
                    applications += 1;
                }
            }
            rule.apply(&mut params, eta, &indicators);
            for j in 0..m {
                if indicators[j] {
                    window_start[j] = t + 1;
                }
            }
        }
    }
    Ok(GapReport {
        eta,
        max_gap,
        mean_gap: if applications > 0 { gap_sum / applications as f64 } else { 0.0 },
        applications,
    })
}
