//! Architecture search: alternating weight and distribution updates on a
//! supernet, or distribution updates alone on a planted objective.

mod config;
mod planted;
mod report;

use rand::Rng;
use serde::{Deserialize, Serialize};
use unas_autodiff::{Array, Tape, Var};

use crate::categorical::CategoricalParam;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate, relax, Baseline, EstimatorKind, EstimatorOptions, LossAdapter, RestrictedSites,
};
use crate::latency::{
    fit_surrogate, hinge, random_latency_quantile, DeviceModel, FitReport, LatencyLoss,
    SurrogateModel,
};
use crate::rng::Streams;
use crate::space::{extract_final, Extraction, SearchSpace};
use crate::supernet::{
    cosine, gen_loss, gen_loss_on_tape, weight_step, Adam, Batch, Supernet, ToyTask, Weights,
};

pub use config::{
    Objective, ObjectiveBase, SearchConfig, SearchEstimator, SpaceKind, TemperatureSchedule,
};
pub use planted::PlantedObjective;
pub use report::{write_metrics_csv, MetricsRow, METRICS_HEADER};

const TAG_INIT: u64 = 1;
const TAG_WEIGHT: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_PHI: u64 = 4;
const TAG_LATENCY: u64 = 5;
const TAG_DROPOUT: u64 = 6;
const TAG_FIT: u64 = 7;
const TAG_TARGET: u64 = 8;
const TAG_EVAL: u64 = 9;

/// Random architectures used to place a quantile latency target.
pub const TARGET_SAMPLES: usize = 1000;

/// Search state at the end of a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub logits: Vec<Vec<f64>>,
    pub weights: Option<Vec<Vec<f64>>>,
}

/// Values of the search objective at one architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ArchMetrics {
    pub objective: f64,
    pub l_train: Option<f64>,
    pub l_val: Option<f64>,
    pub gap: Option<f64>,
    pub val_error: Option<f64>,
    pub latency: Option<f64>,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub phi_steps: usize,
    /// Mean over steps of the summed single-sample gradient variance.
    pub mean_total_variance: f64,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub config: SearchConfig,
    pub space: SearchSpace,
    pub metrics: Vec<MetricsRow>,
    pub logits: Vec<Vec<f64>>,
    pub extraction: Extraction,
    pub final_metrics: ArchMetrics,
    pub checkpoints: Vec<Checkpoint>,
    pub estimator_summary: EstimatorSummary,
    pub latency_target: Option<f64>,
    pub surrogate_fit: Option<FitReport>,
    pub weights: Option<Weights>,
    pub planted: Option<PlantedObjective>,
}

/// Everything a run evaluates against, built once from the config.
pub struct Problem {
    pub space: SearchSpace,
    pub supernet: Option<(Supernet, ToyTask)>,
    pub planted: Option<PlantedObjective>,
    pub latency: Option<LatencyLoss>,
    pub surrogate_fit: Option<FitReport>,
}

/// The configured device and its fitted latency surrogate.
pub fn fit_device_surrogate(
    cfg: &SearchConfig,
) -> Result<(DeviceModel, SurrogateModel, FitReport)> {
    let device = DeviceModel::generate(&cfg.layerwise_spec()?, &cfg.device_spec())?;
    let (surrogate, fit) = fit_surrogate(
        &device,
        cfg.surrogate_samples,
        &Streams::new(cfg.device_seed).child(TAG_FIT),
    )?;
    Ok((device, surrogate, fit))
}

impl Problem {
    pub fn build(cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.search_space();
        let (latency, surrogate_fit) = if cfg.objective.latency {
            let (device, surrogate, fit) = fit_device_surrogate(cfg)?;
            let dev_streams = Streams::new(cfg.device_seed);
            let target = match cfg.latency_target {
                Some(t) => t,
                None => random_latency_quantile(
                    &device,
                    cfg.latency_target_quantile,
                    TARGET_SAMPLES,
                    &dev_streams.child(TAG_TARGET),
                )?,
            };
            (
                Some(LatencyLoss::new(device, surrogate, target)?),
                Some(fit),
            )
        } else {
            (None, None)
        };
        let (supernet, planted) = if cfg.objective.base == ObjectiveBase::Planted {
            let device = latency.as_ref().map(|l| &l.device);
            let p = PlantedObjective::generate(&space, cfg.planted_seed, cfg.lambda_arch, device)?;
            (None, Some(p))
        } else {
            let task = ToyTask::generate(&cfg.task_spec())?;
            let net = Supernet::new(space.clone(), cfg.task_dim, cfg.task_classes)?;
            (Some((net, task)), None)
        };
        Ok(Self {
            space,
            supernet,
            planted,
            latency,
            surrogate_fit,
        })
    }

    /// Objective terms at `arch` on full train and validation sets. For a
    /// planted table the penalty is already part of the table value.
    pub fn metrics_at(
        &self,
        cfg: &SearchConfig,
        w: Option<&Weights>,
        arch: &[usize],
        lambda_lat: f64,
    ) -> Result<ArchMetrics> {
        let mut m = ArchMetrics {
            penalty: self.space.arch_penalty(arch, cfg.lambda_arch),
            ..ArchMetrics::default()
        };
        let base = match (&self.supernet, &self.planted, w) {
            (_, Some(p), _) => p.value(arch),
            (Some((net, task)), _, Some(w)) => {
                let tr = net.eval_loss(w, arch, &task.train)?;
                let va = net.eval_loss(w, arch, &task.val)?;
                m.l_train = Some(tr);
                m.l_val = Some(va);
                m.gap = Some(va - tr);
                m.val_error = Some(net.error_rate(w, arch, &task.val)?);
                let b = match cfg.objective.base {
                    ObjectiveBase::Train => tr,
                    ObjectiveBase::Val => va,
                    _ => gen_loss(tr, va, cfg.lambda_gen, cfg.gen_absolute),
                };
                b + m.penalty
            }
            _ => unreachable!("supernet problems always carry weights"),
        };
        let mut objective = base;
        if let Some(lat) = &self.latency {
            let l = lat.device.expected_latency(arch)?;
            m.latency = Some(l);
            objective += lambda_lat * hinge(l, lat.target);
        }
        m.objective = objective;
        Ok(m)
    }
}

/// The differentiable part of the objective on one pair of minibatches.
struct SupernetObjective<'a> {
    net: &'a Supernet,
    w: &'a Weights,
    train: &'a Batch,
    val: &'a Batch,
    base: ObjectiveBase,
    lambda_gen: f64,
    absolute: bool,
    lambda_arch: f64,
}

impl SupernetObjective<'_> {
    fn relaxed_penalty(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Option<Var>> {
        if self.lambda_arch == 0.0 || !matches!(self.net.space(), SearchSpace::Factorized(_)) {
            return Ok(None);
        }
        let mut acc: Option<Var> = None;
        for node in zeta.chunks(4) {
            let same_input = tape.dot(node[0], node[1])?;
            let same_op = tape.dot(node[2], node[3])?;
            let both = tape.mul(same_input, same_op)?;
            acc = Some(match acc {
                None => both,
                Some(a) => tape.add(a, both)?,
            });
        }
        Ok(acc.map(|a| tape.mul_scalar(a, self.lambda_arch)))
    }
}

impl LossAdapter for SupernetObjective<'_> {
    fn eval_discrete(&self, arch: &[usize], _rng: &mut dyn rand::RngCore) -> Result<f64> {
        let value = match self.base {
            ObjectiveBase::Train => self.net.eval_loss(self.w, arch, self.train)?,
            ObjectiveBase::Val => self.net.eval_loss(self.w, arch, self.val)?,
            _ => {
                let tr = self.net.eval_loss(self.w, arch, self.train)?;
                let va = self.net.eval_loss(self.w, arch, self.val)?;
                gen_loss(tr, va, self.lambda_gen, self.absolute)
            }
        };
        Ok(value + self.net.space().arch_penalty(arch, self.lambda_arch))
    }

    fn has_relaxed(&self) -> bool {
        true
    }

    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let vars = self.net.bind(tape, self.w, false);
        let value = match self.base {
            ObjectiveBase::Train => self.net.loss_relaxed(tape, &vars, zeta, self.train)?,
            ObjectiveBase::Val => self.net.loss_relaxed(tape, &vars, zeta, self.val)?,
            _ => {
                let tr = self.net.loss_relaxed(tape, &vars, zeta, self.train)?;
                let va = self.net.loss_relaxed(tape, &vars, zeta, self.val)?;
                gen_loss_on_tape(tape, tr, va, self.lambda_gen, self.absolute)?
            }
        };
        match self.relaxed_penalty(tape, zeta)? {
            Some(p) => Ok(tape.add(value, p)?),
            None => Ok(value),
        }
    }
}

fn estimator_kind(e: SearchEstimator) -> EstimatorKind {
    match e {
        SearchEstimator::Reinforce => EstimatorKind::Reinforce,
        SearchEstimator::ReinforceBaseline => EstimatorKind::ReinforceBaseline,
        SearchEstimator::Rebar | SearchEstimator::RelaxCombined => EstimatorKind::Rebar,
        SearchEstimator::GsOnly => EstimatorKind::GumbelSoftmax,
    }
}

fn is_skip(name: &str) -> bool {
    matches!(name, "skip" | "identity" | "skip_connect")
}

/// Per site, the choices masked for this step: the skip op of each op site
/// with probability `p`. Draws nothing when `p == 0`.
fn skip_dropout<R: Rng + ?Sized>(space: &SearchSpace, p: f64, rng: &mut R) -> Vec<Vec<usize>> {
    let n_sites = space.site_layout().len();
    let mut removed = vec![Vec::new(); n_sites];
    if p == 0.0 {
        return removed;
    }
    let Some(skip) = space.op_names().iter().position(|n| is_skip(n)) else {
        return removed;
    };
    for (i, r) in removed.iter_mut().enumerate() {
        let op_site = match space {
            SearchSpace::Factorized(_) => i % 4 >= 2,
            _ => true,
        };
        if op_site && rng.random::<f64>() < p {
            r.push(skip);
        }
    }
    removed
}

fn logits_of(sites: &[CategoricalParam]) -> Vec<Vec<f64>> {
    sites.iter().map(|s| s.logits().to_vec()).collect()
}

fn checkpoint(step: usize, sites: &[CategoricalParam], w: Option<&Weights>) -> Checkpoint {
    Checkpoint {
        step,
        logits: logits_of(sites),
        weights: w.map(|w| w.arrays.iter().map(|a| a.data().to_vec()).collect()),
    }
}

fn abort(step: usize, sites: &[CategoricalParam], w: Option<&Weights>) -> Error {
    Error::NumericalAbort {
        step,
        checkpoint: Box::new(checkpoint(step, sites, w)),
    }
}

/// Runs a search as configured. The seed is `cfg.seed`.
pub fn run_search(cfg: &SearchConfig) -> Result<SearchOutcome> {
    let problem = Problem::build(cfg)?;
    run_search_on(cfg, &problem)
}

/// [`run_search`] against a prebuilt problem.
pub fn run_search_on(cfg: &SearchConfig, problem: &Problem) -> Result<SearchOutcome> {
    cfg.validate()?;
    let space = &problem.space;
    let streams = Streams::new(cfg.seed);
    let mut sites = space.uniform_sites();
    let arities = space.site_arities();
    let mut phi_opt = Adam::new(&arities);
    let mut weights = problem
        .supernet
        .as_ref()
        .map(|(net, _)| net.init_weights(&mut streams.child(TAG_INIT).stream(0)));
    let mut w_opt = weights.as_ref().map(|w| Adam::new(&w.sizes()));
    let mut baseline = Baseline::default();
    let kind = estimator_kind(cfg.estimator);
    let phi_steps = cfg.total_steps - cfg.warmup_steps;
    let ckpt_every = (cfg.total_steps / 10).max(1);
    let w_steps_total = cfg.warmup_steps + phi_steps * cfg.w_steps_per_phi_step;
    let mut w_step_count = 0usize;

    let mut metrics = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();
    let mut var_sum = 0.0;
    let mut norm_sum = 0.0;

    for step in 0..cfg.total_steps {
        let searching = step >= cfg.warmup_steps;
        let k = step.saturating_sub(cfg.warmup_steps);
        let temperature = cfg.temperature_at(k, phi_steps);
        let lambda_lat = cfg.lambda_lat_at(step);

        if searching {
            let opts = EstimatorOptions {
                temperature,
                couple: cfg.couple,
            };
            let removed = skip_dropout(
                space,
                cfg.skip_dropout_p,
                &mut streams.child(TAG_DROPOUT).stream(step as u64),
            );
            let view = RestrictedSites::new(&sites, &removed)?;
            let phi_streams = streams.child(TAG_PHI).child(step as u64);
            let n = cfg.arch_samples_per_step;
            let mut est = match (&problem.supernet, &problem.planted, &weights) {
                (_, Some(p), _) => estimate(
                    kind,
                    view.sites(),
                    &view.wrap(p),
                    &opts,
                    n,
                    &phi_streams,
                    Some(&mut baseline),
                ),
                (Some((net, task)), _, Some(w)) => {
                    let batch_streams = streams.child(TAG_BATCH);
                    let rows = cfg.batch_size * cfg.batches_per_phi_step;
                    let train = task
                        .train
                        .minibatch(rows, &mut batch_streams.stream(2 * step as u64));
                    let val = task
                        .val
                        .minibatch(rows, &mut batch_streams.stream(2 * step as u64 + 1));
                    let obj = SupernetObjective {
                        net,
                        w,
                        train: &train,
                        val: &val,
                        base: cfg.objective.base,
                        lambda_gen: cfg.lambda_gen,
                        absolute: cfg.gen_absolute,
                        lambda_arch: cfg.lambda_arch,
                    };
                    estimate(
                        kind,
                        view.sites(),
                        &view.wrap(&obj),
                        &opts,
                        n,
                        &phi_streams,
                        Some(&mut baseline),
                    )
                }
                _ => unreachable!("problem has a supernet or a planted table"),
            }
            .map_err(|e| match e {
                Error::Tape(unas_autodiff::TapeError::NonFinite { .. }) => {
                    abort(step, &sites, weights.as_ref())
                }
                other => other,
            })?;
            if let Some(lat) = &problem.latency {
                if lambda_lat > 0.0 {
                    let g = relax(
                        view.sites(),
                        &view.wrap(lat),
                        &opts,
                        n,
                        &streams.child(TAG_LATENCY).child(step as u64),
                    )?;
                    for (a, b) in est.grad.iter_mut().zip(&g.grad) {
                        *a += lambda_lat * b;
                    }
                }
            }
            if !est.is_finite() {
                return Err(abort(step, &sites, weights.as_ref()));
            }
            var_sum += est.variance.iter().sum::<f64>();
            norm_sum += est.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let full = view.expand_grad(&est);
            let grads: Vec<Array> = full
                .per_site(&sites)
                .into_iter()
                .map(|g| Array::vector(g.to_vec()))
                .collect();
            let mut params: Vec<Array> = sites
                .iter()
                .map(|s| Array::vector(s.logits().to_vec()))
                .collect();
            phi_opt.step(
                &mut params,
                &grads,
                cosine(cfg.arch_lr, cfg.arch_lr_end, k, phi_steps),
            );
            for (s, p) in sites.iter_mut().zip(&params) {
                s.logits_mut().copy_from_slice(p.data());
            }
        }

        if let (Some((net, task)), Some(w), Some(opt)) =
            (&problem.supernet, weights.as_mut(), w_opt.as_mut())
        {
            let reps = if searching {
                cfg.w_steps_per_phi_step
            } else {
                1
            };
            let wst = streams.child(TAG_WEIGHT).child(step as u64);
            for j in 0..reps {
                let mut rng = wst.stream(j as u64);
                let batch = task.train.minibatch(cfg.batch_size, &mut rng);
                let lr = cosine(
                    cfg.weight_lr,
                    cfg.weight_lr_end,
                    w_step_count,
                    w_steps_total,
                );
                let res = weight_step(
                    net,
                    w,
                    opt,
                    lr,
                    &sites,
                    &batch,
                    cfg.arch_samples_per_step,
                    &mut rng,
                    step,
                );
                w_step_count += 1;
                match res {
                    Err(Error::NonFiniteGradient { .. }) => {
                        return Err(abort(step, &sites, Some(w)))
                    }
                    Err(e) => return Err(e),
                    Ok(_) => {}
                }
            }
            if !w.is_finite() {
                return Err(abort(step, &sites, Some(w)));
            }
        }

        let mode = extract_final(&sites).arch;
        let m = problem.metrics_at(cfg, weights.as_ref(), &mode, lambda_lat)?;
        if !m.objective.is_finite() {
            return Err(abort(step, &sites, weights.as_ref()));
        }
        metrics.push(MetricsRow::new(step, &m, temperature, lambda_lat));
        if (step + 1) % ckpt_every == 0 {
            checkpoints.push(checkpoint(step, &sites, weights.as_ref()));
        }
    }

    let extraction = extract_final(&sites);
    let final_metrics = problem.metrics_at(
        cfg,
        weights.as_ref(),
        &extraction.arch,
        cfg.lambda_lat_at(cfg.total_steps),
    )?;
    Ok(SearchOutcome {
        config: cfg.clone(),
        space: space.clone(),
        metrics,
        logits: logits_of(&sites),
        extraction,
        final_metrics,
        checkpoints,
        estimator_summary: EstimatorSummary {
            estimator: serde_json::to_value(cfg.estimator)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            phi_steps,
            mean_total_variance: if phi_steps > 0 {
                var_sum / phi_steps as f64
            } else {
                0.0
            },
            mean_grad_norm: if phi_steps > 0 {
                norm_sum / phi_steps as f64
            } else {
                0.0
            },
        },
        latency_target: problem.latency.as_ref().map(|l| l.target),
        surrogate_fit: problem.surrogate_fit.clone(),
        weights,
        planted: problem.planted.clone(),
    })
}

/// Stand-alone evaluation of a fixed architecture.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_error: f64,
    pub val_error: f64,
    pub penalty: f64,
    pub latency: Option<f64>,
    pub planted_value: Option<f64>,
}

/// Trains fresh weights for `arch` alone for `cfg.eval_steps` steps and
/// reports losses and error rates on the full sets. Planted objectives are
/// simply looked up.
pub fn run_eval(cfg: &SearchConfig, arch: &[usize]) -> Result<EvalReport> {
    let problem = Problem::build(cfg)?;
    problem.space.check_arch(arch)?;
    let latency = match &problem.latency {
        Some(l) => Some(l.device.expected_latency(arch)?),
        None => None,
    };
    let penalty = problem.space.arch_penalty(arch, cfg.lambda_arch);
    if let Some(p) = &problem.planted {
        return Ok(EvalReport {
            steps: 0,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            train_error: f64::NAN,
            val_error: f64::NAN,
            penalty,
            latency,
            planted_value: Some(p.value(arch)),
        });
    }
    let (net, task) = problem
        .supernet
        .as_ref()
        .expect("non-planted problems carry a supernet");
    let streams = Streams::new(cfg.seed).child(TAG_EVAL);
    let mut w = net.init_weights(&mut streams.stream(0));
    let mut opt = Adam::new(&w.sizes());
    for step in 0..cfg.eval_steps {
        let mut rng = streams.child(1).stream(step as u64);
        let batch = task.train.minibatch(cfg.batch_size, &mut rng);
        let (_, g) = net.loss_and_grad(&w, arch, &batch).map_err(|e| match e {
            Error::Tape(unas_autodiff::TapeError::NonFinite { .. }) => {
                Error::NonFiniteGradient { step }
            }
            other => other,
        })?;
        if !g.iter().all(Array::is_finite) {
            return Err(Error::NonFiniteGradient { step });
        }
        opt.step(
            &mut w.arrays,
            &g,
            cosine(cfg.weight_lr, cfg.weight_lr_end, step, cfg.eval_steps),
        );
    }
    Ok(EvalReport {
        steps: cfg.eval_steps,
        train_loss: net.eval_loss(&w, arch, &task.train)?,
        val_loss: net.eval_loss(&w, arch, &task.val)?,
        train_error: net.error_rate(&w, arch, &task.train)?,
        val_error: net.error_rate(&w, arch, &task.val)?,
        penalty,
        latency,
        planted_value: None,
    })
}
