//! The estimator check suite behind `check-estimators`: seeded enumerable
//! problems, each run through every applicable estimator and compared with
//! the enumeration oracle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::categorical::CategoricalParam;
use crate::error::{Error, Result};
use crate::estimators::losses::{Blackbox, LinearLoss, QuadraticLoss, TableLoss};
use crate::estimators::{
    diagnostics, enumerate_architectures, exact_gradient, DiagnosticsReport, EstimatorKind,
    EstimatorOptions, GradEstimate, LossAdapter, Verdict,
};
use crate::latency::{
    fit_surrogate, random_latency_quantile, DeviceKind, DeviceModel, DeviceSpec, LatencyLoss,
};
use crate::rng::Streams;
use crate::space::LayerwiseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSize {
    Small,
    Full,
}

impl FromStr for SuiteSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!(
                "unknown suite `{s}`; expected small or full"
            ))),
        }
    }
}

impl SuiteSize {
    pub fn samples(self) -> usize {
        match self {
            Self::Small => 20_000,
            Self::Full => 200_000,
        }
    }
}

#[derive(Clone, Debug)]
pub enum SuiteLoss {
    Table(TableLoss),
    Quadratic(QuadraticLoss),
    Latency(LatencyLoss),
}

#[derive(Clone, Debug)]
pub struct SuiteProblem {
    pub name: String,
    pub sites: Vec<CategoricalParam>,
    pub temperature: f64,
    pub loss: SuiteLoss,
}

impl fmt::Display for SuiteLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table(_) => "table",
            Self::Quadratic(_) => "quadratic",
            Self::Latency(_) => "latency",
        })
    }
}

/// Per-site additive fit of a loss under the uniform distribution, used as
/// the RELAX surrogate on differentiable problems.
fn additive_surrogate<L: LossAdapter>(arities: &[usize], loss: &L) -> Result<LinearLoss> {
    let mut sums: Vec<Vec<f64>> = arities.iter().map(|&k| vec![0.0; k]).collect();
    let mut total = 0.0;
    let mut count = 0.0;
    enumerate_architectures(arities, |a| {
        let v = loss.eval_expected(a)?;
        for (e, &k) in a.iter().enumerate() {
            sums[e][k] += v;
        }
        total += v;
        count += 1.0;
        Ok(())
    })?;
    let mean = total / count;
    let n = arities.len() as f64;
    Ok(LinearLoss::new(
        sums.iter()
            .zip(arities)
            .map(|(s, &k)| {
                s.iter()
                    .map(|v| v * k as f64 / count - mean + mean / n)
                    .collect()
            })
            .collect(),
    ))
}

impl SuiteProblem {
    pub fn arities(&self) -> Vec<usize> {
        self.sites.iter().map(CategoricalParam::k).collect()
    }

    pub fn options(&self) -> EstimatorOptions {
        EstimatorOptions {
            temperature: self.temperature,
            couple: true,
        }
    }

    pub fn oracle(&self) -> Result<GradEstimate> {
        match &self.loss {
            SuiteLoss::Table(l) => exact_gradient(&self.sites, l),
            SuiteLoss::Quadratic(l) => exact_gradient(&self.sites, l),
            SuiteLoss::Latency(l) => exact_gradient(&self.sites, l),
        }
    }

    /// Estimators that apply: everything on differentiable losses, and the
    /// score-function family plus RELAX on latency.
    pub fn estimators(&self) -> Vec<EstimatorKind> {
        match self.loss {
            SuiteLoss::Latency(_) => vec![
                EstimatorKind::Reinforce,
                EstimatorKind::ReinforceBaseline,
                EstimatorKind::Relax,
            ],
            _ => vec![
                EstimatorKind::Reinforce,
                EstimatorKind::ReinforceBaseline,
                EstimatorKind::Rebar,
                EstimatorKind::Relax,
                EstimatorKind::GumbelSoftmax,
            ],
        }
    }

    /// Diagnostics for `kind` with `n` samples in one replicate.
    pub fn diagnose(
        &self,
        kind: EstimatorKind,
        oracle: &[f64],
        n: usize,
        streams: &Streams,
    ) -> Result<DiagnosticsReport> {
        let opts = self.options();
        let run =
            |loss: &dyn DynLoss| loss.diagnostics(kind, &opts, &self.sites, oracle, n, streams);
        match (&self.loss, kind) {
            (SuiteLoss::Table(l), EstimatorKind::Relax) => {
                let g = additive_surrogate(&self.arities(), l)?;
                run(&Blackbox::with_surrogate(l.clone(), g))
            }
            (SuiteLoss::Quadratic(l), EstimatorKind::Relax) => {
                let g = additive_surrogate(&self.arities(), l)?;
                run(&Blackbox::with_surrogate(l.clone(), g))
            }
            (SuiteLoss::Table(l), _) => run(l),
            (SuiteLoss::Quadratic(l), _) => run(l),
            (SuiteLoss::Latency(l), _) => run(l),
        }
    }
}

trait DynLoss {
    fn diagnostics(
        &self,
        kind: EstimatorKind,
        opts: &EstimatorOptions,
        sites: &[CategoricalParam],
        oracle: &[f64],
        n: usize,
        streams: &Streams,
    ) -> Result<DiagnosticsReport>;
}

impl<L: LossAdapter> DynLoss for L {
    fn diagnostics(
        &self,
        kind: EstimatorKind,
        opts: &EstimatorOptions,
        sites: &[CategoricalParam],
        oracle: &[f64],
        n: usize,
        streams: &Streams,
    ) -> Result<DiagnosticsReport> {
        diagnostics(kind, opts, sites, self, oracle, n, 1, streams)
    }
}

fn random_sites<R: Rng + ?Sized>(rng: &mut R, arities: &[usize]) -> Result<Vec<CategoricalParam>> {
    arities
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            CategoricalParam::new(
                format!("s{i}"),
                (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}

/// Site arities and temperatures of the random problems.
const SHAPES: [(&[usize], f64); 10] = [
    (&[2], 0.4),
    (&[3], 1.0),
    (&[4], 0.4),
    (&[7], 1.0),
    (&[2, 3], 0.4),
    (&[5, 2], 1.0),
    (&[3, 3, 2], 0.4),
    (&[6], 0.4),
    (&[2, 2, 2], 1.0),
    (&[4, 3, 2], 1.0),
];

/// The first `count` problems of a seeded random family. Problem `i` has
/// shape `i % 10`; losses alternate between table and quadratic so that
/// over 20 problems every shape gets both. `quadratic_only` forces smooth
/// losses throughout.
pub fn random_problems(seed: u64, count: usize, quadratic_only: bool) -> Result<Vec<SuiteProblem>> {
    let mut rng = Streams::new(seed).stream(0);
    let mut out = Vec::new();
    for i in 0..count {
        let (arities, t) = SHAPES[i % SHAPES.len()];
        let sites = random_sites(&mut rng, arities)?;
        let size: usize = arities.iter().product();
        let loss = if quadratic_only || (i + i / SHAPES.len()) % 2 == 1 {
            SuiteLoss::Quadratic(QuadraticLoss::new(
                arities
                    .iter()
                    .map(|&k| (0..k).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect(),
            ))
        } else {
            SuiteLoss::Table(TableLoss::new(
                arities.to_vec(),
                (0..size).map(|_| rng.random_range(-1.0..2.0)).collect(),
            )?)
        };
        out.push(SuiteProblem {
            name: format!(
                "{loss}-{}",
                arities
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            ),
            sites,
            temperature: t,
            loss,
        });
    }
    Ok(out)
}

/// Hinge-latency problem on a 4-layer, 3-op space with a surrogate fitted
/// from 2000 device samples, target at the median random latency. With
/// `corrupt` the surrogate's coefficients are reversed.
pub fn latency_problem(seed: u64, kind: DeviceKind, corrupt: bool) -> Result<SuiteProblem> {
    let space = LayerwiseSpec {
        n_layers: 4,
        op_names: vec!["skip".into(), "mb3_k3".into(), "mb6_k5".into()],
    };
    let device = DeviceModel::generate(
        &space,
        &DeviceSpec {
            kind,
            seed,
            ..DeviceSpec::default()
        },
    )?;
    let streams = Streams::new(seed);
    let (mut surrogate, _) = fit_surrogate(&device, 2000, &streams.child(1))?;
    if corrupt {
        for row in &mut surrogate.coeffs {
            row.reverse();
        }
    }
    let target = random_latency_quantile(&device, 0.5, 1000, &streams.child(2))?;
    let sites = random_sites(&mut streams.stream(3), &[3, 3, 3, 3])?;
    Ok(SuiteProblem {
        name: format!(
            "latency-{}{}",
            serde_json::to_value(kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            if corrupt { "-corrupt" } else { "" }
        ),
        sites,
        temperature: 0.4,
        loss: SuiteLoss::Latency(LatencyLoss::new(device, surrogate, target)?),
    })
}

pub fn suite(size: SuiteSize) -> Result<Vec<SuiteProblem>> {
    let (n_random, latency): (usize, &[(DeviceKind, bool)]) = match size {
        SuiteSize::Small => (4, &[(DeviceKind::Noisy, false)]),
        SuiteSize::Full => (
            20,
            &[
                (DeviceKind::Linear, false),
                (DeviceKind::Nonlinear, false),
                (DeviceKind::Noisy, false),
                (DeviceKind::Noisy, true),
            ],
        ),
    };
    let mut problems = random_problems(2024, n_random, false)?;
    for (i, &(kind, corrupt)) in latency.iter().enumerate() {
        problems.push(latency_problem(100 + i as u64, kind, corrupt)?);
    }
    Ok(problems)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub problem: String,
    pub estimator: EstimatorKind,
    pub samples: usize,
    pub max_z: f64,
    pub verdict: Verdict,
    pub total_variance: f64,
    /// Total variance relative to REINFORCE on the same problem.
    pub variance_ratio: f64,
    pub seconds: f64,
}

/// Runs every estimator on every problem of the suite.
pub fn run_suite(size: SuiteSize) -> Result<Vec<SuiteRow>> {
    let n = size.samples();
    let mut rows = Vec::new();
    for (p_idx, p) in suite(size)?.iter().enumerate() {
        let oracle = p.oracle()?;
        let streams = Streams::new(p_idx as u64);
        let mut reinforce_var = f64::NAN;
        for kind in p.estimators() {
            let r = p.diagnose(kind, &oracle.grad, n, &streams)?;
            if kind == EstimatorKind::Reinforce {
                reinforce_var = r.total_variance();
            }
            rows.push(SuiteRow {
                problem: p.name.clone(),
                estimator: kind,
                samples: n,
                max_z: r.max_z(),
                verdict: r.verdict(),
                total_variance: r.total_variance(),
                variance_ratio: r.total_variance() / reinforce_var,
                seconds: r.wall_time.as_secs_f64(),
            });
        }
    }
    Ok(rows)
}
