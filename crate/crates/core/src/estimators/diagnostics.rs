use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{estimate, Baseline, EstimatorKind, EstimatorOptions, LossAdapter};
use crate::categorical::CategoricalParam;
use crate::error::Result;
use crate::rng::Streams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unbiased,
    Biased,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Unbiased => "unbiased",
            Verdict::Biased => "biased",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentRow {
    pub component: usize,
    pub site: String,
    pub choice: usize,
    pub mean: f64,
    pub oracle: f64,
    pub bias: f64,
    pub se: f64,
    /// Single-sample variance.
    pub variance: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    pub reps: usize,
    pub rows: Vec<ComponentRow>,
    #[serde(serialize_with = "ser_secs")]
    pub wall_time: Duration,
}

fn ser_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl DiagnosticsReport {
    /// Any component with `|bias| > 3 SE`.
    pub fn verdict(&self) -> Verdict {
        if self.rows.iter().any(|r| r.verdict == Verdict::Biased) {
            Verdict::Biased
        } else {
            Verdict::Unbiased
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.rows.iter().map(|r| r.variance).sum()
    }

    /// Largest `|bias| / SE` over components.
    pub fn max_z(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                if r.se > 0.0 {
                    r.bias.abs() / r.se
                } else if r.bias == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Runs `reps` independent estimates of `n` samples each and compares their
/// mean with `oracle`.
///
/// With `reps == 1` the standard error comes from the per-sample variance;
/// otherwise from the spread of the replicate means.
#[allow(clippy::too_many_arguments)]
pub fn diagnostics<L: LossAdapter>(
    kind: EstimatorKind,
    opts: &EstimatorOptions,
    sites: &[CategoricalParam],
    loss: &L,
    oracle: &[f64],
    n: usize,
    reps: usize,
    streams: &Streams,
) -> Result<DiagnosticsReport> {
    let start = Instant::now();
    let reps = reps.max(1);
    let mut baseline = Baseline::default();
    let mut estimates = Vec::with_capacity(reps);
    for r in 0..reps {
        estimates.push(estimate(
            kind,
            sites,
            loss,
            opts,
            n,
            &streams.child(r as u64),
            Some(&mut baseline),
        )?);
    }
    let dim = oracle.len();
    let labels: Vec<(String, usize)> = sites
        .iter()
        .flat_map(|s| (0..s.k()).map(move |c| (s.site_id().to_string(), c)))
        .collect();
    let rows = (0..dim)
        .map(|i| {
            let means: Vec<f64> = estimates.iter().map(|e| e.grad[i]).collect();
            let mean = means.iter().sum::<f64>() / reps as f64;
            let variance = estimates.iter().map(|e| e.variance[i]).sum::<f64>() / reps as f64;
            let se = if reps > 1 {
                let s2 = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
                (s2 / reps as f64).sqrt()
            } else {
                estimates[0].standard_error()[i]
            };
            let bias = mean - oracle[i];
            ComponentRow {
                component: i,
                site: labels[i].0.clone(),
                choice: labels[i].1,
                mean,
                oracle: oracle[i],
                bias,
                se,
                variance,
                verdict: if bias.abs() > 3.0 * se {
                    Verdict::Biased
                } else {
                    Verdict::Unbiased
                },
            }
        })
        .collect();
    Ok(DiagnosticsReport {
        estimator: kind,
        n_samples: n,
        reps,
        rows,
        wall_time: start.elapsed(),
    })
}
