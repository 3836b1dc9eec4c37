//! Simulated device latency, a linear surrogate fitted by least squares, and
//! the hinge latency loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};
use unas_autodiff::{Array, Tape, Var};

use crate::error::{Error, Result};
use crate::estimators::LossAdapter;
use crate::rng::Streams;
use crate::space::LayerwiseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    /// Sum of per-(layer, op) costs.
    Linear,
    /// Adds positive costs for adjacent pairs of non-skip layers.
    Nonlinear,
    /// Nonlinear plus Gaussian jitter on every query.
    Noisy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSpec {
    pub kind: DeviceKind,
    pub seed: u64,
    /// Jitter standard deviation in ms (noisy kind only).
    pub sigma: f64,
    /// Size of adjacent-layer interaction costs relative to the op costs.
    pub interaction: f64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            kind: DeviceKind::Noisy,
            seed: 0,
            sigma: 0.1,
            interaction: 0.25,
        }
    }
}

/// Nominal cost of an op label: `mbE_kK` scales with expansion and kernel,
/// skip is nearly free, anything else grows with its index.
fn nominal_cost(name: &str, index: usize) -> f64 {
    if matches!(name, "skip" | "identity" | "zero") {
        return 0.05;
    }
    let parsed = name.strip_prefix("mb").and_then(|r| {
        let (e, k) = r.split_once("_k")?;
        Some((e.parse::<f64>().ok()?, k.parse::<f64>().ok()?))
    });
    match parsed {
        Some((e, k)) => 0.15 * e * k / 3.0,
        None => 0.3 + 0.2 * index as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub kind: DeviceKind,
    /// `base[layer][op]` in ms.
    pub base: Vec<Vec<f64>>,
    /// `pairs[layer][a][b]`: extra cost when layer `layer` runs `a` and the
    /// next layer runs `b`.
    pub pairs: Vec<Vec<Vec<f64>>>,
    pub sigma: f64,
}

impl DeviceModel {
    pub fn generate(space: &LayerwiseSpec, spec: &DeviceSpec) -> Result<Self> {
        if spec.sigma < 0.0 || spec.interaction < 0.0 {
            return Err(Error::Config(
                "device sigma and interaction must be nonnegative".into(),
            ));
        }
        let streams = Streams::new(spec.seed);
        let mut rng = streams.stream(0);
        let k = space.op_names.len();
        let base: Vec<Vec<f64>> = (0..space.n_layers)
            .map(|_| {
                let scale = rng.random_range(0.8..1.2);
                space
                    .op_names
                    .iter()
                    .enumerate()
                    .map(|(j, n)| scale * nominal_cost(n, j) * rng.random_range(0.9..1.1))
                    .collect()
            })
            .collect();
        let pairs = if spec.kind == DeviceKind::Linear {
            Vec::new()
        } else {
            let mut rng = streams.stream(1);
            (0..space.n_layers.saturating_sub(1))
                .map(|l| {
                    (0..k)
                        .map(|a| {
                            (0..k)
                                .map(|b| {
                                    let u: f64 = rng.random();
                                    if base[l][a] <= 0.05 || base[l + 1][b] <= 0.05 {
                                        0.0
                                    } else {
                                        spec.interaction * u * (base[l][a] * base[l + 1][b]).sqrt()
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            kind: spec.kind,
            base,
            pairs,
            sigma: if spec.kind == DeviceKind::Noisy {
                spec.sigma
            } else {
                0.0
            },
        })
    }

    /// A linear device with the given cost table.
    pub fn linear(base: Vec<Vec<f64>>) -> Self {
        Self {
            kind: DeviceKind::Linear,
            base,
            pairs: Vec::new(),
            sigma: 0.0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.base.len()
    }

    pub fn n_ops(&self) -> usize {
        self.base.first().map_or(0, Vec::len)
    }

    fn check(&self, arch: &[usize]) -> Result<()> {
        if arch.len() != self.n_layers() {
            return Err(Error::SiteCount {
                expected: self.n_layers(),
                got: arch.len(),
            });
        }
        if let Some(&c) = arch.iter().find(|&&c| c >= self.n_ops()) {
            return Err(Error::BadChoice {
                index: c,
                k: self.n_ops(),
            });
        }
        Ok(())
    }

    /// Noise-free latency.
    pub fn expected_latency(&self, arch: &[usize]) -> Result<f64> {
        self.check(arch)?;
        let mut total: f64 = arch.iter().enumerate().map(|(l, &c)| self.base[l][c]).sum();
        for (l, p) in self.pairs.iter().enumerate() {
            total += p[arch[l]][arch[l + 1]];
        }
        Ok(total)
    }

    /// One measurement; jitter is clamped so latency stays positive.
    pub fn latency(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        let mean = self.expected_latency(arch)?;
        if self.sigma == 0.0 {
            return Ok(mean);
        }
        let noise = Normal::new(0.0, self.sigma).expect("sigma checked nonnegative");
        Ok((mean + noise.sample(rng)).max(1e-6))
    }

    /// Intercept plus per-layer offsets from op 0; the unique linear model
    /// when the device is linear.
    pub fn canonical_table(&self) -> SurrogateModel {
        SurrogateModel::from_table(&self.base)
    }
}

/// `g(z) = intercept + sum_l coeffs[l][z_l]`, extended to relaxed samples as
/// `intercept + sum_l coeffs[l] . zeta_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub intercept: f64,
    pub coeffs: Vec<Vec<f64>>,
}

impl SurrogateModel {
    /// Canonical form of a per-(layer, op) table: op 0 of every layer is
    /// folded into the intercept so the coefficients are identifiable.
    pub fn from_table(table: &[Vec<f64>]) -> Self {
        Self {
            intercept: table.iter().map(|r| r[0]).sum(),
            coeffs: table
                .iter()
                .map(|r| r.iter().map(|v| v - r[0]).collect())
                .collect(),
        }
    }

    pub fn predict(&self, arch: &[usize]) -> f64 {
        self.intercept
            + arch
                .iter()
                .enumerate()
                .map(|(l, &c)| self.coeffs[l][c])
                .sum::<f64>()
    }

    pub fn on_tape(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (z, c) in zeta.iter().zip(&self.coeffs) {
            let cv = tape.constant(Array::vector(c.clone()));
            let term = tape.dot(*z, cv)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let sum = acc.ok_or(Error::SiteCount {
            expected: self.coeffs.len(),
            got: 0,
        })?;
        Ok(tape.add_scalar(sum, self.intercept))
    }

    /// Largest coefficient difference after both models are in canonical form.
    pub fn max_abs_diff(&self, other: &SurrogateModel) -> f64 {
        let a = self.canonical();
        let b = other.canonical();
        a.coeffs
            .iter()
            .flatten()
            .zip(b.coeffs.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold((a.intercept - b.intercept).abs(), f64::max)
    }

    pub fn canonical(&self) -> SurrogateModel {
        let shifted: Vec<Vec<f64>> = self.coeffs.clone();
        let mut m = SurrogateModel::from_table(&shifted);
        m.intercept += self.intercept;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub n_train: usize,
    pub n_test: usize,
    pub r2_train: f64,
    /// Coefficient of determination on the held-out tenth.
    pub r2_test: f64,
    pub rmse_test: f64,
}

fn r_squared(y: &[f64], pred: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    (r2, (ss_res / n).sqrt())
}

/// Least-squares fit of the linear surrogate on `n_samples` uniformly random
/// architectures, 90% for fitting and 10% held out.
pub fn fit_surrogate(
    device: &DeviceModel,
    n_samples: usize,
    streams: &Streams,
) -> Result<(SurrogateModel, FitReport)> {
    let (layers, k) = (device.n_layers(), device.n_ops());
    let cols = 1 + layers * (k - 1);
    let n_test = n_samples / 10;
    let n_train = n_samples - n_test;
    if n_train < cols {
        return Err(Error::TooFewSamples {
            needed: cols,
            got: n_train,
        });
    }
    let mut rng = streams.stream(0);
    let mut noise = streams.stream(1);
    let mut archs = Vec::with_capacity(n_samples);
    let mut y = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let a: Vec<usize> = (0..layers).map(|_| rng.random_range(0..k)).collect();
        y.push(device.latency(&a, &mut noise)?);
        archs.push(a);
    }
    let design = DMatrix::from_fn(n_train, cols, |r, c| {
        if c == 0 {
            1.0
        } else {
            let (l, j) = ((c - 1) / (k - 1), (c - 1) % (k - 1) + 1);
            if archs[r][l] == j {
                1.0
            } else {
                0.0
            }
        }
    });
    let svd = design.svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let rank = svd.rank(tol);
    if rank < cols {
        return Err(Error::RankDeficient { rank, cols });
    }
    let b = DVector::from_column_slice(&y[..n_train]);
    let beta = svd.solve(&b, tol).map_err(|e| Error::Loss(e.to_string()))?;
    let model = SurrogateModel {
        intercept: beta[0],
        coeffs: (0..layers)
            .map(|l| {
                std::iter::once(0.0)
                    .chain((1..k).map(|j| beta[1 + l * (k - 1) + j - 1]))
                    .collect()
            })
            .collect(),
    };
    let pred: Vec<f64> = archs.iter().map(|a| model.predict(a)).collect();
    let (r2_train, _) = r_squared(&y[..n_train], &pred[..n_train]);
    let (r2_test, rmse_test) = if n_test > 0 {
        r_squared(&y[n_train..], &pred[n_train..])
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok((
        model,
        FitReport {
            n_train,
            n_test,
            r2_train,
            r2_test,
            rmse_test,
        },
    ))
}

pub fn hinge(latency: f64, target: f64) -> f64 {
    (latency - target).max(0.0)
}

/// `E[max(0, m + e - t)]` for `e ~ N(0, sigma^2)`.
fn expected_hinge(mean: f64, sigma: f64, target: f64) -> f64 {
    if sigma == 0.0 {
        return hinge(mean, target);
    }
    let d = mean - target;
    let n = StatNormal::standard();
    d * n.cdf(d / sigma) + sigma * n.pdf(d / sigma)
}

/// Hinge latency objective over a layer-wise space: discrete values come
/// from the device, the surrogate is the hinge of the linear model.
#[derive(Clone, Debug)]
pub struct LatencyLoss {
    pub device: DeviceModel,
    pub surrogate: SurrogateModel,
    pub target: f64,
}

impl LatencyLoss {
    pub fn new(device: DeviceModel, surrogate: SurrogateModel, target: f64) -> Result<Self> {
        if target.is_nan() || target <= 0.0 {
            return Err(Error::Config(format!(
                "latency target must be positive, got {target}"
            )));
        }
        Ok(Self {
            device,
            surrogate,
            target,
        })
    }
}

impl LossAdapter for LatencyLoss {
    fn eval_discrete(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        Ok(hinge(self.device.latency(arch, rng)?, self.target))
    }

    /// Exact expectation over measurement jitter; the clamp at a positive
    /// latency is ignored, which is exact whenever the target is well above
    /// the jitter scale.
    fn eval_expected(&self, arch: &[usize]) -> Result<f64> {
        Ok(expected_hinge(
            self.device.expected_latency(arch)?,
            self.device.sigma,
            self.target,
        ))
    }

    fn has_surrogate(&self) -> bool {
        true
    }

    fn surrogate(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let g = self.surrogate.on_tape(tape, zeta)?;
        let shifted = tape.add_scalar(g, -self.target);
        Ok(tape.hinge(shifted))
    }
}

/// Latency percentile over `n` uniformly random architectures.
pub fn random_latency_quantile(
    device: &DeviceModel,
    q: f64,
    n: usize,
    streams: &Streams,
) -> Result<f64> {
    let mut rng = streams.stream(0);
    let mut lat = Vec::with_capacity(n);
    for _ in 0..n {
        let a: Vec<usize> = (0..device.n_layers())
            .map(|_| rng.random_range(0..device.n_ops()))
            .collect();
        lat.push(device.expected_latency(&a)?);
    }
    lat.sort_by(f64::total_cmp);
    let idx = ((q * (n as f64 - 1.0)).round() as usize).min(n - 1);
    Ok(lat[idx])
}
