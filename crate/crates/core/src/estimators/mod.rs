//! Gradient estimators for `d/dphi E_{p_phi(z)}[L(z)]` over factorial
//! categorical distributions.
//!
//! Every estimator draws its `i`-th sample from stream `i` of the supplied
//! [`Streams`], so two estimators run with the same streams see the same
//! architecture samples, and results are independent of thread count.

mod diagnostics;
mod exact;
pub mod losses;
mod mask;
mod sampling;

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use unas_autodiff::{Tape, Var};

use crate::categorical::{CategoricalParam, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::rng::Streams;

pub use diagnostics::{diagnostics, ComponentRow, DiagnosticsReport, Verdict};
pub use exact::{
    enumerate_architectures, exact_expected_loss, exact_gradient, space_size, ENUMERATION_LIMIT,
};
pub use mask::RestrictedSites;
pub use sampling::{
    control_variate_terms, estimate, gumbel_softmax_only, rebar, reinforce, reinforce_baseline,
    relax, Baseline, ControlVariateTerms, EstimatorOptions,
};

/// A loss over architectures, as seen by the estimators.
///
/// `eval_discrete` may be non-differentiable or noisy. `eval_relaxed`, when
/// supported, is a differentiable extension to relaxed samples that agrees
/// with `eval_discrete` at one-hot inputs. `surrogate`, when supported, is a
/// differentiable stand-in used as a control variate by [`relax`].
pub trait LossAdapter: Sync {
    fn eval_discrete(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64>;

    /// Noise-free value used by the enumeration oracle.
    fn eval_expected(&self, arch: &[usize]) -> Result<f64> {
        let mut rng = Streams::new(0).stream(0);
        self.eval_discrete(arch, &mut rng)
    }

    fn has_relaxed(&self) -> bool {
        false
    }

    fn eval_relaxed(&self, _tape: &mut Tape, _zeta: &[Var]) -> Result<Var> {
        Err(Error::MissingRelaxation {
            estimator: "eval_relaxed",
        })
    }

    fn has_surrogate(&self) -> bool {
        false
    }

    fn surrogate(&self, _tape: &mut Tape, _zeta: &[Var]) -> Result<Var> {
        Err(Error::MissingSurrogate)
    }
}

impl<L: LossAdapter + ?Sized> LossAdapter for &L {
    fn eval_discrete(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        (**self).eval_discrete(arch, rng)
    }
    fn eval_expected(&self, arch: &[usize]) -> Result<f64> {
        (**self).eval_expected(arch)
    }
    fn has_relaxed(&self) -> bool {
        (**self).has_relaxed()
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        (**self).eval_relaxed(tape, zeta)
    }
    fn has_surrogate(&self) -> bool {
        (**self).has_surrogate()
    }
    fn surrogate(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        (**self).surrogate(tape, zeta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Reinforce,
    ReinforceBaseline,
    Rebar,
    Relax,
    GumbelSoftmax,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Reinforce => "reinforce",
            Self::ReinforceBaseline => "reinforce_baseline",
            Self::Rebar => "rebar",
            Self::Relax => "relax",
            Self::GumbelSoftmax => "gs_only",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A gradient over all logits, flattened site by site.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub estimator: EstimatorKind,
    pub grad: Vec<f64>,
    /// Per-component variance of a single-sample estimate.
    pub variance: Vec<f64>,
    pub n_samples: usize,
}

impl GradEstimate {
    /// Standard error of each component of the mean.
    pub fn standard_error(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.n_samples.max(1) as f64).sqrt())
            .collect()
    }

    /// Splits the flat gradient into per-site slices.
    pub fn per_site<'a>(&'a self, sites: &[CategoricalParam]) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(sites.len());
        let mut start = 0;
        for s in sites {
            out.push(&self.grad[start..start + s.k()]);
            start += s.k();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.grad
            .iter()
            .chain(&self.variance)
            .all(|v| v.is_finite())
    }
}

/// Total number of logits across sites.
pub fn flat_dim(sites: &[CategoricalParam]) -> usize {
    sites.iter().map(CategoricalParam::k).sum()
}

/// Convenience defaults: temperature 0.4, coupled noise.
impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            couple: true,
        }
    }
}
