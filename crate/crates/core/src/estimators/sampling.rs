use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unas_autodiff::{Array, Tape, Var};

use super::{flat_dim, EstimatorKind, GradEstimate, LossAdapter};
use crate::categorical::{
    relaxed_on_tape, sample_conditional_relaxed, sample_onehot, sample_relaxed, CategoricalParam,
    DiscreteSample, RelaxedOneHot,
};
use crate::error::{Error, Result};
use crate::rng::Streams;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorOptions {
    pub temperature: f64,
    /// Share Gumbels between `z` and the unconditional relaxation.
    pub couple: bool,
}

/// Running-mean baseline for REINFORCE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Self {
            value: 0.0,
            decay: 0.99,
        }
    }
}

impl Baseline {
    pub fn update(&mut self, loss: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * loss;
    }
}

/// Welford accumulator over vectors.
#[derive(Clone, Debug)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
    }

    fn into_estimate(self, estimator: EstimatorKind) -> GradEstimate {
        let denom = (self.n.max(2) - 1) as f64;
        GradEstimate {
            estimator,
            variance: self.m2.iter().map(|v| (v / denom).max(0.0)).collect(),
            grad: self.mean,
            n_samples: self.n,
        }
    }
}

struct SampleOut {
    grad: Vec<f64>,
    loss: f64,
}

/// Runs `n` samples in fixed-size chunks. Sample `i` uses stream `i`; chunk
/// results are merged in index order, so output is deterministic for any
/// number of worker threads.
fn run_samples<F>(dim: usize, n: usize, streams: &Streams, f: F) -> Result<(Moments, Vec<f64>)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<SampleOut> + Sync,
{
    if n == 0 {
        return Err(Error::NoSamples);
    }
    let chunks: Vec<(Moments, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(dim);
            let mut losses = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = streams.stream(i as u64);
                let out = f(&mut rng)?;
                m.push(&out.grad);
                losses.push(out.loss);
            }
            Ok((m, losses))
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(dim);
    let mut losses = Vec::with_capacity(n);
    for (m, l) in &chunks {
        total.merge(m);
        losses.extend_from_slice(l);
    }
    Ok((total, losses))
}

fn draw_architecture(
    sites: &[CategoricalParam],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<DiscreteSample>)> {
    let draws = sites
        .iter()
        .map(|s| sample_onehot(s, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((draws.iter().map(|d| d.onehot.index).collect(), draws))
}

fn score(sites: &[CategoricalParam], draws: &[DiscreteSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(flat_dim(sites));
    for (s, d) in sites.iter().zip(draws) {
        out.extend(s.score_grad(d.onehot)?);
    }
    Ok(out)
}

fn scaled(v: Vec<f64>, c: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * c).collect()
}

/// REINFORCE: mean of `L(z) * d log p(z)`.
pub fn reinforce<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    n: usize,
    streams: &Streams,
) -> Result<GradEstimate> {
    let (m, _) = run_samples(flat_dim(sites), n, streams, |rng| {
        let (arch, draws) = draw_architecture(sites, rng)?;
        let l = loss.eval_discrete(&arch, rng)?;
        Ok(SampleOut {
            grad: scaled(score(sites, &draws)?, l),
            loss: l,
        })
    })?;
    Ok(m.into_estimate(EstimatorKind::Reinforce))
}

/// REINFORCE with a running-mean baseline held fixed during the call; the
/// baseline absorbs the sampled losses in order afterwards.
pub fn reinforce_baseline<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    baseline: &mut Baseline,
    n: usize,
    streams: &Streams,
) -> Result<GradEstimate> {
    let b = baseline.value;
    let (m, losses) = run_samples(flat_dim(sites), n, streams, |rng| {
        let (arch, draws) = draw_architecture(sites, rng)?;
        let l = loss.eval_discrete(&arch, rng)?;
        Ok(SampleOut {
            grad: scaled(score(sites, &draws)?, l - b),
            loss: l,
        })
    })?;
    for l in losses {
        baseline.update(l);
    }
    Ok(m.into_estimate(EstimatorKind::ReinforceBaseline))
}

/// Per-sample pieces of the REBAR / RELAX estimator.
///
/// The estimate is `reinforce - correction + gumbel`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVariateTerms {
    pub arch: Vec<usize>,
    /// `L(z)` as evaluated by `eval_discrete`.
    pub loss: f64,
    /// Control variate at the conditional relaxation, `c(zeta_tilde)`.
    pub control: f64,
    /// `(L(z) - c(zeta_tilde)) * d log p(z)`, loss values held constant.
    pub reinforce: Vec<f64>,
    /// `d c(zeta_tilde) / d phi` through the conditional construction.
    pub correction: Vec<f64>,
    /// `d c(zeta) / d phi` through the unconditional relaxation.
    pub gumbel: Vec<f64>,
}

impl ControlVariateTerms {
    pub fn estimate(&self) -> Vec<f64> {
        self.reinforce
            .iter()
            .zip(&self.correction)
            .zip(&self.gumbel)
            .map(|((r, c), g)| r - c + g)
            .collect()
    }
}

#[derive(Clone, Copy)]
enum ControlVariate {
    Relaxed,
    Surrogate,
}

fn eval_cv<L: LossAdapter>(
    loss: &L,
    which: ControlVariate,
    tape: &mut Tape,
    zeta: &[Var],
) -> Result<Var> {
    match which {
        ControlVariate::Relaxed => loss.eval_relaxed(tape, zeta),
        ControlVariate::Surrogate => loss.surrogate(tape, zeta),
    }
}

fn flatten_grads(g: &unas_autodiff::Gradients, vars: &[Var], sign: f64) -> Vec<f64> {
    vars.iter()
        .flat_map(|v| g.wrt(*v).data().iter().map(move |x| x * sign))
        .collect()
}

fn cv_sample<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    which: ControlVariate,
    opts: &EstimatorOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ControlVariateTerms> {
    let (arch, draws) = draw_architecture(sites, rng)?;
    let l = loss.eval_discrete(&arch, rng)?;
    let relaxed: Vec<RelaxedOneHot> = sites
        .iter()
        .zip(&draws)
        .map(|(s, d)| sample_relaxed(s, opts.temperature, rng, opts.couple.then_some(d)))
        .collect::<Result<_>>()?;
    let conditional: Vec<RelaxedOneHot> = sites
        .iter()
        .zip(&draws)
        .map(|(s, d)| sample_conditional_relaxed(s, d.onehot, opts.temperature, rng))
        .collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let mut build = |samples: &[RelaxedOneHot]| -> Result<(Vec<Var>, Vec<Var>)> {
        let mut phis = Vec::with_capacity(sites.len());
        let mut zetas = Vec::with_capacity(sites.len());
        for (s, r) in sites.iter().zip(samples) {
            let phi = tape.param(Array::vector(s.logits().to_vec()));
            zetas.push(relaxed_on_tape(&mut tape, phi, r)?);
            phis.push(phi);
        }
        Ok((phis, zetas))
    };
    let (phi_cond, zeta_cond) = build(&conditional)?;
    let (phi_free, zeta_free) = build(&relaxed)?;
    let c_cond = eval_cv(loss, which, &mut tape, &zeta_cond)?;
    let c_free = eval_cv(loss, which, &mut tape, &zeta_free)?;
    let total = tape.sub(c_free, c_cond)?;
    tape.forward(total)?;
    let control = tape.scalar_value(c_cond);
    let grads = tape.backward()?;

    Ok(ControlVariateTerms {
        reinforce: scaled(score(sites, &draws)?, l - control),
        correction: flatten_grads(&grads, &phi_cond, -1.0),
        gumbel: flatten_grads(&grads, &phi_free, 1.0),
        arch,
        loss: l,
        control,
    })
}

/// The per-sample terms for REBAR (`surrogate == false`) or RELAX
/// (`surrogate == true`) on stream `index`.
pub fn control_variate_terms<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    surrogate: bool,
    opts: &EstimatorOptions,
    streams: &Streams,
    index: u64,
) -> Result<ControlVariateTerms> {
    let which = if surrogate {
        ControlVariate::Surrogate
    } else {
        ControlVariate::Relaxed
    };
    cv_sample(sites, loss, which, opts, &mut streams.stream(index))
}

/// REBAR: reinforce term with a conditional-relaxation control variate, plus
/// the reparameterized correction and Gumbel-Softmax terms.
pub fn rebar<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    opts: &EstimatorOptions,
    n: usize,
    streams: &Streams,
) -> Result<GradEstimate> {
    if !loss.has_relaxed() {
        return Err(Error::MissingRelaxation { estimator: "rebar" });
    }
    let (m, _) = run_samples(flat_dim(sites), n, streams, |rng| {
        let t = cv_sample(sites, loss, ControlVariate::Relaxed, opts, rng)?;
        Ok(SampleOut {
            grad: t.estimate(),
            loss: t.loss,
        })
    })?;
    Ok(m.into_estimate(EstimatorKind::Rebar))
}

/// RELAX: like [`rebar`] with the surrogate as control variate, for losses
/// whose discrete evaluation is not differentiable.
pub fn relax<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    opts: &EstimatorOptions,
    n: usize,
    streams: &Streams,
) -> Result<GradEstimate> {
    if !loss.has_surrogate() {
        return Err(Error::MissingSurrogate);
    }
    let (m, _) = run_samples(flat_dim(sites), n, streams, |rng| {
        let t = cv_sample(sites, loss, ControlVariate::Surrogate, opts, rng)?;
        Ok(SampleOut {
            grad: t.estimate(),
            loss: t.loss,
        })
    })?;
    Ok(m.into_estimate(EstimatorKind::Relax))
}

/// Pathwise gradient of the relaxed loss only. Biased for losses that are
/// not linear in the relaxation.
pub fn gumbel_softmax_only<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
    temperature: f64,
    n: usize,
    streams: &Streams,
) -> Result<GradEstimate> {
    if !loss.has_relaxed() {
        return Err(Error::MissingRelaxation {
            estimator: "gs_only",
        });
    }
    let (m, _) = run_samples(flat_dim(sites), n, streams, |rng| {
        let samples: Vec<RelaxedOneHot> = sites
            .iter()
            .map(|s| sample_relaxed(s, temperature, rng, None))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let mut phis = Vec::with_capacity(sites.len());
        let mut zetas = Vec::with_capacity(sites.len());
        for (s, r) in sites.iter().zip(&samples) {
            let phi = tape.param(Array::vector(s.logits().to_vec()));
            zetas.push(relaxed_on_tape(&mut tape, phi, r)?);
            phis.push(phi);
        }
        let l = loss.eval_relaxed(&mut tape, &zetas)?;
        let value = tape.forward(l)?;
        let grads = tape.backward()?;
        Ok(SampleOut {
            grad: flatten_grads(&grads, &phis, 1.0),
            loss: value,
        })
    })?;
    Ok(m.into_estimate(EstimatorKind::GumbelSoftmax))
}

/// Dispatches on `kind`. `baseline` is required state for
/// [`EstimatorKind::ReinforceBaseline`] and ignored otherwise.
pub fn estimate<L: LossAdapter>(
    kind: EstimatorKind,
    sites: &[CategoricalParam],
    loss: &L,
    opts: &EstimatorOptions,
    n: usize,
    streams: &Streams,
    baseline: Option<&mut Baseline>,
) -> Result<GradEstimate> {
    match kind {
        EstimatorKind::Exact => super::exact_gradient(sites, loss),
        EstimatorKind::Reinforce => reinforce(sites, loss, n, streams),
        EstimatorKind::ReinforceBaseline => {
            let mut local = Baseline::default();
            reinforce_baseline(sites, loss, baseline.unwrap_or(&mut local), n, streams)
        }
        EstimatorKind::Rebar => rebar(sites, loss, opts, n, streams),
        EstimatorKind::Relax => relax(sites, loss, opts, n, streams),
        EstimatorKind::GumbelSoftmax => {
            gumbel_softmax_only(sites, loss, opts.temperature, n, streams)
        }
    }
}
