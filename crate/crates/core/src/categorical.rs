//! Categorical distributions over one-hot choices and their Gumbel-Softmax
//! relaxations, including the relaxation conditioned on a discrete outcome.

use rand::Rng;
use unas_autodiff::{log_sum_exp, softmax, Array, Tape, Var};

use crate::error::{Error, Result};

/// Default relaxation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.4;

const UNIFORM_CLAMP: f64 = 1e-12;

/// Trainable logits for one decision site.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalParam {
    site_id: String,
    logits: Vec<f64>,
}

impl CategoricalParam {
    pub fn new(site_id: impl Into<String>, logits: Vec<f64>) -> Result<Self> {
        let site_id = site_id.into();
        if logits.len() < 2 {
            return Err(Error::TooFewChoices {
                site: site_id,
                k: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits { site: site_id });
        }
        Ok(Self { site_id, logits })
    }

    pub fn uniform(site_id: impl Into<String>, k: usize) -> Result<Self> {
        Self::new(site_id, vec![0.0; k])
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable logits for optimizer updates between steps.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    fn check_finite(&self) -> Result<()> {
        if self.logits.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteLogits {
                site: self.site_id.clone(),
            })
        }
    }

    fn check_choice(&self, z: OneHot) -> Result<()> {
        if z.k != self.k() || z.index >= z.k {
            Err(Error::BadChoice {
                index: z.index,
                k: self.k(),
            })
        } else {
            Ok(())
        }
    }

    /// `log p(z) = phi_k - logsumexp(phi)`.
    pub fn log_prob(&self, z: OneHot) -> Result<f64> {
        self.check_choice(z)?;
        Ok(self.logits[z.index] - log_sum_exp(&self.logits))
    }

    /// Score function `d log p(z) / d phi = onehot(k) - softmax(phi)`.
    pub fn score_grad(&self, z: OneHot) -> Result<Vec<f64>> {
        self.check_choice(z)?;
        let mut g: Vec<f64> = self.probs().into_iter().map(|p| -p).collect();
        g[z.index] += 1.0;
        Ok(g)
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

/// A discrete choice `k` out of `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OneHot {
    pub index: usize,
    pub k: usize,
}

impl OneHot {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::BadChoice { index, k });
        }
        Ok(Self { index, k })
    }

    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        v[self.index] = 1.0;
        v
    }
}

/// Noise that produced a relaxed sample, kept so the sample can be rebuilt
/// as a differentiable function of the logits.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseRecord {
    /// Standard Gumbel draws added to the logits.
    Gumbel(Vec<f64>),
    /// Uniforms driving the conditional construction given a discrete outcome.
    Conditional(Vec<f64>),
}

/// A point on the probability simplex produced by a Gumbel-Softmax draw.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedOneHot {
    pub values: Vec<f64>,
    pub temperature: f64,
    pub noise: NoiseRecord,
    pub conditioned_on: Option<OneHot>,
}

/// A Gumbel-max draw together with the Gumbels used.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSample {
    pub onehot: OneHot,
    pub gumbels: Vec<f64>,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform on the open interval, clamped away from 0 and 1.
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        }
    }
}

pub fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(-open_uniform(rng).ln()).ln()
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::BadTemperature(t))
    }
}

/// Gumbel-max sample: `k = argmax(phi_i + g_i)`.
pub fn sample_onehot<R: Rng + ?Sized>(
    param: &CategoricalParam,
    rng: &mut R,
) -> Result<DiscreteSample> {
    param.check_finite()?;
    let gumbels: Vec<f64> = (0..param.k()).map(|_| standard_gumbel(rng)).collect();
    let perturbed: Vec<f64> = param
        .logits
        .iter()
        .zip(&gumbels)
        .map(|(p, g)| p + g)
        .collect();
    Ok(DiscreteSample {
        onehot: OneHot {
            index: argmax(&perturbed),
            k: param.k(),
        },
        gumbels,
    })
}

fn relaxed_values(logits: &[f64], gumbels: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .zip(gumbels)
        .map(|(p, g)| (p + g) / t)
        .collect();
    softmax(&scaled)
}

/// `zeta = softmax((phi + g) / T)`, with fresh Gumbels or with the Gumbels of
/// a prior discrete draw (common random numbers).
pub fn sample_relaxed<R: Rng + ?Sized>(
    param: &CategoricalParam,
    temperature: f64,
    rng: &mut R,
    reuse_noise: Option<&DiscreteSample>,
) -> Result<RelaxedOneHot> {
    check_temperature(temperature)?;
    param.check_finite()?;
    let gumbels = match reuse_noise {
        Some(d) => d.gumbels.clone(),
        None => (0..param.k()).map(|_| standard_gumbel(rng)).collect(),
    };
    Ok(RelaxedOneHot {
        values: relaxed_values(&param.logits, &gumbels, temperature),
        temperature,
        noise: NoiseRecord::Gumbel(gumbels),
        conditioned_on: None,
    })
}

/// Perturbed logits of the conditional construction given the uniforms.
fn conditional_gumbels(log_probs: &[f64], uniforms: &[f64], chosen: usize) -> Vec<f64> {
    let ck = -uniforms[chosen].ln();
    log_probs
        .iter()
        .zip(uniforms)
        .enumerate()
        .map(|(i, (lp, u))| {
            if i == chosen {
                -ck.ln()
            } else {
                -((-u.ln()) * (-lp).exp() + ck).ln()
            }
        })
        .collect()
}

/// Draw from the relaxation conditioned on the discrete outcome `z`.
///
/// With `v_i ~ U(0,1)` and `pi = softmax(phi)`: the chosen coordinate gets
/// `-log(-log v_k)`, every other coordinate `-log(-log(v_i)/pi_i - log v_k)`,
/// and the sample is the temperature softmax of those values. The argmax of
/// the result is always `z`.
pub fn sample_conditional_relaxed<R: Rng + ?Sized>(
    param: &CategoricalParam,
    z: OneHot,
    temperature: f64,
    rng: &mut R,
) -> Result<RelaxedOneHot> {
    check_temperature(temperature)?;
    param.check_finite()?;
    param.check_choice(z)?;
    let uniforms: Vec<f64> = (0..param.k()).map(|_| open_uniform(rng)).collect();
    let lse = log_sum_exp(&param.logits);
    let log_probs: Vec<f64> = param.logits.iter().map(|p| p - lse).collect();
    let g = conditional_gumbels(&log_probs, &uniforms, z.index);
    let scaled: Vec<f64> = g.iter().map(|v| v / temperature).collect();
    Ok(RelaxedOneHot {
        values: softmax(&scaled),
        temperature,
        noise: NoiseRecord::Conditional(uniforms),
        conditioned_on: Some(z),
    })
}

/// Rebuilds a relaxed sample on `tape` as a differentiable function of the
/// logits node, reusing the recorded noise.
pub fn relaxed_on_tape(tape: &mut Tape, logits: Var, sample: &RelaxedOneHot) -> Result<Var> {
    let inv_t = 1.0 / sample.temperature;
    let perturbed = match (&sample.noise, sample.conditioned_on) {
        (NoiseRecord::Gumbel(g), _) => tape.add_const(logits, &Array::vector(g.clone()))?,
        (NoiseRecord::Conditional(u), Some(z)) => {
            let c: Vec<f64> = u.iter().map(|v| -v.ln()).collect();
            let ck = c[z.index];
            let mut masked = c.clone();
            masked[z.index] = 0.0;
            let log_p = tape.log_softmax(logits)?;
            let neg = tape.neg(log_p);
            let inv_p = tape.exp(neg);
            let scaled = tape.mul_const(inv_p, Array::vector(masked))?;
            let shifted = tape.add_scalar(scaled, ck);
            let logged = tape.log(shifted);
            tape.neg(logged)
        }
        (NoiseRecord::Conditional(_), None) => {
            return Err(Error::Loss(
                "conditional noise record without a conditioning choice".into(),
            ))
        }
    };
    let scaled = tape.mul_scalar(perturbed, inv_t);
    Ok(tape.softmax(scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn param(logits: &[f64]) -> CategoricalParam {
        CategoricalParam::new("s", logits.to_vec()).unwrap()
    }

    #[test]
    fn probs_sum_to_one_and_are_positive() {
        let p = param(&[30.0, -30.0, 0.0, 1.0]).probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn uniform_log_prob_and_score() {
        let p = param(&[0.0, 0.0]);
        let z = OneHot::new(0, 2).unwrap();
        assert!((p.log_prob(z).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(p.score_grad(z).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn score_matches_closed_form() {
        let e = std::f64::consts::E;
        let s = param(&[1.0, 0.0, 0.0])
            .score_grad(OneHot::new(1, 3).unwrap())
            .unwrap();
        let expected = [-e / (e + 2.0), 1.0 - 1.0 / (e + 2.0), -1.0 / (e + 2.0)];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn score_has_zero_mean_under_enumeration() {
        for k in 2..=8 {
            let logits: Vec<f64> = (0..k).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
            let p = param(&logits);
            let probs = p.probs();
            let mut total = vec![0.0; k];
            for (i, pi) in probs.iter().enumerate() {
                let s = p.score_grad(OneHot::new(i, k).unwrap()).unwrap();
                for (t, v) in total.iter_mut().zip(s) {
                    *t += pi * v;
                }
            }
            assert!(total.iter().all(|v| v.abs() < 1e-12), "{total:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CategoricalParam::new("s", vec![1.0]).is_err());
        assert!(CategoricalParam::new("s", vec![f64::NAN, 0.0]).is_err());
        let p = param(&[0.0, 0.0]);
        let mut rng = Streams::new(0).stream(0);
        assert!(matches!(
            sample_relaxed(&p, 0.0, &mut rng, None),
            Err(Error::BadTemperature(_))
        ));
        let z = OneHot::new(1, 2).unwrap();
        assert!(sample_conditional_relaxed(&p, z, -1.0, &mut rng).is_err());
        let mut bad = p.clone();
        bad.logits_mut()[0] = f64::INFINITY;
        assert!(matches!(
            sample_onehot(&bad, &mut rng),
            Err(Error::NonFiniteLogits { .. })
        ));
    }

    #[test]
    fn near_deterministic_logit_gap() {
        let p = param(&[30.0, 0.0, 0.0]);
        let mut rng = Streams::new(1).stream(0);
        let hits = (0..10_000)
            .filter(|_| sample_onehot(&p, &mut rng).unwrap().onehot.index == 0)
            .count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn coupled_relaxation_keeps_argmax() {
        let p = param(&[0.3, -1.0, 0.8, 0.0]);
        let mut rng = Streams::new(2).stream(0);
        for _ in 0..2000 {
            let d = sample_onehot(&p, &mut rng).unwrap();
            let r = sample_relaxed(&p, 0.4, &mut rng, Some(&d)).unwrap();
            assert_eq!(argmax(&r.values), d.onehot.index);
        }
    }

    #[test]
    fn conditional_sample_is_argmax_consistent() {
        let mut rng = Streams::new(3).stream(0);
        for trial in 0..500 {
            let logits: Vec<f64> = (0..5)
                .map(|i| ((trial * 7 + i) as f64).sin() * 4.0)
                .collect();
            let p = param(&logits);
            let z = OneHot::new(trial % 5, 5).unwrap();
            for t in [1e-4, 0.4, 1.0, 5.0] {
                let r = sample_conditional_relaxed(&p, z, t, &mut rng).unwrap();
                assert_eq!(argmax(&r.values), z.index);
                let s: f64 = r.values.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_temperature_limits() {
        let p = param(&[0.2, -0.4, 1.0]);
        let mut rng = Streams::new(4).stream(0);
        for _ in 0..200 {
            let z = sample_onehot(&p, &mut rng).unwrap();
            let c = sample_conditional_relaxed(&p, z.onehot, 1e-4, &mut rng).unwrap();
            let target = z.onehot.to_vec();
            assert!(c
                .values
                .iter()
                .zip(&target)
                .all(|(a, b)| (a - b).abs() < 1e-3));
            let r = sample_relaxed(&p, 1e-4, &mut rng, None).unwrap();
            let top = argmax(&r.values);
            assert!((r.values[top] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn tape_rebuild_matches_sampled_values() {
        let p = param(&[0.5, -0.2, 0.1, 1.3]);
        let mut rng = Streams::new(5).stream(0);
        for _ in 0..50 {
            let d = sample_onehot(&p, &mut rng).unwrap();
            for r in [
                sample_relaxed(&p, 0.4, &mut rng, None).unwrap(),
                sample_conditional_relaxed(&p, d.onehot, 0.4, &mut rng).unwrap(),
            ] {
                let mut tape = Tape::new();
                let phi = tape.param(Array::vector(p.logits().to_vec()));
                let zeta = relaxed_on_tape(&mut tape, phi, &r).unwrap();
                for (a, b) in tape.value(zeta).data().iter().zip(&r.values) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
