use rand::RngCore;
use unas_autodiff::{Array, Tape, Var};

use super::{GradEstimate, LossAdapter};
use crate::categorical::CategoricalParam;
use crate::error::Result;

#[derive(Clone, Debug)]
enum SiteMap {
    /// Only one choice remains.
    Fixed { choice: usize, k: usize },
    /// Position in the reduced site list and the surviving choices.
    Reduced {
        index: usize,
        kept: Vec<usize>,
        k: usize,
    },
}

/// A view of a factorial distribution with some choices removed.
///
/// Removed choices get probability zero: the reduced sites carry only the
/// surviving logits, so sampling and score functions never see them, and
/// expanded gradients are exactly zero there.
#[derive(Clone, Debug)]
pub struct RestrictedSites {
    maps: Vec<SiteMap>,
    sites: Vec<CategoricalParam>,
}

impl RestrictedSites {
    /// `removed[e]` lists the choices of site `e` to mask out.
    pub fn new(sites: &[CategoricalParam], removed: &[Vec<usize>]) -> Result<Self> {
        let mut maps = Vec::with_capacity(sites.len());
        let mut reduced = Vec::new();
        for (s, rm) in sites.iter().zip(removed) {
            let kept: Vec<usize> = (0..s.k()).filter(|c| !rm.contains(c)).collect();
            assert!(
                !kept.is_empty(),
                "cannot remove every choice of `{}`",
                s.site_id()
            );
            if kept.len() == 1 {
                maps.push(SiteMap::Fixed {
                    choice: kept[0],
                    k: s.k(),
                });
            } else {
                let logits = kept.iter().map(|&c| s.logits()[c]).collect();
                maps.push(SiteMap::Reduced {
                    index: reduced.len(),
                    kept,
                    k: s.k(),
                });
                reduced.push(CategoricalParam::new(s.site_id(), logits)?);
            }
        }
        Ok(Self {
            maps,
            sites: reduced,
        })
    }

    pub fn sites(&self) -> &[CategoricalParam] {
        &self.sites
    }

    /// Maps a reduced architecture back to full choice indices.
    pub fn expand_arch(&self, reduced: &[usize]) -> Vec<usize> {
        self.maps
            .iter()
            .map(|m| match m {
                SiteMap::Fixed { choice, .. } => *choice,
                SiteMap::Reduced { index, kept, .. } => kept[reduced[*index]],
            })
            .collect()
    }

    /// Scatters a reduced gradient into the full logit layout.
    pub fn expand_grad(&self, est: &GradEstimate) -> GradEstimate {
        let offsets: Vec<usize> = self
            .sites
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.k();
                Some(o)
            })
            .collect();
        let mut grad = Vec::new();
        let mut variance = Vec::new();
        for m in &self.maps {
            match m {
                SiteMap::Fixed { k, .. } => {
                    grad.extend(std::iter::repeat_n(0.0, *k));
                    variance.extend(std::iter::repeat_n(0.0, *k));
                }
                SiteMap::Reduced { index, kept, k } => {
                    let mut g = vec![0.0; *k];
                    let mut v = vec![0.0; *k];
                    for (j, &c) in kept.iter().enumerate() {
                        g[c] = est.grad[offsets[*index] + j];
                        v[c] = est.variance[offsets[*index] + j];
                    }
                    grad.extend(g);
                    variance.extend(v);
                }
            }
        }
        GradEstimate {
            estimator: est.estimator,
            grad,
            variance,
            n_samples: est.n_samples,
        }
    }

    /// Presents `loss` over the reduced sites.
    pub fn wrap<'a, L: LossAdapter>(&'a self, loss: &'a L) -> RestrictedLoss<'a, L> {
        RestrictedLoss {
            view: self,
            inner: loss,
        }
    }

    fn expand_zeta(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Vec<Var>> {
        self.maps
            .iter()
            .map(|m| match m {
                SiteMap::Fixed { choice, k } => Ok(tape.constant(Array::one_hot(*k, *choice))),
                SiteMap::Reduced { index, kept, k } => Ok(tape.embed(zeta[*index], kept, *k)?),
            })
            .collect()
    }
}

pub struct RestrictedLoss<'a, L> {
    view: &'a RestrictedSites,
    inner: &'a L,
}

impl<L: LossAdapter> LossAdapter for RestrictedLoss<'_, L> {
    fn eval_discrete(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        self.inner.eval_discrete(&self.view.expand_arch(arch), rng)
    }
    fn eval_expected(&self, arch: &[usize]) -> Result<f64> {
        self.inner.eval_expected(&self.view.expand_arch(arch))
    }
    fn has_relaxed(&self) -> bool {
        self.inner.has_relaxed()
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let full = self.view.expand_zeta(tape, zeta)?;
        self.inner.eval_relaxed(tape, &full)
    }
    fn has_surrogate(&self) -> bool {
        self.inner.has_surrogate()
    }
    fn surrogate(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let full = self.view.expand_zeta(tape, zeta)?;
        self.inner.surrogate(tape, &full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::exact_gradient;
    use crate::estimators::losses::LinearLoss;

    #[test]
    fn removed_choice_gets_zero_gradient_and_matches_reduced_oracle() {
        let sites = vec![
            CategoricalParam::new("a", vec![0.2, -0.1, 0.4]).unwrap(),
            CategoricalParam::new("b", vec![0.0, 0.3]).unwrap(),
        ];
        let loss = LinearLoss::new(vec![vec![1.0, 2.0, -1.0], vec![0.5, 3.0]]);
        let view = RestrictedSites::new(&sites, &[vec![0], vec![1]]).unwrap();
        assert_eq!(view.sites().len(), 1);
        let g = view.expand_grad(&exact_gradient(view.sites(), &view.wrap(&loss)).unwrap());
        assert_eq!(g.grad[0], 0.0);
        assert_eq!(&g.grad[3..], &[0.0, 0.0]);
        // Reduced problem by hand: site a over choices {1, 2}.
        let reduced = vec![CategoricalParam::new("a", vec![-0.1, 0.4]).unwrap()];
        let direct = exact_gradient(&reduced, &LinearLoss::new(vec![vec![2.0, -1.0]])).unwrap();
        assert!((g.grad[1] - direct.grad[0]).abs() < 1e-14);
        assert!((g.grad[2] - direct.grad[1]).abs() < 1e-14);
        assert_eq!(view.expand_arch(&[1]), vec![2, 0]);
    }
}
