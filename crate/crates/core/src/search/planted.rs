//! Planted objectives: additive tables over small groups of sites whose
//! exact optimum is known by enumerating each group separately.

use rand::seq::SliceRandom;
use rand::Rng;
use unas_autodiff::{Tape, Var};

use crate::error::{Error, Result};
use crate::estimators::losses::{RelaxedFn, TableLoss};
use crate::estimators::{enumerate_architectures, LossAdapter};
use crate::latency::DeviceModel;
use crate::rng::Streams;
use crate::space::SearchSpace;

/// `L(z) = sum_g T_g(z restricted to group g)`, relaxed group by group with
/// the multilinear extension.
#[derive(Clone, Debug)]
pub struct PlantedObjective {
    /// First site of each group and its table.
    groups: Vec<(usize, TableLoss, Vec<usize>)>,
    n_sites: usize,
}

impl PlantedObjective {
    pub fn from_groups(n_sites: usize, groups: Vec<(usize, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut next = 0;
        let mut out = Vec::new();
        for (start, arities, table) in groups {
            if start != next {
                return Err(Error::Loss(
                    "planted groups must tile the sites in order".into(),
                ));
            }
            next += arities.len();
            out.push((start, TableLoss::new(arities.clone(), table)?, arities));
        }
        if next != n_sites {
            return Err(Error::SiteCount {
                expected: n_sites,
                got: next,
            });
        }
        Ok(Self {
            groups: out,
            n_sites,
        })
    }

    /// A random instance for `space`.
    ///
    /// Factorized cells: an (input, op) edge costs `u[input] + v[op]` plus
    /// a small interaction, and a node's value is the sum of its two edge
    /// costs plus `lambda_arch` when both pairs coincide. The runner-up input
    /// and op trail the best by under 0.12, so with the default penalty the
    /// optimum uses two distinct pairs, and it leads every other cell by at
    /// least 0.01.
    ///
    /// Layer-wise spaces with a `device`: task error falls with op latency at
    /// a rate below 0.02 per ms, so latency pressure decides the trade-off.
    pub fn generate(
        space: &SearchSpace,
        seed: u64,
        lambda_arch: f64,
        device: Option<&DeviceModel>,
    ) -> Result<Self> {
        let mut rng = Streams::new(seed).stream(0);
        let layout = space.site_layout();
        let groups = match space {
            SearchSpace::Factorized(s) => (0..s.n_nodes)
                .map(|n| {
                    let p = s.predecessors(n);
                    let k = s.n_ops();
                    let (near, far) = (rng.random_range(0.02..0.05), rng.random_range(0.08..0.12));
                    let (du, dv) = if rng.random::<bool>() {
                        (near, far)
                    } else {
                        (far, near)
                    };
                    let u = planted_costs(p, du, &mut rng);
                    let v = planted_costs(k, dv, &mut rng);
                    let costs: Vec<f64> = (0..p * k)
                        .map(|e| u[e / k] + v[e % k] + rng.random_range(0.0..0.005))
                        .collect();
                    let mut table = Vec::with_capacity(p * p * k * k);
                    for ia in 0..p {
                        for ib in 0..p {
                            for oa in 0..k {
                                for ob in 0..k {
                                    let dup = if ia == ib && oa == ob {
                                        lambda_arch
                                    } else {
                                        0.0
                                    };
                                    table.push(costs[ia * k + oa] + costs[ib * k + ob] + dup);
                                }
                            }
                        }
                    }
                    (4 * n, vec![p, p, k, k], table)
                })
                .collect(),
            SearchSpace::Layerwise(_) if device.is_some() => {
                let device = device.expect("checked");
                device
                    .base
                    .iter()
                    .enumerate()
                    .map(|(l, row)| {
                        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                        let gain = rng.random_range(0.005..0.02);
                        let table = row
                            .iter()
                            .map(|b| 1.0 - gain * (b - lo) + rng.random_range(0.0..0.01))
                            .collect();
                        (l, vec![row.len()], table)
                    })
                    .collect()
            }
            _ => layout
                .iter()
                .enumerate()
                .map(|(i, (_, k))| {
                    let gap = rng.random_range(0.02..0.15);
                    (i, vec![*k], planted_costs(*k, gap, &mut rng))
                })
                .collect(),
        };
        Self::from_groups(layout.len(), groups)
    }

    pub fn value(&self, arch: &[usize]) -> f64 {
        self.groups
            .iter()
            .map(|(start, t, ar)| t.table()[t.index(&arch[*start..start + ar.len()])])
            .sum()
    }

    /// Exact minimizer, enumerating each group on its own; ties go to the
    /// first architecture in mixed-radix order.
    pub fn optimum(&self) -> (Vec<usize>, f64) {
        let mut arch = vec![0; self.n_sites];
        let mut total = 0.0;
        for (start, t, ar) in &self.groups {
            let mut best: Option<(Vec<usize>, f64)> = None;
            enumerate_architectures(ar, |a| {
                let v = t.table()[t.index(a)];
                if best.as_ref().is_none_or(|(_, b)| v < *b) {
                    best = Some((a.to_vec(), v));
                }
                Ok(())
            })
            .expect("enumeration callback is infallible");
            let (a, v) = best.expect("nonempty group");
            arch[*start..start + ar.len()].copy_from_slice(&a);
            total += v;
        }
        (arch, total)
    }

    /// Number of architectures attaining the optimal value (within 1e-12).
    pub fn optimum_count(&self) -> u128 {
        self.groups
            .iter()
            .map(|(_, t, _)| {
                let best = t.table().iter().copied().fold(f64::INFINITY, f64::min);
                t.table().iter().filter(|&&v| v - best <= 1e-12).count() as u128
            })
            .product()
    }
}

/// Costs in `[0, 1]` with a unique best entry at 0 and a runner-up at
/// `gap`; the rest sit at least 0.3 above.
fn planted_costs<R: Rng + ?Sized>(n: usize, gap: f64, rng: &mut R) -> Vec<f64> {
    let mut costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    costs[order[0]] = 0.0;
    if n > 1 {
        costs[order[1]] = gap;
    }
    costs
}

impl RelaxedFn for PlantedObjective {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (start, t, ar) in &self.groups {
            let v = t.eval(tape, &zeta[*start..start + ar.len()])?;
            acc = Some(match acc {
                None => v,
                Some(a) => tape.add(a, v)?,
            });
        }
        Ok(acc.expect("at least one group"))
    }
}

impl LossAdapter for PlantedObjective {
    fn eval_discrete(&self, arch: &[usize], _rng: &mut dyn rand::RngCore) -> Result<f64> {
        Ok(self.value(arch))
    }
    fn has_relaxed(&self) -> bool {
        true
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        self.eval(tape, zeta)
    }
}
