//! Small closed-form losses used by tests, diagnostics and the
//! `check-estimators` suite.

use rand::RngCore;
use unas_autodiff::{Array, Tape, Var};

use super::LossAdapter;
use crate::error::{Error, Result};

/// A differentiable function of relaxed samples.
pub trait RelaxedFn: Sync + Send {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var>;
}

fn sum_terms(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one site");
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `L(zeta) = sum_e a_e . zeta_e`.
#[derive(Clone, Debug)]
pub struct LinearLoss {
    coeffs: Vec<Vec<f64>>,
}

impl LinearLoss {
    pub fn new(coeffs: Vec<Vec<f64>>) -> Self {
        Self { coeffs }
    }
}

impl RelaxedFn for LinearLoss {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let terms = zeta
            .iter()
            .zip(&self.coeffs)
            .map(|(z, a)| {
                let c = tape.constant(Array::vector(a.clone()));
                tape.dot(*z, c)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sum_terms(tape, terms)
    }
}

impl LossAdapter for LinearLoss {
    fn eval_discrete(&self, arch: &[usize], _rng: &mut dyn RngCore) -> Result<f64> {
        Ok(arch.iter().zip(&self.coeffs).map(|(&k, a)| a[k]).sum())
    }
    fn has_relaxed(&self) -> bool {
        true
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        self.eval(tape, zeta)
    }
}

/// `L(zeta) = sum_e sum_k a_ek zeta_ek^2`; at one-hot `z` this is `sum_e a_{e,z_e}`.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    coeffs: Vec<Vec<f64>>,
}

impl QuadraticLoss {
    pub fn new(coeffs: Vec<Vec<f64>>) -> Self {
        Self { coeffs }
    }
}

impl RelaxedFn for QuadraticLoss {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let terms = zeta
            .iter()
            .zip(&self.coeffs)
            .map(|(z, a)| {
                let sq = tape.square(*z);
                let c = tape.constant(Array::vector(a.clone()));
                tape.dot(sq, c)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sum_terms(tape, terms)
    }
}

impl LossAdapter for QuadraticLoss {
    fn eval_discrete(&self, arch: &[usize], _rng: &mut dyn RngCore) -> Result<f64> {
        Ok(arch.iter().zip(&self.coeffs).map(|(&k, a)| a[k]).sum())
    }
    fn has_relaxed(&self) -> bool {
        true
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        self.eval(tape, zeta)
    }
}

/// Arbitrary loss over a small joint space, relaxed by its multilinear
/// extension `sum_z L(z) prod_e zeta_{e, z_e}`.
#[derive(Clone, Debug)]
pub struct TableLoss {
    arities: Vec<usize>,
    table: Vec<f64>,
}

impl TableLoss {
    /// `table` is indexed in mixed radix with the last site fastest.
    pub fn new(arities: Vec<usize>, table: Vec<f64>) -> Result<Self> {
        let n: usize = arities.iter().product();
        if n != table.len() {
            return Err(Error::Loss(format!(
                "table has {} entries, space has {n}",
                table.len()
            )));
        }
        Ok(Self { arities, table })
    }

    pub fn index(&self, arch: &[usize]) -> usize {
        arch.iter()
            .zip(&self.arities)
            .fold(0, |acc, (&k, &r)| acc * r + k)
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

impl RelaxedFn for TableLoss {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let mut acc = tape.constant(Array::vector(self.table.clone()));
        let mut rest: usize = self.table.len();
        for (z, &k) in zeta.iter().zip(&self.arities).rev() {
            rest /= k;
            let m = tape.reshape(acc, &[rest, k])?;
            let col = tape.reshape(*z, &[k, 1])?;
            let prod = tape.matmul(m, col)?;
            acc = tape.reshape(prod, &[rest])?;
        }
        Ok(tape.reshape(acc, &[])?)
    }
}

impl LossAdapter for TableLoss {
    fn eval_discrete(&self, arch: &[usize], _rng: &mut dyn RngCore) -> Result<f64> {
        Ok(self.table[self.index(arch)])
    }
    fn has_relaxed(&self) -> bool {
        true
    }
    fn eval_relaxed(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        self.eval(tape, zeta)
    }
}

/// The zero function of relaxed samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFn;

impl RelaxedFn for ZeroFn {
    fn eval(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        let s = tape.sum(zeta[0]);
        Ok(tape.mul_scalar(s, 0.0))
    }
}

/// Hides the relaxation of `inner`, exposing only its discrete values plus an
/// optional surrogate for RELAX.
pub struct Blackbox<D> {
    inner: D,
    surrogate: Option<Box<dyn RelaxedFn>>,
}

impl<D: LossAdapter> Blackbox<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            surrogate: None,
        }
    }

    pub fn with_surrogate(inner: D, surrogate: impl RelaxedFn + 'static) -> Self {
        Self {
            inner,
            surrogate: Some(Box::new(surrogate)),
        }
    }
}

impl<D: LossAdapter> LossAdapter for Blackbox<D> {
    fn eval_discrete(&self, arch: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        self.inner.eval_discrete(arch, rng)
    }
    fn eval_expected(&self, arch: &[usize]) -> Result<f64> {
        self.inner.eval_expected(arch)
    }
    fn has_surrogate(&self) -> bool {
        self.surrogate.is_some()
    }
    fn surrogate(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Var> {
        match &self.surrogate {
            Some(g) => g.eval(tape, zeta),
            None => Err(Error::MissingSurrogate),
        }
    }
}
