use super::{flat_dim, EstimatorKind, GradEstimate, LossAdapter};
use crate::categorical::CategoricalParam;
use crate::error::{Error, Result};

/// Largest space the enumeration oracle will walk.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

pub fn space_size(sites: &[CategoricalParam]) -> u128 {
    sites.iter().map(|s| s.k() as u128).product()
}

/// Calls `f` on every architecture in mixed-radix order (last site fastest).
pub fn enumerate_architectures(
    arities: &[usize],
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let mut arch = vec![0usize; arities.len()];
    loop {
        f(&arch)?;
        let mut pos = arities.len();
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            arch[pos] += 1;
            if arch[pos] < arities[pos] {
                break;
            }
            arch[pos] = 0;
        }
    }
}

fn check_size(sites: &[CategoricalParam]) -> Result<()> {
    let count = space_size(sites);
    if count > ENUMERATION_LIMIT {
        return Err(Error::SpaceTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// `sum_z p(z) L(z)` by enumeration.
pub fn exact_expected_loss<L: LossAdapter>(sites: &[CategoricalParam], loss: &L) -> Result<f64> {
    check_size(sites)?;
    let probs: Vec<Vec<f64>> = sites.iter().map(CategoricalParam::probs).collect();
    let arities: Vec<usize> = sites.iter().map(CategoricalParam::k).collect();
    let mut total = 0.0;
    enumerate_architectures(&arities, |arch| {
        let p: f64 = arch.iter().zip(&probs).map(|(&k, pe)| pe[k]).product();
        total += p * loss.eval_expected(arch)?;
        Ok(())
    })?;
    Ok(total)
}

/// Exact gradient of the expected loss by full enumeration, using
/// `d p(z) / d phi_e = p(z) (onehot(z_e) - softmax(phi_e))`.
pub fn exact_gradient<L: LossAdapter>(
    sites: &[CategoricalParam],
    loss: &L,
) -> Result<GradEstimate> {
    check_size(sites)?;
    let probs: Vec<Vec<f64>> = sites.iter().map(CategoricalParam::probs).collect();
    let arities: Vec<usize> = sites.iter().map(CategoricalParam::k).collect();
    let offsets: Vec<usize> = arities
        .iter()
        .scan(0, |acc, k| {
            let o = *acc;
            *acc += k;
            Some(o)
        })
        .collect();
    let dim = flat_dim(sites);
    let mut grad = vec![0.0; dim];
    enumerate_architectures(&arities, |arch| {
        let p: f64 = arch.iter().zip(&probs).map(|(&k, pe)| pe[k]).product();
        let weight = p * loss.eval_expected(arch)?;
        for (e, &k) in arch.iter().enumerate() {
            for (j, pj) in probs[e].iter().enumerate() {
                grad[offsets[e] + j] -= weight * pj;
            }
            grad[offsets[e] + k] += weight;
        }
        Ok(())
    })?;
    Ok(GradEstimate {
        estimator: EstimatorKind::Exact,
        grad,
        variance: vec![0.0; dim],
        n_samples: 1,
    })
}
