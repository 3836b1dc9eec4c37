use statrs::distribution::{ChiSquared, ContinuousCDF};
use unas_autodiff::{finite_diff_check, Array, Tape};
use unas_core::categorical::{
    relaxed_on_tape, sample_conditional_relaxed, sample_onehot, sample_relaxed, CategoricalParam,
};
use unas_core::rng::Streams;

fn param(k: usize, seed: u64) -> CategoricalParam {
    let logits = (0..k)
        .map(|i| ((i as u64 * 7 + seed * 3) % 11) as f64 * 0.2 - 1.0)
        .collect();
    CategoricalParam::new("s", logits).unwrap()
}

#[test]
fn onehot_frequencies_match_softmax() {
    let p = CategoricalParam::new("s", vec![0.5, -0.2, 1.1]).unwrap();
    let probs = p.probs();
    let n = 60_000;
    let mut rng = Streams::new(3).stream(0);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_onehot(&p, &mut rng).unwrap().onehot.index] += 1;
    }
    for (c, q) in counts.iter().zip(&probs) {
        let se = (q * (1.0 - q) / n as f64).sqrt();
        assert!((*c as f64 / n as f64 - q).abs() < 4.0 * se);
    }
}

#[test]
fn conditional_then_marginal_matches_unconditional() {
    for &k in &[2usize, 4, 7] {
        for &t in &[0.4, 1.0] {
            let p = param(k, k as u64);
            let probs = p.probs();
            let n = 40_000;
            let mut rng = Streams::new(11 + k as u64).stream(1);
            let mut counts = vec![0usize; k];
            let mut cond = vec![Vec::with_capacity(n); k];
            let mut free = vec![Vec::with_capacity(n); k];
            for _ in 0..n {
                let z = sample_onehot(&p, &mut rng).unwrap();
                let c = sample_conditional_relaxed(&p, z.onehot, t, &mut rng).unwrap();
                let argmax = (0..k).fold(0, |b, i| if c.values[i] > c.values[b] { i } else { b });
                assert_eq!(argmax, z.onehot.index);
                counts[argmax] += 1;
                let f = sample_relaxed(&p, t, &mut rng, None).unwrap();
                for i in 0..k {
                    cond[i].push(c.values[i]);
                    free[i].push(f.values[i]);
                }
            }
            let stat: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q))
                .sum();
            let pval = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat);
            assert!(pval > 0.001, "K={k} T={t} chi2 p={pval}");
            for i in 0..k {
                let (ma, va) = mean_var(&cond[i]);
                let (mb, vb) = mean_var(&free[i]);
                let se = ((va + vb) / n as f64).sqrt();
                assert!((ma - mb).abs() < 4.0 * se, "K={k} T={t} component {i}");
            }
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (
        m,
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64,
    )
}

#[test]
fn relaxed_paths_pass_finite_differences() {
    let p = param(5, 2);
    let weights = Array::vector(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
    let mut rng = Streams::new(5).stream(0);
    let z = sample_onehot(&p, &mut rng).unwrap();
    let free = sample_relaxed(&p, 0.5, &mut rng, None).unwrap();
    let cond = sample_conditional_relaxed(&p, z.onehot, 0.5, &mut rng).unwrap();
    for sample in [&free, &cond] {
        let err = finite_diff_check(
            |tape: &mut Tape, phi| {
                let zeta = relaxed_on_tape(tape, phi, sample).map_err(|e| match e {
                    unas_core::Error::Tape(t) => t,
                    other => panic!("{other}"),
                })?;
                let sq = tape.square(zeta);
                let w = tape.constant(weights.clone());
                tape.dot(sq, w)
            },
            &Array::vector(p.logits().to_vec()),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn tape_rebuild_reproduces_recorded_values() {
    let p = param(4, 9);
    let mut rng = Streams::new(8).stream(2);
    for _ in 0..20 {
        let z = sample_onehot(&p, &mut rng).unwrap();
        for s in [
            sample_relaxed(&p, 0.4, &mut rng, Some(&z)).unwrap(),
            sample_conditional_relaxed(&p, z.onehot, 0.4, &mut rng).unwrap(),
        ] {
            let mut tape = Tape::new();
            let phi = tape.param(Array::vector(p.logits().to_vec()));
            let zeta = relaxed_on_tape(&mut tape, phi, &s).unwrap();
            let total = tape.sum(zeta);
            tape.forward(total).unwrap();
            for (a, b) in tape.value(zeta).data().iter().zip(&s.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
