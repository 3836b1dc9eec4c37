#![allow(clippy::needless_range_loop)]

use rand::Rng;
use unas_core::categorical::CategoricalParam;
use unas_core::estimators::losses::{Blackbox, LinearLoss, QuadraticLoss, TableLoss, ZeroFn};
use unas_core::estimators::{
    control_variate_terms, diagnostics, estimate, exact_gradient, gumbel_softmax_only, rebar,
    reinforce, reinforce_baseline, relax, Baseline, EstimatorKind, EstimatorOptions, Verdict,
};
use unas_core::rng::Streams;
use unas_core::Error;

fn random_sites(rng: &mut impl Rng, arities: &[usize]) -> Vec<CategoricalParam> {
    arities
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            CategoricalParam::new(
                format!("s{i}"),
                (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn reinforce_two_choice_example() {
    let sites = vec![CategoricalParam::uniform("s", 2).unwrap()];
    let loss = LinearLoss::new(vec![vec![1.0, 0.0]]);
    let oracle = exact_gradient(&sites, &loss).unwrap();
    let r = diagnostics(
        EstimatorKind::Reinforce,
        &EstimatorOptions::default(),
        &sites,
        &loss,
        &oracle.grad,
        200_000,
        1,
        &Streams::new(1),
    )
    .unwrap();
    assert_eq!(r.verdict(), Verdict::Unbiased);
    assert!((oracle.grad[0] - 0.25).abs() < 1e-15);
}

#[test]
fn constant_loss_has_zero_mean_and_positive_variance() {
    let sites = vec![CategoricalParam::new("s", vec![0.3, -0.2, 0.9]).unwrap()];
    let loss = LinearLoss::new(vec![vec![2.0; 3]]);
    let g = reinforce(&sites, &loss, 50_000, &Streams::new(2)).unwrap();
    let se = g.standard_error();
    for i in 0..3 {
        assert!(g.grad[i].abs() < 3.5 * se[i]);
        assert!(g.variance[i] > 0.0);
    }
}

#[test]
fn saturated_site_has_tiny_gradient() {
    let sites = vec![CategoricalParam::new("s", vec![30.0, 0.0]).unwrap()];
    let loss = LinearLoss::new(vec![vec![1.0, 0.0]]);
    let g = reinforce(&sites, &loss, 10_000, &Streams::new(3)).unwrap();
    assert!(g.grad.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn unbiased_on_random_suite() {
    let mut rng = Streams::new(2024).stream(0);
    let configs: [(&[usize], f64); 10] = [
        (&[2], 0.4),
        (&[3], 1.0),
        (&[4], 0.4),
        (&[7], 1.0),
        (&[2, 3], 0.4),
        (&[5, 2], 1.0),
        (&[3, 3, 2], 0.4),
        (&[6], 0.4),
        (&[2, 2, 2], 1.0),
        (&[4, 3], 1.0),
    ];
    for (c, (arities, t)) in configs.iter().enumerate() {
        let sites = random_sites(&mut rng, arities);
        let size: usize = arities.iter().product();
        let table = TableLoss::new(
            arities.to_vec(),
            (0..size).map(|_| rng.random_range(-1.0..2.0)).collect(),
        )
        .unwrap();
        let quad = QuadraticLoss::new(
            arities
                .iter()
                .map(|&k| (0..k).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect(),
        );
        let opts = EstimatorOptions {
            temperature: *t,
            couple: true,
        };
        let streams = Streams::new(c as u64);
        for (name, loss) in [("table", &table as &dyn LossDyn), ("quadratic", &quad)] {
            loss.check(name, &sites, &opts, &streams);
        }
    }
}

trait LossDyn {
    fn check(
        &self,
        name: &str,
        sites: &[CategoricalParam],
        opts: &EstimatorOptions,
        streams: &Streams,
    );
}

impl<L: unas_core::estimators::LossAdapter> LossDyn for L {
    fn check(
        &self,
        name: &str,
        sites: &[CategoricalParam],
        opts: &EstimatorOptions,
        streams: &Streams,
    ) {
        let oracle = exact_gradient(sites, self).unwrap();
        for kind in [
            EstimatorKind::Reinforce,
            EstimatorKind::ReinforceBaseline,
            EstimatorKind::Rebar,
        ] {
            let r = diagnostics(kind, opts, sites, self, &oracle.grad, 40_000, 1, streams).unwrap();
            // 4 SE keeps the family-wise false alarm rate low across ~500 components.
            assert!(r.max_z() < 4.0, "{kind} on {name}: max z {}", r.max_z());
        }
    }
}

#[test]
fn rebar_terms_collapse_at_low_temperature() {
    // As T -> 0 both relaxations become the one-hot z, so the control variate
    // equals L(z): the score term and the two pathwise terms all vanish on
    // almost every sample.
    let sites = vec![CategoricalParam::new("s", vec![0.2, -0.4, 0.7, 0.0]).unwrap()];
    let loss = QuadraticLoss::new(vec![vec![1.3, 2.1, 0.4, 1.7]]);
    let opts = EstimatorOptions {
        temperature: 1e-4,
        couple: true,
    };
    let streams = Streams::new(4);
    let mut quiet = 0;
    for i in 0..2000 {
        let t = control_variate_terms(&sites, &loss, false, &opts, &streams, i).unwrap();
        let worst = t
            .reinforce
            .iter()
            .chain(&t.correction)
            .chain(&t.gumbel)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if worst < 1e-6 && (t.control - t.loss).abs() < 1e-6 {
            quiet += 1;
        }
    }
    assert!(quiet >= 1990, "{quiet}");
}

#[test]
fn relax_with_zero_surrogate_is_reinforce_pathwise() {
    let mut rng = Streams::new(77).stream(0);
    let sites = random_sites(&mut rng, &[3, 4]);
    let loss = Blackbox::with_surrogate(
        LinearLoss::new(vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.3, -0.7]]),
        ZeroFn,
    );
    let streams = Streams::new(9);
    let a = relax(&sites, &loss, &EstimatorOptions::default(), 3000, &streams).unwrap();
    let b = reinforce(&sites, &loss, 3000, &streams).unwrap();
    assert_eq!(a.grad, b.grad);
    assert_eq!(a.variance, b.variance);
    for i in 0..50 {
        let t = control_variate_terms(
            &sites,
            &loss,
            true,
            &EstimatorOptions::default(),
            &streams,
            i,
        )
        .unwrap();
        let r = reinforce(&sites, &loss, 1, &Streams::new(9)).unwrap();
        if i == 0 {
            assert_eq!(t.estimate(), r.grad);
        }
        assert!(t.correction.iter().chain(&t.gumbel).all(|v| *v == 0.0));
    }
}

#[test]
fn relax_unbiased_with_wrong_surrogate() {
    let sites = vec![CategoricalParam::new("s", vec![0.4, -0.3, 0.1]).unwrap()];
    let inner = TableLoss::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
    let oracle = exact_gradient(&sites, &inner).unwrap();
    let loss = Blackbox::with_surrogate(inner, QuadraticLoss::new(vec![vec![-3.0, 5.0, 0.0]]));
    let r = diagnostics(
        EstimatorKind::Relax,
        &EstimatorOptions::default(),
        &sites,
        &loss,
        &oracle.grad,
        100_000,
        1,
        &Streams::new(12),
    )
    .unwrap();
    assert_eq!(r.verdict(), Verdict::Unbiased, "{:?}", r.rows);
}

#[test]
fn relax_with_exact_linear_surrogate_beats_reinforce() {
    let sites = vec![CategoricalParam::new("s", vec![0.4, -0.3, 0.1, 0.9]).unwrap()];
    let a = vec![1.0, 4.0, -2.0, 0.5];
    let loss = Blackbox::with_surrogate(LinearLoss::new(vec![a.clone()]), LinearLoss::new(vec![a]));
    let streams = Streams::new(13);
    let rx = relax(
        &sites,
        &loss,
        &EstimatorOptions::default(),
        10_000,
        &streams,
    )
    .unwrap();
    let rf = reinforce(&sites, &loss, 10_000, &streams).unwrap();
    let ratio = rx.variance.iter().sum::<f64>() / rf.variance.iter().sum::<f64>();
    // The relaxed mean is not the categorical mean, so even an exact linear
    // surrogate leaves a nonzero score term.
    assert!(ratio < 1.0, "variance ratio {ratio}");
    let oracle = exact_gradient(&sites, &loss).unwrap();
    let se = rx.standard_error();
    for i in 0..4 {
        assert!((rx.grad[i] - oracle.grad[i]).abs() < 4.0 * se[i]);
    }
}

#[test]
fn warm_baseline_removes_constant_loss_variance() {
    let sites = vec![CategoricalParam::new("s", vec![0.3, -0.2, 0.9]).unwrap()];
    let loss = LinearLoss::new(vec![vec![2.0; 3]]);
    let mut b = Baseline::default();
    for r in 0..10 {
        reinforce_baseline(&sites, &loss, &mut b, 1000, &Streams::new(r)).unwrap();
    }
    let g = reinforce_baseline(&sites, &loss, &mut b, 1000, &Streams::new(99)).unwrap();
    assert!(g.variance.iter().all(|v| *v < 1e-6), "{:?}", g.variance);
}

#[test]
fn warm_baseline_not_worse_than_reinforce_on_table() {
    let mut rng = Streams::new(5).stream(0);
    let sites = random_sites(&mut rng, &[4, 3]);
    let loss = TableLoss::new(
        vec![4, 3],
        (0..12).map(|_| rng.random_range(1.0..3.0)).collect(),
    )
    .unwrap();
    let mut b = Baseline::default();
    reinforce_baseline(&sites, &loss, &mut b, 1000, &Streams::new(1)).unwrap();
    let streams = Streams::new(2);
    let warm = reinforce_baseline(&sites, &loss, &mut b, 10_000, &streams).unwrap();
    let plain = reinforce(&sites, &loss, 10_000, &streams).unwrap();
    assert!(warm.variance.iter().sum::<f64>() <= plain.variance.iter().sum::<f64>());
}

#[test]
fn gumbel_softmax_bias_on_curved_loss() {
    let sites = vec![CategoricalParam::uniform("s", 2).unwrap()];
    // zeta_0^2: equals 1 at z = 0 and 0 at z = 1.
    let loss = QuadraticLoss::new(vec![vec![1.0, 0.0]]);
    let oracle = exact_gradient(&sites, &loss).unwrap();
    let hot = EstimatorOptions {
        temperature: 1.0,
        couple: true,
    };
    let r = diagnostics(
        EstimatorKind::GumbelSoftmax,
        &hot,
        &sites,
        &loss,
        &oracle.grad,
        100_000,
        1,
        &Streams::new(6),
    )
    .unwrap();
    assert_eq!(r.verdict(), Verdict::Biased);
    assert!(r.max_z() > 5.0);
    let cold = EstimatorOptions {
        temperature: 1e-4,
        couple: true,
    };
    let r = diagnostics(
        EstimatorKind::GumbelSoftmax,
        &cold,
        &sites,
        &loss,
        &oracle.grad,
        100_000,
        1,
        &Streams::new(6),
    )
    .unwrap();
    assert!(r.max_z() < 3.0);
}

#[test]
fn gumbel_softmax_unbiased_for_linear_loss_at_low_temperature() {
    let sites = vec![CategoricalParam::new("s", vec![0.5, 0.0, -0.5]).unwrap()];
    let loss = LinearLoss::new(vec![vec![1.0, -2.0, 0.5]]);
    let oracle = exact_gradient(&sites, &loss).unwrap();
    let g = gumbel_softmax_only(&sites, &loss, 0.05, 100_000, &Streams::new(7)).unwrap();
    let se = g.standard_error();
    for i in 0..3 {
        assert!((g.grad[i] - oracle.grad[i]).abs() < 3.5 * se[i], "{i}");
    }
}

#[test]
fn estimators_without_relaxation_are_refused() {
    let sites = vec![CategoricalParam::uniform("s", 2).unwrap()];
    let loss = Blackbox::new(LinearLoss::new(vec![vec![1.0, 0.0]]));
    let opts = EstimatorOptions::default();
    let s = Streams::new(0);
    assert!(matches!(
        rebar(&sites, &loss, &opts, 10, &s),
        Err(Error::MissingRelaxation { .. })
    ));
    assert!(matches!(
        relax(&sites, &loss, &opts, 10, &s),
        Err(Error::MissingSurrogate)
    ));
    assert!(matches!(
        gumbel_softmax_only(&sites, &loss, 0.4, 10, &s),
        Err(Error::MissingRelaxation { .. })
    ));
    assert!(matches!(
        reinforce(&sites, &loss, 0, &s),
        Err(Error::NoSamples)
    ));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let sites = vec![CategoricalParam::new("s", vec![0.2, -0.1, 0.6]).unwrap()];
    let loss = QuadraticLoss::new(vec![vec![1.0, 0.2, -0.5]]);
    let opts = EstimatorOptions::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                estimate(
                    EstimatorKind::Rebar,
                    &sites,
                    &loss,
                    &opts,
                    1000,
                    &Streams::new(3),
                    None,
                )
                .unwrap()
            })
    };
    assert_eq!(run(1), run(4));
}
