use proptest::prelude::*;
use unas_autodiff::{finite_diff_check, Array, Tape, TapeError, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n)
}

/// Contracts `y` against fixed weights so every output component matters.
fn contract(t: &mut Tape, y: Var, weights: &[f64]) -> Result<Var, TapeError> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(Array::new(shape, weights[..t.value(y).len()].to_vec()));
    t.dot(y, w)
}

fn check_unary(x: &[f64], w: &[f64], f: impl Fn(&mut Tape, Var) -> Result<Var, TapeError>) -> f64 {
    finite_diff_check(
        |t, p| {
            let y = f(t, p)?;
            contract(t, y, w)
        },
        &Array::vector(x.to_vec()),
        EPS,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_unary(x in vals(6), w in vals(6)) {
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.exp(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.tanh(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.square(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.neg(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.add_scalar(p, 1.5))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.mul_scalar(p, -2.5))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| t.mul_const(p, Array::vector(w.clone()))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| t.add_const(p, &Array::vector(w.clone()))) < TOL);
    }

    #[test]
    fn kinked_unary_away_from_kink(x in prop::collection::vec(prop_oneof![-5.0..-1e-3f64, 1e-3..5.0f64], 6), w in vals(6)) {
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.relu(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.abs(p))) < TOL);
    }

    #[test]
    fn log_on_positive_domain(x in prop::collection::vec(0.1..5.0f64, 5), w in vals(5)) {
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.log(p))) < TOL);
    }

    #[test]
    fn binary_ops(x in vals(4), y in vals(4), w in vals(4)) {
        let other = Array::vector(y.clone());
        let denom = Array::vector(y.iter().map(|v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { *v }).collect());
        for which in 0..4 {
            for lhs in [true, false] {
                let err = check_unary(&x, &w, |t, p| {
                    let c = t.constant(if which == 3 { denom.clone() } else { other.clone() });
                    let (a, b) = if lhs || which == 3 { (p, c) } else { (c, p) };
                    match which {
                        0 => t.add(a, b),
                        1 => t.sub(a, b),
                        2 => t.mul(a, b),
                        _ => t.div(a, b),
                    }
                });
                prop_assert!(err < TOL, "op {} lhs {}: {}", which, lhs, err);
            }
        }
        // Divisor on the differentiated side.
        let num = Array::vector(y.clone());
        let shifted: Vec<f64> = x.iter().map(|v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { *v }).collect();
        let err = check_unary(&shifted, &w, |t, p| {
            let c = t.constant(num.clone());
            t.div(c, p)
        });
        prop_assert!(err < TOL);
    }

    #[test]
    fn reductions_and_row_ops(x in vals(6), r in vals(3), w in vals(6)) {
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.sum(p))) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| Ok(t.mean(p))) < TOL);
        let rows = Array::vector(r.clone());
        // Matrix side differentiated.
        let m = Array::matrix(2, 3, x.clone());
        for op in 0..2 {
            let err = finite_diff_check(|t, p| {
                let row = t.constant(rows.clone());
                let y = if op == 0 { t.add_row(p, row)? } else { t.mul_row(p, row)? };
                contract(t, y, &w)
            }, &m, EPS).unwrap();
            prop_assert!(err < TOL);
            // Row side differentiated.
            let err = finite_diff_check(|t, p| {
                let a = t.constant(m.clone());
                let y = if op == 0 { t.add_row(a, p)? } else { t.mul_row(a, p)? };
                contract(t, y, &w)
            }, &rows, EPS).unwrap();
            prop_assert!(err < TOL);
        }
    }

    #[test]
    fn matmul_both_sides(a in vals(6), b in vals(6), w in vals(4)) {
        let am = Array::matrix(2, 3, a.clone());
        let bm = Array::matrix(3, 2, b.clone());
        let err = finite_diff_check(|t, p| {
            let c = t.constant(bm.clone());
            let y = t.matmul(p, c)?;
            contract(t, y, &w)
        }, &am, EPS).unwrap();
        prop_assert!(err < TOL);
        let err = finite_diff_check(|t, p| {
            let c = t.constant(am.clone());
            let y = t.matmul(c, p)?;
            contract(t, y, &w)
        }, &bm, EPS).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_family(x in vals(6), w in vals(6)) {
        let m = Array::matrix(2, 3, x.clone());
        for op in 0..2 {
            let err = finite_diff_check(|t, p| {
                let y = if op == 0 { t.softmax(p)? } else { t.log_softmax(p)? };
                contract(t, y, &w)
            }, &m, EPS).unwrap();
            prop_assert!(err < TOL, "op {}: {}", op, err);
        }
        let err = finite_diff_check(|t, p| t.cross_entropy(p, &[2, 0]), &m, EPS).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn indexing_outer_embed_scale(x in vals(3), y in vals(4), w in vals(12), s in -5.0..5.0f64) {
        let xv = Array::vector(x.clone());
        let yv = Array::vector(y.clone());
        let err = finite_diff_check(|t, p| {
            let c = t.constant(yv.clone());
            let o = t.outer(p, c)?;
            contract(t, o, &w)
        }, &xv, EPS).unwrap();
        prop_assert!(err < TOL);
        let err = finite_diff_check(|t, p| {
            let c = t.constant(xv.clone());
            let o = t.outer(c, p)?;
            contract(t, o, &w)
        }, &yv, EPS).unwrap();
        prop_assert!(err < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| t.index(p, 1)) < TOL);
        prop_assert!(check_unary(&x, &w, |t, p| t.embed(p, &[4, 0, 2], 5)) < TOL);
        // Scale: both the array and the scalar factor.
        let err = check_unary(&x, &w, |t, p| {
            let k = t.constant(Array::scalar(s));
            t.scale(p, k)
        });
        prop_assert!(err < TOL);
        let err = finite_diff_check(|t, p| {
            let a = t.constant(xv.clone());
            let y = t.scale(a, p)?;
            contract(t, y, &w)
        }, &Array::scalar(s), EPS).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn gradient_is_linear_in_the_loss(x in vals(4)) {
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let p = t.param(Array::vector(x.clone()));
            let a = t.exp(p);
            let a = t.sum(a);
            let b = t.tanh(p);
            let b = t.sum(b);
            let loss = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.forward(loss).unwrap();
            t.backward().unwrap().wrt(p).clone()
        };
        let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..x.len() {
            prop_assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn quadratic_is_exact() {
    let err = finite_diff_check(
        |t, p| {
            let s = t.square(p);
            Ok(t.sum(s))
        },
        &Array::vector(vec![0.3, -1.2, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn independent_loss_reports_zero_error() {
    let err = finite_diff_check(
        |t, _p| {
            let c = t.constant(Array::vector(vec![1.0, 2.0]));
            Ok(t.sum(c))
        },
        &Array::vector(vec![0.5, 0.5]),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn reshape_passes_gradient_through() {
    let err = finite_diff_check(
        |t, p| {
            let m = t.reshape(p, &[2, 2])?;
            let w = t.constant(Array::matrix(2, 1, vec![1.0, -2.0]));
            let y = t.matmul(m, w)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        },
        &Array::vector(vec![0.1, 0.2, -0.3, 0.4]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}
