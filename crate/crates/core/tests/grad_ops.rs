use orientpose::grad::{finite_diff_check, GradError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element reaches
/// the loss with a distinct coefficient.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>, GradError> {
    let w = y.tape().constant(random(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn check<F>(f: F, x: &Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, GradError>,
{
    let err = finite_diff_check(f, x, H).unwrap();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn relu_forward_and_backward() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = x.relu();
    assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn matmul_two_by_two() {
    let tape = Tape::new();
    let a = tape.var(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.var(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = a.matmul(b).unwrap();
    assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
    let g = tape.backward(c.sum()).unwrap();
    // d/dA sum(AB) = 1 B^T, d/dB = A^T 1
    assert_eq!(g.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
    assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
}

#[test]
fn identity_kernel_is_identity_with_unit_gradient() {
    let tape = Tape::new();
    let x = tape.var(random(&[1, 5, 5], 3));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = tape.constant(Tensor::new(&[1, 1, 3, 3], k).unwrap());
    let y = x.conv2d(w, None, 1, 1).unwrap();
    assert_eq!(y.value().data(), x.value().data());
    let g = tape.backward(y.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn sum_and_mean_of_squares() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);

    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let loss = x.square().mean();
    assert!((loss.value().item() - 14.0 / 3.0).abs() < 1e-15);
    let g = tape.backward(loss).unwrap();
    let expect = [2.0 / 3.0, -4.0 / 3.0, 2.0];
    for (a, b) in g.get(x).unwrap().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(
        tape.backward(x.relu()),
        Err(GradError::NonScalarLoss { .. })
    ));
}

#[test]
fn constants_and_detached_values_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let d = x.detach();
    let loss = x.mul(c).unwrap().add(d.square()).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(d).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);

    // A loss built only from constants is itself untracked.
    let tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1.0]));
    assert!(tape.backward(c.sum()).unwrap().get(c).is_none());
}

#[test]
fn shape_errors_are_reported() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(GradError::ShapeMismatch { .. })));
    assert!(a.add(tape.var(Tensor::zeros(&[3]))).is_err());
    assert!(a.gather(&[6]).is_err());
    assert!(Var::concat(&[]).is_err());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let x = random(&[7], 11);
    check(|_, x| project(x.sigmoid(), 1), &x);
    check(|_, x| project(x.square(), 2), &x);
    check(|_, x| project(x.scale(-2.5), 3), &x);
    // Keep away from the kinks at zero.
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check(|_, x| project(x.relu(), 4), &away);
    check(|_, x| project(x.abs(), 5), &away);
    let positive = x.map(|v| v.abs() + 0.5);
    check(|_, x| project(x.sqrt(), 6), &positive);
}

#[test]
fn binary_ops_match_finite_differences() {
    let x = random(&[2, 3], 21);
    let other = random(&[2, 3], 22);
    check(|t, x| project(x.add(t.constant(other.clone()))?, 1), &x);
    check(|t, x| project(t.constant(other.clone()).sub(x)?, 2), &x);
    check(|t, x| project(x.mul(t.constant(other.clone()))?, 3), &x);
    check(|_, x| project(x.mul(x)?, 4), &x);
    let away = other.map(|v| v.signum() * (v.abs() + 0.5));
    check(|t, x| project(x.div(t.constant(away.clone()))?, 9), &x);
    check(|t, d| project(t.constant(x.clone()).div(d)?, 10), &away);
    check(|_, x| project(x.add_scalar(0.7).square(), 11), &x);
    // Broadcasting is explicit; its pullback sums over the expanded axis.
    let row = random(&[1, 3], 23);
    check(|t, r| project(t.constant(x.clone()).mul(r.broadcast_to(&[2, 3])?)?, 6), &row);
    check(|t, r| project(r.broadcast_to(&[4, 3])?.add(t.constant(random(&[4, 3], 7)))?, 8), &row);
}

#[test]
fn reductions_and_layout_ops_match_finite_differences() {
    let x = random(&[3, 2, 4], 31);
    check(|_, x| Ok(x.sum()), &x);
    check(|_, x| Ok(x.square().mean()), &x);
    check(|_, x| project(x.sum_last(), 1), &x);
    check(|_, x| project(x.reshape(&[6, 4])?, 2), &x);
    check(|_, x| project(x.slice(1..3)?, 3), &x);
    check(|_, x| project(x.gather(&[0, 5, 5, 23, 7])?, 4), &x);
    check(
        |t, x| project(Var::concat(&[x, t.constant(random(&[1, 2, 4], 5)), x])?, 6),
        &x,
    );
}

#[test]
fn matmul_matches_finite_differences() {
    let a = random(&[3, 4], 41);
    let b = random(&[4, 2], 42);
    check(|t, a| project(a.matmul(t.constant(b.clone()))?, 1), &a);
    check(|t, b| project(t.constant(a.clone()).matmul(b)?, 2), &b);
    check(|_, a| project(a.transpose()?, 3), &a);
    check(|_, a| project(a.matmul(a.transpose()?)?, 4), &a);
}

#[test]
fn conv2d_matches_finite_differences() {
    let x = random(&[2, 6, 5], 51);
    let w = random(&[3, 2, 3, 3], 52);
    let b = random(&[3], 53);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        check(
            |t, x| {
                let y = x.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), stride, pad)?;
                project(y, 1)
            },
            &x,
        );
        check(
            |t, w| {
                let y = t.constant(x.clone()).conv2d(w, Some(t.constant(b.clone())), stride, pad)?;
                project(y, 2)
            },
            &w,
        );
        check(
            |t, b| {
                let y = t.constant(x.clone()).conv2d(t.constant(w.clone()), Some(b), stride, pad)?;
                project(y, 3)
            },
            &b,
        );
    }
    let w1 = random(&[4, 2, 1, 1], 54);
    check(|t, x| project(x.conv2d(t.constant(w1.clone()), None, 1, 0)?, 4), &x);
}

#[test]
fn normalize_rows_and_bce_match_finite_differences() {
    let x = random(&[4, 3], 61);
    check(|_, x| project(x.normalize_rows(1e-6)?, 1), &x);
    let p = random(&[5], 62).map(|v| 0.5 + 0.4 * v);
    let y = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0, 1.0]);
    check(|_, p| p.bce(&y), &p);
    let logits = random(&[5], 63).map(|v| 3.0 * v);
    check(|_, z| z.sigmoid().bce(&y), &logits);
}

#[test]
fn zero_rows_normalize_to_zero_without_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]).unwrap());
    let y = x.normalize_rows(1e-6).unwrap();
    assert_eq!(y.value().data(), &[0.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
    let g = tape.backward(project(y, 1).unwrap()).unwrap();
    assert_eq!(&g.get(x).unwrap().data()[..3], &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let x = random(&[2, 5, 5], 71);
    let w = random(&[4, 2, 3, 3], 72);
    let run = || {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let wv = tape.var(w.clone());
        let y = xv.conv2d(wv, None, 1, 1).unwrap().relu();
        let loss = project(y, 3).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get_or_zeros(xv), g.get_or_zeros(wv))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear_in_the_loss(
        seed in 0u64..1000,
        alpha in -3.0..3.0f64,
        beta in -3.0..3.0f64,
    ) {
        let x = random(&[3, 4], seed);
        fn f(v: Var<'_>, seed: u64) -> Var<'_> {
            project(v.sigmoid(), seed + 1).unwrap()
        }
        fn g(v: Var<'_>, seed: u64) -> Var<'_> {
            project(v.square(), seed + 2).unwrap()
        }
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let loss = match which {
                0 => f(xv, seed),
                1 => g(xv, seed),
                _ => f(xv, seed).scale(alpha).add(g(xv, seed).scale(beta)).unwrap(),
            };
            tape.backward(loss).unwrap().get_or_zeros(xv)
        };
        let (gf, gg, combined) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..x.numel() {
            let expect = alpha * gf.data()[k] + beta * gg.data()[k];
            prop_assert!((combined.data()[k] - expect).abs() < 1e-12);
        }
    }
}
