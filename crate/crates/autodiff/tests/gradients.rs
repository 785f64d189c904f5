use ctxf_autodiff::gradcheck::{check, GradCheckReport};
use ctxf_autodiff::rng::{self, Rng};
use ctxf_autodiff::{Result, Tape, Tensor as TensorOf, Var};

// Checks run in f64 so the finite-difference estimate is not swamped by
// output rounding; `f32_checks_at_single_precision` covers the f32 path.
type Tensor = TensorOf<f64>;
type Tape64 = Tape<f64>;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const TOL_SOFTMAX_LOG: f64 = 1e-3;
const TOL_F32: f64 = 5e-3;
const POINTS: u64 = 10;

/// Normal samples pushed away from zero so piecewise-linear ops are smooth
/// within the finite-difference step.
fn away_from_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn run<G, F>(name: &str, tol: f64, gen: G, f: F)
where
    G: Fn(&mut Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape64, &[Var]) -> Result<Var>,
{
    for point in 0..POINTS {
        let mut r = rng::derive(11, &[point]);
        let inputs = gen(&mut r);
        let report: GradCheckReport<f64> = check(&inputs, H, &mut r, &f).unwrap();
        let err = report.max_relative_error();
        assert!(
            err < tol,
            "{name} point {point}: relative error {err:e}\nanalytic {:?}\nnumeric {:?}",
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn matmul_gradients() {
    run(
        "matmul",
        TOL,
        |r| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4, 2], 1.0, r)],
        |t, v| t.matmul(v[0], v[1]),
    );
}

#[test]
fn transpose_and_reshape_gradients() {
    run(
        "transpose",
        TOL,
        |r| vec![Tensor::randn(&[3, 5], 1.0, r)],
        |t, v| {
            let x = t.transpose(v[0])?;
            t.reshape(x, &[15])
        },
    );
}

#[test]
fn conv2d_gradients() {
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        run(
            "conv2d",
            TOL,
            |r| {
                vec![
                    Tensor::randn(&[2, 2, 5, 5], 1.0, r),
                    Tensor::randn(&[3, 2, 3, 3], 0.5, r),
                    Tensor::randn(&[3], 0.5, r),
                ]
            },
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
}

#[test]
fn activation_gradients() {
    run("relu", TOL, |r| vec![away_from_kink(&[12], r)], |t, v| Ok(t.relu(v[0])));
    run(
        "leaky_relu",
        TOL,
        |r| vec![away_from_kink(&[12], r)],
        |t, v| Ok(t.leaky_relu(v[0], 0.2)),
    );
    run(
        "elu",
        TOL,
        |r| vec![away_from_kink(&[12], r)],
        |t, v| Ok(t.elu(v[0], 1.0)),
    );
    run(
        "sigmoid",
        TOL,
        |r| vec![Tensor::randn(&[12], 1.0, r)],
        |t, v| Ok(t.sigmoid(v[0])),
    );
}

#[test]
fn pooling_gradients() {
    run(
        "max_pool2d",
        TOL,
        |r| vec![Tensor::randn(&[2, 2, 4, 4], 1.0, r)],
        |t, v| t.max_pool2d(v[0], 2),
    );
    run(
        "global_mean_pool",
        TOL,
        |r| vec![Tensor::randn(&[2, 3, 4, 4], 1.0, r)],
        |t, v| t.global_mean_pool(v[0]),
    );
}

#[test]
fn elementwise_gradients() {
    let pair = |r: &mut Rng| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)];
    let bcast = |r: &mut Rng| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4], 1.0, r)];
    run("add", TOL, pair, |t, v| t.add(v[0], v[1]));
    run("add broadcast", TOL, bcast, |t, v| t.add(v[0], v[1]));
    run("sub", TOL, bcast, |t, v| t.sub(v[0], v[1]));
    run("mul", TOL, pair, |t, v| t.mul(v[0], v[1]));
    run("mul broadcast", TOL, bcast, |t, v| t.mul(v[0], v[1]));
    run(
        "div",
        TOL,
        |r| vec![Tensor::randn(&[3, 4], 1.0, r), positive(&[4], r)],
        |t, v| t.div(v[0], v[1]),
    );
    run(
        "scale",
        TOL,
        |r| vec![Tensor::randn(&[5], 1.0, r)],
        |t, v| {
            let s = t.scale(v[0], -1.7);
            Ok(t.add_scalar(s, 0.3))
        },
    );
}

#[test]
fn exp_log_gradients() {
    run(
        "exp",
        TOL,
        |r| vec![Tensor::randn(&[8], 1.0, r)],
        |t, v| Ok(t.exp(v[0])),
    );
    run(
        "log",
        TOL_SOFTMAX_LOG,
        |r| vec![positive(&[8], r)],
        |t, v| Ok(t.log(v[0])),
    );
}

#[test]
fn reduction_gradients() {
    run(
        "sum",
        TOL,
        |r| vec![Tensor::randn(&[2, 5], 1.0, r)],
        |t, v| Ok(t.sum(v[0])),
    );
    run(
        "mean",
        TOL,
        |r| vec![Tensor::randn(&[2, 5], 1.0, r)],
        |t, v| Ok(t.mean(v[0])),
    );
}

#[test]
fn concat_gradients() {
    run(
        "concat",
        TOL,
        |r| vec![Tensor::randn(&[3, 2], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)],
        |t, v| t.concat(&[v[0], v[1], v[0]]),
    );
}

#[test]
fn softmax_family_gradients() {
    run(
        "softmax",
        TOL_SOFTMAX_LOG,
        |r| vec![Tensor::randn(&[3, 5], 1.0, r)],
        |t, v| Ok(t.softmax(v[0])),
    );
    let mask: Vec<bool> = (0..15).map(|i| i % 5 != i / 5).collect();
    let m1 = mask.clone();
    run(
        "masked_softmax",
        TOL_SOFTMAX_LOG,
        |r| vec![Tensor::randn(&[3, 5], 1.0, r)],
        move |t, v| t.masked_softmax(v[0], &m1),
    );
    run(
        "masked_log_softmax",
        TOL_SOFTMAX_LOG,
        |r| vec![Tensor::randn(&[3, 5], 1.0, r)],
        move |t, v| t.masked_log_softmax(v[0], &mask),
    );
}

#[test]
fn l2_normalize_gradients() {
    run(
        "l2_normalize",
        TOL,
        |r| vec![Tensor::randn(&[3, 4], 1.0, r)],
        |t, v| Ok(t.l2_normalize(v[0])),
    );
}

#[test]
fn gather_and_outer_add_gradients() {
    run(
        "gather_rows",
        TOL,
        |r| vec![Tensor::randn(&[4, 3], 1.0, r)],
        |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]),
    );
    run(
        "outer_add",
        TOL,
        |r| vec![Tensor::randn(&[3], 1.0, r), Tensor::randn(&[4], 1.0, r)],
        |t, v| t.outer_add(v[0], v[1]),
    );
}

#[test]
fn bce_with_logits_gradients() {
    run(
        "bce_with_logits",
        TOL_SOFTMAX_LOG,
        |r| vec![Tensor::randn(&[4, 4], 2.0, r)],
        |t, v| {
            let target = Tensor::new(&[4, 4], (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect())?;
            t.bce_with_logits(v[0], &target, 2.5)
        },
    );
}

#[test]
fn sum_of_normalized_vector_matches_projection() {
    // d/dv sum(v/|v|) at v=[1,0] is (I - v v^T) [1,1] = [0, 1]
    let mut r = rng::seeded(0);
    let report = check(&[Tensor::vector(&[1.0, 0.0])], H, &mut r, |t, v| {
        let n = t.l2_normalize(v[0]);
        Ok(t.sum(n))
    })
    .unwrap();
    assert!(report.max_relative_error() < TOL);
    let g = report.analytic[0].data();
    assert!(g[0].abs() < 1e-6 && (g[1] - 1.0).abs() < 1e-6);
}

#[test]
fn fan_out_gradients_accumulate() {
    // y = x * x uses x twice: dy/dx = 2x
    let mut t = Tape64::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(6.0));

    // relu(x) + exp(x) equals the sum of the two single-consumer gradients
    let xv = Tensor::vector(&[0.7, -0.4, 1.3]);
    let single = |use_relu: bool| {
        let mut t = Tape64::new();
        let x = t.param(xv.clone());
        let y = if use_relu { t.relu(x) } else { t.exp(x) };
        let s = t.sum(y);
        t.backward(s).unwrap().get(x).unwrap().clone()
    };
    let mut t = Tape64::new();
    let x = t.param(xv.clone());
    let a = t.relu(x);
    let b = t.exp(x);
    let c = t.add(a, b).unwrap();
    let s = t.sum(c);
    let both = t.backward(s).unwrap().get(x).unwrap().clone();
    let (ga, gb) = (single(true), single(false));
    for i in 0..3 {
        assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape64::new();
    let x = t.param(Tensor::vector(&[1.0, 2.0]));
    let c = t.constant(Tensor::vector(&[3.0, 4.0]));
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn f32_checks_at_single_precision() {
    let h = 1e-2;
    for point in 0..POINTS {
        let mut r = rng::derive(13, &[point]);
        let x = TensorOf::<f32>::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let w = TensorOf::<f32>::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let report = check(&[x, w], h, &mut r, |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1)?;
            let y = t.global_mean_pool(y)?;
            Ok(t.l2_normalize(y))
        })
        .unwrap();
        assert!(
            report.max_relative_error() < TOL_F32,
            "point {point}: {:e}",
            report.max_relative_error()
        );
    }
}
