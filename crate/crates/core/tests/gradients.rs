//! Finite-difference checks of every differentiable primitive, five seeds each.

use fdvm::gradcheck::{check_function, GradCheck};
use fdvm::rng::substream;
use fdvm::ssm::SsmParams;
use fdvm::tensor::LAYER_NORM_EPS;
use fdvm::{Graph, Result, Tensor, Var};
use rand::Rng;

const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rand_t(dims: &[usize], seed: u64, salt: &str, lo: f64, hi: f64) -> Tensor {
    let mut r = substream(seed, salt);
    Tensor::from_fn(dims, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(dims: &[usize], seed: u64, salt: &str) -> Tensor {
    let mut r = substream(seed, salt);
    Tensor::from_fn(dims, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn assert_ok(what: &str, seed: u64, report: GradCheck) {
    let worst = report.worst().expect("at least one entry");
    assert!(
        report.max_rel_error() <= TOL,
        "{what} seed {seed}: {} [{}] analytic {:e} numeric {:e}",
        worst.name,
        worst.index,
        worst.analytic,
        worst.numeric
    );
}

fn check(what: &str, inputs: impl Fn(u64) -> Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Copy) {
    for seed in SEEDS {
        assert_ok(what, seed, check_function(&inputs(seed), f, 24, seed).unwrap());
    }
}

#[test]
fn conv2d() {
    check(
        "conv2d",
        |s| vec![rand_t(&[2, 3, 5, 4], s, "x", -1.0, 1.0), rand_t(&[2, 3, 3, 3], s, "k", -0.5, 0.5), rand_t(&[2], s, "b", -0.5, 0.5)],
        |g, v| g.conv2d(v[0], v[1], v[2]),
    );
}

#[test]
fn conv1d_depthwise() {
    check(
        "conv1d",
        |s| vec![rand_t(&[2, 7, 3], s, "x", -1.0, 1.0), rand_t(&[3, 3], s, "k", -0.5, 0.5), rand_t(&[3], s, "b", -0.5, 0.5)],
        |g, v| g.conv1d_depthwise(v[0], v[1], v[2]),
    );
}

#[test]
fn layer_norm() {
    check(
        "layer_norm",
        |s| vec![rand_t(&[2, 4, 6], s, "x", -2.0, 2.0), rand_t(&[6], s, "g", 0.5, 1.5), rand_t(&[6], s, "b", -0.5, 0.5)],
        |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
    );
}

#[test]
fn softmax_every_axis() {
    for axis in 0..3 {
        for seed in SEEDS {
            let x = rand_t(&[3, 4, 5], seed, "x", -2.0, 2.0);
            assert_ok("softmax", seed, check_function(&[x], |g, v| g.softmax(v[0], axis), 30, seed).unwrap());
        }
    }
}

#[test]
fn bilinear_resize_up_and_down() {
    for (oh, ow) in [(7, 9), (3, 2), (5, 5)] {
        check("resize", |s| vec![rand_t(&[1, 2, 5, 4], s, "x", -1.0, 1.0)], move |g, v| g.bilinear_resize(v[0], oh, ow));
    }
}

#[test]
fn relu_away_from_kink() {
    check("relu", |s| vec![away_from_zero(&[3, 7], s, "x")], |g, v| Ok(g.relu(v[0])));
}

#[test]
fn elementwise() {
    let two = |s| vec![rand_t(&[4, 5], s, "a", -1.0, 1.0), rand_t(&[4, 5], s, "b", -1.0, 1.0)];
    check("add", two, |g, v| g.add(v[0], v[1]));
    check("hadamard", two, |g, v| g.hadamard(v[0], v[1]));
    check("scale", two, |g, v| Ok(g.scale(v[0], -2.5)));
    check("expm1", two, |g, v| Ok(g.expm1(v[0])));
}

#[test]
fn linear() {
    check(
        "linear",
        |s| vec![rand_t(&[2, 3, 4], s, "x", -1.0, 1.0), rand_t(&[4, 5], s, "w", -0.5, 0.5), rand_t(&[5], s, "b", -0.5, 0.5)],
        |g, v| g.linear(v[0], v[1], v[2]),
    );
}

#[test]
fn reshape_permute_sum() {
    let one = |s| vec![rand_t(&[2, 3, 4], s, "x", -1.0, 1.0)];
    check("reshape", one, |g, v| g.reshape(v[0], &[6, 4]));
    check("permute", one, |g, v| g.permute(v[0], &[2, 0, 1]));
    check("sum", one, |g, v| Ok(g.sum(v[0])));
}

#[test]
fn l1_loss_away_from_ties() {
    check(
        "l1",
        |s| {
            let t = rand_t(&[3, 4], s, "t", -1.0, 1.0);
            let d = away_from_zero(&[3, 4], s, "d");
            let p = Tensor::from_fn([3, 4], |i| t.data()[i] + d.data()[i]);
            vec![p, t]
        },
        |g, v| g.l1_loss(v[0], v[1]),
    );
}

#[test]
fn selective_scan_all_inputs() {
    check(
        "selective_scan",
        |s| {
            let (c, n) = (3, 4);
            let mut r = substream(s, "ssm");
            let mut p = SsmParams::init(c, n, &mut r);
            // Larger steps than the default init so the state actually mixes.
            p.b_dt = rand_t(&[1], s, "bdt", -1.0, 0.5);
            p.d_skip = rand_t(&[c], s, "d", 0.5, 1.5);
            let mut v = vec![rand_t(&[2, 6, c], s, "u", -1.0, 1.0)];
            v.extend(p.into_array());
            v
        },
        |g, v| {
            let p = SsmParams { a_log: v[1], d_skip: v[2], w_dt: v[3], b_dt: v[4], w_b: v[5], w_c: v[6] };
            g.selective_scan(v[0], &p)
        },
    );
}

#[test]
fn polar_inverse_fft() {
    check(
        "polar_idft",
        |s| vec![rand_t(&[2, 1, 4, 5], s, "a", 0.0, 2.0), rand_t(&[2, 1, 4, 5], s, "p", -3.0, 3.0)],
        |g, v| g.polar_inverse_fft(v[0], v[1]),
    );
}

#[test]
fn composite_chain() {
    // conv -> resize -> layer norm -> softmax, as used inside a block.
    check(
        "chain",
        |s| vec![rand_t(&[1, 2, 6, 6], s, "x", -1.0, 1.0), rand_t(&[3, 2, 3, 3], s, "k", -0.5, 0.5), rand_t(&[3], s, "b", 0.2, 0.5)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            let y = g.bilinear_resize(y, 4, 4)?;
            let y = g.reshape(y, &[1, 3, 16])?;
            let y = g.permute(y, &[0, 2, 1])?;
            let gamma = g.constant(Tensor::ones([3]));
            let beta = g.constant(Tensor::zeros([3]));
            let y = g.layer_norm(y, gamma, beta, LAYER_NORM_EPS)?;
            g.softmax(y, 2)
        },
    );
}
