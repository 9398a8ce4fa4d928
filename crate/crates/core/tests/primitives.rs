use fewt::gradcheck::grad_check;
use fewt::graph::{Graph, Var};
use fewt::tensor::{self, Tensor};
use fewt::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values in `±[0.2, 1.2]`, clear of kinks at zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(r, shape).map(|v| v.signum() * (0.2 + v.abs()))
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(r, shape).map(|v| 0.5 + 0.5 * (v + 1.0))
}

fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = dyn Fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

fn check(name: &str, build: &Build) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut r = ChaCha8Rng::seed_from_u64(trial as u64 ^ 0x5eed);
        let (x, f) = build(&mut r);
        let report = grad_check(|g, v| f(g, v), &x, H).unwrap();
        assert!(report.passes(TOL), "{name} trial {trial}: {report:?}");
        worst = worst.max(report.max_error);
    }
    assert!(worst < TOL, "{name}");
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(1..=4), r.gen_range(1..=5))
}

macro_rules! unary {
    ($test:ident, $gen:ident, $op:expr) => {
        #[test]
        fn $test() {
            check(stringify!($test), &|r| {
                let (a, b) = dims(r);
                let x = $gen(r, &[a, b]);
                let w = rand_t(r, &[a, b]);
                (
                    x,
                    Box::new(move |g: &mut Graph, v| {
                        let y = $op(g, v)?;
                        project(g, y, &w)
                    }),
                )
            });
        }
    };
}

unary!(exp_matches_differences, rand_t, |g: &mut Graph, v| g.exp(v));
unary!(sigmoid_matches_differences, rand_t, |g: &mut Graph, v| g.sigmoid(v));
unary!(silu_matches_differences, rand_t, |g: &mut Graph, v| g.silu(v));
unary!(relu_matches_differences, away_from_zero, |g: &mut Graph, v| g.relu(v));
unary!(abs_matches_differences, away_from_zero, |g: &mut Graph, v| g.abs(v));
unary!(square_matches_differences, rand_t, |g: &mut Graph, v| g.square(v));
unary!(powf_matches_differences, positive, |g: &mut Graph, v| g.powf(v, -0.5));
unary!(scale_matches_differences, rand_t, |g: &mut Graph, v| g.scale(v, -1.7));
unary!(add_scalar_matches_differences, rand_t, |g: &mut Graph, v| g.add_scalar(v, 0.3));
unary!(softmax_rows_match_differences, rand_t, |g: &mut Graph, v| g.softmax(v, 1));
unary!(softmax_cols_match_differences, rand_t, |g: &mut Graph, v| g.softmax(v, 0));
unary!(sum_axis_matches_differences, rand_t, |g: &mut Graph, v| g.sum_axis(v, 0));
unary!(mean_axis_matches_differences, rand_t, |g: &mut Graph, v| g.mean_axis(v, 1));
unary!(mean_matches_differences, rand_t, |g: &mut Graph, v| g.mean(v));

macro_rules! binary {
    ($test:ident, $gen:ident, $op:expr) => {
        #[test]
        fn $test() {
            check(stringify!($test), &|r| {
                let (a, b) = dims(r);
                let x = rand_t(r, &[a, b]);
                let other_shape = match r.gen_range(0..3) {
                    0 => vec![a, b],
                    1 => vec![1, b],
                    _ => vec![a, 1],
                };
                let o = $gen(r, &other_shape);
                let w = rand_t(r, &[a, b]);
                let lhs = r.gen_bool(0.5);
                (
                    x,
                    Box::new(move |g: &mut Graph, v| {
                        let c = g.constant(o.clone());
                        let y = if lhs { $op(g, v, c)? } else { $op(g, c, v)? };
                        project(g, y, &w)
                    }),
                )
            });
        }
    };
}

binary!(add_broadcast_matches_differences, rand_t, |g: &mut Graph, a, b| g.add(a, b));
binary!(sub_broadcast_matches_differences, rand_t, |g: &mut Graph, a, b| g.sub(a, b));
binary!(mul_broadcast_matches_differences, rand_t, |g: &mut Graph, a, b| g.mul(a, b));

#[test]
fn transpose_matches_differences() {
    check("transpose", &|r| {
        let (a, b) = dims(r);
        let x = rand_t(r, &[a, b]);
        let w = rand_t(r, &[b, a]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let y = g.transpose(v)?;
                project(g, y, &w)
            }),
        )
    });
}

#[test]
fn div_matches_differences() {
    check("div", &|r| {
        let (a, b) = dims(r);
        let x = away_from_zero(r, &[a, b]);
        let o = away_from_zero(r, &[a, b]);
        let w = rand_t(r, &[a, b]);
        let numerator = r.gen_bool(0.5);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let c = g.constant(o.clone());
                let y = if numerator { g.div(v, c)? } else { g.div(c, v)? };
                project(g, y, &w)
            }),
        )
    });
}

#[test]
fn matmul_matches_differences() {
    check("matmul", &|r| {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
        let left = r.gen_bool(0.5);
        let x = if left { rand_t(r, &[m, k]) } else { rand_t(r, &[k, n]) };
        let o = if left { rand_t(r, &[k, n]) } else { rand_t(r, &[m, k]) };
        let w = rand_t(r, &[m, n]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let c = g.constant(o.clone());
                let y = if left { g.matmul(v, c)? } else { g.matmul(c, v)? };
                project(g, y, &w)
            }),
        )
    });
}

#[test]
fn linear_matches_differences() {
    check("linear", &|r| {
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
        let x = rand_t(r, &[n, i]);
        let wt = rand_t(r, &[i, o]);
        let b = rand_t(r, &[o]);
        let w = rand_t(r, &[n, o]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let (wv, bv) = (g.constant(wt.clone()), g.constant(b.clone()));
                let y = g.linear(v, wv, Some(bv))?;
                project(g, y, &w)
            }),
        )
    });
}

#[test]
fn shape_ops_match_differences() {
    check("reshape/permute/concat/slice", &|r| {
        let (a, b, c) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=4));
        let x = rand_t(r, &[a, b, c]);
        let extra = rand_t(r, &[a, b, 2]);
        let start = r.gen_range(0..c);
        let len = r.gen_range(1..=c - start);
        let w = rand_t(r, &[len, a, b]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let e = g.constant(extra.clone());
                let cat = g.concat(&[v, e], 2)?;
                let s = g.slice(cat, 2, start, len)?;
                let p = g.permute(s, &[2, 0, 1])?;
                let flat = g.reshape(p, &[len * a * b])?;
                let back = g.reshape(flat, &[len, a, b])?;
                project(g, back, &w)
            }),
        )
    });
}

#[test]
fn conv2d_input_and_weight_match_differences() {
    check("conv2d", &|r| {
        let groups = r.gen_range(1..=2);
        let (cg, og) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (c, o) = (cg * groups, og * groups);
        let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
        let k = if r.gen_bool(0.5) { 3 } else { 1 };
        let stride = r.gen_range(1..=2);
        let pad = if k == 3 { r.gen_range(0..=1) } else { 0 };
        let x = rand_t(r, &[c, h, w]);
        let kernel = rand_t(r, &[o, cg, k, k]);
        let bias = rand_t(r, &[o]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let proj = rand_t(r, &[o, oh, ow]);
        let wrt_weight = r.gen_bool(0.5);
        let leaf = if wrt_weight { kernel.clone() } else { x.clone() };
        (
            leaf,
            Box::new(move |g: &mut Graph, v| {
                let (xi, ki) = if wrt_weight {
                    (g.constant(x.clone()), v)
                } else {
                    (v, g.constant(kernel.clone()))
                };
                let b = g.constant(bias.clone());
                let y = g.conv2d(xi, ki, Some(b), (stride, stride), (pad, pad), groups)?;
                project(g, y, &proj)
            }),
        )
    });
}

#[test]
fn conv1d_matches_differences() {
    check("conv1d", &|r| {
        let (c, o, l) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(3..=8));
        let x = rand_t(r, &[c, l]);
        let kernel = rand_t(r, &[o, c, 3]);
        let proj = rand_t(r, &[o, l]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let k = g.constant(kernel.clone());
                let y = g.conv1d(v, k, None, 1, 1)?;
                project(g, y, &proj)
            }),
        )
    });
}

#[test]
fn group_norm_matches_differences() {
    check("group_norm", &|r| {
        let groups = r.gen_range(1..=2);
        let c = groups * r.gen_range(1..=2);
        let (h, w) = (r.gen_range(1..=3), r.gen_range(2..=3));
        let x = rand_t(r, &[c, h, w]);
        let gamma = rand_t(r, &[c]);
        let beta = rand_t(r, &[c]);
        let proj = rand_t(r, &[c, h, w]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let y = g.group_norm(v, groups, ga, be, 1e-5)?;
                project(g, y, &proj)
            }),
        )
    });
}

#[test]
fn layer_norm_matches_differences() {
    check("layer_norm", &|r| {
        let (n, d) = (r.gen_range(1..=3), r.gen_range(2..=6));
        let x = rand_t(r, &[n, d]);
        let gamma = rand_t(r, &[d]);
        let beta = rand_t(r, &[d]);
        let proj = rand_t(r, &[n, d]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let y = g.layer_norm(v, ga, be, 1e-5)?;
                project(g, y, &proj)
            }),
        )
    });
}

#[test]
fn pools_match_differences() {
    check("pools", &|r| {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = rand_t(r, &[c, h, w]);
        let pw = rand_t(r, &[c, 1, w]);
        let ph = rand_t(r, &[c, h, 1]);
        let pg = rand_t(r, &[c]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let a = g.directional_avg_pool(v, 1)?;
                let a = project(g, a, &pw)?;
                let b = g.directional_avg_pool(v, 2)?;
                let b = project(g, b, &ph)?;
                let m = g.global_avg_pool(v)?;
                let m = project(g, m, &pg)?;
                let s = g.add(a, b)?;
                g.add(s, m)
            }),
        )
    });
}

#[test]
fn wavelet_ops_match_differences() {
    check("dwt/idwt", &|r| {
        let (c, h, w) = (r.gen_range(1..=2), r.gen_range(2..=7), r.gen_range(2..=7));
        let x = rand_t(r, &[c, h, w]);
        let p2 = rand_t(r, &[4, c, h.div_ceil(2), w.div_ceil(2)]);
        let p1 = rand_t(r, &[c * h, w]);
        (
            x,
            Box::new(move |g: &mut Graph, v| {
                let bands = g.dwt2d(v)?;
                let a = project(g, bands, &p2)?;
                let scaled = g.mul(bands, bands)?;
                let back = g.idwt2d(scaled, h, w)?;
                let flat = g.reshape(back, &[c * h, w])?;
                let b1 = g.dwt1d(flat)?;
                let rec = g.idwt1d(b1, w)?;
                let b = project(g, rec, &p1)?;
                g.add(a, b)
            }),
        )
    });
}

fn grouped_reference(x: &Tensor, w: &Tensor, groups: usize) -> Tensor {
    let (c, o) = (x.shape()[0], w.shape()[0]);
    let outs: Vec<Tensor> = (0..groups)
        .map(|gi| {
            let xs = tensor::slice(x, 0, gi * c / groups, c / groups).unwrap();
            let ws = tensor::slice(w, 0, gi * o / groups, o / groups).unwrap();
            tensor::conv2d(&xs, &ws, None, (1, 1), (1, 1), 1).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor> = outs.iter().collect();
    tensor::concat(&refs, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouped_conv_equals_sliced_convs(seed in any::<u64>(), groups in 1usize..=4, cg in 1usize..=3, og in 1usize..=2, h in 3usize..8, w in 3usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut r, &[groups * cg, h, w]);
        let k = rand_t(&mut r, &[groups * og, cg, 3, 3]);
        let y = tensor::conv2d(&x, &k, None, (1, 1), (1, 1), groups).unwrap();
        prop_assert_eq!(y, grouped_reference(&x, &k, groups));
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), a in 1usize..6, b in 1usize..9, scale in 0.1f64..50.0, axis in 0usize..2) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut r, &[a, b]).scale(scale);
        let s = tensor::softmax(&x, axis).unwrap();
        let sums = tensor::sum_axis(&s, axis, false).unwrap();
        for v in sums.data() {
            prop_assert!((v - 1.0).abs() <= 1e-12, "{}", v);
        }
    }

    #[test]
    fn primitives_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_t(&mut r, &[2, 5, 6]);
            let k = rand_t(&mut r, &[4, 1, 3, 3]);
            let mut g = Graph::new();
            let xv = g.param(x);
            let kv = g.param(k);
            let y = g.conv2d(xv, kv, None, (1, 1), (1, 1), 2).unwrap();
            let s = g.softmax(y, 0).unwrap();
            let b = g.dwt2d(s).unwrap();
            let l = g.mean(b).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).clone(), grads.get(xv).cloned(), grads.get(kv).cloned())
        };
        prop_assert_eq!(run(), run());
    }
}
