use fewt::tensor::Tensor;
use fewt::wavelet::{self, half_len, max_levels};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signal(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Replicate-padded sample.
fn at(x: &[f64], i: usize) -> f64 {
    x[i.min(x.len() - 1)]
}

/// Direct 2x2-block evaluation for one `(H,W)` channel: `[cA, cH, cV, cD]`.
fn block_oracle(x: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let px = |r: usize, c: usize| x[r.min(h - 1) * w + c.min(w - 1)];
    let mut out: [Vec<f64>; 4] = Default::default();
    for i in 0..half_len(h) {
        for j in 0..half_len(w) {
            let (a, b) = (px(2 * i, 2 * j), px(2 * i, 2 * j + 1));
            let (c, d) = (px(2 * i + 1, 2 * j), px(2 * i + 1, 2 * j + 1));
            out[0].push((a + b + c + d) / 2.0);
            out[1].push((a + b - c - d) / 2.0);
            out[2].push((a - b + c - d) / 2.0);
            out[3].push((a - b - c + d) / 2.0);
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn flat1d(s: &wavelet::SubbandSet1D) -> Vec<f64> {
    let mut v = s.approx.data().to_vec();
    for d in &s.details {
        v.extend_from_slice(d.data());
    }
    v
}

fn flat2d(p: &wavelet::Pyramid2D) -> Vec<f64> {
    let mut v = p.approx().data().to_vec();
    for l in &p.levels {
        for b in [&l.horizontal, &l.vertical, &l.diagonal] {
            v.extend_from_slice(b.data());
        }
    }
    v
}

#[test]
fn pairwise_oracle_on_fixed_signal() {
    let s = wavelet::dwt1d(&Tensor::from_vec(vec![4.0, 2.0, 1.0, 3.0]), 1).unwrap();
    let r2 = 2f64.sqrt();
    assert!(close(s.approx.data(), &[3.0 * r2, 2.0 * r2], 1e-15));
    assert!(close(s.details[0].data(), &[r2, -r2], 1e-15));
}

#[test]
fn block_oracle_on_fixed_map() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = wavelet::dwt2d(&x).unwrap();
    let got: Vec<f64> = s.bands().iter().map(|b| b.data()[0]).collect();
    assert!(close(&got, &[5.0, -2.0, -1.0, 0.0], 1e-15));
    assert!((s.energy() - 30.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn one_level_matches_pairwise_oracle(seed in any::<u64>(), n in 2usize..200) {
        let x = signal(seed, &[n]);
        let s = wavelet::dwt1d(&x, 1).unwrap();
        let d = x.data();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let a: Vec<f64> = (0..half_len(n)).map(|k| r * (at(d, 2 * k) + at(d, 2 * k + 1))).collect();
        let c: Vec<f64> = (0..half_len(n)).map(|k| r * (at(d, 2 * k) - at(d, 2 * k + 1))).collect();
        prop_assert!(close(s.approx.data(), &a, 1e-14));
        prop_assert!(close(s.details[0].data(), &c, 1e-14));
    }

    #[test]
    fn two_dim_matches_block_oracle(seed in any::<u64>(), c in 1usize..4, h in 2usize..20, w in 2usize..20) {
        let x = signal(seed, &[c, h, w]);
        let s = wavelet::dwt2d(&x).unwrap();
        let per = half_len(h) * half_len(w);
        for ch in 0..c {
            let o = block_oracle(&x.data()[ch * h * w..(ch + 1) * h * w], h, w);
            for (band, want) in s.bands().iter().zip(&o) {
                prop_assert_eq!(band.shape(), &[c, half_len(h), half_len(w)][..]);
                prop_assert!(close(&band.data()[ch * per..(ch + 1) * per], want, 1e-14));
            }
        }
    }

    #[test]
    fn one_dim_round_trip_and_shape_law(seed in any::<u64>(), n in 2usize..=256, depth in 1usize..=8) {
        let levels = depth.min(max_levels(n));
        let x = signal(seed, &[n]);
        let s = wavelet::dwt1d(&x, levels).unwrap();
        let mut len = n;
        for d in &s.details {
            len = half_len(len);
            prop_assert_eq!(d.len(), len);
        }
        prop_assert_eq!(s.approx.len(), len);
        prop_assert!(wavelet::idwt1d(&s).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn one_dim_energy_when_aligned(seed in any::<u64>(), levels in 1usize..=6, m in 1usize..=8) {
        let n = m << levels;
        let x = signal(seed, &[n]);
        let s = wavelet::dwt1d(&x, levels).unwrap();
        prop_assert_eq!(s.coefficient_count(), n);
        prop_assert!((s.energy() - x.sq_norm()).abs() < 1e-9);
    }

    #[test]
    fn two_dim_round_trip_and_energy(seed in any::<u64>(), c in 1usize..=3, h in 2usize..=64, w in 2usize..=64, depth in 1usize..=3) {
        let levels = depth.min(max_levels(h)).min(max_levels(w));
        let x = signal(seed, &[c, h, w]);
        let p = wavelet::dwt2d_levels(&x, levels).unwrap();
        prop_assert!(wavelet::idwt2d_levels(&p).unwrap().max_abs_diff(&x) < 1e-9);
        if h % (1 << levels) == 0 && w % (1 << levels) == 0 {
            prop_assert!((p.energy() - x.sq_norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn transforms_are_linear(seed in any::<u64>(), n in 2usize..100, h in 2usize..17, w in 2usize..17, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, y) = (signal(seed, &[n]), signal(seed ^ 1, &[n]));
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let levels = max_levels(n);
        let (fx, fy, fm) = (
            flat1d(&wavelet::dwt1d(&x, levels).unwrap()),
            flat1d(&wavelet::dwt1d(&y, levels).unwrap()),
            flat1d(&wavelet::dwt1d(&mix, levels).unwrap()),
        );
        let want: Vec<f64> = fx.iter().zip(&fy).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(&fm, &want, 1e-12));

        let (x, y) = (signal(seed, &[2, h, w]), signal(seed ^ 2, &[2, h, w]));
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let levels = max_levels(h).min(max_levels(w)).min(2);
        let (fx, fy, fm) = (
            flat2d(&wavelet::dwt2d_levels(&x, levels).unwrap()),
            flat2d(&wavelet::dwt2d_levels(&y, levels).unwrap()),
            flat2d(&wavelet::dwt2d_levels(&mix, levels).unwrap()),
        );
        let want: Vec<f64> = fx.iter().zip(&fy).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(&fm, &want, 1e-12));
    }
}
