use fewt::analysis::{alpha_csv, cam_from, count_flops, count_params, export_channel_attention, grad_cam, grad_cam_graph, CamLayer, CamTarget, Module};
use fewt::dataset::{generate_toy_task, Episode, ToyConfig};
use fewt::graph::Graph;
use fewt::policy::{train, Policy, PolicyConfig, Schedule, TrainConfig, Variant};
use fewt::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Grad-CAM of `mean(x[0])` taken at `x` itself.
fn gap_channel_zero_cam(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let mut g = Graph::new();
    let layer = g.param(x.clone());
    let ch = g.slice(layer, 0, 0, 1).unwrap();
    let target = g.mean(ch).unwrap();
    grad_cam_graph(&g, target, layer, s[1], s[2]).unwrap()
}

/// `ReLU(x[0])` min-max scaled.
fn closed_form(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let r: Vec<f64> = x.data()[..s[1] * s[2]].iter().map(|v| v.max(0.0)).collect();
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    r.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[test]
fn linear_model_cam_matches_closed_form_exactly() {
    for (seed, (h, w)) in [(8, 8), (16, 8), (4, 16), (32, 32)].into_iter().enumerate() {
        let x = random(&[3, h, w], seed as u64);
        assert_eq!(gap_channel_zero_cam(&x).data(), closed_form(&x).as_slice());
    }
}

#[test]
fn linear_model_cam_is_close_on_any_size() {
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (r.gen_range(2..20), r.gen_range(2..20));
        let x = random(&[2, h, w], seed);
        let got = gap_channel_zero_cam(&x);
        for (a, b) in got.data().iter().zip(closed_form(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn hot_pixel_is_the_argmax() {
    for (i, j) in [(0, 0), (3, 5), (6, 1), (7, 7)] {
        let mut x = Tensor::zeros(&[2, 8, 8]);
        x.data_mut()[i * 8 + j] = 1.0;
        x.data_mut()[64 + 2] = 5.0;
        let cam = gap_channel_zero_cam(&x);
        assert_eq!(cam.argmax(), i * 8 + j);
        assert_eq!((cam.min(), cam.max()), (0.0, 1.0));
    }
}

#[test]
fn zero_gradient_gives_zero_map() {
    let x = random(&[2, 5, 6], 3);
    let mut g = Graph::new();
    let layer = g.param(x);
    let dead = g.scale(layer, 0.0).unwrap();
    let target = g.mean(dead).unwrap();
    assert_eq!(grad_cam_graph(&g, target, layer, 5, 6).unwrap(), Tensor::zeros(&[5, 6]));
}

#[test]
fn disconnected_layer_is_rejected() {
    let mut g = Graph::new();
    let layer = g.param(random(&[1, 3, 3], 0));
    let other = g.param(random(&[4], 1));
    let target = g.mean(other).unwrap();
    assert!(grad_cam_graph(&g, target, layer, 3, 3).is_err());
}

#[test]
fn cam_rejects_mismatched_gradients() {
    assert!(cam_from(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 2, 3]), 2, 2).is_err());
}

#[test]
fn policy_heatmaps_are_unit_range() {
    let e = &generate_toy_task(2, 1, &ToyConfig::default()).unwrap()[0];
    let p = Policy::new(PolicyConfig::default(), 1).unwrap();
    for stage in 0..3 {
        for target in [CamTarget::ChunkMean, CamTarget::ActionMean(0)] {
            let hm = grad_cam(&p, &e.records[10].obs, target, CamLayer { view: 0, stage }, "e0t10").unwrap();
            assert_eq!(hm.values.shape(), &[24, 32]);
            assert!(hm.values.min() >= 0.0 && hm.values.max() <= 1.0);
            assert!(hm.values.max() == 1.0 || hm.values.max() == 0.0);
        }
    }
    assert!(grad_cam(&p, &e.records[0].obs, CamTarget::ChunkMean, CamLayer { view: 0, stage: 3 }, "x").is_err());
}

#[test]
fn channel_export_is_weighted_encoder_output() {
    let obs: Vec<_> = generate_toy_task(5, 1, &ToyConfig::default()).unwrap()[0].records[..3].iter().map(|r| r.obs.clone()).collect();
    let p = Policy::new(PolicyConfig::default(), 4).unwrap();
    for ex in export_channel_attention(&p, &obs).unwrap() {
        assert_eq!(ex.with_ts_dwt.shape(), &[39, 64]);
        assert_eq!(ex.without_ts_dwt.shape(), &[39, 64]);
        for (i, (a, b)) in ex.with_ts_dwt.data().iter().zip(ex.without_ts_dwt.data()).enumerate() {
            assert_eq!(*a, b * ex.weights.data()[i % 64]);
        }
    }
    let mut z = Policy::new(PolicyConfig::default(), 4).unwrap();
    let ts = z.layout.ts_dwt.unwrap();
    ts.zero_fc(&mut z.store);
    for ex in export_channel_attention(&z, &obs).unwrap() {
        assert!(ex.ratio().data().iter().zip(ex.without_ts_dwt.data()).all(|(r, b)| *b == 0.0 || *r == 0.5));
    }
    let base = Policy::new(PolicyConfig::default().with_variant(Variant::FeEma), 4).unwrap();
    assert!(export_channel_attention(&base, &obs).is_err());
}

#[test]
fn alpha_log_starts_at_half() {
    let eps = generate_toy_task(0, 2, &ToyConfig::default()).unwrap();
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut p = Policy::new(PolicyConfig::default(), 0).unwrap();
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::default() };
    let log = train(&mut p, &refs, &[], &cfg, &Schedule { steps: 3, eval_every: 0, val_stride: 32 }, 0).unwrap();
    assert_eq!(log.alphas.len(), 3 * p.fe_ema_blocks());
    for row in log.alphas.iter().filter(|r| r.step == 0) {
        assert_eq!((row.stat.mean, row.stat.min, row.stat.max), (0.5, 0.5, 0.5));
    }
    assert!(log.alphas.iter().all(|r| r.stat.min > 0.0 && r.stat.max < 1.0));
    assert_eq!(alpha_csv(&log.alphas).lines().count(), 1 + log.alphas.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_flops_scale_with_area(cin in 1usize..8, cout in 1usize..8, h in 1usize..20, w in 1usize..20, m in 1usize..4) {
        let conv = Module::parse("c", &format!("conv2d in={cin} out={cout} k=3 pad=1")).unwrap();
        let base = count_flops(&conv, &[cin, h, w]).unwrap();
        prop_assert_eq!(count_flops(&conv, &[cin, m * h, w]).unwrap(), m as u64 * base);
    }

    #[test]
    fn flops_add_over_composition(a in 1usize..10, b in 1usize..10, c in 1usize..10) {
        let first = format!("linear in={a} out={b}");
        let second = format!("linear in={b} out={c}");
        let both = Module::parse("ab", &format!("{first}\nsigmoid\n{second}")).unwrap();
        let sum = count_flops(&Module::parse("a", &format!("{first}\nsigmoid")).unwrap(), &[a]).unwrap()
            + count_flops(&Module::parse("b", &second).unwrap(), &[b]).unwrap();
        prop_assert_eq!(count_flops(&both, &[a]).unwrap(), sum);
        prop_assert_eq!(count_params(&both), (a * b + b + b * c + c) as u64);
    }
}
