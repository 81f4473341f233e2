use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sclera_core::autonn::{Graph, ParamStore, Tensor};
use sclera_core::imgproc::{BinaryMask, GrayImage};
use sclera_core::model::*;
use sclera_core::saliency::*;
use sclera_core::synthcohort::View;

fn tiny(variant: Variant, size: usize, fusion: usize) -> ModelConfig {
    ModelConfig {
        input_size: size,
        branch_channels: vec![2, 2, 2],
        embed_dim: 2,
        fusion_dim: fusion,
        fusion_layers: 1,
        fusion_heads: 1,
        lambda_reg: 1.0,
        variant,
    }
}

fn model(config: ModelConfig, params: ParamStore) -> TrainedModel {
    TrainedModel { config, params, scaler: GlucoseScaler { mean: 140.0, sd: 50.0 }, mask: None }
}

fn random_input(seed: u64, size: usize) -> MultiViewInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = (0..5)
        .map(|_| GrayImage::new(size, size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    MultiViewInput::new(views).unwrap()
}

fn set(p: &mut ParamStore, name: &str, values: &[f64]) {
    p.get_mut(name).unwrap().data_mut().copy_from_slice(values);
}

/// Logit 0 = c · mean(maxpool(A_1)): only channel 1 of the last block
/// reaches the head.
fn single_channel_model(c: f64) -> TrainedModel {
    let cfg = tiny(Variant::SingleView, 16, 2);
    let mut p = build_model(&cfg, 6).unwrap();
    set(&mut p, "branch0.conv2.bias", &[0.0, 0.3]);
    set(&mut p, "branch0.embed.weight", &[0.0, 0.0, 1.0, 0.0]);
    set(&mut p, "branch0.embed.bias", &[0.0, 0.0]);
    set(&mut p, "fusion.dense.weight", &[1.0, 0.0, 0.0, 0.0]);
    set(&mut p, "fusion.dense.bias", &[0.0, 0.0]);
    set(&mut p, "head.class.weight", &[c, 0.0, 0.0, 0.0, 0.0, 0.0]);
    model(cfg, p)
}

#[test]
fn single_channel_case_reproduces_the_channel() {
    let m = single_channel_model(2.5);
    let x = random_input(1, 16);
    let (acts, _, _) = layer_gradients(&m, &x, Target::Class(0), View::Straight, 2).unwrap();
    let hw = 16;
    let ch1 = &acts.data()[hw..2 * hw];
    let max = ch1.iter().cloned().fold(0.0, f64::max);
    assert!(max > 0.0);
    for method in Method::ALL {
        let h = class_activation_map(&m, &x, Target::Class(0), View::Straight, 2, method).unwrap();
        assert_eq!((h.width, h.height, h.target_class, h.all_zero), (4, 4, 0, false));
        for (a, b) in h.values.iter().zip(ch1) {
            assert!((a - b / max).abs() < 1e-12, "{method}: {a} vs {}", b / max);
        }
    }
}

#[test]
fn zero_head_row_gives_flagged_empty_map() {
    let m = single_channel_model(2.5);
    let x = random_input(2, 16);
    for method in Method::ALL {
        let h = class_activation_map(&m, &x, Target::Class(1), View::Straight, 2, method).unwrap();
        assert!(h.all_zero);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }
}

/// Logit `target` recomputed from a last-block activation tensor.
fn logit_from_activation(p: &ParamStore, a: &Tensor, target: usize) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(a.clone());
    let x = g.max_pool2(x).unwrap();
    let x = g.global_avg_pool(x).unwrap();
    let dense = |g: &mut Graph, x, w: &str, b: &str| {
        let w = g.param(p, w).unwrap();
        let b = g.param(p, b).unwrap();
        g.affine(x, w, b).unwrap()
    };
    let e = dense(&mut g, x, "branch0.embed.weight", "branch0.embed.bias");
    let f = dense(&mut g, e, "fusion.dense.weight", "fusion.dense.bias");
    let f = g.relu(f);
    let l = dense(&mut g, f, "head.class.weight", "head.class.bias");
    g.value(l).data()[target]
}

/// Grad-CAM++ map from explicit second and third differences of
/// `exp(logit)` with respect to each activation.
fn finite_difference_gradcampp(p: &ParamStore, a: &Tensor, target: usize) -> (Vec<f64>, Vec<f64>) {
    let s0 = logit_from_activation(p, a, target);
    let y = |i: usize, d: f64| {
        let mut t = a.clone();
        t.data_mut()[i] += d;
        (logit_from_activation(p, &t, target) - s0).exp()
    };
    let h = 1e-3;
    let (c, hw) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
    let mut alpha = vec![0.0; c * hw];
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let sum_a: f64 = a.data()[k * hw..(k + 1) * hw].iter().sum();
        let mut w = 0.0;
        for j in 0..hw {
            let i = k * hw + j;
            let (p1, m1, p2, m2, y0) = (y(i, h), y(i, -h), y(i, 2.0 * h), y(i, -2.0 * h), y(i, 0.0));
            let g = (p1 - m1) / (2.0 * h) / y0;
            let d2 = (p1 - 2.0 * y0 + m1) / (h * h);
            let d3 = (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * h * h * h);
            let den = 2.0 * d2 + sum_a * d3;
            alpha[i] = if den.abs() > 1e-12 { d2 / den } else { 0.0 };
            w += alpha[i] * g.max(0.0);
        }
        for j in 0..hw {
            cam[j] += w * a.data()[k * hw + j];
        }
    }
    let max = cam.iter().cloned().fold(0.0, f64::max);
    let cam = if max > 0.0 { cam.iter().map(|v| v.max(0.0) / max).collect() } else { vec![0.0; hw] };
    (alpha, cam)
}

#[test]
fn gradcampp_matches_finite_difference_oracle() {
    let cfg = tiny(Variant::SingleView, 16, 3);
    let mut p = build_model(&cfg, 41).unwrap();
    // strictly positive blocks: no relu patch can leave tied pool windows
    for b in ["branch0.conv0.bias", "branch0.conv1.bias", "branch0.conv2.bias"] {
        set(&mut p, b, &[1.0, 1.0]);
    }
    let m = model(cfg.clone(), p.clone());
    let mut nonempty = 0;
    for seed in 0..3 {
        let x = random_input(seed, 16);
        let mut g = Graph::new();
        let nodes = forward(&mut g, &p, &cfg, &[&x], None).unwrap();
        let a = g.value(nodes.feature_maps[0][2]).clone();
        for target in 0..3 {
            let s = logit_from_activation(&p, &a, target);
            assert!((s - g.value(nodes.logits).data()[target]).abs() < 1e-12);
            let (alpha, cam) = finite_difference_gradcampp(&p, &a, target);

            let (acts, grads, _) = layer_gradients(&m, &x, Target::Class(target), View::Straight, 2).unwrap();
            let hw = 16;
            for k in 0..2 {
                let r = k * hw..(k + 1) * hw;
                let al = gradcampp_alpha(&acts.data()[r.clone()], &grads.data()[r]);
                for j in 0..hw {
                    if grads.data()[k * hw + j] > 0.0 {
                        let want = alpha[k * hw + j];
                        assert!((al[j] - want).abs() < 1e-4, "alpha {k},{j}: {} vs {want}", al[j]);
                    }
                }
            }
            let heat = grad_cam_pp(&m, &x, Target::Class(target), View::Straight, 2).unwrap();
            nonempty += !heat.all_zero as usize;
            for (u, v) in heat.values.iter().zip(&cam) {
                assert!((u - v).abs() < 1e-4, "seed {seed} class {target}: {u} vs {v}");
            }
        }
    }
    assert!(nonempty >= 2, "{nonempty}");
}

#[test]
fn invalid_layers_and_targets_are_rejected() {
    let cfg = tiny(Variant::SingleView, 16, 2);
    let m = model(cfg.clone(), build_model(&cfg, 0).unwrap());
    let x = random_input(0, 16);
    assert!(matches!(grad_cam(&m, &x, Target::Predicted, View::Up, 2), Err(SaliencyError::InvalidLayer(_))));
    assert!(matches!(grad_cam(&m, &x, Target::Predicted, View::Straight, 3), Err(SaliencyError::InvalidLayer(_))));
    assert!(matches!(grad_cam(&m, &x, Target::Class(3), View::Straight, 0), Err(SaliencyError::InvalidTarget(3))));
    let h = grad_cam(&m, &x, Target::Predicted, View::Straight, 0).unwrap();
    assert_eq!((h.width, h.height), (16, 16));
}

#[test]
fn predicted_target_uses_argmax() {
    let cfg = tiny(Variant::Full, 16, 4);
    let p = build_model(&cfg, 3).unwrap();
    let m = model(cfg.clone(), p.clone());
    let x = random_input(3, 16);
    let probs = predict(&m, &[&x]).unwrap().remove(0).class_probs;
    let arg = (0..3).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
    let a = grad_cam(&m, &x, Target::Predicted, View::Left, 2).unwrap();
    let b = grad_cam(&m, &x, Target::Class(arg), View::Left, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.view, View::Left);
}

#[test]
fn colormap_endpoints_and_midpoint() {
    assert_eq!(colormap(0.0), [0, 0, 255]);
    assert_eq!(colormap(0.5), [128, 0, 128]);
    assert_eq!(colormap(1.0), [255, 0, 0]);
}

fn heatmap(width: usize, height: usize, values: Vec<f64>) -> Heatmap {
    Heatmap { width, height, values, view: View::Straight, target_class: 2, all_zero: false }
}

#[test]
fn overlay_blend_identities() {
    let base = GrayImage::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
    let h = heatmap(2, 2, vec![0.0, 1.0, 0.25, 0.75]);
    let gray = overlay(&h, &base, 0.0);
    assert_eq!(gray.channels(), 3);
    for (px, g) in gray.data().chunks(3).zip(base.data()) {
        let v = (g * 255.0).round() as u8;
        assert_eq!(px, [v, v, v]);
    }
    let pure = overlay(&h, &base, 1.0);
    for (px, v) in pure.data().chunks(3).zip(h.upsample(4, 4)) {
        assert_eq!(px, colormap(v));
    }
    assert_eq!(pure.pixel(0, 0), [0, 0, 255]);
}

#[test]
fn upsampling_is_identity_at_native_size_and_keeps_constants() {
    let h = heatmap(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(h.upsample(3, 2), h.values);
    let c = heatmap(2, 2, vec![0.4; 4]);
    assert!(c.upsample(7, 5).iter().all(|v| (v - 0.4).abs() < 1e-15));
    assert_eq!(h.to_csv(), "0.1,0.2,0.3\n0.4,0.5,0.6\n");
}

#[test]
fn vessel_ratio_compares_means() {
    let h = heatmap(2, 2, vec![1.0, 0.25, 0.25, 0.25]);
    let mask = BinaryMask { width: 2, height: 2, bits: vec![true, false, false, false] };
    assert!((vessel_ratio(&h, &mask).unwrap() - 4.0).abs() < 1e-12);
    let none = BinaryMask { width: 2, height: 2, bits: vec![false; 4] };
    assert_eq!(vessel_ratio(&h, &none), None);
}

#[test]
fn method_names_parse() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn alpha_stays_in_unit_interval(
        acts in prop::collection::vec(0.0f64..5.0, 1..20),
        grads in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        for a in gradcampp_alpha(&acts, &grads[..acts.len()]) {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn maps_are_normalized_or_flagged(seed in 0u64..500, vi in 0usize..4, block in 0usize..3, pp in any::<bool>()) {
        let cfg = tiny(Variant::ALL[vi], 16, 4);
        let m = model(cfg.clone(), build_model(&cfg, seed).unwrap());
        let x = random_input(seed, 16);
        let method = if pp { Method::GradCamPp } else { Method::GradCam };
        let h = class_activation_map(&m, &x, Target::Predicted, View::Straight, block, method).unwrap();
        prop_assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = h.values.iter().cloned().fold(0.0, f64::max);
        let expected = if h.all_zero { 0.0 } else { 1.0 };
        prop_assert_eq!(max, expected);
    }

    #[test]
    fn maps_ignore_constant_logit_shift(seed in 0u64..500, shift in -20.0f64..20.0) {
        let cfg = tiny(Variant::Multiview, 16, 4);
        let p = build_model(&cfg, seed).unwrap();
        let mut q = p.clone();
        for b in q.get_mut("head.class.bias").unwrap().data_mut() {
            *b += shift;
        }
        let x = random_input(seed, 16);
        for method in Method::ALL {
            let a = class_activation_map(&model(cfg.clone(), p.clone()), &x, Target::Predicted, View::Down, 2, method).unwrap();
            let b = class_activation_map(&model(cfg.clone(), q.clone()), &x, Target::Predicted, View::Down, 2, method).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
