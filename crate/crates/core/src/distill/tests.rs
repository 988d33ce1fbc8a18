use super::*;
use crate::config::RunConfig;
use crate::io::{Image, LabeledDataset};
use crate::nn::{finite_diff_check, forward_convnet, ConvNetConfig, ConvNetParams, Graph, Output, Tensor};
use crate::palette::{condense_with_map, PaletteNetParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `classes × per_class` 8×8 RGB images; each class has its own base color.
fn toy_dataset(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let class = i % classes;
        let base = [40 + 60 * class as i32, 200 - 50 * class as i32, 128];
        let data = (0..3 * 64)
            .map(|j| (base[j / 64] + r.gen_range(-30..=30)).clamp(0, 255) as u8)
            .collect();
        images.push(Image::new(3, 8, 8, data).unwrap());
        labels.push(class);
    }
    LabeledDataset::from_images(&images, labels, classes).unwrap()
}

fn toy_config(k: usize, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.distill.ipc = 2;
    cfg.distill.iterations = iterations;
    cfg.distill.real_batch = 4;
    cfg.distill.net_width = 4;
    cfg.distill.net_depth = 2;
    cfg.distill.log_every = 1;
    cfg.distill.zca = false;
    cfg.palette.k = k;
    cfg.palette.hidden = 8;
    cfg.eval.epochs = 5;
    cfg.eval.seeds = 2;
    cfg.eval.net_width = 4;
    cfg.eval.net_depth = 2;
    cfg.eval.batch = 8;
    cfg
}

fn small_net(seed: u64) -> ConvNetParams<f64> {
    let cfg = ConvNetConfig {
        channels: 3,
        height: 4,
        width: 4,
        depth: 1,
        net_width: 3,
        classes: 2,
    };
    ConvNetParams::random(cfg, &mut rng(seed)).unwrap()
}

fn random_batch(r: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let v: Vec<f64> = (0..n * 48).map(|_| r.gen_range(0.0..1.0)).collect();
    Tensor::from_f64(&[n, 3, 4, 4], &v).unwrap()
}

#[test]
fn dm_loss_is_zero_for_identical_batches() {
    let net = small_net(1);
    let mut r = rng(2);
    let batches = vec![random_batch(&mut r, 3), random_batch(&mut r, 3)];
    assert_eq!(dm_task_loss(&batches, &batches, &net).unwrap(), 0.0);
}

#[test]
fn dm_loss_single_sample_is_squared_feature_distance() {
    let net = small_net(3);
    let mut r = rng(4);
    let (x, b) = (random_batch(&mut r, 1), random_batch(&mut r, 1));
    let fx = forward_convnet(&net, &x, Output::Features).unwrap();
    let fb = forward_convnet(&net, &b, Output::Features).unwrap();
    let direct: f64 = fx.data().iter().zip(fb.data()).map(|(a, c)| (a - c) * (a - c)).sum();
    let loss = dm_task_loss(&[x], &[b], &net).unwrap();
    assert!((loss - direct).abs() <= 1e-12 * direct.max(1.0));
}

#[test]
fn dm_loss_rejects_empty_class_batch() {
    let net = small_net(5);
    let mut r = rng(6);
    let empty = Tensor::<f64>::zeros(&[0, 3, 4, 4]);
    assert!(dm_task_loss(&[random_batch(&mut r, 2)], &[empty], &net).is_err());
}

#[test]
fn graph_gap_matches_numeric_loss() {
    let net = small_net(7);
    let mut r = rng(8);
    let real = vec![random_batch(&mut r, 4), random_batch(&mut r, 4)];
    let syn = vec![random_batch(&mut r, 2), random_batch(&mut r, 2)];
    let numeric = dm_task_loss(&real, &syn, &net).unwrap();
    let means: Vec<f64> = real.iter().flat_map(|t| mean_features(&net, t, &[0, 1, 2, 3]).unwrap()).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::stack(&syn).unwrap().reshape(&[4, 3, 4, 4]).unwrap());
    let vars = net.bind(&mut g, false);
    let f = vars.features(&mut g, x).unwrap();
    let fd = g.shape(f)[1];
    let l = class_mean_gap(&mut g, f, 2, Tensor::from_f64(&[2, fd], &means).unwrap()).unwrap();
    assert!((g.value(l).item() - numeric).abs() <= 1e-10 * numeric.max(1.0));
}

fn dm_gradient_case(seed: u64, through_palette: bool) -> f64 {
    let net = small_net(seed);
    let mut r = rng(seed + 100);
    let real = vec![random_batch(&mut r, 3), random_batch(&mut r, 3)];
    let means: Vec<f64> = real.iter().flat_map(|t| mean_features(&net, t, &[0, 1, 2]).unwrap()).collect();
    let syn = random_batch(&mut r, 4);
    let pal = PaletteNetParams::<f64>::random(3, 4, 6, 1.0, &mut r).unwrap();
    let f = |t: &Tensor<f64>| -> crate::Result<(f64, Tensor<f64>)> {
        let mut g = Graph::new();
        let s = g.param(t.clone());
        let x = if through_palette {
            let vars = pal.bind(&mut g, false);
            let m = vars.prob_map(&mut g, s)?;
            condense_with_map(&mut g, s, m)?.soft_reconstruction
        } else {
            s
        };
        let vars = net.bind(&mut g, false);
        let feats = vars.features(&mut g, x)?;
        let fd = g.shape(feats)[1];
        let l = class_mean_gap(&mut g, feats, 2, Tensor::from_f64(&[2, fd], &means)?)?;
        let v = g.value(l).item();
        let mut grads = g.backward(l)?;
        Ok((v, grads.take_or_zeros(s, t.shape())))
    };
    let check = finite_diff_check(f, &syn, 1e-6).unwrap();
    check.max_rel_error
}

#[test]
fn dm_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let e = dm_gradient_case(seed, false);
        assert!(e <= 1e-5, "seed {seed}: {e}");
    }
}

#[test]
fn dm_gradient_through_soft_palette_matches_finite_differences() {
    for seed in 0..4 {
        let e = dm_gradient_case(seed, true);
        assert!(e <= 1e-5, "seed {seed}: {e}");
    }
}

fn first_two(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    ds.class_indices().into_iter().map(|m| m[..2].to_vec()).collect()
}

fn run(ds: &LabeledDataset, cfg: &RunConfig) -> DistillOutput {
    let prep = Prepared::new(ds, cfg).unwrap();
    distill_run(&prep, ds, &first_two(ds), cfg, true).unwrap()
}

#[test]
fn zero_iterations_return_the_initialization() {
    let ds = toy_dataset(3, 6, 1);
    let out = run(&ds, &toy_config(4, 0));
    let init = SyntheticSet::from_indices(&ds, &first_two(&ds)).unwrap();
    assert_eq!(out.set.images, init.images);
    assert!(out.log.is_empty());
}

#[test]
fn runs_are_deterministic_and_stay_in_unit_range() {
    let ds = toy_dataset(3, 6, 2);
    let mut cfg = toy_config(4, 4);
    cfg.distill.image_lr = 50.0;
    let a = run(&ds, &cfg);
    let b = run(&ds, &cfg);
    assert_eq!(a.set.images, b.set.images);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    assert!(a.set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.log.iter().all(|r| r.task_loss.is_finite() && r.wall_ms == 0));
}

#[test]
fn auxiliary_losses_do_not_move_the_images() {
    let ds = toy_dataset(2, 6, 3);
    let mut with_aux = toy_config(4, 1);
    with_aux.distill.image_lr = 5.0;
    let mut without = with_aux.clone();
    without.palette.alpha = 0.0;
    without.palette.beta = 0.0;
    without.palette.gamma = 0.0;
    let a = run(&ds, &with_aux);
    let b = run(&ds, &without);
    assert_eq!(a.set.images, b.set.images);
    assert_ne!(a.set.palette, b.set.palette);
    let init = SyntheticSet::from_indices(&ds, &first_two(&ds)).unwrap();
    assert_ne!(a.set.images, init.images);
}

#[test]
fn full_palette_width_bypasses_the_network() {
    let ds = toy_dataset(2, 6, 4);
    let out = run(&ds, &toy_config(256, 2));
    assert!(out.set.palette.is_none());
    assert!(out.log.iter().all(|r| r.l_m == 0.0 && r.l_a == 0.0));
    let q = out.set.condense().unwrap();
    let back: Vec<u8> = q.iter().flat_map(|q| q.reconstruct().data).collect();
    let direct: Vec<u8> = out.set.to_images().unwrap().into_iter().flat_map(|im| im.data).collect();
    assert_eq!(back, direct);
}

#[test]
fn synthetic_batch_only_moves_sampled_rows() {
    let ds = toy_dataset(2, 6, 5);
    let mut cfg = toy_config(256, 1);
    cfg.distill.synthetic_batch = Some(1);
    cfg.distill.image_lr = 5.0;
    let out = run(&ds, &cfg);
    let init = SyntheticSet::from_indices(&ds, &first_two(&ds)).unwrap();
    let len = 3 * 64;
    let moved = (0..4)
        .filter(|&i| out.set.images.data()[i * len..(i + 1) * len] != init.images.data()[i * len..(i + 1) * len])
        .count();
    assert_eq!(moved, 2);
}

#[test]
fn whitening_layer_matches_transform() {
    let ds = toy_dataset(2, 20, 6);
    let mut cfg = toy_config(256, 0);
    cfg.distill.zca = true;
    let prep = Prepared::new(&ds, &cfg).unwrap();
    let z = prep.zca.as_ref().unwrap();
    let x = Tensor::<f32>::from_f64(&[2, 3, 8, 8], &ds.to_unit()[..2 * 192]).unwrap();
    let mut g = Graph::<f32>::new();
    let v = g.constant(x.clone());
    let y = z.record(&mut g, v).unwrap();
    let direct = z.apply(&x).unwrap();
    for (a, b) in g.value(y).data().iter().zip(direct.data()) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
    let loss = distill_run(&prep, &ds, &first_two(&ds), &toy_config(256, 0), true);
    assert!(loss.is_ok());
}

#[test]
fn artifact_roundtrip_evaluates_identically() {
    let ds = toy_dataset(3, 6, 7);
    let cfg = toy_config(4, 2);
    let out = run(&ds, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let paths = out.set.write_dir(dir.path()).unwrap();
    assert_eq!(paths.len(), 6);
    assert!(paths[0].ends_with("c00_i000.apal"));
    let (files, labels) = read_synthetic_dir(dir.path()).unwrap();
    let mem = out.set.condense().unwrap();
    assert_eq!(files, mem);
    assert_eq!(labels, out.set.labels);
    let test = toy_dataset(3, 4, 70);
    let a = evaluate_quantized(&files, &labels, &test, None, &cfg.eval).unwrap();
    let b = evaluate_quantized(&mem, &out.set.labels, &test, None, &cfg.eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn separable_constants_are_learned_perfectly() {
    let classes = 3;
    // Gray levels alone are normalized away by instance norm; distinct hues are not.
    let constant = |c: usize| {
        let rgb = [[230u8, 20, 20], [20, 230, 20], [20, 20, 230]][c];
        Image::new(3, 8, 8, rgb.iter().flat_map(|&v| [v; 64]).collect()).unwrap()
    };
    let train_imgs: Vec<Image> = (0..classes).map(constant).collect();
    let train = LabeledDataset::from_images(&train_imgs, (0..classes).collect(), classes).unwrap();
    let test_imgs: Vec<Image> = (0..12).map(|i| constant(i % classes)).collect();
    let test = LabeledDataset::from_images(&test_imgs, (0..12).map(|i| i % classes).collect(), classes).unwrap();
    let mut cfg = toy_config(4, 0).eval;
    cfg.epochs = 100;
    cfg.lr = 0.05;
    let res = evaluate(&train, &test, None, &cfg).unwrap();
    assert_eq!(res.accuracies, vec![100.0, 100.0]);
    assert_eq!(res.std, 0.0);
}

#[test]
fn random_labels_give_chance_accuracy() {
    let classes = 10;
    let mut r = rng(9);
    let mk = |n: usize, r: &mut ChaCha8Rng| {
        let imgs: Vec<Image> = (0..n)
            .map(|_| Image::new(3, 8, 8, (0..192).map(|_| r.gen()).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
        LabeledDataset::from_images(&imgs, labels, classes).unwrap()
    };
    let train = mk(20, &mut r);
    let test = mk(2000, &mut r);
    let mut cfg = toy_config(4, 0).eval;
    cfg.seeds = 1;
    cfg.epochs = 20;
    let res = evaluate(&train, &test, None, &cfg).unwrap();
    assert!((res.mean - 10.0).abs() <= 5.0, "{}", res.mean);
}

#[test]
fn evaluate_rejects_empty_set() {
    let test = toy_dataset(2, 2, 10);
    assert!(evaluate_quantized(&[], &[], &test, None, &EvalConfig::default()).is_err());
}

#[test]
fn population_std() {
    let r = EvalResult::from_accuracies(vec![50.0, 60.0], vec![0, 1]);
    assert_eq!((r.mean, r.std), (55.0, 5.0));
}

#[test]
fn metrics_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    export_metrics(&[], None, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"summary\":true"));

    let ds = toy_dataset(2, 6, 11);
    let out = run(&ds, &toy_config(4, 3));
    let eval = EvalResult::from_accuracies(vec![40.0, 60.0], vec![0, 1]);
    export_metrics(&out.log, Some(&eval), &p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    for line in text.lines().take(3) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iter", "task_loss", "l_m", "l_b", "l_a", "active_buckets", "wall_ms"] {
            assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
    assert!(text.lines().last().unwrap().contains("\"eval_mean\":50.0"));

    let again = run(&ds, &toy_config(4, 3));
    let p2 = dir.path().join("m2.jsonl");
    export_metrics(&again.log, Some(&eval), &p2).unwrap();
    assert_eq!(std::fs::read(&p2).unwrap(), first);
}

#[test]
fn config_validation() {
    let mut c = DistillConfig::default();
    assert!(c.validate().is_ok());
    c.synthetic_batch = Some(11);
    assert!(c.validate().is_err());
    c.synthetic_batch = None;
    c.image_momentum = 1.0;
    assert!(c.validate().is_err());
    assert_eq!("random-real".parse::<InitMethod>().unwrap(), InitMethod::RandomReal);
    assert!("nope".parse::<InitMethod>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn pixels_stay_in_unit_range(lr in 0.1f64..500.0, seed in 0u64..1000) {
        let ds = toy_dataset(2, 4, seed);
        let mut cfg = toy_config(4, 2);
        cfg.distill.image_lr = lr;
        cfg.distill.seed = seed;
        let out = run(&ds, &cfg);
        prop_assert!(out.set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
