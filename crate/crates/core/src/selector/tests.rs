use super::*;
use crate::io::Image;
use crate::nn::{Graph, ConvNetConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_kernel(n: usize, seed: u64) -> SimilarityKernel {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = r.gen_range(-1.0..1.0);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    SimilarityKernel::from_matrix(n, m).unwrap()
}

fn brute_value(k: &SimilarityKernel, a: &[usize], lambda: f64) -> f64 {
    let mut cover = 0.0;
    for i in 0..k.n {
        for &x in a {
            cover += k.matrix[i * k.n + x];
        }
    }
    let mut red = 0.0;
    for &x in a {
        for &y in a {
            red += k.matrix[x * k.n + y];
        }
    }
    lambda * cover - red
}

fn tiny_net(classes: usize, seed: u64) -> ConvNetParams<f64> {
    let cfg = ConvNetConfig {
        channels: 3,
        height: 8,
        width: 8,
        depth: 2,
        net_width: 4,
        classes,
    };
    ConvNetParams::random(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * 192).map(|_| r.gen_range(0.0..1.0)).collect();
    Tensor::from_f64(&[n, 3, 8, 8], &data).unwrap()
}

#[test]
fn confident_correct_prediction_has_zero_gradient() {
    let mut net = tiny_net(3, 1);
    // A huge bias on the true class saturates the softmax.
    net.fc_weight = Tensor::zeros(net.fc_weight.shape());
    net.fc_bias = Tensor::from_f64(&[3], &[0.0, 1e3, 0.0]).unwrap();
    let x = random_images(1, 2);
    let g = gradient_features(&net, &x, &[1]).unwrap();
    assert!(g[0].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn identical_images_identical_features() {
    let net = tiny_net(4, 3);
    let one = random_images(1, 4).reshape(&[3, 8, 8]).unwrap();
    let x = Tensor::stack(&[one.clone(), one]).unwrap();
    let g = gradient_features(&net, &x, &[2, 2]).unwrap();
    assert_eq!(g[0], g[1]);
}

#[test]
fn closed_form_matches_autodiff() {
    for seed in 0..5 {
        let net = tiny_net(5, seed);
        let x = random_images(1, 100 + seed);
        let label = seed as usize % 5;
        let closed = gradient_features(&net, &x, &[label]).unwrap().remove(0);
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let f = vars.features(&mut g, xv).unwrap();
        let logits = vars.logits(&mut g, f).unwrap();
        let loss = g.cross_entropy(logits, &[label]).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let fc = *vars.all().iter().rev().nth(1).unwrap();
        let auto = grads.take_or_zeros(fc, net.fc_weight.shape());
        for (a, b) in closed.iter().zip(auto.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn out_of_range_label() {
    let net = tiny_net(3, 0);
    assert!(matches!(gradient_features(&net, &random_images(1, 0), &[3]), Err(Error::Parameter(_))));
}

#[test]
fn cosine_examples() {
    let k = similarity_kernel(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 2.0], vec![1.0, 0.0], vec![0.0, 0.0]]);
    assert!((k.get(0, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(k.get(0, 2), 0.0);
    assert!((k.get(0, 3) - 1.0).abs() < 1e-15);
    assert_eq!(k.get(4, 1), 0.0);
    assert_eq!(k.get(4, 4), 1.0);
}

#[test]
fn graph_cut_examples() {
    let k = random_kernel(4, 8);
    assert_eq!(graph_cut_value(&k, &[], 1.0).unwrap(), 0.0);
    assert!((graph_cut_value(&k, &[0, 2], 1.0).unwrap() - brute_value(&k, &[0, 2], 1.0)).abs() < 1e-12);
    let id = SimilarityKernel::from_matrix(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    for a in [vec![], vec![0], vec![1, 2], vec![0, 1, 2]] {
        assert_eq!(graph_cut_value(&id, &a, 1.0).unwrap(), 0.0);
    }
    assert!(graph_cut_value(&k, &[7], 1.0).is_err());
}

#[test]
fn gain_examples() {
    let k = random_kernel(5, 3);
    let row: f64 = (0..5).map(|i| k.get(i, 2)).sum();
    assert!((conditional_gain(&k, 2, &[], 1.5).unwrap() - (1.5 * row - 1.0)).abs() < 1e-12);
    assert!(matches!(conditional_gain(&k, 2, &[1, 2], 1.0), Err(Error::Contract(_))));
}

#[test]
fn duplicate_is_penalized() {
    // Items 0 and 1 duplicate; item 2 has 0.2 to both.
    let k = SimilarityKernel::from_matrix(3, vec![1.0, 1.0, 0.2, 1.0, 1.0, 0.2, 0.2, 0.2, 1.0]).unwrap();
    // Gains after seeding 0: item 1 pays 2·1, item 2 pays 2·0.2.
    let g1 = conditional_gain(&k, 1, &[0], 1.0).unwrap();
    let g2 = conditional_gain(&k, 2, &[0], 1.0).unwrap();
    assert!((g1 - (2.2 - 1.0 - 2.0)).abs() < 1e-12);
    assert!((g2 - (1.4 - 1.0 - 0.4)).abs() < 1e-12);
    assert_eq!(greedy_select_from(&k, 0, 2, 1.0).unwrap(), vec![0, 2]);
}

#[test]
fn full_universe_and_identity_ties() {
    let k = random_kernel(6, 1);
    let mut all = greedy_select(&k, &SelectionConfig { ipc: 6, lambda: 1.0, seed: 4 }).unwrap();
    all.sort();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
    let mut id = vec![0.0; 25];
    (0..5).for_each(|i| id[i * 5 + i] = 1.0);
    let id = SimilarityKernel::from_matrix(5, id).unwrap();
    assert_eq!(greedy_select_from(&id, 3, 4, 1.0).unwrap(), vec![3, 0, 1, 2]);
    assert!(greedy_select(&id, &SelectionConfig { ipc: 6, lambda: 1.0, seed: 0 }).is_err());
}

#[test]
fn selection_ignores_feature_scale() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let feats: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v * 7.5).collect()).collect();
    let cfg = SelectionConfig { ipc: 5, lambda: 1.0, seed: 9 };
    assert_eq!(
        greedy_select(&similarity_kernel(&feats), &cfg).unwrap(),
        greedy_select(&similarity_kernel(&scaled), &cfg).unwrap()
    );
}

#[test]
fn select_init_returns_class_members() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<Image> = (0..12)
        .map(|_| Image::new(3, 8, 8, (0..192).map(|_| r.gen()).collect()).unwrap())
        .collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let ds = LabeledDataset::from_images(&images, labels.clone(), 3).unwrap();
    let cfg = ConvNetConfig { channels: 3, height: 8, width: 8, depth: 2, net_width: 4, classes: 3 };
    let sel = select_init(&ds, cfg, SelectionSource::Quantized(8), &SelectionConfig { ipc: 2, lambda: 1.0, seed: 1 }).unwrap();
    assert_eq!(sel.len(), 3);
    for (class, picked) in sel.iter().enumerate() {
        assert_eq!(picked.len(), 2);
        assert_ne!(picked[0], picked[1]);
        assert!(picked.iter().all(|&i| labels[i] == class));
    }
    let again = select_init(&ds, cfg, SelectionSource::Quantized(8), &SelectionConfig { ipc: 2, lambda: 1.0, seed: 1 }).unwrap();
    assert_eq!(sel, again);
}

proptest! {
    #[test]
    fn gain_equals_value_difference(seed in any::<u64>(), n in 2usize..=8, lambda in 0.1f64..3.0, mask in any::<u16>(), c in 0usize..8) {
        let k = random_kernel(n, seed);
        let c = c % n;
        let a: Vec<usize> = (0..n).filter(|&i| i != c && mask >> i & 1 == 1).collect();
        let mut with = a.clone();
        with.push(c);
        let diff = graph_cut_value(&k, &with, lambda).unwrap() - graph_cut_value(&k, &a, lambda).unwrap();
        prop_assert!((conditional_gain(&k, c, &a, lambda).unwrap() - diff).abs() <= 1e-9);
    }

    #[test]
    fn greedy_output_is_distinct(seed in any::<u64>(), n in 1usize..=12, ipc in 1usize..=12) {
        let k = random_kernel(n, seed);
        let ipc = ipc.min(n);
        let cfg = SelectionConfig { ipc, lambda: 1.0, seed };
        let sel = greedy_select(&k, &cfg).unwrap();
        let mut s = sel.clone();
        s.sort();
        s.dedup();
        prop_assert_eq!(s.len(), ipc);
        prop_assert_eq!(sel, greedy_select(&k, &cfg).unwrap());
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let k = similarity_kernel(&feats);
        for i in 0..n {
            prop_assert_eq!(k.get(i, i), 1.0);
            for j in 0..n {
                prop_assert!((k.get(i, j) - k.get(j, i)).abs() <= 1e-9);
                prop_assert!((-1.0..=1.0).contains(&k.get(i, j)));
            }
        }
    }
}
