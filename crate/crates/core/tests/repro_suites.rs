use colordistill::config::RunConfig;
use colordistill::distill::Prepared;
use colordistill::io::{Image, LabeledDataset};
use colordistill::repro::{run_suite, Suite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let class = i % classes;
        let data = (0..192)
            .map(|j| {
                let base = if j / 64 == class { 200 } else { 60 };
                (base + r.gen_range(-40i32..=40)).clamp(0, 255) as u8
            })
            .collect();
        images.push(Image::new(3, 8, 8, data).unwrap());
        labels.push(class);
    }
    LabeledDataset::from_images(&images, labels, classes).unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_class = 6;
    cfg.distill.ipc = 2;
    cfg.distill.iterations = 2;
    cfg.distill.real_batch = 4;
    cfg.distill.net_width = 4;
    cfg.distill.net_depth = 2;
    cfg.distill.zca = false;
    cfg.palette.k = 4;
    cfg.palette.hidden = 8;
    cfg.eval.epochs = 3;
    cfg.eval.seeds = 2;
    cfg.eval.net_width = 4;
    cfg.eval.net_depth = 2;
    cfg.repro.sweep_colors = vec![2, 256];
    cfg.repro.compare_colors = vec![2, 4];
    cfg
}

fn run(suite: Suite) -> colordistill::repro::SuiteReport {
    let (train, test) = (toy(3, 6, 1), toy(3, 4, 2));
    let cfg = tiny_config();
    let prep = Prepared::new(&train, &cfg).unwrap();
    let mut seen = 0;
    let report = run_suite(suite, &train, &test, &prep, &cfg, true, |_| seen += 1).unwrap();
    assert_eq!(seen, report.rows.len());
    for r in &report.rows {
        assert_eq!(r.accuracies.len(), 2);
        assert!((0.0..=100.0).contains(&r.mean) && r.std >= 0.0);
    }
    report
}

#[test]
fn loss_ablation_has_four_rows() {
    let labels: Vec<_> = run(Suite::LossAblation).rows.into_iter().map(|r| r.label).collect();
    assert_eq!(labels, ["full", "no-max-color", "no-balance", "no-align"]);
}

#[test]
fn init_compare_has_three_rows() {
    let labels: Vec<_> = run(Suite::InitCompare).rows.into_iter().map(|r| r.label).collect();
    assert_eq!(labels, ["graph-cut-quantized", "graph-cut-real", "random-real"]);
}

#[test]
fn quantizer_compare_covers_each_method_per_k() {
    let report = run(Suite::QuantizerCompare);
    assert_eq!(report.rows.len(), 6);
    for k in [2, 4] {
        for m in ["palette-net", "median-cut", "octree"] {
            assert!(report.row(m, k).is_some(), "{m} {k}");
        }
    }
}

#[test]
fn color_sweep_writes_json_and_csv() {
    let report = run(Suite::ColorSweep);
    let ks: Vec<_> = report.rows.iter().map(|r| r.colors).collect();
    assert_eq!(ks, [2, 256]);
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = report.write(dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["suite"], "color-sweep");
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn suites_are_reproducible() {
    let a = run(Suite::InitCompare);
    let b = run(Suite::InitCompare);
    assert_eq!(a.rows, b.rows);
}
