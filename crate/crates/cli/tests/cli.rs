use std::process::{Command, Output};

use colordistill::codec::read_apal;
use colordistill::io::{read_ppm, write_ppm, Image};
use colordistill::quantize::unique_values_per_channel;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colordistill"))
        .args(args)
        .env_remove("AUTOPALETTE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn gradient_image() -> Image {
    let data = (0..3 * 16 * 16).map(|i| ((i * 37) % 256) as u8).collect();
    Image::new(3, 16, 16, data).unwrap()
}

#[test]
fn budget_reports_capacity_twelve() {
    let out = cli(&["budget", "--ipc", "10", "--dims", "3x32x32", "--bits", "6", "--colors", "64"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["capacity"], 12);
}

#[test]
fn quantize_then_unpack_keeps_at_most_k_values() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = dir.path().join("in.ppm");
    let apal = dir.path().join("out.apal");
    let back = dir.path().join("back.ppm");
    write_ppm(&gradient_image(), &ppm).unwrap();
    let p = |x: &std::path::Path| x.to_str().unwrap().to_string();
    let out = cli(&["quantize", "--method", "median-cut", "--colors", "4", &p(&ppm), &p(&apal)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_apal(&apal).unwrap().k, 4);
    let out = cli(&["unpack", &p(&apal), &p(&back)]);
    assert!(out.status.success());
    let img = read_ppm(&back).unwrap();
    assert!(unique_values_per_channel(&img).iter().all(|&u| u <= 4));
}

#[test]
fn pack_unpack_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    write_ppm(&gradient_image(), dir.path().join("a.ppm").as_path()).unwrap();
    assert!(cli(&["pack", &p("a.ppm"), &p("a.apal")]).status.success());
    assert!(cli(&["unpack", &p("a.apal"), &p("b.ppm")]).status.success());
    assert_eq!(read_ppm(dir.path().join("b.ppm").as_path()).unwrap(), gradient_image());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.apal");
    std::fs::write(&bad, b"NOPE").unwrap();
    let out = cli(&["unpack", bad.to_str().unwrap(), dir.path().join("x.ppm").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cli(&["budget", "--ipc", "10"]).status.code(), Some(1));
    assert_eq!(cli(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cli(&["repro", "--suite", "color-sweep"]).status.code(), Some(1));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[palette]\nunknown = 1\n").unwrap();
    assert_eq!(cli(&["distill", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_flags() {
    let text = String::from_utf8(cli(&["distill", "--help"]).stdout).unwrap();
    for flag in ["--threads", "--deterministic", "--seed", "--out", "--data-dir", "--config", "--iterations"] {
        assert!(text.contains(flag), "{flag}");
    }
    let text = String::from_utf8(cli(&["budget", "--help"]).stdout).unwrap();
    assert!(text.contains("--overhead-bits"));
}

/// A tiny CIFAR-format directory: `per_file` images in each batch file.
fn fake_cifar(dir: &std::path::Path, per_file: usize) {
    use colordistill::io::cifar::{TEST_FILE, TRAIN_FILES};
    use colordistill::io::{to_cifar10_bytes, LabeledDataset};
    let batch = |seed: usize| {
        let images: Vec<Image> = (0..per_file)
            .map(|i| {
                let class = i % 10;
                let data = (0..3072).map(|j| ((class * 25 + (j * (seed + 3)) % 40) % 256) as u8).collect();
                Image::new(3, 32, 32, data).unwrap()
            })
            .collect();
        let ds = LabeledDataset::from_images(&images, (0..per_file).map(|i| i % 10).collect(), 10).unwrap();
        to_cifar10_bytes(&ds).unwrap()
    };
    for (i, f) in TRAIN_FILES.iter().enumerate() {
        std::fs::write(dir.join(f), batch(i)).unwrap();
    }
    std::fs::write(dir.join(TEST_FILE), batch(9)).unwrap();
}

#[test]
fn distill_and_eval_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    fake_cifar(&data, 20);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[data]\ntrain_per_class = 4\ntest_total = 20\n\
         [distill]\nipc = 1\nreal_batch = 2\nnet_width = 4\nzca = false\nlog_every = 1\n\
         [palette]\nhidden = 8\n\
         [eval]\nepochs = 1\nseeds = 1\nnet_width = 4\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let common = ["--deterministic", "--data-dir", &s(&data), "--out", &s(&out), "--config", &s(&cfg)];
    let mut args = vec!["distill", "--iterations", "2", "--palette-colors", "8"];
    args.extend(common);
    let res = cli(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let names: Vec<String> = std::fs::read_dir(out.join("synthetic"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 10);
    assert!(names.iter().any(|n| n == "c09_i000.apal"));
    assert_eq!(read_apal(&out.join("synthetic/c00_i000.apal")).unwrap().k, 8);
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let mean = summary["eval"]["mean"].as_f64().unwrap();

    let first = std::fs::read(out.join("metrics.jsonl")).unwrap();
    assert!(cli(&args).status.success());
    assert_eq!(std::fs::read(out.join("metrics.jsonl")).unwrap(), first);

    let synth = s(&out.join("synthetic"));
    let mut args = vec!["eval", "--synthetic", &synth];
    args.extend(common);
    let res = cli(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["mean"].as_f64().unwrap(), mean);

    let res = cli(&["select-init", "--ipc", "2", "--colors", "16", "--data-dir", &s(&data), "--out", &s(&out), "--config", &s(&cfg)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let picked: Vec<Vec<usize>> = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(picked.len(), 10);
    assert!(picked.iter().all(|c| c.len() == 2));
}
