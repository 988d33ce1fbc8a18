//! End-to-end pipeline and the desk-scale reproduction suites.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DataConfig, RunConfig};
use crate::distill::{
    distill_run, evaluate_quantized, posthoc_quantize, DistillOutput, EvalResult, InitMethod, PosthocMethod, Prepared,
};
use crate::error::{Error, Result};
use crate::io::{load_cifar10_split, LabeledDataset, Split};
use crate::quantize::MAX_COLORS;
use crate::selector::{random_init, select_init, SelectionConfig, SelectionSource};

/// Balanced train and test subsets from the configured CIFAR-10 directory.
pub fn load_data(cfg: &DataConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = cfg.resolve_dir()?;
    let train = load_cifar10_split(&dir, Split::Train)?.balanced_prefix(cfg.train_per_class)?;
    let test_all = load_cifar10_split(&dir, Split::Test)?;
    let per_class = cfg.test_total / test_all.class_count;
    if per_class == 0 {
        return Err(Error::Config(format!("data.test_total {} is below one per class", cfg.test_total)));
    }
    Ok((train, test_all.balanced_prefix(per_class)?))
}

/// Initial dataset indices per class for the configured method.
pub fn select_initialization(train: &LabeledDataset, prepared: &Prepared, cfg: &RunConfig) -> Result<Vec<Vec<usize>>> {
    let dc = &cfg.distill;
    let sel = SelectionConfig {
        ipc: dc.ipc,
        lambda: dc.lambda,
        seed: dc.seed,
    };
    match dc.init {
        InitMethod::RandomReal => random_init(train, dc.ipc, dc.seed),
        InitMethod::GraphCutReal => select_init(train, prepared.net_config, SelectionSource::Real, &sel),
        InitMethod::GraphCutQuantized => {
            let k = dc.init_colors.unwrap_or(cfg.palette.k);
            // At full 8-bit width quantization is the identity.
            let source = if k >= MAX_COLORS {
                SelectionSource::Real
            } else {
                SelectionSource::Quantized(k)
            };
            select_init(train, prepared.net_config, source, &sel)
        }
    }
}

/// Selection, distillation, hard condensation and evaluation in one call.
pub fn run_pipeline(
    train: &LabeledDataset,
    test: &LabeledDataset,
    prepared: &Prepared,
    cfg: &RunConfig,
    deterministic: bool,
) -> Result<(DistillOutput, EvalResult)> {
    let init = select_initialization(train, prepared, cfg)?;
    let out = distill_run(prepared, train, &init, cfg, deterministic)?;
    let condensed = out.set.condense()?;
    let zca = prepared.zca.as_ref().map(|z| &z.transform);
    let eval = evaluate_quantized(&condensed, &out.set.labels, test, zca, &cfg.eval)?;
    Ok((out, eval))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    ColorSweep,
    LossAblation,
    InitCompare,
    QuantizerCompare,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::ColorSweep, Suite::LossAblation, Suite::InitCompare, Suite::QuantizerCompare];

    pub fn name(self) -> &'static str {
        match self {
            Suite::ColorSweep => "color-sweep",
            Suite::LossAblation => "loss-ablation",
            Suite::InitCompare => "init-compare",
            Suite::QuantizerCompare => "quantizer-compare",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub label: String,
    pub colors: usize,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SuiteRow {
    fn new(label: impl Into<String>, colors: usize, e: &EvalResult) -> Self {
        Self {
            label: label.into(),
            colors,
            mean: e.mean,
            std: e.std,
            accuracies: e.accuracies.clone(),
            seeds: e.seeds.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub distill_seed: u64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn row(&self, label: &str, colors: usize) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label && r.colors == colors)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,colors,mean,std,accuracies\n");
        for r in &self.rows {
            let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.2}")).collect();
            s.push_str(&format!("{},{},{:.3},{:.3},{}\n", r.label, r.colors, r.mean, r.std, accs.join(";")));
        }
        s
    }

    /// Writes `<suite>.json` and `<suite>.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}.json", self.suite));
        let csv = dir.join(format!("{}.csv", self.suite));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

fn with_colors(cfg: &RunConfig, k: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.palette.k = k;
    c
}

/// Runs one suite. `progress` receives each finished row.
pub fn run_suite(
    suite: Suite,
    train: &LabeledDataset,
    test: &LabeledDataset,
    prepared: &Prepared,
    cfg: &RunConfig,
    deterministic: bool,
    mut progress: impl FnMut(&SuiteRow),
) -> Result<SuiteReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut push = |row: SuiteRow, rows: &mut Vec<SuiteRow>| {
        progress(&row);
        rows.push(row);
    };
    let k = cfg.palette.k;
    match suite {
        Suite::ColorSweep => {
            for &kk in &cfg.repro.sweep_colors {
                let (_, e) = run_pipeline(train, test, prepared, &with_colors(cfg, kk), deterministic)?;
                push(SuiteRow::new("palette-net", kk, &e), &mut rows);
            }
        }
        Suite::LossAblation => {
            let variants: [(&str, fn(&mut RunConfig)); 4] = [
                ("full", |_| {}),
                ("no-max-color", |c| c.palette.alpha = 0.0),
                ("no-balance", |c| c.palette.beta = 0.0),
                ("no-align", |c| c.palette.gamma = 0.0),
            ];
            for (label, edit) in variants {
                let mut c = cfg.clone();
                edit(&mut c);
                let (_, e) = run_pipeline(train, test, prepared, &c, deterministic)?;
                push(SuiteRow::new(label, k, &e), &mut rows);
            }
        }
        Suite::InitCompare => {
            for (label, init) in [
                ("graph-cut-quantized", InitMethod::GraphCutQuantized),
                ("graph-cut-real", InitMethod::GraphCutReal),
                ("random-real", InitMethod::RandomReal),
            ] {
                let mut c = cfg.clone();
                c.distill.init = init;
                let (_, e) = run_pipeline(train, test, prepared, &c, deterministic)?;
                push(SuiteRow::new(label, k, &e), &mut rows);
            }
        }
        Suite::QuantizerCompare => {
            let zca = prepared.zca.as_ref().map(|z| &z.transform);
            for &kk in &cfg.repro.compare_colors {
                let c = with_colors(cfg, kk);
                let (out, e) = run_pipeline(train, test, prepared, &c, deterministic)?;
                push(SuiteRow::new("palette-net", kk, &e), &mut rows);
                for (label, method) in [("median-cut", PosthocMethod::MedianCut), ("octree", PosthocMethod::Octree)] {
                    let q = posthoc_quantize(&out.set, kk, method)?;
                    let e = evaluate_quantized(&q, &out.set.labels, test, zca, &c.eval)?;
                    push(SuiteRow::new(label, kk, &e), &mut rows);
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: suite.name().to_string(),
        distill_seed: cfg.distill.seed,
        rows,
    })
}
