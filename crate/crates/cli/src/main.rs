use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use colordistill::codec::{budget_with_overhead, pack, unpack, write_apal};
use colordistill::config::{RunConfig, DATA_DIR_ENV};
use colordistill::distill::{
    distill_run, evaluate_quantized, export_metrics, read_synthetic_dir, InitMethod, Prepared, ZcaLayer,
};
use colordistill::io::{read_ppm, write_ppm, zca_fit};
use colordistill::quantize::{median_cut, octree_quantize, unique_values_per_channel, QuantMode};
use colordistill::repro::{load_data, run_suite, select_initialization, Suite};
use colordistill::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "colordistill", version, about = "Color-budgeted dataset distillation toolkit")]
struct Cli {
    /// Worker threads (default: logical cores; forced to 1 with --deterministic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded run with wall-clock fields zeroed in metrics.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// CIFAR-10 binary directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a PPM image into an indexed .apal file.
    Quantize {
        #[arg(long, value_enum, default_value = "median-cut")]
        method: Method,
        #[arg(long)]
        colors: usize,
        #[arg(long, default_value = "joint")]
        mode: QuantMode,
        input: PathBuf,
        output: PathBuf,
    },
    /// Select the initial synthetic images per class; prints JSON indices.
    SelectInit {
        #[arg(long, default_value_t = 10)]
        ipc: usize,
        /// Joint Median Cut colors applied before scoring.
        #[arg(long, default_value_t = 64)]
        colors: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_parser = parse_init, default_value = "graph-cut-quantized")]
        init: InitMethod,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distill a synthetic set; writes synthetic/*.apal, metrics.jsonl and summary.json.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Skip evaluation of the distilled set.
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a directory of .apal files on the test split.
    Eval {
        /// Directory of cNN_iNNN.apal files.
        #[arg(long)]
        synthetic: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Store a PPM image losslessly as an 8-bit .apal file.
    Pack { input: PathBuf, output: PathBuf },
    /// Decode an .apal file into a PPM image.
    Unpack { input: PathBuf, output: PathBuf },
    /// Print the storage budget report as JSON.
    Budget {
        #[arg(long)]
        ipc: u64,
        /// CxHxW, e.g. 3x32x32.
        #[arg(long, value_parser = parse_dims)]
        dims: (u64, u64, u64),
        #[arg(long)]
        bits: u32,
        #[arg(long)]
        colors: u64,
        /// Extra bits charged per stored image.
        #[arg(long, default_value_t = 0)]
        overhead_bits: u64,
    },
    /// Run a reproduction suite; writes <suite>.json and <suite>.csv.
    Repro {
        #[arg(long, value_parser = parse_suite)]
        suite: Vec<Suite>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    MedianCut,
    Octree,
}

/// Config file and the flags that override it.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Distillation iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Palette colors per channel (256 bypasses the palette network).
    #[arg(long = "palette-colors")]
    palette_colors: Option<usize>,
    /// Images per class.
    #[arg(long = "distill-ipc")]
    distill_ipc: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Evaluation networks per cell.
    #[arg(long)]
    eval_seeds: Option<usize>,
    /// Evaluation training epochs.
    #[arg(long)]
    eval_epochs: Option<usize>,
}

fn parse_dims(s: &str) -> std::result::Result<(u64, u64, u64), String> {
    let parts: Vec<u64> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| format!("bad dimension {p:?} in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(format!("expected CxHxW, got {s:?}")),
    }
}

fn parse_init(s: &str) -> std::result::Result<InitMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Cli {
    fn load_config(&self, args: &RunArgs) -> Result<RunConfig> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data_dir {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.distill.seed = s;
            cfg.eval.seed = s;
        }
        if let Some(v) = args.iterations {
            cfg.distill.iterations = v;
        }
        if let Some(v) = args.palette_colors {
            cfg.palette.k = v;
        }
        if let Some(v) = args.distill_ipc {
            cfg.distill.ipc = v;
        }
        if let Some(v) = args.alpha {
            cfg.palette.alpha = v;
        }
        if let Some(v) = args.beta {
            cfg.palette.beta = v;
        }
        if let Some(v) = args.gamma {
            cfg.palette.gamma = v;
        }
        if let Some(v) = args.eval_seeds {
            cfg.eval.seeds = v;
        }
        if let Some(v) = args.eval_epochs {
            cfg.eval.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantize {
            method,
            colors,
            mode,
            input,
            output,
        } => {
            let image = read_ppm(input)?;
            let q = match method {
                Method::MedianCut => median_cut(&image, *colors, *mode)?,
                Method::Octree if *mode == QuantMode::Joint => octree_quantize(&image, *colors)?,
                Method::Octree => return Err(Error::Parameter("octree supports joint mode only".into())),
            };
            write_apal(&q, output)?;
            let uniq = unique_values_per_channel(&q.reconstruct());
            println!("{}", json!({"output": output, "colors": colors, "unique_per_channel": uniq}));
        }
        Command::Pack { input, output } => {
            let image = read_ppm(input)?;
            let q = colordistill::distill::raw_quantized(&image)?;
            let bytes = pack(&q)?;
            fs::write(output, &bytes).map_err(|e| io_error(output, e))?;
            println!("{}", json!({"output": output, "bytes": bytes.len()}));
        }
        Command::Unpack { input, output } => {
            let bytes = fs::read(input).map_err(|e| io_error(input, e))?;
            let q = unpack(&bytes)?;
            write_ppm(&q.reconstruct(), output)?;
            println!("{}", json!({"output": output, "colors": q.k, "mode": q.mode.to_string()}));
        }
        Command::Budget {
            ipc,
            dims: (c, h, w),
            bits,
            colors,
            overhead_bits,
        } => {
            let report = budget_with_overhead(*ipc, *c, *h, *w, *bits, *colors, *overhead_bits)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::SelectInit {
            ipc,
            colors,
            lambda,
            init,
            run,
        } => {
            let mut cfg = cli.load_config(run)?;
            cfg.distill.ipc = *ipc;
            cfg.distill.lambda = *lambda;
            cfg.distill.init = *init;
            cfg.distill.init_colors = Some(*colors);
            cfg.distill.zca = false;
            cfg.validate()?;
            let (train, _) = load_data(&cfg.data)?;
            let prep = Prepared::new(&train, &cfg)?;
            let picked = select_initialization(&train, &prep, &cfg)?;
            let value = json!({"ipc": ipc, "colors": colors, "lambda": lambda, "seed": cfg.distill.seed, "indices": picked});
            write_json(&cli.out.join("init.json"), &value)?;
            println!("{}", serde_json::to_string(&picked).expect("indices serialize"));
        }
        Command::Distill { run, no_eval } => {
            let cfg = cli.load_config(run)?;
            let (train, test) = load_data(&cfg.data)?;
            eprintln!("preparing {} training images", train.len());
            let prep = Prepared::new(&train, &cfg)?;
            let init = select_initialization(&train, &prep, &cfg)?;
            let out = distill_run(&prep, &train, &init, &cfg, cli.deterministic)?;
            let files = out.set.write_dir(&cli.out.join("synthetic"))?;
            let eval = if *no_eval {
                None
            } else {
                let q = out.set.condense()?;
                let zca = prep.zca.as_ref().map(|z| &z.transform);
                Some(evaluate_quantized(&q, &out.set.labels, &test, zca, &cfg.eval)?)
            };
            fs::create_dir_all(&cli.out).map_err(|e| io_error(&cli.out, e))?;
            export_metrics(&out.log, eval.as_ref(), &cli.out.join("metrics.jsonl"))?;
            let summary = json!({
                "files": files.len(),
                "init_indices": out.set.init_indices,
                "log_rows": out.log.len(),
                "final_task_loss": out.log.last().map(|r| r.task_loss),
                "eval": eval,
                "config": cfg,
            });
            write_json(&cli.out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string(&summary["eval"]).expect("json"));
        }
        Command::Eval { synthetic, run } => {
            let cfg = cli.load_config(run)?;
            let (images, labels) = read_synthetic_dir(synthetic)?;
            let (train, test) = load_data(&cfg.data)?;
            let zca = if cfg.distill.zca {
                Some(ZcaLayer::new(zca_fit(&train, cfg.distill.zca_eps)?)?)
            } else {
                None
            };
            let result = evaluate_quantized(&images, &labels, &test, zca.as_ref().map(|z| &z.transform), &cfg.eval)?;
            let value = json!(result);
            write_json(&cli.out.join("eval.json"), &value)?;
            println!("{}", serde_json::to_string(&value).expect("json"));
        }
        Command::Repro { suite, run } => {
            if suite.is_empty() {
                return Err(Error::Parameter("pass at least one --suite".into()));
            }
            let cfg = cli.load_config(run)?;
            let (train, test) = load_data(&cfg.data)?;
            let prep = Prepared::new(&train, &cfg)?;
            for &s in suite {
                let report = run_suite(s, &train, &test, &prep, &cfg, cli.deterministic, |row| {
                    eprintln!("{} {} K={}: {:.2} ± {:.2}", s.name(), row.label, row.colors, row.mean, row.std);
                })?;
                report.write(&cli.out.join("repro"))?;
                print!("{}", report.to_csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
