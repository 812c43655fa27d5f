//! Command-line front end and the run helpers it shares with the tests.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    ks_forecast_report, median_doubling_ratio, permutation_entropy, projection_experiment, scaling_probe,
    svd_entropy, write_report, ProjectionParams,
};
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, CrossKind, Model, SelfKind};
use crate::pipeline::{
    evaluate, load_csv, make_windows, synth_series, train, History, Metrics, Normalizer, Series, Split, TimeAxis,
    TimeFormat, WindowedDataset,
};
use crate::spectral::ModeKind;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "freqformer", version, about = "Frequency-enhanced decomposed forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config file (`key=value` lines); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed list replacing the config's `seeds` (repeatable or comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory replacing the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` applied after the config file (repeatable).
    #[arg(long = "override", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model per seed.
    Train,
    /// Forecast the `O` steps after the last `I` rows of a CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run an ablation grid at desk scale.
    Ablate {
        #[arg(long, value_enum)]
        study: Study,
        /// Mode counts for the mode_policy study.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        modes: Vec<usize>,
        /// Kernel of the single-expert arm of moe_vs_single.
        #[arg(long, default_value_t = 24)]
        single_kernel: usize,
    },
    /// Verification analyses.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum Study {
    ModePolicy,
    MoeVsSingle,
    BlockVariants,
}

#[derive(Subcommand, Debug)]
pub enum Analysis {
    /// KS p-values of forecasts against input windows on the test split.
    Ks {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the model's prediction length.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Column-subset projection error ratios.
    Projection {
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        k_true: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        s: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
    },
    /// Permutation and SVD entropy of each feature.
    Entropy {
        /// CSV to analyze instead of the configured data.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 1)]
        delay: usize,
        #[arg(long, default_value_t = 10)]
        embed_dim: usize,
    },
    /// Forward and forward+backward time against prediction length.
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

/// Loads the config and applies flags, in the order file, overrides, seed, out.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The configured series; synthetic noise follows `seed`.
pub fn load_series(cfg: &RunConfig, seed: u64) -> Result<Series> {
    match &cfg.data {
        DataSource::Csv(p) => {
            let s = load_csv(p)?;
            if s.values.shape()[1] != cfg.model.raw_dim {
                return Err(Error::Config(format!(
                    "{} has {} features but model.raw_dim is {}",
                    p.display(),
                    s.values.shape()[1],
                    cfg.model.raw_dim
                )));
            }
            Ok(s)
        }
        DataSource::Synth { spec, len } => {
            let values = synth_series(spec, *len, seed)?;
            Ok(Series {
                time: TimeAxis { format: TimeFormat::Numeric, values: (0..*len).map(|t| t as f64).collect() },
                names: (0..spec.features.len()).map(|j| format!("x{j}")).collect(),
                values,
            })
        }
    }
}

pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<WindowedDataset> {
    let series = load_series(cfg, seed)?;
    make_windows(&series.values, cfg.model.input_len, cfg.model.pred_len, cfg.split)
}

/// One trained model with its data and scores.
pub struct RunOutcome {
    pub model: Model,
    pub data: WindowedDataset,
    pub history: History,
    pub test: Metrics,
}

/// Builds, trains and tests one model for `seed`.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let data = load_dataset(cfg, seed)?;
    let (mc, tc) = cfg.for_seed(seed);
    let mut model = Model::new(mc)?;
    let history = train(&mut model, &data, &tc)?;
    let test = evaluate(&model, data.split(Split::Test))?;
    Ok(RunOutcome { model, data, history, test })
}

/// Header text plus tensors: the resolved single-seed config, parameters,
/// and normalization statistics as `norm.mean` / `norm.std`.
pub fn write_run_checkpoint(path: &Path, cfg: &RunConfig, model: &Model, norm: &Normalizer) -> Result<()> {
    let mut tensors = model.named_params();
    let d = norm.dim();
    tensors.push(("norm.mean".into(), Tensor::new(&[d], norm.mean.clone())?));
    tensors.push(("norm.std".into(), Tensor::new(&[d], norm.std.clone())?));
    // the output directory is not part of the model; keep it out so reruns match byte for byte
    let header: String = cfg.to_text().lines().filter(|l| !l.starts_with("out=")).map(|l| format!("{l}\n")).collect();
    save_checkpoint(path, &header, &tensors)
}

pub fn read_run_checkpoint(path: &Path) -> Result<(RunConfig, Model, Normalizer)> {
    let (header, tensors) = load_checkpoint(path)?;
    let cfg = RunConfig::parse(&header)?;
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let mut model = Model::new(cfg.for_seed(seed).0)?;
    model.load_params(&tensors)?;
    let stat = |name: &str| -> Result<Vec<f64>> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
    };
    let norm = Normalizer { mean: stat("norm.mean")?, std: stat("norm.std")? };
    if norm.dim() != cfg.model.raw_dim || norm.std.len() != norm.dim() {
        return Err(Error::Checkpoint("normalization statistics do not match model.raw_dim".into()));
    }
    Ok((cfg, model, norm))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn seeds_param(cfg: &RunConfig) -> (&'static str, String) {
    ("seeds", cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let multi = cfg.seeds.len() > 1;
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    for &seed in &cfg.seeds {
        let dir = if multi { cfg.out.join(format!("seed_{seed}")) } else { cfg.out.clone() };
        fs::create_dir_all(&dir)?;
        let single = RunConfig { out: dir.clone(), ..cfg.single(seed) };
        let run = run_seed(&single, seed)?;
        fs::write(dir.join("history.csv"), run.history.to_csv())?;
        fs::write(dir.join("config.txt"), single.to_text())?;
        write_run_checkpoint(&dir.join("model.ckpt"), &single, &run.model, &run.data.norm)?;
        println!(
            "seed {seed}: best epoch {} val_mse {:.6} test_mse {:.6} test_mae {:.6}",
            run.history.best_epoch, run.history.best_val_mse, run.test.mse, run.test.mae
        );
        rows.push(format!(
            "{seed},{},{:e},{:e},{:e}",
            run.history.best_epoch, run.history.best_val_mse, run.test.mse, run.test.mae
        ));
        tests.push((run.history.best_val_mse, run.test.mse, run.test.mae));
    }
    if multi {
        let col = |f: fn(&(f64, f64, f64)) -> f64| mean_std(&tests.iter().map(f).collect::<Vec<_>>());
        let (v, t, a) = (col(|x| x.0), col(|x| x.1), col(|x| x.2));
        rows.push(format!("mean,,{:e},{:e},{:e}", v.0, t.0, a.0));
        rows.push(format!("std,,{:e},{:e},{:e}", v.1, t.1, a.1));
        println!("test_mse {:.6} ± {:.6} over {} seeds", t.0, t.1, tests.len());
        write_report(
            &cfg.out.join("summary.csv"),
            &[seeds_param(cfg)],
            "seed,best_epoch,val_mse,test_mse,test_mae",
            &rows,
        )?;
    }
    Ok(())
}

fn cmd_forecast(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (cfg, model, norm) = read_run_checkpoint(checkpoint)?;
    let series = load_csv(input)?;
    let [t, d] = series.values.dims2("forecast")?;
    let (i, o) = (cfg.model.input_len, cfg.model.pred_len);
    if d != cfg.model.raw_dim {
        return Err(Error::Config(format!(
            "{} has {d} features but the checkpoint expects {}",
            input.display(),
            cfg.model.raw_dim
        )));
    }
    if t < i {
        return Err(Error::SeriesTooShort { len: t, need: i });
    }
    let x = norm.normalize(&series.values.slice_first(t - i, t)?)?;
    let y = norm.denormalize(&model.predict(&x)?)?;
    let stamps = TimeAxis { format: series.time.format.clone(), values: series.time.values[t - i..].to_vec() }
        .extrapolate(o);
    let mut s = String::new();
    let _ = writeln!(s, "time,{}", series.names.join(","));
    for (r, stamp) in stamps.iter().enumerate() {
        let vals: Vec<String> = y.data()[r * d..(r + 1) * d].iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{stamp},{}", vals.join(","));
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(output, s)?;
    Ok(())
}

fn test_mses(cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.seeds.iter().map(|&s| Ok(run_seed(cfg, s)?.test.mse)).collect()
}

fn cmd_ablate(cfg: &RunConfig, study: Study, modes: &[usize], single_kernel: usize) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut params = vec![seeds_param(cfg)];
    let (name, header, rows) = match study {
        Study::ModePolicy => {
            let mut rows = Vec::new();
            for (label, kind) in [("fixed", ModeKind::FixedLowest), ("random", ModeKind::RandomUniform)] {
                for &m in modes {
                    let mut c = cfg.clone();
                    c.model.policy = kind;
                    c.model.modes = m;
                    let (mean, std) = mean_std(&test_mses(&c)?);
                    rows.push(format!("{label},{m},{mean:e},{std:e}"));
                }
            }
            ("mode_policy", "policy,modes,test_mse_mean,test_mse_std", rows)
        }
        Study::MoeVsSingle => {
            params.push(("moe_kernels", format!("{:?}", cfg.model.moe_kernels)));
            params.push(("single_kernel", single_kernel.to_string()));
            let mut single = cfg.clone();
            single.model.moe_kernels = vec![single_kernel];
            let mut rows = Vec::new();
            let (mut moe_all, mut single_all) = (Vec::new(), Vec::new());
            for &seed in &cfg.seeds {
                let a = run_seed(cfg, seed)?.test.mse;
                let b = run_seed(&single, seed)?.test.mse;
                rows.push(format!("{seed},{a:e},{b:e},{}", a <= b));
                moe_all.push(a);
                single_all.push(b);
            }
            let (a, b) = (mean_std(&moe_all).0, mean_std(&single_all).0);
            rows.push(format!("mean,{a:e},{b:e},{}", a <= b));
            ("moe_vs_single", "seed,moe_test_mse,single_test_mse,moe_not_worse", rows)
        }
        Study::BlockVariants => {
            let grid = [
                ("full", SelfKind::Feb, CrossKind::Fea),
                ("v1_feb_only", SelfKind::Feb, CrossKind::Attention),
                ("v2_fea_only", SelfKind::Attention, CrossKind::Fea),
                ("v3_both_fea", SelfKind::Fea, CrossKind::Fea),
                ("attention", SelfKind::Attention, CrossKind::Attention),
            ];
            let mut rows = Vec::new();
            for (label, s, x) in grid {
                let mut c = cfg.clone();
                c.model.self_block = s;
                c.model.cross_block = x;
                let (mean, std) = mean_std(&test_mses(&c)?);
                rows.push(format!("{label},{s:?},{x:?},{mean:e},{std:e}"));
            }
            ("block_variants", "variant,self_block,cross_block,test_mse_mean,test_mse_std", rows)
        }
    };
    let path = cfg.out.join(format!("{name}.csv"));
    write_report(&path, &params, header, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, what: &Analysis) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let seed = cfg.seeds[0];
    let path = match what {
        Analysis::Ks { checkpoint, horizons } => {
            let (run_cfg, model, norm) = read_run_checkpoint(checkpoint)?;
            let data = load_dataset(&run_cfg, run_cfg.seeds[0])?;
            let horizons = if horizons.is_empty() { vec![run_cfg.model.pred_len] } else { horizons.clone() };
            let table = ks_forecast_report(&model, data.split(Split::Test), &norm, &horizons)?;
            let rows: Vec<String> = table
                .iter()
                .map(|r| format!("{},{:e},{:e},{},{}", r.horizon, r.statistic, r.p_value, r.n, r.m))
                .collect();
            let path = cfg.out.join("ks.csv");
            let params = [("checkpoint", checkpoint.display().to_string())];
            write_report(&path, &params, "horizon,statistic,p_value,n_pred,n_input", &rows)?;
            path
        }
        &Analysis::Projection { m, d, k_true, k, s, trials, noise, epsilon } => {
            let p = ProjectionParams { m, d, k_true, k, s, trials, noise, epsilon, seed };
            let r = projection_experiment(&p)?;
            let rows: Vec<String> = r.ratios.iter().enumerate().map(|(i, x)| format!("{i},{x:e}")).collect();
            let params = [
                ("m", m.to_string()),
                ("d", d.to_string()),
                ("k_true", k_true.to_string()),
                ("k", k.to_string()),
                ("s", s.to_string()),
                ("trials", trials.to_string()),
                ("noise", noise.to_string()),
                ("epsilon", epsilon.to_string()),
                ("seed", seed.to_string()),
                ("fraction_within_bound", r.fraction_within_bound.to_string()),
                ("coherence", r.coherence.to_string()),
            ];
            println!("fraction within 1+ε: {}", r.fraction_within_bound);
            let path = cfg.out.join("projection.csv");
            write_report(&path, &params, "trial,ratio", &rows)?;
            path
        }
        &Analysis::Entropy { ref input, order, delay, embed_dim } => {
            let series = match input {
                Some(p) => load_csv(p)?,
                None => load_series(cfg, seed)?,
            };
            let [t, d] = series.values.dims2("entropy")?;
            let mut rows = Vec::new();
            for j in 0..d {
                let col: Vec<f64> = (0..t).map(|r| series.values.data()[r * d + j]).collect();
                let pe = permutation_entropy(&col, order, delay)?;
                let se = svd_entropy(&col, embed_dim, delay)?;
                rows.push(format!("{},{pe:e},{se:e}", series.names[j]));
            }
            let params =
                [("order", order.to_string()), ("delay", delay.to_string()), ("embed_dim", embed_dim.to_string())];
            let path = cfg.out.join("entropy.csv");
            write_report(&path, &params, "feature,permutation_entropy,svd_entropy", &rows)?;
            path
        }
        Analysis::Scaling { lengths, repeats } => {
            let base = cfg.for_seed(seed).0;
            let table = scaling_probe(&base, lengths, *repeats)?;
            let rows: Vec<String> =
                table.iter().map(|r| format!("{},{:.4},{:.4}", r.len, r.forward_ms, r.backward_ms)).collect();
            let ratio = median_doubling_ratio(&table).map_or("n/a".to_string(), |r| format!("{r:.3}"));
            println!("median forward ratio per doubling: {ratio}");
            let params = [
                ("modes", base.modes.to_string()),
                ("input_len", "2*len".to_string()),
                ("repeats", repeats.to_string()),
                ("median_doubling_ratio", ratio),
            ];
            let path = cfg.out.join("scaling.csv");
            write_report(&path, &params, "len,forward_ms,forward_backward_ms", &rows)?;
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

fn cap_threads() {
    if let Some(n) = std::env::var("FREQFORMER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails harmlessly if a pool already exists in this process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    cap_threads();
    if let Command::Forecast { checkpoint, input, output } = &cli.command {
        return cmd_forecast(checkpoint, input, output);
    }
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Forecast { .. } => unreachable!("handled above"),
        Command::Ablate { study, modes, single_kernel } => cmd_ablate(&cfg, *study, modes, *single_kernel),
        Command::Analyze(a) => cmd_analyze(&cfg, a),
    }
}

/// Exit code for an error: 2 for divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 2,
        _ => 1,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
