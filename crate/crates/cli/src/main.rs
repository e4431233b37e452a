//! Operator entry point: train, evaluate, gradient-audit, parameter-audit,
//! and degeneracy checks for the multi-scale 2D recurrent network library.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! abort, 5 verification failure (gradcheck / degencheck deviation).

use clap::{Args, Parser, Subcommand};
use hrnn_core::config::{
    apply_override, emit_run_config, parse_raw, run_config_from_raw, RawConfig, RunConfig,
    TaskKind,
};
use hrnn_core::data::{
    gen_context_task, load_checkpoint, load_idx, normalize_pair, save_checkpoint, Dataset,
};
use hrnn_core::error::Error;
use hrnn_core::hrnn::{count_parameters, hrnn_forward, CellKind, HrnnWeights};
use hrnn_core::model::{gradcheck_against, model_analytic_grads, Model, ModelConfig};
use hrnn_core::train::{evaluate, train_loop, MetricsLog, TrainSession};
use hrnn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "hrnn", version, about = "Multi-scale four-directional 2D recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check every parameter-group gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Report transformation-matrix counts and parameter totals.
    Audit(AuditArgs),
    /// Verify that the degenerate configuration collapses to scaled pooling.
    Degencheck(DegencheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat key=value text with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch parallelism (overrides train.threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Recurrent cell kind (overrides model.cell).
    #[arg(long)]
    cell: Option<String>,
    /// Pyramid scales, comma separated (overrides model.scales).
    #[arg(long)]
    scales: Option<String>,
    /// Data source (overrides data.task).
    #[arg(long)]
    task: Option<String>,
    /// Dotted key=value overrides, e.g. model.hidden=16.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw: RawConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_raw(&text)?
            }
            None => RawConfig::new(),
        };
        if let Some(cell) = &self.cell {
            apply_override(&mut raw, &format!("model.cell={cell}"))?;
        }
        if let Some(scales) = &self.scales {
            apply_override(&mut raw, &format!("model.scales={scales}"))?;
        }
        if let Some(seed) = self.seed {
            apply_override(&mut raw, &format!("train.seed={seed}"))?;
        }
        if let Some(threads) = self.threads {
            apply_override(&mut raw, &format!("train.threads={threads}"))?;
        }
        if let Some(task) = &self.task {
            apply_override(&mut raw, &format!("data.task={task}"))?;
        }
        for o in &self.overrides {
            apply_override(&mut raw, o)?;
        }
        let cfg = run_config_from_raw(&raw)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for metrics, run log, and checkpoint.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Cell kind to check; both when omitted.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width (H = D), at most 8.
    #[arg(long, default_value_t = 6)]
    hidden: usize,
    /// Finest scanned grid size, at most 4.
    #[arg(long, default_value_t = 3)]
    grid: usize,
    /// Deliberately corrupt one analytic gradient (self-test of the failure path).
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct AuditArgs {
    /// Use the reference configuration: H = D = 256, scales 1,2,3,6.
    #[arg(long)]
    paper: bool,
    #[arg(long, default_value = "srn")]
    cell: String,
    #[arg(long, default_value = "1,2,3,6")]
    scales: String,
    #[arg(long, default_value_t = 24)]
    hidden: usize,
}

#[derive(Args)]
struct DegencheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Plant one nonzero recurrent weight (self-test of the failure path).
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn log_level() -> u8 {
    match std::env::var("HRNN_LOG").as_deref() {
        Ok("quiet") | Ok("off") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Shape { .. } | Error::Contract { .. } => 2,
        Error::Data { .. }
        | Error::Io(_)
        | Error::Checkpoint { .. }
        | Error::LabelOutOfRange { .. } => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Degencheck(args) => cmd_degencheck(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

// Stream tags for dataset generation; weight init owns a third stream.
const TAG_DATA_TRAIN: u64 = 0x4441_5452;
const TAG_DATA_VAL: u64 = 0x4441_5641;
const TAG_INIT: u64 = 0x494e_4954;

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.task {
        TaskKind::Synthetic => {
            if cfg.model.classes != 2 {
                return Err(Error::config(
                    "synthetic task has 2 classes; set model.classes = 2",
                ));
            }
            let train =
                gen_context_task(cfg.data.n_train, derive_seed(cfg.train.seed, TAG_DATA_TRAIN));
            let val = gen_context_task(cfg.data.n_val, derive_seed(cfg.train.seed, TAG_DATA_VAL));
            Ok((train, val))
        }
        TaskKind::Idx => {
            let need = |name: &str, p: &Option<PathBuf>| {
                p.clone()
                    .ok_or_else(|| Error::data(format!("idx task requires data.{name}")))
            };
            let train = load_idx(
                &need("train_images", &cfg.data.train_images)?,
                &need("train_labels", &cfg.data.train_labels)?,
                cfg.model.classes,
            )?;
            let val = load_idx(
                &need("val_images", &cfg.data.val_images)?,
                &need("val_labels", &cfg.data.val_labels)?,
                cfg.model.classes,
            )?;
            Ok((train, val))
        }
    }
}

fn echo_config(cfg: &RunConfig, out_dir: Option<&PathBuf>) -> Result<()> {
    let text = emit_run_config(cfg);
    if log_level() >= 1 {
        print!("{text}");
        println!("# effective configuration above; seed = {}", cfg.train.seed);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
        std::fs::write(dir.join("run.log"), &text)
            .map_err(|e| Error::data(format!("cannot write run log: {e}")))?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    echo_config(&cfg, Some(&args.out))?;

    let (mut train, mut val) = load_datasets(&cfg)?;
    let pixel_mean = normalize_pair(&mut train, &mut val);

    let mut sess = match &args.resume {
        Some(path) => {
            let sess = load_checkpoint(path)?;
            if sess.model.config != cfg.model {
                return Err(Error::config(
                    "checkpoint model configuration does not match the requested one",
                ));
            }
            sess
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, TAG_INIT));
            let model = Model::<f32>::init(cfg.model.clone(), &mut rng)?;
            let mut sess = TrainSession::new(model, &cfg.train);
            sess.pixel_mean = pixel_mean;
            sess
        }
    };

    let mut log = MetricsLog::with_file(log_level() >= 1, &args.out.join("metrics.log"))?;
    train_loop(&mut sess, &train, &val, &cfg.train, &mut log)?;

    let final_eval = evaluate(&sess.model, &val)?;
    if log_level() >= 1 {
        match final_eval.top5 {
            Some(t5) => println!("final top1={:.6} top5={t5:.6}", final_eval.top1),
            None => println!("final top1={:.6}", final_eval.top1),
        }
    }
    let ckpt = args.out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &sess)?;
    if log_level() >= 1 {
        println!("checkpoint written to {}", ckpt.display());
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let sess = load_checkpoint(&args.checkpoint)?;
    echo_config(&cfg, None)?;

    let (_, mut val) = load_datasets(&cfg)?;
    // Normalization must reuse the training-split mean stored with the model.
    val.subtract_mean(sess.pixel_mean);
    let metrics = evaluate(&sess.model, &val)?;
    match metrics.top5 {
        Some(t5) => println!(
            "top1={:.6} top5={t5:.6} loss={:.6}",
            metrics.top1, metrics.mean_loss
        ),
        None => println!("top1={:.6} loss={:.6}", metrics.top1, metrics.mean_loss),
    }
    Ok(0)
}

fn gradcheck_config(cell: CellKind, hidden: usize, grid: usize) -> ModelConfig {
    use hrnn_core::convnet::{ConvLayerSpec, PoolSpec};
    ModelConfig {
        input: (1, 2 * grid + 2, 2 * grid + 2),
        conv: vec![ConvLayerSpec {
            out_channels: hidden,
            kernel: 3,
            stride: 1,
            padding: 1,
            relu: true,
            pool: Some(PoolSpec { window: 2, stride: 2 }),
        }],
        scales: vec![1, grid],
        hidden,
        cell,
        fc: vec![8],
        classes: 3,
        dropout: 0.0,
        freeze_spatial: false,
        freeze_cross: false,
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    if args.hidden > 8 {
        return Err(Error::config(format!(
            "gradcheck hidden width {} exceeds the enforced maximum of 8",
            args.hidden
        )));
    }
    if args.grid > 4 || args.grid < 2 {
        return Err(Error::config(format!(
            "gradcheck grid size {} must be between 2 and 4",
            args.grid
        )));
    }
    let cells: Vec<CellKind> = match &args.cell {
        Some(c) => vec![c.parse()?],
        None => vec![CellKind::Srn, CellKind::Lstm],
    };
    println!(
        "# gradcheck seed = {} hidden = {} grid = {}x{}",
        args.seed, args.hidden, args.grid, args.grid
    );

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let mut all_ok = true;
    for cell in cells {
        let config = gradcheck_config(cell, args.hidden, args.grid);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, TAG_INIT));
        let model = Model::<f64>::init(config.clone(), &mut rng)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, TAG_DATA_TRAIN));
        let samples: Vec<(hrnn_core::tensor::Tensor<f64>, u32)> = (0..2)
            .map(|i| {
                let n = config.input.0 * config.input.1 * config.input.2;
                let img = hrnn_core::tensor::Tensor::new(
                    vec![config.input.0, config.input.1, config.input.2],
                    (0..n).map(|_| data_rng.gen_range(-1.0..1.0)).collect(),
                )
                .expect("sample shape");
                (img, (i % 3 + 1) as u32)
            })
            .collect();

        let mut analytic = model_analytic_grads(&model, &samples)?;
        if args.corrupt {
            // Negative control: poison one coordinate of one analytic group.
            analytic.set_param("head.out.bias", 0, 123.456);
        }
        let reports = gradcheck_against(&model, &samples, &analytic, EPS)?;
        for report in &reports {
            if log_level() >= 2 {
                println!(
                    "{}: group {} worst_rel={:.3e} at [{}]",
                    cell.name(),
                    report.name,
                    report.worst_rel,
                    report.worst_index
                );
            }
            if !report.passes(TOL) {
                all_ok = false;
                eprintln!(
                    "FAIL {}: group {} coordinate {} rel error {:.3e} > {TOL:.1e}",
                    cell.name(),
                    report.name,
                    report.worst_index,
                    report.worst_rel
                );
            }
        }
        let worst = reports.iter().fold(0.0f64, |acc, r| acc.max(r.worst_rel));
        println!(
            "{}: {} groups checked, worst rel error {:.3e}",
            cell.name(),
            reports.len(),
            worst
        );
    }
    if all_ok {
        println!("gradcheck: all parameter groups within {TOL:.0e}");
        Ok(0)
    } else {
        Ok(5)
    }
}

fn cmd_audit(args: AuditArgs) -> Result<i32> {
    let cell: CellKind = args.cell.parse()?;
    let (scales, hidden) = if args.paper {
        (vec![1, 2, 3, 6], 256)
    } else {
        let scales = args
            .scales
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad scale '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        (scales, args.hidden)
    };
    let scales_str: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
    println!(
        "# audit cell = {} scales = {} hidden = {}",
        cell.name(),
        scales_str.join(","),
        hidden
    );
    let counts = count_parameters(&scales, hidden, cell);
    println!("biases={} bias_params={}", counts.biases, counts.bias_params);
    println!("matrices={} params={}", counts.matrices, counts.matrix_params);
    Ok(0)
}

fn cmd_degencheck(args: DegencheckArgs) -> Result<i32> {
    use hrnn_core::convnet::{FeatureGrid, ScalePyramid};

    println!("# degencheck seed = {} trials = {}", args.seed, args.trials);
    let scales = [1usize, 2, 3, 6];
    let hidden = 24;
    let mut weights = HrnnWeights::<f32>::zeros(&scales, hidden, hidden, CellKind::Srn);
    weights.visit_mut(&mut |name, t| {
        if name.ends_with(".w_x") {
            *t = hrnn_core::tensor::Tensor::eye(hidden);
        }
    });
    if args.corrupt {
        weights.visit_mut(&mut |name, t| {
            if name == "level2.se.w_row" {
                t.data_mut()[0] = 0.5;
            }
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst = 0.0f32;
    for trial in 0..args.trials {
        // Trial 0 exercises the all-zero pyramid; the rest are random.
        let levels: Vec<FeatureGrid<f32>> = scales
            .iter()
            .map(|&s| {
                let data: Vec<f32> = (0..s * s * hidden)
                    .map(|_| if trial == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) })
                    .collect();
                FeatureGrid::from_data(s, s, hidden, data).expect("grid shape")
            })
            .collect();
        let pyramid = ScalePyramid { levels };
        let (outputs, _) = hrnn_forward(&pyramid, &weights, None)?;
        for (li, grid) in pyramid.levels.iter().enumerate() {
            if grid.cells() == 1 {
                continue;
            }
            for (got, &x) in outputs[li].data().iter().zip(grid.data()) {
                let expect = 4.0 * x.max(0.0);
                let dev = (got - expect).abs();
                if dev > worst {
                    worst = dev;
                }
            }
        }
    }
    println!(
        "degencheck: max abs deviation {worst:.3e} over {} trials",
        args.trials
    );
    if worst <= 1e-6 {
        println!("degencheck: ok");
        Ok(0)
    } else {
        eprintln!("FAIL degencheck: deviation {worst:.3e} > 1e-6");
        Ok(5)
    }
}
