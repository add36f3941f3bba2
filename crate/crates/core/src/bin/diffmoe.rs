use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use diffmoe::backbone::BackboneParams;
use diffmoe::harness::gradcheck::{backbone_check, layer_suite, report_csv};
use diffmoe::harness::reports::{kshot_csv, ErrorSource};
use diffmoe::harness::train::{initial_params, write_loss_csv};
use diffmoe::harness::{
    compare_kshot, error_report, impute, load_checkpoint, load_signals, save_checkpoint, save_signals,
    synth_generate, theorem_check, train, RunConfig, SignalFormat,
};
use diffmoe::metrics::evaluate;
use diffmoe::tensor_core::{tsb1, Tensor};
use diffmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "diffmoe", version, about = "Conditional diffusion imputation with mixture-of-experts layers")]
struct Cli {
    /// Run configuration (key = value lines); toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs; relative config paths resolve against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsb1,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Shots,
    Experts,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Signals to work on; defaults to the configured data path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint; defaults to the configured checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use freshly initialized parameters instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    untrained: bool,
    /// Only use the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value = "tsb1")]
        format: Format,
        /// Number of samples; defaults to the configured count.
        #[arg(long)]
        samples: Option<usize>,
        /// Output path; defaults to the configured data path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the estimator and write a checkpoint and loss curve.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mask signals, reconstruct them, and score the result.
    Impute {
        #[command(flatten)]
        model: ModelArgs,
        /// Sampler runs to average.
        #[arg(long, default_value_t = 1)]
        shots: usize,
    },
    /// Score a reconstruction against the truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Mask whose zeros mark the entries to score.
        #[arg(long)]
        region: Option<PathBuf>,
    },
    /// Missing-region metrics of K-shot averaging for several K.
    CompareKshot {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        shots: Vec<usize>,
    },
    /// Finite-difference audit of every layer and the full loss.
    Gradcheck {
        /// Random points per layer.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Random points for the full-loss check.
        #[arg(long, default_value_t = 1)]
        backbone_points: usize,
    },
    /// Check the fusion identities and sweep gate weights on model estimates.
    TheoremCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Expert counts for the nested sweep; powers of two up to K by default.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Per-timestamp errors of several reconstructions of one channel.
    ErrorDist {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "shots")]
        source: Source,
        #[arg(long, default_value_t = 12)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &str) -> PathBuf {
        self.out.join(p)
    }

    fn data(&self, explicit: &Option<PathBuf>, limit: Option<usize>) -> Result<Tensor> {
        let path = explicit.clone().unwrap_or_else(|| self.path(&self.cfg.data_path));
        let x = load_signals(&path, SignalFormat::from_path(&path))?;
        match limit {
            Some(n) if n < x.dim(0) => {
                let stride = x.numel() / x.dim(0);
                Tensor::from_vec(vec![n, x.dim(1), x.dim(2)], x.data()[..n * stride].to_vec())
            }
            _ => Ok(x),
        }
    }

    fn model(&self, args: &ModelArgs) -> Result<BackboneParams> {
        if args.untrained {
            return initial_params(&self.cfg);
        }
        let path = args.checkpoint.clone().unwrap_or_else(|| self.path(&self.cfg.checkpoint_path));
        Ok(load_checkpoint(&self.cfg, &path)?.0)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?;
        Ok(p)
    }
}

fn missing_name(metrics: &str) -> String {
    let p = Path::new(metrics);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    p.with_file_name(format!("{stem}_missing.csv")).display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.display().to_string(),
        source: e,
    })?;
    let ctx = Ctx { cfg, out: cli.out };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Synth { format, samples, output } => {
            let mut syn = cfg.synthetic();
            if let Some(n) = samples {
                syn.n_samples = n;
            }
            let x = synth_generate(&syn)?;
            let (fmt, default) = match format {
                Format::Tsb1 => (SignalFormat::Tsb1, cfg.data_path.clone()),
                Format::Csv => (SignalFormat::Csv, "data_csv".to_string()),
            };
            let path = output.unwrap_or_else(|| ctx.path(&default));
            save_signals(&x, &path, fmt)?;
            println!("wrote {:?} signals to {}", x.shape(), path.display());
        }
        Command::Train { data, resume } => {
            let x = ctx.data(&data, None)?;
            let start = match resume {
                Some(p) => {
                    let (params, optim) = load_checkpoint(cfg, &p)?;
                    let optim = optim.ok_or_else(|| Error::Format {
                        path: p.display().to_string(),
                        location: "records".into(),
                        detail: "checkpoint has no optimizer state to resume from".into(),
                    })?;
                    Some((params, optim))
                }
                None => None,
            };
            let outcome = train(cfg, &x, start)?;
            let ckpt = ctx.path(&cfg.checkpoint_path);
            save_checkpoint(&outcome.params, &outcome.optimizer, &ckpt)?;
            write_loss_csv(&outcome, &ctx.path(&cfg.loss_path))?;
            match (outcome.losses.first(), outcome.losses.last()) {
                (Some(a), Some(b)) => println!("steps {}..{}: loss {} -> {}", a.0, b.0, a.1, b.1),
                _ => println!("nothing to do: {} steps already complete", outcome.optimizer.step),
            }
            println!("checkpoint {}", ckpt.display());
        }
        Command::Impute { model, shots } => {
            let x = ctx.data(&model.data, model.limit)?;
            let params = ctx.model(&model)?;
            let mask = cfg.mask.generate(x.dim(0), x.dim(1), x.dim(2))?;
            let res = impute(&params, &cfg.schedule()?, &x, &mask, shots, cfg.seed)?;
            tsb1::save(&mask, &ctx.path("mask.tsb1"))?;
            let out = ctx.path(&cfg.output_path);
            save_signals(&res.imputed, &out, SignalFormat::from_path(&out))?;
            ctx.write(&cfg.metrics_path, &res.full.to_csv())?;
            println!("full signal: prd {:.4} ssd {:.4} mad {:.4}", res.full.aggregate.prd, res.full.aggregate.ssd, res.full.aggregate.mad);
            match res.missing {
                Ok(m) => {
                    ctx.write(&missing_name(&cfg.metrics_path), &m.to_csv())?;
                    println!("missing region: prd {:.4} ssd {:.4} mad {:.4}", m.aggregate.prd, m.aggregate.ssd, m.aggregate.mad);
                }
                Err(e) => eprintln!("missing-region metrics skipped: {e}"),
            }
        }
        Command::Eval { truth, pred, region } => {
            let x = load_signals(&truth, SignalFormat::from_path(&truth))?;
            let y = load_signals(&pred, SignalFormat::from_path(&pred))?;
            let m = region.map(|p| load_signals(&p, SignalFormat::from_path(&p))).transpose()?;
            let rep = evaluate(&x, &y, m.as_ref())?;
            ctx.write(&cfg.metrics_path, &rep.to_csv())?;
            println!("prd {:.4} ssd {:.4} mad {:.4}", rep.aggregate.prd, rep.aggregate.ssd, rep.aggregate.mad);
        }
        Command::CompareKshot { model, shots } => {
            let x = ctx.data(&model.data, model.limit)?;
            let params = ctx.model(&model)?;
            let mask = cfg.mask.generate(x.dim(0), x.dim(1), x.dim(2))?;
            let rows = compare_kshot(&params, &cfg.schedule()?, &x, &mask, &shots, cfg.seed)?;
            let p = ctx.write("kshot.csv", &kshot_csv(&rows))?;
            println!("wrote {}", p.display());
        }
        Command::Gradcheck { points, backbone_points } => {
            let mut checks = layer_suite(points, cfg.seed)?;
            checks.push(backbone_check(backbone_points, cfg.seed)?);
            let p = ctx.write("gradcheck.csv", &report_csv(&checks))?;
            for c in &checks {
                println!("{:<16} {:>4} points  max error {:.3e}  {}", c.layer, c.points, c.max_error, if c.passed() { "ok" } else { "FAIL" });
            }
            println!("wrote {}", p.display());
            if checks.iter().any(|c| !c.passed()) {
                return Err(Error::Numeric("gradient check exceeded tolerance".into()));
            }
        }
        Command::TheoremCheck { model, trials, counts } => {
            let x = ctx.data(&model.data, model.limit)?;
            let params = ctx.model(&model)?;
            let counts = if counts.is_empty() {
                let k = params.head.num_experts();
                std::iter::successors(Some(1usize), |c| Some(c * 2)).take_while(|&c| c <= k).collect()
            } else {
                counts
            };
            let mask = cfg.mask.generate(x.dim(0), x.dim(1), x.dim(2))?;
            let rep = theorem_check(&params, &cfg.schedule()?, &x, &mask, trials, &counts, cfg.seed)?;
            ctx.write("theorem.csv", &rep.trials_csv())?;
            ctx.write("sweep.csv", &rep.sweep_csv())?;
            let ok = rep.trials.iter().filter(|t| t.passed()).count();
            println!("{ok}/{} trials pass; sweep monotone: {}", rep.trials.len(), rep.sweep_monotone());
            if !rep.passed() {
                return Err(Error::Numeric("fusion identity check failed".into()));
            }
        }
        Command::ErrorDist { model, source, shots, sample, channel } => {
            let x = ctx.data(&model.data, model.limit)?;
            let params = ctx.model(&model)?;
            let mask = cfg.mask.generate(x.dim(0), x.dim(1), x.dim(2))?;
            let src = match source {
                Source::Shots => ErrorSource::Shots(shots),
                Source::Experts => ErrorSource::Experts,
            };
            let table = error_report(&params, &cfg.schedule()?, &x, &mask, src, sample, channel, cfg.seed)?;
            let p = ctx.write("error_dist.csv", &table.to_csv())?;
            println!("wrote {} ({} timestamps); mean-vs-combined gap {:.3e}", p.display(), table.len(), table.mean_gap());
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
