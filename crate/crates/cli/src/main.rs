//! `vidmod`: data generation, training, evaluation, cost analysis, gradient
//! checking and baseline comparison. Every subcommand reads an optional flat
//! TOML config; flags override it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidmod_core::config::RunConfig;
use vidmod_core::costmodel::{
    cache_csv, cache_report, cache_sweep, decoder_flops, flops_csv, flops_sweep, sweep_csv, CostConfig,
};
use vidmod_core::harness::{
    baseline_entries, eval_streaming, eval_teacher_forced, gradcheck_model, run_suite_on, suite_csv, train,
    ModelResponder, Responder, SuiteData, GRADCHECK_TOL,
};
use vidmod_core::model::{Insertion, LayerSchedule, Model};
use vidmod_core::objective::TrainingLog;
use vidmod_core::router::{write_decisions, RouterDecision};
use vidmod_core::sequence::interleave;
use vidmod_core::Error;

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "vidmod",
    version,
    about = "Mixture-of-depths routing lab for streaming video-language decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML run config; missing keys take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set keep_ratio=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run directory is created beneath it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and evaluation streams as JSON lines.
    GenData(Common),
    /// Train and write a checkpoint and the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Streaming evaluation of a checkpoint; writes routing records.
    EvalStream {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<run>/model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Teacher-forced evaluation of a checkpoint.
    EvalTf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FLOPs of a schedule relative to full computation.
    Flops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Key/value-cache footprint and frames that fit a budget.
    Cache {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cost: CostArgs,
        /// Budget in GiB.
        #[arg(long, default_value_t = 16.0)]
        budget_gib: f64,
    },
    /// Finite-difference check of the streaming loss through a routed model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every baseline on shared data.
    Compare(Common),
}

#[derive(Args, Clone)]
struct CostArgs {
    /// Keep ratio.
    #[arg(long)]
    r: Option<f64>,
    /// Insertion strategy (`all`, `interleaved`, `early-exit:2`, ...) or a
    /// per-layer list such as `V,M(0.2),S`.
    #[arg(long)]
    schedule: Option<String>,
    /// 32 layers, d = 4096, m = 14336, 600 frames of 10 tokens, bf16.
    #[arg(long)]
    reference_scale: bool,
    /// Sweep r over 0.1, 0.2, ..., 1.0 with the insertion strategy fixed.
    #[arg(long)]
    sweep: bool,
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.sets {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and echoes the resolved config into it.
fn run_dir(cfg: &RunConfig, common: &Common) -> CliResult<PathBuf> {
    let dir = cfg.run_dir(&cfg.output_root(common.out.as_deref()));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write_jsonl<S: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> CliResult<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn load_checkpoint(dir: &Path, explicit: Option<&Path>) -> CliResult<Model<f32>> {
    let path = explicit.map_or_else(|| dir.join("model"), Path::to_path_buf);
    if !path.is_dir() {
        return Err(format!("missing checkpoint at {}", path.display()).into());
    }
    Ok(Model::load(&path)?)
}

fn cost_config(cfg: &RunConfig, args: &CostArgs) -> CliResult<(CostConfig, Insertion)> {
    let r = args.r.unwrap_or(cfg.keep_ratio);
    let (insertion, custom) = match &args.schedule {
        None => (cfg.insertion, None),
        Some(s) => match s.parse::<Insertion>() {
            Ok(i) => (i, None),
            Err(_) => (cfg.insertion, Some(s.parse::<LayerSchedule>()?)),
        },
    };
    let mut cost = if args.reference_scale {
        CostConfig::reference_scale(insertion, r)
    } else {
        let text = (cfg.duration as f64 * cfg.event_prob * (cfg.response_len + 1) as f64).round() as usize;
        CostConfig::new(
            cfg.layers,
            cfg.hidden,
            cfg.ffn,
            text,
            cfg.duration * cfg.frame_tokens,
            cfg.frame_tokens,
            insertion,
            r,
            4,
        )
    };
    if let Some(schedule) = custom {
        if args.sweep {
            return Err("--sweep needs an insertion strategy, not a per-layer list".into());
        }
        if schedule.len() != cost.schedule.len() {
            return Err(format!(
                "schedule has {} layers, model has {}",
                schedule.len(),
                cost.schedule.len()
            )
            .into());
        }
        cost = cost.with_schedule(schedule);
    }
    Ok((cost, insertion))
}

const SWEEP: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let data = SuiteData::generate(&cfg.suite_config())?;
            write_jsonl(&dir.join("train.jsonl"), &data.train)?;
            write_jsonl(&dir.join("eval.jsonl"), data.eval.iter().map(|(s, _)| s))?;
            write_jsonl(&dir.join("eval_truth.jsonl"), data.eval.iter().map(|(_, t)| t))?;
            println!(
                "wrote {} training and {} evaluation streams to {}",
                data.train.len(),
                data.eval.len(),
                dir.display()
            );
            println!("data_hash {}", data.hash());
        }
        Command::Train { mut common, steps } => {
            if let Some(s) = steps {
                common.sets.push(format!("steps={s}"));
            }
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let data = SuiteData::generate(&cfg.suite_config())?;
            let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed)?;
            let mut log = TrainingLog::create(&dir.join("train_log.csv"))?;
            let report = train(&mut model, &data.train, &cfg.train_config(), Some(&mut log))?;
            model.save(&dir.join("model"))?;
            match report.losses.last() {
                Some(l) => println!("trained {} steps, final loss {:.6}", report.losses.len(), l.total),
                None => println!("trained 0 steps"),
            }
            println!("checkpoint {}", dir.join("model").display());
        }
        Command::EvalTf { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let model = load_checkpoint(&dir, checkpoint.as_deref())?;
            let data = SuiteData::generate(&cfg.suite_config())?;
            let seqs = data
                .eval
                .iter()
                .map(|(s, _)| interleave(s, cfg.frame_tokens))
                .collect::<Result<Vec<_>, Error>>()?;
            let m = eval_teacher_forced(&model, &seqs)?;
            let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
            let csv = format!(
                "lm_ppl,lm_correctness,positions\n{},{},{}\n",
                cell(m.lm_ppl),
                cell(m.lm_correctness),
                m.positions
            );
            fs::write(dir.join("eval_tf.csv"), &csv)?;
            print!("{csv}");
        }
        Command::EvalStream { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let model = load_checkpoint(&dir, checkpoint.as_deref())?;
            let data = SuiteData::generate(&cfg.suite_config())?;
            let mut recorder = Recording {
                inner: ModelResponder::new(&model),
                decisions: Vec::new(),
            };
            let m = eval_streaming(&mut recorder, &data.eval, &cfg.stream_eval_config())?;
            write_decisions(&dir.join("decisions.jsonl"), &recorder.decisions)?;
            let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
            let csv = format!(
                "time_diff,fluency,router_precision,events,matched,responses\n{:.6},{:.6},{},{},{},{}\n",
                m.time_diff,
                m.fluency,
                cell(m.router_precision),
                m.events,
                m.matched,
                m.responses
            );
            fs::write(dir.join("eval_stream.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Flops { common, cost } => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let (cc, insertion) = cost_config(&cfg, &cost)?;
            let csv = if cost.sweep {
                sweep_csv("flops_ratio", &flops_sweep(&cc, insertion, &SWEEP)?)
            } else {
                let report = decoder_flops(&cc)?;
                println!("flops_ratio {:.4}", report.ratio_vs_full);
                flops_csv(&report)
            };
            fs::write(dir.join("flops.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Cache {
            common,
            cost,
            budget_gib,
        } => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let (cc, insertion) = cost_config(&cfg, &cost)?;
            if budget_gib.is_nan() || budget_gib <= 0.0 {
                return Err("--budget-gib must be positive".into());
            }
            let budget = (budget_gib * (1u64 << 30) as f64) as u64;
            let csv = if cost.sweep {
                sweep_csv("cache_multiplier", &cache_sweep(&cc, insertion, &SWEEP, budget)?)
            } else {
                let report = cache_report(&cc, cc.frames(), budget)?;
                println!("cache_multiplier {:.4}", report.context_multiplier);
                cache_csv(&report)
            };
            fs::write(dir.join("cache.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { seed } => {
            let g = gradcheck_model(seed)?;
            for p in &g.report.per_param {
                println!(
                    "{:<24} max_rel_err {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                    p.name, p.max_rel_err, p.worst_index, p.worst_analytic, p.worst_numeric
                );
            }
            println!(
                "max_rel_err {:.3e} router_grad_norm {:.3e}",
                g.report.max_rel_err, g.router_grad_norm
            );
            if !g.passes() {
                return Err(format!(
                    "gradient check failed: max relative error {:.3e} (tolerance {GRADCHECK_TOL:e}), router gradient norm {:.3e}",
                    g.report.max_rel_err, g.router_grad_norm
                )
                .into());
            }
        }
        Command::Compare(common) => {
            let cfg = resolve(&common)?;
            let dir = run_dir(&cfg, &common)?;
            let suite = cfg.suite_config();
            let data = SuiteData::generate(&suite)?;
            let report = run_suite_on(&baseline_entries(&cfg.model_config()), &suite, &data)?;
            let csv = suite_csv(&report);
            fs::write(dir.join("metrics.csv"), &csv)?;
            println!("data_hash {}", report.data_hash);
            print!("{csv}");
        }
    }
    Ok(())
}

/// Keeps every routing record the wrapped responder produces.
struct Recording<R> {
    inner: R,
    decisions: Vec<RouterDecision>,
}

impl<R: Responder> Responder for Recording<R> {
    fn begin(&mut self, truth: &vidmod_core::harness::GroundTruth) -> Result<(), Error> {
        self.inner.begin(truth)
    }

    fn observe_frame(&mut self, frame_id: usize, tokens: &[usize]) -> Result<Vec<RouterDecision>, Error> {
        let d = self.inner.observe_frame(frame_id, tokens)?;
        self.decisions.extend(d.iter().cloned());
        Ok(d)
    }

    fn observe_prompt(&mut self, token: usize) -> Result<(), Error> {
        self.inner.observe_prompt(token)
    }

    fn respond(&mut self, max_len: usize) -> Result<vidmod_core::model::Response, Error> {
        self.inner.respond(max_len)
    }

    fn has_room(&self, frame_tokens: usize) -> bool {
        self.inner.has_room(frame_tokens)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
