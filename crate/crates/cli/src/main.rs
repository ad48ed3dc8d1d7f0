use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dualenc::checkpoint::{load_checkpoint, load_targets, save_checkpoint, save_targets};
use dualenc::clustering::purity;
use dualenc::config::ExperimentConfig;
use dualenc::encoders::Model;
use dualenc::eval::{abx_eval, frame_embedding, train_probe, utterance_purity, ProbeSource, ProbeTarget};
use dualenc::gradcheck::loss_gradient_suite;
use dualenc::miclub::{club_gaussian_oracle, exact_conditional_club, MiMode, OracleConfig};
use dualenc::synth::{generate_abx_triplets, generate_corpus, read_corpus, write_corpus, Corpus};
use dualenc::trainer::{
    bootstrap_targets, make_targets, stage1_frame, stage1_utt, stage2_joint, Stage, StepLog, TrainState,
};

#[derive(Parser)]
#[command(name = "dualenc", version, about = "Dual frame/utterance encoder training on synthetic sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config, TOML or JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides synth.seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override of train.lambda.
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Override of train.mi_mode.
    #[arg(long, global = true, value_enum)]
    mi_mode: Option<MiModeArg>,
    /// Override of train.disentangle.
    #[arg(long, global = true, value_enum)]
    disentangle: Option<Switch>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MiModeArg {
    Aggregated,
    Final,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Frame,
    Utt,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Phone,
    Speaker,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Frame,
    Utt,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus file.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 training of one branch.
    Pretrain {
        #[arg(value_enum)]
        branch: Branch,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to start from; required for the utt branch.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Cluster stage-1 representations into frame and utterance targets.
    ClusterTargets {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 joint training with the MI penalty; resumes stage-2 checkpoints.
    TrainJoint {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        which: EvalCmd,
    },
    /// Finite-difference check of every loss; fails above 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CLUB estimate against analytic MI on correlated Gaussians.
    MiOracle {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.9])]
        rho: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// ABX error of the last frame-encoder layer (raw frames without --ckpt).
    Abx {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe accuracy.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "speaker")]
        target: TargetArg,
        #[arg(long, value_enum, default_value = "frame")]
        source: SourceArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speaker purity of utterance clusters, and target purities with --targets.
    Purity {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    hash: String,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => {
                require(p)?;
                ExperimentConfig::load(p)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(l) = c.lambda {
            cfg.train.lambda = l;
        }
        if let Some(m) = c.mi_mode {
            cfg.train.mi_mode = match m {
                MiModeArg::Aggregated => MiMode::Aggregated,
                MiModeArg::Final => MiMode::FinalOnly,
            };
        }
        if let Some(d) = c.disentangle {
            cfg.train.disentangle = matches!(d, Switch::On);
        }
        if let Some(s) = c.seed {
            cfg.synth.seed = s;
        }
        cfg.validate()?;
        let hash = cfg.config_hash();
        Ok(Ctx {
            seed: cfg.synth.seed,
            hash,
            cfg,
        })
    }

    fn record(&self, metric: &str, value: Value, extra: Value) -> Value {
        let mut r = json!({ "metric": metric, "value": value, "config_hash": self.hash, "seed": self.seed });
        if let (Value::Object(m), Value::Object(e)) = (&mut r, extra) {
            m.extend(e);
        }
        r
    }

    fn corpus(&self, path: &Path) -> Result<Corpus> {
        require(path)?;
        let corpus = read_corpus(path)?;
        if corpus.feat_dim != self.cfg.synth.feat_dim {
            bail!(dualenc::Error::Config(format!(
                "corpus has {} feature dims, config expects {}",
                corpus.feat_dim, self.cfg.synth.feat_dim
            )));
        }
        Ok(corpus)
    }

    fn ckpt(&self, path: &Path) -> Result<TrainState> {
        require(path)?;
        Ok(load_checkpoint(path)?)
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display())).into());
    }
    Ok(())
}

/// Writes records as JSON lines to stdout and, when given, to `out`.
fn emit(records: &[Value], out: Option<&Path>) -> Result<()> {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| with_suffix(out, ".log.jsonl"))
}

/// Saves `st` to `out`, or to `<out>.last-good` when training failed; a
/// failed step leaves the state at the last good step.
fn finish(trained: Result<()>, st: &TrainState, out: &Path) -> Result<()> {
    match trained {
        Ok(()) => Ok(save_checkpoint(out, st)?),
        Err(e) => {
            let p = with_suffix(out, ".last-good");
            save_checkpoint(&p, st)?;
            Err(e.context(format!("last good checkpoint at step {} saved to {}", st.step, p.display())))
        }
    }
}

/// Runs `train` with a JSON-lines logger attached.
fn with_log(
    ctx: &Ctx,
    stage: Stage,
    path: &Path,
    train: impl FnOnce(&mut dyn FnMut(&StepLog) -> dualenc::Result<()>) -> dualenc::Result<()>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let stage_name = format!("{stage:?}");
    let mut on_step = |l: &StepLog| -> dualenc::Result<()> {
        let mut v = serde_json::to_value(l).expect("log serializes");
        if let Value::Object(m) = &mut v {
            m.insert("stage".into(), json!(stage_name));
            m.insert("config_hash".into(), json!(ctx.hash));
            m.insert("seed".into(), json!(ctx.seed));
        }
        writeln!(w, "{v}")?;
        Ok(())
    };
    let out = train(&mut on_step);
    w.flush()?;
    Ok(out?)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.common)?;
    let cfg = &ctx.cfg;
    match cli.cmd {
        Cmd::GenData { out } => {
            let corpus = generate_corpus(&cfg.synth, cfg.synth.num_utts, cfg.synth.mean_frames)?;
            write_corpus(&out, &corpus)?;
            let extra = json!({ "frames": corpus.total_frames(), "path": out });
            emit(&[ctx.record("utterances", json!(corpus.len()), extra)], None)?;
        }
        Cmd::Pretrain {
            branch,
            corpus,
            ckpt,
            out,
            log,
        } => {
            let corpus = ctx.corpus(&corpus)?;
            let log = log_path(&out, log);
            let mut st = match (&ckpt, branch) {
                (Some(p), _) => ctx.ckpt(p)?,
                (None, Branch::Frame) => {
                    let model = Model::new(&cfg.model, corpus.feat_dim, ctx.seed)?;
                    TrainState::new(model, cfg.train.adam, ctx.seed, &ctx.hash)
                }
                (None, Branch::Utt) => bail!(dualenc::Error::Config("pretrain utt needs --ckpt".into())),
            };
            let (stage, steps) = match branch {
                Branch::Frame => {
                    let boot = bootstrap_targets(&corpus, cfg.model.num_frame_targets, &cfg.train, ctx.seed)?;
                    let r = with_log(&ctx, Stage::Stage1Frame, &log, |f| stage1_frame(&mut st, &corpus, &cfg.train, &boot, f));
                    finish(r, &st, &out)?;
                    (Stage::Stage1Frame, cfg.train.steps_stage1_frame)
                }
                Branch::Utt => {
                    let r = with_log(&ctx, Stage::Stage1Utt, &log, |f| stage1_utt(&mut st, &corpus, &cfg.train, f));
                    finish(r, &st, &out)?;
                    (Stage::Stage1Utt, cfg.train.steps_stage1_utt)
                }
            };
            let extra = json!({ "stage": format!("{stage:?}"), "path": out, "log": log });
            emit(&[ctx.record("steps", json!(steps), extra)], None)?;
        }
        Cmd::ClusterTargets { corpus, ckpt, out } => {
            let corpus = ctx.corpus(&corpus)?;
            let st = ctx.ckpt(&ckpt)?;
            let (t, sweep) = make_targets(&corpus, &st.model, cfg.model.num_frame_targets, &cfg.train, ctx.seed)?;
            save_targets(&out, &t)?;
            let mut recs = vec![ctx.record("q", json!(t.q), json!({ "k": t.k, "path": out }))];
            if let Some(s) = sweep {
                recs.push(ctx.record("q_sweep", serde_json::to_value(&s)?, json!({})));
            }
            emit(&recs, None)?;
        }
        Cmd::TrainJoint {
            corpus,
            ckpt,
            targets,
            out,
            log,
        } => {
            let corpus = ctx.corpus(&corpus)?;
            let mut st = ctx.ckpt(&ckpt)?;
            require(&targets)?;
            let t = load_targets(&targets)?;
            let log = log_path(&out, log);
            let r = with_log(&ctx, Stage::Stage2, &log, |f| stage2_joint(&mut st, &corpus, &cfg.train, &t, f));
            finish(r, &st, &out)?;
            let extra = json!({
                "lambda": cfg.train.effective_lambda(),
                "mi_mode": cfg.train.mi_mode,
                "path": out,
                "log": log,
            });
            emit(&[ctx.record("steps", json!(st.step), extra)], None)?;
        }
        Cmd::Eval { which } => eval(&ctx, which)?,
        Cmd::Gradcheck { configs, out } => {
            let reports = loss_gradient_suite(configs, ctx.seed)?;
            let recs: Vec<Value> = reports
                .iter()
                .map(|r| {
                    let pass = r.max_rel_error <= 1e-4;
                    ctx.record("max_rel_error", json!(r.max_rel_error), json!({ "loss": r.loss, "configs": r.configs, "pass": pass }))
                })
                .collect();
            emit(&recs, out.as_deref())?;
            if let Some(r) = reports.iter().find(|r| r.max_rel_error > 1e-4) {
                bail!(dualenc::Error::Numeric(format!("{} gradient error {:.2e} above 1e-4", r.loss, r.max_rel_error)));
            }
        }
        Cmd::MiOracle { rho, dims, out } => {
            let oc = OracleConfig::default();
            let recs = rho
                .iter()
                .map(|&r| {
                    let o = club_gaussian_oracle(r, dims, ctx.seed, &oc)?;
                    Ok(ctx.record(
                        "club_estimate",
                        json!(o.estimate),
                        json!({
                            "rho": r,
                            "dims": dims,
                            "analytic_mi": o.analytic,
                            "exact_conditional_club": exact_conditional_club(r, dims),
                            "final_nll": o.final_nll,
                        }),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(&recs, out.as_deref())?;
        }
    }
    Ok(())
}

fn eval(ctx: &Ctx, which: EvalCmd) -> Result<()> {
    let cfg = &ctx.cfg;
    match which {
        EvalCmd::Abx { ckpt, out } => {
            let model = ckpt.as_deref().map(|p| ctx.ckpt(p)).transpose()?.map(|s| s.model);
            let n = cfg.eval.abx_triplets;
            let within = generate_abx_triplets(&cfg.synth, n, true)?;
            let across = generate_abx_triplets(&cfg.synth, n, false)?;
            let r = match &model {
                Some(m) => abx_eval(&within, &across, |u| frame_embedding(m, u))?,
                None => abx_eval(&within, &across, |u| Ok(u.frames_tensor()))?,
            };
            let src = json!({ "source": if model.is_some() { "frame_encoder" } else { "raw_frames" } });
            emit(
                &[
                    ctx.record("abx_within", json!(r.within_error), src.clone()),
                    ctx.record("abx_across", json!(r.across_error), src),
                ],
                out.as_deref(),
            )?;
        }
        EvalCmd::Probe {
            corpus,
            ckpt,
            target,
            source,
            out,
        } => {
            let corpus = ctx.corpus(&corpus)?;
            let st = ctx.ckpt(&ckpt)?;
            let target = match target {
                TargetArg::Phone => ProbeTarget::Phone,
                TargetArg::Speaker => ProbeTarget::Speaker,
            };
            let source = match source {
                SourceArg::Frame => ProbeSource::FrameEnc,
                SourceArg::Utt => ProbeSource::UttEnc,
            };
            let acc = train_probe(&corpus, &st.model, &cfg.eval.probe(target, source), ctx.seed)?;
            let extra = json!({ "target": target, "source": source });
            emit(&[ctx.record("probe_accuracy", json!(acc), extra)], out.as_deref())?;
        }
        EvalCmd::Purity {
            corpus,
            ckpt,
            targets,
            out,
        } => {
            let corpus = ctx.corpus(&corpus)?;
            let st = ctx.ckpt(&ckpt)?;
            let q = cfg.eval.purity_clusters.unwrap_or(cfg.synth.num_speakers);
            let p = utterance_purity(&corpus, &st.model, q, cfg.train.kmeans_iters, ctx.seed)?;
            let mut recs = vec![ctx.record("utterance_speaker_purity", json!(p), json!({ "clusters": q }))];
            if let Some(path) = targets {
                require(&path)?;
                let t = load_targets(&path)?;
                t.check_against(&corpus)?;
                let frame: Vec<usize> = t.frame.iter().flatten().map(|&c| c as usize).collect();
                let phones: Vec<usize> = corpus
                    .utterances
                    .iter()
                    .flat_map(|u| u.phone_labels.iter().map(|&p| p as usize))
                    .collect();
                let fp = 100.0 * purity(&frame, &phones)?;
                recs.push(ctx.record("frame_target_phone_purity", json!(fp), json!({ "clusters": t.k })));
                if !t.utt.is_empty() {
                    let utt: Vec<usize> = t.utt.iter().map(|&c| c as usize).collect();
                    let spk: Vec<usize> = corpus.utterances.iter().map(|u| u.speaker_id as usize).collect();
                    let up = 100.0 * purity(&utt, &spk)?;
                    recs.push(ctx.record("utt_target_speaker_purity", json!(up), json!({ "clusters": t.q })));
                }
            }
            emit(&recs, out.as_deref())?;
        }
    }
    Ok(())
}

/// Exit code and error kind: 2 missing file, 3 invalid config, 4 divergence.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<dualenc::Error>() {
            return match d {
                dualenc::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (2, "missing_file"),
                dualenc::Error::Config(_) => (3, "invalid_config"),
                dualenc::Error::Numeric(_) => (4, "divergence"),
                _ => (1, "error"),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return (2, "missing_file");
            }
        }
    }
    (1, "error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = format!("{e:#}");
            eprintln!("{}", json!({ "error": kind, "code": code, "message": msg }));
            ExitCode::from(code)
        }
    }
}
