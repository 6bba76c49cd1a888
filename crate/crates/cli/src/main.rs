mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use unshadow_core::dataset::{build_dataset, prepare_sample, PreparedSample};
use unshadow_core::io::{read_pfm, read_pfm_channels, read_png_mask, write_pfm, write_png_mask, write_png_preview};
use unshadow_core::util::{canonical_json, write_atomic};
use unshadow_core::{CoreError, MaskImage};
use unshadow_nn::checkpoint::Checkpoint;
use unshadow_nn::evaluate::{evaluate, write_reports, Method};
use unshadow_nn::pipeline::{run_pipeline, PipelineInput, PipelineState};
use unshadow_nn::train::{load_dataset, train, RunOptions, Stage, CHECKPOINT_FILE};
use unshadow_nn::NnError;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "unshadow", version, about = "Remove an object and its shadow from a photograph")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic training set.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage (ss, id, sr, li) or the whole pipeline (end2end).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the configuration's train.stage.
        #[arg(long)]
        stage: Option<Stage>,
        /// Continue from this stage's last checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Initial weights; defaults to the previous stage's checkpoint in --out, if any.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove the object and its shadow from one image.
    Remove {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        proxy: PathBuf,
        #[arg(long)]
        proxy_removed: PathBuf,
        #[arg(long)]
        mask_object: PathBuf,
        #[arg(long)]
        mask_receiver: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate removal methods on a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated: no-op, inpaint, inpaint+shadow, pipeline.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        kind: Kind::Usage,
        error: e.into(),
    }
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        kind: Kind::Data,
        error: e.into(),
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        data(e)
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let kind = match e {
            NnError::Candle(_) | NnError::Stage { .. } | NnError::Diverged { .. } => Kind::Runtime,
            _ => Kind::Data,
        };
        Failure { kind, error: e.into() }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    config: &'a RunConfig,
}

fn write_run_record(dir: &Path, name: &str, command: &str, cfg: &RunConfig) -> Outcome {
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        config: cfg,
    };
    std::fs::create_dir_all(dir).map_err(|e| data(anyhow!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    let text = canonical_json(&rec).map_err(data)?;
    write_atomic(&path, text.as_bytes()).map_err(|e| data(anyhow!("{}: {e}", path.display())))
}

struct Ctx {
    workdir: PathBuf,
}

impl Ctx {
    fn at(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn config(&self, arg: &ConfigArg) -> Outcome<RunConfig> {
        RunConfig::load(arg.config.as_deref().map(|p| self.at(p)).as_deref()).map_err(usage)
    }
}

fn load_state(path: &Path) -> Outcome<PipelineState> {
    Ok(Checkpoint::load(path)?.to_state(path)?)
}

fn read_mask(path: &Path) -> Outcome<MaskImage> {
    let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        Ok(MaskImage::from_image(&read_pfm(path)?)?)
    } else {
        Ok(read_png_mask(path)?)
    }
}

fn prepared(cfg: &RunConfig, dir: &Path) -> Outcome<Vec<PreparedSample>> {
    load_dataset(dir)?
        .iter()
        .map(|s| prepare_sample(s, None, &cfg.dataset.shadow).map_err(Failure::from))
        .collect()
}

fn gen_data(ctx: &Ctx, config: &ConfigArg, out: &Path, scenes: usize, seed: u64) -> Outcome {
    let cfg = ctx.config(config)?;
    let out = ctx.at(out);
    let manifest = build_dataset(&out, scenes, seed, &cfg.scenegen, &cfg.dataset_config())?;
    write_run_record(&out, "run.json", "gen-data", &cfg)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(ctx: &Ctx, config: &ConfigArg, data_dir: &Path, stage: Option<Stage>, resume: bool, init: Option<&Path>, out: &Path) -> Outcome {
    let cfg = ctx.config(config)?;
    let tcfg = cfg.train_config(stage);
    let out = ctx.at(out);
    let stage_dir = out.join(tcfg.stage.name());
    let samples = load_dataset(&ctx.at(data_dir))?;

    let previous = Stage::ALL
        .iter()
        .position(|&s| s == tcfg.stage)
        .and_then(|k| k.checked_sub(1))
        .map(|k| out.join(Stage::ALL[k].name()).join(CHECKPOINT_FILE));
    let mut state = match init.map(|p| ctx.at(p)).or(previous.filter(|p| p.exists())) {
        Some(path) => {
            log::info!("initial weights from {}", path.display());
            load_state(&path)?
        }
        None => {
            log::info!("initial weights drawn from seed {}", cfg.model.seed);
            PipelineState::new(&cfg.model_config())?
        }
    };
    let run = RunOptions {
        out_dir: Some(stage_dir.clone()),
        resume: resume.then(|| stage_dir.join(CHECKPOINT_FILE)),
    };
    let op = cfg.inpaint();
    let summary = train(&tcfg, &samples, &mut state, &op, &run)?;
    write_run_record(&stage_dir, "run.json", "train", &cfg)?;
    println!(
        "stage {}: {} epochs, {} steps; checkpoint {}",
        tcfg.stage,
        summary.epochs_done,
        summary.steps_done,
        stage_dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

struct RemovePaths<'a> {
    image: &'a Path,
    proxy: &'a Path,
    proxy_removed: &'a Path,
    mask_object: &'a Path,
    mask_receiver: &'a Path,
    checkpoint: &'a Path,
    out: &'a Path,
}

fn remove(ctx: &Ctx, config: &ConfigArg, p: &RemovePaths) -> Outcome {
    let cfg = ctx.config(config)?;
    let i = read_pfm_channels(ctx.at(p.image), 3)?;
    let proxy = read_pfm_channels(ctx.at(p.proxy), 3)?;
    let proxy_removed = read_pfm_channels(ctx.at(p.proxy_removed), 3)?;
    let m_o = read_mask(&ctx.at(p.mask_object))?;
    let m_r = read_mask(&ctx.at(p.mask_receiver))?;
    let dims = [
        ("--proxy", p.proxy, proxy.width(), proxy.height()),
        ("--proxy-removed", p.proxy_removed, proxy_removed.width(), proxy_removed.height()),
        ("--mask-object", p.mask_object, m_o.width(), m_o.height()),
        ("--mask-receiver", p.mask_receiver, m_r.width(), m_r.height()),
    ];
    for (flag, path, w, h) in dims {
        if (w, h) != (i.width(), i.height()) {
            return Err(data(anyhow!(
                "{flag} {} is {w}x{h} but --image is {}x{}",
                path.display(),
                i.width(),
                i.height()
            )));
        }
    }
    let state = load_state(&ctx.at(p.checkpoint))?;
    let input = PipelineInput {
        i: &i,
        p: &proxy,
        p_prime: &proxy_removed,
        m_o: &m_o,
        m_r: &m_r,
    };
    let o = run_pipeline(&input, &state, &cfg.inpaint())?;
    let out = ctx.at(p.out);
    std::fs::create_dir_all(&out).map_err(|e| data(anyhow!("{}: {e}", out.display())))?;
    write_pfm(out.join("i_prime.pfm"), &o.i_prime)?;
    write_png_preview(out.join("i_prime.png"), &o.i_prime, 1.0)?;
    write_pfm(out.join("s.pfm"), &o.s.to_image())?;
    write_png_preview(out.join("s.png"), &o.s.to_image(), 1.0)?;
    for (name, img) in [
        ("l", &o.l),
        ("t", &o.t),
        ("l_r_prime", &o.l_r_prime),
        ("l_o_prime", &o.l_o_prime),
        ("l_prime", &o.l_prime),
        ("t_prime", &o.t_prime),
    ] {
        write_pfm(out.join(format!("{name}.pfm")), img)?;
    }
    write_png_mask(out.join("m_r_prime.png"), &o.m_r_prime)?;
    write_run_record(&out, "run.json", "remove", &cfg)?;
    println!("wrote {}", out.join("i_prime.pfm").display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, config: &ConfigArg, data_dir: &Path, checkpoint: Option<&Path>, methods: Option<&str>, out: &Path) -> Outcome {
    let cfg = ctx.config(config)?;
    let methods = match methods {
        Some(list) => Method::parse_list(list).map_err(usage)?,
        None => Method::parse_list(&cfg.eval.methods.join(",")).map_err(usage)?,
    };
    if methods.is_empty() {
        return Err(usage(anyhow!("no methods given")));
    }
    let state = match checkpoint {
        Some(p) => Some(load_state(&ctx.at(p))?),
        None if methods.contains(&Method::Pipeline) => return Err(usage(anyhow!("method pipeline needs --checkpoint"))),
        None => None,
    };
    let samples = prepared(&cfg, &ctx.at(data_dir))?;
    let op = cfg.inpaint();
    let threshold = cfg.dataset.shadow.binarize_threshold;
    let results = methods
        .iter()
        .map(|&m| evaluate(m, &samples, state.as_ref(), &op, threshold).map_err(Failure::from))
        .collect::<Outcome<Vec<_>>>()?;
    let out = ctx.at(out);
    write_reports(&out, &results, &cfg.hash())?;
    write_run_record(&out, "run.json", "eval", &cfg)?;
    print!("{}", std::fs::read_to_string(out.join("report.txt")).unwrap_or_default());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Failure {
                kind: Kind::Runtime,
                error: e.into(),
            })?;
    }
    let ctx = Ctx { workdir: cli.workdir };
    match &cli.command {
        Command::GenData { config, out, scenes, seed } => gen_data(&ctx, config, out, *scenes, *seed),
        Command::Train {
            config,
            data,
            stage,
            resume,
            init,
            out,
        } => train_cmd(&ctx, config, data, *stage, *resume, init.as_deref(), out),
        Command::Remove {
            config,
            image,
            proxy,
            proxy_removed,
            mask_object,
            mask_receiver,
            checkpoint,
            out,
        } => remove(
            &ctx,
            config,
            &RemovePaths {
                image,
                proxy,
                proxy_removed,
                mask_object,
                mask_receiver,
                checkpoint,
                out,
            },
        ),
        Command::Eval {
            config,
            data,
            checkpoint,
            methods,
            out,
        } => eval_cmd(&ctx, config, data, checkpoint.as_deref(), methods.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
