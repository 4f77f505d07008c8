//! Command-line front end. Exit status 0 on success, 2 on configuration
//! errors (including bad flags), 3 on runtime or training errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::write_atomic;
use crate::config::{ConnectorKind, RunConfig};
use crate::connector::{Branch, Branches};
use crate::error::{Error, Result};
use crate::metrics::{compare_table, DecouplingReport};
use crate::render::render_masks;
use crate::synthetic::{export_scene, Dataset};
use crate::training::{
    checkpoint_stage, eval_scenes, evaluate, infer_kind, run_pipeline, stage1_pretrain, stage2_init, stage3_init,
    train_pooling, tune_until, Budget, LogRecord, Model, StageResult, TrainState,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sfslots", version, about = "SlowFast slot connector on synthetic video features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Training {
    #[command(flatten)]
    pub common: Common,
    /// Continues from a training-state checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Slow,
    Fast,
    Both,
}

impl From<BranchArg> for Branches {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Slow => Branches::Slow,
            BranchArg::Fast => Branches::Fast,
            BranchArg::Both => Branches::Both,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic scenes as tensor containers.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Draws from the held-out stream instead of the training stream.
        #[arg(long)]
        held_out: bool,
    },
    /// Stage 1: reconstruction pretraining of one branch.
    Pretrain(Training),
    /// Stage 2: probe tuning of one branch from its stage-1 parameters.
    Tune(Training),
    /// Stage 3: joint tuning from both stage-2 checkpoints.
    Joint(Training),
    /// Pooling (one probe stage) or query-transformer (full recipe) baseline.
    TrainBaseline(Training),
    /// Decomposition scores and probe accuracy of a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = BranchArg::Both)]
        branch: BranchArg,
    },
    /// Renders the attention masks of one held-out scene as PGM images.
    Viz {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value_t = BranchArg::Both)]
        branch: BranchArg,
    },
    /// Side-by-side table of two or more report files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Directory to also write `compare.txt` into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Worker threads allowed by `SFSL_THREADS` (default 1). Every computation
/// here is single-threaded, so values above 1 change nothing.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("SFSL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SFSL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_config(common: &Common, stage: u8) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load_for_stage(p, stage)?,
        None => RunConfig::for_stage_json("{}", stage)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare(common: &Common, stage: u8) -> Result<RunConfig> {
    thread_cap()?;
    let cfg = load_config(common, stage)?;
    cfg.write_effective()?;
    Ok(cfg)
}

fn single_branch(cfg: &RunConfig, what: &str) -> Result<Branch> {
    match cfg.stage.branch {
        Branches::Slow => Ok(Branch::Slow),
        Branches::Fast => Ok(Branch::Fast),
        Branches::Both => Err(Error::Config(format!("{what} trains one branch; set stage.branch to slow or fast"))),
    }
}

fn resume_state(path: &Path, stage: u8) -> Result<TrainState> {
    match checkpoint_stage(path)? {
        Some(s) if s == stage => TrainState::load(path),
        other => Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a stage-{stage} state, found {other:?}"),
        }),
    }
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let text: String = log.iter().map(|r| format!("{r}\n")).collect();
    write_atomic(path, text.as_bytes())
}

/// Saves `<name>.sfsl` and `<name>.log` into the output directory.
fn finish(cfg: &RunConfig, name: &str, stage: u8, result: &StageResult) -> Result<PathBuf> {
    let ckpt = cfg.output_dir.join(format!("{name}.sfsl"));
    result.state.save(&ckpt, stage, cfg.connector.activation.code())?;
    write_log(&cfg.output_dir.join(format!("{name}.log")), &result.log)?;
    if let Some(last) = result.log.last() {
        eprintln!("{name}: {last}");
    }
    eprintln!("{name}: wrote {}", ckpt.display());
    Ok(ckpt)
}

fn write_report(cfg: &RunConfig, name: &str, report: &DecouplingReport) -> Result<()> {
    let path = cfg.output_dir.join(format!("{name}.report"));
    write_atomic(&path, report.to_text().as_bytes())?;
    eprintln!("{name}: wrote {}", path.display());
    Ok(())
}

fn slot_kind(cfg: &RunConfig) -> Result<ConnectorKind> {
    match cfg.stage.connector {
        ConnectorKind::Pooling => Err(Error::Config(
            "the pooling connector only trains through train-baseline".into(),
        )),
        k => Ok(k),
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            count,
            held_out,
        } => gen_data(&common, count, held_out),
        Command::Pretrain(t) => pretrain(&t),
        Command::Tune(t) => tune(&t),
        Command::Joint(t) => joint(&t),
        Command::TrainBaseline(t) => train_baseline(&t),
        Command::Eval {
            common,
            checkpoint,
            branch,
        } => eval(&common, &checkpoint, branch.into()),
        Command::Viz {
            common,
            checkpoint,
            scene,
            branch,
        } => viz(&common, &checkpoint, scene, branch.into()),
        Command::Compare { reports, out } => compare(&reports, out.as_deref()),
    }
}

fn gen_data(common: &Common, count: usize, held_out: bool) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let cfg = prepare(common, 1)?;
    let mut data = Dataset::new(cfg.seed, cfg.data.clone())?;
    if held_out {
        data = data.held_out();
    }
    let dir = cfg.output_dir.join("scenes");
    fs::create_dir_all(&dir)?;
    for i in 0..count as u64 {
        export_scene(&data.scene(i)?, &dir.join(format!("scene-{i:05}.sfsl")))?;
    }
    eprintln!("gen-data: wrote {count} scenes to {}", dir.display());
    Ok(())
}

fn pretrain(t: &Training) -> Result<()> {
    let cfg = prepare(&t.common, 1)?;
    let branch = single_branch(&cfg, "pretrain")?;
    slot_kind(&cfg)?;
    let resume = t.resume.as_deref().map(|p| resume_state(p, 1)).transpose()?;
    let result = stage1_pretrain(&cfg, branch, resume)?;
    finish(&cfg, &format!("stage1-{}", branch.name()), 1, &result)?;
    Ok(())
}

fn source(cfg: &RunConfig, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output_dir.join(default))
}

fn tune(t: &Training) -> Result<()> {
    let cfg = prepare(&t.common, 2)?;
    let branch = single_branch(&cfg, "tune")?;
    let kind = slot_kind(&cfg)?;
    let model = Model::new(&cfg, kind)?;
    let state = match &t.resume {
        Some(p) => resume_state(p, 2)?,
        None => {
            let explicit = match branch {
                Branch::Slow => &cfg.stage.load_slow,
                Branch::Fast => &cfg.stage.load_fast,
            };
            let path = source(&cfg, explicit, &format!("stage1-{}.sfsl", branch.name()));
            stage2_init(&cfg, branch, &TrainState::load(&path)?.store)?
        }
    };
    let result = tune_until(&cfg, &model, branch.into(), state, cfg.stage.steps)?;
    let name = format!("stage2-{}", branch.name());
    finish(&cfg, &name, 2, &result)?;
    write_report(&cfg, &name, &evaluate(&cfg, kind, &result.state.store, branch.into())?)
}

fn joint(t: &Training) -> Result<()> {
    let cfg = prepare(&t.common, 3)?;
    if cfg.stage.branch != Branches::Both {
        return Err(Error::Config("joint tuning needs stage.branch = both".into()));
    }
    let kind = slot_kind(&cfg)?;
    let model = Model::new(&cfg, kind)?;
    let state = match &t.resume {
        Some(p) => resume_state(p, 3)?,
        None => {
            let slow = TrainState::load(&source(&cfg, &cfg.stage.load_slow, "stage2-slow.sfsl"))?;
            let fast = TrainState::load(&source(&cfg, &cfg.stage.load_fast, "stage2-fast.sfsl"))?;
            stage3_init(&cfg, &slow.store, &fast.store)?
        }
    };
    let result = tune_until(&cfg, &model, Branches::Both, state, cfg.stage.steps)?;
    finish(&cfg, "stage3", 3, &result)?;
    write_report(&cfg, "stage3", &evaluate(&cfg, kind, &result.state.store, Branches::Both)?)
}

fn train_baseline(t: &Training) -> Result<()> {
    let cfg = prepare(&t.common, 2)?;
    let kind = cfg.stage.connector;
    let name = format!("baseline-{}", kind.name());
    match kind {
        ConnectorKind::SfSlots => Err(Error::Config(
            "train-baseline needs stage.connector = pooling or query-transformer".into(),
        )),
        ConnectorKind::Pooling => {
            let mut c = cfg.clone();
            c.stage.branch = Branches::Both;
            let result = match &t.resume {
                Some(p) => {
                    let model = Model::new(&c, kind)?;
                    tune_until(&c, &model, Branches::Both, resume_state(p, 2)?, c.stage.steps)?
                }
                None => train_pooling(&c)?,
            };
            finish(&c, &name, 2, &result)?;
            write_report(&c, &name, &evaluate(&c, kind, &result.state.store, Branches::Both)?)
        }
        ConnectorKind::QueryTransformer => {
            if t.resume.is_some() {
                return Err(Error::Config(
                    "resume a query-transformer run stage by stage with pretrain, tune and joint".into(),
                ));
            }
            let budget = Budget {
                stage2: cfg.stage.steps,
                stage3: cfg.stage.steps,
                ..Budget::default()
            };
            let run = run_pipeline(&cfg, kind, budget)?;
            for (stage_name, log) in &run.logs {
                write_log(&cfg.output_dir.join(format!("{name}-{stage_name}.log")), log)?;
            }
            let ckpt = cfg.output_dir.join(format!("{name}.sfsl"));
            run.joint.save(&ckpt, 3, cfg.connector.activation.code())?;
            eprintln!("{name}: wrote {}", ckpt.display());
            write_report(&cfg, &name, &evaluate(&cfg, kind, &run.joint.store, Branches::Both)?)
        }
    }
}

fn load_for_eval(common: &Common, checkpoint: &Path) -> Result<(RunConfig, TrainState, ConnectorKind)> {
    thread_cap()?;
    let cfg = load_config(common, 1)?;
    let state = TrainState::load(checkpoint)?;
    let kind = infer_kind(&state.store).ok_or_else(|| Error::Checkpoint {
        path: checkpoint.to_path_buf(),
        reason: "no connector parameters".into(),
    })?;
    Ok((cfg, state, kind))
}

fn eval(common: &Common, checkpoint: &Path, branches: Branches) -> Result<()> {
    let (cfg, state, kind) = load_for_eval(common, checkpoint)?;
    let report = evaluate(&cfg, kind, &state.store, branches)?;
    print!("{}", report.to_text());
    if common.out.is_some() {
        cfg.write_effective()?;
        let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_report(&cfg, &stem, &report)?;
    }
    Ok(())
}

fn viz(common: &Common, checkpoint: &Path, scene: usize, branches: Branches) -> Result<()> {
    let (cfg, state, kind) = load_for_eval(common, checkpoint)?;
    if kind == ConnectorKind::Pooling {
        return Err(Error::Config("the pooling connector has no attention masks".into()));
    }
    if scene >= cfg.eval.scenes {
        return Err(Error::Config(format!("--scene {scene} outside the {} held-out scenes", cfg.eval.scenes)));
    }
    cfg.write_effective()?;
    let model = Model::new(&cfg, kind)?;
    let (_, decomp) = eval_scenes(&cfg)?;
    let out = model.connector.run_branches(&state.store, &decomp[scene].video, branches)?;
    let dir = cfg.output_dir.join(format!("masks-scene{scene:03}"));
    let entries = render_masks(&out.masks, &dir)?;
    eprintln!("viz: wrote {} images to {}", entries.len(), dir.display());
    Ok(())
}

fn compare(reports: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let parsed = reports
        .iter()
        .map(|p| DecouplingReport::parse(&fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_table(&parsed);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("compare.txt"), table.as_bytes())?;
    }
    Ok(())
}
