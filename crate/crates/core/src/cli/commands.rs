use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;

use super::data::{check_layout, load_split, scene_seed, split_of, DatasetEntry, Manifest, Split};
use super::render::{render_bev, Palette};
use super::{io_err, write_snapshot, CliError, CliResult, Common, RunConfig};
use crate::config::{parse_dims, ConfigMap};
use crate::evalkit::{
    copy_paste_baseline, non_free_classes, CollisionParams, ForecastEvaluator, L2Mode, PlanEvaluator, Trajectory,
};
use crate::numerics::graph::OP_NAMES;
use crate::numerics::{primitive_suite, Checkpoint, DType, GradCheckReport};
use crate::occgrid::{
    generate_synthetic_world, read_sequence_file, write_sequence_file, EgoPose, EgoProfile, OccGrid, OccSequence,
    SceneConfig,
};
use crate::tokenizer::{train_tokenizer as train_tok, Tokenizer};
use crate::worldmodel::{grad_check_tiny_world, rollout as roll, train_world as train_wm, TokenizedSequence, WorldModel};

const CHECKPOINT_DIR: &str = "checkpoint";
const METRICS_LOG: &str = "metrics.log";
const SNAPSHOT: &str = "config.txt";

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(p, bytes).map_err(|e| io_err(p, e))
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} {} is not a directory", p.display())))
    }
}

fn load_tokenizer(p: &Path) -> CliResult<Tokenizer> {
    require_dir(p, "tokenizer checkpoint")?;
    let ck = Checkpoint::load(p).map_err(|e| io_err(p, e))?;
    Ok(Tokenizer::from_checkpoint(&ck)?)
}

fn load_world(p: &Path) -> CliResult<WorldModel> {
    require_dir(p, "world checkpoint")?;
    let ck = Checkpoint::load(p).map_err(|e| io_err(p, e))?;
    Ok(WorldModel::from_checkpoint(&ck)?)
}

fn check_pair(model: &WorldModel, tok: &Tokenizer) -> CliResult<()> {
    let want = crate::worldmodel::WorldDims::from_tokenizer(tok);
    if model.dims != want {
        return Err(CliError::Mismatch(format!(
            "world model expects {:?}, tokenizer provides {want:?}",
            model.dims
        )));
    }
    Ok(())
}

fn read_input(p: &Path) -> CliResult<OccSequence> {
    read_sequence_file(p).map_err(|e| io_err(p, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    /// Randomized ego profile and agents.
    Random,
    /// No agents and a stationary ego: every frame is identical.
    Static,
    /// Randomized agents with a constant-velocity ego.
    Cv,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Grid extents HxWxD.
    #[arg(long, default_value = "64x64x8")]
    grid: String,
    #[arg(long, value_enum, default_value_t = SceneKind::Random)]
    kind: SceneKind,
}

pub(crate) fn scene_config(kind: SceneKind, dims: [usize; 3], seed: u64) -> SceneConfig {
    let mut c = SceneConfig::random(dims, seed);
    match kind {
        SceneKind::Random => {}
        SceneKind::Static => {
            c.num_vehicles = 0;
            c.num_pedestrians = 0;
            c.ego = EgoProfile::ConstantVelocity { speed: 0.0 };
        }
        SceneKind::Cv => {
            c.ego = EgoProfile::ConstantVelocity {
                speed: [1.6, 3.2, 4.8, 6.4][(seed % 4) as usize],
            };
        }
    }
    c
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    let dims = parse_dims::<3>(&a.grid).map_err(|e| CliError::Usage(format!("--grid: {e}")))?;
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be >= 1".into()));
    }
    let out = run.output(&a.out)?;
    create_dir(&out)?;
    let seed = run.seed.unwrap_or(0);
    let mut manifest = Manifest::default();
    for i in 0..a.scenes {
        let s = scene_seed(seed, i);
        let cfg = scene_config(a.kind, dims, s);
        let seq = generate_synthetic_world(&cfg, a.frames)?;
        let file = format!("scene-{i:04}.occseq");
        let path = out.join(&file);
        write_sequence_file(&seq, &path).map_err(|e| io_err(&path, e))?;
        manifest.entries.push(DatasetEntry {
            file,
            seed: s,
            scene_id: cfg.scene_id.clone(),
            split: split_of(s),
            frames: a.frames,
        });
    }
    manifest.write(&out)?;
    let mut extra = ConfigMap::new();
    extra.insert("run.seed".into(), seed.to_string());
    write_snapshot(&out.join(SNAPSHOT), &run, &extra)?;
    let count = |sp: Split| manifest.entries.iter().filter(|e| e.split == sp).count();
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        a.scenes,
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output run directory (checkpoint, metrics log, config snapshot).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct MetricsLog {
    file: File,
    path: PathBuf,
    error: Option<CliError>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(MetricsLog { file, path, error: None })
    }

    fn line(&mut self, s: &str) {
        println!("{s}");
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{s}") {
                self.error = Some(io_err(&self.path, e));
            }
        }
    }

    fn finish(self) -> CliResult<()> {
        self.error.map_or(Ok(()), Err)
    }
}

fn frames_of(seqs: &[OccSequence]) -> Vec<OccGrid> {
    seqs.iter().flat_map(|s| s.grids().cloned()).collect()
}

pub fn train_tokenizer(a: &TrainTokenizerArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    let cfg = run.tokenizer_config()?;
    let out = run.output(&a.out)?;
    require_dir(&a.data, "dataset")?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let classes = cfg.num_classes as u8;
    check_layout(&train.seqs, cfg.grid, classes, "train")?;
    check_layout(&val.seqs, cfg.grid, classes, "val")?;
    if train.seqs.is_empty() {
        return Err(CliError::Mismatch("the train split is empty".into()));
    }
    create_dir(&out)?;
    write_snapshot(&out.join(SNAPSHOT), &run, &cfg.to_map())?;
    let mut log = MetricsLog::create(out.join(METRICS_LOG))?;
    let trained = train_tok(&frames_of(&train.seqs), &frames_of(&val.seqs), &cfg, &mut |r| {
        log.line(&r.log_line())
    })?;
    log.finish()?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    trained
        .tokenizer
        .to_checkpoint(trained.steps as u64, DType::F64)
        .save(&ck_dir)
        .map_err(|e| io_err(&ck_dir, e))?;
    println!("tokenizer checkpoint: {}", ck_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainWorldArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Frozen tokenizer checkpoint directory.
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn train_world(a: &TrainWorldArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    let cfg = run.world_config()?;
    cfg.validate()?;
    let out = run.output(&a.out)?;
    require_dir(&a.data, "dataset")?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let classes = tok.config.num_classes as u8;
    check_layout(&train.seqs, tok.config.grid, classes, "train")?;
    check_layout(&val.seqs, tok.config.grid, classes, "val")?;
    let tokenize = |seqs: &[OccSequence]| {
        seqs.iter()
            .map(|s| TokenizedSequence::new(&tok, s))
            .collect::<crate::Result<Vec<_>>>()
    };
    let (train_t, val_t) = (tokenize(&train.seqs)?, tokenize(&val.seqs)?);
    create_dir(&out)?;
    let mut extra = cfg.to_map();
    extra.insert("run.seed".into(), cfg.seed.to_string());
    write_snapshot(&out.join(SNAPSHOT), &run, &extra)?;
    let mut log = MetricsLog::create(out.join(METRICS_LOG))?;
    let trained = train_wm(&train_t, &val_t, &tok, &cfg, &mut |r| log.line(&r.log_line()))?;
    log.finish()?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    trained
        .model
        .to_checkpoint(trained.steps as u64, DType::F64)
        .save(&ck_dir)
        .map_err(|e| io_err(&ck_dir, e))?;
    println!("world checkpoint: {}", ck_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// History window `.occseq`; its last `world.history_frames + 1` frames are used.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 6)]
    steps: usize,
    /// Output directory for `forecast.occseq` and `trajectory.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Composes a pose `p` given in the frame of `origin`.
fn compose(origin: &EgoPose, p: &[f64; 3]) -> EgoPose {
    let (s, c) = (origin.yaw as f64).sin_cos();
    EgoPose::new(
        origin.x as f64 + c * p[0] - s * p[1],
        origin.y as f64 + s * p[0] + c * p[1],
        origin.yaw as f64 + p[2],
    )
}

pub fn trajectory_table(t: &Trajectory) -> String {
    let mut s = String::from("# step dx dy x y yaw\n");
    for (k, (st, p)) in t.steps().iter().zip(t.poses()).enumerate() {
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            k + 1,
            st[0],
            st[1],
            p[0],
            p[1],
            p[2]
        ));
    }
    s
}

/// Waypoints `(x, y)` from a trajectory table.
pub fn parse_trajectory_table(text: &str) -> Result<Vec<[f64; 2]>, String> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| format!("bad trajectory line {line:?}")))
            .collect::<Result<_, _>>()?;
        if f.len() != 6 {
            return Err(format!("bad trajectory line {line:?}"));
        }
        out.push([f[3], f[4]]);
    }
    Ok(out)
}

pub fn rollout(a: &RolloutArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    let out = run.output(&a.out)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let model = load_world(&a.world)?;
    check_pair(&model, &tok)?;
    let input = read_input(&a.input)?;
    check_layout(std::slice::from_ref(&input), tok.config.grid, tok.config.num_classes as u8, "input")?;
    let need = model.config.window();
    if input.len() < need {
        return Err(CliError::Mismatch(format!(
            "input has {} frames, the model needs a window of {need} (world.history_frames={} plus the current frame)",
            input.len(),
            model.config.history_frames
        )));
    }
    let r = roll(&model, &tok, &input, a.steps)?;
    let origin = input.pose(input.len() - 1);
    let poses: Vec<EgoPose> = r.trajectory.poses().iter().map(|p| compose(&origin, p)).collect();
    let frames = r.grids.iter().cloned().zip(poses).collect();
    let seq = OccSequence::new(frames, input.frame_dt_ms())?;
    create_dir(&out)?;
    let path = out.join("forecast.occseq");
    write_sequence_file(&seq, &path).map_err(|e| io_err(&path, e))?;
    write_file(&out.join("trajectory.txt"), trajectory_table(&r.trajectory))?;
    let mut extra = ConfigMap::new();
    extra.insert("run.seed".into(), model.config.seed.to_string());
    write_snapshot(&out.join(SNAPSHOT), &run, &extra)?;
    println!("forecast of {} frames: {}", seq.len(), path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum L2Arg {
    AtHorizon,
    Averaged,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Report only the Copy&Paste and stationary baselines.
    #[arg(long)]
    baseline_only: bool,
    /// Directory of forecasts named like the split's files, each holding the
    /// frames after the first history window (as written by `rollout`).
    #[arg(long, conflicts_with_all = ["world", "baseline_only"])]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = L2Arg::AtHorizon)]
    l2_mode: L2Arg,
    /// Spacing of evaluation windows within a sequence.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One evaluation window: the history plus the reference frame and futures.
struct Sample {
    seq: usize,
    start: usize,
}

struct Forecast {
    grids: Vec<OccGrid>,
    trajectory: Trajectory,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    let out = run.output(&a.out)?;
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be >= 1".into()));
    }
    require_dir(&a.data, "dataset")?;
    let model = if a.baseline_only || a.predictions.is_some() {
        None
    } else {
        let (Some(w), Some(t)) = (&a.world, &a.tokenizer) else {
            return Err(CliError::Usage(
                "eval needs --world and --tokenizer, --predictions, or --baseline-only".into(),
            ));
        };
        let tok = load_tokenizer(t)?;
        let m = load_world(w)?;
        check_pair(&m, &tok)?;
        Some((m, tok))
    };
    let history = match &model {
        Some((m, _)) => m.config.window(),
        None => run.world_config()?.window(),
    };
    let data = load_split(&a.data, a.split)?;
    if let Some((_, tok)) = &model {
        check_layout(&data.seqs, tok.config.grid, tok.config.num_classes as u8, "evaluation")?;
    }
    let horizon = crate::evalkit::HORIZONS[crate::evalkit::HORIZONS.len() - 1].1;
    let mut samples = Vec::new();
    for (i, s) in data.seqs.iter().enumerate() {
        let last = if a.predictions.is_some() { 0 } else { usize::MAX };
        let mut start = 0;
        while start + history + horizon <= s.len() && start <= last {
            samples.push(Sample { seq: i, start });
            start += a.stride;
        }
    }
    if samples.is_empty() {
        return Err(CliError::Mismatch(format!(
            "no {} sequence holds {} frames ({history} history + {horizon} future)",
            a.split,
            history + horizon
        )));
    }
    let classes = data.seqs[0].num_classes();
    check_layout(&data.seqs, data.seqs[0].dims(), classes, "evaluation")?;

    let predictions: Option<Vec<OccSequence>> = match &a.predictions {
        Some(dir) => {
            require_dir(dir, "predictions")?;
            let mut v = Vec::new();
            for name in &data.names {
                let p = read_input(&dir.join(name))?;
                if p.len() < horizon {
                    return Err(CliError::Mismatch(format!("prediction {name} has {} frames, need {horizon}", p.len())));
                }
                check_layout(std::slice::from_ref(&p), data.seqs[0].dims(), classes, "prediction")?;
                v.push(p);
            }
            Some(v)
        }
        None => None,
    };

    let forecast = |s: &Sample| -> crate::Result<Option<Forecast>> {
        let seq = &data.seqs[s.seq];
        if let Some(preds) = &predictions {
            let p = &preds[s.seq];
            let origin = seq.pose(s.start + history - 1);
            return Ok(Some(Forecast {
                grids: p.grids().take(horizon).cloned().collect(),
                trajectory: Trajectory::from_poses(&origin, &p.poses()[..horizon]),
            }));
        }
        let Some((m, tok)) = &model else { return Ok(None) };
        let r = roll(m, tok, &seq.window(s.start, history)?, horizon)?;
        Ok(Some(Forecast {
            grids: r.grids,
            trajectory: r.trajectory,
        }))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.threads())
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    let forecasts: Vec<Option<Forecast>> =
        pool.install(|| samples.par_iter().map(forecast).collect::<crate::Result<Vec<_>>>())?;

    let mut base_f = ForecastEvaluator::new(classes);
    let mut base_p = PlanEvaluator::new(CollisionParams::default());
    let mut model_f = ForecastEvaluator::new(classes);
    let mut model_p = PlanEvaluator::new(CollisionParams::default());
    for (s, f) in samples.iter().zip(&forecasts) {
        let seq = &data.seqs[s.seq];
        let hist = seq.window(s.start, history)?;
        let gt: Vec<OccGrid> = seq.grids().skip(s.start + history).take(horizon).cloned().collect();
        let gt_seq = seq.window(s.start + history - 1, horizon + 1)?;
        base_f.add(&copy_paste_baseline(&hist, horizon)?, &gt)?;
        base_p.add(&Trajectory::stationary(horizon), &gt_seq)?;
        if let Some(f) = f {
            model_f.add(&f.grids, &gt)?;
            model_p.add(&f.trajectory, &gt_seq)?;
        }
    }
    let cls = non_free_classes(classes);
    let modes: &[L2Mode] = match a.l2_mode {
        L2Arg::AtHorizon => &[L2Mode::AtHorizon],
        L2Arg::Averaged => &[L2Mode::Averaged],
        L2Arg::Both => &[L2Mode::AtHorizon, L2Mode::Averaged],
    };
    let mut text = format!("split: {} ({} windows)\n\n", a.split, samples.len());
    let mut kv = format!("samples={}\n", samples.len());
    let mut rows = vec![("copy_paste", &base_f, "stationary", &base_p)];
    if model_p.samples() > 0 {
        rows.push(("occworld", &model_f, "occworld", &model_p));
    }
    for (fname, fe, _, _) in &rows {
        let r = fe.report(fname, &cls);
        text.push_str(&r.to_text());
        text.push('\n');
        kv.push_str(&r.to_kv());
    }
    for &mode in modes {
        for (_, _, pname, pe) in &rows {
            let r = pe.report(pname, mode)?;
            text.push_str(&r.to_text());
            text.push('\n');
            kv.push_str(&r.to_kv());
        }
    }
    create_dir(&out)?;
    write_file(&out.join("report.txt"), &text)?;
    write_file(&out.join("report.kv"), &kv)?;
    let mut extra = ConfigMap::new();
    extra.insert("world.history_frames".into(), (history - 1).to_string());
    write_snapshot(&out.join(SNAPSHOT), &run, &extra)?;
    print!("{text}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output `.ppm` path.
    #[arg(long)]
    out: PathBuf,
    /// Trajectory table (as written by `rollout`) to overlay as markers.
    #[arg(long)]
    waypoints: Option<PathBuf>,
    /// Pixels per cell.
    #[arg(long, default_value_t = 1)]
    scale: usize,
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    if a.scale == 0 {
        return Err(CliError::Usage("--scale must be >= 1".into()));
    }
    let seq = read_input(&a.input)?;
    let waypoints = match &a.waypoints {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            parse_trajectory_table(&text).map_err(|e| io_err(p, e))?
        }
        None => Vec::new(),
    };
    if a.frame >= seq.len() {
        return Err(CliError::Mismatch(format!(
            "frame {} out of range: {} has {} frames",
            a.frame,
            a.input.display(),
            seq.len()
        )));
    }
    let img = render_bev(seq.grid(a.frame), &waypoints, &Palette::default(), a.scale);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, img)?;
    let mut snap = a.out.clone().into_os_string();
    snap.push(".config.txt");
    write_snapshot(Path::new(&snap), &run, &ConfigMap::new())?;
    let d = seq.dims();
    println!("rendered frame {} ({}x{} px) to {}", a.frame, d[1] * a.scale, d[0] * a.scale, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub(crate) common: Common,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Test hook: flip the sign of this primitive's backward pass.
    #[arg(long, hide = true)]
    fault: Option<String>,
    /// Optional directory for the config snapshot and the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let run = RunConfig::resolve(&a.common)?;
    if !(a.eps > 0.0) || !(a.threshold > 0.0) {
        return Err(CliError::Usage("--eps and --threshold must be > 0".into()));
    }
    if let Some(f) = &a.fault {
        if !OP_NAMES.contains(&f.as_str()) {
            return Err(CliError::Usage(format!("--fault {f}: unknown op (one of {})", OP_NAMES.join(", "))));
        }
    }
    let seed = run.seed.unwrap_or(0);
    let fault = a.fault.as_deref();
    let mut checks: Vec<(String, GradCheckReport)> = primitive_suite(seed, a.eps, fault)?
        .into_iter()
        .map(|e| (e.name.to_string(), e.report))
        .collect();
    checks.push(("world_model_tiny".into(), grad_check_tiny_world(seed, a.eps, fault)?));
    let mut report = String::new();
    let mut worst = 0;
    for (i, (name, r)) in checks.iter().enumerate() {
        let ok = r.max_rel_error < a.threshold;
        report.push_str(&format!(
            "{name:<18} max_rel_error={:.3e} {}\n",
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        ));
        if r.max_rel_error > checks[worst].1.max_rel_error {
            worst = i;
        }
    }
    let (wname, w) = &checks[worst];
    report.push_str(&format!(
        "worst: {wname} ({}[{}]: analytic {:.6e} vs numeric {:.6e}, rel error {:.3e}, threshold {:.1e})\n",
        w.worst_param, w.worst_index, w.analytic, w.numeric, w.max_rel_error, a.threshold
    ));
    print!("{report}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("gradcheck.txt"), &report)?;
        let mut extra = ConfigMap::new();
        extra.insert("run.seed".into(), seed.to_string());
        write_snapshot(&out.join(SNAPSHOT), &run, &extra)?;
    }
    let failing: Vec<&str> = checks
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < a.threshold))
        .map(|(n, _)| n.as_str())
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed in {wname} (rel error {:.3e} >= {:.1e}); failing: {}",
            w.max_rel_error,
            a.threshold,
            failing.join(", ")
        )))
    }
}

