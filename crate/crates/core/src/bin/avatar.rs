//! `avatar`: generate bodies and targets, fit scenes, render, animate, extract meshes and
//! run the property suites.
//!
//! Settings resolve as flags over the `--config` TOML file over built-in defaults, and every
//! command prints the resolved configuration before doing any work.
//!
//! Exit codes: 0 success, 2 missing or unreadable input, 3 invalid parameters, violated
//! invariants or failed verification, 4 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use avatar_core::body::{
    interpolate_keyframes, load_body_asset, read_poses, save_body_asset, write_poses, BodyParams, BodySpec,
    CapsuleBody, TemplateBody,
};
use avatar_core::canonical::PosedBody;
use avatar_core::field::{load_checkpoint, ModelConfig, Scene};
use avatar_core::fit::{make_synthetic_targets, FitConfig, FitSession, TargetSet};
use avatar_core::geometry::{marching_cubes_values, Grid};
use avatar_core::math::Vec3;
use avatar_core::render::{
    read_cameras, render_field, write_cameras, Camera, RenderConfig, RenderMetadata, RenderOutput, SceneField, SdfField,
};
use avatar_core::verify::Suite;
use avatar_core::Error;

#[derive(Parser, Debug)]
#[command(name = "avatar", version, about = "Deformable neural-SDF avatars on a capsule body")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "AVATAR_THREADS")]
    threads: Option<usize>,

    /// TOML file with optional [body], [model], [fit] and [render] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural test body asset.
    Genbody(GenbodyArgs),
    /// Render oracle targets of the analytic capsule body.
    Maketargets(MaketargetsArgs),
    /// Fit a scene to a target directory.
    Fit(FitArgs),
    /// Render a fitted scene from one or more cameras.
    Render(RenderArgs),
    /// Render one frame per pose of a pose sequence.
    Animate(AnimateArgs),
    /// Marching cubes over the posed field, written as OBJ.
    ExtractMesh(ExtractMeshArgs),
    /// Run property suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Serialize)]
struct BodyFlags {
    #[arg(long)]
    height: Option<f64>,
    #[arg(long)]
    girth: Option<f64>,
    /// Grid nodes along the vertical axis.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct GenbodyArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    body: BodyFlags,
}

#[derive(Args, Debug, Serialize)]
struct MaketargetsArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Pose file: one record, or one per camera. Rest pose when absent.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Camera JSON. An orbit of `--views` cameras when absent.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Image side of the default orbit cameras.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[command(flatten)]
    body: BodyFlags,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long)]
    targets: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Body asset; `<targets>/body.json` by default.
    #[arg(long)]
    body: Option<PathBuf>,
    /// Continue from a checkpoint written by `fit`, with its stored configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Rewrite the output checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Per-step loss records as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rays: Option<usize>,
    /// Samples per training ray.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    prior_weight: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct RenderFlags {
    /// Samples per ray.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Jitter samples within their bins.
    #[arg(long)]
    stratified: bool,
    /// Background color as `r,g,b`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    background: Option<Vec<f64>>,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    body: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Pose file; the first record is used. Rest pose when absent.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Args, Debug, Serialize)]
struct AnimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    body: PathBuf,
    /// Pose sequence, one record per line.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Which camera of the file to render from.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Interpolated frames inserted between consecutive poses.
    #[arg(long, default_value_t = 0)]
    inbetweens: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Args, Debug, Serialize)]
struct ExtractMeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    body: PathBuf,
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    /// Padding around the posed body, meters.
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    /// roundtrip, sdf, eikonal, gradcheck, renderer, density or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// One JSON report per line instead of text.
    #[arg(long)]
    json: bool,
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    body: BodySpec,
    model: ModelConfig,
    fit: FitConfig,
    render: RenderConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::malformed(path, e))
    }
}

impl BodyFlags {
    fn apply(&self, spec: &mut BodySpec) {
        if let Some(v) = self.height {
            spec.height = v;
        }
        if let Some(v) = self.girth {
            spec.girth = v;
        }
        if let Some(v) = self.resolution {
            spec.resolution = v;
        }
    }
}

impl RenderFlags {
    fn apply(&self, cfg: &mut RenderConfig) {
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.stratified {
            cfg.stratified = true;
        }
        if let Some(v) = &self.background {
            cfg.background = [v[0], v[1], v[2]];
        }
    }
}

impl FitArgs {
    fn apply(&self, cfg: &mut FitConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rays {
            cfg.rays_per_step = v;
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(v) = self.prior_weight {
            cfg.weights.prior = v;
        }
    }
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'a str,
    threads: usize,
    args: &'a A,
    config: &'a RunConfig,
}

fn echo<A: Serialize>(command: &str, args: &A, config: &RunConfig) -> Result<(), Error> {
    let e = Echo {
        command,
        threads: rayon::current_num_threads(),
        args,
        config,
    };
    let text = toml::to_string(&e).map_err(|e| Error::Format(e.to_string()))?;
    println!("# resolved configuration\n{text}");
    Ok(())
}

/// Files and directories created by a command, removed again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn file(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn dir(&mut self, path: &Path) -> Result<(), Error> {
        if !path.exists() {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            self.created.push(path.to_path_buf());
        }
        Ok(())
    }

    fn commit(mut self) {
        self.done = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for p in self.created.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dir_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn pose_or_rest(path: Option<&Path>, body: &TemplateBody) -> Result<BodyParams, Error> {
    match path {
        Some(p) => Ok(read_poses(p)?.swap_remove(0)),
        None => Ok(BodyParams::for_body(body)),
    }
}

fn check_pose(p: &BodyParams, body: &TemplateBody) -> Result<(), Error> {
    if p.theta.len() != body.joint_count() || p.beta.len() != body.shape_count() {
        return Err(Error::Shape(format!(
            "pose has {} joints and {} shapes, body has {} and {}",
            p.theta.len(),
            p.beta.len(),
            body.joint_count(),
            body.shape_count()
        )));
    }
    p.check_finite()
}

/// Checkpoint and body asset, checked against each other.
fn load_scene(checkpoint: &Path, body: &Path) -> Result<(Scene, TemplateBody), Error> {
    let scene = load_checkpoint(checkpoint)?;
    let body = load_body_asset(body)?;
    if scene.joints != body.joint_count() || scene.shapes != body.shape_count() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} joints and {} shapes, body has {} and {}",
            scene.joints,
            scene.shapes,
            body.joint_count(),
            body.shape_count()
        )));
    }
    Ok((scene, body))
}

fn render_pose(scene: &Scene, body: &TemplateBody, params: &BodyParams, camera: &Camera, cfg: &RenderConfig) -> Result<(RenderOutput, RenderMetadata), Error> {
    let posed = PosedBody::new(body, params)?;
    let field = SceneField::new(scene, &posed)?;
    let out = render_field(&field, camera, cfg)?;
    Ok((out, RenderMetadata::new(&field, camera, cfg)))
}

fn cmd_genbody(args: &GenbodyArgs, mut cfg: RunConfig) -> Result<(), Error> {
    args.body.apply(&mut cfg.body);
    cfg.body.validate()?;
    require_dir_parent(&args.out)?;
    echo("genbody", args, &cfg)?;
    let body = CapsuleBody::new(cfg.body)?.template()?;
    let mut outputs = Outputs::default();
    save_body_asset(&body, &outputs.file(&args.out))?;
    outputs.commit();
    println!("wrote {} ({} vertices)", args.out.display(), body.vertices.len());
    Ok(())
}

fn cmd_maketargets(args: &MaketargetsArgs, mut cfg: RunConfig) -> Result<(), Error> {
    args.body.apply(&mut cfg.body);
    cfg.body.validate()?;
    let caps = CapsuleBody::new(cfg.body)?;
    let body = caps.template()?;
    let cameras = match &args.cameras {
        Some(p) => read_cameras(p)?,
        None => {
            if args.views == 0 {
                return Err(Error::Parameter("need at least one view".into()));
            }
            let (lo, hi) = caps.bounds();
            Camera::orbit(args.views, 2.0, (lo + hi) / 2.0, 0.0, args.size, 0.9)?
        }
    };
    let poses = match &args.poses {
        Some(p) => read_poses(p)?,
        None => vec![BodyParams::for_body(&body)],
    };
    for p in &poses {
        check_pose(p, &body)?;
    }
    if poses.len() != 1 && poses.len() != cameras.len() {
        return Err(Error::Parameter(format!(
            "{} poses for {} cameras (need one, or one per camera)",
            poses.len(),
            cameras.len()
        )));
    }
    echo("maketargets", args, &cfg)?;
    let targets = make_synthetic_targets(&caps, &poses, &cameras)?;

    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    let files = ["targets.json", "body.json", "body_spec.json", "cameras.json", "poses.jsonl"].map(|f| args.out.join(f));
    for f in &files {
        outputs.file(f);
    }
    for i in 0..targets.len() {
        for suffix in [".ppm", "_mask.ppm", "_depth.pfm"] {
            outputs.file(&args.out.join(format!("view_{i:03}{suffix}")));
        }
    }
    targets.save(&args.out)?;
    save_body_asset(&body, &files[1])?;
    write_json(&files[2], &cfg.body)?;
    write_cameras(&files[3], &cameras)?;
    write_poses(&files[4], &poses)?;
    outputs.commit();
    println!("wrote {} target views to {}", targets.len(), args.out.display());
    Ok(())
}

/// Writes through a temporary file so a crash never leaves a truncated checkpoint.
fn save_session(session: &FitSession, path: &Path) -> Result<(), Error> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = session
        .save(&tmp)
        .and_then(|()| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn cmd_fit(args: &FitArgs, mut cfg: RunConfig) -> Result<(), Error> {
    use std::io::Write;

    let targets = TargetSet::load(&args.targets)?;
    let body_path = args.body.clone().unwrap_or_else(|| args.targets.join("body.json"));
    let body = load_body_asset(&body_path)?;
    if args.checkpoint_every == Some(0) {
        return Err(Error::Parameter("checkpoint interval must be at least 1".into()));
    }
    require_dir_parent(&args.out)?;
    let mut session = match &args.resume {
        Some(path) => {
            let s = FitSession::resume(&body, &targets, path)?;
            cfg.fit = s.config().clone();
            cfg.model = s.scene.config.clone();
            s
        }
        None => {
            args.apply(&mut cfg.fit);
            cfg.model.validate()?;
            let scene = Scene::new(cfg.model.clone(), &body, cfg.fit.seed)?;
            FitSession::new(&body, &targets, cfg.fit.clone(), scene)?
        }
    };
    echo("fit", args, &cfg)?;

    let mut outputs = Outputs::default();
    let out = outputs.file(&args.out);
    let mut history = match &args.history {
        Some(p) => {
            require_dir_parent(p)?;
            let path = outputs.file(p);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(args.resume.is_some())
                .write(true)
                .truncate(args.resume.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let total = session.config().iterations;
    let start = std::time::Instant::now();
    session.run_until(total, |rec, s| {
        if let Some((path, w)) = history.as_mut() {
            let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        let done = rec.step + 1;
        if args.log_every > 0 && (done % args.log_every == 0 || done == total) {
            eprintln!(
                "step {done}/{total} loss {:.5e} alpha {:.3e} res {} ({:.0} s)",
                rec.report.total,
                rec.alpha,
                rec.resolution,
                start.elapsed().as_secs_f64()
            );
        }
        if args.checkpoint_every.is_some_and(|k| done % k == 0) {
            save_session(s, &out)?;
        }
        Ok(())
    })?;
    if let Some((path, mut w)) = history {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    save_session(&session, &out)?;
    outputs.commit();
    println!("wrote {} after {} steps", out.display(), session.step());
    Ok(())
}

fn cmd_render(args: &RenderArgs, mut cfg: RunConfig) -> Result<(), Error> {
    args.render.apply(&mut cfg.render);
    cfg.render.validate()?;
    let (scene, body) = load_scene(&args.checkpoint, &args.body)?;
    let cameras = read_cameras(&args.cameras)?;
    let params = pose_or_rest(args.pose.as_deref(), &body)?;
    check_pose(&params, &body)?;
    echo("render", args, &cfg)?;

    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    for (i, cam) in cameras.iter().enumerate() {
        let (out, meta) = render_pose(&scene, &body, &params, cam, &cfg.render)?;
        let stem = args.out.join(format!("view_{i:03}"));
        let path = |suffix: &str| PathBuf::from(format!("{}{suffix}", stem.display()));
        out.rgb.write_ppm(&outputs.file(&path(".ppm")))?;
        out.depth.write_pfm(&outputs.file(&path("_depth.pfm")))?;
        out.alpha.write_pfm(&outputs.file(&path("_alpha.pfm")))?;
        write_json(&outputs.file(&path(".json")), &meta)?;
    }
    outputs.commit();
    println!("rendered {} views to {}", cameras.len(), args.out.display());
    Ok(())
}

fn cmd_animate(args: &AnimateArgs, mut cfg: RunConfig) -> Result<(), Error> {
    args.render.apply(&mut cfg.render);
    cfg.render.validate()?;
    let (scene, body) = load_scene(&args.checkpoint, &args.body)?;
    let cameras = read_cameras(&args.cameras)?;
    let camera = cameras.get(args.view).ok_or_else(|| {
        Error::Parameter(format!("view {} requested, camera file has {}", args.view, cameras.len()))
    })?;
    let keys = read_poses(&args.poses)?;
    for p in &keys {
        check_pose(p, &body)?;
    }
    let poses = interpolate_keyframes(&keys, args.inbetweens)?;
    echo("animate", args, &cfg)?;

    let mut outputs = Outputs::default();
    outputs.dir(&args.out)?;
    for (k, p) in poses.iter().enumerate() {
        let (out, _) = render_pose(&scene, &body, p, camera, &cfg.render)?;
        out.rgb.write_ppm(&outputs.file(&args.out.join(format!("frame_{k:04}.ppm"))))?;
    }
    write_poses(&outputs.file(&args.out.join("frames.jsonl")), &poses)?;
    outputs.commit();
    println!("rendered {} frames to {}", poses.len(), args.out.display());
    Ok(())
}

fn cmd_extract_mesh(args: &ExtractMeshArgs, cfg: RunConfig) -> Result<(), Error> {
    if args.resolution < 2 || !(args.margin >= 0.0 && args.margin.is_finite()) {
        return Err(Error::Parameter("need resolution >= 2 and a finite, non-negative margin".into()));
    }
    let (scene, body) = load_scene(&args.checkpoint, &args.body)?;
    let params = pose_or_rest(args.pose.as_deref(), &body)?;
    check_pose(&params, &body)?;
    require_dir_parent(&args.out)?;
    echo("extract-mesh", args, &cfg)?;

    let posed = PosedBody::new(&body, &params)?;
    let field = SceneField::new(&scene, &posed)?;
    let (lo, hi) = posed.mesh().vertices().iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    );
    let pad = Vec3::repeat(args.margin);
    let grid = Grid::cube(args.resolution, lo - pad, hi + pad);
    let nodes = grid.node_positions();
    let values = nodes
        .par_chunks(1024)
        .map(|chunk| {
            let mut sdf = vec![0.0; chunk.len()];
            let mut rgb = vec![[0.0; 3]; chunk.len()];
            field.query(chunk, &mut sdf, &mut rgb)?;
            Ok(sdf)
        })
        .collect::<Result<Vec<_>, Error>>()?
        .concat();
    let mesh = marching_cubes_values(&values, &grid, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut outputs = Outputs::default();
    mesh.write_obj(&outputs.file(&args.out), true)?;
    outputs.commit();
    println!(
        "wrote {} ({} vertices, {} triangles)",
        args.out.display(),
        mesh.vertices().len(),
        mesh.triangles().len()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs, cfg: RunConfig) -> Result<(), Error> {
    let suites = Suite::select(&args.suite)?;
    echo("verify", args, &cfg)?;
    let mut failed = Vec::new();
    for s in suites {
        let report = s.run()?;
        if args.json {
            println!("{}", serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?);
        } else {
            print!("{report}");
        }
        if !report.pass() {
            failed.push(s.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("failed suites: {}", failed.join(", "))))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Malformed { .. } | Error::Version { .. } | Error::Format(_) => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Genbody(a) => cmd_genbody(a, cfg),
        Command::Maketargets(a) => cmd_maketargets(a, cfg),
        Command::Fit(a) => cmd_fit(a, cfg),
        Command::Render(a) => cmd_render(a, cfg),
        Command::Animate(a) => cmd_animate(a, cfg),
        Command::ExtractMesh(a) => cmd_extract_mesh(a, cfg),
        Command::Verify(a) => cmd_verify(a, cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
