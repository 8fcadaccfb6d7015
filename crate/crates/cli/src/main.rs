//! `in2n`: train a radiance field on a posed image set, then edit it with an
//! instruction by iterative dataset update.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use in2n_core::control::{serve_control, RunHandle};
use in2n_core::dataset_update::{
    run_baseline, run_iterative_du_with, BaselineKind, BaselineOutput, DuRunReport, DuSchedule,
    DuSetup, RunHooks,
};
use in2n_core::editor::{parse_editor, EditRequest, Editor, EditorParams};
use in2n_core::field::{load_checkpoint, save_checkpoint, FieldConfig, RadianceFieldParams};
use in2n_core::fixtures::SyntheticScene;
use in2n_core::image::Image;
use in2n_core::metrics::{evaluate_sequence, parse_embedder, write_metrics, Captions, Embedder};
use in2n_core::renderer::{render_frame, RaySampleSpec};
use in2n_core::scene_io::{load_camera_path, load_scene, save_scene, ImageSet, SceneDataset};
use in2n_core::trainer::{train, TrainConfig, TrainState};

const REMOTE_ENV: &str = "IN2N_REMOTE_URL";

#[derive(Parser)]
#[command(
    name = "in2n",
    version,
    about = "Instruction-driven radiance field editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sphere scene and an orbit camera path.
    Fixture(FixtureArgs),
    /// Reconstruct a scene from its original images.
    Train(TrainCmd),
    /// Edit a trained scene by iterative dataset update.
    Edit(RunArgs),
    /// Like `edit`, with the HTTP control API attached.
    Serve(ServeArgs),
    /// Run a comparison method.
    Baseline(BaselineArgs),
    /// Render a checkpoint along a camera path.
    Render(RenderArgs),
    /// Score edited frames against their originals.
    Eval(EvalArgs),
    /// Grid of candidate edits of one view over guidance scales.
    Preview(PreviewArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Frames in the written `path.json`.
    #[arg(long, default_value_t = 10)]
    path_frames: usize,
    /// Azimuth step between path frames, in degrees.
    #[arg(long, default_value_t = 6.0)]
    path_step: f64,
}

#[derive(Args, Clone)]
struct FieldArgs {
    #[arg(long, default_value_t = 64)]
    field_width: usize,
    #[arg(long, default_value_t = 2)]
    field_layers: usize,
    #[arg(long, default_value_t = 6)]
    pos_freqs: usize,
    #[arg(long, default_value_t = 2)]
    dir_freqs: usize,
}

#[derive(Args, Clone)]
struct OptimArgs {
    /// Rays per step.
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Samples per ray.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    l1_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    perceptual_weight: f64,
    #[arg(long, default_value_t = 32)]
    patch: u32,
    #[arg(long, default_value_t = 10.0)]
    grad_clip: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_rays: self.batch,
            lr: self.lr,
            l1_weight: self.l1_weight,
            perceptual_weight: self.perceptual_weight,
            patch_size: self.patch,
            samples_per_ray: self.samples,
            grad_clip: self.grad_clip,
            rng_seed: seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[command(flatten)]
    field: FieldArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Clone)]
struct EditorArgs {
    /// identity | hue:<deg>:<rho_view>:<rho_call> | affine:<12 floats>:<rho_view>:<rho_call>
    /// | uncond:<png> | lossy:<selection> | remote[:<url>]
    #[arg(long)]
    editor: Option<String>,
    #[arg(long, default_value_t = 1.5)]
    s_image: f64,
    #[arg(long, default_value_t = 7.5)]
    s_text: f64,
    #[arg(long, default_value_t = 0.02)]
    t_min: f64,
    #[arg(long, default_value_t = 0.98)]
    t_max: f64,
    #[arg(long, default_value_t = 20)]
    ddim_steps: u32,
}

impl EditorArgs {
    fn params(&self, seed: u64) -> EditorParams {
        EditorParams {
            t_min: self.t_min,
            t_max: self.t_max,
            ddim_steps: self.ddim_steps,
            guidance_image: self.s_image,
            guidance_text: self.s_text,
            seed,
        }
    }

    fn build(&self) -> Result<Box<dyn Editor>> {
        let selection = match self.editor.as_deref() {
            Some("remote") | None => format!("remote:{}", remote_url("--editor")?),
            Some(s) => s.to_string(),
        };
        parse_editor(&selection).map_err(|e| usage(format!("--editor: {e}")))
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene directory; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    instruction: String,
    /// Run directory for reports, snapshots and the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image updates per round.
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Optimizer steps per round.
    #[arg(long, default_value_t = 10)]
    n: u64,
    #[arg(long, default_value_t = 3000)]
    max_iters: u64,
    /// Embedder for per-round dataset consistency: mock[:<seed>] | remote[:<url>].
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long, default_value_t = 2)]
    snapshot_downscale: u32,
    #[command(flatten)]
    editor: EditorArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// Seconds to keep serving after the run ends.
    #[arg(long, default_value_t = 0)]
    linger: u64,
}

#[derive(Args)]
struct BaselineArgs {
    /// per-frame | one-time | sds
    #[arg(long)]
    kind: String,
    /// Camera path, required for per-frame.
    #[arg(long)]
    path: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    path: PathBuf,
    /// Output directory for `frame_<i>.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    downscale: u32,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of original frames, matched to edited frames by sorted name.
    #[arg(long)]
    originals: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    /// Output directory for `metrics.json` and `pairs.csv`.
    #[arg(long)]
    out: PathBuf,
    /// mock[:<seed>] | remote[:<url>]
    #[arg(long, default_value = "mock")]
    embedder: String,
    #[arg(long, requires = "target_caption")]
    source_caption: Option<String>,
    #[arg(long, requires = "source_caption")]
    target_caption: Option<String>,
    /// Ground-truth frames for PSNR.
    #[arg(long)]
    references: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    editor: Option<String>,
    /// Image guidance scales, one grid row each.
    #[arg(long, value_delimiter = ',', default_value = "1.3,1.5,1.75")]
    s_image: Vec<f64>,
    /// Text guidance scales, one grid column each.
    #[arg(long, value_delimiter = ',', default_value = "6.5,7.5,8.5")]
    s_text: Vec<f64>,
    /// Noise level of every candidate edit.
    #[arg(long, default_value_t = 0.98)]
    t: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid PNG to write.
    #[arg(long)]
    out: PathBuf,
}

/// A flag combination rejected before any work started.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn remote_url(flag: &str) -> Result<String> {
    std::env::var(REMOTE_ENV).map_err(|_| {
        usage(format!(
            "{flag}: no selection given and {REMOTE_ENV} is unset"
        ))
    })
}

fn build_embedder(selection: &str) -> Result<Box<dyn Embedder>> {
    let selection = match selection {
        "remote" => format!("remote:{}", remote_url("--embedder")?),
        s => s.to_string(),
    };
    parse_embedder(&selection).map_err(|e| usage(format!("--embedder: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    scene: PathBuf,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(ckpt: &Path, scene: &Path) -> Result<()> {
    let scene = scene.canonicalize().unwrap_or_else(|_| scene.to_path_buf());
    std::fs::write(
        meta_path(ckpt),
        serde_json::to_string_pretty(&CheckpointMeta { scene })?,
    )?;
    Ok(())
}

fn resolve_scene(ckpt: &Path, scene: Option<&Path>) -> Result<PathBuf> {
    if let Some(s) = scene {
        return Ok(s.to_path_buf());
    }
    let meta = meta_path(ckpt);
    let text = std::fs::read_to_string(&meta).map_err(|_| {
        usage(format!(
            "--scene: not given and {} is missing",
            meta.display()
        ))
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).with_context(|| format!("reading {}", meta.display()))?;
    Ok(meta.scene)
}

fn load_state(ckpt: &Path, seed: u64) -> Result<TrainState> {
    let c = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(TrainState::from_checkpoint(c, seed))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fixture(a) => fixture(a),
        Command::Train(a) => train_cmd(a),
        Command::Edit(a) => edit(a, None),
        Command::Serve(a) => edit(a.run, Some((a.port, a.linger))),
        Command::Baseline(a) => baseline(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Preview(a) => preview(a),
    }
}

fn fixture(a: FixtureArgs) -> Result<()> {
    let mut scene = SyntheticScene::sphere_scene(a.seed);
    scene.orbit.n_views = a.views;
    scene.width = a.size;
    scene.height = a.size;
    scene.validate().map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    let ds = scene.generate(&a.out)?;
    scene.write_orbit_path(&a.out.join("path.json"), a.path_frames, a.path_step)?;
    println!("wrote {} views to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let field = FieldConfig {
        pe_position_freqs: a.field.pos_freqs,
        pe_direction_freqs: a.field.dir_freqs,
        hidden_layers: a.field.field_layers,
        hidden_width: a.field.field_width,
        init_seed: a.seed,
    };
    field.validate().map_err(|e| usage(e.to_string()))?;
    let config = a.optim.config(a.seed);
    config.validate().map_err(|e| usage(e.to_string()))?;
    if a.log_every == 0 {
        return Err(usage("--log-every must be positive"));
    }
    let dataset = load_scene(&a.scene)?;
    let mut state = TrainState::new(RadianceFieldParams::init(field)?, a.seed);
    train(&mut state, &dataset, &config, a.iters, |s| {
        if s.iteration % a.log_every == 0 || s.iteration == a.iters {
            println!("{s}");
        }
    })?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&state.to_checkpoint(), &a.out)?;
    write_meta(&a.out, &a.scene)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

struct Prepared {
    dataset: SceneDataset,
    state: TrainState,
    editor: Box<dyn Editor>,
    embedder: Option<Box<dyn Embedder>>,
    setup: DuSetup,
    scene: PathBuf,
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let schedule = DuSchedule {
        d: a.d,
        n: a.n,
        max_iters: a.max_iters,
        ordering_seed: a.seed,
    };
    let mut setup = DuSetup::new(&a.instruction);
    setup.schedule = schedule;
    setup.train = a.optim.config(a.seed);
    setup.editor = a.editor.params(a.seed);
    setup.render_samples = a.optim.samples;
    setup.snapshot_downscale = a.snapshot_downscale;
    setup.run_dir = Some(a.out.clone());
    setup.validate().map_err(|e| usage(e.to_string()))?;
    let editor = a.editor.build()?;
    let embedder = a.embedder.as_deref().map(build_embedder).transpose()?;
    let scene = resolve_scene(&a.ckpt, a.scene.as_deref())?;
    let dataset = load_scene(&scene)?;
    let state = load_state(&a.ckpt, a.seed)?;
    Ok(Prepared {
        dataset,
        state,
        editor,
        embedder,
        setup,
        scene,
    })
}

fn finish_run(p: &Prepared, out: &Path, report: &DuRunReport) -> Result<()> {
    save_scene(&p.dataset, &out.join("dataset"), ImageSet::Current)?;
    write_meta(&out.join("final.ckpt"), &p.scene)?;
    println!(
        "termination={:?} rounds={} steps={} edits={}",
        report.termination,
        report.rounds.len(),
        report.total_steps,
        report.total_edits
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn edit(a: RunArgs, serve: Option<(u16, u64)>) -> Result<()> {
    let mut p = prepare(&a)?;
    let mut control = match serve {
        Some((port, _)) => {
            let run_id = a
                .out
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let handle = RunHandle::new(&run_id, &p.dataset, &p.setup.editor)?;
            let server = serve_control(handle.clone(), port)?;
            println!("control api listening on {}", server.url());
            Some((handle, server))
        }
        None => None,
    };
    let hooks = RunHooks {
        control: control
            .as_mut()
            .map(|(h, _)| h as &mut dyn in2n_core::dataset_update::RunControl),
        embedder: p.embedder.as_deref(),
    };
    let report =
        run_iterative_du_with(&mut p.dataset, &mut p.state, &mut p.editor, &p.setup, hooks)?;
    finish_run(&p, &a.out, &report)?;
    if let (Some((_, server)), Some((_, linger))) = (control, serve) {
        std::thread::sleep(Duration::from_secs(linger));
        server.shutdown();
    }
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let kind: BaselineKind = a
        .kind
        .parse()
        .map_err(|_| usage(format!("--kind: unknown baseline `{}`", a.kind)))?;
    let path = match (&kind, &a.path) {
        (BaselineKind::PerFrame, None) => {
            return Err(usage("--path is required for --kind per-frame"))
        }
        (_, Some(p)) => Some(load_camera_path(p)?),
        (_, None) => None,
    };
    let mut p = prepare(&a.run)?;
    let hooks = RunHooks {
        control: None,
        embedder: p.embedder.as_deref(),
    };
    let out = run_baseline(
        kind,
        &mut p.dataset,
        &mut p.state,
        &mut p.editor,
        &p.setup,
        path.as_deref(),
        hooks,
    )?;
    match out {
        BaselineOutput::Frames(frames) => {
            let dir = a.run.out.join("frames");
            write_frames(&dir.join("original"), &frames.originals)?;
            write_frames(&dir.join("edited"), &frames.edited)?;
            println!("wrote {} frames to {}", frames.edited.len(), dir.display());
        }
        BaselineOutput::Report(report) => finish_run(&p, &a.run.out, &report)?,
    }
    Ok(())
}

fn write_frames(dir: &Path, frames: &[Image]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.write_png(&dir.join(format!("frame_{i:04}.png")))?;
    }
    Ok(())
}

fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(Image::read_png(p)?)).collect()
}

fn render(a: RenderArgs) -> Result<()> {
    if a.samples < 2 || a.downscale == 0 {
        return Err(usage(
            "--samples must be at least 2 and --downscale positive",
        ));
    }
    let scene = load_scene(&resolve_scene(&a.ckpt, a.scene.as_deref())?)?;
    let path = load_camera_path(&a.path)?;
    let state = load_state(&a.ckpt, 0)?;
    let spec = RaySampleSpec::evaluation(scene.near, scene.far, a.samples, scene.background);
    let frames = path
        .iter()
        .map(|cam| Ok(render_frame(&state.params, cam, a.downscale, &spec)?))
        .collect::<Result<Vec<_>>>()?;
    write_frames(&a.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let embedder = build_embedder(&a.embedder)?;
    let originals = read_frames(&a.originals)?;
    let edited = read_frames(&a.edited)?;
    let references = a.references.as_deref().map(read_frames).transpose()?;
    let captions = match (&a.source_caption, &a.target_caption) {
        (Some(s), Some(t)) => Some(Captions {
            source: s,
            target: t,
        }),
        _ => None,
    };
    let (report, pairs) = evaluate_sequence(
        embedder.as_ref(),
        &originals,
        &edited,
        captions,
        references.as_deref(),
    )?;
    write_metrics(&a.out, &report, &pairs)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn preview(a: PreviewArgs) -> Result<()> {
    if a.s_image.is_empty() || a.s_text.is_empty() {
        return Err(usage("--s-image and --s-text need at least one value"));
    }
    let editor_args = EditorArgs {
        editor: a.editor.clone(),
        s_image: a.s_image[0],
        s_text: a.s_text[0],
        t_min: a.t,
        t_max: a.t,
        ddim_steps: EditorParams::default().ddim_steps,
    };
    editor_args
        .params(a.seed)
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    let mut editor = editor_args.build()?;
    let scene = load_scene(&resolve_scene(&a.ckpt, a.scene.as_deref())?)?;
    let view = scene
        .view(a.view)
        .map_err(|e| usage(format!("--view: {e}")))?;
    let state = load_state(&a.ckpt, a.seed)?;
    let spec = RaySampleSpec::evaluation(scene.near, scene.far, a.samples, scene.background);
    let render = render_frame(&state.params, view.camera(), 1, &spec)?;

    let mut cells = Vec::new();
    for &s_i in &a.s_image {
        for &s_t in &a.s_text {
            let params = EditorParams {
                guidance_image: s_i,
                guidance_text: s_t,
                ..editor_args.params(a.seed)
            };
            params.validate().map_err(|e| usage(e.to_string()))?;
            cells.push(editor.edit(&EditRequest {
                conditioning: view.original(),
                current: &render,
                instruction: &a.instruction,
                t: a.t,
                params: &params,
                view_id: a.view,
            })?);
        }
    }
    let (w, h) = (render.width(), render.height());
    let cols = a.s_text.len() as u32;
    let rows = a.s_image.len() as u32;
    let grid = Image::from_fn(w * cols, h * rows, |x, y| {
        let cell = &cells[((y / h) * cols + x / w) as usize];
        cell.get(x % w, y % h)
    });
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    grid.write_png(&a.out)?;
    println!("wrote {}x{} grid to {}", rows, cols, a.out.display());
    Ok(())
}
