//! Iterative dataset update and its baselines.
//!
//! A round renders the next view of a fixed seeded permutation, edits the
//! render with the view's original image as conditioning, replaces the
//! view's training image, then runs `n` optimizer steps. Control commands
//! are applied only between rounds.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editor::{
    draw_noise_level, noise_image_with, EditRequest, Editor, EditorParams, NoiseQuery,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::field::{save_checkpoint, RadianceFieldParams};
use crate::image::{Image, Rgb};
use crate::metrics::{sequence_consistency, Embedder};
use crate::renderer::{camera_rays, render_frame, render_rays, render_rays_vjp, RaySampleSpec};
use crate::scene_io::{CameraModel, SceneDataset};
use crate::trainer::{apply_step, reinit_optimizer, train_step, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuSchedule {
    /// Image updates per round.
    pub d: usize,
    /// Optimizer steps per round.
    pub n: u64,
    /// Total optimizer steps for the run.
    pub max_iters: u64,
    pub ordering_seed: u64,
}

impl Default for DuSchedule {
    fn default() -> Self {
        Self {
            d: 1,
            n: 10,
            max_iters: 3000,
            ordering_seed: 0,
        }
    }
}

impl DuSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.d >= 1 && self.n >= 1 && self.max_iters >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct DuSetup {
    pub schedule: DuSchedule,
    pub train: TrainConfig,
    pub editor: EditorParams,
    pub instruction: String,
    /// Samples per ray for renders handed to the editor and for snapshots.
    pub render_samples: usize,
    /// Novel view rendered after every round; the first training camera
    /// when absent.
    pub snapshot_camera: Option<CameraModel>,
    pub snapshot_downscale: u32,
    /// Directory for `report.jsonl`, `run.json`, snapshots and the final
    /// checkpoint.
    pub run_dir: Option<PathBuf>,
}

impl DuSetup {
    pub fn new(instruction: &str) -> Self {
        Self {
            schedule: DuSchedule::default(),
            train: TrainConfig::default(),
            editor: EditorParams::default(),
            instruction: instruction.to_string(),
            render_samples: 64,
            snapshot_camera: None,
            snapshot_downscale: 2,
            run_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.train.validate()?;
        self.editor.validate()?;
        if self.render_samples < 2 || self.snapshot_downscale < 1 {
            return Err(Error::InvalidConfig(
                "render_samples >= 2 and snapshot_downscale >= 1".into(),
            ));
        }
        Ok(())
    }

    fn eval_spec(&self, dataset: &SceneDataset) -> RaySampleSpec {
        RaySampleSpec::evaluation(
            dataset.near,
            dataset.far,
            self.render_samples,
            dataset.background,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIters,
    UserStop,
    Divergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// One-based round index.
    pub round: u64,
    /// Global optimizer iteration after the round.
    pub iteration: u64,
    pub edited_views: Vec<usize>,
    pub noise_levels: Vec<f64>,
    /// Mean training loss over the round's steps.
    pub loss: f64,
    pub editor_params: EditorParams,
    /// Edit-direction consistency of the training images, once every view
    /// has been edited.
    pub dataset_consistency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuRunReport {
    pub editor: String,
    pub instruction: String,
    pub rounds: Vec<RoundRecord>,
    pub termination: Termination,
    pub total_steps: u64,
    pub total_edits: u64,
}

/// Commands accepted between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ControlCommand {
    Stop,
    Pause,
    Resume,
    SetGuidance {
        guidance_image: Option<f64>,
        guidance_text: Option<f64>,
    },
}

pub enum RunEvent<'a> {
    Started {
        params: &'a EditorParams,
        iteration: u64,
    },
    Round {
        record: &'a RoundRecord,
        snapshot: &'a Image,
        dataset: &'a SceneDataset,
    },
    Finished {
        report: &'a DuRunReport,
    },
}

/// Steering hooks for a run.
pub trait RunControl {
    /// Pending commands. With `wait`, blocks until at least one arrives.
    fn commands(&mut self, wait: bool) -> Vec<ControlCommand>;
    fn publish(&mut self, event: RunEvent<'_>);
}

/// No steering; nothing is published.
pub struct NoControl;

impl RunControl for NoControl {
    fn commands(&mut self, _wait: bool) -> Vec<ControlCommand> {
        Vec::new()
    }

    fn publish(&mut self, _event: RunEvent<'_>) {}
}

/// Optional collaborators of a run.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub control: Option<&'a mut dyn RunControl>,
    /// Enables per-round dataset consistency tracking.
    pub embedder: Option<&'a dyn Embedder>,
}

/// Edit-direction consistency of the training images in view order, or
/// `None` while some view is still unedited.
pub fn dataset_consistency(embedder: &dyn Embedder, dataset: &SceneDataset) -> Result<Option<f64>> {
    if dataset.views().iter().any(|v| v.edit_count() == 0) {
        return Ok(None);
    }
    let originals: Vec<Image> = dataset
        .views()
        .iter()
        .map(|v| v.original().clone())
        .collect();
    let current: Vec<Image> = dataset
        .views()
        .iter()
        .map(|v| v.current().clone())
        .collect();
    sequence_consistency(embedder, &originals, &current).map(Some)
}

/// The fixed visiting order of views.
pub fn view_ordering(n_views: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_views).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

struct RunWriter {
    dir: Option<PathBuf>,
    jsonl: Option<BufWriter<File>>,
}

impl RunWriter {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                dir: None,
                jsonl: None,
            });
        };
        fs::create_dir_all(dir.join("snapshots"))?;
        let jsonl = BufWriter::new(File::create(dir.join("report.jsonl"))?);
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            jsonl: Some(jsonl),
        })
    }

    fn round(&mut self, record: &RoundRecord, snapshot: &Image) -> Result<()> {
        if let (Some(dir), Some(out)) = (&self.dir, &mut self.jsonl) {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
            out.flush()?;
            let round_dir = dir
                .join("snapshots")
                .join(format!("round_{}", record.round));
            fs::create_dir_all(&round_dir)?;
            snapshot.write_png(&round_dir.join("render.png"))?;
        }
        Ok(())
    }

    fn finish(&mut self, report: &DuRunReport, state: &TrainState) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join("run.json"), serde_json::to_string_pretty(report)?)?;
            save_checkpoint(&state.to_checkpoint(), &dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Applies queued commands; returns true on stop. Blocks while paused.
fn apply_commands(
    control: &mut dyn RunControl,
    params: &mut EditorParams,
    paused: &mut bool,
) -> bool {
    let mut pending = control.commands(false);
    loop {
        for cmd in pending.drain(..) {
            match cmd {
                ControlCommand::Stop => return true,
                ControlCommand::Pause => *paused = true,
                ControlCommand::Resume => *paused = false,
                ControlCommand::SetGuidance {
                    guidance_image,
                    guidance_text,
                } => {
                    let mut next = params.clone();
                    if let Some(v) = guidance_image {
                        next.guidance_image = v;
                    }
                    if let Some(v) = guidance_text {
                        next.guidance_text = v;
                    }
                    if next.validate().is_ok() {
                        *params = next;
                    }
                }
            }
        }
        if !*paused {
            return false;
        }
        pending = control.commands(true);
    }
}

/// Runs iterative dataset update without hooks.
pub fn run_iterative_du(
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    editor: &mut dyn Editor,
    setup: &DuSetup,
) -> Result<DuRunReport> {
    run_iterative_du_with(dataset, state, editor, setup, RunHooks::default())
}

pub fn run_iterative_du_with(
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    editor: &mut dyn Editor,
    setup: &DuSetup,
    hooks: RunHooks<'_>,
) -> Result<DuRunReport> {
    setup.validate()?;
    let schedule = &setup.schedule;
    let mut no_control = NoControl;
    let control: &mut dyn RunControl = match hooks.control {
        Some(c) => c,
        None => &mut no_control,
    };
    let eval_spec = setup.eval_spec(dataset);
    let snapshot_camera = setup
        .snapshot_camera
        .clone()
        .unwrap_or_else(|| dataset.views()[0].camera().clone());
    let order = view_ordering(dataset.len(), schedule.ordering_seed);
    let mut t_rng = ChaCha8Rng::seed_from_u64(schedule.ordering_seed ^ 0x5851_f42d_4c95_7f2d);
    let mut params = setup.editor.clone();
    let mut writer = RunWriter::new(setup.run_dir.as_deref())?;

    reinit_optimizer(state);
    control.publish(RunEvent::Started {
        params: &params,
        iteration: state.iteration,
    });

    let mut rounds = Vec::new();
    let mut steps = 0u64;
    let mut edits = 0u64;
    let mut visit = 0usize;
    let mut paused = false;
    let termination = loop {
        if steps >= schedule.max_iters {
            break Termination::MaxIters;
        }
        if apply_commands(control, &mut params, &mut paused) {
            break Termination::UserStop;
        }
        let last_good = state.clone();

        let mut edited_views = Vec::with_capacity(schedule.d);
        let mut noise_levels = Vec::with_capacity(schedule.d);
        for _ in 0..schedule.d {
            let v = order[visit % order.len()];
            visit += 1;
            let view = dataset.view(v)?;
            let render = render_frame(&state.params, view.camera(), 1, &eval_spec)?;
            let t = draw_noise_level(&mut t_rng, &params)?;
            let edited = editor.edit(&EditRequest {
                conditioning: view.original(),
                current: &render,
                instruction: &setup.instruction,
                t,
                params: &params,
                view_id: v,
            })?;
            dataset.replace_current(v, edited)?;
            edited_views.push(v);
            noise_levels.push(t);
            edits += 1;
        }

        let budget = schedule.n.min(schedule.max_iters - steps);
        let mut loss_sum = 0.0;
        let mut diverged = false;
        for _ in 0..budget {
            match train_step(state, dataset, &setup.train) {
                Ok(s) => {
                    loss_sum += s.loss;
                    steps += 1;
                }
                Err(Error::NonFiniteLoss(_)) => {
                    *state = last_good.clone();
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            break Termination::Divergence;
        }

        let dataset_consistency = match hooks.embedder {
            Some(e) => dataset_consistency(e, dataset)?,
            None => None,
        };
        let record = RoundRecord {
            round: rounds.len() as u64 + 1,
            iteration: state.iteration,
            edited_views,
            noise_levels,
            loss: loss_sum / budget as f64,
            editor_params: params.clone(),
            dataset_consistency,
        };
        let snapshot = render_frame(
            &state.params,
            &snapshot_camera,
            setup.snapshot_downscale,
            &eval_spec,
        )?;
        writer.round(&record, &snapshot)?;
        control.publish(RunEvent::Round {
            record: &record,
            snapshot: &snapshot,
            dataset,
        });
        rounds.push(record);
    };

    let report = DuRunReport {
        editor: editor.describe(),
        instruction: setup.instruction.clone(),
        rounds,
        termination,
        total_steps: steps,
        total_edits: edits,
    };
    writer.finish(&report, state)?;
    control.publish(RunEvent::Finished { report: &report });
    Ok(report)
}

/// Parameters with the noise range pinned to pure noise.
fn pure_noise(params: &EditorParams) -> EditorParams {
    EditorParams {
        t_min: 1.0,
        t_max: 1.0,
        ..params.clone()
    }
}

/// Original and independently edited frames along a camera path.
#[derive(Clone, Debug)]
pub struct PathFrames {
    pub originals: Vec<Image>,
    pub edited: Vec<Image>,
}

/// Renders each path camera and edits it on its own from pure noise,
/// without any training. Frame `i` is edited as view `i`.
pub fn run_per_frame(
    params: &RadianceFieldParams,
    path: &[CameraModel],
    editor: &mut dyn Editor,
    setup: &DuSetup,
    spec: &RaySampleSpec,
) -> Result<PathFrames> {
    if path.is_empty() {
        return Err(Error::EmptyInput("camera path"));
    }
    let p = pure_noise(&setup.editor);
    let mut originals = Vec::with_capacity(path.len());
    let mut edited = Vec::with_capacity(path.len());
    for (i, cam) in path.iter().enumerate() {
        let frame = render_frame(params, cam, 1, spec)?;
        let out = editor.edit(&EditRequest {
            conditioning: &frame,
            current: &frame,
            instruction: &setup.instruction,
            t: 1.0,
            params: &p,
            view_id: i,
        })?;
        originals.push(frame);
        edited.push(out);
    }
    Ok(PathFrames { originals, edited })
}

/// Edits every training image once from pure noise, then trains for
/// `max_iters` steps on the fixed edited images.
pub fn run_one_time_du(
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    editor: &mut dyn Editor,
    setup: &DuSetup,
    hooks: RunHooks<'_>,
) -> Result<DuRunReport> {
    setup.validate()?;
    let p = pure_noise(&setup.editor);
    let ids: Vec<usize> = dataset.views().iter().map(|v| v.view_id()).collect();
    for &v in &ids {
        let original = dataset.view(v)?.original_shared();
        let edited = editor.edit(&EditRequest {
            conditioning: &original,
            current: &original,
            instruction: &setup.instruction,
            t: 1.0,
            params: &p,
            view_id: v,
        })?;
        dataset.replace_current(v, edited)?;
    }
    reinit_optimizer(state);
    let mut report = train_rounds(dataset, state, setup, hooks, |state, dataset| {
        train_step(state, dataset, &setup.train).map(|s| s.loss)
    })?;
    report.editor = editor.describe();
    report.total_edits = ids.len() as u64;
    if let Some(first) = report.rounds.first_mut() {
        first.edited_views = ids;
        first.noise_levels = vec![1.0; first.edited_views.len()];
    }
    Ok(report)
}

/// Settings for score distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsConfig {
    /// Renders are taken at `1/downscale` resolution.
    pub downscale: u32,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self { downscale: 2 }
    }
}

/// Score distillation: every step renders one random view in full, noises
/// it and pushes `w(t) (eps_hat - eps)` with `w(t) = 1 - abar_t` back
/// through the render. The dataset images are left untouched.
pub fn run_sds(
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    editor: &mut dyn Editor,
    setup: &DuSetup,
    sds: &SdsConfig,
    hooks: RunHooks<'_>,
) -> Result<DuRunReport> {
    setup.validate()?;
    let schedule = NoiseSchedule::default();
    let mut p = setup.editor.clone();
    p.t_min = p.t_min.max(schedule.min_level());
    p.t_max = p.t_max.max(p.t_min);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.schedule.ordering_seed ^ 0x2545_f491_4f6c_dd1d);
    // Conditioning images at render resolution.
    let conditioning = dataset
        .views()
        .iter()
        .map(|v| {
            let cam = v.camera().downscaled(sds.downscale)?;
            Ok(v.original().resize_bilinear(cam.width, cam.height))
        })
        .collect::<Result<Vec<_>>>()?;
    reinit_optimizer(state);
    let mut report = train_rounds(dataset, state, setup, hooks, |state, dataset| {
        let idx = rng.random_range(0..dataset.len());
        let view = &dataset.views()[idx];
        let cam = view.camera().downscaled(sds.downscale)?;
        let rays = camera_rays(&cam);
        let spec = crate::trainer::training_spec(dataset, &setup.train, rng.random());
        let render = Image::from_pixels(
            cam.width,
            cam.height,
            render_rays(&state.params, &rays, &spec)?.colors,
        )?;
        let t = draw_noise_level(&mut rng, &p)?;
        let (z_t, eps) = noise_image_with(&render, t, &mut rng, &schedule)?;
        let eps_hat = editor.predict_noise(&NoiseQuery {
            z_t: &z_t,
            t,
            conditioning: &conditioning[idx],
            instruction: &setup.instruction,
            params: &p,
            view_id: view.view_id(),
        })?;
        let w = 1.0 - schedule.alpha_bar(t);
        let scale = w / (3 * rays.len()) as f64;
        let mut loss = 0.0;
        let d_colors: Vec<Rgb> = eps_hat
            .pixels()
            .iter()
            .zip(eps.pixels())
            .map(|(a, b)| {
                std::array::from_fn(|c| {
                    let r = a[c] - b[c];
                    loss += w * r * r;
                    scale * r
                })
            })
            .collect();
        let (_, grad) = render_rays_vjp(&state.params, &rays, &spec, &d_colors)?;
        let loss = loss / (3 * rays.len()) as f64;
        apply_step(state, loss, f64::NAN, grad, &setup.train).map(|s| s.loss)
    })?;
    report.editor = editor.describe();
    Ok(report)
}

/// Shared loop for baselines that only train: `max_iters` steps grouped in
/// rounds of `n`, with stop handling, snapshots and divergence recovery.
fn train_rounds(
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    setup: &DuSetup,
    hooks: RunHooks<'_>,
    mut step: impl FnMut(&mut TrainState, &SceneDataset) -> Result<f64>,
) -> Result<DuRunReport> {
    let schedule = &setup.schedule;
    let mut no_control = NoControl;
    let control: &mut dyn RunControl = match hooks.control {
        Some(c) => c,
        None => &mut no_control,
    };
    let eval_spec = setup.eval_spec(dataset);
    let snapshot_camera = setup
        .snapshot_camera
        .clone()
        .unwrap_or_else(|| dataset.views()[0].camera().clone());
    let mut writer = RunWriter::new(setup.run_dir.as_deref())?;
    let mut params = setup.editor.clone();
    control.publish(RunEvent::Started {
        params: &params,
        iteration: state.iteration,
    });
    let mut rounds = Vec::new();
    let mut steps = 0;
    let mut paused = false;
    let termination = loop {
        if steps >= schedule.max_iters {
            break Termination::MaxIters;
        }
        if apply_commands(control, &mut params, &mut paused) {
            break Termination::UserStop;
        }
        let last_good = state.clone();
        let budget = schedule.n.min(schedule.max_iters - steps);
        let mut loss_sum = 0.0;
        let mut diverged = false;
        for _ in 0..budget {
            match step(state, dataset) {
                Ok(l) => {
                    loss_sum += l;
                    steps += 1;
                }
                Err(Error::NonFiniteLoss(_)) => {
                    *state = last_good.clone();
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            break Termination::Divergence;
        }
        let dataset_consistency = match hooks.embedder {
            Some(e) => dataset_consistency(e, dataset)?,
            None => None,
        };
        let record = RoundRecord {
            round: rounds.len() as u64 + 1,
            iteration: state.iteration,
            edited_views: Vec::new(),
            noise_levels: Vec::new(),
            loss: loss_sum / budget as f64,
            editor_params: params.clone(),
            dataset_consistency,
        };
        let snapshot = render_frame(
            &state.params,
            &snapshot_camera,
            setup.snapshot_downscale,
            &eval_spec,
        )?;
        writer.round(&record, &snapshot)?;
        control.publish(RunEvent::Round {
            record: &record,
            snapshot: &snapshot,
            dataset,
        });
        rounds.push(record);
    };
    let report = DuRunReport {
        editor: String::new(),
        instruction: setup.instruction.clone(),
        rounds,
        termination,
        total_steps: steps,
        total_edits: 0,
    };
    writer.finish(&report, state)?;
    control.publish(RunEvent::Finished { report: &report });
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    PerFrame,
    OneTimeDu,
    Sds,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-frame" | "per_frame" => Ok(Self::PerFrame),
            "one-time" | "one_time_du" | "one-time-du" => Ok(Self::OneTimeDu),
            "sds" => Ok(Self::Sds),
            _ => Err(Error::InvalidSelection(s.to_string())),
        }
    }
}

pub enum BaselineOutput {
    Frames(PathFrames),
    Report(DuRunReport),
}

/// Dispatches to [`run_per_frame`], [`run_one_time_du`] or [`run_sds`].
/// `path` is required for the per-frame baseline.
pub fn run_baseline(
    kind: BaselineKind,
    dataset: &mut SceneDataset,
    state: &mut TrainState,
    editor: &mut dyn Editor,
    setup: &DuSetup,
    path: Option<&[CameraModel]>,
    hooks: RunHooks<'_>,
) -> Result<BaselineOutput> {
    match kind {
        BaselineKind::PerFrame => {
            let path = path.ok_or(Error::EmptyInput("camera path"))?;
            let spec = setup.eval_spec(dataset);
            run_per_frame(&state.params, path, editor, setup, &spec).map(BaselineOutput::Frames)
        }
        BaselineKind::OneTimeDu => {
            run_one_time_du(dataset, state, editor, setup, hooks).map(BaselineOutput::Report)
        }
        BaselineKind::Sds => run_sds(dataset, state, editor, setup, &SdsConfig::default(), hooks)
            .map(BaselineOutput::Report),
    }
}
