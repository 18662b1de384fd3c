//! Streaming video assembly: walks a [`GenerationPlan`] level by level,
//! keeps only the grids and frames the remaining steps still need, and
//! hands finished frames to a [`FrameSink`] in strict index order.
//!
//! The residency contract is the point of this module. For the default
//! 2x2 layout the working set never exceeds three live grids plus the
//! coarse-level fill frames of the current segment — 22 frame-equivalents
//! — no matter how long the requested video is. Every grid and frame the
//! pipeline holds is wrapped in a tracker guard, so the reported peak is
//! measured, not estimated.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Seek, SeekFrom, Write};
use std::ops::Deref;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, SceneSpec};
use crate::grid::{Frame, GridError, GridImage, GridLayout};
use crate::io::config::{ConfigError, RunConfig};
use crate::io::gvf;
use crate::models::{ModelError, ModelRole, TrainedModel};
use crate::schedule::{
    self, GenerationPlan, GridRef, InterpStep, ScheduleError, ScheduleParams,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no model available for role '{role}'")]
    MissingRole { role: &'static str },
    #[error("generated grid does not match the pipeline layout")]
    LayoutMismatch,
    #[error("plan violation: {what}")]
    PlanViolation { what: String },
    #[error("models disagree: {what}")]
    ModelSetMismatch { what: String },
    #[error("frame sink failed: {0}")]
    Sink(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Receives finished frames in strictly ascending index order, exactly
/// once each. `flush_segment` fires after each segment's tail emission;
/// `finish` fires once after the last frame.
pub trait FrameSink {
    fn put(&mut self, index: u64, frame: &Frame) -> std::io::Result<()>;
    fn flush_segment(&mut self) -> std::io::Result<()> {
        Ok(())
    }
    fn finish(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Collects frames in memory and enforces the ordering contract: any
/// out-of-order or repeated index is rejected at the sink boundary.
#[derive(Debug, Default)]
pub struct MemorySink {
    frames: Vec<Frame>,
    segment_flushes: u64,
    finished: bool,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn segment_flushes(&self) -> u64 {
        self.segment_flushes
    }

    pub fn finished(&self) -> bool {
        self.finished
    }
}

impl FrameSink for MemorySink {
    fn put(&mut self, index: u64, frame: &Frame) -> std::io::Result<()> {
        if index != self.frames.len() as u64 {
            return Err(std::io::Error::other(format!(
                "frame {index} arrived, expected {}",
                self.frames.len()
            )));
        }
        self.frames.push(frame.clone());
        Ok(())
    }

    fn flush_segment(&mut self) -> std::io::Result<()> {
        self.segment_flushes += 1;
        Ok(())
    }

    fn finish(&mut self) -> std::io::Result<()> {
        self.finished = true;
        Ok(())
    }
}

/// Discards frames; used by memory probes where only residency matters.
#[derive(Debug, Default)]
pub struct NullSink {
    pub frames_seen: u64,
}

impl FrameSink for NullSink {
    fn put(&mut self, _index: u64, _frame: &Frame) -> std::io::Result<()> {
        self.frames_seen += 1;
        Ok(())
    }
}

/// Streams frames straight into a GVF file. The header goes out at
/// creation; each frame is quantized into a scratch buffer and written at
/// its fixed offset, so the sink holds one frame's bytes at a time.
pub struct GvfStreamSink {
    file: File,
    payload_start: u64,
    frame_len: u64,
    width: u32,
    height: u32,
    channels: u32,
    n_frames: u64,
    written: u64,
}

impl GvfStreamSink {
    pub fn create(
        path: &Path,
        prompt: &str,
        n_frames: u64,
        width: u32,
        height: u32,
        channels: u32,
    ) -> std::io::Result<Self> {
        if n_frames == 0 || n_frames > u32::MAX as u64 {
            return Err(std::io::Error::other(format!(
                "GVF holds 1..=u32::MAX frames, asked for {n_frames}"
            )));
        }
        let header = gvf::gvf_header(width, height, channels, n_frames as u32, prompt);
        let payload_start = header.len() as u64;
        let frame_len = width as u64 * height as u64 * channels as u64;
        let mut file = File::create(path)?;
        file.write_all(&header)?;
        // Pre-size so the file is a valid (all-zero-payload) GVF from the
        // start and every later write lands inside it.
        file.set_len(payload_start + frame_len * n_frames)?;
        Ok(Self {
            file,
            payload_start,
            frame_len,
            width,
            height,
            channels,
            n_frames,
            written: 0,
        })
    }

    pub fn frames_written(&self) -> u64 {
        self.written
    }
}

impl FrameSink for GvfStreamSink {
    fn put(&mut self, index: u64, frame: &Frame) -> std::io::Result<()> {
        if index >= self.n_frames {
            return Err(std::io::Error::other(format!(
                "frame {index} out of range, file holds {}",
                self.n_frames
            )));
        }
        if (frame.width(), frame.height(), frame.channels())
            != (self.width, self.height, self.channels)
        {
            return Err(std::io::Error::other("frame shape does not match the file header"));
        }
        let bytes: Vec<u8> = frame.data().iter().map(|&v| gvf::quantize(v)).collect();
        self.file
            .seek(SeekFrom::Start(self.payload_start + index * self.frame_len))?;
        self.file.write_all(&bytes)?;
        self.written += 1;
        Ok(())
    }

    fn flush_segment(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }

    fn finish(&mut self) -> std::io::Result<()> {
        if self.written != self.n_frames {
            return Err(std::io::Error::other(format!(
                "finished after {} of {} frames",
                self.written, self.n_frames
            )));
        }
        self.file.flush()
    }
}

/// Residency snapshot taken when the pipeline enters a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub phase: String,
    pub resident_frames: u64,
    pub resident_bytes: u64,
}

#[derive(Debug, Default)]
struct TrackState {
    frames: u64,
    bytes: u64,
    peak_frames: u64,
    peak_bytes: u64,
    timeline: Vec<PhaseSample>,
}

/// Counts live pipeline buffers in frame-equivalents (a grid counts as
/// its cell count) and bytes. Guards returned by [`MemoryTracker::grid`]
/// and [`MemoryTracker::frame`] release their share on drop, so the peak
/// reflects what was actually held, including transients.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    state: Rc<RefCell<TrackState>>,
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&self, frames: u64, bytes: u64) {
        let mut s = self.state.borrow_mut();
        s.frames += frames;
        s.bytes += bytes;
        s.peak_frames = s.peak_frames.max(s.frames);
        s.peak_bytes = s.peak_bytes.max(s.bytes);
    }

    fn release(&self, frames: u64, bytes: u64) {
        let mut s = self.state.borrow_mut();
        s.frames -= frames;
        s.bytes -= bytes;
    }

    fn enter_phase(&self, phase: String) {
        let mut s = self.state.borrow_mut();
        let (frames, bytes) = (s.frames, s.bytes);
        s.timeline.push(PhaseSample {
            phase,
            resident_frames: frames,
            resident_bytes: bytes,
        });
    }

    fn grid(&self, grid: GridImage) -> TrackedGrid {
        let frames = grid.layout().cells() as u64;
        let bytes = grid.canvas().byte_size();
        self.alloc(frames, bytes);
        TrackedGrid {
            grid,
            tracker: self.clone(),
            frames,
            bytes,
        }
    }

    fn frame(&self, frame: Frame) -> TrackedFrame {
        let bytes = frame.byte_size();
        self.alloc(1, bytes);
        TrackedFrame {
            frame,
            tracker: self.clone(),
            bytes,
        }
    }

    pub fn peak_frames(&self) -> u64 {
        self.state.borrow().peak_frames
    }

    fn report(&self, requested_frames: u64, call_overhead_bytes: u64) -> MemoryReport {
        let s = self.state.borrow();
        MemoryReport {
            requested_frames,
            peak_resident_frames: s.peak_frames,
            peak_resident_bytes: s.peak_bytes,
            call_overhead_bytes,
            timeline: s.timeline.clone(),
        }
    }
}

struct TrackedGrid {
    grid: GridImage,
    tracker: MemoryTracker,
    frames: u64,
    bytes: u64,
}

impl Deref for TrackedGrid {
    type Target = GridImage;
    fn deref(&self) -> &GridImage {
        &self.grid
    }
}

impl Drop for TrackedGrid {
    fn drop(&mut self) {
        self.tracker.release(self.frames, self.bytes);
    }
}

struct TrackedFrame {
    frame: Frame,
    tracker: MemoryTracker,
    bytes: u64,
}

impl Deref for TrackedFrame {
    type Target = Frame;
    fn deref(&self) -> &Frame {
        &self.frame
    }
}

impl Drop for TrackedFrame {
    fn drop(&mut self) {
        self.tracker.release(1, self.bytes);
    }
}

/// What one generation run held in memory. Pipeline buffers (grids and
/// frames) are measured by the tracker; the sampler's own working set
/// (noisy latent, prediction, encoded conditions) is constant per call
/// and reported separately as `call_overhead_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub requested_frames: u64,
    pub peak_resident_frames: u64,
    pub peak_resident_bytes: u64,
    pub call_overhead_bytes: u64,
    pub timeline: Vec<PhaseSample>,
}

/// One model (or oracle) invocation recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub role: String,
    pub segment: usize,
    pub level: u8,
    pub step: usize,
    pub millis: f64,
}

/// Everything needed to audit or reproduce one generated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub prompt: String,
    pub n_frames: u64,
    /// Frames the plan produced before truncation to `n_frames`.
    pub generated_frames: u64,
    /// Hex SHA-256 of the serialized plan; recomputable from the same
    /// frame count and schedule parameters.
    pub plan_digest: String,
    pub checkpoint_ids: BTreeMap<String, String>,
    pub seed: u64,
    pub invocations: Vec<Invocation>,
    pub memory: MemoryReport,
}

impl VideoManifest {
    /// Invocation count per role word.
    pub fn calls(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for inv in &self.invocations {
            *out.entry(inv.role.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// Hex SHA-256 over the serialized plan.
pub fn plan_digest(plan: &GenerationPlan) -> String {
    let bytes = serde_json::to_vec(plan).expect("plans serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Produces the grids a plan asks for. The pipeline owns ordering,
/// residency, and emission; implementations own where pixels come from —
/// diffusion models or ground-truth renders.
pub trait GridGenerators {
    fn layout(&self) -> GridLayout;
    fn schedule_params(&self) -> &ScheduleParams;
    fn has_role(&self, role: ModelRole) -> bool;
    /// Identifiers for the manifest, keyed by role word.
    fn checkpoint_ids(&self) -> BTreeMap<String, String>;
    /// Per-invocation transient working memory, in bytes.
    fn call_overhead_bytes(&self) -> u64;
    fn key_grid(
        &mut self,
        segment: usize,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError>;
    fn next_key_grid(
        &mut self,
        segment: usize,
        previous_key: &GridImage,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError>;
    fn interpolate(
        &mut self,
        step: &InterpStep,
        masked: &GridImage,
        condition: &GridImage,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError>;
}

/// Ground-truth generators: every requested grid is packed from scene
/// renders. Doubles as a conditioning auditor — each call re-derives what
/// the plan says its inputs must contain and errors on any mismatch, so a
/// pipeline bug cannot hide behind a correct-looking final video.
pub struct OracleGenerators {
    layout: GridLayout,
    params: ScheduleParams,
}

impl OracleGenerators {
    pub fn new(layout: GridLayout, params: ScheduleParams) -> Self {
        Self { layout, params }
    }

    fn pack_renders(
        &self,
        scene: &SceneSpec,
        indices: &[u64],
    ) -> Result<GridImage, PipelineError> {
        let frames: Vec<Frame> = indices.iter().map(|&t| corpus::render(scene, t)).collect();
        Ok(GridImage::pack(self.layout, &frames)?)
    }

    /// The frame indices behind a conditioning reference.
    fn ref_indices(&self, r: GridRef) -> Result<Vec<u64>, PipelineError> {
        match r {
            GridRef::KeyGrid { segment } => Ok(schedule::key_indices(segment, &self.params)),
            GridRef::Level1Output { segment, step } => {
                Ok(schedule::level_steps(segment, 1, &self.params)?[step]
                    .grid_indices()
                    .to_vec())
            }
            GridRef::Level2Output { segment, step } => {
                Ok(schedule::level_steps(segment, 2, &self.params)?[step]
                    .grid_indices()
                    .to_vec())
            }
        }
    }

    fn check_condition(
        &self,
        got: &GridImage,
        want: GridRef,
        scene: &SceneSpec,
    ) -> Result<(), PipelineError> {
        let expect = self.pack_renders(scene, &self.ref_indices(want)?)?;
        if got.canvas() != expect.canvas() {
            return Err(PipelineError::PlanViolation {
                what: format!("conditioning grid does not hold the frames of {want}"),
            });
        }
        Ok(())
    }
}

impl GridGenerators for OracleGenerators {
    fn layout(&self) -> GridLayout {
        self.layout
    }

    fn schedule_params(&self) -> &ScheduleParams {
        &self.params
    }

    fn has_role(&self, _role: ModelRole) -> bool {
        true
    }

    fn checkpoint_ids(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("oracle".to_owned(), "scene renders".to_owned())])
    }

    fn call_overhead_bytes(&self) -> u64 {
        // One packed grid of renders at a time.
        let canvas = self.layout.canvas_size() as u64;
        canvas * canvas * corpus::CHANNELS as u64 * 4
    }

    fn key_grid(
        &mut self,
        segment: usize,
        scene: &SceneSpec,
        _rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        self.pack_renders(scene, &schedule::key_indices(segment, &self.params))
    }

    fn next_key_grid(
        &mut self,
        segment: usize,
        previous_key: &GridImage,
        scene: &SceneSpec,
        _rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        self.check_condition(previous_key, GridRef::KeyGrid { segment: segment - 1 }, scene)?;
        self.pack_renders(scene, &schedule::key_indices(segment, &self.params))
    }

    fn interpolate(
        &mut self,
        step: &InterpStep,
        masked: &GridImage,
        condition: &GridImage,
        scene: &SceneSpec,
        _rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        self.check_condition(condition, step.condition, scene)?;
        // oracle_fill verifies the unmasked cells against renders itself.
        Ok(corpus::oracle_fill(masked, scene, step)?)
    }
}

/// Trained-model generators: one checkpointed [`TrainedModel`] per role
/// the plan needs, plus the sampling knobs.
pub struct ModelGenerators {
    layout: GridLayout,
    params: ScheduleParams,
    steps_key: u32,
    steps_interp: u32,
    guidance: f64,
    models: BTreeMap<&'static str, TrainedModel>,
    ids: BTreeMap<String, String>,
}

impl ModelGenerators {
    /// Wraps already-loaded models. They must agree on layout, codec,
    /// and key stride — one video, one geometry.
    pub fn from_models(
        models: Vec<TrainedModel>,
        steps_key: u32,
        steps_interp: u32,
        guidance: f64,
    ) -> Result<Self, PipelineError> {
        let first = models.first().ok_or(PipelineError::ModelSetMismatch {
            what: "no models supplied".into(),
        })?;
        let layout = first.spec().layout;
        let codec = first.spec().codec;
        let key_stride = first.spec().key_stride;
        let params = first.spec().schedule_params()?;
        let mut map = BTreeMap::new();
        let mut ids = BTreeMap::new();
        for model in models {
            let spec = model.spec();
            if spec.layout != layout || spec.codec != codec || spec.key_stride != key_stride {
                return Err(PipelineError::ModelSetMismatch {
                    what: format!(
                        "'{}' was trained for a different geometry",
                        spec.role.word()
                    ),
                });
            }
            let word = model.role().word();
            ids.insert(
                word.to_owned(),
                format!("{word}@{} steps", model.steps_trained()),
            );
            if map.insert(word, model).is_some() {
                return Err(PipelineError::ModelSetMismatch {
                    what: format!("two models for role '{word}'"),
                });
            }
        }
        Ok(Self {
            layout,
            params,
            steps_key,
            steps_interp,
            guidance,
            models: map,
            ids,
        })
    }

    /// Loads every `<role>.gvck` checkpoint present in `dir`. Roles a
    /// given plan never asks for may be absent.
    pub fn from_dir(
        dir: &Path,
        steps_key: u32,
        steps_interp: u32,
        guidance: f64,
    ) -> Result<Self, PipelineError> {
        let mut models = Vec::new();
        for role in [
            ModelRole::KeyGrid,
            ModelRole::Interp1,
            ModelRole::Interp2,
            ModelRole::NextKeyGrid,
        ] {
            let path = dir.join(format!("{}.gvck", role.word()));
            if path.exists() {
                models.push(TrainedModel::load(&path, role)?);
            }
        }
        Self::from_models(models, steps_key, steps_interp, guidance)
    }

    fn model(&self, role: ModelRole) -> Result<&TrainedModel, PipelineError> {
        self.models
            .get(role.word())
            .ok_or(PipelineError::MissingRole { role: role.word() })
    }
}

impl GridGenerators for ModelGenerators {
    fn layout(&self) -> GridLayout {
        self.layout
    }

    fn schedule_params(&self) -> &ScheduleParams {
        &self.params
    }

    fn has_role(&self, role: ModelRole) -> bool {
        self.models.contains_key(role.word())
    }

    fn checkpoint_ids(&self) -> BTreeMap<String, String> {
        self.ids.clone()
    }

    fn call_overhead_bytes(&self) -> u64 {
        // Worst case over roles: noisy latent + prediction + encoded
        // conditions, all f64.
        self.models
            .values()
            .map(|m| {
                let (c, h, w) = m.latent_shape();
                let latent = c as u64 * h as u64 * w as u64 * 8;
                let conds = m.role().image_conditions(m.spec().non_ar) as u64;
                (2 + conds) * latent
            })
            .max()
            .unwrap_or(0)
    }

    fn key_grid(
        &mut self,
        _segment: usize,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        Ok(self.model(ModelRole::KeyGrid)?.generate_key_grid(
            scene,
            self.steps_key,
            self.guidance,
            rng,
        )?)
    }

    fn next_key_grid(
        &mut self,
        _segment: usize,
        previous_key: &GridImage,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        Ok(self.model(ModelRole::NextKeyGrid)?.next_key_grid(
            previous_key,
            scene,
            self.steps_key,
            self.guidance,
            rng,
        )?)
    }

    fn interpolate(
        &mut self,
        step: &InterpStep,
        masked: &GridImage,
        condition: &GridImage,
        scene: &SceneSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GridImage, PipelineError> {
        let role = ModelRole::for_level(step.level).ok_or(PipelineError::PlanViolation {
            what: format!("no interpolator role for level {}", step.level),
        })?;
        Ok(self.model(role)?.interpolate(
            masked,
            condition,
            scene,
            self.steps_interp,
            self.guidance,
            rng,
        )?)
    }
}

fn check_grid(grid: &GridImage, layout: GridLayout) -> Result<(), PipelineError> {
    if grid.layout() != layout {
        return Err(PipelineError::LayoutMismatch);
    }
    if !grid.mask().is_empty() {
        return Err(PipelineError::PlanViolation {
            what: "generator returned a grid with masked cells".into(),
        });
    }
    Ok(())
}

fn require_roles(
    plan: &GenerationPlan,
    generators: &dyn GridGenerators,
    key_provided: bool,
) -> Result<(), PipelineError> {
    let mut needed = Vec::new();
    if !key_provided {
        needed.push(ModelRole::KeyGrid);
    }
    if plan.segments.len() > 1 {
        needed.push(ModelRole::NextKeyGrid);
    }
    for level in 1..=plan.params.levels() as u8 {
        needed.push(ModelRole::for_level(level).expect("plans stop at level 2"));
    }
    for role in needed {
        if !generators.has_role(role) {
            return Err(PipelineError::MissingRole { role: role.word() });
        }
    }
    Ok(())
}

fn millis_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

/// Executes `plan` against `generators`, emitting to `sink`. Level-major
/// within each segment: the key grid, every coarse step, then every fine
/// step; fine-step fills are emitted straight from the output grid and
/// never join the working set.
fn run_plan(
    plan: &GenerationPlan,
    scene: &SceneSpec,
    generators: &mut dyn GridGenerators,
    sink: &mut dyn FrameSink,
    rng: &mut dyn RngCore,
    tracker: &MemoryTracker,
    mut provided_key: Option<GridImage>,
) -> Result<Vec<Invocation>, PipelineError> {
    let params = &plan.params;
    let layout = generators.layout();
    let n_frames = plan.requested_frames;
    let fs = layout.frame_size();
    let blank = Frame::zeros(fs, fs, corpus::CHANNELS)?;
    let final_level = params.levels() as u8;
    let mask = params.mask_positions();
    let mut invocations = Vec::new();
    let mut prev_key: Option<TrackedGrid> = None;

    for seg_plan in &plan.segments {
        let seg = seg_plan.segment;
        let base = seg as u64 * params.segment_length();
        tracker.enter_phase(format!("segment{seg}/key"));

        // The segment's key grid: supplied by the caller, sampled from
        // text, or extended from the previous segment's keys.
        let key: TrackedGrid = if let Some(k) = provided_key.take() {
            if k.layout() != layout {
                return Err(PipelineError::LayoutMismatch);
            }
            if !k.mask().is_empty() {
                return Err(PipelineError::PlanViolation {
                    what: "provided key grid has masked cells".into(),
                });
            }
            tracker.grid(k)
        } else if seg_plan.key_condition.is_none() {
            let t0 = Instant::now();
            let g = generators.key_grid(seg, scene, rng)?;
            invocations.push(Invocation {
                role: ModelRole::KeyGrid.word().to_owned(),
                segment: seg,
                level: 0,
                step: 0,
                millis: millis_since(t0),
            });
            tracker.grid(g)
        } else {
            let prev = prev_key.take().ok_or_else(|| PipelineError::PlanViolation {
                what: format!("segment {seg} has no previous key grid to extend"),
            })?;
            let t0 = Instant::now();
            let g = generators.next_key_grid(seg, &prev, scene, rng)?;
            invocations.push(Invocation {
                role: ModelRole::NextKeyGrid.word().to_owned(),
                segment: seg,
                level: 0,
                step: 0,
                millis: millis_since(t0),
            });
            drop(prev);
            tracker.grid(g)
        };
        check_grid(&key, layout)?;

        // Working set: key frames now, coarse fills as they appear.
        let mut resident: BTreeMap<u64, TrackedFrame> = BTreeMap::new();
        for (cell, &idx) in seg_plan.key_indices.iter().enumerate() {
            resident.insert(idx, tracker.frame(key.cell(cell as u32)?));
        }

        let mut next_emit = base;
        let mut cond: TrackedGrid = key;
        let mut cond_ref = GridRef::KeyGrid { segment: seg };
        let mut current_level = 0u8;

        for step in &seg_plan.steps {
            if step.level != current_level {
                current_level = step.level;
                tracker.enter_phase(format!("segment{seg}/level{current_level}"));
            }
            // The grid in hand must be exactly what the plan conditions
            // this step on; anything else means the walk lost sync.
            if step.condition != cond_ref {
                return Err(PipelineError::PlanViolation {
                    what: format!(
                        "step conditions on {}, pipeline holds {cond_ref}",
                        step.condition
                    ),
                });
            }
            let k0 = resident
                .get(&step.known.0)
                .ok_or_else(|| PipelineError::PlanViolation {
                    what: format!("known frame {} is not resident", step.known.0),
                })?;
            let k1 = resident
                .get(&step.known.1)
                .ok_or_else(|| PipelineError::PlanViolation {
                    what: format!("known frame {} is not resident", step.known.1),
                })?;
            let masked = tracker.grid(
                GridImage::pack(
                    layout,
                    &[k0.frame.clone(), blank.clone(), blank.clone(), k1.frame.clone()],
                )?
                .apply_mask(&mask)?,
            );
            let t0 = Instant::now();
            let out = generators.interpolate(step, &masked, &cond, scene, rng)?;
            invocations.push(Invocation {
                role: ModelRole::for_level(step.level)
                    .expect("plans stop at level 2")
                    .word()
                    .to_owned(),
                segment: seg,
                level: step.level,
                step: step.step,
                millis: millis_since(t0),
            });
            // Track the output while the masked input is still live —
            // this is the residency peak the module contract documents.
            let out = tracker.grid(out);
            drop(masked);
            check_grid(&out, layout)?;

            if step.level < final_level {
                // Coarse fills join the working set; finer levels need
                // them as known endpoints until the segment ends.
                resident.insert(step.fill.0, tracker.frame(out.cell(mask[0])?));
                resident.insert(step.fill.1, tracker.frame(out.cell(mask[1])?));
            } else {
                // Finest level: everything up to this step's second fill
                // is finalized, so it can leave the pipeline right away.
                while next_emit <= step.fill.1 && next_emit < n_frames {
                    if let Some(f) = resident.get(&next_emit) {
                        sink.put(next_emit, f)?;
                    } else if next_emit == step.fill.0 || next_emit == step.fill.1 {
                        let cell = if next_emit == step.fill.0 { mask[0] } else { mask[1] };
                        let f = tracker.frame(out.cell(cell)?);
                        sink.put(next_emit, &f)?;
                    } else {
                        return Err(PipelineError::PlanViolation {
                            what: format!("frame {next_emit} is not available to emit"),
                        });
                    }
                    next_emit += 1;
                }
            }
            cond = out;
            cond_ref = step.output_ref();
        }

        // Segment tail: whatever the step loop did not emit (the final
        // key frame; every frame, for keys-only schedules).
        tracker.enter_phase(format!("segment{seg}/emit"));
        let seg_end = base + params.segment_length();
        while next_emit < seg_end && next_emit < n_frames {
            let f = resident
                .get(&next_emit)
                .ok_or_else(|| PipelineError::PlanViolation {
                    what: format!("frame {next_emit} missing at segment tail"),
                })?;
            sink.put(next_emit, f)?;
            next_emit += 1;
        }

        // Keep only what the next segment conditions on.
        let last = seg + 1 == plan.segments.len();
        prev_key = if last {
            None
        } else if seg_plan.steps.is_empty() {
            // Keys-only schedule: the grid in hand still is the key grid.
            Some(cond)
        } else {
            let frames: Vec<Frame> = seg_plan
                .key_indices
                .iter()
                .map(|i| resident[i].frame.clone())
                .collect();
            drop(cond);
            Some(tracker.grid(GridImage::pack(layout, &frames)?))
        };
        drop(resident);
        sink.flush_segment()?;
    }
    sink.finish()?;
    Ok(invocations)
}

/// Generates `n_frames` of video for `prompt` and streams the frames to
/// `sink` in index order. `params` must match the generators' own
/// schedule; the seed is recorded in the manifest, so a run can be
/// reproduced from the manifest alone.
pub fn generate_video(
    prompt: &str,
    n_frames: u64,
    generators: &mut dyn GridGenerators,
    params: &ScheduleParams,
    sink: &mut dyn FrameSink,
    seed: u64,
) -> Result<VideoManifest, PipelineError> {
    if params != generators.schedule_params() {
        return Err(PipelineError::ModelSetMismatch {
            what: "schedule parameters do not match the generators'".into(),
        });
    }
    let plan = schedule::full_plan(n_frames, params)?;
    let scene = corpus::parse_prompt(prompt)?.into_scene(generators.layout().frame_size())?;
    require_roles(&plan, generators, false)?;
    let tracker = MemoryTracker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invocations = run_plan(&plan, &scene, generators, sink, &mut rng, &tracker, None)?;
    Ok(VideoManifest {
        prompt: prompt.to_owned(),
        n_frames,
        generated_frames: plan.generated_frames,
        plan_digest: plan_digest(&plan),
        checkpoint_ids: generators.checkpoint_ids(),
        seed,
        invocations,
        memory: tracker.report(n_frames, generators.call_overhead_bytes()),
    })
}

/// Densifies one caller-supplied key grid into a full segment of frames:
/// the interpolation stack alone, no key-grid sampling. The key grid's
/// cells are taken to be the segment's key frames in cell order.
pub fn interpolate_from_key_grid(
    key_grid: &GridImage,
    prompt: &str,
    generators: &mut dyn GridGenerators,
    sink: &mut dyn FrameSink,
    seed: u64,
) -> Result<VideoManifest, PipelineError> {
    let params = generators.schedule_params().clone();
    let n_frames = params.segment_length();
    let plan = schedule::full_plan(n_frames, &params)?;
    let scene = corpus::parse_prompt(prompt)?.into_scene(generators.layout().frame_size())?;
    require_roles(&plan, generators, true)?;
    let tracker = MemoryTracker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invocations = run_plan(
        &plan,
        &scene,
        generators,
        sink,
        &mut rng,
        &tracker,
        Some(key_grid.clone()),
    )?;
    Ok(VideoManifest {
        prompt: prompt.to_owned(),
        n_frames,
        generated_frames: plan.generated_frames,
        plan_digest: plan_digest(&plan),
        checkpoint_ids: generators.checkpoint_ids(),
        seed,
        invocations,
        memory: tracker.report(n_frames, generators.call_overhead_bytes()),
    })
}

/// Runs oracle-backed generations at each requested length and returns
/// the measured memory reports. Constant peak residency across lengths is
/// the streaming contract this exists to demonstrate.
pub fn memory_probe(
    config: &RunConfig,
    frame_counts: &[u64],
) -> Result<Vec<MemoryReport>, PipelineError> {
    config.validate()?;
    let layout = config.layout()?;
    let params = config.schedule_params()?;
    let scene = probe_scene(layout.frame_size());
    let prompt = corpus::prompt_of(&scene);
    let mut out = Vec::with_capacity(frame_counts.len());
    for &n in frame_counts {
        let mut generators = OracleGenerators::new(layout, params.clone());
        let mut sink = NullSink::default();
        let manifest = generate_video(&prompt, n, &mut generators, &params, &mut sink, 0)?;
        out.push(manifest.memory);
    }
    Ok(out)
}

/// A scene that is valid at any frame size the layouts allow. Renders
/// clamp motion at the canvas edge, so arbitrarily long probes stay
/// well-defined.
fn probe_scene(frame_size: u32) -> SceneSpec {
    SceneSpec {
        shape: corpus::Shape::Square,
        color: corpus::ShapeColor::White,
        direction: corpus::Direction::Right,
        speed: 1.0,
        start: ((frame_size / 6).max(2) as i32, (frame_size / 2) as i32),
        background: corpus::Background::Black,
        frame_size,
        seed: 0,
    }
}
