//! Python bindings for the grid-video engine.
//!
//! The module mirrors the command-line surface as plain functions
//! (`build_corpus`, `train_role`, `generate`, metrics, `memprobe`) plus
//! thin classes for the types a Python caller actually holds:
//! [`ScheduleParams`], [`RunConfig`] and [`Video`]. Structured results
//! (plans, manifests) cross the boundary as JSON strings — stable,
//! versionable, and trivially `json.loads`-able.
//!
//! Long-running calls (training, sampling, metrics) release the
//! interpreter lock while Rust works.

use std::fs;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridvid_core::corpus;
use gridvid_core::grid::GridImage;
use gridvid_core::io::config;
use gridvid_core::io::gvf;
use gridvid_core::metrics;
use gridvid_core::models;
use gridvid_core::pipeline::{self, GridGenerators};
use gridvid_core::schedule;

/// Domain failures (bad prompts, invalid configs, geometry violations)
/// become `ValueError`; everything is carried as the error's display text.
fn verr(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn ioerr(err: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(err.to_string())
}

/// Key-frame schedule: how many frames one grid holds and how far apart
/// the key frames sit.
#[pyclass(name = "ScheduleParams", frozen, eq)]
#[derive(PartialEq)]
struct PyScheduleParams(schedule::ScheduleParams);

#[pymethods]
impl PyScheduleParams {
    #[new]
    #[pyo3(signature = (frames_per_grid=4, key_stride=9))]
    fn new(frames_per_grid: u32, key_stride: u64) -> PyResult<Self> {
        Ok(Self(
            schedule::ScheduleParams::new(frames_per_grid, key_stride).map_err(verr)?,
        ))
    }

    /// 2x2 grids, key stride 9: 28-frame segments.
    #[staticmethod]
    fn default_2x2() -> Self {
        Self(schedule::ScheduleParams::default_2x2())
    }

    /// 4x4 grids of consecutive frames (keys only).
    #[staticmethod]
    fn default_4x4() -> Self {
        Self(schedule::ScheduleParams::default_4x4())
    }

    #[getter]
    fn frames_per_grid(&self) -> u32 {
        self.0.frames_per_grid()
    }

    #[getter]
    fn key_stride(&self) -> u64 {
        self.0.key_stride()
    }

    #[getter]
    fn segment_length(&self) -> u64 {
        self.0.segment_length()
    }

    #[getter]
    fn level_strides(&self) -> Vec<u64> {
        self.0.level_strides().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "ScheduleParams(frames_per_grid={}, key_stride={})",
            self.0.frames_per_grid(),
            self.0.key_stride()
        )
    }
}

/// A full run configuration (layout, diffusion, training and sampling
/// knobs). Build one from `key = value` text with `RunConfig.parse`.
#[pyclass(name = "RunConfig", frozen, eq)]
#[derive(PartialEq)]
struct PyRunConfig(config::RunConfig);

#[pymethods]
impl PyRunConfig {
    /// The packaged default configuration.
    #[new]
    fn new() -> Self {
        Self(config::RunConfig::default())
    }

    /// Parses and validates `key = value` lines (same format as the
    /// files the CLI reads).
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self(config::RunConfig::parse(text).map_err(verr)?))
    }

    /// The complete configuration as `key = value` text.
    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn grid_side(&self) -> u32 {
        self.0.grid_side
    }

    #[getter]
    fn frame_size(&self) -> u32 {
        self.0.frame_size
    }

    #[getter]
    fn key_stride(&self) -> u64 {
        self.0.key_stride
    }

    #[getter]
    fn steps_key(&self) -> u32 {
        self.0.steps_key
    }

    #[getter]
    fn steps_interp(&self) -> u32 {
        self.0.steps_interp
    }

    #[getter]
    fn train_steps(&self) -> u32 {
        self.0.train_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(grid_side={}, frame_size={}, key_stride={})",
            self.0.grid_side, self.0.frame_size, self.0.key_stride
        )
    }
}

/// A clip: frames in [-1, 1] plus the prompt that describes it.
#[pyclass(name = "Video", frozen)]
struct PyVideo(corpus::Video);

#[pymethods]
impl PyVideo {
    /// Reads a `.gvf` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(gvf::read_gvf(&path).map_err(ioerr)?))
    }

    /// Writes the clip as a `.gvf` file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        gvf::write_gvf(&self.0, &path).map_err(ioerr)
    }

    #[getter]
    fn prompt(&self) -> &str {
        self.0.prompt()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> u32 {
        self.0.channels()
    }

    /// One frame as a flat row-major `[y][x][c]` list of floats.
    fn frame(&self, index: usize) -> PyResult<Vec<f32>> {
        let frame = self
            .0
            .frames()
            .get(index)
            .ok_or_else(|| verr(format!("frame {index} out of range")))?;
        Ok(frame.data().to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.frames().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Video({} frames, {}x{}x{}, {:?})",
            self.0.frames().len(),
            self.0.width(),
            self.0.height(),
            self.0.channels(),
            self.0.prompt()
        )
    }
}

/// Renders `scenes` random clips into `out_dir` (`scene_NNNNN.gvf` plus
/// `index.json`) and returns the clip count.
#[pyfunction]
#[pyo3(signature = (out_dir, scenes, frames, frame_size=30, seed=0))]
fn build_corpus(
    py: Python<'_>,
    out_dir: PathBuf,
    scenes: u64,
    frames: u64,
    frame_size: u32,
    seed: u64,
) -> PyResult<u64> {
    let index = py
        .detach(|| corpus::build_dataset(&out_dir, scenes, frames, frame_size, seed))
        .map_err(verr)?;
    Ok(index.n_scenes)
}

/// Renders the ground-truth clip a prompt describes (no models involved).
#[pyfunction]
#[pyo3(signature = (prompt, frames, frame_size=30))]
fn render_video(prompt: &str, frames: u64, frame_size: u32) -> PyResult<PyVideo> {
    let scene = corpus::parse_prompt(prompt)
        .map_err(verr)?
        .into_scene(frame_size)
        .map_err(verr)?;
    Ok(PyVideo(corpus::render_video(&scene, frames).map_err(verr)?))
}

/// The generation plan for `frames` as a JSON string.
#[pyfunction]
#[pyo3(signature = (frames, params=None))]
fn plan_json(frames: u64, params: Option<PyRef<'_, PyScheduleParams>>) -> PyResult<String> {
    let params = params
        .map(|p| p.0.clone())
        .unwrap_or_else(schedule::ScheduleParams::default_2x2);
    let plan = schedule::full_plan(frames, &params).map_err(verr)?;
    serde_json::to_string_pretty(&plan).map_err(verr)
}

/// Trains one role (`"key"`, `"interp1"`, `"interp2"`, `"nextkey"`) on
/// the corpus in `data_dir`, writes the checkpoint to `out_path` and
/// returns `(steps_trained, final_loss)`.
#[pyfunction]
#[pyo3(signature = (role, data_dir, config, out_path, seed=None))]
fn train_role(
    py: Python<'_>,
    role: &str,
    data_dir: PathBuf,
    config: PyRef<'_, PyRunConfig>,
    out_path: PathBuf,
    seed: Option<u64>,
) -> PyResult<(u64, f64)> {
    let role = models::ModelRole::from_word(role).map_err(verr)?;
    let cfg = config.0.clone();
    drop(config);
    py.detach(move || -> PyResult<(u64, f64)> {
        let (_, videos) = corpus::load_dataset(&data_dir).map_err(verr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
        let model = models::train_role(role, &videos, &cfg, &mut rng).map_err(verr)?;
        if let Some(parent) = out_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(ioerr)?;
            }
        }
        model.save(&out_path).map_err(ioerr)?;
        let final_loss = model.loss_history().last().copied().unwrap_or(f64::NAN);
        Ok((model.steps_trained(), final_loss))
    })
}

fn sampler_knobs(config: Option<PyRef<'_, PyRunConfig>>) -> (u32, u32, f64) {
    let cfg = config
        .map(|c| c.0.clone())
        .unwrap_or_else(config::RunConfig::default);
    (cfg.steps_key, cfg.steps_interp, cfg.guidance_scale)
}

/// Generates `frames` of video from checkpoints in `ckpt_dir`, streams
/// them to `out_path` as GVF, and returns the run manifest as JSON.
#[pyfunction]
#[pyo3(signature = (prompt, frames, ckpt_dir, out_path, seed=0, config=None))]
fn generate(
    py: Python<'_>,
    prompt: &str,
    frames: u64,
    ckpt_dir: PathBuf,
    out_path: PathBuf,
    seed: u64,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<String> {
    let (steps_key, steps_interp, guidance) = sampler_knobs(config);
    let prompt = prompt.to_owned();
    py.detach(move || -> PyResult<String> {
        let mut generators =
            pipeline::ModelGenerators::from_dir(&ckpt_dir, steps_key, steps_interp, guidance)
                .map_err(verr)?;
        let params = generators.schedule_params().clone();
        let fs_px = generators.layout().frame_size();
        let mut sink =
            pipeline::GvfStreamSink::create(&out_path, &prompt, frames, fs_px, fs_px, corpus::CHANNELS)
                .map_err(ioerr)?;
        let manifest =
            pipeline::generate_video(&prompt, frames, &mut generators, &params, &mut sink, seed)
                .map_err(verr)?;
        serde_json::to_string_pretty(&manifest).map_err(verr)
    })
}

/// Densifies the 4 key frames in `keygrid_path` into one full segment and
/// returns the run manifest as JSON.
#[pyfunction]
#[pyo3(signature = (keygrid_path, prompt, ckpt_dir, out_path, seed=0, config=None))]
fn interp_only(
    py: Python<'_>,
    keygrid_path: PathBuf,
    prompt: &str,
    ckpt_dir: PathBuf,
    out_path: PathBuf,
    seed: u64,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<String> {
    let (_, steps_interp, guidance) = sampler_knobs(config);
    let prompt = prompt.to_owned();
    py.detach(move || -> PyResult<String> {
        let key_video = gvf::read_gvf(&keygrid_path).map_err(ioerr)?;
        let mut generators =
            pipeline::ModelGenerators::from_dir(&ckpt_dir, 0, steps_interp, guidance)
                .map_err(verr)?;
        let layout = generators.layout();
        let key_grid = GridImage::pack(layout, key_video.frames()).map_err(verr)?;
        let n_frames = generators.schedule_params().segment_length();
        let fs_px = layout.frame_size();
        let mut sink =
            pipeline::GvfStreamSink::create(&out_path, &prompt, n_frames, fs_px, fs_px, corpus::CHANNELS)
                .map_err(ioerr)?;
        let manifest =
            pipeline::interpolate_from_key_grid(&key_grid, &prompt, &mut generators, &mut sink, seed)
                .map_err(verr)?;
        serde_json::to_string_pretty(&manifest).map_err(verr)
    })
}

/// Runs oracle generations at each length and returns
/// `(n_frames, peak_resident_frames, peak_resident_bytes)` triples.
#[pyfunction]
#[pyo3(signature = (frame_counts, config=None))]
fn memprobe(
    py: Python<'_>,
    frame_counts: Vec<u64>,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<Vec<(u64, u64, u64)>> {
    let cfg = config
        .map(|c| c.0.clone())
        .unwrap_or_else(config::RunConfig::default);
    let reports = py
        .detach(move || pipeline::memory_probe(&cfg, &frame_counts))
        .map_err(verr)?;
    Ok(reports
        .iter()
        .map(|r| (r.requested_frames, r.peak_resident_frames, r.peak_resident_bytes))
        .collect())
}

/// Loads clips from a directory: via `index.json` when present, otherwise
/// every `*.gvf` file in name order.
fn load_videos(dir: &Path) -> PyResult<Vec<corpus::Video>> {
    if dir.join("index.json").exists() {
        let (_, videos) = corpus::load_dataset(dir).map_err(ioerr)?;
        return Ok(videos);
    }
    let entries = fs::read_dir(dir).map_err(ioerr)?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "gvf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ioerr(format!("no .gvf clips in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| gvf::read_gvf(p).map_err(ioerr))
        .collect()
}

/// Fréchet video distance between two clip directories.
#[pyfunction]
fn fvd(py: Python<'_>, dir_a: PathBuf, dir_b: PathBuf) -> PyResult<f64> {
    py.detach(move || {
        let a = load_videos(&dir_a)?;
        let b = load_videos(&dir_b)?;
        metrics::fvd(&a, &b, &metrics::SignatureExtractor).map_err(verr)
    })
}

/// Block-wise FVD: per-position distance over consecutive
/// `block_len`-frame clips, averaged.
#[pyfunction]
#[pyo3(signature = (dir_a, dir_b, block_len=16))]
fn block_fvd(py: Python<'_>, dir_a: PathBuf, dir_b: PathBuf, block_len: u64) -> PyResult<f64> {
    py.detach(move || {
        let a = load_videos(&dir_a)?;
        let b = load_videos(&dir_b)?;
        metrics::block_fvd(&a, &b, block_len, &metrics::SignatureExtractor).map_err(verr)
    })
}

/// Inception score of a clip directory under the shape/color classifier.
#[pyfunction]
fn inception_score(py: Python<'_>, dir: PathBuf) -> PyResult<f64> {
    py.detach(move || {
        let videos = load_videos(&dir)?;
        metrics::inception_score(&videos, &metrics::GrammarClassifier).map_err(verr)
    })
}

/// Mean prompt/video agreement over a clip directory, each clip scored
/// against its own prompt.
#[pyfunction]
fn clipsim(py: Python<'_>, dir: PathBuf) -> PyResult<f64> {
    py.detach(move || {
        let videos = load_videos(&dir)?;
        if videos.is_empty() {
            return Err(verr("no clips to score"));
        }
        let mut total = 0.0;
        for video in &videos {
            total += metrics::clipsim_proxy(video, video.prompt()).map_err(verr)?;
        }
        Ok(total / videos.len() as f64)
    })
}

#[pymodule]
fn gridvid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScheduleParams>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyVideo>()?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(render_video, m)?)?;
    m.add_function(wrap_pyfunction!(plan_json, m)?)?;
    m.add_function(wrap_pyfunction!(train_role, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(interp_only, m)?)?;
    m.add_function(wrap_pyfunction!(memprobe, m)?)?;
    m.add_function(wrap_pyfunction!(fvd, m)?)?;
    m.add_function(wrap_pyfunction!(block_fvd, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(clipsim, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
