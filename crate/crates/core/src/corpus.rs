//! Synthetic moving-shape corpus: exactly renderable scenes with a closed
//! prompt grammar, so every generated frame has a computable ground truth.
//!
//! A scene is a colored shape translating at constant velocity over a dark
//! background. Rendering is a pure function of `(scene, t)`: frame `t`
//! draws the shape centered at `start + t * speed * direction`, clamped so
//! the shape never leaves the canvas (it stops at the border). Prompts
//! follow a fixed grammar and parse back to the scene that produced them:
//!
//! ```text
//! prompt     = "a " color " " shape " moving " direction
//!              " at speed " speed " on a " background
//!              " background from (" x ", " y ")" ;
//! shape      = "square" | "circle" | "triangle" ;
//! color      = "red" | "orange" | "yellow" | "green"
//!            | "cyan" | "blue" | "magenta" | "white" ;
//! direction  = "left" | "right" | "up" | "down" | "up-right" | "down-left" ;
//! background = "black" | "gray" | "navy" | "olive" ;
//! speed      = positive multiple of 0.25, at most 4 ;
//! x, y       = integer pixel coordinates of the start center ;
//! ```

use crate::grid::{Frame, GridError, GridImage};
use crate::io::gvf::{self, GvfError};
use crate::schedule::InterpStep;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Errors from scene validation, prompt parsing, and dataset I/O.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("frame size must be at least 12 pixels, got {got}")]
    FrameTooSmall { got: u32 },
    #[error("speed must be a positive multiple of 0.25 up to 4, got {got}")]
    BadSpeed { got: f32 },
    #[error("start {got} on the {axis} axis must lie in [{lo}, {hi}] so the shape fits")]
    StartOutOfBounds {
        axis: char,
        got: i32,
        lo: i64,
        hi: i64,
    },
    #[error("no feasible scene: {frame_size}px frames cannot host {n_frames} frames of motion")]
    NoFeasibleScene { frame_size: u32, n_frames: u64 },
    #[error("prompt word {pos} should be {expected}, got {got:?}")]
    Prompt {
        pos: usize,
        expected: String,
        got: String,
    },
    #[error("a video needs at least one frame")]
    EmptyVideo,
    #[error("video frame {index} does not match the shape of frame 0")]
    FrameShapeMismatch { index: usize },
    #[error("known cell {cell} does not match the scene's rendered frame")]
    KnownCellMismatch { cell: u32 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Gvf(#[from] GvfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset index: {0}")]
    Index(#[from] serde_json::Error),
}

/// Samples per pixel for every corpus frame.
pub const CHANNELS: u32 = 3;

/// Speeds are quantized to this step so prompts round-trip exactly.
pub const SPEED_QUANTUM: f32 = 0.25;

/// Largest allowed speed in pixels per frame.
pub const MAX_SPEED: f32 = 4.0;

macro_rules! vocab_enum {
    ($(#[$doc:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// The grammar word for this variant.
            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            /// Inverse of [`word`](Self::word).
            pub fn from_word(word: &str) -> Option<$name> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

vocab_enum! {
    /// What gets drawn.
    Shape {
        Square => "square",
        Circle => "circle",
        Triangle => "triangle",
    }
}

vocab_enum! {
    /// Foreground colors: bright, mutually distinguishable.
    ShapeColor {
        Red => "red",
        Orange => "orange",
        Yellow => "yellow",
        Green => "green",
        Cyan => "cyan",
        Blue => "blue",
        Magenta => "magenta",
        White => "white",
    }
}

vocab_enum! {
    /// Translation direction; `up` means toward smaller y.
    Direction {
        Left => "left",
        Right => "right",
        Up => "up",
        Down => "down",
        UpRight => "up-right",
        DownLeft => "down-left",
    }
}

vocab_enum! {
    /// Background colors: dark, so the shape is always foreground.
    Background {
        Black => "black",
        Gray => "gray",
        Navy => "navy",
        Olive => "olive",
    }
}

impl ShapeColor {
    /// RGB in normalized `[-1, 1]` space.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            ShapeColor::Red => [1.0, -1.0, -1.0],
            ShapeColor::Orange => [1.0, 0.2, -1.0],
            ShapeColor::Yellow => [1.0, 1.0, -1.0],
            ShapeColor::Green => [-1.0, 1.0, -1.0],
            ShapeColor::Cyan => [-1.0, 1.0, 1.0],
            ShapeColor::Blue => [-1.0, -1.0, 1.0],
            ShapeColor::Magenta => [1.0, -1.0, 1.0],
            ShapeColor::White => [1.0, 1.0, 1.0],
        }
    }
}

impl Background {
    /// RGB in normalized `[-1, 1]` space. All channels stay at or below
    /// -0.2 so no background matches a foreground color.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Black => [-1.0, -1.0, -1.0],
            Background::Gray => [-0.6, -0.6, -0.6],
            Background::Navy => [-1.0, -1.0, -0.2],
            Background::Olive => [-0.2, -0.2, -1.0],
        }
    }
}

impl Direction {
    /// Unit vector `(dx, dy)` in pixel coordinates (y grows downward).
    pub fn unit(self) -> (f64, f64) {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
            Direction::UpRight => (h, -h),
            Direction::DownLeft => (-h, h),
        }
    }
}

/// Everything needed to render a scene deterministically. `seed` is
/// provenance only (which draw produced this scene); rendering depends
/// solely on the visible fields and the frame index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: ShapeColor,
    pub direction: Direction,
    /// Pixels per frame along `direction`.
    pub speed: f32,
    /// Shape center at t = 0.
    pub start: (i32, i32),
    pub background: Background,
    /// Square frame edge length in pixels.
    pub frame_size: u32,
    pub seed: u64,
}

/// Half-extent of the drawn shape for a given frame size.
pub fn shape_radius(frame_size: u32) -> u32 {
    (frame_size / 6).max(2)
}

impl SceneSpec {
    /// Checks the scene invariants: frame big enough, speed quantized,
    /// start position keeps the whole shape on canvas.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.frame_size < 12 {
            return Err(CorpusError::FrameTooSmall {
                got: self.frame_size,
            });
        }
        let steps = self.speed / SPEED_QUANTUM;
        if !(self.speed > 0.0 && self.speed <= MAX_SPEED && (steps - steps.round()).abs() < 1e-6)
        {
            return Err(CorpusError::BadSpeed { got: self.speed });
        }
        let (lo, hi) = self.center_bounds();
        for (axis, got) in [('x', self.start.0), ('y', self.start.1)] {
            if (got as i64) < lo || (got as i64) > hi {
                return Err(CorpusError::StartOutOfBounds { axis, got, lo, hi });
            }
        }
        Ok(())
    }

    /// Inclusive range the shape center may occupy on either axis.
    fn center_bounds(&self) -> (i64, i64) {
        let r = shape_radius(self.frame_size) as i64;
        (r, self.frame_size as i64 - 1 - r)
    }

    /// Shape center at frame `t`, after clamping to the canvas.
    pub fn center_at(&self, t: u64) -> (i64, i64) {
        let (dx, dy) = self.direction.unit();
        let (lo, hi) = self.center_bounds();
        let step = self.speed as f64 * t as f64;
        let px = (self.start.0 as f64 + dx * step).clamp(lo as f64, hi as f64);
        let py = (self.start.1 as f64 + dy * step).clamp(lo as f64, hi as f64);
        (px.round() as i64, py.round() as i64)
    }

    /// True if no clamping occurs during the first `n_frames` frames, i.e.
    /// the motion law `centroid delta = speed * direction` holds throughout.
    pub fn fits(&self, n_frames: u64) -> bool {
        if n_frames == 0 {
            return false;
        }
        let (dx, dy) = self.direction.unit();
        let (lo, hi) = self.center_bounds();
        let step = self.speed as f64 * (n_frames - 1) as f64;
        let end_x = self.start.0 as f64 + dx * step;
        let end_y = self.start.1 as f64 + dy * step;
        (lo as f64..=hi as f64).contains(&end_x) && (lo as f64..=hi as f64).contains(&end_y)
    }
}

fn inside_shape(shape: Shape, dx: i64, dy: i64, r: i64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        // Apex at dy = -r, base at dy = +r, half-width (dy + r) / 2.
        Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
    }
}

/// Draws frame `t` of the scene.
pub fn render(scene: &SceneSpec, t: u64) -> Frame {
    let size = scene.frame_size;
    let bg = scene.background.rgb();
    let fg = scene.color.rgb();
    let mut data = Vec::with_capacity((size * size * CHANNELS) as usize);
    for _ in 0..size * size {
        data.extend_from_slice(&bg);
    }
    let (cx, cy) = scene.center_at(t);
    let r = shape_radius(size) as i64;
    for y in (cy - r).max(0)..=(cy + r).min(size as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(size as i64 - 1) {
            if inside_shape(scene.shape, x - cx, y - cy, r) {
                let base = ((y as usize * size as usize) + x as usize) * CHANNELS as usize;
                data[base..base + 3].copy_from_slice(&fg);
            }
        }
    }
    Frame::new(size, size, CHANNELS, data).expect("palette values are in range")
}

/// A clip: frames plus the prompt that describes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: Vec<Frame>,
    prompt: String,
}

impl Video {
    /// At least one frame; all frames share one shape.
    pub fn new(frames: Vec<Frame>, prompt: String) -> Result<Self, CorpusError> {
        let first = frames.first().ok_or(CorpusError::EmptyVideo)?;
        let want = (first.width(), first.height(), first.channels());
        for (index, f) in frames.iter().enumerate() {
            if (f.width(), f.height(), f.channels()) != want {
                return Err(CorpusError::FrameShapeMismatch { index });
            }
        }
        Ok(Video { frames, prompt })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }

    pub fn channels(&self) -> u32 {
        self.frames[0].channels()
    }
}

/// Renders the first `n_frames` frames of a scene as a captioned video.
pub fn render_video(scene: &SceneSpec, n_frames: u64) -> Result<Video, CorpusError> {
    if n_frames == 0 {
        return Err(CorpusError::EmptyVideo);
    }
    scene.validate()?;
    let frames = (0..n_frames).map(|t| render(scene, t)).collect();
    Video::new(frames, prompt_of(scene))
}

/// The canonical caption for a scene (see the module grammar).
pub fn prompt_of(scene: &SceneSpec) -> String {
    format!(
        "a {} {} moving {} at speed {} on a {} background from ({}, {})",
        scene.color.word(),
        scene.shape.word(),
        scene.direction.word(),
        scene.speed,
        scene.background.word(),
        scene.start.0,
        scene.start.1,
    )
}

/// A prompt decomposed back into scene parameters; combine with a frame
/// size via [`ParsedPrompt::into_scene`] to get a renderable spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedPrompt {
    pub shape: Shape,
    pub color: ShapeColor,
    pub direction: Direction,
    pub speed: f32,
    pub start: (i32, i32),
    pub background: Background,
}

impl ParsedPrompt {
    /// Attaches a frame size and validates the resulting scene.
    pub fn into_scene(self, frame_size: u32) -> Result<SceneSpec, CorpusError> {
        let scene = SceneSpec {
            shape: self.shape,
            color: self.color,
            direction: self.direction,
            speed: self.speed,
            start: self.start,
            background: self.background,
            frame_size,
            seed: 0,
        };
        scene.validate()?;
        Ok(scene)
    }
}

fn expect_word(words: &[&str], pos: usize, want: &str) -> Result<(), CorpusError> {
    let got = words.get(pos).copied().unwrap_or("");
    if got != want {
        return Err(CorpusError::Prompt {
            pos,
            expected: format!("{want:?}"),
            got: got.to_owned(),
        });
    }
    Ok(())
}

fn parse_vocab<T>(
    words: &[&str],
    pos: usize,
    what: &str,
    lookup: impl Fn(&str) -> Option<T>,
) -> Result<T, CorpusError> {
    let got = words.get(pos).copied().unwrap_or("");
    lookup(got).ok_or_else(|| CorpusError::Prompt {
        pos,
        expected: format!("a {what}"),
        got: got.to_owned(),
    })
}

/// Parses a grammar-conforming prompt. Inverse of [`prompt_of`] up to the
/// frame size, which prompts do not carry.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt, CorpusError> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    expect_word(&words, 0, "a")?;
    let color = parse_vocab(&words, 1, "color", ShapeColor::from_word)?;
    let shape = parse_vocab(&words, 2, "shape", Shape::from_word)?;
    expect_word(&words, 3, "moving")?;
    let direction = parse_vocab(&words, 4, "direction", Direction::from_word)?;
    expect_word(&words, 5, "at")?;
    expect_word(&words, 6, "speed")?;
    let speed_word = words.get(7).copied().unwrap_or("");
    let speed: f32 = speed_word.parse().map_err(|_| CorpusError::Prompt {
        pos: 7,
        expected: "a speed".into(),
        got: speed_word.to_owned(),
    })?;
    expect_word(&words, 8, "on")?;
    expect_word(&words, 9, "a")?;
    let background = parse_vocab(&words, 10, "background color", Background::from_word)?;
    expect_word(&words, 11, "background")?;
    expect_word(&words, 12, "from")?;
    let coord = |pos: usize, strip: [char; 2]| -> Result<i32, CorpusError> {
        let raw = words.get(pos).copied().unwrap_or("");
        let inner = raw.trim_start_matches(strip[0]).trim_end_matches(strip[1]);
        let stripped_ok = raw.starts_with(strip[0]) || strip[0] == '\0';
        if !stripped_ok || !raw.ends_with(strip[1]) {
            return Err(CorpusError::Prompt {
                pos,
                expected: format!("a coordinate like {}12{}", strip[0], strip[1]),
                got: raw.to_owned(),
            });
        }
        inner.parse().map_err(|_| CorpusError::Prompt {
            pos,
            expected: "an integer coordinate".into(),
            got: raw.to_owned(),
        })
    };
    let x = coord(13, ['(', ','])?;
    let y = coord(14, ['\0', ')'])?;
    if words.len() != 15 {
        return Err(CorpusError::Prompt {
            pos: 15,
            expected: "end of prompt".into(),
            got: words[15..].join(" "),
        });
    }
    Ok(ParsedPrompt {
        shape,
        color,
        direction,
        speed,
        start: (x, y),
        background,
    })
}

/// Draws a uniformly random scene that plays for `n_frames` frames without
/// hitting a border. Scenes are a pure function of the RNG stream.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    frame_size: u32,
    n_frames: u64,
) -> Result<SceneSpec, CorpusError> {
    if frame_size < 12 {
        return Err(CorpusError::FrameTooSmall { got: frame_size });
    }
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())];
    let direction = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
    let background = Background::ALL[rng.random_range(0..Background::ALL.len())];
    let r = shape_radius(frame_size) as i64;
    let (lo, hi) = (r, frame_size as i64 - 1 - r);
    let (dx, dy) = direction.unit();

    // A speed is usable if some integer start leaves the whole trajectory
    // inside [lo, hi] on both axes.
    let travel = (n_frames.max(1) - 1) as f64;
    let span = (hi - lo) as f64;
    let max_steps = (MAX_SPEED / SPEED_QUANTUM) as u32;
    let feasible: Vec<f32> = (1..=max_steps)
        .map(|k| k as f32 * SPEED_QUANTUM)
        .filter(|&v| {
            let drift = v as f64 * travel;
            drift * dx.abs() <= span && drift * dy.abs() <= span
        })
        .collect();
    if feasible.is_empty() {
        return Err(CorpusError::NoFeasibleScene {
            frame_size,
            n_frames,
        });
    }
    let speed = feasible[rng.random_range(0..feasible.len())];

    let pick_start = |rng: &mut R, u: f64| -> i32 {
        let drift = u * speed as f64 * travel;
        let a = if drift > 0.0 { lo as f64 } else { lo as f64 - drift };
        let b = if drift > 0.0 { hi as f64 - drift } else { hi as f64 };
        rng.random_range(a.ceil() as i64..=b.floor() as i64) as i32
    };
    let x = pick_start(rng, dx);
    let y = pick_start(rng, dy);

    let scene = SceneSpec {
        shape,
        color,
        direction,
        speed,
        start: (x, y),
        background,
        frame_size,
        seed: 0,
    };
    debug_assert!(scene.fits(n_frames));
    scene.validate()?;
    Ok(scene)
}

/// One dataset entry: file name plus its caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub prompt: String,
}

/// `index.json` written next to the clip files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub n_scenes: u64,
    pub frames_per_video: u64,
    pub frame_size: u32,
    pub channels: u32,
    pub seed: u64,
    pub entries: Vec<DatasetEntry>,
}

/// Renders `n_scenes` random scenes into `dir` as `scene_NNNNN.gvf` files
/// plus an `index.json`. Zero scenes is legal and yields an index with no
/// entries.
pub fn build_dataset(
    dir: &Path,
    n_scenes: u64,
    frames_per_video: u64,
    frame_size: u32,
    seed: u64,
) -> Result<DatasetIndex, CorpusError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_scenes as usize);
    for i in 0..n_scenes {
        let mut scene = sample_scene(&mut rng, frame_size, frames_per_video)?;
        scene.seed = seed;
        let video = render_video(&scene, frames_per_video)?;
        let file = format!("scene_{i:05}.gvf");
        gvf::write_gvf(&video, &dir.join(&file))?;
        entries.push(DatasetEntry {
            file,
            prompt: video.prompt().to_owned(),
        });
    }
    let index = DatasetIndex {
        version: 1,
        n_scenes,
        frames_per_video,
        frame_size,
        channels: CHANNELS,
        seed,
        entries,
    };
    let json = serde_json::to_vec_pretty(&index)?;
    crate::io::write_atomic(&dir.join("index.json"), &json)?;
    Ok(index)
}

/// Reads a dataset's index back.
pub fn read_index(dir: &Path) -> Result<DatasetIndex, CorpusError> {
    let raw = std::fs::read(dir.join("index.json"))?;
    Ok(serde_json::from_slice(&raw)?)
}

/// Loads every clip listed in the index, in index order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<Video>), CorpusError> {
    let index = read_index(dir)?;
    let mut videos = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        videos.push(gvf::read_gvf(&dir.join(&entry.file))?);
    }
    Ok((index, videos))
}

/// Ground-truth stand-in for the learned interpolator: replaces each
/// masked cell of `masked` with the true rendered frame for that cell's
/// index in `step`. Unmasked cells must match the scene's renders (that is
/// the contract that makes the substitution sound) and are left untouched.
pub fn oracle_fill(
    masked: &GridImage,
    scene: &SceneSpec,
    step: &InterpStep,
) -> Result<GridImage, CorpusError> {
    let indices = step.grid_indices();
    for cell in 0..masked.layout().cells() {
        if masked.mask().contains(&cell) {
            continue;
        }
        if masked.cell(cell)? != render(scene, indices[cell as usize]) {
            return Err(CorpusError::KnownCellMismatch { cell });
        }
    }
    let mut out = masked.clone();
    for &cell in masked.mask() {
        out = out.with_cell(cell, &render(scene, indices[cell as usize]))?;
    }
    Ok(out)
}
