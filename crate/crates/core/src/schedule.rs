//! Frame-index algebra: which frames are keys, which interpolation step
//! fills which indices, what each step conditions on, and how long videos
//! split into segments.
//!
//! All indexing is 0-based and global to the video. A *segment* is the span
//! one key grid covers: with the default 2x2 grid and key stride 9 that is
//! 28 frames (keys at 0/9/18/27), first densified at stride 3 (level 1) and
//! then at stride 1 (level 2). Segments tile the video without sharing
//! boundary frames; a request that is not a multiple of the segment length
//! generates whole segments and truncates at emission.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Errors from schedule construction and index sampling.
#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("frames per grid must be 4 or 16, got {got}")]
    BadGridCells { got: u32 },
    #[error("key stride {got} unsupported for {frames_per_grid} frames per grid")]
    BadKeyStride { got: u64, frames_per_grid: u32 },
    #[error("interpolation level must be in 1..={levels}, got {got}")]
    BadLevel { got: u8, levels: usize },
    #[error("video of {video_len} frames is too short, need at least {need}")]
    VideoTooShort { video_len: u64, need: u64 },
    #[error("a plan needs at least one frame")]
    ZeroFrames,
}

/// Grid shape plus stride structure; everything else is derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleParams {
    frames_per_grid: u32,
    key_stride: u64,
    level_strides: Vec<u64>,
    segment_length: u64,
    mask_positions: [u32; 2],
}

impl ScheduleParams {
    /// Builds parameters for a grid of `frames_per_grid` cells (4 or 16)
    /// whose keys are `key_stride` frames apart. Supported strides: 9, 3 or
    /// 1 for 2x2 grids (each level of interpolation divides the stride by
    /// 3), and 1 for 4x4 grids (keys only, no interpolation).
    pub fn new(frames_per_grid: u32, key_stride: u64) -> Result<Self, ScheduleError> {
        if frames_per_grid != 4 && frames_per_grid != 16 {
            return Err(ScheduleError::BadGridCells {
                got: frames_per_grid,
            });
        }
        let level_strides: Vec<u64> = match (frames_per_grid, key_stride) {
            (4, 9) => vec![3, 1],
            (4, 3) => vec![1],
            (4, 1) | (16, 1) => vec![],
            _ => {
                return Err(ScheduleError::BadKeyStride {
                    got: key_stride,
                    frames_per_grid,
                })
            }
        };
        let segment_length = (frames_per_grid as u64 - 1) * key_stride + 1;
        Ok(ScheduleParams {
            frames_per_grid,
            key_stride,
            level_strides,
            segment_length,
            mask_positions: [1, 2],
        })
    }

    /// The full-system default: 2x2 grids, keys every 9 frames, 28-frame
    /// segments, two interpolation levels.
    pub fn default_2x2() -> Self {
        ScheduleParams::new(4, 9).expect("default parameters are valid")
    }

    /// Keys-only 4x4 variant: 16 consecutive frames per grid.
    pub fn default_4x4() -> Self {
        ScheduleParams::new(16, 1).expect("default parameters are valid")
    }

    pub fn frames_per_grid(&self) -> u32 {
        self.frames_per_grid
    }

    /// Side of the grid (2 or 4).
    pub fn grid_side(&self) -> u32 {
        if self.frames_per_grid == 4 {
            2
        } else {
            4
        }
    }

    pub fn key_stride(&self) -> u64 {
        self.key_stride
    }

    /// Interpolation strides, coarse to fine (`[3, 1]` for stride 9).
    pub fn level_strides(&self) -> &[u64] {
        &self.level_strides
    }

    pub fn levels(&self) -> usize {
        self.level_strides.len()
    }

    /// Frames covered by one segment: `(cells - 1) * key_stride + 1`.
    pub fn segment_length(&self) -> u64 {
        self.segment_length
    }

    /// Cells zeroed in interpolation inputs (always the two middle cells).
    pub fn mask_positions(&self) -> [u32; 2] {
        self.mask_positions
    }
}

/// Name of a grid produced somewhere in a plan; interpolation steps use it
/// to say what they condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GridRef {
    KeyGrid { segment: usize },
    Level1Output { segment: usize, step: usize },
    Level2Output { segment: usize, step: usize },
}

impl std::fmt::Display for GridRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridRef::KeyGrid { segment } => write!(f, "key_grid({segment})"),
            GridRef::Level1Output { segment, step } => write!(f, "level1({segment},{step})"),
            GridRef::Level2Output { segment, step } => write!(f, "level2({segment},{step})"),
        }
    }
}

/// One masked-interpolation invocation: cells 0 and 3 hold the known
/// frames, cells 1 and 2 are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InterpStep {
    pub segment: usize,
    /// 1 = coarse (stride 3 by default), 2 = fine (stride 1).
    pub level: u8,
    /// Position within the level's step list.
    pub step: usize,
    /// Global frame indices of the known pair, `known.1 - known.0 = 3d`.
    pub known: (u64, u64),
    /// Global frame indices produced by this step: `(a + d, a + 2d)`.
    pub fill: (u64, u64),
    /// Previously produced grid this step conditions on.
    pub condition: GridRef,
}

impl InterpStep {
    /// The stride `d` between consecutive cells of this step's grid.
    pub fn stride(&self) -> u64 {
        (self.known.1 - self.known.0) / 3
    }

    /// How this step's output is referred to by later steps.
    pub fn output_ref(&self) -> GridRef {
        match self.level {
            1 => GridRef::Level1Output {
                segment: self.segment,
                step: self.step,
            },
            _ => GridRef::Level2Output {
                segment: self.segment,
                step: self.step,
            },
        }
    }

    /// The four frame indices of this step's grid, cell order.
    pub fn grid_indices(&self) -> [u64; 4] {
        [self.known.0, self.fill.0, self.fill.1, self.known.1]
    }
}

/// Work list for one segment: the key grid, then every interpolation step
/// (all level-1 steps before any level-2 step).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    pub segment: usize,
    pub key_indices: Vec<u64>,
    /// `None` for the first segment (text-only key grid); otherwise the
    /// previous segment's key grid, which seeds autoregressive extension.
    pub key_condition: Option<GridRef>,
    pub steps: Vec<InterpStep>,
}

/// Complete generation schedule for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationPlan {
    pub params: ScheduleParams,
    pub requested_frames: u64,
    /// `segments * segment_length`; never less than `requested_frames`.
    pub generated_frames: u64,
    pub segments: Vec<SegmentPlan>,
}

impl GenerationPlan {
    /// Indices each segment hands to the sink, ascending, truncated to the
    /// requested length. Concatenated across segments this is the emission
    /// order of the whole video.
    pub fn emitted_indices(&self, segment: usize) -> Vec<u64> {
        let lo = segment as u64 * self.params.segment_length();
        let hi = (lo + self.params.segment_length()).min(self.requested_frames);
        (lo..hi).collect()
    }
}

/// Global frame indices of segment `s`'s keys: `[sL, sL+k, sL+2k, ...]`.
pub fn key_indices(segment: usize, params: &ScheduleParams) -> Vec<u64> {
    let base = segment as u64 * params.segment_length();
    (0..params.frames_per_grid() as u64)
        .map(|i| base + i * params.key_stride())
        .collect()
}

/// The interpolation steps of `level` (1-based, coarse first) for one
/// segment, in execution order with their conditioning chain: the first
/// level-1 step conditions on the segment's key grid, the first step of
/// each finer level conditions on the previous level's last output, and
/// every other step conditions on the immediately preceding output of its
/// own level.
pub fn level_steps(
    segment: usize,
    level: u8,
    params: &ScheduleParams,
) -> Result<Vec<InterpStep>, ScheduleError> {
    let levels = params.levels();
    if level == 0 || level as usize > levels {
        return Err(ScheduleError::BadLevel { got: level, levels });
    }
    let d = params.level_strides()[level as usize - 1];
    let span = 3 * d;
    let base = segment as u64 * params.segment_length();
    let count = (params.segment_length() - 1) / span;
    let mut steps = Vec::with_capacity(count as usize);
    for j in 0..count {
        let a = base + j * span;
        let condition = if j == 0 {
            if level == 1 {
                GridRef::KeyGrid { segment }
            } else {
                // Last step of the previous (coarser) level.
                let prev_d = params.level_strides()[level as usize - 2];
                let prev_count = (params.segment_length() - 1) / (3 * prev_d);
                match level - 1 {
                    1 => GridRef::Level1Output {
                        segment,
                        step: prev_count as usize - 1,
                    },
                    _ => GridRef::Level2Output {
                        segment,
                        step: prev_count as usize - 1,
                    },
                }
            }
        } else {
            match level {
                1 => GridRef::Level1Output {
                    segment,
                    step: j as usize - 1,
                },
                _ => GridRef::Level2Output {
                    segment,
                    step: j as usize - 1,
                },
            }
        };
        steps.push(InterpStep {
            segment,
            level,
            step: j as usize,
            known: (a, a + span),
            fill: (a + d, a + 2 * d),
            condition,
        });
    }
    Ok(steps)
}

/// Builds the complete schedule for an `n_frames` video: enough whole
/// segments to cover the request, truncation handled at emission.
pub fn full_plan(n_frames: u64, params: &ScheduleParams) -> Result<GenerationPlan, ScheduleError> {
    if n_frames == 0 {
        return Err(ScheduleError::ZeroFrames);
    }
    let n_segments = n_frames.div_ceil(params.segment_length());
    let mut segments = Vec::with_capacity(n_segments as usize);
    for s in 0..n_segments as usize {
        let mut steps = Vec::new();
        for level in 1..=params.levels() as u8 {
            steps.extend(level_steps(s, level, params)?);
        }
        segments.push(SegmentPlan {
            segment: s,
            key_indices: key_indices(s, params),
            key_condition: if s == 0 {
                None
            } else {
                Some(GridRef::KeyGrid { segment: s - 1 })
            },
            steps,
        });
    }
    Ok(GenerationPlan {
        params: params.clone(),
        requested_frames: n_frames,
        generated_frames: n_segments * params.segment_length(),
        segments,
    })
}

/// Frame indices for one interpolation training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    /// The conditioning grid: four consecutive stride-`d` frames.
    pub cond_indices: [u64; 4],
    /// The grid to denoise: the next four stride-`d` frames.
    pub input_indices: [u64; 4],
    /// Cells of the input grid that are masked for the model.
    pub mask_positions: [u32; 2],
}

/// Samples an 8-frame training window at stride `d` from a `video_len`
/// video: a random start `s` gives conditioning frames
/// `[s, s+d, s+2d, s+3d]` and input frames `[s+4d .. s+7d]`, whose two
/// middle cells are masked.
pub fn training_sample<R: Rng + ?Sized>(
    video_len: u64,
    level_stride: u64,
    rng: &mut R,
) -> Result<TrainingSample, ScheduleError> {
    let d = level_stride;
    let need = 7 * d + 1;
    if video_len < need {
        return Err(ScheduleError::VideoTooShort { video_len, need });
    }
    let max_start = video_len - need;
    let s = rng.random_range(0..=max_start);
    Ok(TrainingSample {
        cond_indices: [s, s + d, s + 2 * d, s + 3 * d],
        input_indices: [s + 4 * d, s + 5 * d, s + 6 * d, s + 7 * d],
        mask_positions: [1, 2],
    })
}
