//! Frames, grid layouts, and the pack/unpack/mask operations.
//!
//! A [`Frame`] stores one square RGB(-ish) image as `f32` samples in
//! `[-1, 1]`, interleaved row-major (HWC). A [`GridImage`] packs `G*G`
//! frames onto a single canvas with a uniform gutter between cells; cells
//! are chronological in row-major order. Gutter pixels are always `0.0`,
//! and cells listed in the mask are zeroed wholesale — the mask is how
//! interpolation inputs say "these frames are unknown, fill them in".

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by frame and grid construction.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("frame data length {got} does not match {width}x{height}x{channels}")]
    DataLength {
        got: usize,
        width: u32,
        height: u32,
        channels: u32,
    },
    #[error("frame sample {index} is {value} but must be finite and in [-1, 1]")]
    SampleRange { index: usize, value: f32 },
    #[error("frame dimensions must be nonzero, got {width}x{height}x{channels}")]
    EmptyFrame { width: u32, height: u32, channels: u32 },
    #[error("grid side must be 2 or 4, got {got}")]
    GridSide { got: u32 },
    #[error("frame size must be nonzero")]
    ZeroFrameSize,
    #[error("canvas dimensions overflow u32 (side {grid_side}, frame {frame_size}, gutter {gutter})")]
    CanvasOverflow {
        grid_side: u32,
        frame_size: u32,
        gutter: u32,
    },
    #[error("expected {want} frames for a {side}x{side} grid, got {got}")]
    FrameCount { got: usize, want: usize, side: u32 },
    #[error("frame {index} is {got_w}x{got_h} but the layout wants {want}x{want}")]
    FrameSize {
        index: usize,
        got_w: u32,
        got_h: u32,
        want: u32,
    },
    #[error("frame {index} has {got} channels, expected {want}")]
    FrameChannels { index: usize, got: u32, want: u32 },
    #[error("cell index {cell} out of range for a grid with {cells} cells")]
    CellIndex { cell: u32, cells: u32 },
    #[error("canvas is {got_w}x{got_h} but the layout wants {want}x{want}")]
    CanvasSize { got_w: u32, got_h: u32, want: u32 },
    #[error("cell {cell} is marked masked but contains nonzero samples")]
    MaskedCellNotZero { cell: u32 },
}

/// One square video frame. Samples are `f32` in `[-1, 1]`, stored
/// interleaved: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f32>,
}

impl Frame {
    /// Builds a frame, validating shape and the `[-1, 1]` sample range.
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self, GridError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GridError::EmptyFrame {
                width,
                height,
                channels,
            });
        }
        let want = width as usize * height as usize * channels as usize;
        if data.len() != want {
            return Err(GridError::DataLength {
                got: data.len(),
                width,
                height,
                channels,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
                return Err(GridError::SampleRange { index, value });
            }
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a frame from raw model output: non-finite samples become `0.0`
    /// and everything else is clamped into `[-1, 1]`.
    pub fn from_clamped(
        width: u32,
        height: u32,
        channels: u32,
        mut data: Vec<f32>,
    ) -> Result<Self, GridError> {
        for value in &mut data {
            *value = if value.is_finite() {
                value.clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
        Frame::new(width, height, channels, data)
    }

    /// All-zero (mid-gray) frame.
    pub fn zeros(width: u32, height: u32, channels: u32) -> Result<Self, GridError> {
        let len = width as usize * height as usize * channels as usize;
        Frame::new(width, height, channels, vec![0.0; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Sample at `(x, y)` in channel `c`. Panics on out-of-range coordinates.
    pub fn sample(&self, x: u32, y: u32, c: u32) -> f32 {
        assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize]
    }

    /// Number of bytes the sample buffer occupies.
    pub fn byte_size(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    pub(crate) fn put(&mut self, x: u32, y: u32, c: u32, value: f32) {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize;
        self.data[idx] = value;
    }
}

/// Placement rule for a square grid of square frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    grid_side: u32,
    frame_size: u32,
    gutter: u32,
}

/// One cell's pixel rectangle on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

impl GridLayout {
    /// A `grid_side` x `grid_side` grid of `frame_size` frames separated by
    /// `gutter` pixels. Only 2x2 and 4x4 grids are supported.
    pub fn new(grid_side: u32, frame_size: u32, gutter: u32) -> Result<Self, GridError> {
        if grid_side != 2 && grid_side != 4 {
            return Err(GridError::GridSide { got: grid_side });
        }
        if frame_size == 0 {
            return Err(GridError::ZeroFrameSize);
        }
        let canvas = grid_side
            .checked_mul(frame_size)
            .and_then(|v| v.checked_add((grid_side - 1).checked_mul(gutter)?));
        if canvas.is_none() {
            return Err(GridError::CanvasOverflow {
                grid_side,
                frame_size,
                gutter,
            });
        }
        Ok(GridLayout {
            grid_side,
            frame_size,
            gutter,
        })
    }

    pub fn grid_side(&self) -> u32 {
        self.grid_side
    }

    pub fn frame_size(&self) -> u32 {
        self.frame_size
    }

    pub fn gutter(&self) -> u32 {
        self.gutter
    }

    /// Number of cells (`grid_side` squared).
    pub fn cells(&self) -> u32 {
        self.grid_side * self.grid_side
    }

    /// Canvas edge length: `side * frame + (side - 1) * gutter`.
    pub fn canvas_size(&self) -> u32 {
        self.grid_side * self.frame_size + (self.grid_side - 1) * self.gutter
    }

    /// Pixel rectangles of all cells, row-major (chronological) order.
    pub fn geometry(&self) -> Vec<CellRect> {
        (0..self.cells()).map(|i| self.cell_rect(i)).collect()
    }

    /// Pixel rectangle of cell `i` (row-major). Panics if out of range.
    pub fn cell_rect(&self, cell: u32) -> CellRect {
        assert!(cell < self.cells(), "cell {cell} out of range");
        let stride = self.frame_size + self.gutter;
        let row = cell / self.grid_side;
        let col = cell % self.grid_side;
        CellRect {
            x: col * stride,
            y: row * stride,
            size: self.frame_size,
        }
    }
}

/// A packed grid image: layout, canvas pixels, and the set of masked cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    layout: GridLayout,
    canvas: Frame,
    mask: Vec<u32>,
}

impl GridImage {
    /// Packs `cells()` frames onto one canvas. Frames must all be square at
    /// the layout's frame size with a common channel count; gutter pixels
    /// are written as `0.0` and the mask starts empty.
    pub fn pack(layout: GridLayout, frames: &[Frame]) -> Result<Self, GridError> {
        let want = layout.cells() as usize;
        if frames.len() != want {
            return Err(GridError::FrameCount {
                got: frames.len(),
                want,
                side: layout.grid_side(),
            });
        }
        let channels = frames[0].channels();
        for (index, frame) in frames.iter().enumerate() {
            if frame.width() != layout.frame_size() || frame.height() != layout.frame_size() {
                return Err(GridError::FrameSize {
                    index,
                    got_w: frame.width(),
                    got_h: frame.height(),
                    want: layout.frame_size(),
                });
            }
            if frame.channels() != channels {
                return Err(GridError::FrameChannels {
                    index,
                    got: frame.channels(),
                    want: channels,
                });
            }
        }
        let size = layout.canvas_size();
        let mut canvas = Frame::zeros(size, size, channels)?;
        for (index, frame) in frames.iter().enumerate() {
            let rect = layout.cell_rect(index as u32);
            blit(&mut canvas, frame, rect);
        }
        Ok(GridImage {
            layout,
            canvas,
            mask: Vec::new(),
        })
    }

    /// Wraps an already-rendered canvas (e.g. decoded model output) in a grid
    /// image. Gutter pixels are forced to `0.0`; cells listed in `mask` must
    /// already be all-zero.
    pub fn from_canvas(
        layout: GridLayout,
        mut canvas: Frame,
        mask: &[u32],
    ) -> Result<Self, GridError> {
        let want = layout.canvas_size();
        if canvas.width() != want || canvas.height() != want {
            return Err(GridError::CanvasSize {
                got_w: canvas.width(),
                got_h: canvas.height(),
                want,
            });
        }
        zero_gutters(&mut canvas, layout);
        let mask = normalize_mask(layout, mask)?;
        for &cell in &mask {
            let rect = layout.cell_rect(cell);
            if !cell_is_zero(&canvas, rect) {
                return Err(GridError::MaskedCellNotZero { cell });
            }
        }
        Ok(GridImage {
            layout,
            canvas,
            mask,
        })
    }

    pub fn layout(&self) -> GridLayout {
        self.layout
    }

    pub fn canvas(&self) -> &Frame {
        &self.canvas
    }

    /// Masked cell indices, sorted ascending.
    pub fn mask(&self) -> &[u32] {
        &self.mask
    }

    /// Copies one cell out as a standalone frame.
    pub fn cell(&self, cell: u32) -> Result<Frame, GridError> {
        if cell >= self.layout.cells() {
            return Err(GridError::CellIndex {
                cell,
                cells: self.layout.cells(),
            });
        }
        let rect = self.layout.cell_rect(cell);
        let channels = self.canvas.channels();
        let mut data = Vec::with_capacity(rect.size as usize * rect.size as usize * channels as usize);
        for y in 0..rect.size {
            for x in 0..rect.size {
                for c in 0..channels {
                    data.push(self.canvas.sample(rect.x + x, rect.y + y, c));
                }
            }
        }
        Frame::new(rect.size, rect.size, channels, data)
    }

    /// Recovers all cells as frames, chronological order. Masked cells come
    /// back as all-zero frames.
    pub fn unpack(&self) -> Vec<Frame> {
        (0..self.layout.cells())
            .map(|i| self.cell(i).expect("cell index in range"))
            .collect()
    }

    /// Returns a copy with the listed cells overwritten by `0.0` and added
    /// to the mask. Masking already-masked cells is a no-op, so the call is
    /// idempotent.
    pub fn apply_mask(&self, positions: &[u32]) -> Result<Self, GridError> {
        let extra = normalize_mask(self.layout, positions)?;
        let mut out = self.clone();
        for &cell in &extra {
            let rect = self.layout.cell_rect(cell);
            for y in 0..rect.size {
                for x in 0..rect.size {
                    for c in 0..out.canvas.channels() {
                        out.canvas.put(rect.x + x, rect.y + y, c, 0.0);
                    }
                }
            }
        }
        let mut mask = out.mask;
        mask.extend(extra);
        mask.sort_unstable();
        mask.dedup();
        out.mask = mask;
        Ok(out)
    }

    /// Returns a copy with `frame` written into `cell` and that cell removed
    /// from the mask.
    pub fn with_cell(&self, cell: u32, frame: &Frame) -> Result<Self, GridError> {
        if cell >= self.layout.cells() {
            return Err(GridError::CellIndex {
                cell,
                cells: self.layout.cells(),
            });
        }
        if frame.width() != self.layout.frame_size() || frame.height() != self.layout.frame_size()
        {
            return Err(GridError::FrameSize {
                index: cell as usize,
                got_w: frame.width(),
                got_h: frame.height(),
                want: self.layout.frame_size(),
            });
        }
        if frame.channels() != self.canvas.channels() {
            return Err(GridError::FrameChannels {
                index: cell as usize,
                got: frame.channels(),
                want: self.canvas.channels(),
            });
        }
        let mut out = self.clone();
        blit(&mut out.canvas, frame, self.layout.cell_rect(cell));
        out.mask.retain(|&m| m != cell);
        Ok(out)
    }
}

fn blit(canvas: &mut Frame, frame: &Frame, rect: CellRect) {
    for y in 0..rect.size {
        for x in 0..rect.size {
            for c in 0..frame.channels() {
                canvas.put(rect.x + x, rect.y + y, c, frame.sample(x, y, c));
            }
        }
    }
}

fn zero_gutters(canvas: &mut Frame, layout: GridLayout) {
    if layout.gutter() == 0 {
        return;
    }
    let rects = layout.geometry();
    let inside = |px: u32, py: u32| {
        rects.iter().any(|r| {
            px >= r.x && px < r.x + r.size && py >= r.y && py < r.y + r.size
        })
    };
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            if !inside(x, y) {
                for c in 0..canvas.channels() {
                    canvas.put(x, y, c, 0.0);
                }
            }
        }
    }
}

fn cell_is_zero(canvas: &Frame, rect: CellRect) -> bool {
    for y in 0..rect.size {
        for x in 0..rect.size {
            for c in 0..canvas.channels() {
                if canvas.sample(rect.x + x, rect.y + y, c) != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

fn normalize_mask(layout: GridLayout, positions: &[u32]) -> Result<Vec<u32>, GridError> {
    let mut mask = positions.to_vec();
    mask.sort_unstable();
    mask.dedup();
    if let Some(&cell) = mask.iter().find(|&&c| c >= layout.cells()) {
        return Err(GridError::CellIndex {
            cell,
            cells: layout.cells(),
        });
    }
    Ok(mask)
}
