//! GVF: a deliberately plain raw-video container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "GVF1"
//! width   u32      pixels
//! height  u32      pixels
//! channels u32     samples per pixel
//! frames  u32      frame count
//! plen    u32      prompt byte length
//! prompt  plen bytes, UTF-8
//! payload width*height*channels*frames bytes, u8; frame-major,
//!         row-major, channel-interleaved
//! ```
//!
//! Samples quantize `[-1, 1]` floats to `u8` via `round((v+1)*127.5)` and
//! map back as `v = b/127.5 - 1`, so a write/read/write cycle is
//! byte-identical. No compression, no codec state: the same video and
//! prompt always produce the same file, byte for byte.

use crate::corpus::Video;
use crate::grid::Frame;
use std::path::Path;
use thiserror::Error;

/// Errors from reading or writing GVF files.
#[derive(Debug, Error)]
pub enum GvfError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}, expected \"GVF1\"")]
    BadMagic { got: [u8; 4] },
    #[error("file truncated: needed {need} more bytes at offset {at}")]
    Truncated { need: usize, at: usize },
    #[error("file length {got} does not match header-declared {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("declared dimensions {width}x{height}x{channels}x{frames} overflow")]
    DimensionOverflow {
        width: u32,
        height: u32,
        channels: u32,
        frames: u32,
    },
    #[error("width, height and channels must be nonzero")]
    ZeroDimension,
    #[error("file declares zero frames")]
    ZeroFrames,
    #[error("prompt is not valid UTF-8")]
    BadPrompt,
}

const MAGIC: &[u8; 4] = b"GVF1";

/// Quantizes a normalized sample to its byte representation.
pub fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Maps a byte back to its normalized sample.
pub fn dequantize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Builds the fixed-size header plus prompt; the frame payload follows
/// immediately after these bytes.
pub(crate) fn gvf_header(
    width: u32,
    height: u32,
    channels: u32,
    frames: u32,
    prompt: &str,
) -> Vec<u8> {
    let prompt = prompt.as_bytes();
    let mut out = Vec::with_capacity(24 + prompt.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
    out.extend_from_slice(prompt);
    out
}

/// Serializes a video to GVF bytes.
pub fn gvf_bytes(video: &Video) -> Vec<u8> {
    let first = &video.frames()[0];
    let payload: usize = video
        .frames()
        .iter()
        .map(|f| f.data().len())
        .sum();
    let mut out = gvf_header(
        first.width(),
        first.height(),
        first.channels(),
        video.frames().len() as u32,
        video.prompt(),
    );
    out.reserve(payload);
    for frame in video.frames() {
        out.extend(frame.data().iter().map(|&v| quantize(v)));
    }
    out
}

/// Writes `video` to `path` (atomically: temp file + rename).
pub fn write_gvf(video: &Video, path: &Path) -> Result<(), GvfError> {
    super::write_atomic(path, &gvf_bytes(video))?;
    Ok(())
}

/// Reads a video back from `path`.
pub fn read_gvf(path: &Path) -> Result<Video, GvfError> {
    parse_gvf(&std::fs::read(path)?)
}

/// Parses GVF bytes. The whole declared payload must be present and the
/// file must contain nothing after it.
pub fn parse_gvf(bytes: &[u8]) -> Result<Video, GvfError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(GvfError::BadMagic {
            got: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let width = cur.u32()?;
    let height = cur.u32()?;
    let channels = cur.u32()?;
    let frames = cur.u32()?;
    if width == 0 || height == 0 || channels == 0 {
        return Err(GvfError::ZeroDimension);
    }
    if frames == 0 {
        return Err(GvfError::ZeroFrames);
    }
    let frame_len = (width as u64)
        .checked_mul(height as u64)
        .and_then(|v| v.checked_mul(channels as u64))
        .filter(|&v| v <= usize::MAX as u64);
    let payload = frame_len.and_then(|f| f.checked_mul(frames as u64));
    let (frame_len, payload) = match (frame_len, payload) {
        (Some(f), Some(p)) if p <= usize::MAX as u64 => (f as usize, p),
        _ => {
            return Err(GvfError::DimensionOverflow {
                width,
                height,
                channels,
                frames,
            })
        }
    };
    let plen = cur.u32()? as usize;
    let prompt = std::str::from_utf8(cur.take(plen)?)
        .map_err(|_| GvfError::BadPrompt)?
        .to_owned();
    let expected = cur.pos as u64 + payload;
    if (bytes.len() as u64) != expected {
        // Longer than declared is as suspect as shorter; reject both, but
        // report plain truncation with the missing byte count.
        if (bytes.len() as u64) < expected {
            return Err(GvfError::Truncated {
                need: (expected - bytes.len() as u64) as usize,
                at: bytes.len(),
            });
        }
        return Err(GvfError::LengthMismatch {
            expected,
            got: bytes.len() as u64,
        });
    }
    let mut out = Vec::with_capacity(frames as usize);
    for _ in 0..frames {
        let raw = cur.take(frame_len)?;
        let data: Vec<f32> = raw.iter().map(|&b| dequantize(b)).collect();
        out.push(
            Frame::new(width, height, channels, data)
                .expect("dequantized samples are in range"),
        );
    }
    Ok(Video::new(out, prompt).expect("frames are uniform by construction"))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GvfError> {
        if self.buf.len() - self.pos < n {
            return Err(GvfError::Truncated {
                need: n - (self.buf.len() - self.pos),
                at: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, GvfError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(rng: &mut ChaCha8Rng, w: u32, h: u32, c: u32, n: usize) -> Video {
        let frames = (0..n)
            .map(|_| {
                let data: Vec<f32> = (0..(w * h * c) as usize)
                    .map(|_| rng.random_range(-1.0f32..=1.0))
                    .collect();
                Frame::new(w, h, c, data).unwrap()
            })
            .collect();
        Video::new(frames, "a test clip".into()).unwrap()
    }

    #[test]
    fn quantization_is_stable_after_one_trip() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(dequantize(0), -1.0);
        assert_eq!(dequantize(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }

    #[test]
    fn byte_layout_matches_documented_sizes() {
        // A 1x1x3 single-frame file is exactly header (24) + 3 bytes.
        let frame = Frame::new(1, 1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let video = Video::new(vec![frame], String::new()).unwrap();
        let bytes = gvf_bytes(&video);
        assert_eq!(bytes.len(), 27);
        assert_eq!(&bytes[..4], b"GVF1");
        assert_eq!(bytes[24], 0); // -1.0
        assert_eq!(bytes[25], 128); // round(127.5)
        assert_eq!(bytes[26], 255); // +1.0
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let video = random_video(&mut rng, 6, 6, 3, 4);
        let path = dir.path().join("clip.gvf");
        write_gvf(&video, &path).unwrap();
        let first = std::fs::read(&path).unwrap();

        let back = read_gvf(&path).unwrap();
        assert_eq!(back.prompt(), video.prompt());
        assert_eq!(back.frames().len(), 4);
        write_gvf(&back, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second, "write-read-write must be byte stable");
    }

    #[test]
    fn malformed_files_raise_typed_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let video = random_video(&mut rng, 2, 2, 1, 2);
        let good = gvf_bytes(&video);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            parse_gvf(&bad_magic),
            Err(GvfError::BadMagic { got }) if &got == b"XVF1"
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            parse_gvf(truncated),
            Err(GvfError::Truncated { need: 3, .. })
        ));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            parse_gvf(&long),
            Err(GvfError::LengthMismatch { .. })
        ));

        // Header that declares more payload than any allocation could hold.
        let mut huge = Vec::new();
        huge.extend_from_slice(b"GVF1");
        for v in [u32::MAX, u32::MAX, u32::MAX, u32::MAX, 0u32] {
            huge.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            parse_gvf(&huge),
            Err(GvfError::DimensionOverflow { .. })
        ));

        let mut zero = Vec::new();
        zero.extend_from_slice(b"GVF1");
        for v in [0u32, 4, 3, 1, 0] {
            zero.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(parse_gvf(&zero), Err(GvfError::ZeroDimension)));

        assert!(matches!(parse_gvf(b"GV"), Err(GvfError::Truncated { .. })));
    }
}
