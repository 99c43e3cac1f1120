//! File formats: tensors, sequence directories, result files and debug images.

mod results;
mod sequence;
mod tensor;

pub use results::{read_track_result, write_eval_report, write_init_result, write_track_result, TrackFile, TrackFrame};
pub use sequence::{frame_dir, read_json, read_sequence, write_json, write_sequence, DiskSequence, HandJson};
pub use tensor::{Tensor, TensorData, MAGIC};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes an 8-bit binary PGM image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::LengthMismatch {
            expected: width * height,
            actual: pixels.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
