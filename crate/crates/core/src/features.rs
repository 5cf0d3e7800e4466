//! Frame matrices standing in for mel spectrograms, plus their on-disk forms.
//!
//! Two encodings are supported:
//! - JSON: `{"frame_rate_hz": f, "frames": [[f32, ...], ...]}`
//! - binary: magic `XVFT`, little-endian `u32 T`, `u32 D`, then `T*D` f32 row-major.
//!
//! The binary form carries no frame rate; readers supply one.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const XVFT_MAGIC: &[u8; 4] = b"XVFT";

/// Default toy frame rate, used when reading binary files.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
    frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        let (t, d) = frames.dim();
        if t == 0 || d == 0 {
            return Err(Error::InvalidFeatures(format!("empty shape {t}x{d}")));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidFeatures(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn zeros(t: usize, d: usize, frame_rate_hz: f64) -> Result<Self> {
        Self::new(Array2::zeros((t, d)), frame_rate_hz)
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn frame(&self, u: usize) -> ArrayView1<'_, f64> {
        self.frames.row(u)
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames.dim()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidFeatures(format!(
                "bad frame range {start}..{end} for length {}",
                self.len()
            )));
        }
        Self::new(
            self.frames.slice(s![start..end, ..]).to_owned(),
            self.frame_rate_hz,
        )
    }

    /// Temporal concatenation `[self; other]`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let frames = ndarray::concatenate(Axis(0), &[self.frames.view(), other.frames.view()])
            .map_err(|e| Error::InvalidFeatures(e.to_string()))?;
        Self::new(frames, self.frame_rate_hz)
    }

    pub fn mean_frame(&self) -> Array1<f64> {
        self.frames
            .mean_axis(Axis(0))
            .expect("non-empty by construction")
    }

    /// Root mean square over all entries.
    pub fn rms(&self) -> f64 {
        let n = self.frames.len() as f64;
        (self.frames.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = FeatureJson {
            frame_rate_hz: self.frame_rate_hz,
            frames: self
                .frames
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect(),
        };
        serde_json::to_string(&doc).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FeatureJson = serde_json::from_str(text)?;
        let t = doc.frames.len();
        let d = doc.frames.first().map_or(0, Vec::len);
        if doc.frames.iter().any(|r| r.len() != d) {
            return Err(Error::Format("ragged frame rows".into()));
        }
        let flat: Vec<f64> = doc.frames.into_iter().flatten().map(f64::from).collect();
        let frames =
            Array2::from_shape_vec((t, d), flat).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(frames, doc.frame_rate_hz)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        write_xvft(&mut w, &self.frames)
    }

    pub fn read_binary<R: Read>(mut r: R, frame_rate_hz: f64) -> Result<Self> {
        let frames = read_xvft(&mut r)?;
        Self::new(frames, frame_rate_hz)
    }

    /// Writes JSON for `.json` paths and the binary form otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if is_json_path(path) {
            fs::write(path, self.to_json())?;
        } else {
            let mut buf = Vec::with_capacity(12 + 4 * self.frames.len());
            self.write_binary(&mut buf)?;
            fs::write(path, buf)?;
        }
        Ok(())
    }

    /// Reads either encoding, sniffing the binary magic.
    pub fn load(path: &Path, frame_rate_hz: f64) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(XVFT_MAGIC) {
            Self::read_binary(bytes.as_slice(), frame_rate_hz)
        } else {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(&text)
        }
    }
}

fn is_json_path(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("json")
}

#[derive(Serialize, Deserialize)]
struct FeatureJson {
    frame_rate_hz: f64,
    frames: Vec<Vec<f32>>,
}

/// Writes one matrix in the XVFT layout (values narrowed to f32).
pub fn write_xvft<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    let (t, d) = m.dim();
    w.write_all(XVFT_MAGIC)?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_xvft<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != XVFT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let t = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let mut raw = vec![0u8; t * d * 4];
    r.read_exact(&mut raw)?;
    let flat: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Array2::from_shape_vec((t, d), flat).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(FeatureSequence::new(array![[1.0, f64::NAN]], 25.0).is_err());
        assert!(FeatureSequence::new(Array2::zeros((0, 3)), 25.0).is_err());
        assert!(FeatureSequence::new(array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn duration_from_rate() {
        let f = FeatureSequence::zeros(50, 8, 25.0).unwrap();
        assert_eq!(f.duration_s(), 2.0);
    }

    #[test]
    fn binary_layout_is_exact() {
        let f = FeatureSequence::new(array![[1.0, -2.5], [0.25, 3.0], [4.0, 5.0]], 25.0).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"XVFT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 12 + 6 * 4);
        assert_eq!(f32::from_le_bytes(buf[16..20].try_into().unwrap()), -2.5);
        let back = FeatureSequence::read_binary(buf.as_slice(), 25.0).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn save_load_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureSequence::new(array![[0.5, 1.5], [2.0, -1.0]], 12.5).unwrap();
        let json = dir.path().join("a.json");
        let bin = dir.path().join("a.xvft");
        f.save(&json).unwrap();
        f.save(&bin).unwrap();
        assert!(fs::read_to_string(&json).unwrap().contains("frame_rate_hz"));
        assert_eq!(FeatureSequence::load(&json, 1.0).unwrap(), f);
        assert_eq!(FeatureSequence::load(&bin, 12.5).unwrap(), f);
    }

    #[test]
    fn concat_and_slice() {
        let a = FeatureSequence::new(array![[1.0], [2.0]], 25.0).unwrap();
        let b = FeatureSequence::new(array![[3.0]], 25.0).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.slice(1, 3).unwrap().frames(), &array![[2.0], [3.0]]);
        assert!(c.slice(2, 2).is_err());
    }
}
