//! H×W×C image tensor, the binary `LTNSR1` tensor file format, and PNG I/O.
//!
//! Layout is row-major with the channel index innermost, so the C values of a
//! pixel are contiguous. Storage is `f32`; reductions elsewhere in the crate
//! accumulate in `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

/// Magic bytes of the binary tensor format.
pub const TENSOR_MAGIC: &[u8; 6] = b"LTNSR1";
/// Dtype code for little-endian `f32`.
pub const DTYPE_F32: u8 = 0x01;

/// Dense H×W×C array of `f32`, channel-innermost row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    /// All-zero tensor.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor3 {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CoreError::InvalidTensor(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidTensor(
                "non-finite value in tensor data".into(),
            ));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    /// Fills each element from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Tensor3 {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// (height, width, channels)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        let i = self.idx(row, col, channel);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Maximum value, `NEG_INFINITY` on an empty tensor.
    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps every element to `[lo, hi]`.
    pub fn clamped(&self, lo: f32, hi: f32) -> Tensor3 {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Writes the `LTNSR1` binary format. Round-trips bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[DTYPE_F32, 3])?;
        for dim in [self.height, self.width, self.channels] {
            let dim = u32::try_from(dim)
                .map_err(|_| CoreError::Format(format!("dimension {dim} overflows u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `LTNSR1` binary format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(CoreError::Format(format!(
                "bad magic {:?}, expected {:?}",
                magic, TENSOR_MAGIC
            )));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        if head[0] != DTYPE_F32 {
            return Err(CoreError::Format(format!("unknown dtype code {:#x}", head[0])));
        }
        if head[1] != 3 {
            return Err(CoreError::Format(format!("ndim {} != 3", head[1])));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let n = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(c))
            .ok_or_else(|| CoreError::Format("dimension product overflows".into()))?;
        let mut data = vec![0f32; n];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        // Trailing bytes mean the file was not written by this format.
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(CoreError::Format("trailing bytes after tensor data".into()));
        }
        Tensor3::from_vec(h, w, c, data)
    }
}

/// Loads an 8-bit gray or RGB PNG, scaling values to `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor3> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor3::from_vec(h, w, 1, data)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor3::from_vec(h, w, 3, data)
        }
        other => Err(CoreError::UnsupportedImage(format!(
            "{:?} (only 8-bit gray and RGB are supported)",
            other.color()
        ))),
    }
}

/// Saves as an 8-bit PNG, clamping to `[0, 1]` and quantizing by `round(v*255)`.
pub fn save_png(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let w = t.width() as u32;
    let h = t.height() as u32;
    match t.channels() {
        1 => {
            let buf: Vec<u8> = t.data().iter().map(|&v| quant(v)).collect();
            let img = image::GrayImage::from_raw(w, h, buf)
                .ok_or_else(|| CoreError::InvalidTensor("buffer size mismatch".into()))?;
            img.save(path)?;
        }
        3 => {
            let buf: Vec<u8> = t.data().iter().map(|&v| quant(v)).collect();
            let img = image::RgbImage::from_raw(w, h, buf)
                .ok_or_else(|| CoreError::InvalidTensor("buffer size mismatch".into()))?;
            img.save(path)?;
        }
        c => {
            return Err(CoreError::UnsupportedImage(format!(
                "{c} channels (PNG export supports 1 or 3)"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ltnsr");
        let t = Tensor3::from_fn(2, 3, 3, |r, c, ch| (r * 9 + c * 3 + ch) as f32 * 0.125 - 0.7);
        t.save(&path).unwrap();
        let back = Tensor3::load(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ltnsr");
        std::fs::write(&path, b"NOTFMT\x01\x03aaaaaaaaaaaa").unwrap();
        match Tensor3::load(&path) {
            Err(CoreError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn file_size_matches_format() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("res.ltnsr");
        let t = Tensor3::zeros(240, 135, 3);
        t.save(&path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 6 + 1 + 1 + 12 + 240 * 135 * 3 * 4);
        let back = Tensor3::load(&path).unwrap();
        assert_eq!(back.shape(), (240, 135, 3));
    }

    #[test]
    fn png_quantization_fixed_points() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.png");
        let t = Tensor3::from_fn(4, 5, 3, |r, c, ch| ((r * 15 + c * 3 + ch) % 256) as f32 / 255.0);
        save_png(&t, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn png_clamps_above_one() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut t = Tensor3::zeros(2, 2, 1);
        t.set(0, 0, 0, 1.2);
        t.set(1, 1, 0, -0.4);
        save_png(&t, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(1, 1, 0), 0.0);
    }

    #[test]
    fn png_roundtrip_error_bounded_by_half_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tensor3::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_png(&t, &path).unwrap();
        let back = load_png(&path).unwrap();
        let max_err = t
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-7, "max_err = {max_err}");
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Tensor3::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor3::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
    }
}
