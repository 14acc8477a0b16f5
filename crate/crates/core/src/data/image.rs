use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An RGB image with interleaved, row-major samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image extents {width}×{height} must be positive")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} samples for a {width}×{height} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::numeric("image", format!("sample {v} outside [0, 1]")));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Builds an image from `f(x, y) -> rgb`, clamping each sample into [0, 1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Planar copy of one channel.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }

    /// The extents the network accepts: even and at least 8.
    pub fn check_model_extents(&self) -> Result<()> {
        let (w, h) = (self.width, self.height);
        if w < 8 || h < 8 || w % 2 != 0 || h % 2 != 0 {
            return Err(Error::Shape(format!("image {w}×{h} must be even and at least 8×8")));
        }
        Ok(())
    }

    /// Stacks same-sized images into an N×3×H×W tensor.
    pub fn batch<T: Real>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let (w, h) = (first.width, first.height);
        let mut out = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Shape(format!(
                    "batch mixes {w}×{h} with {}×{}",
                    img.width, img.height
                )));
            }
            for c in 0..3 {
                out.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::of(v as f64)));
            }
        }
        Tensor::from_vec(&[images.len(), 3, h, w], out)
    }

    /// Image `n` of an N×3×H×W tensor, clamped into [0, 1].
    pub fn from_tensor_clamped<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || n >= s[0] {
            return Err(Error::Shape(format!("cannot take image {n} of {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let base = &t.data()[n * 3 * plane..][..3 * plane];
        Self::from_fn(w, h, |x, y| {
            let i = y * w + x;
            [0, 1, 2].map(|c| {
                let v = base[c * plane + i].as_f64();
                if v.is_nan() { 0.0 } else { v }
            })
        })
    }

    pub fn mse(&self, other: &ImageBuffer) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "cannot compare {}×{} with {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Quantizes to 8-bit samples, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        offset,
        msg: msg.into(),
    }
}

/// Parses a binary P6 PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(path, 0, "expected magic `P6`"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, pos, format!("expected header field {}", k + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| parse_err(path, start, format!("header value `{text}` out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(path, pos, format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(path, pos, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(path, pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(path, pos, "image too large"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let data = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::new(width, height, data)
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Writes via a sibling temporary file and a rename, so readers never see
/// a partial image.
pub fn write_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img))
}

/// Writes text through a temporary sibling and a rename.
pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
