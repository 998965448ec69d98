use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, IoContext, Result};

use super::AspectBucket;

/// `H×W×3` image with values in `[0,1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    bucket: AspectBucket,
    data: Vec<f32>,
}

impl Raster {
    pub fn filled(bucket: AspectBucket, rgb: [f32; 3]) -> Self {
        let (w, h) = bucket.dims();
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.extend_from_slice(&rgb);
        }
        Self { bucket, data }
    }

    pub fn zeros(bucket: AspectBucket) -> Self {
        Self::filled(bucket, [0.0; 3])
    }

    /// Wraps channel-last data, clamping into `[0,1]`.
    pub fn from_data(bucket: AspectBucket, mut data: Vec<f32>) -> Result<Self> {
        let (w, h) = bucket.dims();
        if data.len() != w * h * 3 {
            return Err(Error::Invalid(format!(
                "raster data length {} does not match bucket {} ({}x{}x3)",
                data.len(),
                bucket.name(),
                w,
                h
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite raster value".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { bucket, data })
    }

    pub fn bucket(&self) -> AspectBucket {
        self.bucket
    }

    pub fn width(&self) -> usize {
        self.bucket.width()
    }

    pub fn height(&self) -> usize {
        self.bucket.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bucket.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width() + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width() + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every pixel, clamping the result.
    pub fn map_pixels(&mut self, f: impl Fn([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            for c in 0..3 {
                px[c] = out[c].clamp(0.0, 1.0);
            }
        }
    }

    pub fn mean_luminance(&self) -> f64 {
        let n = self.data.len() / 3;
        let total: f64 = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .sum();
        total / n as f64
    }

    /// Largest per-channel absolute difference at pixel `i` (flattened index).
    pub fn pixel_diff(&self, other: &Raster, i: usize) -> f32 {
        let (a, b) = (&self.data[i * 3..i * 3 + 3], &other.data[i * 3..i * 3 + 3]);
        (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Raster) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        s / self.data.len() as f64
    }

    /// Binary PPM (P6, maxval 255), values rounded half-up.
    pub fn to_ppm(&self) -> Vec<u8> {
        let (w, h) = self.dims();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    /// Parses a P6 image; the bucket is recovered from its dimensions.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(bad("not a P6 image"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let bucket = AspectBucket::ALL
            .into_iter()
            .find(|b| b.dims() == (w, h))
            .ok_or_else(|| bad(&format!("{w}x{h} is not a bucket size")))?;
        let payload = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated payload"))?;
        let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
        Self::from_data(bucket, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_ppm()).at(path)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        Self::from_ppm(&bytes)
    }

    /// Values snapped to the 8-bit grid, i.e. what a PPM round trip yields.
    pub fn quantized(&self) -> Self {
        Self { bucket: self.bucket, data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect() }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary mask with the dims of a bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn for_bucket(bucket: AspectBucket) -> Self {
        let (w, h) = bucket.dims();
        Self::zeros(w, h)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.data[y * width + x] = 1;
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn at(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims(), other.dims());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Mask { width: self.width, height: self.height, data }
    }

    pub fn invert(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|v| 1 - v).collect() }
    }

    pub fn contains(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| a >= b)
    }
}
