//! Dense row-major tensors and the raw binary tensor file format.
//!
//! Rank 3 is (H, W, C) image/feature data, rank 4 is (Kh, Kw, Cin, Cout)
//! convolution kernels, rank 1 holds biases, rank 0 is a scalar. No
//! broadcasting anywhere: all shapes are explicit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// View a rank-3 shape as (H, W, C).
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match *self.shape {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-3 (H, W, C), got {:?}",
                self.shape
            ))),
        }
    }

    /// View a rank-4 shape as (Kh, Kw, Cin, Cout).
    pub fn kernel4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape {
            [kh, kw, cin, cout] => Ok((kh, kw, cin, cout)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-4 (Kh, Kw, Cin, Cout), got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> T {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: T) {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    /// Extract the value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.rank() != 0 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// NaN/Inf detection; finiteness is an invariant callers may check.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamp every entry into [lo, hi].
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    /// Rotate a rank-3 tensor by `quarter_turns` x 90 degrees counterclockwise,
    /// then flip horizontally if `hflip`. Used by the training augmentations.
    pub fn dihedral(&self, quarter_turns: u8, hflip: bool) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        let k = quarter_turns % 4;
        let (nh, nw) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut out = Tensor::zeros(&[nh, nw, c]);
        for y in 0..h {
            for x in 0..w {
                // counterclockwise rotation of the (y, x) grid
                let (ry, mut rx) = match k {
                    0 => (y, x),
                    1 => (w - 1 - x, y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (x, h - 1 - y),
                };
                if hflip {
                    rx = nw - 1 - rx;
                }
                let src = (y * w + x) * c;
                let dst = (ry * nw + rx) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok(out)
    }

    /// Crop a rank-3 tensor to `[y0..y0+ph, x0..x0+pw, :]`.
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if y0 + ph > h || x0 + pw > w {
            return Err(Error::ShapeMismatch(format!(
                "crop {ph}x{pw}+{y0}+{x0} exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(ph * pw * c);
        for y in y0..y0 + ph {
            let row = (y * w + x0) * c;
            data.extend_from_slice(&self.data[row..row + pw * c]);
        }
        Tensor::from_vec(&[ph, pw, c], data)
    }

    /// Pad a rank-3 tensor on the bottom/right with mirrored rows/columns
    /// (reflect without repeating the edge) until H and W are multiples of
    /// `m`. Returns the padded tensor and the original (H, W).
    pub fn pad_to_multiple(&self, m: usize) -> Result<(Self, (usize, usize))> {
        let (h, w, c) = self.hwc()?;
        let nh = h.div_ceil(m) * m;
        let nw = w.div_ceil(m) * m;
        if nh == h && nw == w {
            return Ok((self.clone(), (h, w)));
        }
        if nh - h >= h || nw - w >= w {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} too small to reflect-pad to a multiple of {m}"
            )));
        }
        let mut out = Tensor::zeros(&[nh, nw, c]);
        for y in 0..nh {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x in 0..nw {
                let sx = if x < w { x } else { 2 * w - 2 - x };
                let src = (sy * w + sx) * c;
                let dst = (y * nw + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok((out, (h, w)))
    }

    /// Serialize to the raw tensor format: magic "TNSR", u32 rank, u32 dims,
    /// then the values as little-endian f64 in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
            bytes
                .get(range)
                .ok_or_else(|| Error::Format("tensor file truncated".into()))
        };
        if take(0..4)? != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic, expected TNSR".into()));
        }
        let rank = u32::from_le_bytes(take(4..8)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut pos = 8;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(pos..pos + 4)?.try_into().unwrap());
            shape.push(d as usize);
            pos += 4;
        }
        let len: usize = shape.iter().product();
        let payload = take(pos..pos + 8 * len)?;
        if bytes.len() != pos + 8 * len {
            return Err(Error::Format(format!(
                "tensor file has {} trailing bytes",
                bytes.len() - pos - 8 * len
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::from_vec(&shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
