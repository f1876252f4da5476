//! Boolean mask stacks: validation, run-length serialization, mask dropout,
//! and uncovered-region computation.
//!
//! Masks are stored as byte planes (0/1) in row-major order. Overlapping
//! masks are permitted and never deduplicated; an empty stack is legal and
//! means "everything uncovered".

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    height: usize,
    width: usize,
    planes: Vec<Vec<u8>>,
    labels: Vec<String>,
}

/// Outcome of [`MaskStack::validate`]: structural problems are reported, not
/// panicked on, so callers can surface them to users.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub issues: Vec<String>,
    /// Number of set pixels per plane (only meaningful for well-shaped planes).
    pub pixel_counts: Vec<usize>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl MaskStack {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            planes: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Append a plane without checking it; `validate` reports malformed input.
    pub fn push_plane(&mut self, plane: Vec<u8>, label: impl Into<String>) {
        self.planes.push(plane);
        self.labels.push(label.into());
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn plane(&self, i: usize) -> &[u8] {
        &self.planes[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let expected = self.height * self.width;
        for (i, plane) in self.planes.iter().enumerate() {
            if plane.len() != expected {
                report.issues.push(format!(
                    "mask {i}: {} entries, expected {expected}",
                    plane.len()
                ));
            }
            if let Some(&bad) = plane.iter().find(|&&v| v > 1) {
                report
                    .issues
                    .push(format!("mask {i}: non-binary value {bad}"));
            }
            report
                .pixel_counts
                .push(plane.iter().filter(|&&v| v != 0).count());
        }
        report
    }

    /// Randomly discard masks: one uniform draw per mask in stack order, the
    /// mask is retained iff the draw is >= p. Draws live in [0, 1), so p = 0
    /// keeps everything and p = 1 drops everything, exactly.
    pub fn mask_dropout(&self, p: f64, rng: &mut Rng) -> Result<MaskStack> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "dropout probability {p} outside [0, 1]"
            )));
        }
        let mut out = MaskStack::new(self.height, self.width);
        for i in 0..self.planes.len() {
            if rng.next_f64() >= p {
                out.push_plane(self.planes[i].clone(), self.labels[i].clone());
            }
        }
        Ok(out)
    }

    /// Append one extra plane covering every pixel no existing plane covers.
    /// Always appends, even when that plane is all zeros, so the output plane
    /// count is stable at N_m + 1.
    pub fn append_uncovered(&self) -> MaskStack {
        let n = self.height * self.width;
        let mut uncovered = vec![1u8; n];
        for plane in &self.planes {
            for (u, &v) in uncovered.iter_mut().zip(plane.iter()) {
                if v != 0 {
                    *u = 0;
                }
            }
        }
        let mut out = self.clone();
        out.push_plane(uncovered, "uncovered");
        out
    }

    /// Per-pixel count of planes covering each pixel.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let n = self.height * self.width;
        let mut counts = vec![0u32; n];
        for plane in &self.planes {
            for (c, &v) in counts.iter_mut().zip(plane.iter()) {
                *c += (v != 0) as u32;
            }
        }
        counts
    }

    /// True iff the planes are pairwise disjoint and cover every pixel.
    pub fn is_partition(&self) -> bool {
        self.coverage_counts().iter().all(|&c| c == 1)
    }

    /// Crop every plane to `[y0..y0+ph, x0..x0+pw]`.
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<MaskStack> {
        if y0 + ph > self.height || x0 + pw > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {ph}x{pw}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = MaskStack::new(ph, pw);
        for (plane, label) in self.planes.iter().zip(&self.labels) {
            let mut cropped = Vec::with_capacity(ph * pw);
            for y in y0..y0 + ph {
                let row = y * self.width + x0;
                cropped.extend_from_slice(&plane[row..row + pw]);
            }
            out.push_plane(cropped, label.clone());
        }
        Ok(out)
    }

    /// Apply the same dihedral transform as [`crate::tensor::Tensor::dihedral`]
    /// so masks stay aligned with augmented images.
    pub fn dihedral(&self, quarter_turns: u8, hflip: bool) -> MaskStack {
        let (h, w) = (self.height, self.width);
        let k = quarter_turns % 4;
        let (nh, nw) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut out = MaskStack::new(nh, nw);
        for (plane, label) in self.planes.iter().zip(&self.labels) {
            let mut moved = vec![0u8; nh * nw];
            for y in 0..h {
                for x in 0..w {
                    let (ry, mut rx) = match k {
                        0 => (y, x),
                        1 => (w - 1 - x, y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (x, h - 1 - y),
                    };
                    if hflip {
                        rx = nw - 1 - rx;
                    }
                    moved[ry * nw + rx] = plane[y * w + x];
                }
            }
            out.push_plane(moved, label.clone());
        }
        out
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = MaskFile {
            height: self.height,
            width: self.width,
            masks: self
                .planes
                .iter()
                .zip(&self.labels)
                .map(|(plane, label)| MaskFileEntry {
                    label: label.clone(),
                    rle: encode_rle(plane),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<MaskStack> {
        let file: MaskFile = serde_json::from_str(text)?;
        let mut out = MaskStack::new(file.height, file.width);
        for entry in file.masks {
            let plane = decode_rle(&entry.rle, file.height, file.width)?;
            out.push_plane(plane, entry.label);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MaskStack> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// Mask interchange document: masks arrive from external segmentation as
/// run-length counts over the row-major plane.
#[derive(Serialize, Deserialize)]
struct MaskFile {
    height: usize,
    width: usize,
    masks: Vec<MaskFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct MaskFileEntry {
    label: String,
    rle: Vec<u32>,
}

/// Run-length encode a row-major plane: alternating run counts starting with
/// the count of zeros, so the first count is 0 when the plane starts with a 1.
/// Note this is row-major and zeros-first, unlike COCO's column-major RLE.
pub fn encode_rle(plane: &[u8]) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &v in plane {
        let bit = (v != 0) as u8;
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode_rle(counts: &[u32], height: usize, width: usize) -> Result<Vec<u8>> {
    let total: usize = counts.iter().map(|&c| c as usize).sum();
    if total != height * width {
        return Err(Error::Format(format!(
            "run-length counts sum to {total}, expected {}",
            height * width
        )));
    }
    let mut plane = Vec::with_capacity(total);
    let mut bit = 0u8;
    for &c in counts {
        plane.resize(plane.len() + c as usize, bit);
        bit ^= 1;
    }
    Ok(plane)
}
