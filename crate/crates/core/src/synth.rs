//! Deterministic synthesis of non-uniform-blur samples: textured sharp
//! images, Voronoi region partitions, per-region blur kernels, and the
//! formation model `blurred = kernel (*) sharp + noise` applied regionwise
//! with true convolution and reflect-101 border handling.
//!
//! Every sample is a pure function of (spec, seed); the RNG draw order is
//! fixed and documented per operation, so regenerating from a recorded seed
//! reproduces files bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskStack;
use crate::ppm;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Blur kernel descriptor; the manifest stores these verbatim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Identity { size: usize },
    Gaussian { size: usize, sigma: f64 },
    Motion { size: usize, angle: f64, length: f64 },
}

impl KernelSpec {
    pub fn size(&self) -> usize {
        match *self {
            KernelSpec::Identity { size }
            | KernelSpec::Gaussian { size, .. }
            | KernelSpec::Motion { size, .. } => size,
        }
    }
}

/// Realized kernel: non-negative size x size weights summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    pub spec: KernelSpec,
    pub size: usize,
    pub weights: Vec<f64>,
}

/// Discretize a kernel spec into normalized weights.
pub fn make_kernel(spec: &KernelSpec) -> Result<BlurKernel> {
    let size = spec.size();
    if size % 2 == 0 || size == 0 {
        return Err(Error::InvalidParameter(format!(
            "kernel size must be odd, got {size}"
        )));
    }
    let center = (size / 2) as f64;
    let mut weights = vec![0.0f64; size * size];
    match *spec {
        KernelSpec::Identity { .. } => {
            weights[(size / 2) * size + size / 2] = 1.0;
        }
        KernelSpec::Gaussian { sigma, .. } => {
            if sigma <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "gaussian sigma must be positive, got {sigma}"
                )));
            }
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f64 - center;
                    let dx = x as f64 - center;
                    weights[y * size + x] =
                        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        KernelSpec::Motion { angle, length, .. } => {
            if length <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "motion length must be positive, got {length}"
                )));
            }
            // rasterize a centered line segment with bilinear splatting
            let half = (length - 1.0).max(0.0) / 2.0;
            let n = ((length * 8.0).ceil() as usize).max(1);
            let (dy, dx) = (angle.sin(), angle.cos());
            for i in 0..n {
                let t = if n == 1 {
                    0.0
                } else {
                    -half + 2.0 * half * i as f64 / (n - 1) as f64
                };
                let py = center + t * dy;
                let px = center + t * dx;
                let y0 = py.floor();
                let x0 = px.floor();
                let (fy, fx) = (py - y0, px - x0);
                for (oy, ox, w) in [
                    (0, 0, (1.0 - fy) * (1.0 - fx)),
                    (0, 1, (1.0 - fy) * fx),
                    (1, 0, fy * (1.0 - fx)),
                    (1, 1, fy * fx),
                ] {
                    let yy = y0 as isize + oy;
                    let xx = x0 as isize + ox;
                    if yy >= 0 && yy < size as isize && xx >= 0 && xx < size as isize {
                        weights[yy as usize * size + xx as usize] += w / n as f64;
                    }
                }
            }
        }
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidParameter(
            "kernel weights sum to zero after rasterization".into(),
        ));
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(BlurKernel {
        spec: *spec,
        size,
        weights,
    })
}

/// Voronoi partition from k distinct seeded sites: each pixel joins its
/// nearest site by squared Euclidean distance, ties to the lowest site
/// index. Draw order: site coordinates as (row, col) pairs, resampling on
/// collision. Labels record the sites as "site y x".
pub fn gen_regions(height: usize, width: usize, k: usize, rng: &mut Rng) -> Result<MaskStack> {
    if k < 1 || k > height * width {
        return Err(Error::InvalidParameter(format!(
            "region count {k} outside 1..={}",
            height * width
        )));
    }
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(k);
    while sites.len() < k {
        let y = rng.next_below(height as u64) as usize;
        let x = rng.next_below(width as u64) as usize;
        if !sites.contains(&(y, x)) {
            sites.push((y, x));
        }
    }
    let mut assign = vec![0usize; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut best = usize::MAX;
            let mut best_d = u64::MAX;
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let dy = y.abs_diff(sy) as u64;
                let dx = x.abs_diff(sx) as u64;
                let d = dy * dy + dx * dx;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assign[y * width + x] = best;
        }
    }
    let mut stack = MaskStack::new(height, width);
    for (i, &(sy, sx)) in sites.iter().enumerate() {
        stack.push_plane(
            assign.iter().map(|&a| (a == i) as u8).collect(),
            format!("site {sy} {sx}"),
        );
    }
    Ok(stack)
}

/// Seeded sharp image: per-channel linear gradients, overwritten random
/// rectangles for hard edges, and a fine checkerboard so high-frequency
/// content survives into the Laplacian (see [`mean_abs_laplacian`]). Values
/// clamp to [0,1]. Draw order: 3 x (base, gx, gy), then per rectangle
/// (y, x, h, w, r, g, b), then nothing for the checker.
pub fn gen_texture(
    height: usize,
    width: usize,
    rects: usize,
    checker_amp: f64,
    rng: &mut Rng,
) -> Tensor<f64> {
    let mut img = Tensor::zeros(&[height, width, 3]);
    for c in 0..3 {
        let base = rng.next_range(0.25, 0.75);
        let gx = rng.next_range(-0.4, 0.4);
        let gy = rng.next_range(-0.4, 0.4);
        for y in 0..height {
            for x in 0..width {
                let v = base
                    + gx * (x as f64 / width.max(2) as f64)
                    + gy * (y as f64 / height.max(2) as f64);
                img.set3(y, x, c, v);
            }
        }
    }
    for _ in 0..rects {
        let y0 = rng.next_below(height as u64) as usize;
        let x0 = rng.next_below(width as u64) as usize;
        let rh = 1 + rng.next_below((height / 2).max(1) as u64) as usize;
        let rw = 1 + rng.next_below((width / 2).max(1) as u64) as usize;
        let color = [
            rng.next_range(0.05, 0.95),
            rng.next_range(0.05, 0.95),
            rng.next_range(0.05, 0.95),
        ];
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                for c in 0..3 {
                    img.set3(y, x, c, color[c]);
                }
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                img.set3(y, x, c, img.at3(y, x, c) + sign * checker_amp);
            }
        }
    }
    img.clamp(0.0, 1.0)
}

/// Mean absolute 4-neighbor Laplacian over interior pixels and channels; the
/// texture generator's high-frequency floor is asserted against this.
pub fn mean_abs_laplacian(img: &Tensor<f64>) -> Result<f64> {
    let (h, w, c) = img.hwc()?;
    if h < 3 || w < 3 {
        return Err(Error::Contract("laplacian needs at least 3x3".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let lap = 4.0 * img.at3(y, x, ch)
                    - img.at3(y - 1, x, ch)
                    - img.at3(y + 1, x, ch)
                    - img.at3(y, x - 1, ch)
                    - img.at3(y, x + 1, ch);
                acc += lap.abs();
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Reflect an out-of-range coordinate back into [0, n) without repeating the
/// edge sample (reflect-101), e.g. -2 -> 2 and n -> n-2.
fn reflect(mut q: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if q < 0 {
            q = -q;
        } else if q >= n {
            q = 2 * n - 2 - q;
        } else {
            return q as usize;
        }
    }
}

/// Apply the formation model: for each pixel, convolve the sharp image with
/// its region's kernel (true convolution — the kernel is flipped relative to
/// cross-correlation), reflect-101 at borders, then add seeded Gaussian noise
/// and clamp to [0,1]. With `noise_sigma == 0` no RNG draws happen and no
/// noise term is added, so identity kernels reproduce the input bit-exactly.
/// Draw order: one Gaussian per pixel per channel, row-major, channel-minor.
pub fn apply_regional_blur(
    sharp: &Tensor<f64>,
    masks: &MaskStack,
    kernels: &[BlurKernel],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Tensor<f64>> {
    let (h, w, c) = sharp.hwc()?;
    if masks.len() != kernels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} masks but {} kernels",
            masks.len(),
            kernels.len()
        )));
    }
    if (masks.height(), masks.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} vs image {h}x{w}",
            masks.height(),
            masks.width()
        )));
    }
    if !masks.is_partition() {
        return Err(Error::Contract(
            "regional blur requires masks that partition the image".into(),
        ));
    }
    let mut region_of = vec![0usize; h * w];
    for i in (0..masks.len()).rev() {
        for (p, &v) in masks.plane(i).iter().enumerate() {
            if v != 0 {
                region_of[p] = i;
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let kern = &kernels[region_of[y * w + x]];
            let half = (kern.size / 2) as isize;
            let mut acc = vec![0.0f64; c];
            for ky in 0..kern.size {
                for kx in 0..kern.size {
                    let wgt = kern.weights[ky * kern.size + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    // true convolution: source offset is the negated kernel offset
                    let sy = reflect(y as isize - (ky as isize - half), h);
                    let sx = reflect(x as isize - (kx as isize - half), w);
                    for (a, ch) in acc.iter_mut().zip(0..c) {
                        *a += wgt * sharp.at3(sy, sx, ch);
                    }
                }
            }
            for (ch, &a) in acc.iter().enumerate() {
                out.set3(y, x, ch, a);
            }
        }
    }
    if noise_sigma > 0.0 {
        for v in out.data_mut().iter_mut() {
            *v += noise_sigma * rng.next_gaussian();
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// Morphological mask corruption standing in for imperfect external masks:
/// with probability `strength` per mask, dilate or erode by one pixel
/// (4-neighborhood). Draw order per mask: one uniform gate, then one choice
/// draw when the gate fires. Corrupted stacks may overlap or leave pixels
/// uncovered; downstream pooling handles both.
pub fn corrupt_masks(stack: &MaskStack, strength: f64, rng: &mut Rng) -> Result<MaskStack> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidParameter(format!(
            "corruption strength {strength} outside [0, 1]"
        )));
    }
    let (h, w) = (stack.height(), stack.width());
    let mut out = MaskStack::new(h, w);
    for i in 0..stack.len() {
        let plane = stack.plane(i);
        let corrupted = if rng.next_f64() < strength {
            let dilate = rng.next_below(2) == 0;
            let mut np = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    let neighbors = [
                        (y > 0).then(|| plane[(y - 1) * w + x]).unwrap_or(0),
                        (y + 1 < h).then(|| plane[(y + 1) * w + x]).unwrap_or(0),
                        (x > 0).then(|| plane[y * w + x - 1]).unwrap_or(0),
                        (x + 1 < w).then(|| plane[y * w + x + 1]).unwrap_or(0),
                    ];
                    let me = plane[y * w + x];
                    np[y * w + x] = if dilate {
                        (me != 0 || neighbors.iter().any(|&v| v != 0)) as u8
                    } else {
                        (me != 0 && neighbors.iter().all(|&v| v != 0)) as u8
                    };
                }
            }
            np
        } else {
            plane.to_vec()
        };
        out.push_plane(corrupted, stack.label(i));
    }
    Ok(out)
}

/// Generation recipe; `train_default`/`ood_default` differ in region count,
/// kernel strength, and texture mix so the OOD split is a real shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of Voronoi region counts.
    pub regions: (usize, usize),
    pub kernel_size: usize,
    /// Inclusive sigma range for gaussian kernels.
    pub gaussian_sigma: (f64, f64),
    /// Inclusive length range for motion kernels.
    pub motion_length: (f64, f64),
    pub noise_sigma: f64,
    pub texture_rects: usize,
    pub checker_amp: f64,
    /// Probability that each stored mask is morphologically corrupted; the
    /// formation model always uses the true partition.
    pub mask_corruption: f64,
}

impl DatasetSpec {
    pub fn train_default() -> Self {
        Self {
            height: 64,
            width: 64,
            regions: (2, 5),
            kernel_size: 9,
            gaussian_sigma: (0.25, 1.2),
            motion_length: (1.0, 4.0),
            noise_sigma: 0.09,
            texture_rects: 5,
            checker_amp: 0.01,
            mask_corruption: 0.0,
        }
    }

    /// Distribution shift: more regions, stronger kernels, busier texture.
    pub fn ood_default() -> Self {
        Self {
            height: 64,
            width: 64,
            regions: (4, 6),
            kernel_size: 13,
            gaussian_sigma: (0.35, 1.4),
            motion_length: (1.2, 4.5),
            noise_sigma: 0.09,
            texture_rects: 7,
            checker_amp: 0.011,
            mask_corruption: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::InvalidParameter("image extent below 3".into()));
        }
        if self.regions.0 < 1 || self.regions.0 > self.regions.1 {
            return Err(Error::InvalidParameter(format!(
                "bad region range {:?}",
                self.regions
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParameter("kernel size must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_corruption) {
            return Err(Error::InvalidParameter(
                "mask corruption outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One generated record. `masks` is what the pipeline consumes (possibly
/// corrupted); `true_masks` is the partition the formation model used.
#[derive(Clone, Debug)]
pub struct SegmentedSample {
    pub sharp: Tensor<f64>,
    pub blurred: Tensor<f64>,
    pub masks: MaskStack,
    pub true_masks: MaskStack,
    pub kernels: Vec<KernelSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Deterministically realize one sample from (spec, seed). Draw order:
/// texture, region count, region sites, per-region kernel (kind gate, then
/// parameters), formation noise, then mask corruption.
pub fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<SegmentedSample> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let sharp = gen_texture(
        spec.height,
        spec.width,
        spec.texture_rects,
        spec.checker_amp,
        &mut rng,
    );
    let span = (spec.regions.1 - spec.regions.0 + 1) as u64;
    let k = spec.regions.0 + rng.next_below(span) as usize;
    let true_masks = gen_regions(spec.height, spec.width, k, &mut rng)?;
    let mut kernel_specs = Vec::with_capacity(k);
    for _ in 0..k {
        let spec_k = if rng.next_below(2) == 0 {
            KernelSpec::Gaussian {
                size: spec.kernel_size,
                sigma: rng.next_range(spec.gaussian_sigma.0, spec.gaussian_sigma.1),
            }
        } else {
            KernelSpec::Motion {
                size: spec.kernel_size,
                angle: rng.next_range(0.0, std::f64::consts::PI),
                length: rng.next_range(spec.motion_length.0, spec.motion_length.1),
            }
        };
        kernel_specs.push(spec_k);
    }
    let kernels = kernel_specs
        .iter()
        .map(make_kernel)
        .collect::<Result<Vec<_>>>()?;
    let blurred = apply_regional_blur(&sharp, &true_masks, &kernels, spec.noise_sigma, &mut rng)?;
    let masks = if spec.mask_corruption > 0.0 {
        corrupt_masks(&true_masks, spec.mask_corruption, &mut rng)?
    } else {
        true_masks.clone()
    };
    Ok(SegmentedSample {
        sharp,
        blurred,
        masks,
        true_masks,
        kernels: kernel_specs,
        noise_sigma: spec.noise_sigma,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    /// Lossless float tensors (training/eval inputs).
    pub sharp: String,
    pub blur: String,
    /// 8-bit previews of the same images.
    pub sharp_ppm: String,
    pub blur_ppm: String,
    /// Mask file the pipeline consumes (corrupted when the spec says so).
    pub masks: String,
    /// The partition the formation model used.
    pub true_masks: String,
    pub noise_sigma: f64,
    pub kernels: Vec<KernelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub spec: DatasetSpec,
    pub samples: Vec<SampleEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generate `count` samples into `dir` and write the manifest. Per-sample
/// seeds derive from the master seed by index, so samples are independent of
/// `count` and stable under regeneration.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    spec: &DatasetSpec,
    seed: u64,
) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let sample_seed = derive_seed(seed, index as u64);
        let sample = generate_sample(spec, sample_seed)?;
        let id = format!("{index:03}");
        let entry = SampleEntry {
            id: id.clone(),
            seed: sample_seed,
            sharp: format!("{id}_sharp.tnsr"),
            blur: format!("{id}_blur.tnsr"),
            sharp_ppm: format!("{id}_sharp.ppm"),
            blur_ppm: format!("{id}_blur.ppm"),
            masks: format!("{id}_masks.json"),
            true_masks: if spec.mask_corruption > 0.0 {
                format!("{id}_true_masks.json")
            } else {
                format!("{id}_masks.json")
            },
            noise_sigma: sample.noise_sigma,
            kernels: sample.kernels.clone(),
        };
        sample.sharp.save(&dir.join(&entry.sharp))?;
        sample.blurred.save(&dir.join(&entry.blur))?;
        ppm::save_ppm(&sample.sharp, &dir.join(&entry.sharp_ppm))?;
        ppm::save_ppm(&sample.blurred, &dir.join(&entry.blur_ppm))?;
        sample.masks.save(&dir.join(&entry.masks))?;
        if entry.true_masks != entry.masks {
            sample.true_masks.save(&dir.join(&entry.true_masks))?;
        }
        samples.push(entry);
    }
    let manifest = Manifest {
        seed,
        count,
        spec: spec.clone(),
        samples,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Load one sample's tensors and masks back from disk.
pub struct LoadedSample {
    pub id: String,
    pub sharp: Tensor<f64>,
    pub blurred: Tensor<f64>,
    pub masks: MaskStack,
}

pub fn load_sample(dir: &Path, entry: &SampleEntry) -> Result<LoadedSample> {
    Ok(LoadedSample {
        id: entry.id.clone(),
        sharp: Tensor::load(&dir.join(&entry.sharp))?,
        blurred: Tensor::load(&dir.join(&entry.blur))?,
        masks: MaskStack::load(&dir.join(&entry.masks))?,
    })
}
