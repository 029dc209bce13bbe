//! Feature extraction: the stand-in for a trained embedding backbone.
//!
//! Built-in extractors are deterministic per-slice image filters. Embeddings
//! computed elsewhere enter through [`load_embeddings`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMap, FeatureVolume, Grid, VolumeImage};
use crate::error::{Error, Result};

pub use crate::io::{load_embeddings, save_embeddings};

/// Maps a volume to per-slice feature maps.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> String;

    /// `(H, W, Z)` of the feature maps produced for a `height x width` slice.
    fn output_dims(&self, height: usize, width: usize) -> (usize, usize, usize);

    fn extract(&self, volume: &VolumeImage) -> Result<FeatureVolume>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtractorKind {
    /// Intensity only, Z = 1.
    Raw,
    /// Intensity, one Gaussian blur per sigma, gradient magnitude. Z = radii + 2.
    Multiscale { radii: Vec<f64> },
    /// Local mean, std, min, max over a `patch x patch` window. Z = 4.
    Patchstat { patch: usize },
    /// Gaussian-smoothed intensity mapped to an angle, one full turn per
    /// `period`, emitted as `(cos, sin)`. Z = 2.
    Phase { period: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltinExtractorSpec {
    #[serde(flatten)]
    pub kind: ExtractorKind,
    /// Block-mean downsampling factor applied to every channel.
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

impl BuiltinExtractorSpec {
    pub fn raw() -> Self {
        BuiltinExtractorSpec { kind: ExtractorKind::Raw, downsample: 1 }
    }

    pub fn multiscale(radii: &[f64]) -> Self {
        BuiltinExtractorSpec {
            kind: ExtractorKind::Multiscale { radii: radii.to_vec() },
            downsample: 1,
        }
    }

    pub fn patchstat(patch: usize) -> Self {
        BuiltinExtractorSpec { kind: ExtractorKind::Patchstat { patch }, downsample: 1 }
    }

    pub fn phase(period: f64, sigma: f64) -> Self {
        BuiltinExtractorSpec { kind: ExtractorKind::Phase { period, sigma }, downsample: 1 }
    }

    pub fn with_downsample(mut self, factor: usize) -> Self {
        self.downsample = factor;
        self
    }

    pub fn channels(&self) -> usize {
        match &self.kind {
            ExtractorKind::Raw => 1,
            ExtractorKind::Multiscale { radii } => radii.len() + 2,
            ExtractorKind::Patchstat { .. } => 4,
            ExtractorKind::Phase { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
        }
        match &self.kind {
            ExtractorKind::Raw => Ok(()),
            ExtractorKind::Multiscale { radii } => {
                match radii.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
                    Some(r) => Err(Error::InvalidConfig(format!("blur sigma must be > 0, got {r}"))),
                    None => Ok(()),
                }
            }
            ExtractorKind::Patchstat { patch } if *patch == 0 || patch % 2 == 0 => Err(
                Error::InvalidConfig(format!("patch size must be odd and >= 1, got {patch}")),
            ),
            ExtractorKind::Patchstat { .. } => Ok(()),
            ExtractorKind::Phase { period, sigma } => {
                if !(period.is_finite() && *period > 0.0) {
                    Err(Error::InvalidConfig(format!("phase period must be > 0, got {period}")))
                } else if !(sigma.is_finite() && *sigma >= 0.0) {
                    Err(Error::InvalidConfig(format!("smoothing sigma must be >= 0, got {sigma}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn extract_slice(&self, slice: &Grid<f32>) -> Result<FeatureMap> {
        let (h, w) = slice.shape();
        let planes: Vec<Vec<f32>> = match &self.kind {
            ExtractorKind::Raw => vec![slice.as_slice().to_vec()],
            ExtractorKind::Multiscale { radii } => {
                let mut planes = Vec::with_capacity(radii.len() + 2);
                planes.push(slice.as_slice().to_vec());
                for &sigma in radii {
                    planes.push(gaussian_blur(slice, sigma)?);
                }
                planes.push(gradient_magnitude(slice));
                planes
            }
            ExtractorKind::Patchstat { patch } => patch_stats(slice, *patch)?.to_vec(),
            ExtractorKind::Phase { period, sigma } => {
                let smooth = if *sigma > 0.0 { gaussian_blur(slice, *sigma)? } else { slice.as_slice().to_vec() };
                phase_encode(&smooth, *period)
            }
        };
        let (oh, ow) = (h.div_ceil(self.downsample), w.div_ceil(self.downsample));
        let planes: Vec<Vec<f32>> = planes
            .iter()
            .map(|p| block_mean(p, h, w, self.downsample))
            .collect();
        FeatureMap::from_planes(oh, ow, &planes)
    }
}

impl FeatureExtractor for BuiltinExtractorSpec {
    fn name(&self) -> String {
        self.to_string()
    }

    fn output_dims(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let d = self.downsample.max(1);
        (height.div_ceil(d), width.div_ceil(d), self.channels())
    }

    fn extract(&self, volume: &VolumeImage) -> Result<FeatureVolume> {
        self.validate()?;
        let maps = volume
            .slices()
            .par_iter()
            .map(|s| self.extract_slice(s))
            .collect::<Result<Vec<_>>>()?;
        FeatureVolume::new(maps, volume.slice_shape())
    }
}

/// Builds a feature volume from a built-in extractor.
pub fn extract(spec: &BuiltinExtractorSpec, volume: &VolumeImage) -> Result<FeatureVolume> {
    spec.extract(volume)
}

impl fmt::Display for BuiltinExtractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExtractorKind::Raw => f.write_str("raw")?,
            ExtractorKind::Multiscale { radii } => {
                let r: Vec<String> = radii.iter().map(|r| r.to_string()).collect();
                write!(f, "multiscale:{}", r.join(","))?
            }
            ExtractorKind::Patchstat { patch } => write!(f, "patchstat:{patch}")?,
            ExtractorKind::Phase { period, sigma } => write!(f, "phase:{period},{sigma}")?,
        }
        if self.downsample != 1 {
            write!(f, "@{}", self.downsample)?;
        }
        Ok(())
    }
}

/// Parses `raw`, `multiscale[:r1,r2,..]`, `patchstat[:p]` or
/// `phase[:period[,sigma]]`, optionally
/// followed by `@d` for the downsample factor.
impl FromStr for BuiltinExtractorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let usage = || Error::Usage(format!("unknown extractor {s:?}"));
        let (body, downsample) = match s.split_once('@') {
            Some((b, d)) => (b, d.parse().map_err(|_| usage())?),
            None => (s, 1),
        };
        let (kind, args) = match body.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (body, None),
        };
        let kind = match (kind.to_ascii_lowercase().as_str(), args) {
            ("raw", None) => ExtractorKind::Raw,
            ("multiscale", None) => ExtractorKind::Multiscale { radii: vec![1.0, 2.0, 4.0] },
            ("multiscale", Some(a)) => ExtractorKind::Multiscale {
                radii: a
                    .split(',')
                    .map(|r| r.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| usage())?,
            },
            ("patchstat", None) => ExtractorKind::Patchstat { patch: 5 },
            ("patchstat", Some(a)) => ExtractorKind::Patchstat { patch: a.parse().map_err(|_| usage())? },
            ("phase", None) => ExtractorKind::Phase { period: 2.4, sigma: 0.0 },
            ("phase", Some(a)) => {
                let mut v = a.split(',').map(|r| r.trim().parse::<f64>());
                match (v.next(), v.next(), v.next()) {
                    (Some(Ok(period)), None, None) => ExtractorKind::Phase { period, sigma: 0.0 },
                    (Some(Ok(period)), Some(Ok(sigma)), None) => ExtractorKind::Phase { period, sigma },
                    _ => return Err(usage()),
                }
            }
            _ => return Err(usage()),
        };
        let spec = BuiltinExtractorSpec { kind, downsample };
        spec.validate()?;
        Ok(spec)
    }
}

/// `(cos, sin)` of each value's angle on a circle of circumference `period`.
fn phase_encode(values: &[f32], period: f64) -> Vec<Vec<f32>> {
    let angle = |v: f32| std::f64::consts::TAU * v as f64 / period;
    vec![
        values.iter().map(|&v| angle(v).cos() as f32).collect(),
        values.iter().map(|&v| angle(v).sin() as f32).collect(),
    ]
}

/// Mirror index for reflect borders (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    r as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur truncated at 3 sigma with reflect borders.
fn gaussian_blur(slice: &Grid<f32>, sigma: f64) -> Result<Vec<f32>> {
    let (h, w) = slice.shape();
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    if radius >= h || radius >= w {
        return Err(Error::KernelTooLarge { kernel: kernel.len(), height: h, width: w });
    }
    let src = slice.as_slice();
    let r = radius as isize;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * src[y * w + reflect(x as isize + k as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * rows[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    Ok(out)
}

/// Central-difference gradient magnitude with reflect borders.
fn gradient_magnitude(slice: &Grid<f32>) -> Vec<f32> {
    let (h, w) = slice.shape();
    let at = |y: isize, x: isize| *slice.get(reflect(y, h), reflect(x, w)) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            out.push(gx.hypot(gy) as f32);
        }
    }
    out
}

/// Mean, population std, min and max over the in-bounds part of a centred
/// `patch x patch` window.
fn patch_stats(slice: &Grid<f32>, patch: usize) -> Result<[Vec<f32>; 4]> {
    let (h, w) = slice.shape();
    if patch > h || patch > w {
        return Err(Error::KernelTooLarge { kernel: patch, height: h, width: w });
    }
    let r = patch / 2;
    let mut stats: [Vec<f32>; 4] = Default::default();
    for s in stats.iter_mut() {
        s.reserve(h * w);
    }
    for y in 0..h {
        for x in 0..w {
            let ys = y.saturating_sub(r)..=(y + r).min(h - 1);
            let xs = x.saturating_sub(r)..=(x + r).min(w - 1);
            let mut n = 0usize;
            let mut sum = 0.0f64;
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    let v = *slice.get(yy, xx);
                    n += 1;
                    sum += v as f64;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let mean = sum / n as f64;
            let mut ss = 0.0f64;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    let d = *slice.get(yy, xx) as f64 - mean;
                    ss += d * d;
                }
            }
            stats[0].push(mean as f32);
            stats[1].push((ss / n as f64).sqrt() as f32);
            stats[2].push(lo);
            stats[3].push(hi);
        }
    }
    Ok(stats)
}

/// Mean over `factor x factor` blocks; edge blocks average the pixels they hold.
fn block_mean(plane: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    if factor == 1 {
        return plane.to_vec();
    }
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for y in by * factor..((by + 1) * factor).min(h) {
                for x in bx * factor..((bx + 1) * factor).min(w) {
                    sum += plane[y * w + x] as f64;
                    n += 1;
                }
            }
            out.push((sum / n as f64) as f32);
        }
    }
    out
}
