//! Deterministic synthetic "organ" volumes with exact ground truth.
//!
//! Organs are axis-aligned ellipsoids. Voxel intensities combine the class
//! mean, a per-scan offset, a linear drift along the slice axis, a smooth
//! texture field and Gaussian noise. All randomness is counter based: every
//! draw is a hash of the seed, a stream id and the voxel index, so
//! generation order never changes the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassSet, Episode, Grid, LabelMask, SupportSlice, VolumeImage};
use crate::error::{Error, Result};
use crate::features::BuiltinExtractorSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f64,
    /// Per-voxel Gaussian spread specific to this tissue.
    #[serde(default)]
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class: ClassId,
    /// Centre in voxel units, `[slice, row, column]`.
    pub center: [f64; 3],
    /// Semi-axes in voxel units, same order as `center`.
    pub axes: [f64; 3],
    pub intensity: Intensity,
    /// Intensity change from the first to the last slice of the volume.
    #[serde(default)]
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[S, H, W]`.
    pub dims: [usize; 3],
    pub organs: Vec<OrganSpec>,
    pub background: Intensity,
    /// Additive Gaussian noise sigma applied to every voxel.
    #[serde(default)]
    pub noise: f64,
    /// Amplitude of the smooth low-frequency modulation.
    #[serde(default)]
    pub texture_scale: f64,
    /// Std of the per-scan, per-class intensity offset (inter-scan variation).
    #[serde(default)]
    pub scan_jitter: f64,
    /// Std of a per-scan offset shared by all tissues.
    #[serde(default)]
    pub scan_offset: f64,
    /// Std of a per-scan drift along the slice axis shared by all tissues.
    #[serde(default)]
    pub scan_drift: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PhantomSpec(m));
        if self.dims.contains(&0) {
            return bad(format!("dims must be >= 1, got {:?}", self.dims));
        }
        for (name, v) in [("noise", self.noise), ("texture_scale", self.texture_scale), ("scan_jitter", self.scan_jitter), ("scan_offset", self.scan_offset), ("scan_drift", self.scan_drift)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.background.std >= 0.0 && self.background.mean.is_finite()) {
            return bad("background intensity must be finite with std >= 0".into());
        }
        let mut seen = Vec::new();
        for o in &self.organs {
            if o.class.is_background() {
                return bad("organ class ids must be >= 1".into());
            }
            if seen.contains(&o.class) {
                return bad(format!("duplicate organ class {}", o.class));
            }
            seen.push(o.class);
            if !(o.intensity.std >= 0.0 && o.intensity.mean.is_finite() && o.drift.is_finite()) {
                return bad(format!("organ {} intensity must be finite with std >= 0", o.class));
            }
            for axis in 0..3 {
                let (c, a, n) = (o.center[axis], o.axes[axis], self.dims[axis] as f64);
                if !(a > 0.0 && c.is_finite()) {
                    return bad(format!("organ {} has a non-positive semi-axis", o.class));
                }
                if c - a < -0.5 || c + a > n - 0.5 {
                    return bad(format!(
                        "organ {} ellipsoid leaves the volume along axis {axis} ({} .. {} outside 0 .. {})",
                        o.class,
                        c - a,
                        c + a,
                        n - 1.0
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        std::iter::once(ClassId::BACKGROUND).chain(self.organs.iter().map(|o| o.class)).collect()
    }

    pub fn with_seed(&self, seed: u64) -> PhantomSpec {
        PhantomSpec { seed, ..self.clone() }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stateless random source: each value is a pure function of (seed, stream, index).
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn bits(&self, stream: u64, index: u64) -> u64 {
        splitmix64(splitmix64(self.seed ^ splitmix64(stream)) ^ index)
    }

    /// Uniform in (0, 1).
    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        ((self.bits(stream, index) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&self, stream: u64, index: u64) -> f64 {
        let u1 = self.uniform(stream, 2 * index);
        let u2 = self.uniform(stream, 2 * index + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

const STREAM_NOISE: u64 = 1;
const STREAM_TISSUE: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_TEXTURE: u64 = 4;
const STREAM_LAYOUT: u64 = 5;
const STREAM_SUITE: u64 = 6;
const STREAM_DRIFT: u64 = 7;

fn inside(o: &OrganSpec, z: usize, y: usize, x: usize) -> bool {
    let d = |i: usize, v: usize| (v as f64 - o.center[i]) / o.axes[i];
    let (a, b, c) = (d(0, z), d(1, y), d(2, x));
    a * a + b * b + c * c <= 1.0
}

/// Label of one voxel: the first listed organ containing it, else background.
pub fn voxel_label(spec: &PhantomSpec, z: usize, y: usize, x: usize) -> ClassId {
    spec.organs
        .iter()
        .find(|o| inside(o, z, y, x))
        .map_or(ClassId::BACKGROUND, |o| o.class)
}

struct Texture {
    waves: Vec<([f64; 3], f64)>,
}

impl Texture {
    fn new(rng: &CounterRng, dims: [usize; 3]) -> Self {
        let waves = (0..3u64)
            .map(|k| {
                // wavelengths between a quarter and the full in-plane extent
                let freq = |axis: usize, j: u64| {
                    let cycles = 1.0 + 3.0 * rng.uniform(STREAM_TEXTURE, 8 * k + j);
                    let sign = if rng.uniform(STREAM_TEXTURE, 8 * k + j + 3) < 0.5 { -1.0 } else { 1.0 };
                    sign * cycles / dims[axis].max(1) as f64
                };
                let f = [0.25 * freq(0, 0), freq(1, 1), freq(2, 2)];
                let phase = std::f64::consts::TAU * rng.uniform(STREAM_TEXTURE, 8 * k + 7);
                (f, phase)
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        let p = [z as f64, y as f64, x as f64];
        let s: f64 = self
            .waves
            .iter()
            .map(|(f, phase)| (std::f64::consts::TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase).sin())
            .sum();
        s / self.waves.len() as f64
    }
}

/// Generates the volume and its exact label mask.
pub fn generate(spec: &PhantomSpec) -> Result<(VolumeImage, LabelMask)> {
    spec.validate()?;
    let [s, h, w] = spec.dims;
    let rng = CounterRng::new(spec.seed);
    let texture = Texture::new(&rng, spec.dims);
    let jitter = |class: ClassId| spec.scan_jitter * rng.normal(STREAM_JITTER, class.0 as u64);
    let offset = spec.scan_offset * rng.normal(STREAM_DRIFT, 0);
    let slope = spec.scan_drift * rng.normal(STREAM_DRIFT, 1);
    let tissue: Vec<(f64, f64, f64)> =
        std::iter::once((spec.background.mean + jitter(ClassId::BACKGROUND), spec.background.std, 0.0))
            .chain(spec.organs.iter().map(|o| (o.intensity.mean + jitter(o.class), o.intensity.std, o.drift)))
            .map(|(mean, std, drift)| (mean + offset, std, drift + slope))
            .collect();
    let depth_pos = |z: usize| if s > 1 { z as f64 / (s - 1) as f64 - 0.5 } else { 0.0 };

    let slices: Vec<(Grid<f32>, Grid<ClassId>)> = (0..s)
        .into_par_iter()
        .map(|z| {
            let labels = Grid::from_fn(h, w, |y, x| voxel_label(spec, z, y, x));
            let image = Grid::from_fn(h, w, |y, x| {
                let label = *labels.get(y, x);
                let t = if label.is_background() {
                    0
                } else {
                    1 + spec.organs.iter().position(|o| o.class == label).unwrap()
                };
                let (mean, std, drift) = tissue[t];
                let idx = ((z * h + y) * w + x) as u64;
                let v = mean
                    + drift * depth_pos(z)
                    + spec.texture_scale * texture.at(z, y, x)
                    + std * rng.normal(STREAM_TISSUE, idx)
                    + spec.noise * rng.normal(STREAM_NOISE, idx);
                v as f32
            });
            (image, labels)
        })
        .collect();
    let (images, masks): (Vec<_>, Vec<_>) = slices.into_iter().unzip();
    Ok((VolumeImage::new(images)?, LabelMask::new(masks)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SupportSelection {
    /// K slices spread evenly over the foreground slice range, ends included.
    #[default]
    EvenlySpaced,
    /// K consecutive slices around the middle of the foreground range.
    CenterBlock,
}

/// Picks `k` of the `candidates` (sorted slice indices).
pub fn select_support_slices(candidates: &[usize], k: usize, selection: SupportSelection) -> Result<Vec<usize>> {
    let n = candidates.len();
    if k == 0 || n < k {
        return Err(Error::PhantomSpec(format!("need {k} annotated slices, found {n}")));
    }
    let picks: Vec<usize> = match selection {
        SupportSelection::EvenlySpaced if k == 1 => vec![(n - 1) / 2],
        SupportSelection::EvenlySpaced => (0..k).map(|j| (j * (n - 1) + (k - 1) / 2) / (k - 1)).collect(),
        SupportSelection::CenterBlock => {
            let start = ((n - 1) / 2).saturating_sub((k - 1) / 2).min(n - k);
            (start..start + k).collect()
        }
    };
    Ok(picks.into_iter().map(|i| candidates[i]).collect())
}

/// Builds an episode from an annotated support volume and a query volume.
///
/// The class set is background plus every class annotated in the chosen
/// support slices.
pub fn episode_from_volumes(
    support_image: &VolumeImage,
    support_mask: &LabelMask,
    query: VolumeImage,
    k: usize,
    selection: SupportSelection,
) -> Result<Episode> {
    if !support_mask.is_congruent_with(support_image) {
        return Err(Error::shape(format!(
            "support mask {:?} does not match support volume {:?}",
            support_mask.dims(),
            support_image.dims()
        )));
    }
    let picks = select_support_slices(&support_mask.foreground_slices(), k, selection)?;
    let support: Vec<SupportSlice> = picks
        .iter()
        .map(|&i| SupportSlice {
            image: support_image.slice(i).clone(),
            mask: support_mask.slice(i).clone(),
            source_index: i,
        })
        .collect();
    let mut classes = vec![ClassId::BACKGROUND];
    for s in &support {
        for &c in s.mask.as_slice() {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    Episode::new(support, query, ClassSet::new(classes)?)
}

/// An episode plus everything the evaluator (but not the pipeline) may see.
#[derive(Clone, Debug)]
pub struct LabeledEpisode {
    pub id: String,
    pub episode: Episode,
    /// Query ground truth.
    pub truth: LabelMask,
    pub support_image: VolumeImage,
    pub support_mask: LabelMask,
}

impl LabeledEpisode {
    /// Pairs volumes loaded from disk into an evaluable episode. The query
    /// foreground range (used only by chunked support pairing) comes from
    /// the ground truth, as in the standard evaluation protocol.
    pub fn from_volumes(
        id: impl Into<String>,
        support_image: VolumeImage,
        support_mask: LabelMask,
        query: VolumeImage,
        truth: LabelMask,
        k: usize,
        selection: SupportSelection,
    ) -> Result<Self> {
        if !truth.is_congruent_with(&query) {
            return Err(Error::shape(format!(
                "query mask {:?} does not match query volume {:?}",
                truth.dims(),
                query.dims()
            )));
        }
        let fg = truth.foreground_slices();
        let range = fg.first().zip(fg.last()).map(|(&a, &b)| (a, b));
        let episode =
            episode_from_volumes(&support_image, &support_mask, query, k, selection)?.with_query_range(range)?;
        Ok(LabeledEpisode { id: id.into(), episode, truth, support_image, support_mask })
    }
}

/// Seed of the query scan paired with a support scan generated from `seed`.
pub fn query_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x7175_6572_795f_7363)
}

/// Support scan from `spec`, query scan from the same layout with
/// [`query_seed`]; K support slices chosen by `selection`.
pub fn make_episode(spec: &PhantomSpec, k: usize, selection: SupportSelection) -> Result<LabeledEpisode> {
    let (support_image, support_mask) = generate(spec)?;
    let (query, truth) = generate(&spec.with_seed(query_seed(spec.seed)))?;
    LabeledEpisode::from_volumes(format!("{:016x}", spec.seed), support_image, support_mask, query, truth, k, selection)
}

/// Base layout of the default suite: four abdominal-like organs in a
/// 32 x 64 x 64 volume, all crossing the central slices. Organ intensities
/// are evenly spaced in [0.6, 1.5] with background at 0, so the default
/// [`crate::features::ExtractorKind::Phase`] extractor places background
/// opposite the organs.
pub fn default_spec(seed: u64) -> PhantomSpec {
    let organ = |class: u8, center: [f64; 3], axes: [f64; 3], mean: f64, drift: f64| OrganSpec {
        class: ClassId(class),
        center,
        axes,
        intensity: Intensity { mean, std: 0.02 },
        drift,
    };
    PhantomSpec {
        dims: [32, 64, 64],
        organs: vec![
            organ(1, [13.0, 46.0, 18.0], [8.0, 7.0, 6.0], 1.5, 0.1),
            organ(2, [15.0, 46.0, 46.0], [8.0, 7.0, 6.0], 1.2, -0.1),
            organ(3, [18.0, 20.0, 49.0], [8.0, 9.0, 8.0], 0.6, 0.1),
            organ(4, [18.0, 22.0, 20.0], [11.0, 13.0, 13.0], 0.9, -0.1),
        ],
        background: Intensity { mean: 0.0, std: 0.02 },
        noise: 0.05,
        texture_scale: 0.05,
        scan_jitter: 0.06,
        scan_offset: 0.05,
        scan_drift: 0.2,
        seed,
    }
}

/// Extractor matched to the intensity layout of [`default_spec`].
pub fn default_extractor() -> BuiltinExtractorSpec {
    BuiltinExtractorSpec::phase(2.4, 0.0)
}

/// Default suite: `n` episodes, each with its own jittered organ layout.
pub fn default_suite_specs(n: usize, seed: u64) -> Vec<PhantomSpec> {
    (0..n as u64)
        .map(|e| {
            let episode_seed = CounterRng::new(seed).bits(STREAM_SUITE, e);
            let rng = CounterRng::new(episode_seed);
            let mut spec = default_spec(episode_seed);
            for (o, organ) in spec.organs.iter_mut().enumerate() {
                for axis in 0..3 {
                    let shift = 2.0 * (rng.uniform(STREAM_LAYOUT, (o * 3 + axis) as u64) - 0.5);
                    organ.center[axis] += shift;
                }
            }
            spec
        })
        .collect()
}

pub fn default_suite(n: usize, seed: u64, k: usize) -> Result<Vec<LabeledEpisode>> {
    default_suite_specs(n, seed)
        .iter()
        .map(|s| make_episode(s, k, SupportSelection::EvenlySpaced))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [9, 12, 14],
            organs: vec![
                OrganSpec {
                    class: ClassId(1),
                    center: [4.0, 5.0, 5.0],
                    axes: [4.0, 3.0, 3.5],
                    intensity: Intensity { mean: 1.0, std: 0.0 },
                    drift: 0.0,
                },
                OrganSpec {
                    class: ClassId(2),
                    center: [4.0, 6.0, 9.0],
                    axes: [3.0, 4.0, 3.0],
                    intensity: Intensity { mean: 2.0, std: 0.0 },
                    drift: 0.0,
                },
            ],
            background: Intensity { mean: -1.0, std: 0.0 },
            noise: 0.0,
            texture_scale: 0.0,
            scan_jitter: 0.0,
            scan_offset: 0.0,
            scan_drift: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn noise_free_is_piecewise_constant() {
        let spec = small_spec();
        let (img, mask) = generate(&spec).unwrap();
        for (si, ms) in img.slices().iter().zip(mask.slices()) {
            for (&v, &c) in si.as_slice().iter().zip(ms.as_slice()) {
                let want = match c.0 {
                    0 => -1.0,
                    1 => 1.0,
                    2 => 2.0,
                    _ => unreachable!(),
                };
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn organ_voxel_counts_match_enumeration() {
        let spec = small_spec();
        let (_, mask) = generate(&spec).unwrap();
        let mut counts = [0usize; 3];
        for s in mask.slices() {
            for c in s.as_slice() {
                counts[c.0 as usize] += 1;
            }
        }
        // oracle: direct ellipsoid membership, first organ wins
        let mut expected = [0usize; 3];
        for z in 0..9 {
            for y in 0..12 {
                for x in 0..14 {
                    let member = |o: &OrganSpec| {
                        let p = [z as f64, y as f64, x as f64];
                        (0..3).map(|i| ((p[i] - o.center[i]) / o.axes[i]).powi(2)).sum::<f64>() <= 1.0
                    };
                    let c = if member(&spec.organs[0]) {
                        1
                    } else if member(&spec.organs[1]) {
                        2
                    } else {
                        0
                    };
                    expected[c] += 1;
                }
            }
        }
        assert_eq!(counts, expected);
        assert!(expected[1] > 0 && expected[2] > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = default_spec(42);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert!(a.0.flat().iter().zip(b.0.flat()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.1, b.1);
        let c = generate(&spec.with_seed(43)).unwrap();
        assert_ne!(a.0, c.0);
        assert_eq!(a.1, c.1);
    }

    #[test]
    fn out_of_bounds_ellipsoid_is_rejected() {
        let mut spec = small_spec();
        spec.organs[0].center[2] = 1.0;
        assert!(matches!(generate(&spec), Err(Error::PhantomSpec(_))));
        let mut spec = small_spec();
        spec.organs[1].class = ClassId(1);
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.noise = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn evenly_spaced_selection() {
        let candidates: Vec<usize> = (10..19).collect();
        assert_eq!(select_support_slices(&candidates, 3, SupportSelection::EvenlySpaced).unwrap(), vec![10, 14, 18]);
        assert_eq!(select_support_slices(&candidates, 1, SupportSelection::EvenlySpaced).unwrap(), vec![14]);
        assert_eq!(select_support_slices(&candidates, 3, SupportSelection::CenterBlock).unwrap(), vec![13, 14, 15]);
        assert!(select_support_slices(&candidates[..2], 3, SupportSelection::EvenlySpaced).is_err());
    }

    #[test]
    fn episode_hides_truth_and_uses_independent_scans() {
        let ep = make_episode(&default_spec(5), 3, SupportSelection::EvenlySpaced).unwrap();
        assert_eq!(ep.episode.shots(), 3);
        assert_eq!(ep.episode.classes().len(), 5);
        assert_eq!(ep.truth.dims(), [32, 64, 64]);
        // same layout, different intensities
        assert_eq!(ep.truth, ep.support_mask);
        assert_ne!(ep.episode.query(), &ep.support_image);
        let fg = ep.truth.foreground_slices();
        assert_eq!(ep.episode.query_range(), (fg[0], *fg.last().unwrap()));
    }

    #[test]
    fn noise_free_disjoint_phantom_is_segmented_almost_perfectly() {
        let mut spec = default_spec(11);
        spec.noise = 0.0;
        spec.texture_scale = 0.0;
        spec.scan_jitter = 0.0;
        spec.scan_offset = 0.0;
        spec.scan_drift = 0.0;
        spec.background.std = 0.0;
        for o in &mut spec.organs {
            o.intensity.std = 0.0;
            o.drift = 0.0;
        }
        let ep = make_episode(&spec, 3, SupportSelection::EvenlySpaced).unwrap();
        let config = crate::data::EpisodeConfig { strategy: crate::data::ProtoStrategy::SupportOnly, ..Default::default() };
        let result = crate::pipeline::run_episode(&ep.episode, &default_extractor(), &config).unwrap();
        for (c, d) in crate::eval::per_class_dice(&result.masks, &ep.truth).unwrap() {
            assert!(d >= 0.99, "class {c}: {d}");
        }
    }

    #[test]
    fn default_suite_is_valid() {
        for spec in default_suite_specs(20, 0) {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn rng_moments() {
        let rng = CounterRng::new(1);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|i| rng.normal(9, i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
