//! Volumetric data model shared by every stage of the pipeline.
//!
//! Images and label masks are ordered stacks of equally sized 2D grids. A
//! label mask stores one [`ClassId`] per pixel; per-class binary masks are
//! derived views, so the classes always partition the pixel grid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Semantic class label. `ClassId(0)` is always background.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("grid dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be >= 1");
        let mut data = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                data.push(f(h, w));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize) -> &T {
        &self.data[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: T) {
        self.data[h * self.width + w] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid::from_fn(height, width, |_, _| value.clone())
    }
}

impl Grid<ClassId> {
    /// Binary view of one class: `true` exactly where the label equals `class`.
    pub fn binary_view(&self, class: ClassId) -> Grid<bool> {
        self.map(|&c| c == class)
    }
}

/// Nearest-neighbour resampling of a grid to `target` (height, width).
///
/// Each output pixel samples the source pixel containing its centre, so equal
/// shapes map every pixel to itself and integer upscales replicate blocks.
pub fn resample_mask<T: Copy>(grid: &Grid<T>, target: (usize, usize)) -> Result<Grid<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape(format!("resample target must be >= 1, got {th}x{tw}")));
    }
    if grid.shape() == target {
        return Ok(grid.clone());
    }
    let rows: Vec<usize> = (0..th).map(|i| nearest_source(i, th, grid.height)).collect();
    let cols: Vec<usize> = (0..tw).map(|j| nearest_source(j, tw, grid.width)).collect();
    Ok(Grid::from_fn(th, tw, |h, w| *grid.get(rows[h], cols[w])))
}

fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1)
}

fn check_congruent<T>(slices: &[Grid<T>], what: &str) -> Result<()> {
    let Some(first) = slices.first() else {
        return Err(Error::shape(format!("{what} has no slices")));
    };
    if let Some((i, s)) = slices.iter().enumerate().find(|(_, s)| s.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "{what} slice {i} is {:?}, expected {:?}",
            s.shape(),
            first.shape()
        )));
    }
    Ok(())
}

/// A scan: ordered slices of scalar intensities in acquisition order.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeImage {
    slices: Vec<Grid<f32>>,
    spacing: Option<[f64; 3]>,
}

impl VolumeImage {
    pub fn new(slices: Vec<Grid<f32>>) -> Result<Self> {
        check_congruent(&slices, "volume")?;
        Ok(VolumeImage { slices, spacing: None })
    }

    /// Builds a volume from slice-major, row-major values.
    pub fn from_flat(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Ok(VolumeImage { slices: split_slices(dims, data)?, spacing: None })
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn slices(&self) -> &[Grid<f32>] {
        &self.slices
    }

    pub fn slice(&self, i: usize) -> &Grid<f32> {
        &self.slices[i]
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn dims(&self) -> [usize; 3] {
        let (h, w) = self.slice_shape();
        [self.depth(), h, w]
    }

    pub fn flat(&self) -> Vec<f32> {
        self.slices.iter().flat_map(|s| s.as_slice().iter().copied()).collect()
    }
}

/// Per-pixel class labels congruent with a [`VolumeImage`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    slices: Vec<Grid<ClassId>>,
}

impl LabelMask {
    pub fn new(slices: Vec<Grid<ClassId>>) -> Result<Self> {
        check_congruent(&slices, "label mask")?;
        Ok(LabelMask { slices })
    }

    pub fn from_flat(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let data = data.into_iter().map(ClassId).collect();
        Ok(LabelMask { slices: split_slices(dims, data)? })
    }

    pub fn slices(&self) -> &[Grid<ClassId>] {
        &self.slices
    }

    pub fn slice(&self, i: usize) -> &Grid<ClassId> {
        &self.slices[i]
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn dims(&self) -> [usize; 3] {
        let (h, w) = self.slice_shape();
        [self.depth(), h, w]
    }

    pub fn flat(&self) -> Vec<u8> {
        self.slices.iter().flat_map(|s| s.as_slice().iter().map(|c| c.0)).collect()
    }

    /// Sorted set of labels that occur anywhere in the mask.
    pub fn present_classes(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for s in &self.slices {
            for c in s.as_slice() {
                seen[c.0 as usize] = true;
            }
        }
        (0..=255u8).filter(|&i| seen[i as usize]).map(ClassId).collect()
    }

    /// Indices of slices containing at least one foreground pixel.
    pub fn foreground_slices(&self) -> Vec<usize> {
        self.slices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_slice().iter().any(|c| !c.is_background()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_congruent_with(&self, image: &VolumeImage) -> bool {
        self.dims() == image.dims()
    }
}

fn split_slices<T>(dims: [usize; 3], data: Vec<T>) -> Result<Vec<Grid<T>>> {
    let [s, h, w] = dims;
    if s == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("volume dims must be >= 1, got {dims:?}")));
    }
    if data.len() != s * h * w {
        return Err(Error::shape(format!(
            "volume {dims:?} needs {} values, got {}",
            s * h * w,
            data.len()
        )));
    }
    let mut slices = Vec::with_capacity(s);
    let mut rest = data;
    for _ in 0..s {
        let tail = rest.split_off(h * w);
        slices.push(Grid { height: h, width: w, data: rest });
        rest = tail;
    }
    Ok(slices)
}

/// Binary view of `class` over every slice of `mask`.
pub fn binary_mask_view(mask: &LabelMask, classes: &ClassSet, class: ClassId) -> Result<Vec<Grid<bool>>> {
    if !classes.contains(class) {
        return Err(Error::ClassNotInEpisode(class));
    }
    Ok(mask.slices.iter().map(|s| s.binary_view(class)).collect())
}

/// One slice worth of Z-dimensional feature vectors, channel-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "feature map dims must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeatureMap { height, width, channels, data })
    }

    /// Stacks per-channel planes (each `height * width`, row-major) into a map.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (z, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::shape(format!("channel {z} has {} values", plane.len())));
            }
            for (p, &v) in plane.iter().enumerate() {
                data[p * channels + z] = v;
            }
        }
        FeatureMap::new(height, width, channels, data)
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

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[f32] {
        self.pixel_at(h * self.width + w)
    }

    /// Feature vector of the pixel at row-major index `p`.
    pub fn pixel_at(&self, p: usize) -> &[f32] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, z: usize) -> Vec<f32> {
        self.pixels().map(|px| px[z]).collect()
    }

    /// Same map with every feature vector multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<FeatureMap> {
        FeatureMap::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Feature maps for every slice of a volume; the codomain of an extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    maps: Vec<FeatureMap>,
    source_shape: (usize, usize),
}

impl FeatureVolume {
    pub fn new(maps: Vec<FeatureMap>, source_shape: (usize, usize)) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::shape("feature volume has no slices"));
        };
        let dims = (first.height, first.width, first.channels);
        if let Some((i, m)) = maps
            .iter()
            .enumerate()
            .find(|(_, m)| (m.height, m.width, m.channels) != dims)
        {
            return Err(Error::shape(format!(
                "feature slice {i} is {}x{}x{}, expected {dims:?}",
                m.height, m.width, m.channels
            )));
        }
        if source_shape.0 == 0 || source_shape.1 == 0 {
            return Err(Error::shape("source shape must be >= 1"));
        }
        Ok(FeatureVolume { maps, source_shape })
    }

    /// Builds a volume from `[S, H, W, Z]` channel-fastest values.
    pub fn from_flat(dims: [usize; 4], data: Vec<f32>, source_shape: (usize, usize)) -> Result<Self> {
        let [s, h, w, z] = dims;
        let per = h * w * z;
        if s == 0 || per == 0 {
            return Err(Error::shape(format!("feature dims must be >= 1, got {dims:?}")));
        }
        if data.len() != s * per {
            return Err(Error::shape(format!(
                "feature volume {dims:?} needs {} values, got {}",
                s * per,
                data.len()
            )));
        }
        let maps = data
            .chunks_exact(per)
            .map(|chunk| FeatureMap::new(h, w, z, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        FeatureVolume::new(maps, source_shape)
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn map(&self, i: usize) -> &FeatureMap {
        &self.maps[i]
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    /// `[S, H, W, Z]`.
    pub fn dims(&self) -> [usize; 4] {
        let m = &self.maps[0];
        [self.maps.len(), m.height, m.width, m.channels]
    }

    pub fn flat(&self) -> Vec<f32> {
        self.maps.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn into_maps(self) -> Vec<FeatureMap> {
        self.maps
    }
}

/// Episode classes: background plus at least one foreground class, sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct ClassSet(Vec<ClassId>);

impl ClassSet {
    pub fn new(mut classes: Vec<ClassId>) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if classes.first() != Some(&ClassId::BACKGROUND) {
            return Err(Error::InvalidConfig("class set must contain background (0)".into()));
        }
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(
                "class set needs at least one foreground class".into(),
            ));
        }
        Ok(ClassSet(classes))
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.0.binary_search(&class).ok()
    }

    pub fn foreground(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.0.iter().copied().filter(|c| !c.is_background())
    }
}

impl TryFrom<Vec<ClassId>> for ClassSet {
    type Error = Error;

    fn try_from(v: Vec<ClassId>) -> Result<Self> {
        ClassSet::new(v)
    }
}

impl From<ClassSet> for Vec<ClassId> {
    fn from(c: ClassSet) -> Self {
        c.0
    }
}

/// One annotated support slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSlice {
    pub image: Grid<f32>,
    pub mask: Grid<ClassId>,
    /// Index of the slice within its source volume.
    pub source_index: usize,
}

/// Support/query unit handed to the pipeline.
///
/// Holds no query ground truth; evaluation pairs an episode with its truth
/// separately (see [`crate::phantom::LabeledEpisode`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    support: Vec<SupportSlice>,
    query: VolumeImage,
    classes: ClassSet,
    query_range: Option<(usize, usize)>,
}

impl Episode {
    pub fn new(support: Vec<SupportSlice>, query: VolumeImage, classes: ClassSet) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::shape("episode needs at least one support slice"));
        }
        let shape = query.slice_shape();
        for (k, s) in support.iter().enumerate() {
            if s.image.shape() != shape || s.mask.shape() != shape {
                return Err(Error::shape(format!(
                    "support slice {k} is {:?}/{:?}, query slices are {shape:?}",
                    s.image.shape(),
                    s.mask.shape()
                )));
            }
            if let Some(c) = s.mask.as_slice().iter().find(|c| !classes.contains(**c)) {
                return Err(Error::ClassNotInEpisode(*c));
            }
        }
        Ok(Episode { support, query, classes, query_range: None })
    }

    /// Inclusive slice range of the query holding the target classes, used by
    /// the chunked support pairing. Defaults to the whole volume.
    pub fn with_query_range(mut self, range: Option<(usize, usize)>) -> Result<Self> {
        if let Some((lo, hi)) = range {
            if lo > hi || hi >= self.query.depth() {
                return Err(Error::shape(format!(
                    "query range {lo}..={hi} outside 0..{}",
                    self.query.depth()
                )));
            }
        }
        self.query_range = range;
        Ok(self)
    }

    pub fn support(&self) -> &[SupportSlice] {
        &self.support
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    pub fn query(&self) -> &VolumeImage {
        &self.query
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn query_range(&self) -> (usize, usize) {
        self.query_range.unwrap_or((0, self.query.depth() - 1))
    }
}

/// Radius of the query-slice window pooled for query prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowRadius {
    Slices(usize),
    All,
}

impl WindowRadius {
    /// Inclusive window `[max(0, i-m), min(S-1, i+m)]` around target slice `i`.
    pub fn window(self, target: usize, depth: usize) -> std::ops::RangeInclusive<usize> {
        assert!(target < depth, "target slice {target} outside volume of {depth}");
        match self {
            WindowRadius::All => 0..=depth - 1,
            WindowRadius::Slices(m) => target.saturating_sub(m)..=(target + m).min(depth - 1),
        }
    }
}

impl fmt::Display for WindowRadius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowRadius::Slices(m) => write!(f, "{m}"),
            WindowRadius::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for WindowRadius {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(WindowRadius::All);
        }
        s.parse()
            .map(WindowRadius::Slices)
            .map_err(|_| Error::Usage(format!("window must be a non-negative integer or ALL, got {s:?}")))
    }
}

impl Serialize for WindowRadius {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WindowRadius::Slices(m) => ser.serialize_u64(*m as u64),
            WindowRadius::All => ser.serialize_str("ALL"),
        }
    }
}

impl<'de> Deserialize<'de> for WindowRadius {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(de)? {
            Raw::N(m) => Ok(WindowRadius::Slices(m)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

macro_rules! cli_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $(if s.eq_ignore_ascii_case($text) { return Ok($name::$variant); })+
                Err(Error::Usage(format!(
                    concat!("unknown ", stringify!($name), " {:?}, expected one of: ", $($text, " "),+),
                    s
                )))
            }
        }
    };
}

/// Which prototypes the final prediction scores against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProtoStrategy {
    SupportOnly,
    QueryOnly,
    #[default]
    SupportAndQuery,
}

cli_enum!(ProtoStrategy {
    SupportOnly => "SUPPORT_ONLY",
    QueryOnly => "QUERY_ONLY",
    SupportAndQuery => "SUPPORT_AND_QUERY",
});

impl ProtoStrategy {
    pub const ALL: [ProtoStrategy; 3] =
        [ProtoStrategy::SupportOnly, ProtoStrategy::QueryOnly, ProtoStrategy::SupportAndQuery];
}

/// How similarities to several prototypes of one class are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fusion {
    #[default]
    Max,
    Mean,
}

cli_enum!(Fusion { Max => "MAX", Mean => "MEAN" });

/// How support slices contribute to the support prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SupportPairing {
    /// Every query slice uses the average over all K support slices.
    #[default]
    AllAverage,
    /// The query range is cut into K contiguous chunks; chunk k uses support slice k.
    Chunked,
}

cli_enum!(SupportPairing { AllAverage => "ALL_AVERAGE", Chunked => "CHUNKED" });

/// Inference hyper-parameters for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub shots: usize,
    pub gamma: f64,
    /// Per-class overrides of `gamma`.
    pub class_gamma: BTreeMap<ClassId, f64>,
    pub window: WindowRadius,
    /// Number of pseudo-label/re-segmentation passes after the initial segmentation.
    pub iterations: usize,
    pub strategy: ProtoStrategy,
    pub alpha: f64,
    pub fusion: Fusion,
    pub pairing: SupportPairing,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            shots: 3,
            gamma: 0.95,
            class_gamma: BTreeMap::new(),
            window: WindowRadius::Slices(7),
            iterations: 2,
            strategy: ProtoStrategy::SupportAndQuery,
            alpha: 20.0,
            fusion: Fusion::Max,
            pairing: SupportPairing::AllAverage,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if let Some((c, g)) = self.class_gamma.iter().find(|(_, g)| !(0.0..=1.0).contains(*g)) {
            return bad(format!("gamma for class {c} must lie in [0, 1], got {g}"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        Ok(())
    }

    pub fn gamma_for(&self, class: ClassId) -> f64 {
        self.class_gamma.get(&class).copied().unwrap_or(self.gamma)
    }
}
