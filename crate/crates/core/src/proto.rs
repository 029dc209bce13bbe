//! Class prototypes by masked average pooling.
//!
//! A prototype is the mean feature vector over the pixels a (binary) mask
//! selects. Several slices are combined by averaging their per-slice means
//! over the slices whose mask is non-empty. Support prototypes pool
//! annotated support slices; query prototypes pool the confidently
//! pseudo-labelled pixels of a window of query slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassSet, FeatureMap, Grid, ProtoStrategy};
use crate::error::{Error, Result};
use crate::scoring::{ProbabilityMap, PseudoMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PrototypeSource {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Indices of the slices that contributed at least one pixel.
    pub slices: Vec<usize>,
    pub pixels: usize,
    /// Set when a support prototype stands in for a missing query prototype.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: ClassId,
    pub vector: Vec<f64>,
    pub source: PrototypeSource,
    pub provenance: Provenance,
}

/// Mean of the selected feature vectors of one slice and how many there were.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMean {
    pub mean: Vec<f64>,
    pub pixels: usize,
}

/// Masked mean of one slice's features, or `None` if the mask is empty.
pub fn masked_mean(features: &FeatureMap, mask: &Grid<bool>) -> Result<Option<SliceMean>> {
    if features.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "features are {:?}, mask is {:?}",
            features.shape(),
            mask.shape()
        )));
    }
    let mut sum = vec![0.0f64; features.channels()];
    let mut pixels = 0usize;
    for (px, _) in features.pixels().zip(mask.as_slice()).filter(|(_, &m)| m) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v as f64;
        }
        pixels += 1;
    }
    if pixels == 0 {
        return Ok(None);
    }
    let n = pixels as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(Some(SliceMean { mean: sum, pixels }))
}

/// Averages per-slice means over the slices that have one. Returns `None`
/// when every slice is empty.
pub fn pool_slice_means<'a>(
    class: ClassId,
    source: PrototypeSource,
    means: impl IntoIterator<Item = (usize, Option<&'a SliceMean>)>,
) -> Option<Prototype> {
    let mut sum: Option<Vec<f64>> = None;
    let mut slices = Vec::new();
    let mut pixels = 0;
    for (index, mean) in means {
        let Some(mean) = mean else { continue };
        match &mut sum {
            None => sum = Some(mean.mean.clone()),
            Some(acc) => acc.iter_mut().zip(&mean.mean).for_each(|(a, &m)| *a += m),
        }
        slices.push(index);
        pixels += mean.pixels;
    }
    let mut vector = sum?;
    let k = slices.len() as f64;
    vector.iter_mut().for_each(|v| *v /= k);
    Some(Prototype { class, vector, source, provenance: Provenance { slices, pixels, fallback: false } })
}

/// A support slice at feature resolution with the binary mask of one class.
#[derive(Clone, Copy, Debug)]
pub struct MaskedSlice<'a> {
    pub index: usize,
    pub features: &'a FeatureMap,
    pub mask: &'a Grid<bool>,
}

/// Support prototype of `class` pooled over the annotated support slices.
///
/// Slices whose mask is empty are skipped; if all of them are empty the
/// class cannot be represented and [`Error::EmptyClass`] is returned.
pub fn support_prototype(class: ClassId, slices: &[MaskedSlice<'_>]) -> Result<Prototype> {
    let first = slices
        .first()
        .ok_or_else(|| Error::shape("support prototype needs at least one slice"))?;
    let channels = first.features.channels();
    let mut means = Vec::with_capacity(slices.len());
    for s in slices {
        if s.features.channels() != channels {
            return Err(Error::shape("support slices differ in feature channels"));
        }
        means.push((s.index, masked_mean(s.features, s.mask)?));
    }
    pool_slice_means(class, PrototypeSource::Support, means.iter().map(|(i, m)| (*i, m.as_ref())))
        .ok_or(Error::EmptyClass(class))
}

/// Pixels of one query slice confidently assigned to `class`: the pseudo-label
/// is `class` and its probability is at least `gamma`.
pub fn confident_mask(
    class: ClassId,
    gamma: f64,
    probs: &ProbabilityMap,
    pseudo: &PseudoMask,
) -> Result<Grid<bool>> {
    if probs.shape() != pseudo.shape() {
        return Err(Error::shape(format!(
            "probability map is {:?}, pseudo mask is {:?}",
            probs.shape(),
            pseudo.shape()
        )));
    }
    let ci = probs.class_index(class).ok_or(Error::ClassNotInEpisode(class))?;
    let (h, w) = probs.shape();
    let labels = pseudo.labels().as_slice();
    let data = (0..h * w)
        .map(|p| labels[p] == class && probs.row(p)[ci] >= gamma)
        .collect();
    Grid::new(h, w, data)
}

/// One windowed query slice with its current probabilities and pseudo-labels.
#[derive(Clone, Copy, Debug)]
pub struct QuerySlice<'a> {
    pub index: usize,
    pub features: &'a FeatureMap,
    pub probs: &'a ProbabilityMap,
    pub pseudo: &'a PseudoMask,
}

/// Per-slice mean over the confident pixels of `class`.
pub fn confident_slice_mean(class: ClassId, gamma: f64, slice: &QuerySlice<'_>) -> Result<Option<SliceMean>> {
    if slice.features.shape() != slice.probs.shape() {
        return Err(Error::shape(format!(
            "query features are {:?}, probabilities are {:?}",
            slice.features.shape(),
            slice.probs.shape()
        )));
    }
    let mask = confident_mask(class, gamma, slice.probs, slice.pseudo)?;
    masked_mean(slice.features, &mask)
}

/// Query prototype of `class` from the confident pixels of a window of query
/// slices, or `None` when no pixel in the window is confident.
pub fn query_prototype(class: ClassId, gamma: f64, window: &[QuerySlice<'_>]) -> Result<Option<Prototype>> {
    if window.is_empty() {
        return Err(Error::shape("query prototype needs at least one slice"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let mut means = Vec::with_capacity(window.len());
    for s in window {
        means.push((s.index, confident_slice_mean(class, gamma, s)?));
    }
    Ok(pool_slice_means(class, PrototypeSource::Query, means.iter().map(|(i, m)| (*i, m.as_ref()))))
}

/// Prototypes available for scoring, keyed by class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: BTreeMap<ClassId, Vec<Prototype>>,
}

impl PrototypeBank {
    /// Replaces the prototypes of `class`. Scoring rejects empty lists.
    pub fn insert(&mut self, class: ClassId, prototypes: Vec<Prototype>) {
        self.prototypes.insert(class, prototypes);
    }

    pub fn get(&self, class: ClassId) -> &[Prototype] {
        self.prototypes.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.prototypes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[Prototype])> + '_ {
        self.prototypes.iter().map(|(c, p)| (*c, p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.prototypes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn count(&self, source: PrototypeSource) -> usize {
        self.prototypes.values().flatten().filter(|p| p.source == source).count()
    }
}

/// Assembles the prototypes the final prediction is scored against.
///
/// * `SupportOnly`: the support prototypes.
/// * `QueryOnly`: the query prototypes; a class without one keeps its support
///   prototype, flagged as a fallback in its provenance.
/// * `SupportAndQuery`: the per-class union, support first.
///
/// Every class of `classes` must end up with at least one prototype.
pub fn build_bank(
    classes: &ClassSet,
    support: &[Prototype],
    query: &[Prototype],
    strategy: ProtoStrategy,
) -> Result<PrototypeBank> {
    let by_class = |protos: &[Prototype], source| -> Result<BTreeMap<ClassId, Prototype>> {
        let mut map = BTreeMap::new();
        for p in protos {
            if p.source != source {
                return Err(Error::InvalidConfig(format!("{:?} prototype passed as {source:?}", p.source)));
            }
            if !classes.contains(p.class) {
                return Err(Error::ClassNotInEpisode(p.class));
            }
            if map.insert(p.class, p.clone()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate {source:?} prototype for class {}", p.class)));
            }
        }
        Ok(map)
    };
    let support = by_class(support, PrototypeSource::Support)?;
    let query = by_class(query, PrototypeSource::Query)?;

    let mut prototypes = BTreeMap::new();
    for &class in classes.ids() {
        let s = support.get(&class);
        let q = query.get(&class);
        let list: Vec<Prototype> = match strategy {
            ProtoStrategy::SupportOnly => s.into_iter().cloned().collect(),
            ProtoStrategy::QueryOnly => match (q, s) {
                (Some(q), _) => vec![q.clone()],
                (None, Some(s)) => {
                    let mut fallback = s.clone();
                    fallback.provenance.fallback = true;
                    vec![fallback]
                }
                (None, None) => vec![],
            },
            ProtoStrategy::SupportAndQuery => s.into_iter().chain(q).cloned().collect(),
        };
        if list.is_empty() {
            return Err(Error::BankConstruction(class));
        }
        prototypes.insert(class, list);
    }
    Ok(PrototypeBank { prototypes })
}
