//! Pixel classification against a prototype bank.
//!
//! Each pixel is scored per class by `alpha * cos(feature, prototype)`
//! (fused over the class's prototypes), and a softmax over classes turns the
//! scores into probabilities. Higher similarity means higher probability.

use std::collections::BTreeMap;

use crate::data::{ClassId, FeatureMap, Fusion, Grid};
use crate::error::{Error, Result};
use crate::proto::{Prototype, PrototypeBank};

pub const COSINE_EPS: f64 = 1e-12;

/// Per-pixel distribution over the scored classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    classes: Vec<ClassId>,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// Validates that every row is a probability vector (entries in [0, 1],
    /// summing to 1 within 1e-6).
    pub fn new(classes: impl Into<Vec<ClassId>>, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let classes = classes.into();
        let n = classes.len();
        if n == 0 || !classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::shape("probability map classes must be non-empty and strictly increasing"));
        }
        if data.len() != height * width * n {
            return Err(Error::shape(format!(
                "probability map {height}x{width}x{n} needs {} values, got {}",
                height * width * n,
                data.len()
            )));
        }
        for (p, row) in data.chunks_exact(n).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::shape(format!("pixel {p} is not a probability vector: {row:?}")));
            }
        }
        Ok(ProbabilityMap { classes, height, width, data })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Probabilities of pixel `p` (row-major index), in class order.
    pub fn row(&self, p: usize) -> &[f64] {
        let n = self.classes.len();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes.len())
    }

    pub fn prob(&self, h: usize, w: usize, class: ClassId) -> Option<f64> {
        self.class_index(class).map(|c| self.row(h * self.width + w)[c])
    }
}

/// Argmax labels with the winning probability as a confidence channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    labels: Grid<ClassId>,
    confidence: Grid<f64>,
}

impl PseudoMask {
    pub fn labels(&self) -> &Grid<ClassId> {
        &self.labels
    }

    pub fn confidence(&self) -> &Grid<f64> {
        &self.confidence
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn into_labels(self) -> Grid<ClassId> {
        self.labels
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `alpha * cos(feature, proto)`, with `cos = 0` when either vector has
/// (near) zero norm.
pub fn similarity(feature: &[f32], proto: &[f64], alpha: f64) -> Result<f64> {
    if feature.len() != proto.len() {
        return Err(Error::shape(format!(
            "feature has {} channels, prototype has {}",
            feature.len(),
            proto.len()
        )));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
    }
    let fnorm = norm(feature.iter().map(|&x| x as f64));
    let unit = UnitProto::new(proto);
    Ok(alpha * cosine(feature, fnorm, &unit))
}

/// Prototype scaled to unit length. Dividing the prototype first keeps the
/// epsilon term identical across classes, so exact ties stay exact whatever
/// the feature scale.
struct UnitProto {
    vector: Vec<f64>,
    degenerate: bool,
}

impl UnitProto {
    fn new(proto: &[f64]) -> Self {
        let pnorm = norm(proto.iter().copied());
        let degenerate = pnorm < COSINE_EPS;
        let vector = if degenerate { Vec::new() } else { proto.iter().map(|p| p / pnorm).collect() };
        UnitProto { vector, degenerate }
    }
}

fn cosine(feature: &[f32], fnorm: f64, proto: &UnitProto) -> f64 {
    if fnorm < COSINE_EPS || proto.degenerate {
        return 0.0;
    }
    let dot: f64 = feature.iter().zip(&proto.vector).map(|(&f, &p)| f as f64 * p).sum();
    dot / (fnorm + COSINE_EPS)
}

/// Softmax with max-logit subtraction.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(logits) {
        *o = (s - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Fused similarity of one pixel to one class.
fn fuse(fusion: Fusion, sims: impl Iterator<Item = f64>) -> f64 {
    match fusion {
        Fusion::Max => sims.fold(f64::NEG_INFINITY, f64::max),
        Fusion::Mean => {
            let (sum, n) = sims.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            sum / n as f64
        }
    }
}

/// Class probabilities for every pixel of one slice, over the classes held by
/// `bank` (in ascending class order).
pub fn probability_map(features: &FeatureMap, bank: &PrototypeBank, alpha: f64, fusion: Fusion) -> Result<ProbabilityMap> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
    }
    let classes: Vec<ClassId> = bank.classes().collect();
    if classes.is_empty() {
        return Err(Error::shape("prototype bank is empty"));
    }
    // unit prototypes grouped by class
    let mut scored: Vec<Vec<UnitProto>> = Vec::with_capacity(classes.len());
    for &c in &classes {
        let protos: &[Prototype] = bank.get(c);
        if protos.is_empty() {
            return Err(Error::BankConstruction(c));
        }
        let mut list = Vec::with_capacity(protos.len());
        for p in protos {
            if p.vector.len() != features.channels() {
                return Err(Error::shape(format!(
                    "prototype for class {c} has {} channels, features have {}",
                    p.vector.len(),
                    features.channels()
                )));
            }
            list.push(UnitProto::new(&p.vector));
        }
        scored.push(list);
    }

    let n = classes.len();
    let mut data = vec![0.0; features.pixel_count() * n];
    let mut logits = vec![0.0; n];
    for (px, out) in features.pixels().zip(data.chunks_exact_mut(n)) {
        let fnorm = norm(px.iter().map(|&x| x as f64));
        for (logit, protos) in logits.iter_mut().zip(&scored) {
            *logit = alpha * fuse(fusion, protos.iter().map(|u| cosine(px, fnorm, u)));
        }
        softmax(&logits, out);
    }
    let (h, w) = features.shape();
    Ok(ProbabilityMap { classes, height: h, width: w, data })
}

/// Per-pixel argmax; ties go to the lowest class id.
pub fn pseudo_label(probs: &ProbabilityMap) -> PseudoMask {
    let (h, w) = probs.shape();
    let mut labels = Vec::with_capacity(h * w);
    let mut confidence = Vec::with_capacity(h * w);
    for row in probs.rows() {
        let mut best = 0;
        for (i, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = i;
            }
        }
        labels.push(probs.classes[best]);
        confidence.push(row[best]);
    }
    PseudoMask {
        labels: Grid::new(h, w, labels).expect("shape checked"),
        confidence: Grid::new(h, w, confidence).expect("shape checked"),
    }
}

/// Final labels and probabilities of one slice against `bank`.
pub fn predict_mask(
    features: &FeatureMap,
    bank: &PrototypeBank,
    alpha: f64,
    fusion: Fusion,
) -> Result<(PseudoMask, ProbabilityMap)> {
    let probs = probability_map(features, bank, alpha, fusion)?;
    Ok((pseudo_label(&probs), probs))
}

/// Number of pixels per class in a label grid.
pub fn label_counts(labels: &Grid<ClassId>) -> BTreeMap<ClassId, usize> {
    let mut counts = BTreeMap::new();
    for &c in labels.as_slice() {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}
