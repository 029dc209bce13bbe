//! Dice scoring, suite evaluation and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, EpisodeConfig, LabelMask, ProtoStrategy, WindowRadius};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::phantom::LabeledEpisode;
use crate::pipeline::{run_with_features, EpisodeFeatures};

/// Dice of two binary masks given as iterators of membership flags.
/// Both empty scores 1, exactly one empty scores 0.
pub fn dice_counts(pred: usize, truth: usize, overlap: usize) -> f64 {
    match (pred, truth) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * overlap as f64 / (pred + truth) as f64,
    }
}

pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("dice of masks with {} and {} voxels", pred.len(), truth.len())));
    }
    let (mut p, mut t, mut o) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        t += b as usize;
        o += (a && b) as usize;
    }
    Ok(dice_counts(p, t, o))
}

/// 3D Dice of one class between a prediction and the ground truth.
pub fn class_dice(pred: &LabelMask, truth: &LabelMask, class: ClassId) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
    }
    let (mut p, mut t, mut o) = (0, 0, 0);
    for (ps, ts) in pred.slices().iter().zip(truth.slices()) {
        for (&a, &b) in ps.as_slice().iter().zip(ts.as_slice()) {
            let (a, b) = (a == class, b == class);
            p += a as usize;
            t += b as usize;
            o += (a && b) as usize;
        }
    }
    Ok(dice_counts(p, t, o))
}

/// Per-class 3D Dice over every foreground class found in either mask.
pub fn per_class_dice(pred: &LabelMask, truth: &LabelMask) -> Result<BTreeMap<ClassId, f64>> {
    let mut classes = truth.present_classes();
    classes.extend(pred.present_classes());
    classes.sort();
    classes.dedup();
    classes
        .into_iter()
        .filter(|c| !c.is_background())
        .map(|c| Ok((c, class_dice(pred, truth, c)?)))
        .collect()
}

/// Dice averaged per class over episodes; `mean` is the mean of the class means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
    pub episodes: usize,
}

impl DiceReport {
    pub fn from_episodes(scores: &[BTreeMap<ClassId, f64>]) -> DiceReport {
        let mut sums: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
        for ep in scores {
            for (&c, &d) in ep {
                let e = sums.entry(c).or_default();
                e.0 += d;
                e.1 += 1;
            }
        }
        let per_class: BTreeMap<ClassId, f64> = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        DiceReport { per_class, mean, episodes: scores.len() }
    }
}

/// Features of every episode, extracted once and reused across configurations.
pub struct PreparedSuite<'a> {
    pub episodes: &'a [LabeledEpisode],
    pub features: Vec<EpisodeFeatures>,
}

impl<'a> PreparedSuite<'a> {
    pub fn new(episodes: &'a [LabeledEpisode], extractor: &dyn FeatureExtractor) -> Result<Self> {
        let features = episodes
            .par_iter()
            .map(|e| EpisodeFeatures::extract(&e.episode, extractor))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSuite { episodes, features })
    }

    /// Per-episode Dice of the final and the stage-one masks, in suite order.
    pub fn evaluate(&self, config: &EpisodeConfig) -> Result<Vec<EpisodeScores>> {
        self.episodes
            .par_iter()
            .zip(&self.features)
            .map(|(e, f)| {
                let result = run_with_features(&e.episode, f, config)?;
                let initial = crate::pipeline::upsample_labels(&result.initial_labels, e.truth.slice_shape())?;
                Ok(EpisodeScores {
                    id: e.id.clone(),
                    initial: per_class_dice(&initial, &e.truth)?,
                    fin: per_class_dice(&result.masks, &e.truth)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScores {
    pub id: String,
    /// Dice of the stage-one (support prototypes only) segmentation.
    pub initial: BTreeMap<ClassId, f64>,
    /// Dice of the final segmentation.
    pub fin: BTreeMap<ClassId, f64>,
}

pub fn mean_of(scores: &BTreeMap<ClassId, f64>) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.values().sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Window,
    Iterations,
    Strategy,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Window => "window",
            AblationAxis::Iterations => "iterations",
            AblationAxis::Strategy => "strategy",
        }
    }

    /// Row labels and the configuration each row runs with.
    pub fn rows(self, base: &EpisodeConfig) -> Vec<(String, EpisodeConfig)> {
        let with = |f: &dyn Fn(&mut EpisodeConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Window => [
                WindowRadius::Slices(0),
                WindowRadius::Slices(3),
                WindowRadius::Slices(7),
                WindowRadius::Slices(10),
                WindowRadius::All,
            ]
            .into_iter()
            .map(|w| (w.to_string(), with(&|c| c.window = w)))
            .collect(),
            AblationAxis::Iterations => {
                [2usize, 5, 8, 10].into_iter().map(|n| (n.to_string(), with(&|c| c.iterations = n))).collect()
            }
            AblationAxis::Strategy => {
                ProtoStrategy::ALL.into_iter().map(|s| (s.to_string(), with(&|c| c.strategy = s))).collect()
            }
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "window" => Ok(AblationAxis::Window),
            "iterations" => Ok(AblationAxis::Iterations),
            "strategy" => Ok(AblationAxis::Strategy),
            _ => Err(Error::Usage(format!("unknown ablation axis {s:?} (window, iterations, strategy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: DiceReport,
}

pub fn ablate(suite: &PreparedSuite<'_>, axis: AblationAxis, base: &EpisodeConfig) -> Result<Vec<AblationRow>> {
    axis.rows(base)
        .into_iter()
        .map(|(label, config)| {
            let scores = suite.evaluate(&config)?;
            let fin: Vec<_> = scores.into_iter().map(|s| s.fin).collect();
            Ok(AblationRow { label, report: DiceReport::from_episodes(&fin) })
        })
        .collect()
}

/// CSV with the axis value, one column per class and the mean, 4 decimals.
pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut classes: Vec<ClassId> = rows.iter().flat_map(|r| r.report.per_class.keys().copied()).collect();
    classes.sort();
    classes.dedup();
    let mut out = String::from(axis.name());
    for c in &classes {
        write!(out, ",class_{c}").unwrap();
    }
    out.push_str(",mean\n");
    for r in rows {
        out.push_str(&r.label);
        for c in &classes {
            match r.report.per_class.get(c) {
                Some(d) => write!(out, ",{d:.4}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{:.4}", r.report.mean).unwrap();
    }
    out
}
