//! Three-stage inference over one episode.
//!
//! Stage 1 segments every query slice against the support prototypes.
//! Stage 2 pools, for each target slice, the confidently pseudo-labelled
//! pixels of the slices in its window into query prototypes and assembles a
//! per-slice prototype bank. Stage 3 re-segments each slice with its bank.
//! With `iterations > 1` stages 2 and 3 repeat, each round pseudo-labelling
//! from the previous round's output; banks are rebuilt from scratch every
//! round.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{
    resample_mask, ClassId, ClassSet, Episode, EpisodeConfig, FeatureMap, FeatureVolume, Grid, LabelMask,
    ProtoStrategy, SupportPairing, VolumeImage,
};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::proto::{
    build_bank, confident_mask, masked_mean, pool_slice_means, support_prototype, MaskedSlice, Prototype,
    PrototypeBank, PrototypeSource, SliceMean,
};
use crate::scoring::{predict_mask, ProbabilityMap, PseudoMask};

/// Embeddings of an episode's support slices and query volume.
#[derive(Clone, Debug)]
pub struct EpisodeFeatures {
    pub support: Vec<FeatureMap>,
    pub query: FeatureVolume,
}

impl EpisodeFeatures {
    pub fn extract(episode: &Episode, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let images = episode.support().iter().map(|s| s.image.clone()).collect();
        let support = extractor.extract(&VolumeImage::new(images)?)?.into_maps();
        let query = extractor.extract(episode.query())?;
        Ok(EpisodeFeatures { support, query })
    }

    fn validate(&self, episode: &Episode) -> Result<()> {
        if self.support.len() != episode.shots() {
            return Err(Error::shape(format!(
                "{} support feature maps for {} support slices",
                self.support.len(),
                episode.shots()
            )));
        }
        if self.query.depth() != episode.query().depth() {
            return Err(Error::shape(format!(
                "query features have {} slices, query volume has {}",
                self.query.depth(),
                episode.query().depth()
            )));
        }
        let [_, h, w, z] = self.query.dims();
        if let Some(k) = self.support.iter().position(|m| (m.height(), m.width(), m.channels()) != (h, w, z)) {
            return Err(Error::shape(format!("support feature map {k} does not match query features {h}x{w}x{z}")));
        }
        Ok(())
    }
}

/// Support prototypes and which set each query slice is scored with.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupportPrototypes {
    /// One prototype per episode class for every set.
    pub sets: Vec<Vec<Prototype>>,
    /// Index into `sets` for every query slice.
    pub assignment: Vec<usize>,
}

impl SupportPrototypes {
    pub fn for_slice(&self, slice: usize) -> &[Prototype] {
        &self.sets[self.assignment[slice]]
    }
}

/// Probabilities and pseudo-labels for every query slice at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceScores {
    pub probs: Vec<ProbabilityMap>,
    pub pseudo: Vec<PseudoMask>,
}

impl SliceScores {
    pub fn labels(&self) -> Vec<Grid<ClassId>> {
        self.pseudo.iter().map(|p| p.labels().clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1 {
    pub support: SupportPrototypes,
    pub scores: SliceScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2 {
    /// Prototype bank per target slice.
    pub banks: Vec<PrototypeBank>,
    /// Confident pixels per slice and class in the pseudo-labels this round used.
    pub confident_pixels: Vec<BTreeMap<ClassId, usize>>,
}

/// One pseudo-label / re-segmentation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub confident_pixels: Vec<BTreeMap<ClassId, usize>>,
    pub banks: Vec<PrototypeBank>,
    /// Labels produced by this round at feature resolution.
    pub labels: Vec<Grid<ClassId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// Final labels at image resolution.
    pub masks: LabelMask,
    /// Final probabilities at feature resolution.
    pub probabilities: Vec<ProbabilityMap>,
    /// Stage-1 labels at feature resolution.
    pub initial_labels: Vec<Grid<ClassId>>,
    pub support: SupportPrototypes,
    /// Exactly `config.iterations` rounds.
    pub rounds: Vec<Round>,
}

/// Support prototype sets under the configured pairing.
fn support_prototypes(
    episode: &Episode,
    features: &EpisodeFeatures,
    config: &EpisodeConfig,
) -> Result<SupportPrototypes> {
    let shape = features.query.map(0).shape();
    let classes = episode.classes();
    let masks: Vec<Vec<Grid<bool>>> = episode
        .support()
        .iter()
        .map(|s| classes.ids().iter().map(|&c| resample_mask(&s.mask.binary_view(c), shape)).collect())
        .collect::<Result<_>>()?;
    let pooled = |ci: usize, class: ClassId, shots: &[usize]| {
        let masked: Vec<MaskedSlice<'_>> = shots
            .iter()
            .map(|&k| MaskedSlice {
                index: episode.support()[k].source_index,
                features: &features.support[k],
                mask: &masks[k][ci],
            })
            .collect();
        support_prototype(class, &masked)
    };

    let shots = episode.shots();
    let all: Vec<usize> = (0..shots).collect();
    let averaged: Vec<Prototype> = classes
        .ids()
        .iter()
        .enumerate()
        .map(|(ci, &c)| pooled(ci, c, &all))
        .collect::<Result<_>>()?;

    let depth = features.query.depth();
    match config.pairing {
        SupportPairing::AllAverage => Ok(SupportPrototypes { sets: vec![averaged], assignment: vec![0; depth] }),
        SupportPairing::Chunked => {
            let mut sets = Vec::with_capacity(shots);
            for k in 0..shots {
                let set = classes
                    .ids()
                    .iter()
                    .enumerate()
                    .map(|(ci, &c)| match pooled(ci, c, &[k]) {
                        Err(Error::EmptyClass(_)) => Ok(averaged[ci].clone()),
                        other => other,
                    })
                    .collect::<Result<Vec<_>>>()?;
                sets.push(set);
            }
            let assignment = (0..depth).map(|i| chunk_of(i, episode.query_range(), shots)).collect();
            Ok(SupportPrototypes { sets, assignment })
        }
    }
}

/// Chunk index of query slice `slice` when the inclusive `range` is split into
/// `chunks` contiguous, (nearly) equal parts. Slices outside the range join
/// the nearest chunk.
pub fn chunk_of(slice: usize, range: (usize, usize), chunks: usize) -> usize {
    let (lo, hi) = range;
    if slice <= lo {
        return 0;
    }
    if slice >= hi {
        return chunks - 1;
    }
    ((slice - lo) * chunks / (hi - lo + 1)).min(chunks - 1)
}

fn score_slices(query: &FeatureVolume, banks: impl Fn(usize) -> Result<PrototypeBank> + Sync, config: &EpisodeConfig) -> Result<SliceScores> {
    let scored: Vec<(PseudoMask, ProbabilityMap)> = (0..query.depth())
        .into_par_iter()
        .map(|i| predict_mask(query.map(i), &banks(i)?, config.alpha, config.fusion))
        .collect::<Result<_>>()?;
    let (pseudo, probs) = scored.into_iter().unzip();
    Ok(SliceScores { probs, pseudo })
}

fn check_inputs(episode: &Episode, features: &EpisodeFeatures, config: &EpisodeConfig) -> Result<()> {
    config.validate()?;
    if episode.shots() != config.shots {
        return Err(Error::InvalidConfig(format!(
            "episode has {} support slices, config expects K = {}",
            episode.shots(),
            config.shots
        )));
    }
    features.validate(episode)
}

/// Stage 1: support prototypes and the initial segmentation of every query slice.
pub fn stage1_initial(episode: &Episode, features: &EpisodeFeatures, config: &EpisodeConfig) -> Result<Stage1> {
    check_inputs(episode, features, config)?;
    let support = support_prototypes(episode, features, config)?;
    let classes = episode.classes();
    let scores = score_slices(
        &features.query,
        |i| build_bank(classes, support.for_slice(i), &[], ProtoStrategy::SupportOnly),
        config,
    )?;
    Ok(Stage1 { support, scores })
}

/// Stage 2: query prototypes from confident pseudo-labels in each target
/// slice's window, merged with the support prototypes per the strategy.
pub fn stage2_pseudo_label(
    support: &SupportPrototypes,
    source: &SliceScores,
    query: &FeatureVolume,
    classes: &ClassSet,
    config: &EpisodeConfig,
) -> Result<Stage2> {
    let depth = query.depth();
    if source.probs.len() != depth || source.pseudo.len() != depth {
        return Err(Error::shape(format!(
            "pseudo-label source covers {} slices, query has {depth}",
            source.probs.len()
        )));
    }
    // per slice: (masked mean over confident pixels, confident count) per class
    let per_slice: Vec<Vec<(ClassId, Option<SliceMean>, usize)>> = (0..depth)
        .into_par_iter()
        .map(|i| {
            classes
                .ids()
                .iter()
                .map(|&c| {
                    let mask = confident_mask(c, config.gamma_for(c), &source.probs[i], &source.pseudo[i])?;
                    let count = mask.as_slice().iter().filter(|&&b| b).count();
                    Ok((c, masked_mean(query.map(i), &mask)?, count))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let banks = (0..depth)
        .into_par_iter()
        .map(|target| {
            let window = config.window.window(target, depth);
            let query_protos: Vec<Prototype> = (0..classes.len())
                .filter_map(|ci| {
                    let class = classes.ids()[ci];
                    pool_slice_means(
                        class,
                        PrototypeSource::Query,
                        window.clone().map(|i| (i, per_slice[i][ci].1.as_ref())),
                    )
                })
                .collect();
            build_bank(classes, support.for_slice(target), &query_protos, config.strategy)
        })
        .collect::<Result<Vec<_>>>()?;

    let confident_pixels = per_slice
        .iter()
        .map(|cs| cs.iter().map(|(c, _, n)| (*c, *n)).collect())
        .collect();
    Ok(Stage2 { banks, confident_pixels })
}

/// Stage 3: final segmentation of each query slice with its own bank.
pub fn stage3_final(query: &FeatureVolume, banks: &[PrototypeBank], config: &EpisodeConfig) -> Result<SliceScores> {
    if banks.len() != query.depth() {
        return Err(Error::shape(format!("{} banks for {} query slices", banks.len(), query.depth())));
    }
    score_slices(query, |i| Ok(banks[i].clone()), config)
}

/// Runs the full pipeline on precomputed features.
pub fn run_with_features(
    episode: &Episode,
    features: &EpisodeFeatures,
    config: &EpisodeConfig,
) -> Result<SegmentationResult> {
    let stage1 = stage1_initial(episode, features, config)?;
    let mut rounds = Vec::with_capacity(config.iterations);
    let mut source = stage1.scores.clone();
    for _ in 0..config.iterations {
        let stage2 = stage2_pseudo_label(&stage1.support, &source, &features.query, episode.classes(), config)?;
        let scores = stage3_final(&features.query, &stage2.banks, config)?;
        rounds.push(Round { confident_pixels: stage2.confident_pixels, banks: stage2.banks, labels: scores.labels() });
        source = scores;
    }

    let image_shape = episode.query().slice_shape();
    let masks = source
        .pseudo
        .iter()
        .map(|p| resample_mask(p.labels(), image_shape))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationResult {
        masks: LabelMask::new(masks)?,
        probabilities: source.probs,
        initial_labels: stage1.scores.labels(),
        support: stage1.support,
        rounds,
    })
}

/// Extracts features with `extractor` and runs the full pipeline.
pub fn run_episode(
    episode: &Episode,
    extractor: &dyn FeatureExtractor,
    config: &EpisodeConfig,
) -> Result<SegmentationResult> {
    config.validate()?;
    let features = EpisodeFeatures::extract(episode, extractor)?;
    run_with_features(episode, &features, config)
}

/// Upsamples feature-resolution labels to the image grid.
pub fn upsample_labels(labels: &[Grid<ClassId>], image_shape: (usize, usize)) -> Result<LabelMask> {
    LabelMask::new(labels.iter().map(|l| resample_mask(l, image_shape)).collect::<Result<_>>()?)
}
