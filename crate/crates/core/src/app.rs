//! File-level operations behind the `protoseg` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, EpisodeConfig, LabelMask};
use crate::error::{Error, Result};
use crate::eval::{ablate, ablation_csv, per_class_dice, AblationAxis, PreparedSuite};
use crate::features::{BuiltinExtractorSpec, FeatureExtractor};
use crate::io;
use crate::phantom::{self, LabeledEpisode, PhantomSpec, SupportSelection};
use crate::pipeline::{run_with_features, EpisodeFeatures, SegmentationResult};
use crate::proto::{Prototype, PrototypeSource};

/// Suite request for `phantom-gen`: `episodes` default-layout episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shots")]
    pub shots: usize,
}

fn default_shots() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhantomRequest {
    Single(PhantomSpec),
    Suite(SuiteSpec),
}

impl PhantomRequest {
    /// A JSON object with `dims` is a single phantom; one with `episodes` a suite.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let format = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format(e.to_string()))?;
        let parsed = if value.get("dims").is_some() {
            serde_json::from_value(value).map(PhantomRequest::Single)
        } else if value.get("episodes").is_some() {
            serde_json::from_value(value).map(PhantomRequest::Suite)
        } else {
            return Err(format("expected a phantom spec (with \"dims\") or a suite spec (with \"episodes\")".into()));
        };
        parsed.map_err(|e| format(e.to_string()))
    }
}

pub const SUITE_MANIFEST: &str = "suite.json";

fn episode_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("ep_{index:03}"))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    suite: SuiteSpec,
    episodes: Vec<PhantomSpec>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|cause| Error::Io { path: dir.to_path_buf(), cause })
}

/// Generates the requested phantom(s) into `out_dir`. Everything is
/// generated and validated before the first file is written.
///
/// A single spec writes `phantom.volraw` and `phantom.maskraw`. A suite
/// writes `ep_NNN/{support,query}.{volraw,maskraw}` plus `suite.json`.
pub fn phantom_gen(request: &PhantomRequest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match request {
        PhantomRequest::Single(spec) => {
            let (image, mask) = phantom::generate(spec)?;
            create_dir(out_dir)?;
            for (name, bytes) in [("phantom.volraw", io::encode_volume(&image)), ("phantom.maskraw", io::encode_mask(&mask))] {
                let path = out_dir.join(name);
                io::write_atomic(&path, &bytes)?;
                written.push(path);
            }
        }
        PhantomRequest::Suite(suite) => {
            if suite.episodes == 0 {
                return Err(Error::Usage("a suite needs at least one episode".into()));
            }
            let specs = phantom::default_suite_specs(suite.episodes, suite.seed);
            let episodes = specs
                .iter()
                .map(|s| phantom::make_episode(s, suite.shots, SupportSelection::EvenlySpaced))
                .collect::<Result<Vec<_>>>()?;
            create_dir(out_dir)?;
            for (i, ep) in episodes.iter().enumerate() {
                let dir = episode_dir(out_dir, i);
                create_dir(&dir)?;
                let files = [
                    ("support.volraw", io::encode_volume(&ep.support_image)),
                    ("support.maskraw", io::encode_mask(&ep.support_mask)),
                    ("query.volraw", io::encode_volume(ep.episode.query())),
                    ("query.maskraw", io::encode_mask(&ep.truth)),
                ];
                for (name, bytes) in files {
                    let path = dir.join(name);
                    io::write_atomic(&path, &bytes)?;
                    written.push(path);
                }
            }
            let manifest = Manifest { suite: suite.clone(), episodes: specs };
            let path = out_dir.join(SUITE_MANIFEST);
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            io::write_atomic(&path, text.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Loads every `ep_*` directory of a suite, in name order.
pub fn load_suite(dir: &Path, shots: usize, selection: SupportSelection) -> Result<Vec<LabeledEpisode>> {
    let entries = fs::read_dir(dir).map_err(|cause| Error::Io { path: dir.to_path_buf(), cause })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ep_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Usage(format!("{} contains no ep_* episode directories", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let id = d.file_name().unwrap().to_string_lossy().into_owned();
            LabeledEpisode::from_volumes(
                id,
                io::read_volume(d.join("support.volraw"))?,
                io::read_mask(d.join("support.maskraw"))?,
                io::read_volume(d.join("query.volraw"))?,
                io::read_mask(d.join("query.maskraw"))?,
                shots,
                selection,
            )
        })
        .collect()
}

/// Runs one ablation sweep over a suite directory and returns the CSV text.
pub fn ablate_suite(
    dir: &Path,
    axis: AblationAxis,
    extractor: &dyn FeatureExtractor,
    base: &EpisodeConfig,
    selection: SupportSelection,
) -> Result<String> {
    let episodes = load_suite(dir, base.shots, selection)?;
    let prepared = PreparedSuite::new(&episodes, extractor)?;
    Ok(ablation_csv(axis, &ablate(&prepared, axis, base)?))
}

/// Where the features of a `segment` run come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorChoice {
    Builtin(BuiltinExtractorSpec),
    /// FEATVOL files for the query and the support volume.
    Precomputed { query: PathBuf, support: PathBuf },
}

impl ExtractorChoice {
    /// A built-in extractor name wins; anything else is a FEATVOL path and
    /// then `support_features` is required.
    pub fn resolve(value: &str, support_features: Option<&Path>) -> Result<Self> {
        if let Ok(spec) = value.parse::<BuiltinExtractorSpec>() {
            return Ok(ExtractorChoice::Builtin(spec));
        }
        let query = PathBuf::from(value);
        if !query.exists() {
            return Err(Error::Usage(format!(
                "--extractor {value:?} is neither a built-in extractor nor an existing FEATVOL file"
            )));
        }
        match support_features {
            Some(s) => Ok(ExtractorChoice::Precomputed { query, support: s.to_path_buf() }),
            None => Err(Error::Usage("a FEATVOL --extractor also needs --support-features".into())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ExtractorChoice::Builtin(spec) => spec.name(),
            ExtractorChoice::Precomputed { query, .. } => format!("featvol:{}", query.display()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentRequest {
    pub support_volume: PathBuf,
    pub support_mask: PathBuf,
    pub query_volume: PathBuf,
    pub query_mask: Option<PathBuf>,
    pub extractor: ExtractorChoice,
    pub selection: SupportSelection,
    pub config: EpisodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub class: ClassId,
    pub source: PrototypeSource,
    pub slices: Vec<usize>,
    pub pixels: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl From<&Prototype> for ProvenanceEntry {
    fn from(p: &Prototype) -> Self {
        ProvenanceEntry {
            class: p.class,
            source: p.source,
            slices: p.provenance.slices.clone(),
            pixels: p.provenance.pixels,
            fallback: p.provenance.fallback,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    /// Per query slice, confident pixels per class.
    pub confident_pixels: Vec<BTreeMap<ClassId, usize>>,
    /// Per query slice, the query prototypes of that slice's bank.
    pub query_prototypes: Vec<Vec<ProvenanceEntry>>,
}

/// JSON written next to a RESULT mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSidecar {
    pub config: EpisodeConfig,
    pub extractor: String,
    pub classes: Vec<ClassId>,
    /// Support volume slice indices used as the support set.
    pub support_slices: Vec<usize>,
    /// One entry per support prototype set (one set unless chunked pairing).
    pub support_prototypes: Vec<Vec<ProvenanceEntry>>,
    pub rounds: Vec<RoundSummary>,
}

impl ResultSidecar {
    pub fn new(result: &SegmentationResult, config: &EpisodeConfig, extractor: String, episode: &crate::data::Episode) -> Self {
        ResultSidecar {
            config: config.clone(),
            extractor,
            classes: episode.classes().ids().to_vec(),
            support_slices: episode.support().iter().map(|s| s.source_index).collect(),
            support_prototypes: result.support.sets.iter().map(|set| set.iter().map(Into::into).collect()).collect(),
            rounds: result
                .rounds
                .iter()
                .map(|r| RoundSummary {
                    confident_pixels: r.confident_pixels.clone(),
                    query_prototypes: r
                        .banks
                        .iter()
                        .map(|b| {
                            b.iter()
                                .flat_map(|(_, ps)| ps.iter())
                                .filter(|p| p.source == PrototypeSource::Query || p.provenance.fallback)
                                .map(Into::into)
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

pub struct SegmentOutcome {
    pub result: SegmentationResult,
    pub sidecar: ResultSidecar,
    /// Per-class Dice against the query mask, when one was given.
    pub dice: Option<BTreeMap<ClassId, f64>>,
}

pub fn segment(request: &SegmentRequest) -> Result<SegmentOutcome> {
    let support_image = io::read_volume(&request.support_volume)?;
    let support_mask = io::read_mask(&request.support_mask)?;
    let query = io::read_volume(&request.query_volume)?;
    let truth = request.query_mask.as_ref().map(io::read_mask).transpose()?;
    if let Some(t) = &truth {
        if !t.is_congruent_with(&query) {
            return Err(Error::shape(format!("query mask {:?} does not match query volume {:?}", t.dims(), query.dims())));
        }
    }
    let episode = phantom::episode_from_volumes(&support_image, &support_mask, query, request.config.shots, request.selection)?;
    let features = match &request.extractor {
        ExtractorChoice::Builtin(spec) => EpisodeFeatures::extract(&episode, spec)?,
        ExtractorChoice::Precomputed { query, support } => {
            let query_features = io::load_embeddings(query)?;
            let support_features = io::load_embeddings(support)?;
            if support_features.depth() != support_image.depth() {
                return Err(Error::shape(format!(
                    "{} has {} slices, support volume has {}",
                    support.display(),
                    support_features.depth(),
                    support_image.depth()
                )));
            }
            let support = episode.support().iter().map(|s| support_features.map(s.source_index).clone()).collect();
            EpisodeFeatures { support, query: query_features }
        }
    };
    let result = run_with_features(&episode, &features, &request.config)?;
    let dice = truth.as_ref().map(|t| per_class_dice(&result.masks, t)).transpose()?;
    let sidecar = ResultSidecar::new(&result, &request.config, request.extractor.name(), &episode);
    Ok(SegmentOutcome { result, sidecar, dice })
}

/// Writes the RESULT mask and its sidecar.
pub fn write_result(path: &Path, masks: &LabelMask, sidecar: &ResultSidecar) -> Result<()> {
    io::write_result(path, masks, sidecar)
}

/// Extractor used when none is given on the command line.
pub fn default_extractor() -> BuiltinExtractorSpec {
    phantom::default_extractor()
}
