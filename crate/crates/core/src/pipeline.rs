//! Chunk-level segmentation stitched into a global diarization.
//!
//! Each sliding-window chunk is decoded into local speaker activity
//! (thresholding for multi-label outputs, argmax for powerset logits).
//! Local speakers with enough single-speaker frames contribute their
//! embedding to an agglomerative clustering, and the clustered chunks are
//! voted onto a global frame grid.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pit::argmax;
use crate::powerset::PowersetCodec;
use crate::timeline::{derasterize, Annotation, FrameKind, FrameMatrix, Segment, DEFAULT_FRAME_DURATION, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    #[serde(alias = "multilabel")]
    MultiLabel,
    Powerset,
}

impl Formulation {
    /// Frame kind the segmentation model emits under this formulation.
    pub fn activity_kind(&self) -> FrameKind {
        match self {
            Formulation::MultiLabel => FrameKind::Probability,
            Formulation::Powerset => FrameKind::Logit,
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel" | "multi-label" => Ok(Formulation::MultiLabel),
            "powerset" => Ok(Formulation::Powerset),
            other => Err(Error::InvalidArgument(format!("unknown formulation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecParams {
    pub num_speakers: usize,
    pub max_overlap: usize,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            num_speakers: 3,
            max_overlap: 2,
        }
    }
}

impl CodecParams {
    pub fn build(&self) -> Result<PowersetCodec> {
        PowersetCodec::new(self.num_speakers, self.max_overlap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Framing {
    pub chunk_duration: f64,
    pub step: f64,
    pub frame_duration: f64,
}

impl Default for Framing {
    fn default() -> Self {
        Self {
            chunk_duration: 5.0,
            step: 0.5,
            frame_duration: DEFAULT_FRAME_DURATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub formulation: Formulation,
    /// Only meaningful for the multi-label formulation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_threshold: Option<f64>,
    /// Maximum cosine distance between two centroids for them to merge.
    pub clustering_threshold: f64,
    pub min_embedding_frames: usize,
    pub codec: CodecParams,
    pub framing: Framing,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            formulation: Formulation::Powerset,
            detection_threshold: None,
            clustering_threshold: 0.5,
            min_embedding_frames: 10,
            codec: CodecParams::default(),
            framing: Framing::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.formulation, self.detection_threshold) {
            (Formulation::Powerset, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "detection_threshold is not allowed with the powerset formulation (decoding uses argmax)".into(),
                ))
            }
            (Formulation::MultiLabel, None) => {
                return Err(Error::InvalidConfig(
                    "the multi-label formulation requires a detection_threshold".into(),
                ))
            }
            (Formulation::MultiLabel, Some(theta)) if !(0.0..=1.0).contains(&theta) => {
                return Err(Error::InvalidConfig(format!(
                    "detection_threshold must lie in [0, 1], got {theta}"
                )))
            }
            _ => {}
        }
        if !(self.clustering_threshold.is_finite() && self.clustering_threshold >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clustering_threshold must be a non-negative number, got {}",
                self.clustering_threshold
            )));
        }
        let f = &self.framing;
        if !(f.chunk_duration > 0.0 && f.step > 0.0 && f.frame_duration > 0.0) {
            return Err(Error::InvalidConfig("framing durations must be positive".into()));
        }
        if f.step > f.chunk_duration {
            return Err(Error::InvalidConfig(format!(
                "step {} exceeds chunk duration {}",
                f.step, f.chunk_duration
            )));
        }
        self.codec
            .build()
            .map_err(|e| Error::InvalidConfig(format!("codec: {e}")))?;
        Ok(())
    }
}

/// Segmentation output for one chunk, with optional embeddings keyed by
/// local speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPrediction {
    chunk: Segment,
    activities: FrameMatrix,
    embeddings: BTreeMap<usize, Vec<f64>>,
}

impl ChunkPrediction {
    pub fn new(activities: FrameMatrix, embeddings: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        if !matches!(activities.kind(), FrameKind::Probability | FrameKind::Logit) {
            return Err(Error::InvalidArgument(format!(
                "chunk activities must be probabilities or logits, got {}",
                activities.kind()
            )));
        }
        let chunk = Segment::new(activities.origin(), activities.span().end())?;
        let dims: Vec<usize> = embeddings.values().map(Vec::len).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "chunk at {:.3} s has embeddings of differing dimensions {dims:?}",
                chunk.start()
            )));
        }
        Ok(Self {
            chunk,
            activities,
            embeddings,
        })
    }

    pub fn chunk(&self) -> Segment {
        self.chunk
    }

    pub fn activities(&self) -> &FrameMatrix {
        &self.activities
    }

    pub fn embeddings(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.embeddings
    }
}

/// Thresholds probabilities: active iff strictly above `threshold`.
pub fn binarize(activities: &FrameMatrix, threshold: f64) -> Result<FrameMatrix> {
    activities.require_kind(FrameKind::Probability)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} is outside [0, 1]")));
    }
    let values = activities.values().mapv(|p| if p > threshold { 1.0 } else { 0.0 });
    activities.with_values(values, FrameKind::BinaryTarget)
}

/// Most likely powerset class per frame, decoded to multi-label activity.
pub fn argmax_decode(codec: &PowersetCodec, logits: &FrameMatrix) -> Result<FrameMatrix> {
    if logits.num_cols() != codec.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} columns, codec has {} classes",
            logits.num_cols(),
            codec.num_classes()
        )));
    }
    let classes: Vec<usize> = logits.values().axis_iter(Axis(0)).map(argmax).collect();
    codec.decode_classes(&classes, logits.frame_duration(), logits.origin())
}

/// Frames where `local_speaker` is the only active speaker.
pub fn single_speaker_mask(frames: &FrameMatrix, local_speaker: usize) -> Result<Vec<bool>> {
    frames.require_kind(FrameKind::BinaryTarget)?;
    if local_speaker >= frames.num_cols() {
        return Err(Error::IndexOutOfRange {
            index: local_speaker,
            len: frames.num_cols(),
        });
    }
    Ok(frames
        .values()
        .axis_iter(Axis(0))
        .map(|row| row[local_speaker] == 1.0 && row.sum() == 1.0)
        .collect())
}

/// Flat clustering produced by [`agglomerative_cluster`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster of each input, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Unit-norm centroid of each cluster.
    pub centroids: Vec<Vec<f64>>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Agglomerator {
    sums: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    active: Vec<bool>,
    // nearest neighbour among active clusters with a larger id; `nn_dist`
    // is a lower bound on the true distance, exact when `exact` is set
    nn: Vec<usize>,
    nn_dist: Vec<f64>,
    exact: Vec<bool>,
}

impl Agglomerator {
    fn distance(&self, a: usize, b: usize) -> f64 {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        1.0 - dot(&self.centroids[lo], &self.centroids[hi])
    }

    fn refresh(&mut self, i: usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in i + 1..self.active.len() {
            if self.active[j] {
                let d = self.distance(i, j);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        self.nn_dist[i] = best.0;
        self.nn[i] = best.1;
        self.exact[i] = true;
    }

    fn merge(&mut self, a: usize, b: usize) {
        let absorbed = std::mem::take(&mut self.sums[b]);
        for (s, x) in self.sums[a].iter_mut().zip(&absorbed) {
            *s += x;
        }
        self.centroids[a] = normalized(&self.sums[a]).unwrap_or_else(|| vec![0.0; self.sums[a].len()]);
        self.active[b] = false;

        for i in 0..a {
            if !self.active[i] {
                continue;
            }
            let d = self.distance(i, a);
            if d < self.nn_dist[i] {
                self.nn[i] = a;
                self.nn_dist[i] = d;
                self.exact[i] = true;
            } else if self.nn[i] == a || self.nn[i] == b {
                self.exact[i] = false;
            } else if d == self.nn_dist[i] && self.exact[i] && a < self.nn[i] {
                self.nn[i] = a;
            }
        }
        for i in a + 1..b {
            if self.active[i] && self.nn[i] == b {
                self.exact[i] = false;
            }
        }
        self.refresh(a);
    }
}

/// Centroid-linkage agglomerative clustering on cosine distance.
///
/// Embeddings are unit-normalised; a cluster's centroid is the normalised
/// mean of its members. The closest pair of centroids is merged while its
/// distance is at most `threshold`; ties go to the lowest pair of cluster
/// ids (a merged cluster keeps the smaller id).
pub fn agglomerative_cluster(embeddings: &[Vec<f64>], threshold: f64) -> Result<Clustering> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot cluster an empty set of embeddings".into()))?;
    let dim = first.len();
    let mut units = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding {i} has dimension {}, expected {dim}",
                e.len()
            )));
        }
        units.push(normalized(e).ok_or_else(|| {
            Error::InvalidArgument(format!("embedding {i} has zero or non-finite norm"))
        })?);
    }
    let n = units.len();
    let mut agg = Agglomerator {
        sums: units.clone(),
        centroids: units,
        active: vec![true; n],
        nn: vec![usize::MAX; n],
        nn_dist: vec![f64::INFINITY; n],
        exact: vec![true; n],
    };
    for i in 0..n {
        agg.refresh(i);
    }

    let mut parent: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if agg.active[i] && agg.nn_dist[i].is_finite() {
                match best {
                    Some(b) if agg.nn_dist[b] <= agg.nn_dist[i] => {}
                    _ => best = Some(i),
                }
            }
        }
        let Some(a) = best else { break };
        if !agg.exact[a] {
            agg.refresh(a);
            continue;
        }
        if agg.nn_dist[a] > threshold {
            break;
        }
        let b = agg.nn[a];
        parent[b] = a;
        agg.merge(a, b);
    }

    fn root(parent: &[usize], mut i: usize) -> usize {
        while parent[i] != i {
            i = parent[i];
        }
        i
    }
    let mut compact: BTreeMap<usize, usize> = BTreeMap::new();
    let mut centroids = Vec::new();
    let labels = (0..n)
        .map(|i| {
            let r = root(&parent, i);
            *compact.entry(r).or_insert_with(|| {
                centroids.push(agg.centroids[r].clone());
                centroids.len() - 1
            })
        })
        .collect();
    Ok(Clustering { labels, centroids })
}

/// Global cluster of each clustered local speaker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterAssignment {
    /// `(chunk index, local speaker) -> cluster id`
    pub assignments: BTreeMap<(usize, usize), usize>,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    pub chunks: usize,
    /// Local speakers active in at least one decoded frame.
    pub active_local_speakers: usize,
    pub embedded_local_speakers: usize,
    /// Active local speakers without a usable embedding; their activity is
    /// left out of the output.
    pub dropped_local_speakers: usize,
    pub clusters: usize,
    pub max_active_per_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub annotation: Annotation,
    pub assignment: ClusterAssignment,
    pub diagnostics: Diagnostics,
}

fn decode_chunk(chunk: &ChunkPrediction, config: &PipelineConfig, codec: &PowersetCodec) -> Result<FrameMatrix> {
    let activities = &chunk.activities;
    match config.formulation {
        Formulation::MultiLabel => {
            if activities.num_cols() != codec.num_speakers() {
                return Err(Error::ShapeMismatch(format!(
                    "chunk at {:.3} s has {} columns, expected {} speakers",
                    chunk.chunk.start(),
                    activities.num_cols(),
                    codec.num_speakers()
                )));
            }
            binarize(activities, config.detection_threshold.unwrap_or(0.5))
        }
        Formulation::Powerset => {
            activities.require_kind(FrameKind::Logit)?;
            argmax_decode(codec, activities)
        }
    }
}

/// Runs decode, embedding selection, clustering and global assembly.
pub fn run_pipeline(chunks: &[ChunkPrediction], config: &PipelineConfig, uri: &str) -> Result<PipelineOutput> {
    config.validate()?;
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("no chunks to process".into()));
    }
    if chunks.windows(2).any(|w| w[1].chunk.start() < w[0].chunk.start()) {
        return Err(Error::InvalidArgument("chunks must be sorted by start time".into()));
    }
    let codec = config.codec.build()?;
    let mut diagnostics = Diagnostics {
        chunks: chunks.len(),
        ..Default::default()
    };

    // decode and pick local speakers to embed
    let decoded = chunks
        .iter()
        .map(|c| decode_chunk(c, config, &codec))
        .collect::<Result<Vec<_>>>()?;
    let mut keys = Vec::new();
    let mut vectors = Vec::new();
    for (c, (chunk, binary)) in chunks.iter().zip(&decoded).enumerate() {
        let per_frame_max = binary
            .values()
            .axis_iter(Axis(0))
            .map(|r| r.sum() as usize)
            .max()
            .unwrap_or(0);
        diagnostics.max_active_per_frame = diagnostics.max_active_per_frame.max(per_frame_max);
        for k in 0..binary.num_cols() {
            if !binary.values().column(k).iter().any(|&v| v == 1.0) {
                continue;
            }
            diagnostics.active_local_speakers += 1;
            let clean_frames = single_speaker_mask(binary, k)?.into_iter().filter(|&m| m).count();
            match chunk.embeddings.get(&k) {
                Some(e) if clean_frames >= config.min_embedding_frames => {
                    keys.push((c, k));
                    vectors.push(e.clone());
                }
                _ => {
                    log::debug!(
                        "dropping local speaker {k} of chunk {c} ({clean_frames} single-speaker frames)"
                    );
                    diagnostics.dropped_local_speakers += 1;
                }
            }
        }
    }
    diagnostics.embedded_local_speakers = keys.len();
    if diagnostics.dropped_local_speakers > 0 {
        log::warn!(
            "{} local speakers had no usable embedding and were dropped",
            diagnostics.dropped_local_speakers
        );
    }

    if vectors.is_empty() {
        return if diagnostics.active_local_speakers == 0 {
            Ok(PipelineOutput {
                annotation: Annotation::new(uri),
                assignment: ClusterAssignment::default(),
                diagnostics,
            })
        } else {
            Err(Error::NoSpeakersFound)
        };
    }

    let clustering = agglomerative_cluster(&vectors, config.clustering_threshold)?;
    diagnostics.clusters = clustering.num_clusters();
    let assignment = ClusterAssignment {
        assignments: keys.iter().copied().zip(clustering.labels.iter().copied()).collect(),
        centroids: clustering.centroids.clone(),
    };

    let annotation = assemble(chunks, &decoded, &assignment, config.framing.frame_duration, uri)?;
    Ok(PipelineOutput {
        annotation,
        assignment,
        diagnostics,
    })
}

/// Votes clustered chunk activity onto a global frame grid: a cluster is
/// active in a frame when at least half of the chunks covering that frame
/// mark it active.
fn assemble(
    chunks: &[ChunkPrediction],
    decoded: &[FrameMatrix],
    assignment: &ClusterAssignment,
    frame_duration: f64,
    uri: &str,
) -> Result<Annotation> {
    let num_clusters = assignment.centroids.len();
    let end = chunks.iter().map(|c| c.chunk.end()).fold(0.0, f64::max);
    let num_frames = ((end / frame_duration) - TIME_EPS).ceil().max(1.0) as usize;
    let mut coverage = vec![0u32; num_frames];
    let mut votes = Array2::<u32>::zeros((num_frames, num_clusters));

    let mut row_clusters = Vec::with_capacity(num_clusters);
    for (c, binary) in decoded.iter().enumerate() {
        let local_to_cluster: Vec<Option<usize>> = (0..binary.num_cols())
            .map(|k| assignment.assignments.get(&(c, k)).copied())
            .collect();
        for (t, row) in binary.values().axis_iter(Axis(0)).enumerate() {
            let center = binary.frame_start(t) + 0.5 * binary.frame_duration();
            let g = (center / frame_duration).floor() as usize;
            if g >= num_frames {
                continue;
            }
            coverage[g] += 1;
            row_clusters.clear();
            for (k, cluster) in local_to_cluster.iter().enumerate() {
                if let (Some(cl), true) = (cluster, row[k] == 1.0) {
                    if !row_clusters.contains(cl) {
                        row_clusters.push(*cl);
                    }
                }
            }
            for &cl in &row_clusters {
                votes[[g, cl]] += 1;
            }
        }
    }

    let mut grid = Array2::<f64>::zeros((num_frames, num_clusters.max(1)));
    for g in 0..num_frames {
        for cl in 0..num_clusters {
            if coverage[g] > 0 && 2 * votes[[g, cl]] >= coverage[g] {
                grid[[g, cl]] = 1.0;
            }
        }
    }
    let grid = FrameMatrix::new(grid, frame_duration, 0.0, FrameKind::BinaryTarget)?;
    let temp: Vec<String> = (0..num_clusters.max(1)).map(|c| format!("cluster{c}")).collect();
    let raw = derasterize(&grid, &temp, uri)?;
    let order: BTreeMap<String, String> = raw
        .labels_by_first_activity()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, format!("SPEAKER_{i:02}")))
        .collect();
    Ok(raw.rename_labels(|l| order[l].clone()))
}
