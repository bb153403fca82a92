//! Shared domain types: segments, annotations, frame matrices and speaker
//! permutations, plus the time/frame arithmetic that converts between them.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default frame duration in seconds.
pub const DEFAULT_FRAME_DURATION: f64 = 0.010;

/// Slack used when comparing times that come out of floating point
/// frame arithmetic.
pub(crate) const TIME_EPS: f64 = 1e-9;

/// A half-open time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end <= start {
            return Err(Error::InvalidSegment { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Length of the intersection with `other` (zero when disjoint).
    pub fn overlap(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn intersection(&self, other: &Segment) -> Option<Segment> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (end > start).then_some(Segment { start, end })
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.3} --> {:.3}]", self.start, self.end)
    }
}

/// Speaker-labelled segments for one recording.
///
/// Segments carrying the same label are merged when they overlap or touch,
/// so every label owns a sorted list of disjoint segments. Overlap between
/// different labels is kept as is (overlapped speech).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    uri: String,
    tracks: BTreeMap<String, Vec<Segment>>,
}

impl Annotation {
    pub fn new(uri: impl Into<String>) -> Self {
        Self {
            uri: uri.into(),
            tracks: BTreeMap::new(),
        }
    }

    pub fn from_segments<I, S>(uri: impl Into<String>, segments: I) -> Self
    where
        I: IntoIterator<Item = (Segment, S)>,
        S: Into<String>,
    {
        let mut annotation = Self::new(uri);
        for (segment, label) in segments {
            annotation.insert(segment, label);
        }
        annotation
    }

    pub fn uri(&self) -> &str {
        &self.uri
    }

    pub fn set_uri(&mut self, uri: impl Into<String>) {
        self.uri = uri.into();
    }

    /// Adds a segment, merging it with any same-label segment it overlaps
    /// or touches.
    pub fn insert(&mut self, segment: Segment, label: impl Into<String>) {
        let track = self.tracks.entry(label.into()).or_default();
        let pos = track.partition_point(|s| s.start < segment.start);
        track.insert(pos, segment);

        let mut merged: Vec<Segment> = Vec::with_capacity(track.len());
        for seg in track.drain(..) {
            match merged.last_mut() {
                Some(last) if seg.start <= last.end => last.end = last.end.max(seg.end),
                _ => merged.push(seg),
            }
        }
        *track = merged;
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Labels in lexicographic order.
    pub fn labels(&self) -> Vec<String> {
        self.tracks.keys().cloned().collect()
    }

    /// Labels ordered by the start of their first segment (ties by label).
    pub fn labels_by_first_activity(&self) -> Vec<String> {
        let mut labels: Vec<(f64, &String)> = self
            .tracks
            .iter()
            .filter_map(|(label, segs)| segs.first().map(|s| (s.start, label)))
            .collect();
        labels.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        labels.into_iter().map(|(_, l)| l.clone()).collect()
    }

    pub fn track(&self, label: &str) -> &[Segment] {
        self.tracks.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tracks(&self) -> impl Iterator<Item = (&str, &[Segment])> {
        self.tracks.iter().map(|(l, s)| (l.as_str(), s.as_slice()))
    }

    /// All `(segment, label)` pairs sorted by start time, then end, then label.
    pub fn segments(&self) -> Vec<(Segment, String)> {
        let mut all: Vec<(Segment, String)> = self
            .tracks
            .iter()
            .flat_map(|(label, segs)| segs.iter().map(move |s| (*s, label.clone())))
            .collect();
        all.sort_by(|a, b| {
            a.0.start
                .total_cmp(&b.0.start)
                .then(a.0.end.total_cmp(&b.0.end))
                .then_with(|| a.1.cmp(&b.1))
        });
        all
    }

    pub fn len(&self) -> usize {
        self.tracks.values().map(Vec::len).sum()
    }

    /// Time span from the earliest start to the latest end.
    pub fn extent(&self) -> Option<Segment> {
        let start = self
            .tracks
            .values()
            .filter_map(|s| s.first())
            .map(|s| s.start)
            .min_by(f64::total_cmp)?;
        let end = self
            .tracks
            .values()
            .filter_map(|s| s.last())
            .map(|s| s.end)
            .max_by(f64::total_cmp)?;
        Some(Segment { start, end })
    }

    /// Total speech duration with overlap counted once per speaker.
    pub fn total_speech(&self) -> f64 {
        self.tracks.values().flatten().fold(0.0, |acc, s| acc + s.duration())
    }

    /// Same annotation with every label passed through `rename`.
    pub fn rename_labels(&self, mut rename: impl FnMut(&str) -> String) -> Annotation {
        let mut out = Annotation::new(self.uri.clone());
        for (label, segs) in &self.tracks {
            let new_label = rename(label);
            for seg in segs {
                out.insert(*seg, new_label.clone());
            }
        }
        out
    }

    /// Portion of the annotation inside `window`.
    pub fn crop(&self, window: &Segment) -> Annotation {
        let mut out = Annotation::new(self.uri.clone());
        for (label, segs) in &self.tracks {
            for seg in segs {
                if let Some(inter) = seg.intersection(window) {
                    out.insert(inter, label.clone());
                }
            }
        }
        out
    }

    /// Compares two annotations segment by segment with an absolute time
    /// tolerance.
    pub fn approx_eq(&self, other: &Annotation, tol: f64) -> bool {
        self.uri == other.uri
            && self.tracks.len() == other.tracks.len()
            && self.tracks.iter().zip(other.tracks.iter()).all(|((la, sa), (lb, sb))| {
                la == lb
                    && sa.len() == sb.len()
                    && sa.iter().zip(sb).all(|(a, b)| {
                        (a.start - b.start).abs() <= tol && (a.end - b.end).abs() <= tol
                    })
            })
    }
}

/// What the values of a [`FrameMatrix`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameKind {
    BinaryTarget,
    Probability,
    Logit,
}

impl FrameKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameKind::BinaryTarget => "binary-target",
            FrameKind::Probability => "probability",
            FrameKind::Logit => "logit",
        }
    }
}

impl std::str::FromStr for FrameKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary-target" => Ok(FrameKind::BinaryTarget),
            "probability" => Ok(FrameKind::Probability),
            "logit" => Ok(FrameKind::Logit),
            other => Err(Error::InvalidArgument(format!("unknown frame kind {other:?}"))),
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `T x K` frame-aligned matrix. Frame `t` covers
/// `[origin + t * frame_duration, origin + (t + 1) * frame_duration)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    values: Array2<f64>,
    frame_duration: f64,
    origin: f64,
    kind: FrameKind,
}

impl FrameMatrix {
    pub fn new(values: Array2<f64>, frame_duration: f64, origin: f64, kind: FrameKind) -> Result<Self> {
        let (t, k) = values.dim();
        if t == 0 || k == 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame matrix must be non-empty, got {t}x{k}"
            )));
        }
        if !(frame_duration.is_finite() && frame_duration > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame duration must be positive, got {frame_duration}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument(format!("origin must be finite, got {origin}")));
        }
        check_values(values.view(), kind)?;
        Ok(Self {
            values,
            frame_duration,
            origin,
            kind,
        })
    }

    pub fn zeros(num_frames: usize, num_cols: usize, frame_duration: f64, origin: f64) -> Result<Self> {
        Self::new(
            Array2::zeros((num_frames, num_cols)),
            frame_duration,
            origin,
            FrameKind::BinaryTarget,
        )
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_duration(&self) -> f64 {
        self.frame_duration
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.values.row(t)
    }

    /// Absolute start time of frame `t`.
    pub fn frame_start(&self, t: usize) -> f64 {
        self.origin + t as f64 * self.frame_duration
    }

    /// Time span covered by all frames.
    pub fn span(&self) -> Segment {
        Segment {
            start: self.origin,
            end: self.frame_start(self.num_frames()),
        }
    }

    /// Same framing, new values and kind.
    pub fn with_values(&self, values: Array2<f64>, kind: FrameKind) -> Result<Self> {
        Self::new(values, self.frame_duration, self.origin, kind)
    }

    /// Moves column `i` to column `perm.apply(i)`.
    pub fn permute_columns(&self, perm: &SpeakerPermutation) -> Result<Self> {
        let values = permute_columns(self.values.view(), perm)?;
        Ok(Self { values, ..*self })
    }

    pub(crate) fn require_kind(&self, kind: FrameKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {kind} frame matrix, got {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn check_values(values: ArrayView2<'_, f64>, kind: FrameKind) -> Result<()> {
    for ((t, k), &v) in values.indexed_iter() {
        let ok = match kind {
            FrameKind::BinaryTarget => v == 0.0 || v == 1.0,
            FrameKind::Probability => (0.0..=1.0).contains(&v),
            FrameKind::Logit => v.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "value {v} at frame {t}, column {k} is not valid for a {kind} matrix"
            )));
        }
    }
    Ok(())
}

/// Column `i` of `values` becomes column `perm.apply(i)` of the result.
pub fn permute_columns(values: ArrayView2<'_, f64>, perm: &SpeakerPermutation) -> Result<Array2<f64>> {
    if values.ncols() != perm.len() {
        return Err(Error::ShapeMismatch(format!(
            "permutation over {} speakers applied to {} columns",
            perm.len(),
            values.ncols()
        )));
    }
    let mut out = Array2::zeros(values.dim());
    for (i, &j) in perm.mapping().iter().enumerate() {
        out.column_mut(j).assign(&values.column(i));
    }
    Ok(out)
}

/// A bijection on `{0, ..., K-1}`: speaker `i` is relabelled `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SpeakerPermutation(Vec<usize>);

impl SpeakerPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &j in &mapping {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidArgument(format!(
                    "{mapping:?} is not a permutation of 0..{n}"
                )));
            }
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Exchanges `a` and `b`, fixing everything else.
    pub fn swap(n: usize, a: usize, b: usize) -> Result<Self> {
        if a >= n || b >= n {
            return Err(Error::IndexOutOfRange { index: a.max(b), len: n });
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.swap(a, b);
        Ok(Self(mapping))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.0
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Self(inv)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &SpeakerPermutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot compose permutations of sizes {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self(other.0.iter().map(|&j| self.0[j]).collect()))
    }
}

impl TryFrom<Vec<usize>> for SpeakerPermutation {
    type Error = Error;

    fn try_from(mapping: Vec<usize>) -> Result<Self> {
        Self::new(mapping)
    }
}

impl From<SpeakerPermutation> for Vec<usize> {
    fn from(p: SpeakerPermutation) -> Self {
        p.0
    }
}

impl fmt::Display for SpeakerPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Number of whole frames of `frame_duration` that fit in `length`.
pub(crate) fn frame_count(length: f64, frame_duration: f64) -> usize {
    ((length / frame_duration) + TIME_EPS).floor().max(0.0) as usize
}

/// Encodes `annotation` over `window` as a binary frame matrix whose columns
/// follow `speakers`. A speaker is active in a frame when its speech covers
/// at least half of the frame.
pub fn rasterize(
    annotation: &Annotation,
    speakers: &[String],
    window: &Segment,
    frame_duration: f64,
) -> Result<FrameMatrix> {
    if speakers.is_empty() {
        return Err(Error::InvalidArgument("speaker list is empty".into()));
    }
    if !(frame_duration.is_finite() && frame_duration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "frame duration must be positive, got {frame_duration}"
        )));
    }
    let columns: BTreeMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();
    if let Some(label) = annotation.tracks.keys().find(|l| !columns.contains_key(l.as_str())) {
        return Err(Error::UnknownSpeaker(label.clone()));
    }

    let num_frames = frame_count(window.duration(), frame_duration);
    if num_frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} is shorter than one frame of {frame_duration} s"
        )));
    }
    let mut covered = Array2::<f64>::zeros((num_frames, speakers.len()));
    let frame_start = |t: usize| window.start + t as f64 * frame_duration;

    for (label, segs) in &annotation.tracks {
        let k = columns[label.as_str()];
        for seg in segs {
            let lo = ((seg.start - window.start) / frame_duration).floor().max(0.0) as usize;
            let hi = (((seg.end - window.start) / frame_duration).ceil().max(0.0) as usize).min(num_frames);
            for t in lo..hi {
                let frame = Segment {
                    start: frame_start(t),
                    end: frame_start(t + 1),
                };
                covered[[t, k]] += seg.overlap(&frame);
            }
        }
    }

    let half = 0.5 * frame_duration - TIME_EPS;
    let values = covered.mapv(|c| if c >= half { 1.0 } else { 0.0 });
    FrameMatrix::new(values, frame_duration, window.start, FrameKind::BinaryTarget)
}

/// Turns maximal runs of active frames in each column into segments.
pub fn derasterize(frames: &FrameMatrix, speakers: &[String], uri: &str) -> Result<Annotation> {
    frames.require_kind(FrameKind::BinaryTarget)?;
    if frames.num_cols() != speakers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} columns but {} speaker labels",
            frames.num_cols(),
            speakers.len()
        )));
    }
    let mut annotation = Annotation::new(uri);
    for (k, label) in speakers.iter().enumerate() {
        let column = frames.values.column(k);
        let mut run_start: Option<usize> = None;
        for t in 0..=frames.num_frames() {
            let active = t < frames.num_frames() && column[t] == 1.0;
            match (active, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(first)) => {
                    annotation.insert(
                        Segment::new(frames.frame_start(first), frames.frame_start(t))?,
                        label.clone(),
                    );
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Ok(annotation)
}

/// Fixed-length sliding windows over `[0, total_duration]`.
///
/// Windows start every `step` seconds. If the regular grid leaves a tail
/// uncovered, one extra right-aligned window ending at `total_duration` is
/// appended. Audio shorter than one chunk yields a single `[0, total]` window.
pub fn sliding_chunks(total_duration: f64, chunk_duration: f64, step: f64) -> Result<Vec<Segment>> {
    if !(total_duration > 0.0 && chunk_duration > 0.0 && step > 0.0)
        || !(total_duration.is_finite() && chunk_duration.is_finite() && step.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "durations must be positive: total {total_duration}, chunk {chunk_duration}, step {step}"
        )));
    }
    if step > chunk_duration + TIME_EPS {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds chunk duration {chunk_duration}"
        )));
    }
    if total_duration < chunk_duration {
        return Ok(vec![Segment::new(0.0, total_duration)?]);
    }

    let last_start = total_duration - chunk_duration;
    let mut chunks = Vec::new();
    let mut i = 0usize;
    loop {
        let start = i as f64 * step;
        if start > last_start + TIME_EPS {
            break;
        }
        chunks.push(Segment::new(start, start + chunk_duration)?);
        i += 1;
    }
    let covered_until = chunks.last().map_or(0.0, |c| c.end);
    if covered_until < total_duration - TIME_EPS {
        chunks.push(Segment::new(last_start, total_duration)?);
    }
    Ok(chunks)
}
