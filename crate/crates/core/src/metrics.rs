//! Diarization error rate and corpus statistics.
//!
//! The scorer works on exact segment arithmetic: the timeline is cut at
//! every segment, collar and UEM boundary and each elementary interval is
//! scored with the usual multiplicity rules. Reference and hypothesis
//! labels are matched once per file with a maximum-overlap assignment.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pit::max_score_assignment;
use crate::timeline::{sliding_chunks, Annotation, Segment};

/// An error duration split by whether the reference had overlapping
/// speakers at the time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ErrorComponent {
    pub overlap: f64,
    pub non_overlap: f64,
}

impl ErrorComponent {
    pub fn total(&self) -> f64 {
        self.overlap + self.non_overlap
    }

    fn add(&mut self, duration: f64, in_overlap: bool) {
        if in_overlap {
            self.overlap += duration;
        } else {
            self.non_overlap += duration;
        }
    }

    fn accumulate(&mut self, other: &ErrorComponent) {
        self.overlap += other.overlap;
        self.non_overlap += other.non_overlap;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DerReport {
    pub uri: String,
    pub collar: f64,
    pub uem_applied: bool,
    /// Scored reference speech, overlapping speakers counted separately.
    pub total_reference_speech: f64,
    /// Part of `total_reference_speech` where two or more reference speakers talk.
    pub reference_overlap_speech: f64,
    pub false_alarm: ErrorComponent,
    pub missed_detection: ErrorComponent,
    pub speaker_confusion: ErrorComponent,
    pub der: f64,
    pub mapping: BTreeMap<String, String>,
}

impl DerReport {
    pub fn total_error(&self) -> f64 {
        self.false_alarm.total() + self.missed_detection.total() + self.speaker_confusion.total()
    }

    fn finish(&mut self) {
        let errors = self.total_error();
        self.der = if self.total_reference_speech > 0.0 {
            errors / self.total_reference_speech
        } else if errors > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
    }

    /// Corpus-level report: durations are summed, the rate recomputed.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a DerReport>) -> DerReport {
        let mut total = DerReport {
            uri: "TOTAL".into(),
            ..Default::default()
        };
        for r in reports {
            total.collar = r.collar;
            total.uem_applied |= r.uem_applied;
            total.total_reference_speech += r.total_reference_speech;
            total.reference_overlap_speech += r.reference_overlap_speech;
            total.false_alarm.accumulate(&r.false_alarm);
            total.missed_detection.accumulate(&r.missed_detection);
            total.speaker_confusion.accumulate(&r.speaker_confusion);
        }
        total.finish();
        total
    }
}

/// Merges overlapping or touching intervals, returning them sorted.
fn merge_intervals(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn contains(intervals: &[(f64, f64)], x: f64) -> bool {
    let i = intervals.partition_point(|iv| iv.1 <= x);
    i < intervals.len() && intervals[i].0 <= x
}

fn active_in(track: &[Segment], x: f64) -> bool {
    let i = track.partition_point(|s| s.end() <= x);
    i < track.len() && track[i].start() <= x
}

/// Regions excluded by the forgiveness collar: `collar / 2` on each side of
/// every reference segment boundary.
fn collar_zones(reference: &Annotation, collar: f64) -> Vec<(f64, f64)> {
    if collar <= 0.0 {
        return Vec::new();
    }
    let half = collar / 2.0;
    let zones = reference
        .tracks()
        .flat_map(|(_, segs)| segs.iter().flat_map(|s| [s.start(), s.end()]))
        .map(|b| ((b - half).max(0.0), b + half))
        .collect();
    merge_intervals(zones)
}

struct ScoredInterval {
    duration: f64,
    reference: Vec<usize>,
    hypothesis: Vec<usize>,
}

fn check_inputs(reference: &Annotation, hypothesis: &Annotation, collar: f64) -> Result<()> {
    if reference.uri() != hypothesis.uri() {
        return Err(Error::UriMismatch {
            reference: reference.uri().to_string(),
            hypothesis: hypothesis.uri().to_string(),
        });
    }
    if !(collar.is_finite() && collar >= 0.0) {
        return Err(Error::InvalidArgument(format!("collar must be non-negative, got {collar}")));
    }
    Ok(())
}

fn scored_intervals(
    reference: &Annotation,
    hypothesis: &Annotation,
    collar: f64,
    uem: Option<&[Segment]>,
) -> (Vec<String>, Vec<String>, Vec<ScoredInterval>) {
    let ref_labels = reference.labels();
    let hyp_labels = hypothesis.labels();
    let zones = collar_zones(reference, collar);
    let uem = uem.map(|u| merge_intervals(u.iter().map(|s| (s.start(), s.end())).collect()));

    let mut cuts: Vec<f64> = Vec::new();
    for ann in [reference, hypothesis] {
        for (_, segs) in ann.tracks() {
            cuts.extend(segs.iter().flat_map(|s| [s.start(), s.end()]));
        }
    }
    cuts.extend(zones.iter().flat_map(|z| [z.0, z.1]));
    if let Some(u) = &uem {
        cuts.extend(u.iter().flat_map(|z| [z.0, z.1]));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut intervals = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        if contains(&zones, mid) || uem.as_ref().is_some_and(|u| !contains(u, mid)) {
            continue;
        }
        let reference: Vec<usize> = ref_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| active_in(reference.track(l), mid))
            .map(|(i, _)| i)
            .collect();
        let hypothesis: Vec<usize> = hyp_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| active_in(hypothesis.track(l), mid))
            .map(|(i, _)| i)
            .collect();
        if reference.is_empty() && hypothesis.is_empty() {
            continue;
        }
        intervals.push(ScoredInterval {
            duration: b - a,
            reference,
            hypothesis,
        });
    }
    (ref_labels, hyp_labels, intervals)
}

/// Maximum-overlap one-to-one mapping from `co_occurrence` (reference x
/// hypothesis durations). Pairs that never co-occur stay unmapped.
fn mapping_from_overlap(co_occurrence: &Array2<f64>) -> BTreeMap<usize, usize> {
    max_score_assignment(co_occurrence.view())
        .into_iter()
        .filter(|&(r, h)| co_occurrence[[r, h]] > 0.0)
        .collect()
}

fn score(
    uri: &str,
    collar: f64,
    uem_applied: bool,
    ref_labels: &[String],
    hyp_labels: &[String],
    intervals: impl Iterator<Item = (f64, Vec<usize>, Vec<usize>)> + Clone,
) -> DerReport {
    let mut co = Array2::zeros((ref_labels.len(), hyp_labels.len()));
    for (d, r, h) in intervals.clone() {
        for &i in &r {
            for &j in &h {
                co[[i, j]] += d;
            }
        }
    }
    let mapping = mapping_from_overlap(&co);

    let mut report = DerReport {
        uri: uri.to_string(),
        collar,
        uem_applied,
        mapping: mapping
            .iter()
            .map(|(&r, &h)| (ref_labels[r].clone(), hyp_labels[h].clone()))
            .collect(),
        ..Default::default()
    };
    for (d, r, h) in intervals {
        let (n_ref, n_hyp) = (r.len(), h.len());
        let correct = r
            .iter()
            .filter(|i| mapping.get(i).is_some_and(|j| h.contains(j)))
            .count();
        let overlap = n_ref >= 2;
        report.total_reference_speech += n_ref as f64 * d;
        if overlap {
            report.reference_overlap_speech += n_ref as f64 * d;
        }
        report.missed_detection.add(n_ref.saturating_sub(n_hyp) as f64 * d, overlap);
        report.false_alarm.add(n_hyp.saturating_sub(n_ref) as f64 * d, overlap);
        report.speaker_confusion.add((n_ref.min(n_hyp) - correct) as f64 * d, overlap);
    }
    report.finish();
    report
}

/// Diarization error rate of `hypothesis` against `reference`.
///
/// `collar` is the total width of the no-score band centred on each
/// reference boundary. When `uem` is given, only time inside it is scored.
pub fn der(reference: &Annotation, hypothesis: &Annotation, collar: f64, uem: Option<&[Segment]>) -> Result<DerReport> {
    check_inputs(reference, hypothesis, collar)?;
    let (ref_labels, hyp_labels, intervals) = scored_intervals(reference, hypothesis, collar, uem);
    Ok(score(
        reference.uri(),
        collar,
        uem.is_some(),
        &ref_labels,
        &hyp_labels,
        intervals
            .iter()
            .map(|iv| (iv.duration, iv.reference.clone(), iv.hypothesis.clone())),
    ))
}

/// Reference-to-hypothesis label mapping maximising jointly active time.
pub fn optimal_mapping(
    reference: &Annotation,
    hypothesis: &Annotation,
    uem: Option<&[Segment]>,
) -> Result<BTreeMap<String, String>> {
    Ok(der(reference, hypothesis, 0.0, uem)?.mapping)
}

/// Frame-counting DER: the same quantities measured by sampling frame
/// centres at `resolution` seconds. Used to cross-check [`der`].
pub fn der_multiplicity_oracle(
    reference: &Annotation,
    hypothesis: &Annotation,
    collar: f64,
    resolution: f64,
    uem: Option<&[Segment]>,
) -> Result<DerReport> {
    check_inputs(reference, hypothesis, collar)?;
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
    }
    let ref_labels = reference.labels();
    let hyp_labels = hypothesis.labels();
    let mut boundaries: Vec<f64> = reference
        .tracks()
        .flat_map(|(_, segs)| segs.iter().flat_map(|s| [s.start(), s.end()]))
        .collect();
    boundaries.sort_by(f64::total_cmp);

    let end = [reference.extent(), hypothesis.extent()]
        .into_iter()
        .flatten()
        .map(|s| s.end())
        .chain(uem.unwrap_or(&[]).iter().map(|s| s.end()))
        .fold(0.0, f64::max);
    let num_frames = (end / resolution).ceil() as usize;
    let half = collar / 2.0;

    let mut frames = Vec::new();
    for t in 0..num_frames {
        let x = (t as f64 + 0.5) * resolution;
        if let Some(u) = uem {
            if !u.iter().any(|s| s.start() <= x && x < s.end()) {
                continue;
            }
        }
        if collar > 0.0 {
            let i = boundaries.partition_point(|&b| b < x);
            let near = [i.checked_sub(1), Some(i)]
                .into_iter()
                .flatten()
                .filter_map(|k| boundaries.get(k))
                .any(|&b| (x - b).abs() <= half);
            if near {
                continue;
            }
        }
        let r: Vec<usize> = (0..ref_labels.len())
            .filter(|&i| active_in(reference.track(&ref_labels[i]), x))
            .collect();
        let h: Vec<usize> = (0..hyp_labels.len())
            .filter(|&j| active_in(hypothesis.track(&hyp_labels[j]), x))
            .collect();
        if !(r.is_empty() && h.is_empty()) {
            frames.push((resolution, r, h));
        }
    }
    Ok(score(
        reference.uri(),
        collar,
        uem.is_some(),
        &ref_labels,
        &hyp_labels,
        frames.into_iter(),
    ))
}

/// Overlap profile and chunk speaker-count histogram of a corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CorpusStats {
    /// Duration with at least one active speaker.
    pub speech_duration: f64,
    /// `k -> duration with exactly k simultaneous speakers` (k >= 1).
    pub duration_by_count: BTreeMap<usize, f64>,
    /// `duration_by_count[k] / speech_duration`.
    pub overlap_fractions: BTreeMap<usize, f64>,
    pub chunk_duration: f64,
    pub step: f64,
    pub num_chunks: usize,
    /// `number of distinct speakers -> number of chunks`.
    pub chunk_histogram: BTreeMap<usize, usize>,
}

impl CorpusStats {
    /// Fraction of speech time with at least `k` simultaneous speakers.
    pub fn fraction_at_least(&self, k: usize) -> f64 {
        self.overlap_fractions.range(k..).fold(0.0, |acc, (_, f)| acc + f)
    }

    /// Fraction of chunks with strictly fewer than `k` speakers.
    pub fn chunks_fewer_than(&self, k: usize) -> f64 {
        self.chunk_fraction(|n| n < k)
    }

    /// Fraction of chunks with at most `k` speakers.
    pub fn chunks_at_most(&self, k: usize) -> f64 {
        self.chunk_fraction(|n| n <= k)
    }

    fn chunk_fraction(&self, pred: impl Fn(usize) -> bool) -> f64 {
        if self.num_chunks == 0 {
            return 0.0;
        }
        let hits: usize = self.chunk_histogram.iter().filter(|(&n, _)| pred(n)).map(|(_, c)| c).sum();
        hits as f64 / self.num_chunks as f64
    }
}

/// Durations by number of simultaneous speakers, via a boundary sweep.
pub fn speaker_count_durations(annotation: &Annotation) -> BTreeMap<usize, f64> {
    let mut events: Vec<(f64, i32)> = annotation
        .tracks()
        .flat_map(|(_, segs)| segs.iter().flat_map(|s| [(s.start(), 1), (s.end(), -1)]))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = BTreeMap::new();
    let mut active = 0i32;
    let mut last = 0.0;
    for (t, delta) in events {
        if active > 0 && t > last {
            *out.entry(active as usize).or_insert(0.0) += t - last;
        }
        active += delta;
        last = t;
    }
    out
}

/// Overlap fractions and the distribution of distinct speakers per
/// sliding chunk (chunks tile `[0, end of last segment]`).
pub fn corpus_stats(annotations: &[Annotation], chunk_duration: f64, step: f64) -> Result<CorpusStats> {
    if !(chunk_duration > 0.0 && step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "chunk duration and step must be positive, got {chunk_duration} and {step}"
        )));
    }
    let mut stats = CorpusStats {
        chunk_duration,
        step: step.min(chunk_duration),
        ..Default::default()
    };
    for annotation in annotations {
        for (k, d) in speaker_count_durations(annotation) {
            *stats.duration_by_count.entry(k).or_insert(0.0) += d;
            stats.speech_duration += d;
        }
        let Some(extent) = annotation.extent() else { continue };
        for chunk in sliding_chunks(extent.end(), chunk_duration, stats.step)? {
            let speakers: BTreeSet<&str> = annotation
                .tracks()
                .filter(|(_, segs)| segs.iter().any(|s| s.overlap(&chunk) > 0.0))
                .map(|(l, _)| l)
                .collect();
            *stats.chunk_histogram.entry(speakers.len()).or_insert(0) += 1;
            stats.num_chunks += 1;
        }
    }
    if stats.speech_duration > 0.0 {
        stats.overlap_fractions = stats
            .duration_by_count
            .iter()
            .map(|(&k, &d)| (k, d / stats.speech_duration))
            .collect();
    }
    Ok(stats)
}
