//! Synthetic conversations and segmentation outputs with known ground truth.
//!
//! Stands in for real corpora and for the segmentation and embedding
//! models: the conversation generator produces turn-taking with a
//! controlled amount of two-speaker overlap, and the chunk generator turns
//! a reference into noisy per-chunk logits or probabilities plus
//! per-speaker embeddings.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ChunkPrediction, Formulation, PipelineConfig};
use crate::timeline::{rasterize, sliding_chunks, Annotation, FrameKind, FrameMatrix, Segment};

/// Logit assigned to the true powerset class before noise.
pub const TRUE_CLASS_LOGIT: f64 = 10.0;

// independent random streams derived from one seed
const CONVERSATION_STREAM: u64 = 1;
const LOGIT_STREAM: u64 = 2;
const EMBEDDING_STREAM: u64 = 3;

const MIN_TURN: f64 = 0.2;
const MAX_TURN: f64 = 30.0;
/// Longest stretch two turns may share, in seconds.
const MAX_OVERLAP: f64 = 2.0;
/// Largest accepted `overlap_target`; with overlaps capped at
/// [`MAX_OVERLAP`] seconds, higher fractions are out of reach for
/// conversational turn lengths.
pub const MAX_OVERLAP_TARGET: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_speakers: usize,
    /// Seconds.
    pub total_duration: f64,
    /// Mean and standard deviation of the log of turn lengths (seconds).
    pub turn_log_mean: f64,
    pub turn_log_sigma: f64,
    /// Mean pause between non-overlapping turns (exponential).
    pub pause_mean: f64,
    /// Target fraction of speech time with two speakers active, in `[0, 0.3]`.
    pub overlap_target: f64,
    /// Standard deviation of the Gaussian noise added to logits or probabilities.
    pub logit_noise: f64,
    pub embedding_dim: usize,
    /// Angular standard deviation (radians) of embeddings around their speaker centre.
    pub embedding_sigma: f64,
    /// Minimum cosine distance between speaker centres.
    pub min_center_distance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_speakers: 3,
            total_duration: 1800.0,
            turn_log_mean: 2.5f64.ln(),
            turn_log_sigma: 0.6,
            pause_mean: 0.5,
            overlap_target: 0.1,
            logit_noise: 0.0,
            embedding_dim: 32,
            embedding_sigma: 0.05,
            min_center_distance: 0.8,
        }
    }
}

impl SynthConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "num_speakers",
        "total_duration",
        "turn_log_mean",
        "turn_log_sigma",
        "pause_mean",
        "overlap_target",
        "logit_noise",
        "embedding_dim",
        "embedding_sigma",
        "min_center_distance",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.num_speakers == 0 {
            return bad("num_speakers must be positive".into());
        }
        if !(self.total_duration.is_finite() && self.total_duration > 0.0) {
            return bad(format!("total_duration must be positive, got {}", self.total_duration));
        }
        if !(self.turn_log_mean.is_finite() && self.turn_log_sigma >= 0.0 && self.pause_mean > 0.0) {
            return bad("turn and pause distribution parameters are out of range".into());
        }
        if !(0.0..=MAX_OVERLAP_TARGET).contains(&self.overlap_target) {
            return bad(format!(
                "overlap_target must lie in [0, {MAX_OVERLAP_TARGET}], got {}",
                self.overlap_target
            ));
        }
        if self.num_speakers == 1 && self.overlap_target > 0.0 {
            return bad("a single speaker cannot overlap with anyone".into());
        }
        if !(self.logit_noise >= 0.0 && self.embedding_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        if !(0.0..=2.0).contains(&self.min_center_distance) {
            return bad(format!(
                "min_center_distance must lie in [0, 2], got {}",
                self.min_center_distance
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub annotation: Annotation,
    /// Speech time with two speakers active over total speech time.
    pub realized_overlap: f64,
}

pub fn speaker_label(i: usize) -> String {
    format!("spk{i:02}")
}

/// Turn-taking conversation. Each turn goes to a different speaker than the
/// previous one; whenever the overlap fraction realised so far is below the
/// target, the next turn starts before the previous one ends. A turn never
/// reaches back past the end of the turn before the previous one, so at
/// most two speakers are ever active at once.
pub fn generate_conversation(config: &SynthConfig) -> Result<Conversation> {
    config.validate()?;
    let mut rng = config.rng(CONVERSATION_STREAM);
    let turn = LogNormal::new(config.turn_log_mean, config.turn_log_sigma)
        .map_err(|e| Error::Infeasible(format!("turn length distribution: {e}")))?;
    let pause = Exp::new(1.0 / config.pause_mean).map_err(|e| Error::Infeasible(format!("pause distribution: {e}")))?;

    let mut annotation = Annotation::new(format!("synth{:04}", config.seed));
    let mut speech = 0.0;
    let mut overlap = 0.0;
    // (start, end, speaker) of the previous turn and end of the one before
    let mut prev: Option<(f64, f64, usize)> = None;
    let mut prev2_end = 0.0f64;

    loop {
        let length = turn.sample(&mut rng).clamp(MIN_TURN, MAX_TURN);
        let speaker = match prev {
            Some((_, _, p)) if config.num_speakers > 1 => {
                let s = rng.random_range(0..config.num_speakers - 1);
                if s >= p {
                    s + 1
                } else {
                    s
                }
            }
            _ => rng.random_range(0..config.num_speakers),
        };
        let fraction = rng.random_range(0.3..0.9);
        let gap = pause.sample(&mut rng);

        let start = match prev {
            Some((prev_start, prev_end, _))
                if config.overlap_target > 0.0 && overlap < config.overlap_target * speech =>
            {
                let room = (prev_end - prev_start.max(prev2_end)).min(length).min(MAX_OVERLAP);
                prev_end - fraction * room
            }
            Some((_, prev_end, _)) => prev_end + gap,
            None => gap,
        };
        let end = (start + length).min(config.total_duration);
        if end - start < MIN_TURN {
            break;
        }
        let prev_end = prev.map_or(0.0, |p| p.1);
        let shared = (prev_end - start).max(0.0);
        overlap += shared;
        speech += (end - start) - shared;
        annotation.insert(Segment::new(start, end)?, speaker_label(speaker));
        prev2_end = prev_end;
        prev = Some((start, end, speaker));
        if end >= config.total_duration {
            break;
        }
    }
    let realized_overlap = if speech > 0.0 { overlap / speech } else { 0.0 };
    if realized_overlap < config.overlap_target - 0.02 {
        log::warn!(
            "realized overlap {realized_overlap:.3} falls short of the {:.3} target (turns too long or recording too short)",
            config.overlap_target
        );
    }
    Ok(Conversation {
        annotation,
        realized_overlap,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Speaker centres on the unit sphere picked by farthest-point selection
/// from random candidates, retried until they are at least
/// `min_distance` apart.
pub fn embedding_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_distance: f64) -> Result<Vec<Vec<f64>>> {
    for _ in 0..32 {
        let candidates: Vec<Vec<f64>> = (0..(16 * count).max(16)).map(|_| random_unit(rng, dim)).collect();
        let mut chosen = vec![candidates[0].clone()];
        while chosen.len() < count {
            let best = candidates
                .iter()
                .map(|c| {
                    let d = chosen.iter().map(|x| cosine_distance(c, x)).fold(f64::INFINITY, f64::min);
                    (d, c)
                })
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .expect("candidates are non-empty");
            chosen.push(best.1.clone());
        }
        let separated = chosen
            .iter()
            .enumerate()
            .all(|(i, a)| chosen[i + 1..].iter().all(|b| cosine_distance(a, b) >= min_distance));
        if separated {
            return Ok(chosen);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place {count} centres in dimension {dim} at cosine distance >= {min_distance}"
    )))
}

/// Rotates `center` by an angle drawn from `N(0, sigma)` towards a random
/// orthogonal direction.
fn perturb(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let z: f64 = StandardNormal.sample(rng);
    let angle = sigma * z;
    let mut u = random_unit(rng, center.len());
    let along = u.iter().zip(center).map(|(a, b)| a * b).sum::<f64>();
    for (x, c) in u.iter_mut().zip(center) {
        *x -= along * c;
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    center
        .iter()
        .zip(&u)
        .map(|(c, x)| angle.cos() * c + angle.sin() * x / norm)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthChunks {
    pub chunks: Vec<ChunkPrediction>,
    /// Speaker centre of every reference label.
    pub centers: BTreeMap<String, Vec<f64>>,
    /// Chunks with more true speakers than local slots.
    pub truncated_chunks: usize,
    /// Frames with more active speakers than the codec's maximum overlap.
    pub truncated_frames: usize,
}

/// Simulated segmentation output for every sliding chunk of `annotation`.
///
/// Local speakers are indexed by order of first activity within the chunk.
/// Powerset chunks get logits of [`TRUE_CLASS_LOGIT`] on the true class and
/// zero elsewhere; multi-label chunks get the binary activity itself. Both
/// then receive Gaussian noise of standard deviation `logit_noise`
/// (probabilities are clamped to `[0, 1]`).
pub fn generate_chunk_predictions(
    annotation: &Annotation,
    config: &SynthConfig,
    pipeline: &PipelineConfig,
) -> Result<SynthChunks> {
    config.validate()?;
    let codec = pipeline.codec.build()?;
    let framing = pipeline.framing;
    let mut noise_rng = config.rng(LOGIT_STREAM);
    let mut emb_rng = config.rng(EMBEDDING_STREAM);
    let noise = Normal::new(0.0, config.logit_noise).map_err(|e| Error::Infeasible(e.to_string()))?;

    let labels = annotation.labels();
    let centers: BTreeMap<String, Vec<f64>> = labels
        .iter()
        .cloned()
        .zip(embedding_centers(
            &mut emb_rng,
            labels.len().max(1),
            config.embedding_dim,
            config.min_center_distance,
        )?)
        .collect();

    let total = annotation
        .extent()
        .map_or(config.total_duration, |e| e.end().max(config.total_duration));
    let k_max = codec.num_speakers();
    let mut out = SynthChunks {
        chunks: Vec::new(),
        centers,
        truncated_chunks: 0,
        truncated_frames: 0,
    };

    for window in sliding_chunks(total, framing.chunk_duration, framing.step)? {
        let local = annotation.crop(&window);
        let mut local_labels = local.labels_by_first_activity();
        if local_labels.len() > k_max {
            out.truncated_chunks += 1;
            local_labels.truncate(k_max);
        }
        let kept = Annotation::from_segments(
            local.uri(),
            local
                .segments()
                .into_iter()
                .filter(|(_, l)| local_labels.contains(l)),
        );
        let mut columns = local_labels.clone();
        columns.extend((columns.len()..k_max).map(|i| format!("\u{0}unused{i}")));
        let target = rasterize(&kept, &columns, &window, framing.frame_duration)?;

        let activities = match pipeline.formulation {
            Formulation::Powerset => {
                let encoded = codec.encode_classes(&target)?;
                out.truncated_frames += encoded.truncated_frames;
                let mut logits = Array2::zeros((target.num_frames(), codec.num_classes()));
                for (t, &c) in encoded.classes.iter().enumerate() {
                    for j in 0..codec.num_classes() {
                        let base = if j == c { TRUE_CLASS_LOGIT } else { 0.0 };
                        logits[[t, j]] = base + noise.sample(&mut noise_rng);
                    }
                }
                target.with_values(logits, FrameKind::Logit)?
            }
            Formulation::MultiLabel => {
                let probs = target
                    .values()
                    .mapv(|y| (y + noise.sample(&mut noise_rng)).clamp(0.0, 1.0));
                target.with_values(probs, FrameKind::Probability)?
            }
        };
        let embeddings = local_labels
            .iter()
            .enumerate()
            .map(|(k, label)| (k, perturb(&mut emb_rng, &out.centers[label], config.embedding_sigma)))
            .collect();
        out.chunks.push(ChunkPrediction::new(activities, embeddings)?);
    }
    Ok(out)
}

/// Convenience for tests and the CLI: `FrameMatrix` of the reference
/// rasterised over `[0, total]`.
pub fn reference_frames(annotation: &Annotation, frame_duration: f64) -> Result<FrameMatrix> {
    let labels = annotation.labels();
    let end = annotation.extent().map_or(frame_duration, |e| e.end());
    rasterize(annotation, &labels, &Segment::new(0.0, end)?, frame_duration)
}
