//! Powerset encoding of speaker activity.
//!
//! With `K` local speakers and at most `O` of them speaking at once, every
//! frame falls in exactly one class: a subset of speakers of size `<= O`.
//! Classes are ordered by cardinality, then lexicographically by their
//! sorted member indices, so `(K=3, O=2)` gives
//! `∅, {0}, {1}, {2}, {0,1}, {0,2}, {1,2}`.

use std::collections::HashMap;

use itertools::Itertools;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::timeline::{FrameKind, FrameMatrix, SpeakerPermutation};

/// Speaker subsets are bitmasks, which bounds the speaker count.
pub const MAX_SPEAKERS: usize = 63;

#[derive(Debug, Clone, PartialEq)]
pub struct PowersetCodec {
    num_speakers: usize,
    max_overlap: usize,
    classes: Vec<u64>,
    index: HashMap<u64, usize>,
}

/// Result of encoding a multi-label matrix: one class per frame, plus the
/// number of frames whose active set had to be truncated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFrames {
    pub classes: Vec<usize>,
    pub truncated_frames: usize,
}

impl PowersetCodec {
    pub fn new(num_speakers: usize, max_overlap: usize) -> Result<Self> {
        if num_speakers == 0 {
            return Err(Error::InvalidArgument("number of speakers must be positive".into()));
        }
        if num_speakers > MAX_SPEAKERS {
            return Err(Error::InvalidArgument(format!(
                "at most {MAX_SPEAKERS} speakers are supported, got {num_speakers}"
            )));
        }
        if max_overlap > num_speakers {
            return Err(Error::InvalidArgument(format!(
                "max overlap {max_overlap} exceeds number of speakers {num_speakers}"
            )));
        }
        let classes: Vec<u64> = (0..=max_overlap)
            .flat_map(|size| (0..num_speakers).combinations(size))
            .map(|members| members.iter().fold(0u64, |mask, &s| mask | (1 << s)))
            .collect();
        let index = classes.iter().enumerate().map(|(c, &m)| (m, c)).collect();
        Ok(Self {
            num_speakers,
            max_overlap,
            classes,
            index,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn max_overlap(&self) -> usize {
        self.max_overlap
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Sorted speaker indices of class `class_index`.
    pub fn members(&self, class_index: usize) -> Result<Vec<usize>> {
        let mask = self.mask(class_index)?;
        Ok((0..self.num_speakers).filter(|s| mask & (1 << s) != 0).collect())
    }

    /// Member lists of every class, in class order.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        (0..self.num_classes())
            .map(|c| self.members(c).expect("class index in range"))
            .collect()
    }

    fn mask(&self, class_index: usize) -> Result<u64> {
        self.classes.get(class_index).copied().ok_or(Error::IndexOutOfRange {
            index: class_index,
            len: self.classes.len(),
        })
    }

    /// Class of the active set in `frame`. Returns the class and whether the
    /// active set was truncated to its `max_overlap` lowest-index speakers.
    pub fn encode_frame_checked(&self, frame: &[f64]) -> Result<(usize, bool)> {
        if frame.len() != self.num_speakers {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} values, codec expects {}",
                frame.len(),
                self.num_speakers
            )));
        }
        let mut mask = 0u64;
        let mut active = 0usize;
        let mut truncated = false;
        for (s, &v) in frame.iter().enumerate() {
            if v == 1.0 {
                if active < self.max_overlap {
                    mask |= 1 << s;
                    active += 1;
                } else {
                    truncated = true;
                }
            } else if v != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "multi-label frame value {v} is not binary"
                )));
            }
        }
        Ok((self.index[&mask], truncated))
    }

    pub fn encode_frame(&self, frame: &[f64]) -> Result<usize> {
        self.encode_frame_checked(frame).map(|(c, _)| c)
    }

    pub fn decode_class(&self, class_index: usize) -> Result<Vec<f64>> {
        let mask = self.mask(class_index)?;
        Ok((0..self.num_speakers)
            .map(|s| if mask & (1 << s) != 0 { 1.0 } else { 0.0 })
            .collect())
    }

    /// Class permutation induced by relabelling speaker `s` as `perm(s)`.
    pub fn induced_class_permutation(&self, perm: &SpeakerPermutation) -> Result<Vec<usize>> {
        if perm.len() != self.num_speakers {
            return Err(Error::ShapeMismatch(format!(
                "permutation over {} speakers, codec has {}",
                perm.len(),
                self.num_speakers
            )));
        }
        Ok(self
            .classes
            .iter()
            .map(|&mask| {
                let image = (0..self.num_speakers)
                    .filter(|s| mask & (1 << s) != 0)
                    .fold(0u64, |m, s| m | (1 << perm.apply(s)));
                self.index[&image]
            })
            .collect())
    }

    /// Per-frame classes of a binary multi-label matrix with `K` columns.
    pub fn encode_classes(&self, frames: &FrameMatrix) -> Result<EncodedFrames> {
        frames.require_kind(FrameKind::BinaryTarget)?;
        if frames.num_cols() != self.num_speakers {
            return Err(Error::ShapeMismatch(format!(
                "multi-label matrix has {} columns, codec expects {}",
                frames.num_cols(),
                self.num_speakers
            )));
        }
        let mut classes = Vec::with_capacity(frames.num_frames());
        let mut truncated_frames = 0;
        for row in frames.values().rows() {
            let (c, truncated) = self.encode_frame_checked(row.as_slice().expect("standard layout"))?;
            classes.push(c);
            truncated_frames += usize::from(truncated);
        }
        Ok(EncodedFrames {
            classes,
            truncated_frames,
        })
    }

    /// One-hot powerset matrix (`num_classes` columns) of a multi-label matrix.
    pub fn encode_matrix(&self, frames: &FrameMatrix) -> Result<FrameMatrix> {
        let encoded = self.encode_classes(frames)?;
        let mut values = Array2::zeros((frames.num_frames(), self.num_classes()));
        for (t, &c) in encoded.classes.iter().enumerate() {
            values[[t, c]] = 1.0;
        }
        frames.with_values(values, FrameKind::BinaryTarget)
    }

    /// Multi-label matrix from per-frame class indices.
    pub fn decode_classes(&self, classes: &[usize], frame_duration: f64, origin: f64) -> Result<FrameMatrix> {
        let mut values = Array2::zeros((classes.len(), self.num_speakers));
        for (t, &c) in classes.iter().enumerate() {
            let mask = self.mask(c)?;
            for s in 0..self.num_speakers {
                if mask & (1 << s) != 0 {
                    values[[t, s]] = 1.0;
                }
            }
        }
        FrameMatrix::new(values, frame_duration, origin, FrameKind::BinaryTarget)
    }

    /// Class indices held by a powerset matrix: either one-hot rows over
    /// `num_classes` columns, or a single column of class indices.
    pub fn classes_of(&self, frames: &FrameMatrix) -> Result<Vec<usize>> {
        let values = frames.values();
        if frames.num_cols() == self.num_classes() {
            values
                .rows()
                .into_iter()
                .enumerate()
                .map(|(t, row)| {
                    let hot: Vec<usize> = row
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(c, _)| c)
                        .collect();
                    match (hot.as_slice(), row.iter().all(|&v| v == 0.0 || v == 1.0)) {
                        ([c], true) => Ok(*c),
                        _ => Err(Error::InvalidArgument(format!("frame {t} is not one-hot"))),
                    }
                })
                .collect()
        } else if frames.num_cols() == 1 {
            values
                .column(0)
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < self.num_classes() {
                        Ok(v as usize)
                    } else {
                        Err(Error::InvalidArgument(format!(
                            "frame {t}: {v} is not a class index below {}",
                            self.num_classes()
                        )))
                    }
                })
                .collect()
        } else {
            Err(Error::ShapeMismatch(format!(
                "powerset matrix has {} columns, codec expects {} (one-hot) or 1 (indices)",
                frames.num_cols(),
                self.num_classes()
            )))
        }
    }

    pub fn decode_matrix(&self, frames: &FrameMatrix) -> Result<FrameMatrix> {
        let classes = self.classes_of(frames)?;
        self.decode_classes(&classes, frames.frame_duration(), frames.origin())
    }
}
