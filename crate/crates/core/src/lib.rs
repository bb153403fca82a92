//! Speaker diarization with powerset multi-class and multi-label
//! segmentation outputs.
//!
//! * [`timeline`]: segments, annotations, frame matrices and their conversions
//! * [`powerset`]: speaker subsets <-> mutually exclusive powerset classes
//! * [`pit`]: permutation-invariant losses and the Hungarian solver
//! * [`pipeline`]: chunk decoding, embedding clustering, global assembly
//! * [`metrics`]: diarization error rate and corpus statistics
//! * [`io`]: RTTM, UEM, frame matrix, embedding and config files
//! * [`synth`]: synthetic conversations and segmentation outputs
//! * [`cli`]: the `diarkit` command line

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pit;
pub mod powerset;
pub mod synth;
pub mod timeline;

pub use error::{Error, Result};
pub use metrics::{corpus_stats, der, der_multiplicity_oracle, optimal_mapping, CorpusStats, DerReport};
pub use pipeline::{
    agglomerative_cluster, argmax_decode, binarize, run_pipeline, single_speaker_mask, ChunkPrediction,
    Formulation, PipelineConfig,
};
pub use pit::{
    bce, hungarian, multilabel_pit_loss, pairwise_bce_costs, powerset_cross_entropy, powerset_pit_align,
    powerset_pit_loss, CostMatrix, LossResult,
};
pub use powerset::PowersetCodec;
pub use timeline::{derasterize, rasterize, sliding_chunks, Annotation, FrameKind, FrameMatrix, Segment, SpeakerPermutation};
