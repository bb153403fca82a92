//! Text formats.
//!
//! * RTTM: `SPEAKER <uri> <channel> <onset> <duration> <NA> <NA> <label> <NA> <NA>`,
//!   exactly ten whitespace-separated tokens per line.
//! * UEM: `<uri> <channel> <start> <end>`.
//! * Frame matrix: a header `T K frame_duration origin kind` followed by `T`
//!   lines of `K` numbers; `kind` is `binary-target`, `probability` or `logit`.
//! * Embeddings: `<chunk_start> <local_speaker> <v_1> ... <v_d>` per line,
//!   with the same `d` on every line.
//! * Pipeline configuration: TOML (see [`PipelineConfig`]).
//!
//! Blank lines and lines starting with `#` are ignored everywhere. Numbers
//! are written with six decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::metrics::{CorpusStats, DerReport};
use crate::pipeline::{ChunkPrediction, PipelineConfig};
use crate::synth::SynthConfig;
use crate::timeline::{Annotation, FrameKind, FrameMatrix, Segment};

pub const NA: &str = "<NA>";
pub const CHUNK_EXTENSION: &str = "frames";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

/// Reads a UTF-8 text file.
pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    String::from_utf8(bytes).map_err(|e| Error::parse(path.display().to_string(), 0, format!("not UTF-8: {e}")))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn number(token: &str, what: &str, context: &str, line: usize) -> Result<f64> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(context, line, format!("invalid {what} {token:?}")))
}

pub fn parse_rttm(text: &str) -> Result<BTreeMap<String, Annotation>> {
    parse_rttm_named(text, "rttm")
}

/// Like [`parse_rttm`], with `context` used in error messages.
pub fn parse_rttm_named(text: &str, context: &str) -> Result<BTreeMap<String, Annotation>> {
    let mut out: BTreeMap<String, Annotation> = BTreeMap::new();
    for (line, content) in content_lines(text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(Error::parse(
                context,
                line,
                format!("expected 10 fields, found {}", tokens.len()),
            ));
        }
        if tokens[0] != "SPEAKER" {
            log::warn!("{context}:{line}: ignoring {} line", tokens[0]);
            continue;
        }
        let onset = number(tokens[3], "onset", context, line)?;
        let duration = number(tokens[4], "duration", context, line)?;
        if onset < 0.0 || duration <= 0.0 {
            return Err(Error::parse(
                context,
                line,
                format!("onset must be >= 0 and duration > 0, got {onset} and {duration}"),
            ));
        }
        let segment = Segment::new(onset, onset + duration).map_err(|e| Error::parse(context, line, e.to_string()))?;
        let uri = tokens[1];
        out.entry(uri.to_string())
            .or_insert_with(|| Annotation::new(uri))
            .insert(segment, tokens[7]);
    }
    Ok(out)
}

pub fn write_rttm<'a>(annotations: impl IntoIterator<Item = &'a Annotation>) -> String {
    let mut out = String::new();
    for annotation in annotations {
        for (seg, label) in annotation.segments() {
            writeln!(
                out,
                "SPEAKER {} 1 {:.6} {:.6} {NA} {NA} {} {NA} {NA}",
                annotation.uri(),
                seg.start(),
                seg.duration(),
                label
            )
            .expect("writing to a String");
        }
    }
    out
}

pub fn parse_uem(text: &str) -> Result<BTreeMap<String, Vec<Segment>>> {
    let mut out: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (line, content) in content_lines(text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(Error::parse("uem", line, format!("expected 4 fields, found {}", tokens.len())));
        }
        let start = number(tokens[2], "start", "uem", line)?;
        let end = number(tokens[3], "end", "uem", line)?;
        let seg = Segment::new(start, end).map_err(|e| Error::parse("uem", line, e.to_string()))?;
        out.entry(tokens[0].to_string()).or_default().push(seg);
    }
    Ok(out)
}

pub fn write_uem(regions: &BTreeMap<String, Vec<Segment>>) -> String {
    let mut out = String::new();
    for (uri, segs) in regions {
        for s in segs {
            writeln!(out, "{uri} 1 {:.6} {:.6}", s.start(), s.end()).expect("writing to a String");
        }
    }
    out
}

pub fn parse_frame_matrix(text: &str, context: &str) -> Result<FrameMatrix> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(context, 0, "missing header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 {
        return Err(Error::parse(
            context,
            hline,
            "header must be `T K frame_duration origin kind`",
        ));
    }
    let dim = |tok: &str, what: &str| {
        tok.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::parse(context, hline, format!("invalid {what} {tok:?}")))
    };
    let num_frames = dim(h[0], "frame count")?;
    let num_cols = dim(h[1], "column count")?;
    let frame_duration = number(h[2], "frame duration", context, hline)?;
    let origin = number(h[3], "origin", context, hline)?;
    let kind: FrameKind = h[4]
        .parse()
        .map_err(|e: Error| Error::parse(context, hline, e.to_string()))?;

    let mut values = Vec::with_capacity(num_frames.saturating_mul(num_cols).min(1 << 24));
    let mut rows = 0usize;
    for (line, content) in lines {
        if rows == num_frames {
            return Err(Error::parse(context, line, format!("more than the declared {num_frames} rows")));
        }
        let before = values.len();
        for tok in content.split_whitespace() {
            values.push(number(tok, "value", context, line)?);
        }
        if values.len() - before != num_cols {
            return Err(Error::parse(
                context,
                line,
                format!("expected {num_cols} values, found {}", values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != num_frames {
        return Err(Error::parse(
            context,
            0,
            format!("declared {num_frames} rows, found {rows}"),
        ));
    }
    let values = Array2::from_shape_vec((num_frames, num_cols), values).expect("shape checked above");
    FrameMatrix::new(values, frame_duration, origin, kind).map_err(|e| Error::parse(context, 0, e.to_string()))
}

pub fn write_frame_matrix(m: &FrameMatrix) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{} {} {:.6} {:.6} {}",
        m.num_frames(),
        m.num_cols(),
        m.frame_duration(),
        m.origin(),
        m.kind()
    )
    .expect("writing to a String");
    for row in m.values().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub chunk_start: f64,
    pub local_speaker: usize,
    pub vector: Vec<f64>,
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (line, content) in content_lines(text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(Error::parse("embeddings", line, "expected chunk start, speaker and a vector"));
        }
        let chunk_start = number(tokens[0], "chunk start", "embeddings", line)?;
        let local_speaker = tokens[1]
            .parse::<usize>()
            .map_err(|_| Error::parse("embeddings", line, format!("invalid speaker index {:?}", tokens[1])))?;
        let vector = tokens[2..]
            .iter()
            .map(|t| number(t, "value", "embeddings", line))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            if first.vector.len() != vector.len() {
                return Err(Error::parse(
                    "embeddings",
                    line,
                    format!("dimension {} differs from {}", vector.len(), first.vector.len()),
                ));
            }
        }
        out.push(EmbeddingRecord {
            chunk_start,
            local_speaker,
            vector,
        });
    }
    Ok(out)
}

pub fn write_embeddings(records: &[EmbeddingRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "{:.6} {}", r.chunk_start, r.local_speaker).expect("writing to a String");
        for v in &r.vector {
            write!(out, " {v:.6}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// Chunk starts are matched at microsecond precision.
fn time_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Writes each chunk as `chunk_NNNNN.frames` plus a shared `embeddings.txt`.
pub fn write_chunk_dir(dir: &Path, chunks: &[ChunkPrediction]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        fs::write(
            dir.join(format!("chunk_{i:05}.{CHUNK_EXTENSION}")),
            write_frame_matrix(chunk.activities()),
        )?;
        for (&k, v) in chunk.embeddings() {
            records.push(EmbeddingRecord {
                chunk_start: chunk.chunk().start(),
                local_speaker: k,
                vector: v.clone(),
            });
        }
    }
    fs::write(dir.join(EMBEDDINGS_FILE), write_embeddings(&records))?;
    Ok(())
}

/// Loads every `*.frames` file in `dir` (sorted by chunk start) and attaches
/// embeddings from `embeddings.txt` when present.
pub fn read_chunk_dir(dir: &Path) -> Result<Vec<ChunkPrediction>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CHUNK_EXTENSION))
        .collect();
    paths.sort();

    let mut by_start: BTreeMap<i64, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let emb_path = dir.join(EMBEDDINGS_FILE);
    if emb_path.exists() {
        for r in parse_embeddings(&read_text(&emb_path)?)? {
            by_start
                .entry(time_key(r.chunk_start))
                .or_default()
                .insert(r.local_speaker, r.vector);
        }
    }

    let mut chunks = Vec::with_capacity(paths.len());
    for p in &paths {
        let m = parse_frame_matrix(&read_text(p)?, &p.display().to_string())?;
        let embeddings = by_start.remove(&time_key(m.origin())).unwrap_or_default();
        chunks.push(ChunkPrediction::new(m, embeddings)?);
    }
    if let Some(orphan) = by_start.keys().next() {
        log::warn!("embeddings for chunk start {:.6} have no matching chunk", *orphan as f64 / 1e6);
    }
    chunks.sort_by(|a, b| a.chunk().start().total_cmp(&b.chunk().start()));
    Ok(chunks)
}

/// Reports keys of `table` (recursively) that are not in `known`.
/// Keys of nested tables are listed as `table.key`.
fn unknown_keys(table: &toml::Table, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let is_table_known = known.iter().any(|k| k.starts_with(&format!("{path}.")));
        match value {
            toml::Value::Table(inner) if is_table_known => unknown_keys(inner, known, &path, out),
            _ if known.contains(&path.as_str()) => {}
            _ => out.push(path),
        }
    }
}

const PIPELINE_KEYS: &[&str] = &[
    "formulation",
    "detection_threshold",
    "clustering_threshold",
    "min_embedding_frames",
    "codec.num_speakers",
    "codec.max_overlap",
    "framing.chunk_duration",
    "framing.step",
    "framing.frame_duration",
];

fn parse_toml(text: &str, context: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::parse(context, 0, e.to_string()))
}

fn pipeline_from_table(table: toml::Table) -> Result<PipelineConfig> {
    let mut unknown = Vec::new();
    unknown_keys(&table, PIPELINE_KEYS, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))));
    }
    let config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Parses and validates a pipeline configuration.
///
/// ```toml
/// formulation = "powerset"       # or "multi-label"
/// clustering_threshold = 0.5
/// # detection_threshold = 0.5    # multi-label only
/// min_embedding_frames = 10
///
/// [codec]
/// num_speakers = 3
/// max_overlap = 2
///
/// [framing]
/// chunk_duration = 5.0
/// step = 0.5
/// frame_duration = 0.01
/// ```
pub fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    pipeline_from_table(parse_toml(text, "config")?)
}

pub fn write_pipeline_config(config: &PipelineConfig) -> String {
    toml::to_string(config).expect("pipeline config serializes")
}

/// A synth configuration file: synth keys at the top level and an optional
/// `[pipeline]` table describing framing and formulation.
pub fn parse_synth_config(text: &str) -> Result<(SynthConfig, PipelineConfig)> {
    let mut table = parse_toml(text, "synth config")?;
    let pipeline = match table.remove("pipeline") {
        Some(toml::Value::Table(t)) => pipeline_from_table(t)?,
        Some(_) => return Err(Error::InvalidConfig("`pipeline` must be a table".into())),
        None => PipelineConfig::default(),
    };
    let known: BTreeSet<&str> = SynthConfig::KEYS.iter().copied().collect();
    let unknown: Vec<&str> = table.keys().map(String::as_str).filter(|k| !known.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))));
    }
    let synth: SynthConfig = table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    synth.validate()?;
    Ok((synth, pipeline))
}

pub fn der_report_json(per_file: &[DerReport], total: &DerReport) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "files": per_file,
        "total": total,
    }))
    .expect("report serializes")
}

/// Aligned human-readable table; durations in seconds, rates in percent.
pub fn der_report_table(per_file: &[DerReport], total: &DerReport) -> String {
    let mut out = String::new();
    let width = per_file.iter().map(|r| r.uri.len()).chain([5]).max().unwrap_or(5);
    writeln!(
        out,
        "{:<width$} {:>8} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "uri", "DER%", "ref", "FA", "FA-ovl", "miss", "miss-ovl", "conf", "conf-ovl"
    )
    .expect("writing to a String");
    for r in per_file.iter().chain([total]) {
        writeln!(
            out,
            "{:<width$} {:>8.3} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>11.3}",
            r.uri,
            100.0 * r.der,
            r.total_reference_speech,
            r.false_alarm.total(),
            r.false_alarm.overlap,
            r.missed_detection.total(),
            r.missed_detection.overlap,
            r.speaker_confusion.total(),
            r.speaker_confusion.overlap,
        )
        .expect("writing to a String");
    }
    out
}

pub fn corpus_stats_table(stats: &CorpusStats) -> String {
    let mut out = String::new();
    writeln!(out, "speech duration: {:.3} s", stats.speech_duration).expect("writing to a String");
    for (k, f) in &stats.overlap_fractions {
        writeln!(out, "exactly {k} speaker(s): {:.4}% of speech", 100.0 * f).expect("writing to a String");
    }
    writeln!(out, ">= 2 speakers: {:.4}%", 100.0 * stats.fraction_at_least(2)).expect("writing to a String");
    writeln!(out, ">= 3 speakers: {:.4}%", 100.0 * stats.fraction_at_least(3)).expect("writing to a String");
    writeln!(
        out,
        "{} chunks of {:.3} s every {:.3} s",
        stats.num_chunks, stats.chunk_duration, stats.step
    )
    .expect("writing to a String");
    for (n, c) in &stats.chunk_histogram {
        writeln!(out, "  {n} speaker(s): {c} chunks").expect("writing to a String");
    }
    writeln!(out, "chunks with < 3 speakers: {:.4}%", 100.0 * stats.chunks_fewer_than(3)).expect("writing to a String");
    writeln!(out, "chunks with <= 3 speakers: {:.4}%", 100.0 * stats.chunks_at_most(3)).expect("writing to a String");
    out
}

pub fn corpus_stats_json(stats: &CorpusStats) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "stats": stats,
        "overlap_at_least_2": stats.fraction_at_least(2),
        "overlap_at_least_3": stats.fraction_at_least(3),
        "chunks_fewer_than_3": stats.chunks_fewer_than(3),
        "chunks_at_most_3": stats.chunks_at_most(3),
    }))
    .expect("stats serialize")
}
