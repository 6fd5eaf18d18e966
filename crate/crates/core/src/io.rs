//! File formats: annotation CSV, binary feature sidecar, sequence
//! directories, JSON results, CSV tables and `key=value` run configs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::descriptor::TraceRow;
use crate::error::{invalid, Error, Result};
use crate::geometry::{DensityMap, HeadPoint, PointSet};
use crate::pipeline::SweepRow;
use crate::simulator::{FrameObservation, IdentityRecord, SceneConfig, SceneSequence};

/// Magic prefix of the feature sidecar.
pub const FEATURE_MAGIC: &[u8; 8] = b"CFLWFEAT";

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const IDENTITIES_FILE: &str = "identities.json";
pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One annotated head: `x` is the column and `y` the row, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame: usize,
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `frame,id,x,y` rows; the header line is optional.
pub fn read_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(parse_error(
                path,
                line,
                format!("expected 4 fields, found {}", rec.len()),
            ));
        }
        if k == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("frame")) {
            continue;
        }
        let frame: usize = rec[0]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad frame index {:?}", &rec[0])))?;
        let id: u64 = rec[1]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad person id {:?}", &rec[1])))?;
        let x: f64 = rec[2]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad x {:?}", &rec[2])))?;
        let y: f64 = rec[3]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad y {:?}", &rec[3])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_error(path, line, "coordinates must be finite"));
        }
        if let Some(first) = seen.insert((frame, id), line) {
            return Err(parse_error(
                path,
                line,
                format!("duplicate (frame {frame}, id {id}), first seen on line {first}"),
            ));
        }
        out.push(AnnotationRecord { frame, id, x, y });
    }
    Ok(out)
}

/// Builds a feature-less sequence from annotations. Frames are indexed
/// densely from 0 (missing frames are empty). Without an explicit frame
/// size, the smallest frame holding every point is used.
pub fn load_annotations(path: &Path, frame_size: Option<(usize, usize)>) -> Result<SceneSequence> {
    let records = read_annotation_records(path)?;
    sequence_from_records(&records, frame_size, None)
}

fn sequence_from_records(
    records: &[AnnotationRecord],
    frame_size: Option<(usize, usize)>,
    config: Option<SceneConfig>,
) -> Result<SceneSequence> {
    let frames_total = records.iter().map(|r| r.frame + 1).max().unwrap_or(1);
    let (height, width) = frame_size.unwrap_or_else(|| {
        let h = records
            .iter()
            .map(|r| r.y.max(0.0).floor() as usize + 1)
            .max()
            .unwrap_or(1);
        let w = records
            .iter()
            .map(|r| r.x.max(0.0).floor() as usize + 1)
            .max()
            .unwrap_or(1);
        (h.max(2), w.max(2))
    });
    let mut per_frame: Vec<Vec<HeadPoint>> = vec![Vec::new(); frames_total];
    for r in records {
        per_frame[r.frame].push(HeadPoint::with_identity(r.y, r.x, r.id));
    }
    let mut frames = Vec::with_capacity(frames_total);
    for (t, pts) in per_frame.into_iter().enumerate() {
        let n = pts.len();
        let points = PointSet::new(t, height, width, pts)?;
        frames.push(FrameObservation::new(points, Array2::zeros((n, 0)))?);
    }
    let identity_registry = registry_from_frames(&frames);
    let config = config.unwrap_or_else(|| SceneConfig {
        height,
        width,
        duration: frames_total,
        ..SceneConfig::default()
    });
    Ok(SceneSequence {
        config,
        frames,
        identity_registry,
    })
}

/// Presence spans reconstructed from frame membership.
fn registry_from_frames(frames: &[FrameObservation]) -> BTreeMap<u64, IdentityRecord> {
    let mut registry: BTreeMap<u64, IdentityRecord> = BTreeMap::new();
    for f in frames {
        for id in f.points.points().iter().filter_map(|p| p.identity) {
            let rec = registry.entry(id).or_insert_with(|| IdentityRecord {
                spans: Vec::new(),
                base_feature: Vec::new(),
            });
            match rec.spans.last_mut() {
                Some(span) if span.1 == f.frame_index => span.1 += 1,
                _ => rec.spans.push((f.frame_index, f.frame_index + 1)),
            }
        }
    }
    registry
}

/// Rows ordered by frame, then by position within the frame.
pub fn annotation_records(seq: &SceneSequence) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for f in &seq.frames {
        for p in f.points.points() {
            let id = p.identity.ok_or_else(|| {
                Error::Data(format!("frame {} has an unlabeled point", f.frame_index))
            })?;
            out.push(AnnotationRecord {
                frame: f.frame_index,
                id,
                x: p.col,
                y: p.row,
            });
        }
    }
    Ok(out)
}

pub fn save_annotations(seq: &SceneSequence, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "id", "x", "y"])?;
    for r in annotation_records(seq)? {
        w.write_record([
            r.frame.to_string(),
            r.id.to_string(),
            r.x.to_string(),
            r.y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Magic, `u32` row count, `u32` dimension (little endian), then `f64`
/// values row-major.
pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let count = u32::try_from(features.nrows()).map_err(|_| invalid("too many feature rows"))?;
    let dim =
        u32::try_from(features.ncols()).map_err(|_| invalid("feature dimension too large"))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for v in features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != count * dim * 8 {
        return Err(bad(&format!(
            "expected {count}x{dim} values, found {} bytes",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((count, dim), values).map_err(|e| bad(&e.to_string()))
}

/// Writes annotations, features, identity registry and scene config into
/// `dir`.
pub fn save_sequence(seq: &SceneSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_annotations(seq, &dir.join(ANNOTATIONS_FILE))?;
    let dim = seq
        .frames
        .iter()
        .map(|f| f.raw_features.ncols())
        .max()
        .unwrap_or(0);
    let total: usize = seq.frames.iter().map(FrameObservation::len).sum();
    let mut stacked = Array2::zeros((total, dim));
    let mut k = 0;
    for f in &seq.frames {
        for row in f.raw_features.rows() {
            stacked.row_mut(k).assign(&row);
            k += 1;
        }
    }
    write_features(&dir.join(FEATURES_FILE), &stacked)?;
    write_json(&dir.join(IDENTITIES_FILE), &seq.identity_registry)?;
    write_json(&dir.join(SCENE_FILE), &seq.config)?;
    Ok(())
}

/// Reads a directory written by [`save_sequence`]. Only the annotation file
/// is required.
pub fn load_sequence(dir: &Path) -> Result<SceneSequence> {
    let records = read_annotation_records(&dir.join(ANNOTATIONS_FILE))?;
    let scene_path = dir.join(SCENE_FILE);
    let config: Option<SceneConfig> = if scene_path.exists() {
        Some(read_json(&scene_path)?)
    } else {
        None
    };
    let size = config.as_ref().map(|c| (c.height, c.width));
    let mut seq = sequence_from_records(&records, size, config)?;

    let feat_path = dir.join(FEATURES_FILE);
    if feat_path.exists() {
        let feats = read_features(&feat_path)?;
        if feats.nrows() != records.len() {
            return Err(Error::Data(format!(
                "{} feature rows for {} annotations",
                feats.nrows(),
                records.len()
            )));
        }
        // Records are grouped by frame in file order, matching the stacking in
        // `save_sequence` when the file was produced by it.
        let mut per_frame: Vec<Vec<usize>> = vec![Vec::new(); seq.frames.len()];
        for (k, r) in records.iter().enumerate() {
            per_frame[r.frame].push(k);
        }
        for (t, rows) in per_frame.iter().enumerate() {
            let mut block = Array2::zeros((rows.len(), feats.ncols()));
            for (i, &k) in rows.iter().enumerate() {
                block.row_mut(i).assign(&feats.row(k));
            }
            seq.frames[t].raw_features = block;
        }
    }
    let ids_path = dir.join(IDENTITIES_FILE);
    if ids_path.exists() {
        seq.identity_registry = read_json(&ids_path)?;
    }
    if seq.config.duration != seq.frames.len() {
        seq.config.duration = seq.frames.len();
    }
    Ok(seq)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Dense matrix as headerless row-major CSV.
pub fn write_matrix_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in matrix.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_density_csv(path: &Path, map: &DensityMap) -> Result<()> {
    write_matrix_csv(path, &map.values)
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "mae", "mse", "wrae"])?;
    for r in rows {
        w.write_record([
            r.tau.to_string(),
            r.mae.to_string(),
            r.mse.to_string(),
            r.wrae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-video counts: `video_id,count` with an optional third `frames`
/// column. A header row is detected by a non-numeric second field.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub video_id: String,
    pub count: f64,
    pub frames: Option<usize>,
}

pub fn read_count_table(path: &Path) -> Result<Vec<CountRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.len() < 2 || rec.len() > 3 {
            return Err(parse_error(path, line, "expected video_id,count[,frames]"));
        }
        let count = match rec[1].parse::<f64>() {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(_) => return Err(parse_error(path, line, format!("bad count {:?}", &rec[1]))),
        };
        let frames = match rec.get(2) {
            Some(s) if !s.is_empty() => Some(
                s.parse::<usize>()
                    .map_err(|_| parse_error(path, line, format!("bad frame count {s:?}")))?,
            ),
            _ => None,
        };
        out.push(CountRow {
            video_id: rec[0].to_string(),
            count,
            frames,
        });
    }
    Ok(out)
}

/// Plain `key = value` lines; `#` starts a comment.
pub fn parse_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_error(path, k + 1, format!("expected key=value, got {line:?}")))?;
        let key = key.trim().replace('-', "_");
        if key.is_empty() {
            return Err(parse_error(path, k + 1, "empty key"));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

/// Echo of what produced a result, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            config,
            outputs: Vec::new(),
        }
    }
}

/// Manifest path for an output file (`x.json` -> `x.manifest.json`) or an
/// output directory (`dir/manifest.json`).
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join(MANIFEST_FILE);
    }
    let stem = output
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    output.with_file_name(format!("{stem}.manifest.json"))
}
