//! Line-delimited JSON files: a header line, then records.
//!
//! * SceneFile: header, scene description, then one pose record per frame.
//! * DetectionFile: header, then one record per frame.
//! * TrackFile: header, then one record per frame.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use irtrack_core::geometry::{Camera, Pose};
use irtrack_core::prior::LatentPair;
use irtrack_core::synth::{FrameDetections, Scene, SceneObject, ScenarioConfig, TrajectoryKind};
use irtrack_core::tracker::TrackRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Scene,
    Detections,
    Tracks,
}

impl FileKind {
    pub fn schema(self) -> &'static str {
        match self {
            FileKind::Scene => "irtrack/scene",
            FileKind::Detections => "irtrack/detections",
            FileKind::Tracks => "irtrack/tracks",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
}

impl Header {
    pub fn new(kind: FileKind, config_hash: &str) -> Self {
        Self { schema: kind.schema().into(), version: SCHEMA_VERSION, config_hash: config_hash.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub id: u64,
    pub latents: LatentPair,
    pub scale: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub trajectory: TrajectoryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub camera: Camera,
    pub config: ScenarioConfig,
    pub objects: Vec<ObjectMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectPose {
    pub id: u64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFrame {
    pub frame: usize,
    pub objects: Vec<ObjectPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFrame {
    pub frame: usize,
    pub tracks: Vec<TrackRecord>,
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize")
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        let _ = writeln!(text, "{l}");
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "/{index}");
            }
            Segment::Map { key } => {
                let _ = write!(out, "/{}", key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                let _ = write!(out, "/{variant}");
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn schema_error(path: &Path, line: usize, at: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Schema(format!("{} line {line} at {}: {msg}", path.display(), if at.is_empty() { "/" } else { at }))
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = pointer(e.path());
        schema_error(path, line, &at, e.into_inner())
    })
}

/// Non-empty lines with their 1-based line numbers; checks the header.
fn read_records(path: &Path, kind: FileKind) -> Result<(Header, Vec<(usize, String)>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.to_string()));
    let (n, first) = lines.next().ok_or_else(|| schema_error(path, 1, "", "missing header"))?;
    let header: Header = parse_line(path, n, &first)?;
    if header.schema != kind.schema() {
        return Err(schema_error(path, n, "/schema", format!("expected `{}`, found `{}`", kind.schema(), header.schema)));
    }
    if header.version != SCHEMA_VERSION {
        return Err(schema_error(path, n, "/version", format!("unsupported version {}", header.version)));
    }
    Ok((header, lines.collect()))
}

fn check_frame_order(path: &Path, frames: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let mut prev: Option<usize> = None;
    for (line, f) in frames {
        if prev.is_some_and(|p| f <= p) {
            return Err(schema_error(path, line, "/frame", format!("frame {f} out of order")));
        }
        prev = Some(f);
    }
    Ok(())
}

// ---------------------------------------------------------------- scene

pub fn write_scene(path: &Path, scene: &Scene, config_hash: &str) -> Result<()> {
    let meta = SceneMeta {
        camera: scene.camera,
        config: scene.config.clone(),
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectMeta { id: o.id, latents: o.latents.clone(), scale: o.scale, w: o.w, h: o.h, l: o.l, trajectory: o.trajectory })
            .collect(),
    };
    let mut lines = vec![to_line(&Header::new(FileKind::Scene, config_hash)), to_line(&meta)];
    for f in 0..scene.n_frames() {
        let objects = scene.objects.iter().map(|o| ObjectPose { id: o.id, pose: o.poses[f] }).collect();
        lines.push(to_line(&SceneFrame { frame: f, objects }));
    }
    write_lines(path, &lines)
}

pub fn read_scene(path: &Path) -> Result<(Header, Scene)> {
    let (header, records) = read_records(path, FileKind::Scene)?;
    let mut it = records.into_iter();
    let (n, meta_line) = it.next().ok_or_else(|| schema_error(path, 2, "", "missing scene description"))?;
    let meta: SceneMeta = parse_line(path, n, &meta_line)?;
    let mut objects: Vec<SceneObject> = meta
        .objects
        .into_iter()
        .map(|o| SceneObject { id: o.id, latents: o.latents, scale: o.scale, w: o.w, h: o.h, l: o.l, trajectory: o.trajectory, poses: Vec::new() })
        .collect();
    let mut count = 0;
    for (line, text) in it {
        let fr: SceneFrame = parse_line(path, line, &text)?;
        if fr.frame != count {
            return Err(schema_error(path, line, "/frame", format!("expected frame {count}, found {}", fr.frame)));
        }
        if fr.objects.len() != objects.len() || fr.objects.iter().zip(&objects).any(|(p, o)| p.id != o.id) {
            return Err(schema_error(path, line, "/objects", "object ids differ from the scene description"));
        }
        for (o, p) in objects.iter_mut().zip(fr.objects) {
            o.poses.push(p.pose);
        }
        count += 1;
    }
    if count != meta.config.n_frames {
        return Err(schema_error(path, n, "/config/n_frames", format!("declares {} frames, file has {count}", meta.config.n_frames)));
    }
    Ok((header, Scene { config: meta.config, camera: meta.camera, objects }))
}

// ----------------------------------------------------------- detections

pub fn write_detections(path: &Path, frames: &[FrameDetections], config_hash: &str) -> Result<()> {
    let mut lines = vec![to_line(&Header::new(FileKind::Detections, config_hash))];
    lines.extend(frames.iter().map(to_line));
    write_lines(path, &lines)
}

pub fn read_detections(path: &Path) -> Result<(Header, Vec<FrameDetections>)> {
    let (header, records) = read_records(path, FileKind::Detections)?;
    let mut out = Vec::with_capacity(records.len());
    for (line, text) in records {
        let fd: FrameDetections = parse_line(path, line, &text)?;
        if fd.frame != out.len() {
            return Err(schema_error(path, line, "/frame", format!("expected frame {}, found {}", out.len(), fd.frame)));
        }
        out.push(fd);
    }
    Ok((header, out))
}

// --------------------------------------------------------------- tracks

pub fn write_tracks(path: &Path, frames: &[TrackFrame], config_hash: &str) -> Result<()> {
    let mut lines = vec![to_line(&Header::new(FileKind::Tracks, config_hash))];
    lines.extend(frames.iter().map(to_line));
    write_lines(path, &lines)
}

/// Frames may be sparse; frames without a record have no tracks.
pub fn read_tracks(path: &Path) -> Result<(Header, Vec<TrackFrame>)> {
    let (header, records) = read_records(path, FileKind::Tracks)?;
    let mut out = Vec::with_capacity(records.len());
    let mut lines = Vec::with_capacity(records.len());
    for (line, text) in records {
        let tf: TrackFrame = parse_line(path, line, &text)?;
        for (k, t) in tf.tracks.iter().enumerate() {
            if t.frame != tf.frame {
                return Err(schema_error(path, line, &format!("/tracks/{k}/frame"), "differs from the record frame"));
            }
        }
        lines.push((line, tf.frame));
        out.push(tf);
    }
    check_frame_order(path, lines.into_iter())?;
    Ok((header, out))
}
