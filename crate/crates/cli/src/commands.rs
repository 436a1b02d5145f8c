//! Subcommand implementations. Each scene directory holds
//! `scene.jsonl`, `detections.jsonl`, `frames/`, and after tracking
//! `tracks.jsonl` plus optionally `overlay/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use irtrack_core::image::Image;
use irtrack_core::metrics::EvalFrame;
use irtrack_core::prior::Generator;
use irtrack_core::synth::{FrameDetections, Scene};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, RunConfig, Variant};
use crate::error::{CliError, Result};
use crate::formats::{read_detections, read_scene, read_tracks, write_detections, write_scene, write_tracks};
use crate::imageio::{read_image, write_image};
use crate::pipeline::{self, Metrics};

pub const SCENE_FILE: &str = "scene.jsonl";
pub const DETECTION_FILE: &str = "detections.jsonl";
pub const TRACK_FILE: &str = "tracks.jsonl";

fn frame_name(k: usize, ext: &str) -> String {
    format!("frame_{k:04}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs `f` over scene indices on `jobs` threads, keeping index order.
fn par_scenes<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

fn generator(cfg: &RunConfig) -> Result<Generator> {
    Ok(Generator::new(cfg.prior)?)
}

/// Samples, renders and corrupts every configured scene; returns the scene directories.
pub fn generate(cfg: &RunConfig, jobs: usize) -> Result<Vec<PathBuf>> {
    let gen = generator(cfg)?;
    let hash = cfg.hash();
    par_scenes(cfg.n_scenes, jobs, |i| {
        let dir = cfg.scene_dir(i);
        let frames_dir = dir.join("frames");
        create_dir(&frames_dir)?;
        let g = pipeline::generate(&gen, &cfg.scenario_for(i), &cfg.render)?;
        write_scene(&dir.join(SCENE_FILE), &g.scene, &hash)?;
        write_detections(&dir.join(DETECTION_FILE), &g.detections, &hash)?;
        for (k, img) in g.frames.iter().enumerate() {
            write_image(&frames_dir.join(frame_name(k, cfg.image_format.extension())), img, cfg.image_format)?;
        }
        log::info!("generated {} ({} objects, {} frames)", dir.display(), g.scene.objects.len(), g.frames.len());
        Ok(dir)
    })
}

struct SceneInput {
    scene: Scene,
    frames: Vec<Image>,
    detections: Vec<FrameDetections>,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("missing input {}", path.display())))
    }
}

fn load_scene_input(cfg: &RunConfig, gen: &Generator, dir: &Path) -> Result<SceneInput> {
    let (scene_path, det_path) = (dir.join(SCENE_FILE), dir.join(DETECTION_FILE));
    require(&scene_path)?;
    require(&det_path)?;
    let (_, scene) = read_scene(&scene_path)?;
    let (_, detections) = read_detections(&det_path)?;
    for o in &scene.objects {
        gen.check(&o.latents).map_err(|e| CliError::Mismatch(format!("{}: object {}: {e}", scene_path.display(), o.id)))?;
    }
    if detections.len() != scene.n_frames() {
        return Err(CliError::Mismatch(format!("{}: {} detection frames for a {}-frame scene", det_path.display(), detections.len(), scene.n_frames())));
    }
    let ext = cfg.image_format.extension();
    let frames = (0..scene.n_frames())
        .map(|k| {
            let p = dir.join("frames").join(frame_name(k, ext));
            if !p.exists() {
                return Err(CliError::Mismatch(format!("{}: frame {k} missing", p.display())));
            }
            read_image(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneInput { scene, frames, detections })
}

/// Tracks every generated scene; returns the written track files.
pub fn track(cfg: &RunConfig, overlay: bool, jobs: usize) -> Result<Vec<PathBuf>> {
    let gen = generator(cfg)?;
    let hash = cfg.hash();
    par_scenes(cfg.n_scenes, jobs, |i| {
        let dir = cfg.scene_dir(i);
        let input = load_scene_input(cfg, &gen, &dir)?;
        let fit = cfg.refine.then_some(&cfg.fit);
        let cam = &input.scene.camera;
        let run = pipeline::track(&gen, &cfg.render, fit, &cfg.tracker, cam, &input.frames, &input.detections)?;
        let out = dir.join(TRACK_FILE);
        write_tracks(&out, &run.frames, &hash)?;
        if overlay {
            let odir = dir.join("overlay");
            create_dir(&odir)?;
            for (k, (img, fits)) in input.frames.iter().zip(&run.fits).enumerate() {
                let o = pipeline::overlay(&gen, &cfg.render, cam, img, fits)?;
                write_image(&odir.join(frame_name(k, cfg.image_format.extension())), &o, cfg.image_format)?;
            }
        }
        log::info!("tracked {}", dir.display());
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sequences: Vec<SequenceReport>,
    pub aggregate: Metrics,
}

impl Report {
    fn build(named: Vec<(String, Vec<EvalFrame>)>, eval: &EvalConfig) -> Result<Self> {
        let sequences = named
            .iter()
            .map(|(name, frames)| Ok(SequenceReport { name: name.clone(), metrics: pipeline::metrics(frames, eval)? }))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<Vec<EvalFrame>> = named.into_iter().map(|(_, f)| f).collect();
        let aggregate = pipeline::metrics(&pipeline::concat_sequences(&all), eval)?;
        Ok(Self { sequences, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&str, &Metrics)> = self.sequences.iter().map(|s| (s.name.as_str(), &s.metrics)).collect();
        rows.push(("aggregate", &self.aggregate));
        metrics_table("sequence", &rows)
    }
}

/// Aligned plain-text table of metrics rows.
pub fn metrics_table(first: &str, rows: &[(&str, &Metrics)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).chain([first.len()]).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{first:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>5}  {:>5}", "AMOTA", "AMOTP", "MOTA", "recall", "IDSW", "FP", "FN", "GT");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>5}  {:>5}  {:>5}  {:>5}",
            m.amota, m.amotp, m.mota, m.recall, m.id_switches, m.false_positives, m.misses, m.gt
        );
    }
    out
}

/// Evaluates one track file against its scene.
pub fn eval_files(tracks: &Path, scene: &Path, eval: &EvalConfig) -> Result<Report> {
    require(tracks)?;
    require(scene)?;
    let (_, s) = read_scene(scene)?;
    let (_, t) = read_tracks(tracks)?;
    let name = scene.parent().and_then(|p| p.file_name()).map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned());
    Report::build(vec![(name, pipeline::eval_frames(&s, &t)?)], eval)
}

/// Evaluates every tracked scene and writes `report.json` and `report.txt`
/// next to the scene directories.
pub fn eval(cfg: &RunConfig) -> Result<Report> {
    let mut named = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let dir = cfg.scene_dir(i);
        let (scene_path, track_path) = (dir.join(SCENE_FILE), dir.join(TRACK_FILE));
        require(&scene_path)?;
        require(&track_path)?;
        let (_, s) = read_scene(&scene_path)?;
        let (_, t) = read_tracks(&track_path)?;
        named.push((format!("scene_{i:03}"), pipeline::eval_frames(&s, &t)?));
    }
    let report = Report::build(named, &cfg.eval)?;
    write_text(&cfg.output.join("report.json"), &report.to_json())?;
    write_text(&cfg.output.join("report.txt"), &report.to_table())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<VariantRow>,
}

impl Ablation {
    pub fn to_table(&self) -> String {
        let names: Vec<String> = self.rows.iter().map(|r| r.variant.to_string()).collect();
        let rows: Vec<(&str, &Metrics)> = names.iter().map(String::as_str).zip(self.rows.iter().map(|r| &r.metrics)).collect();
        metrics_table("variant", &rows)
    }
}

/// Generates the configured scenes in memory and tracks them under each
/// variant; writes `ablation.json` and `ablation.txt` to the output directory.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], jobs: usize) -> Result<Ablation> {
    let gen = generator(cfg)?;
    let scenes = par_scenes(cfg.n_scenes, jobs, |i| pipeline::generate(&gen, &cfg.scenario_for(i), &cfg.render))?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let (fit, tracker) = v.apply(&cfg.fit, &cfg.tracker);
        let fit_ref = cfg.refine.then_some(&fit);
        let frames = par_scenes(scenes.len(), jobs, |i| {
            let g = &scenes[i];
            let run = pipeline::track(&gen, &cfg.render, fit_ref, &tracker, &g.scene.camera, &g.frames, &g.detections)?;
            pipeline::eval_frames(&g.scene, &run.frames)
        })?;
        let metrics = pipeline::metrics(&pipeline::concat_sequences(&frames), &cfg.eval)?;
        log::info!("variant {v}: AMOTA {:.3} IDSW {}", metrics.amota, metrics.id_switches);
        rows.push(VariantRow { variant: v, metrics });
    }
    let out = Ablation { rows };
    create_dir(&cfg.output)?;
    write_text(&cfg.output.join("ablation.json"), &(serde_json::to_string_pretty(&out).expect("report serializes") + "\n"))?;
    write_text(&cfg.output.join("ablation.txt"), &out.to_table())?;
    Ok(out)
}
