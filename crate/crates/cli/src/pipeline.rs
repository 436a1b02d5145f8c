//! Generate, track and evaluate one scene in memory.

use irtrack_core::fitting::{FitConfig, FitResult};
use irtrack_core::geometry::{Camera, ObjectNode};
use irtrack_core::image::Image;
use irtrack_core::metrics::{amota_amotp, mota_and_recall, EvalBox, EvalFrame};
use irtrack_core::prior::{Generator, LatentPair};
use irtrack_core::renderer::{RenderSettings, SceneRenderer};
use irtrack_core::synth::{corrupt_detections, ground_truth_boxes, render_sequence, sample_scene, FrameDetections, ScenarioConfig, Scene};
use irtrack_core::tracker::{make_observation, track_frame, Observation, Tracker, TrackerConfig};
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::{CliError, Result};
use crate::formats::TrackFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub frames: Vec<Image>,
    /// Visible mask fraction per frame and object.
    pub visibility: Vec<Vec<f64>>,
    pub detections: Vec<FrameDetections>,
}

pub fn generate(gen: &Generator, scenario: &ScenarioConfig, settings: &RenderSettings) -> Result<GeneratedScene> {
    let scene = sample_scene(gen, scenario)?;
    let rendered = render_sequence(&scene, gen, settings)?;
    let visibility: Vec<Vec<f64>> = rendered.iter().map(|f| f.visibility.clone()).collect();
    let detections = corrupt_detections(&scene, &scenario.noise, Some(&visibility))?;
    let frames = rendered.into_iter().map(|f| f.image).collect();
    Ok(GeneratedScene { scene, frames, visibility, detections })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pub frames: Vec<TrackFrame>,
    /// Per frame, one fit per detection; empty without refinement.
    pub fits: Vec<Vec<FitResult>>,
}

/// Runs the tracker over a sequence. With `fit`, every frame's detections are
/// refined by inverse rendering before association.
pub fn track(
    gen: &Generator,
    settings: &RenderSettings,
    fit: Option<&FitConfig>,
    tracker_cfg: &TrackerConfig,
    cam: &Camera,
    images: &[Image],
    detections: &[FrameDetections],
) -> Result<TrackRun> {
    if images.len() != detections.len() {
        return Err(CliError::Mismatch(format!("{} frames but {} detection records", images.len(), detections.len())));
    }
    if let Some(k) = images.iter().position(|im| im.width != cam.width || im.height != cam.height) {
        let im = &images[k];
        return Err(CliError::Mismatch(format!("frame {k} is {}x{}, camera is {}x{}", im.width, im.height, cam.width, cam.height)));
    }
    let renderer = SceneRenderer::new(gen, *settings)?;
    let template = LatentPair::zeros(gen.config());
    let mut tracker = Tracker::new(tracker_cfg.clone())?;
    let mut out = TrackRun { frames: Vec::with_capacity(images.len()), fits: Vec::with_capacity(images.len()) };
    for (f, (image, dets)) in images.iter().zip(detections).enumerate() {
        let (records, fits) = match fit {
            Some(cfg) => track_frame(&renderer, &mut tracker, image, &dets.detections, cam, cfg)?,
            None => {
                let obs: Vec<Observation> =
                    dets.detections.iter().map(|d| make_observation(d, None, &template)).collect::<irtrack_core::Result<_>>()?;
                (tracker.step(&obs, cam)?, Vec::new())
            }
        };
        log::debug!("frame {f}: {} detections, {} tracks", dets.detections.len(), records.len());
        out.frames.push(TrackFrame { frame: f, tracks: records });
        out.fits.push(fits);
    }
    Ok(out)
}

/// Ground truth and predictions per frame; predictions are scored by track confidence.
pub fn eval_frames(scene: &Scene, tracks: &[TrackFrame]) -> Result<Vec<EvalFrame>> {
    let n = scene.n_frames();
    let mut frames: Vec<EvalFrame> = (0..n)
        .map(|f| EvalFrame {
            gt: ground_truth_boxes(scene, f).into_iter().map(|(id, b)| EvalBox { id, center: b.center, score: 1.0 }).collect(),
            pred: Vec::new(),
        })
        .collect();
    for tf in tracks {
        let slot = frames
            .get_mut(tf.frame)
            .ok_or_else(|| CliError::Mismatch(format!("track frame {} beyond the scene's {n} frames", tf.frame)))?;
        slot.pred = tf.tracks.iter().map(|r| EvalBox { id: r.id, center: r.center, score: r.confidence }).collect();
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub amota: f64,
    pub amotp: f64,
    pub mota: f64,
    pub recall: f64,
    pub id_switches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub gt: usize,
}

pub fn metrics(frames: &[EvalFrame], eval: &EvalConfig) -> Result<Metrics> {
    let s = mota_and_recall(frames, eval.radius)?;
    let a = amota_amotp(frames, eval.radius, eval.thresholds)?;
    Ok(Metrics {
        amota: a.amota,
        amotp: a.amotp,
        mota: s.mota,
        recall: s.recall,
        id_switches: s.id_switches,
        false_positives: s.false_positives,
        misses: s.misses,
        gt: s.gt,
    })
}

/// Concatenates sequences, keeping the ids of different sequences apart.
pub fn concat_sequences(sequences: &[Vec<EvalFrame>]) -> Vec<EvalFrame> {
    let tag = |seq: usize, b: &EvalBox| EvalBox { id: ((seq as u64) << 40) | b.id, ..*b };
    sequences
        .iter()
        .enumerate()
        .flat_map(|(s, frames)| {
            frames.iter().map(move |f| EvalFrame {
                gt: f.gt.iter().map(|b| tag(s, b)).collect(),
                pred: f.pred.iter().map(|b| tag(s, b)).collect(),
            })
        })
        .collect()
}

/// Fitted objects rendered over a faded copy of the input frame.
pub fn overlay(gen: &Generator, settings: &RenderSettings, cam: &Camera, image: &Image, fits: &[FitResult]) -> Result<Image> {
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    let objects: Vec<(LatentPair, ObjectNode)> = fits.iter().filter(|r| !r.culled).map(|r| (r.latents.clone(), r.node)).collect();
    if objects.is_empty() {
        return Ok(out);
    }
    let renderer = SceneRenderer::new(gen, RenderSettings { patch: None, ..*settings })?;
    let comp = renderer.render_scene(&objects, cam)?.composite;
    for (p, v) in out.data.iter_mut().enumerate() {
        let fg = comp.foreground.data[p / 3];
        *v = comp.image.data[p] + (1.0 - fg) * *v;
    }
    Ok(out)
}
