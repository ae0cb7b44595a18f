//! End-to-end scoring of the automatic labeler on simulated scenarios.
//!
//! The ego vehicle is assumed to stand still, so aligned frames, simulator
//! truth and labels all share one grid.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::autolabel::{autolabel, AutolabelConfig, AutolabelError, AutolabelOutput};
use crate::eval::{roc, EvalError};
use crate::filter::{fuse_sequence, FilterConfig, FilterError};
use crate::geometry::{iou, ObjectBox};
use crate::grid::DogmaFrame;
use crate::sim::{
    box_world_to_local, ground_truth, ray_box_intersection, simulate_measurements, CellTruth,
    GroundTruth, ScenarioSpec, SimError,
};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("fusion: {0}")]
    Filter(#[from] FilterError),
    #[error("autolabel: {0}")]
    Autolabel(#[from] AutolabelError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
}

/// Size accuracy for one dynamic object.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectReport {
    pub id: usize,
    pub name: String,
    /// Frames in which the object moves, lies fully inside the grid and no
    /// other object blocks the view of its outline.
    pub unoccluded_frames: usize,
    /// Valid track overlapping the object most, if any.
    pub track: Option<usize>,
    pub width_error: Option<f64>,
    pub length_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub frames: usize,
    pub cell_size: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub balanced_accuracy: f64,
    pub auc: f64,
    /// Largest filter speed seen on a static-truth cell, m/s.
    pub max_static_speed: f64,
    pub valid_tracks: usize,
    pub invalid_tracks: usize,
    /// Mean best IoU of valid-track boxes against moving truth boxes.
    pub mean_track_iou: Option<f64>,
    /// Every box of every valid track carries the track's refined extent.
    pub extent_inherited: bool,
    pub objects: Vec<ObjectReport>,
    pub seconds: f64,
}

/// Everything computed while scoring, for callers that also want artifacts.
pub struct BenchmarkRun {
    pub frames: Vec<DogmaFrame>,
    pub truth: Vec<GroundTruth>,
    pub output: AutolabelOutput,
    pub report: ScenarioReport,
}

pub fn run_scenario(
    spec: &ScenarioSpec,
    filter: &FilterConfig,
    cfg: &AutolabelConfig,
) -> Result<BenchmarkRun, BenchmarkError> {
    let start = Instant::now();
    let measurements = simulate_measurements(spec)?;
    let frames = fuse_sequence(&measurements, filter)?;
    let output = autolabel(&frames, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let truth = spec
        .frame_times()
        .into_iter()
        .map(|t| ground_truth(spec, t))
        .collect::<Result<Vec<_>, _>>()?;
    let report = score(spec, &frames, &truth, &output, seconds)?;
    Ok(BenchmarkRun {
        frames,
        truth,
        output,
        report,
    })
}

fn score(
    spec: &ScenarioSpec,
    frames: &[DogmaFrame],
    truth: &[GroundTruth],
    out: &AutolabelOutput,
    seconds: f64,
) -> Result<ScenarioReport, BenchmarkError> {
    let cls = &out.classification;
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let mut max_static_speed: f64 = 0.0;
    for (t, gt) in truth.iter().enumerate() {
        for (c, class) in gt.cells.iter().enumerate() {
            let dynamic = match class {
                CellTruth::Dynamic => true,
                CellTruth::Static => false,
                _ => continue,
            };
            if !dynamic {
                max_static_speed = max_static_speed.max(frames[t].cells()[c].speed());
            }
            let Some(s) = cls.score(c, t) else { continue };
            scores.push(s);
            labels.push(dynamic);
            match (s >= cls.threshold(), dynamic) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
            }
        }
    }
    let rate = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    let balanced_accuracy = 0.5 * (rate(tp, fn_) + rate(tn, fp));
    let (_, auc) = roc(&scores, &labels)?;

    let reference = out.aligned[0].ego_pose();
    let local: Vec<Vec<(usize, bool, ObjectBox)>> = truth
        .iter()
        .map(|gt| {
            gt.boxes
                .iter()
                .map(|b| (b.id, b.dynamic, box_world_to_local(reference, &b.object_box)))
                .collect()
        })
        .collect();

    let valid: Vec<_> = out.tracks.iter().filter(|t| t.valid).collect();
    let mut ious = Vec::new();
    for tr in &valid {
        for (i, b) in tr.boxes.iter().enumerate() {
            let best = local[tr.start_frame + i]
                .iter()
                .filter(|(_, dynamic, _)| *dynamic)
                .map(|(_, _, g)| iou(b, g))
                .fold(0.0, f64::max);
            ious.push(best);
        }
    }
    let extent_inherited = valid.iter().all(|tr| {
        let (w, l) = (tr.width.min(tr.length), tr.width.max(tr.length));
        tr.boxes.iter().all(|b| {
            let b = b.length_major();
            (b.width - w).abs() < 1e-9 && (b.length - l).abs() < 1e-9
        })
    });

    let geometry = spec.grid;
    let objects = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.kind == crate::sim::ObjectKind::Dynamic)
        .map(|(id, o)| {
            let unoccluded_frames = local
                .iter()
                .filter(|boxes| {
                    boxes.iter().any(|(i, dynamic, b)| {
                        *i == id
                            && *dynamic
                            && b.corners().iter().all(|p| geometry.contains(p[0], p[1]))
                            && outline_visible(b, boxes.iter().filter(|x| x.0 != id).map(|x| &x.2))
                    })
                })
                .count();
            let track = valid
                .iter()
                .map(|tr| {
                    let overlap: f64 = tr
                        .boxes
                        .iter()
                        .enumerate()
                        .filter_map(|(i, b)| {
                            local[tr.start_frame + i].iter().find(|x| x.0 == id).map(|x| iou(b, &x.2))
                        })
                        .sum();
                    (tr, overlap)
                })
                .filter(|(_, overlap)| *overlap > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(tr, _)| *tr);
            let truth_size = (o.width.min(o.length), o.width.max(o.length));
            let errors = track.map(|tr| {
                let (w, l) = (tr.width.min(tr.length), tr.width.max(tr.length));
                ((w - truth_size.0).abs(), (l - truth_size.1).abs())
            });
            ObjectReport {
                id,
                name: o.name.clone(),
                unoccluded_frames,
                track: track.map(|t| t.id),
                width_error: errors.map(|e| e.0),
                length_error: errors.map(|e| e.1),
            }
        })
        .collect();

    Ok(ScenarioReport {
        frames: frames.len(),
        cell_size: geometry.cell_size,
        true_positives: tp,
        false_negatives: fn_,
        true_negatives: tn,
        false_positives: fp,
        balanced_accuracy,
        auc,
        max_static_speed,
        valid_tracks: valid.len(),
        invalid_tracks: out.tracks.len() - valid.len(),
        mean_track_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        extent_inherited,
        objects,
        seconds,
    })
}

/// Whether sight lines from the sensor (at the grid origin) to points along
/// the outline of `b` are free of `others`.
fn outline_visible<'a>(b: &ObjectBox, others: impl Iterator<Item = &'a ObjectBox> + Clone) -> bool {
    let c = b.corners();
    (0..4).all(|i| {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        (0..4).all(|k| {
            let s = k as f64 / 4.0;
            let target = [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
            let dist = target[0].hypot(target[1]);
            let dir = [target[0] / dist, target[1] / dist];
            others
                .clone()
                .all(|o| ray_box_intersection([0.0, 0.0], dir, o).is_none_or(|r| r >= dist))
        })
    })
}
