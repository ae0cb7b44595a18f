//! Pipeline stages. Each reads its inputs from and writes its artifacts to
//! the output directory; nothing else passes between them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dogma_core::anchor::{decode, encode, weight_map, LabelTensors};
use dogma_core::autolabel::{autolabel, boxes_by_frame, read_boxes_csv, write_boxes_csv, write_static_maps, BoxRecord};
use dogma_core::eval::{precision_recall, roc, sequence_rmse, write_curve_csv, BoxRmse};
use dogma_core::filter::fuse_sequence;
use dogma_core::grid::{
    create_sequence, open_sequence, read_dogma_sequence, read_sequence, write_dogma_sequence, GridSequence,
    RawFrame, SequenceReader,
};
use dogma_core::loss::{loss_gradient, total_loss, LossBreakdown};
use dogma_core::sim::{
    box_world_to_local, ground_truth, simulate_measurements, CellTruth, MeasurementGrid, ScenarioSpec,
    MEASUREMENT_CHANNELS,
};
use dogma_core::{GridGeometry, ObjectBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::PipelineConfig;

/// Version stamp of every TOML artifact.
pub const ARTIFACT_VERSION: u32 = 1;

pub const SCENARIO: &str = "scenario.toml";
pub const MEASUREMENTS: &str = "measurements.dgm";
pub const TRUTH_CELLS: &str = "truth_cells.dgm";
pub const TRUTH_BOXES: &str = "truth_boxes.csv";
pub const DOGMA: &str = "dogma.dgm";
pub const STATIC_MAPS: &str = "static_maps.dgm";
pub const LABEL_BOXES: &str = "boxes.csv";
pub const TRACKS: &str = "tracks.csv";
pub const DYNAMIC_SCORES: &str = "dynamic_scores.dgm";
pub const LABEL_TENSORS: &str = "label_tensors.dgm";
pub const LOSS_CHECK: &str = "loss_check.toml";
pub const DETECTIONS: &str = "detections.csv";
pub const PR_CURVE: &str = "pr_curve.csv";
pub const ROC_CURVE: &str = "roc_curve.csv";
pub const METRICS: &str = "metrics.toml";
pub const SUMMARY: &str = "summary.toml";

/// Everything a stage needs besides its input files.
pub struct Env<'a> {
    pub config: &'a PipelineConfig,
    pub out: &'a Path,
    pub quiet: bool,
}

impl Env<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value)?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn open_grid(path: &Path) -> Result<SequenceReader<BufReader<File>>> {
    open_sequence(path).with_context(|| format!("cannot open {}", path.display()))
}

fn load_grid(path: &Path) -> Result<GridSequence> {
    read_sequence(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_boxes_csv(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

// simulate

fn load_scenario(ctx: &Env) -> Result<ScenarioSpec> {
    let path = &ctx.config.scenario;
    let mut spec = ScenarioSpec::load(path).with_context(|| format!("cannot load scenario {}", path.display()))?;
    if let Some(seed) = ctx.config.seed {
        spec.rng_seed = seed;
    }
    if let Some(n) = ctx.config.grid_size {
        spec.grid = GridGeometry::centered(n, spec.grid.cell_size)?;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn simulate(ctx: &Env) -> Result<()> {
    let spec = load_scenario(ctx)?;
    let g = spec.grid;
    ctx.note(format!(
        "simulate: {} frames on a {}x{} grid",
        spec.frame_count(),
        g.width_cells,
        g.height_cells
    ));
    let grids = simulate_measurements(&spec)?;
    let mut meas = create_sequence(ctx.path(MEASUREMENTS), g, MEASUREMENT_CHANNELS, grids.len())?;
    for m in &grids {
        meas.push(&m.to_raw())?;
    }
    meas.finish()?;

    let reference = grids[0].ego_pose;
    let mut cells = create_sequence(ctx.path(TRUTH_CELLS), g, 1, grids.len())?;
    let mut records = Vec::new();
    for (frame, m) in grids.iter().enumerate() {
        let gt = ground_truth(&spec, m.timestamp)?;
        cells.push(&RawFrame {
            timestamp: gt.timestamp,
            ego_pose: gt.ego_pose,
            data: gt.cells.iter().map(|c| f32::from(c.code())).collect(),
        })?;
        for b in gt.boxes.iter().filter(|b| b.dynamic) {
            let local = box_world_to_local(reference, &b.object_box);
            records.push(BoxRecord {
                frame,
                track_id: b.id,
                east: local.center_east,
                north: local.center_north,
                width: local.width,
                length: local.length,
                orientation: local.orientation,
            });
        }
    }
    cells.finish()?;
    let mut w = csv::Writer::from_writer(create(&ctx.path(TRUTH_BOXES))?);
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    // Later stages and reruns see exactly the simulated scene.
    std::fs::write(ctx.path(SCENARIO), toml::to_string(&spec)?)?;
    Ok(())
}

// fuse

pub fn fuse(ctx: &Env) -> Result<()> {
    let path = ctx.path(MEASUREMENTS);
    let seq = load_grid(&path)?;
    ensure!(
        seq.channels() == MEASUREMENT_CHANNELS,
        "{} has {} channels, expected {}",
        path.display(),
        seq.channels(),
        MEASUREMENT_CHANNELS
    );
    let grids: Vec<MeasurementGrid> =
        seq.frames().iter().map(|f| MeasurementGrid::from_raw(*seq.geometry(), f)).collect();
    ctx.note(format!("fuse: {} frames", grids.len()));
    let frames = fuse_sequence(&grids, &ctx.config.filter)?;
    write_dogma_sequence(&frames, ctx.path(DOGMA))?;
    Ok(())
}

// autolabel

#[derive(Serialize, Deserialize)]
struct TrackRow {
    id: usize,
    start_frame: usize,
    frames: usize,
    width: f64,
    length: f64,
    valid: bool,
}

pub fn autolabel_stage(ctx: &Env) -> Result<()> {
    let path = ctx.path(DOGMA);
    let frames = read_dogma_sequence(&path).with_context(|| format!("cannot read {}", path.display()))?;
    ctx.note(format!("autolabel: {} frames", frames.len()));
    let out = autolabel(&frames, &ctx.config.autolabel)?;
    let g = *frames[0].geometry();
    write_static_maps(&out.labels, g, ctx.path(STATIC_MAPS))?;
    write_boxes_csv(&out.labels, create(&ctx.path(LABEL_BOXES))?)?;

    let mut tracks = csv::Writer::from_writer(create(&ctx.path(TRACKS))?);
    for t in &out.tracks {
        tracks.serialize(TrackRow {
            id: t.id,
            start_frame: t.start_frame,
            frames: t.len(),
            width: t.width,
            length: t.length,
            valid: t.valid,
        })?;
    }
    tracks.flush()?;

    // Soft dynamic score per cell and frame; −1 where the cell was never
    // seen occupied.
    let cls = &out.classification;
    let mut scores = create_sequence(ctx.path(DYNAMIC_SCORES), g, 1, out.aligned.len())?;
    for (t, f) in out.aligned.iter().enumerate() {
        scores.push(&RawFrame {
            timestamp: f.timestamp(),
            ego_pose: f.ego_pose(),
            data: cls.score_image(t).into_iter().map(|s| s.map_or(-1.0, |v| v as f32)).collect(),
        })?;
    }
    scores.finish()?;
    ctx.note(format!(
        "autolabel: {} tracks, {} valid",
        out.tracks.len(),
        out.tracks.iter().filter(|t| t.valid).count()
    ));
    Ok(())
}

// encode

pub fn encode_stage(ctx: &Env) -> Result<()> {
    let stride = ctx.config.encode.frame_stride;
    ensure!(stride > 0, "encode.frame_stride must be positive");
    let anchors = &ctx.config.anchors;
    let maps = open_grid(&ctx.path(STATIC_MAPS))?;
    ensure!(maps.channels() == 1, "static maps must have one channel");
    let g = maps.geometry();
    let n = maps.frame_count();
    let boxes = boxes_by_frame(&read_boxes(&ctx.path(LABEL_BOXES))?, n);
    let selected = n.div_ceil(stride);
    ctx.note(format!("encode: {selected} of {n} frames, {} channels", anchors.container_channels()));
    let mut out = create_sequence(ctx.path(LABEL_TENSORS), g, anchors.container_channels(), selected)?;
    for (i, map) in maps.enumerate().step_by(stride) {
        let map = map?;
        let mut t = encode(&boxes[i], &g, anchors)?;
        t.set_static_map(&map.data)?;
        out.push(&t.to_raw_frame(map.timestamp, map.ego_pose))?;
    }
    out.finish()?;
    Ok(())
}

// loss-check

#[derive(Debug, Serialize, Deserialize)]
pub struct GradientCheck {
    pub patch_cells: usize,
    pub samples: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub format_version: u32,
    pub frames: usize,
    pub prediction_noise: f64,
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub gradient_check: GradientCheck,
}

fn seed_of(ctx: &Env) -> Result<u64> {
    match ctx.config.seed {
        Some(s) => Ok(s),
        None => Ok(read_toml::<ScenarioSpec>(&ctx.path(SCENARIO))?.rng_seed),
    }
}

/// Copies a `side`×`side` window starting at (e0, n0) into its own tensors.
fn crop(t: &LabelTensors, g: &GridGeometry, e0: usize, n0: usize, side: usize, anchors: &dogma_core::anchor::AnchorSet) -> Result<(GridGeometry, LabelTensors)> {
    let sub = GridGeometry::centered(side, g.cell_size)?;
    let mut out = LabelTensors::zeros(&sub, anchors);
    for n in 0..side {
        for e in 0..side {
            let (src, dst) = (g.index(e0 + e, n0 + n), sub.index(e, n));
            for (to, from) in out.heads_mut().into_iter().zip(t.heads()) {
                to.cell_mut(dst).copy_from_slice(from.cell(src));
            }
        }
    }
    Ok((sub, out))
}

pub fn loss_check(ctx: &Env) -> Result<()> {
    let cfg = &ctx.config.loss_check;
    let anchors = &ctx.config.anchors;
    let reader = open_grid(&ctx.path(LABEL_TENSORS))?;
    ensure!(
        reader.channels() == anchors.container_channels(),
        "label tensors have {} channels, anchors need {}",
        reader.channels(),
        anchors.container_channels()
    );
    let g = reader.geometry();
    let noise = Normal::new(0.0, cfg.prediction_noise).context("invalid prediction noise")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(ctx)?);
    let mut sum = LossBreakdown { static_term: 0.0, iou: 0.0, d_width: 0.0, d_length: 0.0, d_orient: 0.0 };
    let mut first: Option<(LabelTensors, LabelTensors)> = None;
    let mut frames = 0;
    for raw in reader {
        let labels = LabelTensors::from_raw_frame(&raw?, &g, anchors)?;
        let mut preds = labels.clone();
        for head in preds.heads_mut() {
            for v in head.as_mut_slice() {
                *v += noise.sample(&mut rng);
            }
        }
        let (_, b) = total_loss(&preds, &labels, &weight_map(&labels), &ctx.config.loss)?;
        sum.static_term += b.static_term;
        sum.iou += b.iou;
        sum.d_width += b.d_width;
        sum.d_length += b.d_length;
        sum.d_orient += b.d_orient;
        frames += 1;
        if first.is_none() {
            first = Some((preds, labels));
        }
    }
    let Some((preds, labels)) = first else { bail!("no label frames") };

    // Finite differences on a patch around the strongest foreground cell, so
    // each loss evaluation stays cheap.
    let a = weight_map(&labels).a;
    let best = (0..a.len()).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap_or(0);
    let side = cfg.patch_cells.clamp(1, g.width_cells.min(g.height_cells));
    let (e, n) = g.coords(best);
    let e0 = e.saturating_sub(side / 2).min(g.width_cells - side);
    let n0 = n.saturating_sub(side / 2).min(g.height_cells - side);
    let (sub, mut p) = crop(&preds, &g, e0, n0, side, anchors)?;
    let (_, y) = crop(&labels, &g, e0, n0, side, anchors)?;
    let a_map = weight_map(&y);
    let grad = loss_gradient(&p, &y, &a_map, &ctx.config.loss)?;
    let mut worst: f64 = 0.0;
    let heads = 5;
    for _ in 0..cfg.gradient_samples {
        let h = rng.random_range(0..heads);
        let c = rng.random_range(0..sub.cell_count());
        let k = rng.random_range(0..p.heads()[h].channels());
        let orig = p.heads()[h].get(c, k);
        p.heads_mut()[h].set(c, k, orig + cfg.step);
        let (up, _) = total_loss(&p, &y, &a_map, &ctx.config.loss)?;
        p.heads_mut()[h].set(c, k, orig - cfg.step);
        let (down, _) = total_loss(&p, &y, &a_map, &ctx.config.loss)?;
        p.heads_mut()[h].set(c, k, orig);
        let fd = (up - down) / (2.0 * cfg.step);
        let an = grad.heads()[h].get(c, k);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
    }
    let report = LossReport {
        format_version: ARTIFACT_VERSION,
        frames,
        prediction_noise: cfg.prediction_noise,
        total: sum.total(),
        breakdown: sum,
        gradient_check: GradientCheck {
            patch_cells: side,
            samples: cfg.gradient_samples,
            max_relative_error: worst,
            passed: worst < cfg.tolerance,
        },
    };
    write_toml(&report, &ctx.path(LOSS_CHECK))?;
    ctx.note(format!(
        "loss-check: total {:.6}, gradient max rel. error {:.2e}",
        report.total, worst
    ));
    ensure!(report.gradient_check.passed, "gradient check failed: max relative error {worst:e}");
    Ok(())
}

// decode-eval

#[derive(Serialize)]
struct DetectionRow {
    frame: usize,
    score: f64,
    east: f64,
    north: f64,
    width: f64,
    length: f64,
    orientation: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub cells: usize,
    pub balanced_accuracy: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub frames: usize,
    pub detections: usize,
    pub ground_truths: usize,
    pub ap: Option<f64>,
    pub rmse: Option<BoxRmse>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub format_version: u32,
    pub segmentation: SegmentationMetrics,
    /// Boxes decoded from the label tensors.
    pub decoded: DetectionMetrics,
    /// Autolabel boxes of every frame.
    pub labels: DetectionMetrics,
}

fn detection_metrics(dets: &[Vec<ObjectBox>], gts: &[Vec<ObjectBox>], ctx: &Env) -> DetectionMetrics {
    let sweep = &ctx.config.eval.iou_sweep;
    DetectionMetrics {
        frames: dets.len(),
        detections: dets.iter().map(Vec::len).sum(),
        ground_truths: gts.iter().map(Vec::len).sum(),
        ap: precision_recall(dets, gts, sweep).ok().map(|(_, ap)| ap),
        rmse: sequence_rmse(dets, gts, ctx.config.eval.rmse_iou).ok(),
    }
}

fn segmentation(ctx: &Env, g: &GridGeometry) -> Result<SegmentationMetrics> {
    let truth = open_grid(&ctx.path(TRUTH_CELLS))?;
    let scores = open_grid(&ctx.path(DYNAMIC_SCORES))?;
    ensure!(
        truth.geometry() == *g && scores.geometry() == *g,
        "truth and score grids differ in geometry"
    );
    ensure!(truth.frame_count() == scores.frame_count(), "truth and score frame counts differ");
    let threshold = ctx.config.autolabel.score_threshold;
    let (mut s, mut l) = (Vec::new(), Vec::new());
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (t, sc) in truth.zip(scores) {
        let (t, sc) = (t?, sc?);
        for (&code, &score) in t.data.iter().zip(&sc.data) {
            let dynamic = match CellTruth::from_code(code as u8) {
                Some(CellTruth::Dynamic) => true,
                Some(CellTruth::Static) => false,
                _ => continue,
            };
            if score < 0.0 {
                continue;
            }
            let score = f64::from(score);
            s.push(score);
            l.push(dynamic);
            match (score >= threshold, dynamic) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
            }
        }
    }
    let ba = (tp + fn_ > 0 && tn + fp > 0)
        .then(|| 0.5 * (tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64));
    let auc = match roc(&s, &l) {
        Ok((curve, auc)) => {
            write_curve_csv(&curve, create(&ctx.path(ROC_CURVE))?)?;
            Some(auc)
        }
        Err(_) => {
            write_curve_csv(&[], create(&ctx.path(ROC_CURVE))?)?;
            None
        }
    };
    Ok(SegmentationMetrics { cells: s.len(), balanced_accuracy: ba, auc })
}

pub fn decode_eval(ctx: &Env) -> Result<()> {
    let anchors = &ctx.config.anchors;
    let reader = open_grid(&ctx.path(LABEL_TENSORS))?;
    let g = reader.geometry();
    let truth_times: Vec<f64> = {
        let t = open_grid(&ctx.path(TRUTH_CELLS))?;
        t.map(|f| f.map(|f| f.timestamp)).collect::<Result<_, _>>()?
    };
    let truth = boxes_by_frame(&read_boxes(&ctx.path(TRUTH_BOXES))?, truth_times.len());
    let labels = boxes_by_frame(&read_boxes(&ctx.path(LABEL_BOXES))?, truth_times.len());

    let mut rows = csv::Writer::from_writer(create(&ctx.path(DETECTIONS))?);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for raw in reader {
        let raw = raw?;
        let Some(frame) = truth_times.iter().position(|&t| (t - raw.timestamp).abs() < 1e-9) else {
            bail!("label frame at t = {} has no ground truth", raw.timestamp);
        };
        let tensors = LabelTensors::from_raw_frame(&raw, &g, anchors)?;
        let boxes = decode(&tensors, &g, anchors, &ctx.config.decode)?;
        for b in &boxes {
            rows.serialize(DetectionRow {
                frame,
                score: b.score.unwrap_or(0.0),
                east: b.center_east,
                north: b.center_north,
                width: b.width,
                length: b.length,
                orientation: b.orientation,
            })?;
        }
        dets.push(boxes);
        gts.push(truth[frame].clone());
    }
    rows.flush()?;
    let decoded = detection_metrics(&dets, &gts, ctx);
    match precision_recall(&dets, &gts, &ctx.config.eval.iou_sweep) {
        Ok((curve, _)) => write_curve_csv(&curve, create(&ctx.path(PR_CURVE))?)?,
        Err(_) => write_curve_csv(&[], create(&ctx.path(PR_CURVE))?)?,
    }
    let metrics = Metrics {
        format_version: ARTIFACT_VERSION,
        segmentation: segmentation(ctx, &g)?,
        decoded,
        labels: detection_metrics(&labels, &truth, ctx),
    };
    write_toml(&metrics, &ctx.path(METRICS))?;
    ctx.note(format!(
        "decode-eval: {} detections in {} frames, AP {}",
        metrics.decoded.detections,
        metrics.decoded.frames,
        metrics.decoded.ap.map_or("n/a".into(), |v| format!("{v:.3}"))
    ));
    Ok(())
}

// report

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub metrics: Metrics,
    pub loss: LossReport,
    pub artifacts: Vec<Artifact>,
}

pub fn report(ctx: &Env) -> Result<()> {
    let metrics: Metrics = read_toml(&ctx.path(METRICS))?;
    let loss: LossReport = read_toml(&ctx.path(LOSS_CHECK))?;
    let artifacts = [
        SCENARIO, MEASUREMENTS, TRUTH_CELLS, TRUTH_BOXES, DOGMA, STATIC_MAPS, LABEL_BOXES, TRACKS, DYNAMIC_SCORES,
        LABEL_TENSORS, LOSS_CHECK, DETECTIONS, PR_CURVE, ROC_CURVE, METRICS,
    ]
    .iter()
    .map(|name| {
        let path = ctx.path(name);
        let meta = std::fs::metadata(&path).with_context(|| format!("missing artifact {}", path.display()))?;
        Ok(Artifact { name: name.to_string(), bytes: meta.len() })
    })
    .collect::<Result<Vec<_>>>()?;
    let summary = Summary { format_version: ARTIFACT_VERSION, metrics, loss, artifacts };
    write_toml(&summary, &ctx.path(SUMMARY))?;
    if !ctx.quiet {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let m = &summary.metrics;
        let mut out = std::io::stdout().lock();
        writeln!(out, "segmentation  BA {}  AUC {}", fmt(m.segmentation.balanced_accuracy), fmt(m.segmentation.auc))?;
        writeln!(out, "labels        AP {}  ({} boxes)", fmt(m.labels.ap), m.labels.detections)?;
        writeln!(out, "decoded       AP {}  ({} boxes)", fmt(m.decoded.ap), m.decoded.detections)?;
        writeln!(
            out,
            "loss          {:.6}  gradient check {}",
            summary.loss.total,
            if summary.loss.gradient_check.passed { "passed" } else { "FAILED" }
        )?;
    }
    Ok(())
}
