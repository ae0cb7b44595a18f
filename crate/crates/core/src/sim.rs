//! Deterministic synthetic scenes: rectangles moving along piecewise
//! linear trajectories, observed by a single ray-casting 2D lidar.
//!
//! Grids produced here are attached to the ego vehicle: a grid geometry is
//! expressed in the ego's local frame (x along the ego heading), so a
//! standing ego yields grids that coincide with the world frame whenever
//! its pose is the identity.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_pi, ObjectBox, Point};
use crate::grid::{ds_combine, GridGeometry, Masses, Pose, RawFrame};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("time {t} outside scenario duration [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("ego pose ({east}, {north}) lies outside the grid")]
    EgoOutsideGrid { east: f64, north: f64 },
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Static,
    Dynamic,
}

/// Timed pose; `heading` is the direction of the object's length axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub east: f64,
    pub north: f64,
    #[serde(default)]
    pub heading: f64,
}

/// Piecewise linear pose interpolation with headings along the shortest arc.
/// Outside the waypoint span the nearest end pose is held.
fn interpolate(trajectory: &[Waypoint], t: f64) -> (Pose, [f64; 2]) {
    let first = trajectory[0];
    let last = trajectory[trajectory.len() - 1];
    if trajectory.len() == 1 || t < first.t {
        return (Pose::new(first.east, first.north, first.heading), [0.0; 2]);
    }
    if t >= last.t {
        return (Pose::new(last.east, last.north, last.heading), [0.0; 2]);
    }
    let i = trajectory.partition_point(|w| w.t <= t) - 1;
    let (a, b) = (trajectory[i], trajectory[i + 1]);
    let dt = b.t - a.t;
    let s = (t - a.t) / dt;
    let heading = a.heading + s * wrap_pi(b.heading - a.heading);
    let velocity = [(b.east - a.east) / dt, (b.north - a.north) / dt];
    (
        Pose::new(
            a.east + s * (b.east - a.east),
            a.north + s * (b.north - a.north),
            heading,
        ),
        velocity,
    )
}

fn validate_trajectory(trajectory: &[Waypoint], what: &str) -> Result<(), SimError> {
    if trajectory.is_empty() {
        return Err(SimError::InvalidScenario(format!("{what}: empty trajectory")));
    }
    for w in trajectory {
        if ![w.t, w.east, w.north, w.heading].iter().all(|v| v.is_finite()) {
            return Err(SimError::InvalidScenario(format!("{what}: non-finite waypoint")));
        }
    }
    for pair in trajectory.windows(2) {
        if pair[1].t <= pair[0].t {
            return Err(SimError::InvalidScenario(format!(
                "{what}: waypoint times must strictly increase"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(default)]
    pub name: String,
    pub width: f64,
    pub length: f64,
    pub kind: ObjectKind,
    pub trajectory: Vec<Waypoint>,
}

impl ObjectSpec {
    pub fn pose_at(&self, t: f64) -> Pose {
        interpolate(&self.trajectory, t).0
    }

    pub fn velocity_at(&self, t: f64) -> [f64; 2] {
        match self.kind {
            ObjectKind::Static => [0.0; 2],
            ObjectKind::Dynamic => interpolate(&self.trajectory, t).1,
        }
    }

    pub fn box_at(&self, t: f64) -> ObjectBox {
        let p = self.pose_at(t);
        ObjectBox::new(p.east, p.north, self.width, self.length, p.heading)
            .expect("validated object dimensions")
    }

    fn validate(&self, index: usize) -> Result<(), SimError> {
        let what = format!("object {index} ({})", self.name);
        if !(self.width > 0.0 && self.length > 0.0)
            || !self.width.is_finite()
            || !self.length.is_finite()
        {
            return Err(SimError::InvalidScenario(format!(
                "{what}: width and length must be positive"
            )));
        }
        validate_trajectory(&self.trajectory, &what)
    }
}

fn default_span() -> f64 {
    TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub beam_count: usize,
    #[serde(default = "default_span")]
    pub angular_span: f64,
    pub max_range: f64,
    #[serde(default)]
    pub range_noise_sigma: f64,
    #[serde(default)]
    pub dropout_prob: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            beam_count: 1440,
            angular_span: TAU,
            max_range: 40.0,
            range_noise_sigma: 0.0,
            dropout_prob: 0.0,
        }
    }
}

impl SensorSpec {
    fn is_full_circle(&self) -> bool {
        self.angular_span >= TAU - 1e-12
    }

    /// Beam azimuths relative to the ego heading, strictly increasing.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.beam_count;
        if self.is_full_circle() {
            (0..n).map(|i| i as f64 * TAU / n as f64).collect()
        } else if n == 1 {
            vec![0.0]
        } else {
            let step = self.angular_span / (n - 1) as f64;
            (0..n)
                .map(|i| -self.angular_span / 2.0 + i as f64 * step)
                .collect()
        }
    }

    /// Whether a direction (relative to the ego heading) lies in the field of view.
    pub fn covers(&self, relative_azimuth: f64) -> bool {
        self.is_full_circle() || wrap_pi(relative_azimuth).abs() <= self.angular_span / 2.0 + 1e-12
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(format!("sensor: {m}")));
        if self.beam_count == 0 {
            return bad("beam_count must be at least 1");
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return bad("max_range must be positive");
        }
        if !(self.range_noise_sigma >= 0.0) {
            return bad("range_noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if !(self.angular_span > 0.0 && self.angular_span <= TAU + 1e-12) {
            return bad("angular_span must lie in (0, 2π]");
        }
        Ok(())
    }
}

/// Masses deposited per beam by the inverse sensor model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseSensorModel {
    pub p_hit: f64,
    pub p_free: f64,
}

impl Default for InverseSensorModel {
    fn default() -> Self {
        Self {
            p_hit: 0.75,
            p_free: 0.45,
        }
    }
}

fn default_ego() -> Vec<Waypoint> {
    vec![Waypoint {
        t: 0.0,
        east: 0.0,
        north: 0.0,
        heading: 0.0,
    }]
}

fn default_static_speed() -> f64 {
    0.1
}

/// Declarative scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub duration: f64,
    pub frame_rate: f64,
    pub rng_seed: u64,
    pub grid: GridGeometry,
    #[serde(default = "default_ego")]
    pub ego: Vec<Waypoint>,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub inverse_model: InverseSensorModel,
    /// Objects slower than this count as static in the ground truth.
    #[serde(default = "default_static_speed")]
    pub static_speed_threshold: f64,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidScenario("duration must be positive".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(SimError::InvalidScenario("frame_rate must be positive".into()));
        }
        if self.objects.is_empty() {
            return Err(SimError::InvalidScenario(
                "scenario needs at least one object or wall".into(),
            ));
        }
        self.grid
            .validate()
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        self.sensor.validate()?;
        validate_trajectory(&self.ego, "ego")?;
        for (i, o) in self.objects.iter().enumerate() {
            o.validate(i)?;
        }
        let m = self.inverse_model;
        if !(0.0..1.0).contains(&m.p_hit) || !(0.0..1.0).contains(&m.p_free) {
            return Err(SimError::InvalidScenario(
                "inverse model masses must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration * self.frame_rate).round() as usize).max(1)
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.frame_rate
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.frame_count()).map(|i| self.frame_time(i)).collect()
    }

    pub fn ego_pose_at(&self, t: f64) -> Pose {
        interpolate(&self.ego, t).0
    }

    fn check_time(&self, t: f64) -> Result<(), SimError> {
        if !(t >= -1e-9 && t <= self.duration + 1e-9) {
            return Err(SimError::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(())
    }
}

/// One lidar beam: azimuth relative to the ego heading and range, or
/// `None` when nothing lies within range. Dropped-out beams are absent
/// from the scan altogether.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub azimuth: f64,
    pub range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub timestamp: f64,
    pub ego_pose: Pose,
    pub max_range: f64,
    pub beams: Vec<Beam>,
}

/// Distance along a ray to the first entry into a rectangle, if any.
/// Rays starting inside the rectangle report nothing.
pub fn ray_box_intersection(origin: Point, direction: Point, b: &ObjectBox) -> Option<f64> {
    let o = b.to_local(origin);
    let (u, v) = b.axes();
    let d = [
        direction[0] * u[0] + direction[1] * u[1],
        direction[0] * v[0] + direction[1] * v[1],
    ];
    let half = [b.length / 2.0, b.width / 2.0];
    let (mut t_enter, mut t_exit) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..2 {
        if d[axis].abs() < 1e-15 {
            if o[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let t1 = (-half[axis] - o[axis]) / d[axis];
        let t2 = (half[axis] - o[axis]) / d[axis];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    (t_enter > 0.0 && t_enter <= t_exit).then_some(t_enter)
}

fn nearest_hit(origin: Point, direction: Point, boxes: &[ObjectBox]) -> Option<f64> {
    boxes
        .iter()
        .filter_map(|b| ray_box_intersection(origin, direction, b))
        .min_by(|a, b| a.total_cmp(b))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for one (seed, frame, beam) triple.
fn beam_rng(seed: u64, frame: u64, beam: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(frame)) ^ beam))
}

/// Casts every beam of the sensor at time `t`.
pub fn simulate_scan(scenario: &ScenarioSpec, t: f64) -> Result<LidarScan, SimError> {
    scenario.check_time(t)?;
    let ego = scenario.ego_pose_at(t);
    let boxes: Vec<ObjectBox> = scenario.objects.iter().map(|o| o.box_at(t)).collect();
    let sensor = &scenario.sensor;
    let frame = (t * scenario.frame_rate).round().max(0.0) as u64;
    let noise = (sensor.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, sensor.range_noise_sigma).expect("validated sigma"));
    let origin = [ego.east, ego.north];
    let beams = sensor
        .azimuths()
        .into_iter()
        .enumerate()
        .filter_map(|(i, azimuth)| {
            let (s, c) = (ego.heading + azimuth).sin_cos();
            let exact = nearest_hit(origin, [c, s], &boxes).filter(|&r| r <= sensor.max_range);
            let range = if noise.is_some() || sensor.dropout_prob > 0.0 {
                let mut rng = beam_rng(scenario.rng_seed, frame, i as u64);
                if sensor.dropout_prob > 0.0 && rng.random::<f64>() < sensor.dropout_prob {
                    // A dropped beam carries no information, not even free space.
                    return None;
                }
                exact.and_then(|r| {
                    let noisy = r + noise.map_or(0.0, |n| n.sample(&mut rng));
                    (noisy <= sensor.max_range).then(|| noisy.max(1e-3))
                })
            } else {
                exact
            };
            Some(Beam { azimuth, range })
        })
        .collect();
    Ok(LidarScan {
        timestamp: t,
        ego_pose: ego,
        max_range: sensor.max_range,
        beams,
    })
}

/// Per-cell measurement masses for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGrid {
    pub geometry: GridGeometry,
    pub timestamp: f64,
    /// World pose of the ego when the scan was taken.
    pub ego_pose: Pose,
    pub masses: Vec<Masses>,
}

/// Channel count of a measurement grid in the sequence container.
pub const MEASUREMENT_CHANNELS: usize = 2;

impl MeasurementGrid {
    pub fn to_raw(&self) -> RawFrame {
        RawFrame {
            timestamp: self.timestamp,
            ego_pose: self.ego_pose,
            data: self
                .masses
                .iter()
                .flat_map(|m| [m.occ as f32, m.free as f32])
                .collect(),
        }
    }

    pub fn from_raw(geometry: GridGeometry, raw: &RawFrame) -> Self {
        Self {
            geometry,
            timestamp: raw.timestamp,
            ego_pose: raw.ego_pose,
            masses: raw
                .data
                .chunks_exact(MEASUREMENT_CHANNELS)
                .map(|c| Masses::new(c[0] as f64, c[1] as f64))
                .collect(),
        }
    }
}

/// Cells traversed by the segment from `start` to `end` (continuous cell
/// coordinates), in order, stopping where the segment leaves the grid.
pub fn traverse_cells(
    geometry: &GridGeometry,
    start: [f64; 2],
    end: [f64; 2],
) -> Vec<(usize, usize)> {
    let (w, h) = (geometry.width_cells as i64, geometry.height_cells as i64);
    let mut cell = [start[0].floor() as i64, start[1].floor() as i64];
    let last = [end[0].floor() as i64, end[1].floor() as i64];
    let d = [end[0] - start[0], end[1] - start[1]];
    let mut step = [0i64; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for a in 0..2 {
        if d[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 - start[a]) / d[a];
            t_delta[a] = 1.0 / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (start[a] - cell[a] as f64) / -d[a];
            t_delta[a] = -1.0 / d[a];
        }
    }
    let inside = |c: [i64; 2]| c[0] >= 0 && c[1] >= 0 && c[0] < w && c[1] < h;
    let mut out = Vec::new();
    let budget = (last[0] - cell[0]).unsigned_abs() + (last[1] - cell[1]).unsigned_abs() + 1;
    for _ in 0..budget {
        if !inside(cell) {
            break;
        }
        out.push((cell[0] as usize, cell[1] as usize));
        if cell == last {
            break;
        }
        let a = if t_max[0] < t_max[1] { 0 } else { 1 };
        if t_max[a] > 1.0 {
            break;
        }
        cell[a] += step[a];
        t_max[a] += t_delta[a];
    }
    out
}

/// Inverse sensor model: free mass along each beam, occupied mass in the
/// cell containing the hit endpoint. Contributions of several beams to one
/// cell are fused with Dempster's rule.
///
/// `sensor_pose` is the sensor pose expressed in the grid's own frame.
pub fn scan_to_measurement_grid(
    scan: &LidarScan,
    geometry: &GridGeometry,
    sensor_pose: Pose,
    model: &InverseSensorModel,
) -> Result<MeasurementGrid, SimError> {
    if !geometry.contains(sensor_pose.east, sensor_pose.north) {
        return Err(SimError::EgoOutsideGrid {
            east: sensor_pose.east,
            north: sensor_pose.north,
        });
    }
    let n = geometry.cell_count();
    let mut hits = vec![0u32; n];
    let mut frees = vec![0u32; n];
    let start = geometry.to_cell_coords(sensor_pose.east, sensor_pose.north);
    for beam in &scan.beams {
        let (s, c) = (sensor_pose.heading + beam.azimuth).sin_cos();
        let length = beam.range.unwrap_or(scan.max_range);
        let end_world = [
            sensor_pose.east + c * length,
            sensor_pose.north + s * length,
        ];
        let end = geometry.to_cell_coords(end_world[0], end_world[1]);
        let cells = traverse_cells(geometry, start, end);
        let end_cell = geometry.cell_of(end_world[0], end_world[1]);
        for &(e, nn) in &cells {
            let idx = geometry.index(e, nn);
            if beam.range.is_some() && Some((e, nn)) == end_cell {
                hits[idx] += 1;
                break;
            }
            frees[idx] += 1;
        }
    }
    const CAP: f64 = 1.0 - 1e-9;
    let masses = hits
        .iter()
        .zip(&frees)
        .map(|(&h, &f)| {
            if h == 0 && f == 0 {
                return Masses::VACUOUS;
            }
            let occ = (1.0 - (1.0 - model.p_hit).powi(h as i32)).min(CAP);
            let free = (1.0 - (1.0 - model.p_free).powi(f as i32)).min(CAP);
            ds_combine(Masses::new(occ, 0.0), Masses::new(0.0, free)).unwrap_or(Masses::VACUOUS)
        })
        .collect();
    Ok(MeasurementGrid {
        geometry: *geometry,
        timestamp: scan.timestamp,
        ego_pose: scan.ego_pose,
        masses,
    })
}

/// World position of a point given in a frame attached to `pose`.
pub fn local_to_world(pose: Pose, p: Point) -> Point {
    let (s, c) = pose.heading.sin_cos();
    [
        pose.east + c * p[0] - s * p[1],
        pose.north + s * p[0] + c * p[1],
    ]
}

/// Coordinates of a world point in a frame attached to `pose`.
pub fn world_to_local(pose: Pose, p: Point) -> Point {
    let (s, c) = pose.heading.sin_cos();
    let d = [p[0] - pose.east, p[1] - pose.north];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

/// Expresses a world box in a frame attached to `pose`.
pub fn box_world_to_local(pose: Pose, b: &ObjectBox) -> ObjectBox {
    let c = world_to_local(pose, b.center());
    ObjectBox {
        center_east: c[0],
        center_north: c[1],
        orientation: crate::geometry::canonical_orientation(b.orientation - pose.heading),
        ..*b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellTruth {
    Free = 0,
    Static = 1,
    Dynamic = 2,
    Unobservable = 3,
}

impl CellTruth {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Free),
            1 => Some(Self::Static),
            2 => Some(Self::Dynamic),
            3 => Some(Self::Unobservable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthBox {
    /// Index of the object in the scenario.
    pub id: usize,
    /// Exact rectangle in world coordinates.
    pub object_box: ObjectBox,
    pub speed: f64,
    pub dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub timestamp: f64,
    pub ego_pose: Pose,
    pub boxes: Vec<TruthBox>,
    /// Per-cell classes over the scenario grid (ego-attached).
    pub cells: Vec<CellTruth>,
}

/// Exact simulated rectangles and per-cell truth at time `t`.
///
/// A cell belongs to an object when its center lies inside the rectangle
/// grown by half a cell, so every cell that can receive a hit from the
/// object's boundary is attributed to it. Remaining cells are free when the
/// sensor has an unobstructed line of sight to their center within range,
/// and unobservable otherwise.
pub fn ground_truth(scenario: &ScenarioSpec, t: f64) -> Result<GroundTruth, SimError> {
    scenario.check_time(t)?;
    let ego = scenario.ego_pose_at(t);
    let geometry = scenario.grid;
    let boxes: Vec<TruthBox> = scenario
        .objects
        .iter()
        .enumerate()
        .map(|(id, o)| {
            let v = o.velocity_at(t);
            let speed = v[0].hypot(v[1]);
            TruthBox {
                id,
                object_box: o.box_at(t),
                speed,
                dynamic: o.kind == ObjectKind::Dynamic && speed > scenario.static_speed_threshold,
            }
        })
        .collect();
    let rects: Vec<ObjectBox> = boxes.iter().map(|b| b.object_box).collect();
    let margin = geometry.cell_size / 2.0;
    let origin = [ego.east, ego.north];
    let mut cells = Vec::with_capacity(geometry.cell_count());
    for n in 0..geometry.height_cells {
        for e in 0..geometry.width_cells {
            let p = local_to_world(ego, geometry.cell_center(e, n));
            let mut class = None;
            for b in &boxes {
                if b.object_box.contains_with_margin(p, margin) {
                    class = Some(if b.dynamic {
                        CellTruth::Dynamic
                    } else {
                        class.unwrap_or(CellTruth::Static)
                    });
                }
            }
            let class = class.unwrap_or_else(|| {
                if line_of_sight(scenario, ego, origin, p, &rects) {
                    CellTruth::Free
                } else {
                    CellTruth::Unobservable
                }
            });
            cells.push(class);
        }
    }
    Ok(GroundTruth {
        timestamp: t,
        ego_pose: ego,
        boxes,
        cells,
    })
}

fn line_of_sight(
    scenario: &ScenarioSpec,
    ego: Pose,
    origin: Point,
    target: Point,
    rects: &[ObjectBox],
) -> bool {
    let d = [target[0] - origin[0], target[1] - origin[1]];
    let dist = d[0].hypot(d[1]);
    if dist > scenario.sensor.max_range {
        return false;
    }
    if dist < 1e-12 {
        return true;
    }
    let azimuth = d[1].atan2(d[0]) - ego.heading;
    if !scenario.sensor.covers(azimuth) {
        return false;
    }
    let dir = [d[0] / dist, d[1] / dist];
    nearest_hit(origin, dir, rects).is_none_or(|r| r >= dist)
}

/// Simulates every frame of a scenario into measurement grids.
pub fn simulate_measurements(scenario: &ScenarioSpec) -> Result<Vec<MeasurementGrid>, SimError> {
    scenario.validate()?;
    scenario
        .frame_times()
        .into_iter()
        .map(|t| {
            let scan = simulate_scan(scenario, t)?;
            scan_to_measurement_grid(
                &scan,
                &scenario.grid,
                Pose::default(),
                &scenario.inverse_model,
            )
        })
        .collect()
}

/// Angle of the world direction `(east, north)`, in `[-π, π)`.
pub fn bearing(east: f64, north: f64) -> f64 {
    wrap_pi(north.atan2(east))
}
