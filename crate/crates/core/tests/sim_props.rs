use dogma_core::filter::{fuse_sequence, FilterConfig};
use dogma_core::sim::{
    ground_truth, simulate_measurements, simulate_scan, CellTruth, ScenarioSpec,
};
use dogma_core::ObjectBox;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Obstacle {
    east: f64,
    north: f64,
    width: f64,
    length: f64,
    heading: f64,
}

fn obstacle() -> impl Strategy<Value = Obstacle> {
    (2.5..6.0f64, -std::f64::consts::PI..std::f64::consts::PI, 0.3..2.0f64, 0.5..4.0f64, -1.6..1.6f64)
        .prop_map(|(r, bearing, width, length, heading)| Obstacle {
            east: r * bearing.cos(),
            north: r * bearing.sin(),
            width,
            length,
            heading,
        })
}

fn scenario(obstacles: &[Obstacle], seed: u64, noise: f64, dropout: f64, mover: bool) -> ScenarioSpec {
    let mut text = format!(
        "duration = 1.0\nframe_rate = 10.0\nrng_seed = {seed}\n\
         [grid]\nwidth_cells = 101\nheight_cells = 101\ncell_size = 0.15\norigin_east = -7.575\norigin_north = -7.575\n\
         [sensor]\nbeam_count = 720\nmax_range = 12.0\nrange_noise_sigma = {noise}\ndropout_prob = {dropout}\n"
    );
    for (i, o) in obstacles.iter().enumerate() {
        text += &format!(
            "[[objects]]\nname = \"o{i}\"\nkind = \"static\"\nwidth = {}\nlength = {}\n\
             trajectory = [{{ t = 0.0, east = {}, north = {}, heading = {} }}]\n",
            o.width, o.length, o.east, o.north, o.heading
        );
    }
    if mover {
        text += "[[objects]]\nname = \"walker\"\nkind = \"dynamic\"\nwidth = 0.6\nlength = 0.8\n\
                 trajectory = [{ t = 0.0, east = -3.0, north = -1.5, heading = 0.0 }, { t = 1.0, east = -1.5, north = -1.5, heading = 0.0 }]\n";
    }
    ScenarioSpec::from_toml_str(&text).unwrap()
}

/// Ray against each edge segment of the rectangle; first crossing in front
/// of the origin.
fn edge_oracle(origin: [f64; 2], dir: [f64; 2], b: &ObjectBox) -> Option<f64> {
    let c = b.corners();
    let mut best: Option<f64> = None;
    for i in 0..4 {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        let e = [q[0] - p[0], q[1] - p[1]];
        let denom = dir[0] * e[1] - dir[1] * e[0];
        if denom.abs() < 1e-15 {
            continue;
        }
        let w = [p[0] - origin[0], p[1] - origin[1]];
        let t = (w[0] * e[1] - w[1] * e[0]) / denom;
        let s = (w[0] * dir[1] - w[1] * dir[0]) / denom;
        if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

fn non_overlapping(obs: &[Obstacle]) -> bool {
    let boxes: Vec<ObjectBox> = obs
        .iter()
        .map(|o| ObjectBox::new(o.east, o.north, o.width, o.length, o.heading).unwrap())
        .collect();
    boxes.iter().all(|b| !b.contains([0.0, 0.0]) && b.circumradius() < b.center()[0].hypot(b.center()[1]))
        && (0..boxes.len()).all(|i| (i + 1..boxes.len()).all(|j| dogma_core::geometry::iou(&boxes[i], &boxes[j]) == 0.0))
}

/// Bearing interval of a box seen from the origin, relative to `reference`,
/// and its nearest and farthest corner distances.
fn angular_extent(b: &ObjectBox, reference: f64) -> (f64, f64, f64, f64) {
    let wrap = |d: f64| d - (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
    // Unwrap around the box's own bearing first; boxes never contain the origin.
    let own = b.center_north.atan2(b.center_east);
    let shift = wrap(own - reference);
    let corners = b.corners();
    let angles = corners.map(|p| shift + wrap(p[1].atan2(p[0]) - own));
    let dists = corners.map(|p| p[0].hypot(p[1]));
    let fold = |v: [f64; 4], f: fn(f64, f64) -> f64, init: f64| v.into_iter().fold(init, f);
    (
        fold(angles, f64::min, f64::INFINITY),
        fold(angles, f64::max, f64::NEG_INFINITY),
        fold(dists, f64::min, f64::INFINITY),
        fold(dists, f64::max, f64::NEG_INFINITY),
    )
}

/// Whether every ray through `region` is blocked by boxes lying entirely
/// nearer to the sensor than the region.
fn shadowed(region: &ObjectBox, boxes: &[ObjectBox]) -> bool {
    let reference = region.center_north.atan2(region.center_east);
    let (lo, hi, near, _) = angular_extent(region, reference);
    let mut covers: Vec<(f64, f64)> = boxes
        .iter()
        .map(|b| angular_extent(b, reference))
        .filter(|&(_, _, _, far)| far < near)
        .map(|(a, b, _, _)| (a, b))
        .collect();
    covers.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reached = lo;
    for (a, b) in covers {
        if a > reached {
            break;
        }
        reached = reached.max(b);
    }
    reached > hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_ranges_match_edge_oracle(obs in prop::collection::vec(obstacle(), 1..4), t in 0.0..1.0f64) {
        prop_assume!(non_overlapping(&obs));
        let s = scenario(&obs, 1, 0.0, 0.0, false);
        let scan = simulate_scan(&s, t).unwrap();
        let boxes: Vec<ObjectBox> = s.objects.iter().map(|o| o.box_at(t)).collect();
        prop_assert_eq!(scan.beams.len(), 720);
        for beam in &scan.beams {
            let dir = [beam.azimuth.cos(), beam.azimuth.sin()];
            let oracle = boxes
                .iter()
                .filter_map(|b| edge_oracle([0.0, 0.0], dir, b))
                .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
                .filter(|&r| r <= s.sensor.max_range);
            match (beam.range, oracle) {
                (Some(r), Some(o)) => prop_assert!((r - o).abs() < 1e-9, "{r} vs {o}"),
                (None, None) => {}
                other => prop_assert!(false, "beam {}: {:?}", beam.azimuth, other),
            }
        }
    }

    #[test]
    fn hidden_interior_cells_receive_no_mass(obs in prop::collection::vec(obstacle(), 1..4), seed in 0u64..1000) {
        prop_assume!(non_overlapping(&obs));
        let s = scenario(&obs, seed, 0.02, 0.01, true);
        let grids = simulate_measurements(&s).unwrap();
        let g = s.grid;
        let mut checked = 0usize;
        for (i, m) in grids.iter().enumerate().step_by(3) {
            let t = s.frame_time(i);
            let truth = ground_truth(&s, t).unwrap();
            let boxes: Vec<ObjectBox> = s.objects.iter().map(|o| o.box_at(t)).collect();
            for c in 0..g.cell_count() {
                let (e, n) = g.coords(c);
                let center = g.cell_center(e, n);
                // The cell grown by one cell on every side.
                let grown = ObjectBox::new(center[0], center[1], 3.0 * g.cell_size, 3.0 * g.cell_size, 0.0).unwrap();
                if shadowed(&grown, &boxes) {
                    checked += 1;
                    prop_assert_ne!(truth.cells[c], CellTruth::Free, "cell ({}, {}) t {}", e, n, t);
                    prop_assert_eq!((m.masses[c].occ, m.masses[c].free), (0.0, 0.0), "cell ({}, {})", e, n);
                }
            }
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn same_seed_gives_identical_grids(obs in prop::collection::vec(obstacle(), 1..3), seed in 0u64..(i64::MAX as u64)) {
        let s = scenario(&obs, seed, 0.05, 0.05, true);
        let a = simulate_measurements(&s).unwrap();
        let b = simulate_measurements(&s).unwrap();
        let raw = |v: &[dogma_core::sim::MeasurementGrid]| -> Vec<u32> {
            v.iter().flat_map(|m| m.to_raw().data.into_iter().map(f32::to_bits)).collect()
        };
        prop_assert_eq!(raw(&a), raw(&b));
    }

    #[test]
    fn fused_frames_are_valid_and_reproducible(obs in prop::collection::vec(obstacle(), 1..3), seed in 0u64..1000) {
        let s = scenario(&obs, seed, 0.02, 0.01, true);
        let grids = simulate_measurements(&s).unwrap();
        let cfg = FilterConfig { rng_seed: seed, ..FilterConfig::default() };
        let a = fuse_sequence(&grids, &cfg).unwrap();
        let b = fuse_sequence(&grids, &cfg).unwrap();
        prop_assert_eq!(a.len(), grids.len());
        for f in &a {
            prop_assert!(f.cells().iter().all(|c| c.is_valid()));
        }
        prop_assert!(a == b);
    }
}
