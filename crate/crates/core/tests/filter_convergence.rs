use dogma_core::filter::{fuse_sequence, FilterConfig};
use dogma_core::grid::occupancy_probability;
use dogma_core::sim::{ground_truth, simulate_measurements, CellTruth, ScenarioSpec};

fn scenario(name: &str) -> ScenarioSpec {
    let path = format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"));
    ScenarioSpec::load(path).unwrap()
}

struct Stats {
    dynamic_speed: f64,
    wall_speed: f64,
    wall_occ: f64,
}

/// Mean speed over occupied dynamic cells, mean speed over occupied static
/// cells and mean occupied mass over static cells hit in frame `frame`.
fn convergence_stats(seed: u64, frame: usize) -> Stats {
    let mut s = scenario("moving_car.toml");
    s.rng_seed = seed;
    let meas = simulate_measurements(&s).unwrap();
    let cfg = FilterConfig {
        rng_seed: seed,
        ..Default::default()
    };
    let frames = fuse_sequence(&meas[..=frame], &cfg).unwrap();
    let f = &frames[frame];
    let gt = ground_truth(&s, s.frame_time(frame)).unwrap();
    let (mut dyn_sum, mut dyn_n) = (0.0, 0);
    let (mut stat_sum, mut stat_n) = (0.0, 0);
    let (mut occ_sum, mut hit_n) = (0.0, 0);
    for (i, c) in f.cells().iter().enumerate() {
        if gt.cells[i] == CellTruth::Static && meas[frame].masses[i].occ > 0.0 {
            occ_sum += c.m_occ as f64;
            hit_n += 1;
        }
        if occupancy_probability(c) < 0.7 {
            continue;
        }
        match gt.cells[i] {
            CellTruth::Dynamic => {
                dyn_sum += c.speed();
                dyn_n += 1;
            }
            CellTruth::Static => {
                stat_sum += c.speed();
                stat_n += 1;
            }
            _ => {}
        }
    }
    assert!(dyn_n > 0 && stat_n > 0 && hit_n > 0, "seed {seed}: too few cells");
    Stats {
        dynamic_speed: dyn_sum / dyn_n as f64,
        wall_speed: stat_sum / stat_n as f64,
        wall_occ: occ_sum / hit_n as f64,
    }
}

#[test]
fn moving_car_and_wall_converge() {
    let stats: Vec<Stats> = (0..20u64).map(|s| convergence_stats(s, 30)).collect();
    let n = stats.len() as f64;
    let speed = stats.iter().map(|s| s.dynamic_speed).sum::<f64>() / n;
    let wall_speed = stats.iter().map(|s| s.wall_speed).sum::<f64>() / n;
    let wall_occ = stats.iter().map(|s| s.wall_occ).sum::<f64>() / n;
    eprintln!("car speed {speed:.3}, wall speed {wall_speed:.3}, wall m_occ {wall_occ:.3}");
    assert!((speed - 5.0).abs() <= 1.0, "car speed = {speed}");
    assert!(wall_speed < 0.5, "wall speed = {wall_speed}");
    assert!(wall_occ > 0.9, "wall m_occ = {wall_occ}");
}
