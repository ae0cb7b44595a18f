//! Particle-filter fusion of measurement grids into DOGMa frames.
//!
//! A single particle population carries occupancy mass. Each step the
//! particles are predicted with a constant-velocity model, the predicted
//! per-cell occupancy is fused with the measurement masses by Dempster's
//! rule, persistent particles are reweighted so that each cell carries its
//! share of the posterior occupancy, and new particles with a zero-mean
//! velocity prior are born where the measurement reports occupancy that the
//! prediction does not explain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ds_combine, DogmaCell, DogmaFrame, GridGeometry, Masses, Pose};
use crate::sim::MeasurementGrid;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("measurement geometry does not match filter geometry")]
    GeometryMismatch,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Particles allotted per unit of occupancy mass.
    pub particles_per_occupied_cell: usize,
    /// Hard cap on the population size.
    pub max_particles: usize,
    /// Share of predicted-but-unconfirmed occupancy handed to newborn particles.
    pub birth_fraction: f64,
    /// Per-step survival probability of occupancy carried by particles.
    pub persistence_prob: f64,
    /// Per-step retention of free-space mass.
    pub free_persistence: f64,
    /// Position random-walk intensity, m/√s.
    pub process_noise_pos: f64,
    /// Velocity random-walk intensity, (m/s)/√s.
    pub process_noise_vel: f64,
    /// Standard deviation of newborn particle velocities, m/s.
    pub initial_speed_sigma: f64,
    /// Share of newborn particles started at zero velocity. Without it the
    /// only velocities left on a long static structure are those that have
    /// not yet run off its ends, which biases the mean toward the ends.
    pub static_birth_share: f64,
    /// Velocity variance reported for cells without particles, (m/s)².
    pub prior_velocity_variance: f64,
    /// Lower bound for reported velocity variances, (m/s)².
    pub variance_floor: f64,
    pub rng_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles_per_occupied_cell: 128,
            max_particles: 2_000_000,
            birth_fraction: 0.02,
            persistence_prob: 0.99,
            free_persistence: 0.9,
            process_noise_pos: 0.1,
            process_noise_vel: 0.3,
            initial_speed_sigma: 4.0,
            static_birth_share: 0.1,
            prior_velocity_variance: 16.0,
            variance_floor: 1e-4,
            rng_seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidConfig(m.to_string()));
        for (name, p) in [
            ("birth_fraction", self.birth_fraction),
            ("persistence_prob", self.persistence_prob),
            ("free_persistence", self.free_persistence),
            ("static_birth_share", self.static_birth_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, s) in [
            ("process_noise_pos", self.process_noise_pos),
            ("process_noise_vel", self.process_noise_vel),
            ("initial_speed_sigma", self.initial_speed_sigma),
            ("prior_velocity_variance", self.prior_velocity_variance),
            ("variance_floor", self.variance_floor),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if self.particles_per_occupied_cell == 0 || self.max_particles == 0 {
            return bad("particle counts must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub weight: f64,
}

/// Weighted velocity moments of the particles in one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityMoments {
    pub mean: [f64; 2],
    pub var_east: f64,
    pub var_north: f64,
    pub cov: f64,
    pub total_weight: f64,
}

/// Weighted mean and (biased) covariance of particle velocities.
pub fn velocity_moments<'a>(
    particles: impl IntoIterator<Item = &'a Particle>,
) -> Option<VelocityMoments> {
    let (mut w_sum, mut me, mut mn) = (0.0, 0.0, 0.0);
    let items: Vec<&Particle> = particles.into_iter().collect();
    for p in &items {
        w_sum += p.weight;
        me += p.weight * p.velocity[0];
        mn += p.weight * p.velocity[1];
    }
    if w_sum <= 0.0 {
        return None;
    }
    me /= w_sum;
    mn /= w_sum;
    let (mut vee, mut vnn, mut ven) = (0.0, 0.0, 0.0);
    for p in &items {
        let (de, dn) = (p.velocity[0] - me, p.velocity[1] - mn);
        vee += p.weight * de * de;
        vnn += p.weight * dn * dn;
        ven += p.weight * de * dn;
    }
    Some(VelocityMoments {
        mean: [me, mn],
        var_east: vee / w_sum,
        var_north: vnn / w_sum,
        cov: ven / w_sum,
        total_weight: w_sum,
    })
}

/// Particle population and per-cell posterior masses of one filter instance.
#[derive(Debug, Clone)]
pub struct FilterState {
    geometry: GridGeometry,
    config: FilterConfig,
    particles: Vec<Particle>,
    masses: Vec<Masses>,
    rng: ChaCha8Rng,
    timestamp: f64,
    ego_pose: Pose,
}

impl FilterState {
    pub fn new(geometry: GridGeometry, config: FilterConfig) -> Result<Self, FilterError> {
        config.validate()?;
        geometry
            .validate()
            .map_err(|e| FilterError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            masses: vec![Masses::VACUOUS; geometry.cell_count()],
            particles: Vec::new(),
            geometry,
            config,
            timestamp: 0.0,
            ego_pose: Pose::default(),
        })
    }

    /// State with an explicit particle population and mass map.
    pub fn with_particles(
        geometry: GridGeometry,
        config: FilterConfig,
        particles: Vec<Particle>,
        masses: Vec<Masses>,
    ) -> Result<Self, FilterError> {
        let mut s = Self::new(geometry, config)?;
        if masses.len() != geometry.cell_count() {
            return Err(FilterError::GeometryMismatch);
        }
        s.particles = particles;
        s.masses = masses;
        Ok(s)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn masses(&self) -> &[Masses] {
        &self.masses
    }

    fn cell_index(&self, p: [f64; 2]) -> Option<usize> {
        self.geometry
            .cell_of(p[0], p[1])
            .map(|(e, n)| self.geometry.index(e, n))
    }

    /// Groups particle indices by cell: returns (order, start offsets).
    fn bin(&self, particles: &[Particle]) -> (Vec<usize>, Vec<usize>) {
        let n = self.geometry.cell_count();
        let cells: Vec<usize> = particles
            .iter()
            .map(|p| self.cell_index(p.position).expect("particles lie in the grid"))
            .collect();
        let mut starts = vec![0usize; n + 1];
        for &c in &cells {
            starts[c + 1] += 1;
        }
        for i in 0..n {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut order = vec![0usize; particles.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        (order, starts)
    }

    fn frame_from(
        &self,
        particles: &[Particle],
        order: &[usize],
        starts: &[usize],
    ) -> DogmaFrame {
        let cfg = &self.config;
        let cells = (0..self.geometry.cell_count())
            .map(|c| {
                let m = self.masses[c];
                let members = order[starts[c]..starts[c + 1]].iter().map(|&i| &particles[i]);
                let mut cell = DogmaCell {
                    m_occ: m.occ as f32,
                    m_free: m.free as f32,
                    ..Default::default()
                };
                match velocity_moments(members) {
                    Some(vm) => {
                        cell.v_east = vm.mean[0] as f32;
                        cell.v_north = vm.mean[1] as f32;
                        let ve = vm.var_east.max(cfg.variance_floor);
                        let vn = vm.var_north.max(cfg.variance_floor);
                        cell.var_v_east = ve as f32;
                        cell.var_v_north = vn as f32;
                        // f32 rounding must not break Cauchy-Schwarz
                        let bound = ((cell.var_v_east as f64) * (cell.var_v_north as f64)).sqrt()
                            * (1.0 - 1e-6);
                        cell.cov_v = vm.cov.clamp(-bound, bound) as f32;
                    }
                    None => {
                        cell.var_v_east = cfg.prior_velocity_variance as f32;
                        cell.var_v_north = cfg.prior_velocity_variance as f32;
                    }
                }
                cell
            })
            .collect();
        DogmaFrame::new(self.geometry, cells, self.timestamp, self.ego_pose)
            .expect("cell count matches geometry")
    }

    /// DOGMa view of the current particle population and masses.
    pub fn extract_dogma(&self) -> DogmaFrame {
        let (order, starts) = self.bin(&self.particles);
        self.frame_from(&self.particles, &order, &starts)
    }

    /// Advances the filter by `dt` seconds and fuses one measurement grid.
    pub fn step(
        &mut self,
        measurement: &MeasurementGrid,
        dt: f64,
    ) -> Result<DogmaFrame, FilterError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FilterError::NonPositiveDt(dt));
        }
        if measurement.geometry != self.geometry
            || measurement.masses.len() != self.geometry.cell_count()
        {
            return Err(FilterError::GeometryMismatch);
        }
        let cfg = self.config.clone();
        let n_cells = self.geometry.cell_count();

        self.predict(dt);
        let (order, starts) = self.bin(&self.particles);

        let mut posterior = vec![Masses::VACUOUS; n_cells];
        let mut births: Vec<Particle> = Vec::new();
        let birth_vel = Normal::new(0.0, cfg.initial_speed_sigma.max(1e-12)).expect("sigma");
        for c in 0..n_cells {
            let members = &order[starts[c]..starts[c + 1]];
            let carried: f64 = members.iter().map(|&i| self.particles[i].weight).sum();
            let pred_occ = carried.min(1.0);
            let pred_free = (cfg.free_persistence * self.masses[c].free).min(1.0 - pred_occ);
            let predicted = Masses::new(pred_occ, pred_free.max(0.0));
            let meas = measurement.masses[c];
            let post = ds_combine(predicted, meas).unwrap_or(meas);
            posterior[c] = post;

            let (persistent, born) = if meas.occ > 0.0 {
                let denom = pred_occ + cfg.birth_fraction * (1.0 - pred_occ);
                if denom > 0.0 {
                    (
                        post.occ * pred_occ / denom,
                        post.occ * cfg.birth_fraction * (1.0 - pred_occ) / denom,
                    )
                } else {
                    (0.0, 0.0)
                }
            } else {
                (post.occ, 0.0)
            };

            if carried > 0.0 {
                let scale = persistent / carried;
                for &i in members {
                    self.particles[i].weight *= scale;
                }
            }
            if born > 1e-6 {
                let count = ((born * cfg.particles_per_occupied_cell as f64).ceil() as usize).max(1);
                let (e, n) = self.geometry.coords(c);
                let [cx, cy] = self.geometry.cell_center(e, n);
                let half = self.geometry.cell_size / 2.0;
                let n_static = (count as f64 * cfg.static_birth_share).round() as usize;
                for k in 0..count {
                    let velocity = if k < n_static {
                        [0.0, 0.0]
                    } else {
                        [birth_vel.sample(&mut self.rng), birth_vel.sample(&mut self.rng)]
                    };
                    births.push(Particle {
                        position: [
                            cx + self.rng.random_range(-half..half),
                            cy + self.rng.random_range(-half..half),
                        ],
                        velocity,
                        weight: born / count as f64,
                    });
                }
            }
        }
        self.masses = posterior;
        self.timestamp = measurement.timestamp;
        self.ego_pose = measurement.ego_pose;

        self.particles.retain(|p| p.weight > 0.0);
        self.particles.extend(births);
        let (order, starts) = self.bin(&self.particles);
        let frame = self.frame_from(&self.particles, &order, &starts);
        self.resample();
        Ok(frame)
    }

    fn predict(&mut self, dt: f64) {
        let cfg = &self.config;
        let pos_sigma = cfg.process_noise_pos * dt.sqrt();
        let vel_sigma = cfg.process_noise_vel * dt.sqrt();
        let pos_noise = Normal::new(0.0, pos_sigma.max(1e-12)).expect("sigma");
        let vel_noise = Normal::new(0.0, vel_sigma.max(1e-12)).expect("sigma");
        let survival = cfg.persistence_prob;
        let g = self.geometry;
        let rng = &mut self.rng;
        self.particles.retain_mut(|p| {
            for a in 0..2 {
                p.position[a] += p.velocity[a] * dt + pos_noise.sample(rng);
                p.velocity[a] += vel_noise.sample(rng);
            }
            p.weight *= survival;
            g.contains(p.position[0], p.position[1])
        });
    }

    /// Systematic resampling to a budget proportional to the carried mass,
    /// triggered when the population exceeds the budget or the effective
    /// sample size drops below half the population.
    fn resample(&mut self) {
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        if total <= 0.0 || self.particles.is_empty() {
            self.particles.clear();
            return;
        }
        let budget = ((total * self.config.particles_per_occupied_cell as f64).ceil() as usize)
            .clamp(1, self.config.max_particles);
        let sum_sq: f64 = self.particles.iter().map(|p| p.weight * p.weight).sum();
        let ess = total * total / sum_sq;
        if self.particles.len() <= budget && ess >= 0.5 * self.particles.len() as f64 {
            return;
        }
        let step = total / budget as f64;
        let mut u = self.rng.random_range(0.0..step);
        let mut out = Vec::with_capacity(budget);
        let mut acc = 0.0;
        for p in &self.particles {
            acc += p.weight;
            while u < acc && out.len() < budget {
                out.push(Particle {
                    weight: step,
                    ..*p
                });
                u += step;
            }
        }
        self.particles = out;
    }
}

/// Runs the filter over a whole measurement sequence.
pub fn fuse_sequence(
    measurements: &[MeasurementGrid],
    config: &FilterConfig,
) -> Result<Vec<DogmaFrame>, FilterError> {
    let Some(first) = measurements.first() else {
        return Ok(Vec::new());
    };
    let mut state = FilterState::new(first.geometry, config.clone())?;
    let mut out = Vec::with_capacity(measurements.len());
    let mut prev_t: Option<f64> = None;
    for m in measurements {
        let dt = match prev_t {
            Some(t) => m.timestamp - t,
            // The first frame has no predecessor; use a nominal step.
            None => match measurements.get(1) {
                Some(next) => next.timestamp - m.timestamp,
                None => 0.1,
            },
        };
        out.push(state.step(m, dt)?);
        prev_t = Some(m.timestamp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> GridGeometry {
        GridGeometry::new(4, 4, 1.0, 0.0, 0.0).unwrap()
    }

    fn particle(pos: [f64; 2], vel: [f64; 2], weight: f64) -> Particle {
        Particle {
            position: pos,
            velocity: vel,
            weight,
        }
    }

    #[test]
    fn moments_of_two_particles() {
        let ps = [
            particle([0.5, 0.5], [1.0, 0.0], 1.0),
            particle([0.5, 0.5], [3.0, 0.0], 1.0),
        ];
        let vm = velocity_moments(&ps).unwrap();
        assert_eq!(vm.mean, [2.0, 0.0]);
        assert_eq!(vm.var_east, 1.0);
        assert_eq!(vm.var_north, 0.0);
        assert_eq!(vm.cov, 0.0);
    }

    #[test]
    fn extract_reports_weighted_moments_and_priors() {
        let cfg = FilterConfig::default();
        let ps = vec![
            particle([0.5, 0.5], [1.0, 0.0], 1.0),
            particle([0.5, 0.5], [3.0, 0.0], 1.0),
            particle([2.5, 2.5], [0.7, -0.2], 0.3),
        ];
        let state = FilterState::with_particles(
            geometry(),
            cfg.clone(),
            ps,
            vec![Masses::new(0.5, 0.1); 16],
        )
        .unwrap();
        let frame = state.extract_dogma();
        let c = frame.cell(0, 0);
        assert_eq!((c.v_east, c.v_north), (2.0, 0.0));
        assert_eq!(c.var_v_east, 1.0);
        // zero raw variance is lifted to the floor
        assert_eq!(c.var_v_north, cfg.variance_floor as f32);
        assert_eq!(c.cov_v, 0.0);
        let single = frame.cell(2, 2);
        assert_eq!(single.var_v_east, cfg.variance_floor as f32);
        let empty = frame.cell(3, 0);
        assert_eq!((empty.v_east, empty.v_north), (0.0, 0.0));
        assert_eq!(empty.var_v_east, cfg.prior_velocity_variance as f32);
        assert_eq!(empty.m_occ, 0.5);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let mut state = FilterState::new(geometry(), FilterConfig::default()).unwrap();
        let m = MeasurementGrid {
            geometry: geometry(),
            timestamp: 0.1,
            ego_pose: Pose::default(),
            masses: vec![Masses::VACUOUS; 16],
        };
        assert!(matches!(state.step(&m, 0.0), Err(FilterError::NonPositiveDt(_))));
        let other = MeasurementGrid {
            geometry: GridGeometry::new(2, 2, 1.0, 0.0, 0.0).unwrap(),
            masses: vec![Masses::VACUOUS; 4],
            ..m.clone()
        };
        assert!(matches!(state.step(&other, 0.1), Err(FilterError::GeometryMismatch)));
    }

    #[test]
    fn occupied_measurement_spawns_particles() {
        let mut state = FilterState::new(geometry(), FilterConfig::default()).unwrap();
        let mut masses = vec![Masses::new(0.0, 0.45); 16];
        masses[5] = Masses::new(0.9, 0.0);
        let m = MeasurementGrid {
            geometry: geometry(),
            timestamp: 0.1,
            ego_pose: Pose::default(),
            masses,
        };
        let frame = state.step(&m, 0.1).unwrap();
        assert!((frame.cells()[5].m_occ - 0.9).abs() < 1e-6);
        assert!(!state.particles().is_empty());
        let total: f64 = state.particles().iter().map(|p| p.weight).sum();
        assert!((total - 0.9).abs() < 1e-9);
        assert!(frame.cells().iter().all(DogmaCell::is_valid));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.persistence_prob = 1.5;
        assert!(cfg.validate().is_err());
        cfg = FilterConfig {
            particles_per_occupied_cell: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
