//! Monte Carlo localization baseline using the same scan likelihood as the
//! pose cell localizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, PoseDelta};
use crate::grid_map::OccupancyGrid;
use crate::localizer::{Initialization, TraceRow};
use crate::observation::{LidarScan, LikelihoodField, PreparedScan};
use crate::simulator::sample_free_pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

/// A fixed-size weighted particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
}

impl ParticleSet {
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn from_poses(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::value("particle set needs at least one particle"));
        }
        let w = 1.0 / poses.len() as f64;
        Ok(Self {
            particles: poses
                .into_iter()
                .map(|pose| Particle { pose, weight: w })
                .collect(),
        })
    }

    /// Replaces the weights; they are normalized to sum to one.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.particles.len() {
            return Err(Error::value(format!(
                "{} weights for {} particles",
                weights.len(),
                self.particles.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::value(
                "weights must be non-negative with a positive sum",
            ));
        }
        for (p, w) in self.particles.iter_mut().zip(weights) {
            p.weight = w / sum;
        }
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// `1 / Σ w²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self
            .particles
            .iter()
            .map(|p| p.weight * p.weight)
            .sum::<f64>()
    }
}

/// `n` particles uniformly over free space, equal weights.
pub fn mcl_init_uniform<R: Rng + ?Sized>(
    n: usize,
    map: &OccupancyGrid,
    rng: &mut R,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::value("particle count must be >= 1"));
    }
    let poses = (0..n)
        .map(|_| sample_free_pose(map, rng))
        .collect::<Result<Vec<_>>>()?;
    ParticleSet::from_poses(poses)
}

/// `n` particles drawn around `pose0`, equal weights.
pub fn mcl_init_gaussian<R: Rng + ?Sized>(
    n: usize,
    pose0: &Pose,
    sigma_xy: f64,
    sigma_theta: f64,
    rng: &mut R,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::value("particle count must be >= 1"));
    }
    if !(sigma_xy >= 0.0 && sigma_theta >= 0.0) {
        return Err(Error::value("sigmas must be >= 0"));
    }
    let poses = (0..n)
        .map(|_| {
            let (zx, zy, zt): (f64, f64, f64) = (
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            Pose::new(
                pose0.x + sigma_xy * zx,
                pose0.y + sigma_xy * zy,
                pose0.theta + sigma_theta * zt,
            )
        })
        .collect();
    ParticleSet::from_poses(poses)
}

/// Odometry noise as standard deviation per meter and per radian of motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionNoise {
    pub trans_sigma: f64,
    pub rot_sigma: f64,
}

impl Default for MotionNoise {
    fn default() -> Self {
        Self {
            trans_sigma: 0.05,
            rot_sigma: 0.05,
        }
    }
}

/// Moves every particle by the robot-frame motion, turned into its own
/// heading, with noise proportional to the motion.
pub fn mcl_predict<R: Rng + ?Sized>(
    ps: &mut ParticleSet,
    delta: &PoseDelta,
    noise: &MotionNoise,
    rng: &mut R,
) {
    let trans = delta.translation();
    let st = noise.trans_sigma * trans;
    let sr = noise.rot_sigma * delta.dtheta.abs();
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    for p in &mut ps.particles {
        let (mut f, mut l, mut dt) = (delta.forward, delta.lateral, delta.dtheta);
        if st > 0.0 {
            f += st * g();
            l += st * g();
        }
        if sr > 0.0 {
            dt += sr * g();
        }
        p.pose = p.pose.advance(f, l, dt);
    }
}

/// Multiplies weights by the scan likelihood at each particle and
/// renormalizes. Returns `true` when every weight vanished and the set was
/// reset to uniform weights.
pub fn mcl_weight(ps: &mut ParticleSet, field: &LikelihoodField, scan: &PreparedScan) -> bool {
    let mut sum = 0.0;
    for p in &mut ps.particles {
        p.weight *= field.score_pose(scan, &p.pose);
        sum += p.weight;
    }
    let n = ps.particles.len() as f64;
    if !(sum > 0.0) {
        ps.particles.iter_mut().for_each(|p| p.weight = 1.0 / n);
        return true;
    }
    ps.particles.iter_mut().for_each(|p| p.weight /= sum);
    false
}

/// Systematic resampling: one random offset, `n` evenly spaced pointers.
pub fn mcl_resample<R: Rng + ?Sized>(ps: &mut ParticleSet, rng: &mut R) {
    let n = ps.particles.len();
    let step = 1.0 / n as f64;
    let total = ps.total_weight();
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut cum = ps.particles[0].weight / total;
    for _ in 0..n {
        while u > cum && i + 1 < n {
            i += 1;
            cum += ps.particles[i].weight / total;
        }
        out.push(Particle {
            pose: ps.particles[i].pose,
            weight: step,
        });
        u += step;
    }
    ps.particles = out;
}

/// Weighted mean pose (circular mean heading) and weighted positional
/// standard deviation.
pub fn mcl_estimate(ps: &ParticleSet) -> (Pose, f64) {
    let total = ps.total_weight();
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in &ps.particles {
        let w = p.weight / total;
        x += w * p.pose.x;
        y += w * p.pose.y;
        s += w * p.pose.theta.sin();
        c += w * p.pose.theta.cos();
    }
    let var: f64 = ps
        .particles
        .iter()
        .map(|p| p.weight / total * ((p.pose.x - x).powi(2) + (p.pose.y - y).powi(2)))
        .sum();
    (Pose::new(x, y, s.atan2(c)), var.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MclConfig {
    pub particles: usize,
    pub noise: MotionNoise,
    /// Resample when the effective sample size drops below this fraction of n.
    pub resample_fraction: f64,
    pub beam_stride: usize,
    /// Weight within this radius of the estimate counts as its confidence.
    pub confidence_radius: f64,
    pub convergence_threshold: f64,
    pub init: Initialization,
    pub seed: u64,
}

impl Default for MclConfig {
    fn default() -> Self {
        Self {
            particles: 500,
            noise: MotionNoise::default(),
            resample_fraction: 0.5,
            beam_stride: 1,
            confidence_radius: 0.3,
            convergence_threshold: 0.8,
            init: Initialization::default(),
            seed: 0,
        }
    }
}

/// Result of one MCL iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclOutput {
    pub pose: Pose,
    pub spread: f64,
    pub confidence: f64,
    pub converged: bool,
    /// All weights vanished and were reset.
    pub reset: bool,
}

impl MclOutput {
    pub fn trace_row(&self, t: usize) -> TraceRow {
        TraceRow {
            t,
            est: self.pose,
            confidence: self.confidence,
            converged: self.converged,
            lv_detected: None,
            injected_mass: 0.0,
        }
    }
}

/// A running particle filter.
#[derive(Debug, Clone)]
pub struct Mcl {
    config: MclConfig,
    field: LikelihoodField,
    ps: ParticleSet,
    rng: ChaCha8Rng,
}

impl Mcl {
    pub fn new(config: MclConfig, map: &OccupancyGrid, start: Option<Pose>) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::config("particles", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&config.resample_fraction) {
            return Err(Error::config("resample_fraction", "must be in [0, 1]"));
        }
        config.init.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        let ps = match config.init {
            Initialization::Known {
                sigma_xy,
                sigma_theta,
                ..
            } => {
                let p0 = start.ok_or_else(|| {
                    Error::config("init", "known initialization needs a start pose")
                })?;
                mcl_init_gaussian(config.particles, &p0, sigma_xy, sigma_theta, &mut rng)?
            }
            Initialization::Uniform => mcl_init_uniform(config.particles, map, &mut rng)?,
        };
        Ok(Self {
            field: LikelihoodField::new(map),
            config,
            ps,
            rng,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.ps
    }

    pub fn step(&mut self, odom: &PoseDelta, scan: &LidarScan) -> MclOutput {
        mcl_predict(&mut self.ps, odom, &self.config.noise, &mut self.rng);
        let prepared = PreparedScan::new(scan, self.config.beam_stride);
        let reset = if prepared.scored_beams() > 0 {
            mcl_weight(&mut self.ps, &self.field, &prepared)
        } else {
            false
        };
        let (pose, spread) = mcl_estimate(&self.ps);
        let r2 = self.config.confidence_radius.powi(2);
        let confidence: f64 = self
            .ps
            .particles
            .iter()
            .filter(|p| (p.pose.x - pose.x).powi(2) + (p.pose.y - pose.y).powi(2) <= r2)
            .map(|p| p.weight)
            .sum::<f64>()
            .clamp(0.0, 1.0);
        if self.ps.effective_sample_size() < self.config.resample_fraction * self.ps.len() as f64 {
            mcl_resample(&mut self.ps, &mut self.rng);
        }
        MclOutput {
            pose,
            spread,
            confidence,
            converged: confidence >= self.config.convergence_threshold,
            reset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{simulate_scan, LidarSpec};
    use crate::simulator::{generate_maze, MazeSpec};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_particle_at_pose() {
        let p0 = Pose::new(1.0, -2.0, 0.5);
        let ps = mcl_init_gaussian(1, &p0, 0.0, 0.0, &mut rng(0)).unwrap();
        assert_eq!(
            ps.particles(),
            &[Particle {
                pose: p0,
                weight: 1.0
            }]
        );
        let (est, spread) = mcl_estimate(&ps);
        assert!(est.distance(&p0) < 1e-12 && (est.theta - 0.5).abs() < 1e-12);
        assert_eq!(spread, 0.0);
        assert!(mcl_init_gaussian(0, &p0, 0.0, 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn uniform_init_in_free_space() {
        let map = generate_maze(&MazeSpec::default(), 2).unwrap();
        let ps = mcl_init_uniform(2000, &map, &mut rng(4)).unwrap();
        assert!((ps.total_weight() - 1.0).abs() < 1e-9);
        for p in ps.particles() {
            assert!(!map.is_occupied_world(p.pose.x, p.pose.y, 0.5));
        }
    }

    #[test]
    fn predict_examples() {
        let mut ps = ParticleSet::from_poses(vec![
            Pose::new(0.0, 0.0, FRAC_PI_2),
            Pose::new(1.0, 1.0, 0.3),
        ])
        .unwrap();
        let before = ps.clone();
        mcl_predict(
            &mut ps,
            &PoseDelta::default(),
            &MotionNoise::default(),
            &mut rng(0),
        );
        assert_eq!(ps, before);
        let fwd = PoseDelta::from_robot_frame(1.0, 0.0, 0.0, 0.0);
        let zero = MotionNoise {
            trans_sigma: 0.0,
            rot_sigma: 0.0,
        };
        mcl_predict(&mut ps, &fwd, &zero, &mut rng(0));
        let p = ps.particles()[0].pose;
        assert!(p.x.abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_spread_statistics() {
        let mut ps = ParticleSet::from_poses(vec![Pose::new(0.0, 0.0, 0.0); 10_000]).unwrap();
        let fwd = PoseDelta::from_robot_frame(1.0, 0.0, 0.0, 0.0);
        mcl_predict(
            &mut ps,
            &fwd,
            &MotionNoise {
                trans_sigma: 0.05,
                rot_sigma: 0.0,
            },
            &mut rng(11),
        );
        let xs: Vec<f64> = ps.particles().iter().map(|p| p.pose.x).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std =
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((std - 0.05).abs() < 0.005, "{std}");
    }

    #[test]
    fn weighting_examples() {
        let mut map = OccupancyGrid::filled(60, 60, 0.1, Pose::new(-3.0, -3.0, 0.0), 0.0).unwrap();
        for i in 0..60 {
            for j in [0, 59] {
                map.set(i, j, 1.0);
                map.set(j, i, 1.0);
            }
        }
        for j in 10..25 {
            map.set(40, j, 1.0);
        }
        let field = LikelihoodField::new(&map);
        let truth = Pose::new(-1.0, 0.5, 0.2);
        let scan = simulate_scan(
            &map,
            &truth,
            &LidarSpec {
                noise_sigma: 0.0,
                ..LidarSpec::default()
            },
            &mut rng(1),
        )
        .unwrap();
        let prepared = PreparedScan::new(&scan, 1);
        let mut poses = vec![truth];
        poses.extend((0..20).map(|i| Pose::new(-2.99 + 0.001 * i as f64, -2.99, 0.0)));
        let mut ps = ParticleSet::from_poses(poses).unwrap();
        assert!(!mcl_weight(&mut ps, &field, &prepared));
        assert!(ps.particles()[0].weight > 0.99 * ps.particles()[0].weight.max(0.0));
        let best = ps.particles().iter().map(|p| p.weight).fold(0.0, f64::max);
        assert_eq!(best, ps.particles()[0].weight);
        assert!((ps.total_weight() - 1.0).abs() < 1e-9);

        // all weights zero: beams into empty space
        let empty = OccupancyGrid::filled(10, 10, 0.1, Pose::default(), 0.0).unwrap();
        let mut ps = ParticleSet::from_poses(vec![Pose::new(0.5, 0.5, 0.0); 4]).unwrap();
        let z = LidarScan::new(vec![0.2; 4], 0.0, 0.5, 8.0).unwrap();
        assert!(mcl_weight(
            &mut ps,
            &LikelihoodField::new(&empty),
            &PreparedScan::new(&z, 1)
        ));
        assert!(ps.particles().iter().all(|p| p.weight == 0.25));
    }

    #[test]
    fn likelihood_one_keeps_weights() {
        let full = OccupancyGrid::filled(40, 40, 0.1, Pose::new(-2.0, -2.0, 0.0), 1.0).unwrap();
        let z = LidarScan::new(vec![0.5; 8], 0.0, 0.7, 8.0).unwrap();
        let mut ps = ParticleSet::from_poses(vec![Pose::default(); 3]).unwrap();
        ps.set_weights(&[0.2, 0.3, 0.5]).unwrap();
        mcl_weight(
            &mut ps,
            &LikelihoodField::new(&full),
            &PreparedScan::new(&z, 1),
        );
        let w: Vec<f64> = ps.particles().iter().map(|p| p.weight).collect();
        for (a, b) in w.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_examples() {
        let poses: Vec<Pose> = (0..10).map(|i| Pose::new(i as f64, 0.0, 0.0)).collect();
        let mut ps = ParticleSet::from_poses(poses.clone()).unwrap();
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        ps.set_weights(&w).unwrap();
        mcl_resample(&mut ps, &mut rng(0));
        assert_eq!(ps.len(), 10);
        assert!(ps
            .particles()
            .iter()
            .all(|p| p.pose.x == 3.0 && p.weight == 0.1));

        let mut ps = ParticleSet::from_poses(poses.clone()).unwrap();
        mcl_resample(&mut ps, &mut rng(5));
        let xs: Vec<f64> = ps.particles().iter().map(|p| p.pose.x).collect();
        assert_eq!(xs, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn estimate_symmetry_and_circular_mean() {
        let ps =
            ParticleSet::from_poses(vec![Pose::new(1.0, 2.0, 0.0), Pose::new(-1.0, -2.0, 0.0)])
                .unwrap();
        let (p, spread) = mcl_estimate(&ps);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((spread - 5f64.sqrt()).abs() < 1e-12);
        let ps = ParticleSet::from_poses(vec![
            Pose::new(0.0, 0.0, PI - 0.1),
            Pose::new(0.0, 0.0, -(PI - 0.1)),
        ])
        .unwrap();
        let (p, _) = mcl_estimate(&ps);
        assert!((p.theta.abs() - PI).abs() < 1e-9, "{}", p.theta);
    }

    #[test]
    fn zero_noise_tracking() {
        let map = generate_maze(&MazeSpec::minimal(6.0, 6.0), 0).unwrap();
        let config = MclConfig {
            particles: 50,
            noise: MotionNoise {
                trans_sigma: 0.0,
                rot_sigma: 0.0,
            },
            init: Initialization::Known {
                sigma_xy: 0.0,
                sigma_theta: 0.0,
                samples: 1,
            },
            ..MclConfig::default()
        };
        let mut truth = Pose::new(-1.5, -1.0, 0.3);
        let mut mcl = Mcl::new(config, &map, Some(truth)).unwrap();
        let spec = LidarSpec {
            noise_sigma: 0.0,
            ..LidarSpec::default()
        };
        for i in 0..100 {
            let delta = PoseDelta::from_robot_frame(
                0.03,
                0.0,
                if i % 20 < 10 { 0.02 } else { -0.02 },
                truth.theta,
            );
            truth = truth.advance(delta.forward, delta.lateral, delta.dtheta);
            let scan = simulate_scan(&map, &truth, &spec, &mut rng(i)).unwrap();
            let out = mcl.step(&delta, &scan);
            assert!(out.pose.distance(&truth) < 0.1);
            assert_eq!(mcl.particles().len(), 50);
            assert!((mcl.particles().total_weight() - 1.0).abs() < 1e-9);
        }
    }
}
