//! Synthetic V2X beam-selection world.
//!
//! A base station at the origin with an `N_t`-element uniform linear array
//! (boresight +y) serves single-antenna vehicles placed in a bounding box.
//! Channels are geometric: a line-of-sight path blocked by axis-aligned
//! obstacle boxes, plus up to `N_p` single-bounce reflector paths attenuated
//! by a fixed reflection loss. Ground-truth labels come from an exhaustive
//! sweep of the DFT codebook. Sensor observations are derived from the same
//! geometry: noisy relative GPS coordinates, an RGB-proxy obstacle-occupancy
//! image with distance-weighted intensity, and a LiDAR cuboid grid with the
//! transmitter marked `-1` and the receiver `-2`.

use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFile, DatasetManifest, Sample, VehicleDataset};
use crate::error::{Error, Result};
use crate::scalar::{r64, Real};
use crate::seed;

/// Scenario generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Transmit antennas N_t.
    pub n_t: usize,
    /// Codebook size M.
    pub beams: usize,
    pub vehicles: usize,
    pub samples_per_vehicle: usize,
    /// Vehicle placement box `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    /// Number of distinct obstacle layouts in the world; each sample draws
    /// one. Layout identity is observable through RGB/LiDAR but not GPS.
    pub obstacle_layouts: usize,
    /// Obstacle boxes per layout.
    pub obstacles: usize,
    /// Range of obstacle half extents.
    pub obstacle_half_extent: [f64; 2],
    /// Range of obstacle heights.
    pub obstacle_height: [f64; 2],
    /// Reflector path attenuation in dB.
    pub reflection_loss_db: f64,
    /// Reference distance for the 1/d path gain.
    pub reference_distance: f64,
    /// Maximum reflector paths N_p.
    pub max_paths: usize,
    /// Noise power σ².
    pub noise_power: f64,
    /// Total transmit power budget P.
    pub power: f64,
    /// Std-dev of Gaussian GPS noise (0 disables).
    pub gps_noise_std: f64,
    pub rgb_grid: [usize; 2],
    pub lidar_grid: [usize; 3],
    /// Height of the LiDAR grid volume.
    pub world_height: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_t: 16,
            beams: 16,
            vehicles: 10,
            samples_per_vehicle: 150,
            bounds: [-60.0, 60.0, 12.0, 48.0],
            obstacle_layouts: 6,
            obstacles: 4,
            obstacle_half_extent: [1.5, 4.0],
            obstacle_height: [1.0, 7.0],
            reflection_loss_db: 10.0,
            reference_distance: 10.0,
            max_paths: 2,
            noise_power: 0.01,
            power: 10.0,
            gps_noise_std: 0.5,
            rgb_grid: [8, 8],
            lidar_grid: [4, 4, 8],
            world_height: 8.0,
        }
    }
}

impl ScenarioConfig {
    /// Paper-sized codebook preset.
    pub fn with_beams(mut self, beams: usize) -> Self {
        self.beams = beams;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.beams < 2 || self.vehicles == 0 || self.samples_per_vehicle == 0 {
            return Err(Error::config("n_t, beams, vehicles, samples must be positive (beams >= 2)"));
        }
        if self.bounds[0] >= self.bounds[1] || self.bounds[2] >= self.bounds[3] {
            return Err(Error::config("empty bounding box"));
        }
        if self.noise_power <= 0.0 || self.power <= 0.0 {
            return Err(Error::config("noise power and power budget must be positive"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            n_t: self.n_t,
            beams: self.beams,
            rgb_grid: self.rgb_grid,
            lidar_grid: self.lidar_grid,
            noise_power: self.noise_power,
            power: self.power,
            bounds: self.bounds,
            vehicles: self.vehicles,
            has_channels: true,
        }
    }
}

/// Axis-aligned obstacle box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub height: f64,
}

impl Obstacle {
    fn contains_xy(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).abs() <= self.half[0] && (y - self.center[1]).abs() <= self.half[1]
    }

    fn overlaps_rect(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
        self.center[0] - self.half[0] < x1
            && self.center[0] + self.half[0] > x0
            && self.center[1] - self.half[1] < y1
            && self.center[1] + self.half[1] > y0
    }
}

/// Per-sample scene: vehicle placement plus the obstacle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub sample_id: usize,
    pub vehicle: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub los_blocked: bool,
}

/// Static world description plus every generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGeometry {
    pub bs: [f64; 2],
    pub bounds: [f64; 4],
    pub rgb_grid: [usize; 2],
    pub lidar_grid: [usize; 3],
    pub world_height: f64,
    pub scenes: Vec<Scene>,
}

/// DFT beam codebook over a uniform linear array; unit-norm columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Codebook<R: Real> {
    pub n_t: usize,
    pub beams: Vec<Vec<Complex<R>>>,
}

impl<R: Real> Codebook<R> {
    /// Beams on the spatial-frequency grid `Ω_m = -1 + 2m/M`; the boresight
    /// beam (Ω = 0) is index `M/2` for even M.
    pub fn dft(n_t: usize, m_beams: usize) -> Self {
        let norm = r64::<R>(1.0 / (n_t as f64).sqrt());
        let beams = (0..m_beams)
            .map(|m| {
                let omega = -1.0 + 2.0 * m as f64 / m_beams as f64;
                (0..n_t)
                    .map(|k| {
                        let phase = std::f64::consts::PI * k as f64 * omega;
                        Complex::from_polar(norm, r64::<R>(phase))
                    })
                    .collect()
            })
            .collect();
        Self { n_t, beams }
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    /// 1-based best beam by exhaustive sweep of `|h^H w|`, ties toward the
    /// lowest index.
    pub fn best_beam(&self, channel: &[Complex<R>]) -> usize {
        let mut best = 0usize;
        let mut best_gain = R::neg_infinity();
        for (m, w) in self.beams.iter().enumerate() {
            let g = beam_gain_sq(channel, w);
            if g > best_gain {
                best_gain = g;
                best = m;
            }
        }
        best + 1
    }
}

/// `|h^H w|^2`.
pub fn beam_gain_sq<R: Real>(h: &[Complex<R>], w: &[Complex<R>]) -> R {
    let mut acc = Complex::new(R::zero(), R::zero());
    for (hv, wv) in h.iter().zip(w) {
        acc += hv.conj() * wv;
    }
    acc.norm_sqr()
}

/// Unit-magnitude-element ULA steering vector at spatial frequency `sin θ`.
pub fn steering<R: Real>(n_t: usize, sin_theta: f64) -> Vec<Complex<R>> {
    (0..n_t)
        .map(|k| Complex::from_polar(R::one(), r64::<R>(std::f64::consts::PI * k as f64 * sin_theta)))
        .collect()
}

/// 2-D segment / axis-aligned box intersection (slab test).
pub fn segment_hits_box(a: [f64; 2], b: [f64; 2], o: &Obstacle) -> bool {
    if o.contains_xy(a[0], a[1]) || o.contains_xy(b[0], b[1]) {
        return true;
    }
    let (mut tmin, mut tmax) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        let d = b[axis] - a[axis];
        let lo = o.center[axis] - o.half[axis];
        let hi = o.center[axis] + o.half[axis];
        if d.abs() < 1e-12 {
            if a[axis] < lo || a[axis] > hi {
                return false;
            }
        } else {
            let mut t1 = (lo - a[axis]) / d;
            let mut t2 = (hi - a[axis]) / d;
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
            if tmin > tmax {
                return false;
            }
        }
    }
    true
}

/// A generated scenario: world geometry plus the dataset (with channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SyntheticScenario<R: Real> {
    pub config: ScenarioConfig,
    pub codebook: Codebook<R>,
    pub world: WorldGeometry,
    pub data: DatasetFile<R>,
}

/// Build channel paths for one scene: optional LoS plus up to `max_paths`
/// reflector bounces (shortest total path length first).
fn build_channel<R: Real>(
    cfg: &ScenarioConfig,
    vehicle: [f64; 2],
    obstacles: &[Obstacle],
    blocked: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Complex<R>> {
    let mut h = vec![Complex::new(R::zero(), R::zero()); cfg.n_t];
    let refl_amp = 10f64.powf(-cfg.reflection_loss_db / 20.0);
    let dist = (vehicle[0].powi(2) + vehicle[1].powi(2)).sqrt();

    let mut add_path = |sin_aod: f64, amp: f64, rng: &mut ChaCha8Rng| {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let gain = Complex::from_polar(r64::<R>(amp), r64::<R>(phase));
        for (hk, ak) in h.iter_mut().zip(steering::<R>(cfg.n_t, sin_aod)) {
            *hk += gain * ak;
        }
    };

    if !blocked {
        add_path(vehicle[0] / dist, cfg.reference_distance / dist, rng);
    }

    // Reflector paths via obstacle centers, shortest first.
    let mut refl: Vec<(f64, f64)> = obstacles
        .iter()
        .map(|o| {
            let d1 = (o.center[0].powi(2) + o.center[1].powi(2)).sqrt().max(1e-6);
            let d2 = ((vehicle[0] - o.center[0]).powi(2) + (vehicle[1] - o.center[1]).powi(2))
                .sqrt()
                .max(1e-6);
            (d1 + d2, o.center[0] / d1)
        })
        .collect();
    refl.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite path lengths"));
    for &(len, sin_aod) in refl.iter().take(cfg.max_paths) {
        add_path(sin_aod, refl_amp * cfg.reference_distance / len, rng);
    }
    h
}

/// Flat LiDAR cell index of a world position.
fn lidar_cell(cfg: &ScenarioConfig, x: f64, y: f64, z: f64) -> usize {
    let [nx, ny, nz] = cfg.lidar_grid;
    let ix = grid_bin(x, cfg.bounds[0], cfg.bounds[1], nx);
    let iy = grid_bin(y, 0.0, cfg.bounds[3], ny);
    let iz = grid_bin(z, 0.0, cfg.world_height, nz);
    (ix * ny + iy) * nz + iz
}

fn grid_bin(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * n as f64) as usize).min(n - 1)
}

fn lidar_grid_of<R: Real>(cfg: &ScenarioConfig, vehicle: [f64; 2], obstacles: &[Obstacle]) -> Vec<i8> {
    let [nx, ny, nz] = cfg.lidar_grid;
    let mut grid = vec![0i8; nx * ny * nz];
    for o in obstacles {
        let x0 = grid_bin(o.center[0] - o.half[0], cfg.bounds[0], cfg.bounds[1], nx);
        let x1 = grid_bin(o.center[0] + o.half[0], cfg.bounds[0], cfg.bounds[1], nx);
        let y0 = grid_bin(o.center[1] - o.half[1], 0.0, cfg.bounds[3], ny);
        let y1 = grid_bin(o.center[1] + o.half[1], 0.0, cfg.bounds[3], ny);
        let z1 = grid_bin(o.height, 0.0, cfg.world_height, nz);
        for ix in x0..=x1 {
            for iy in y0..=y1 {
                for iz in 0..=z1 {
                    grid[(ix * ny + iy) * nz + iz] = 1;
                }
            }
        }
    }
    grid[lidar_cell(cfg, 0.0, 0.0, 0.0)] = -1;
    grid[lidar_cell(cfg, vehicle[0], vehicle[1], 0.0)] = -2;
    grid
}

fn rgb_grid_of<R: Real>(cfg: &ScenarioConfig, vehicle: [f64; 2], obstacles: &[Obstacle]) -> Vec<R> {
    let [nx, ny] = cfg.rgb_grid;
    let mut grid = vec![R::zero(); nx * ny];
    let (x_lo, x_hi) = (cfg.bounds[0], cfg.bounds[1]);
    let (y_lo, y_hi) = (0.0, cfg.bounds[3]);
    let dx = (x_hi - x_lo) / nx as f64;
    let dy = (y_hi - y_lo) / ny as f64;
    for ix in 0..nx {
        for iy in 0..ny {
            let cx0 = x_lo + ix as f64 * dx;
            let cy0 = y_lo + iy as f64 * dy;
            if obstacles.iter().any(|o| o.overlaps_rect(cx0, cx0 + dx, cy0, cy0 + dy)) {
                let cx = cx0 + 0.5 * dx;
                let cy = cy0 + 0.5 * dy;
                let dist = ((cx - vehicle[0]).powi(2) + (cy - vehicle[1]).powi(2)).sqrt();
                grid[ix * ny + iy] = r64(1.0 / (1.0 + dist / cfg.reference_distance));
            }
        }
    }
    grid
}

/// Generate a scenario: world geometry, channels and labeled vehicle datasets.
pub fn generate_scenario<R: Real>(cfg: &ScenarioConfig) -> Result<SyntheticScenario<R>> {
    cfg.validate()?;
    let codebook = Codebook::<R>::dft(cfg.n_t, cfg.beams);
    let tx_cell = lidar_cell(cfg, 0.0, 0.0, 0.0);

    // World obstacle layouts, drawn once per scenario.
    let layouts: Vec<Vec<Obstacle>> = (0..cfg.obstacle_layouts.max(1))
        .map(|li| {
            let mut rng = seed::rng(cfg.seed, "layout", &[li as u64]);
            (0..cfg.obstacles)
                .map(|_| {
                    let hx = rng.random_range(cfg.obstacle_half_extent[0]..cfg.obstacle_half_extent[1]);
                    let hy = rng.random_range(cfg.obstacle_half_extent[0]..cfg.obstacle_half_extent[1]);
                    let cx = rng.random_range(cfg.bounds[0]..cfg.bounds[1]);
                    let cy = rng.random_range(2.0..cfg.bounds[3] - 2.0);
                    let height = rng.random_range(cfg.obstacle_height[0]..cfg.obstacle_height[1]);
                    Obstacle { center: [cx, cy], half: [hx, hy], height }
                })
                .collect()
        })
        .collect();

    let mut scenes = Vec::with_capacity(cfg.vehicles * cfg.samples_per_vehicle);
    let mut vehicles = Vec::with_capacity(cfg.vehicles);
    for v in 0..cfg.vehicles {
        let mut samples = Vec::with_capacity(cfg.samples_per_vehicle);
        for k in 0..cfg.samples_per_vehicle {
            let id = v * cfg.samples_per_vehicle + k;
            let mut rng = seed::rng(cfg.seed, "scene", &[id as u64]);

            // Vehicle placement; degenerate draws (at the BS or sharing its
            // LiDAR cell) are resampled.
            let vehicle = loop {
                let x = rng.random_range(cfg.bounds[0]..cfg.bounds[1]);
                let y = rng.random_range(cfg.bounds[2]..cfg.bounds[3]);
                let r2 = x * x + y * y;
                if r2 > 1.0 && lidar_cell(cfg, x, y, 0.0) != tx_cell {
                    break [x, y];
                }
            };

            let obstacles: Vec<Obstacle> =
                layouts[rng.random_range(0..layouts.len())].clone();

            let blocked = obstacles.iter().any(|o| segment_hits_box([0.0, 0.0], vehicle, o));
            let channel = build_channel::<R>(cfg, vehicle, &obstacles, blocked, &mut rng);
            let label = codebook.best_beam(&channel);

            let gps: Vec<R> = {
                let noise = |rng: &mut ChaCha8Rng| -> f64 {
                    if cfg.gps_noise_std > 0.0 {
                        let n: f64 = rng.sample(rand_distr::StandardNormal);
                        n * cfg.gps_noise_std
                    } else {
                        0.0
                    }
                };
                vec![r64(vehicle[0] + noise(&mut rng)), r64(vehicle[1] + noise(&mut rng))]
            };

            samples.push(Sample {
                id,
                gps,
                rgb: rgb_grid_of::<R>(cfg, vehicle, &obstacles),
                lidar: lidar_grid_of::<R>(cfg, vehicle, &obstacles),
                label,
                mask: [true; 3],
                synthetic: false,
                channel: Some(channel),
            });
            scenes.push(Scene { sample_id: id, vehicle, obstacles, los_blocked: blocked });
        }
        vehicles.push(VehicleDataset { vehicle_id: v, samples });
    }

    let world = WorldGeometry {
        bs: [0.0, 0.0],
        bounds: cfg.bounds,
        rgb_grid: cfg.rgb_grid,
        lidar_grid: cfg.lidar_grid,
        world_height: cfg.world_height,
        scenes,
    };
    let data = DatasetFile::new(cfg.manifest(), vehicles);
    data.validate()?;
    Ok(SyntheticScenario { config: cfg.clone(), codebook, world, data })
}

/// Multi-user sum rate per the SINR objective: beams are codebook columns
/// scaled to split the power budget uniformly, so `Σ_v ‖w_v‖² = P` exactly.
pub fn sum_rate<R: Real>(
    channels: &[&[Complex<R>]],
    beams: &[usize],
    codebook: &Codebook<R>,
    power: R,
    noise_power: R,
) -> R {
    assert_eq!(channels.len(), beams.len(), "one beam per vehicle");
    let v = channels.len();
    if v == 0 {
        return R::zero();
    }
    // Codebook columns are unit-norm, so scaling each by sqrt(P/V) satisfies
    // the power constraint with equality.
    let per_user = power / r64::<R>(v as f64);
    let two = r64::<R>(2.0);
    let mut total = R::zero();
    for i in 0..v {
        let h = channels[i];
        let signal = per_user * beam_gain_sq(h, &codebook.beams[beams[i] - 1]);
        let mut interference = R::zero();
        for (j, &bj) in beams.iter().enumerate() {
            if j != i {
                interference += per_user * beam_gain_sq(h, &codebook.beams[bj - 1]);
            }
        }
        total += (R::one() + signal / (interference + noise_power)).ln() / two.ln();
    }
    total
}

/// Achieved-over-optimal sum-rate ratio. Samples are grouped into multi-user
/// instances of `group` consecutive test samples; the ratio aggregates the
/// rates of all groups.
pub fn sum_rate_ratio<R: Real>(
    predicted: &[usize],
    optimal: &[usize],
    channels: &[Vec<Complex<R>>],
    codebook: &Codebook<R>,
    power: R,
    noise_power: R,
    group: usize,
) -> R {
    assert_eq!(predicted.len(), optimal.len());
    assert_eq!(predicted.len(), channels.len());
    let group = group.max(1);
    let mut achieved = R::zero();
    let mut best = R::zero();
    let mut start = 0;
    while start < channels.len() {
        let end = (start + group).min(channels.len());
        let hs: Vec<&[Complex<R>]> = channels[start..end].iter().map(|c| c.as_slice()).collect();
        achieved += sum_rate(&hs, &predicted[start..end], codebook, power, noise_power);
        best += sum_rate(&hs, &optimal[start..end], codebook, power, noise_power);
        start = end;
    }
    if best == R::zero() {
        return R::zero();
    }
    achieved / best
}
