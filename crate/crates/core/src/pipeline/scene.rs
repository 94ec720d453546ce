use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{join_list, key_values, parse_list};
use super::PipelineError;
use crate::render::{render_with, Camera, CovarianceConvention, Gaussian3D, RenderedImage};

/// Generator settings of a synthetic dynamic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub clusters: usize,
    pub gaussians_per_cluster: usize,
    /// Rigid per-cluster travel (world units).
    pub global_amplitude: f64,
    /// Per-Gaussian sinusoidal jitter (world units).
    pub local_amplitude: f64,
    /// Jitter cycles over the whole sequence.
    pub local_frequency: f64,
    /// Time window `[start, end)` whose motion is amplified by `burst_factor`.
    pub burst: [f64; 2],
    pub burst_factor: f64,
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub frames: usize,
    pub camera_radius: f64,
    pub fov: f64,
    pub background: [f64; 3],
    pub init_points: usize,
    pub init_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            clusters: 3,
            gaussians_per_cluster: 24,
            global_amplitude: 0.3,
            local_amplitude: 0.03,
            local_frequency: 2.0,
            burst: [0.0, 0.0],
            burst_factor: 1.0,
            width: 32,
            height: 32,
            cameras: 4,
            frames: 24,
            camera_radius: 3.0,
            fov: 0.7,
            background: [0.0; 3],
            init_points: 400,
            init_noise: 0.02,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.trim().parse().map_err(|_| PipelineError::Config(format!("bad value {v:?} for scene.{key}")))
}

impl SceneSpec {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "clusters" => self.clusters = num(key, v)?,
            "gaussians_per_cluster" => self.gaussians_per_cluster = num(key, v)?,
            "global_amplitude" => self.global_amplitude = num(key, v)?,
            "local_amplitude" => self.local_amplitude = num(key, v)?,
            "local_frequency" => self.local_frequency = num(key, v)?,
            "burst" => self.burst = parse_list(key, v)?,
            "burst_factor" => self.burst_factor = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "cameras" => self.cameras = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "camera_radius" => self.camera_radius = num(key, v)?,
            "fov" => self.fov = num(key, v)?,
            "background" => self.background = parse_list(key, v)?,
            "init_points" => self.init_points = num(key, v)?,
            "init_noise" => self.init_noise = num(key, v)?,
            _ => return Err(PipelineError::Config(format!("unknown scene key {key:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("clusters", self.clusters.to_string()),
            ("gaussians_per_cluster", self.gaussians_per_cluster.to_string()),
            ("global_amplitude", self.global_amplitude.to_string()),
            ("local_amplitude", self.local_amplitude.to_string()),
            ("local_frequency", self.local_frequency.to_string()),
            ("burst", join_list(&self.burst)),
            ("burst_factor", self.burst_factor.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("cameras", self.cameras.to_string()),
            ("frames", self.frames.to_string()),
            ("camera_radius", self.camera_radius.to_string()),
            ("fov", self.fov.to_string()),
            ("background", join_list(&self.background)),
            ("init_points", self.init_points.to_string()),
            ("init_noise", self.init_noise.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut s = Self::default();
        for (k, v) in key_values(text)? {
            s.set(&k, &v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.width == 0 || self.height == 0 || self.width > 256 || self.height > 256 {
            return bad("scene resolution must be between 1 and 256");
        }
        if self.clusters == 0 || self.gaussians_per_cluster == 0 {
            return bad("scene needs at least one Gaussian");
        }
        if self.cameras == 0 || self.frames < 2 {
            return bad("scene needs a camera and at least two frames");
        }
        if self.init_points == 0 {
            return bad("scene.init_points must be positive");
        }
        Ok(())
    }
}

/// One ground-truth Gaussian with its motion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingGaussian {
    pub base: Gaussian3D,
    pub cluster: usize,
    /// Offset from the cluster pivot at rest.
    pub local: [f64; 3],
    pub jitter_dir: [f64; 3],
    pub jitter_phase: f64,
}

/// Rigid trajectory of one cluster: translation plus a yaw about its pivot.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMotion {
    pub pivot: [f64; 3],
    pub direction: [f64; 3],
    pub phase: f64,
    pub yaw_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub gaussians: Vec<MovingGaussian>,
    pub clusters: Vec<ClusterMotion>,
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
    /// `frames[f][c]`: timestamp `f`, camera `c`.
    pub frames: Vec<Vec<RenderedImage>>,
    /// Noisy samples of the ground truth used to seed anchors.
    pub init_points: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Held-out frames are every 8th timestamp, starting at index 4.
pub fn is_test_frame(f: usize) -> bool {
    f % 8 == 4
}

impl SyntheticScene {
    /// Integrated motion gain: time spent inside the burst window counts
    /// `burst_factor` times, so positions stay continuous.
    fn warped_time(&self, t: f64) -> f64 {
        let [a, b] = self.spec.burst;
        let k = self.spec.burst_factor;
        if !(b > a) || k == 1.0 {
            return t;
        }
        let inside = (t.min(b) - a).max(0.0);
        t + (k - 1.0) * inside
    }

    pub fn cluster_offset(&self, c: usize, t: f64) -> ([f64; 3], f64) {
        let m = &self.clusters[c];
        let w = self.warped_time(t);
        let s = self.spec.global_amplitude * (2.0 * PI * w * 0.5 + m.phase).sin();
        let s0 = self.spec.global_amplitude * m.phase.sin();
        let d = m.direction;
        ([d[0] * (s - s0), d[1] * (s - s0), d[2] * (s - s0)], m.yaw_rate * w)
    }

    pub fn gaussians_at(&self, t: f64) -> Vec<Gaussian3D> {
        let w = self.warped_time(t);
        self.gaussians
            .iter()
            .map(|g| {
                let m = &self.clusters[g.cluster];
                let (shift, yaw) = self.cluster_offset(g.cluster, t);
                let (sy, cy) = yaw.sin_cos();
                let l = g.local;
                let rotated = [cy * l[0] + sy * l[2], l[1], -sy * l[0] + cy * l[2]];
                let j = self.spec.local_amplitude
                    * ((2.0 * PI * self.spec.local_frequency * w + g.jitter_phase).sin() - g.jitter_phase.sin());
                let mut out = g.base.clone();
                for a in 0..3 {
                    out.center[a] = m.pivot[a] + rotated[a] + shift[a] + j * g.jitter_dir[a];
                }
                // Yaw the orientation with the cluster.
                let (hs, hc) = (0.5 * yaw).sin_cos();
                out.rotation = quat_mul([hc, 0.0, hs, 0.0], g.base.rotation);
                out
            })
            .collect()
    }

    pub fn render_at(&self, camera: usize, t: f64) -> RenderedImage {
        render_with(
            &self.gaussians_at(t),
            &self.cameras[camera],
            self.spec.background,
            CovarianceConvention::AsPrinted,
        )
    }

    /// `(frame, camera)` pairs of a split.
    pub fn views(&self, split: Split) -> Vec<(usize, usize)> {
        (0..self.timestamps.len())
            .filter(|&f| is_test_frame(f) == (split == Split::Test))
            .flat_map(|f| (0..self.cameras.len()).map(move |c| (f, c)))
            .collect()
    }

    pub fn bounds(&self) -> [[f64; 3]; 2] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &t in &self.timestamps {
            for g in self.gaussians_at(t) {
                for a in 0..3 {
                    lo[a] = lo[a].min(g.center[a]);
                    hi[a] = hi[a].max(g.center[a]);
                }
            }
        }
        for p in &self.init_points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        [lo, hi]
    }
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if l > 1e-6 {
            return [v[0] / l, v[1] / l, v[2] / l];
        }
    }
}

/// Cameras on an arc in front of the origin, looking at it.
pub fn arc_cameras(spec: &SceneSpec) -> Result<Vec<Camera>, PipelineError> {
    let n = spec.cameras;
    (0..n)
        .map(|i| {
            let a = if n == 1 { 0.0 } else { -0.6 + 1.2 * i as f64 / (n - 1) as f64 };
            let e = if n == 1 { -0.2 } else { -0.35 + 0.3 * (i % 2) as f64 };
            let r = spec.camera_radius;
            let eye = [r * a.sin() * e.cos(), r * e.sin(), -r * a.cos() * e.cos()];
            Ok(Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], spec.fov, spec.width, spec.height)?)
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palette: [[f64; 3]; 5] = [[0.9, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.95], [0.9, 0.8, 0.2], [0.7, 0.3, 0.8]];
    let spread = Normal::new(0.0, 0.16).expect("valid std");
    let mut clusters = Vec::with_capacity(spec.clusters);
    let mut gaussians = Vec::new();
    for c in 0..spec.clusters {
        let ang = 2.0 * PI * c as f64 / spec.clusters as f64 + rng.random_range(-0.3..0.3);
        let rad = if spec.clusters == 1 { 0.0 } else { 0.45 };
        let pivot = [rad * ang.cos(), rad * ang.sin() * 0.8, rng.random_range(-0.2..0.2)];
        clusters.push(ClusterMotion {
            pivot,
            direction: unit(&mut rng),
            phase: rng.random_range(0.0..2.0 * PI),
            yaw_rate: rng.random_range(-0.6..0.6),
        });
        let base = palette[c % palette.len()];
        for _ in 0..spec.gaussians_per_cluster {
            let local = [spread.sample(&mut rng), spread.sample(&mut rng), spread.sample(&mut rng)];
            let scale = [
                rng.random_range(0.035..0.085),
                rng.random_range(0.035..0.085),
                rng.random_range(0.035..0.085),
            ];
            let q = unit(&mut rng);
            let half: f64 = rng.random_range(0.0..PI / 2.0);
            let rot = [half.cos(), q[0] * half.sin(), q[1] * half.sin(), q[2] * half.sin()];
            let color = [
                (base[0] + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
                (base[1] + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
                (base[2] + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
            ];
            let center = [pivot[0] + local[0], pivot[1] + local[1], pivot[2] + local[2]];
            gaussians.push(MovingGaussian {
                base: Gaussian3D::new(center, rot, scale, rng.random_range(0.75..0.95), color)?,
                cluster: c,
                local,
                jitter_dir: unit(&mut rng),
                jitter_phase: rng.random_range(0.0..2.0 * PI),
            });
        }
    }
    let timestamps: Vec<f64> = (0..spec.frames).map(|f| f as f64 / (spec.frames - 1) as f64).collect();
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        gaussians,
        clusters,
        cameras: arc_cameras(spec)?,
        timestamps,
        frames: Vec::new(),
        init_points: Vec::new(),
    };
    let noise = Normal::new(0.0, spec.init_noise.max(0.0)).expect("valid std");
    let train: Vec<f64> = scene
        .timestamps
        .iter()
        .enumerate()
        .filter(|(f, _)| !is_test_frame(*f))
        .map(|(_, &t)| t)
        .collect();
    let mut init = Vec::with_capacity(spec.init_points);
    for _ in 0..spec.init_points {
        let t = train[rng.random_range(0..train.len())];
        let g = rng.random_range(0..scene.gaussians.len());
        let c = scene.gaussians_at(t)[g].center;
        init.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng), c[2] + noise.sample(&mut rng)]);
    }
    scene.init_points = init;
    scene.frames = scene
        .timestamps
        .iter()
        .map(|&t| (0..scene.cameras.len()).map(|c| scene.render_at(c, t)).collect())
        .collect();
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            width: 16,
            height: 16,
            frames: 9,
            cameras: 2,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn static_when_amplitudes_zero() {
        let spec = SceneSpec {
            global_amplitude: 0.0,
            local_amplitude: 0.0,
            ..small()
        };
        let mut s = generate_scene(&spec).unwrap();
        for c in s.clusters.iter_mut() {
            c.yaw_rate = 0.0;
        }
        let first = s.render_at(1, 0.0);
        for &t in &s.timestamps {
            assert_eq!(s.render_at(1, t), first);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.init_points, b.init_points);
    }

    #[test]
    fn split_sizes() {
        let s = generate_scene(&SceneSpec { frames: 24, cameras: 2, width: 8, height: 8, ..SceneSpec::default() }).unwrap();
        assert_eq!(s.views(Split::Test).len(), 3 * 2);
        assert_eq!(s.views(Split::Train).len(), 21 * 2);
    }

    #[test]
    fn spec_text_round_trip() {
        let mut s = small();
        s.burst = [0.25, 0.5];
        s.burst_factor = 4.0;
        assert_eq!(SceneSpec::from_text(&s.to_text()).unwrap(), s);
    }
}
