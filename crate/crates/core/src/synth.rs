//! Procedural scenes with exact ground truth: primitives baked into a voxel
//! field with synthetic descriptors, rendered from known poses, plus surface
//! keypoints with their visible projections in every view.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{nocs_value, Aabb, VoxelField};
use crate::geometry::{camera_from_spherical, CameraPose, Ray};
use crate::raster::{FeatureImage, Image};
use crate::render::{normalize_in_place, render, Channels, NocsImage, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    /// Axis along z; radius from the smaller of the x/y extents.
    Cylinder,
}

/// A solid with full extents `size` centered at `center`. Spheres use
/// `size[0]` as the diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: [f64; 3],
}

impl Primitive {
    /// Signed distance (negative inside).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let q = p - Vector3::from(self.center);
        let half = Vector3::from(self.size) * 0.5;
        match self.kind {
            PrimitiveKind::Box => {
                let d = q.abs() - half;
                d.map(|v| v.max(0.0)).norm() + d.max().min(0.0)
            }
            PrimitiveKind::Sphere => q.norm() - half.x,
            PrimitiveKind::Cylinder => {
                let radial = (q.x * q.x + q.y * q.y).sqrt() - half.x.min(half.y);
                let axial = q.z.abs() - half.z;
                let outside = Vector3::new(radial.max(0.0), axial.max(0.0), 0.0).norm();
                outside + radial.max(axial).min(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorMode {
    NocsLift,
    RandomSmooth,
}

fn default_domain() -> ([f64; 3], [f64; 3]) {
    ([-1.0; 3], [1.0; 3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub primitives: Vec<Primitive>,
    #[serde(default = "SynthSpec::default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_domain")]
    pub domain: ([f64; 3], [f64; 3]),
    #[serde(default = "SynthSpec::default_mode")]
    pub descriptor_mode: DescriptorMode,
    #[serde(default = "SynthSpec::default_dim")]
    pub descriptor_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Density inside primitives, per scene unit.
    #[serde(default = "SynthSpec::default_density")]
    pub density_scale: f64,
}

impl SynthSpec {
    fn default_resolution() -> usize {
        128
    }
    fn default_mode() -> DescriptorMode {
        DescriptorMode::NocsLift
    }
    fn default_dim() -> usize {
        8
    }
    fn default_density() -> f64 {
        100.0
    }

    /// A box and an off-center sphere: no rotational symmetry.
    pub fn box_and_sphere(resolution: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            primitives: vec![
                Primitive {
                    kind: PrimitiveKind::Box,
                    center: [-0.1, 0.0, -0.15],
                    size: [0.9, 0.5, 0.4],
                    color: [0.8, 0.3, 0.2],
                },
                Primitive {
                    kind: PrimitiveKind::Sphere,
                    center: [0.3, 0.15, 0.2],
                    size: [0.5; 3],
                    color: [0.2, 0.5, 0.9],
                },
            ],
            resolution,
            domain: default_domain(),
            descriptor_mode: DescriptorMode::NocsLift,
            descriptor_dim: 8,
            noise_sigma,
            seed,
            density_scale: 100.0,
        }
    }

    pub fn aabb(&self) -> Result<Aabb> {
        Aabb::new(Vector3::from(self.domain.0), Vector3::from(self.domain.1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::EmptySpec);
        }
        let domain = self.aabb()?;
        if !self.primitives.iter().any(|p| domain.contains(&Vector3::from(p.center))) {
            return Err(Error::Invalid("no primitive lies inside the domain".into()));
        }
        for p in &self.primitives {
            if p.size.iter().any(|s| !(*s > 0.0)) || p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid("primitive sizes must be positive and colors in [0, 1]".into()));
            }
        }
        if self.resolution < 2 {
            return Err(Error::Invalid("resolution must be at least 2".into()));
        }
        let min_dim = match self.descriptor_mode {
            DescriptorMode::NocsLift => 5,
            DescriptorMode::RandomSmooth => 3,
        };
        if self.descriptor_dim < min_dim {
            return Err(Error::Invalid(format!(
                "descriptor_dim {} below {min_dim} for {:?}",
                self.descriptor_dim, self.descriptor_mode
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.density_scale > 0.0) {
            return Err(Error::Invalid("noise_sigma must be non-negative, density_scale positive".into()));
        }
        Ok(())
    }
}

/// Unit descriptor of a canonical coordinate `n ∈ [0,1]³` under the
/// noise-free lift: `(2n − 1, 1)` normalized into the first four dimensions.
pub fn lift_nocs(n: &Vector3<f64>, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; dim];
    d[0] = 2.0 * n.x - 1.0;
    d[1] = 2.0 * n.y - 1.0;
    d[2] = 2.0 * n.z - 1.0;
    d[3] = 1.0;
    normalize_in_place(&mut d);
    d
}

/// Descriptor shown where rays miss the object under the NOCS lift;
/// orthogonal to every lifted descriptor.
pub fn lift_background(dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; dim];
    d[4] = 1.0;
    d
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Low-frequency sinusoid sum per channel.
struct SmoothField {
    waves: Vec<Vec<(Vector3<f64>, f64, f64)>>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, dim: usize, domain: &Aabb) -> Self {
        let base = std::f64::consts::TAU / domain.size().max();
        let waves = (0..dim)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let dir = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                        let freq = base * rng.random_range(0.5..1.5);
                        let omega = dir.normalize() * freq;
                        (omega, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
                    })
                    .collect()
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, p: &Vector3<f64>) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .waves
            .iter()
            .map(|ws| ws.iter().map(|(o, phase, amp)| amp * (o.dot(p) + phase).sin()).sum())
            .collect();
        normalize_in_place(&mut d);
        if d.iter().all(|v| *v == 0.0) {
            d[0] = 1.0;
        }
        d
    }
}

/// Bakes the scene into a voxel field: density `density_scale × occupancy`
/// where occupancy is 1 inside and ramps to 0 over one voxel at surfaces.
pub fn make_field(spec: &SynthSpec) -> Result<VoxelField> {
    spec.validate()?;
    let domain = spec.aabb()?;
    let n = spec.resolution;
    let res = [n; 3];
    let spacing = domain.size() / n as f64;
    let h = spacing.min();
    let total = n * n * n;
    let center = |i: usize| -> Vector3<f64> {
        let (ix, rest) = (i / (n * n), i % (n * n));
        let (iy, iz) = (rest / n, rest % n);
        domain.min + Vector3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5).component_mul(&spacing)
    };

    let cells: Vec<(f32, [f32; 3])> = (0..total)
        .into_par_iter()
        .map(|i| {
            let p = center(i);
            let mut best = (0.0f64, [0.0f32; 3]);
            for prim in &spec.primitives {
                let occ = (0.5 - prim.sdf(&p) / h).clamp(0.0, 1.0);
                if occ > best.0 {
                    best = (occ, prim.color.map(|c| c as f32));
                }
            }
            ((spec.density_scale * best.0) as f32, best.1)
        })
        .collect();
    let density: Vec<f32> = cells.iter().map(|c| c.0).collect();
    let color: Vec<f32> = cells.iter().flat_map(|c| c.1).collect();
    let shape = VoxelField::new(res, domain, density.clone(), color.clone(), None)?;

    let dim = spec.descriptor_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (descriptors, background) = match spec.descriptor_mode {
        DescriptorMode::NocsLift => {
            let nocs_box = shape.nocs_box()?;
            let mut desc = vec![0.0f32; total * dim];
            for i in 0..total {
                if density[i] <= 0.0 {
                    continue;
                }
                let mut d = lift_nocs(&nocs_value(&nocs_box, &center(i)), dim);
                if spec.noise_sigma > 0.0 {
                    let r = random_unit(&mut rng, dim);
                    d.iter_mut().zip(&r).for_each(|(a, b)| *a += spec.noise_sigma * b);
                    normalize_in_place(&mut d);
                }
                write_unit(&mut desc[i * dim..(i + 1) * dim], &d);
            }
            (desc, lift_background(dim))
        }
        DescriptorMode::RandomSmooth => {
            let smooth = SmoothField::new(&mut rng, dim, &domain);
            let background = random_unit(&mut rng, dim);
            let mut desc = vec![0.0f32; total * dim];
            for i in 0..total {
                if density[i] > 0.0 {
                    write_unit(&mut desc[i * dim..(i + 1) * dim], &smooth.eval(&center(i)));
                }
            }
            (desc, background)
        }
    };
    VoxelField::new(res, domain, density, color, Some((dim, descriptors)))?.with_background_descriptor(background)
}

/// Stores an f64 unit vector as f32, renormalizing after rounding.
fn write_unit(out: &mut [f32], d: &[f64]) {
    let n = d.iter().map(|v| (*v as f32 as f64).powi(2)).sum::<f64>().sqrt();
    for (o, v) in out.iter_mut().zip(d) {
        *o = ((*v as f32 as f64) / n) as f32;
    }
}

/// Random views on a sphere around the domain center, all sharing one FoV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSpec {
    pub count: usize,
    pub fov_deg: f64,
    /// `None` uses the default candidate radius of the domain.
    pub radius: Option<f64>,
    pub width: usize,
    pub height: usize,
    pub elevation_range: (f64, f64),
}

impl Default for ViewSpec {
    fn default() -> Self {
        Self {
            count: 16,
            fov_deg: 40.0,
            radius: None,
            width: 64,
            height: 64,
            elevation_range: (-60.0, 60.0),
        }
    }
}

pub fn random_views(views: &ViewSpec, domain: &Aabb, seed: u64) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_71e5);
    let radius = views.radius.unwrap_or_else(|| crate::pose_fit::default_radius(domain));
    (0..views.count)
        .map(|_| {
            let az = rng.random_range(-180.0..180.0);
            let el = rng.random_range(views.elevation_range.0..=views.elevation_range.1);
            let mut pose = camera_from_spherical(az, el, radius, views.fov_deg, views.width, views.height);
            let c = domain.center();
            pose.extrinsics.translation -= pose.extrinsics.rotation * c;
            pose
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthView {
    pub pose: CameraPose,
    pub color: Image,
    pub mask: Image,
    pub features: FeatureImage,
    pub nocs: NocsImage,
}

/// A surface point and its pixel location in each view where it is visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: [f64; 3],
    pub projections: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_keypoints: usize,
    /// Per-view descriptor noise; each component gets `σ / √C`. `None`
    /// uses the scene's `noise_sigma`.
    pub view_noise: Option<f64>,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 64,
            view_noise: None,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub field: VoxelField,
    pub views: Vec<SynthView>,
    pub keypoints: Vec<Keypoint>,
}

/// First point along the ray where density reaches `threshold`, refined by
/// bisection.
pub fn first_hit(field: &VoxelField, ray: &Ray, threshold: f64) -> Option<Vector3<f64>> {
    let (t0, t1) = field.domain().intersect_ray(ray)?;
    let step = 0.25 * field.spacing().min();
    let mut prev = t0;
    let mut t = t0;
    while t <= t1 {
        if field.sample_density(&ray.at(t)) >= threshold {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if field.sample_density(&ray.at(mid)) >= threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(ray.at(hi));
        }
        prev = t;
        t += step;
    }
    None
}

/// Density level treated as the surface.
pub fn surface_threshold(field: &VoxelField) -> f64 {
    0.5 * field.max_density()
}

/// Projection of `p` into the view if it lies in the image and is the first
/// surface point along its pixel ray.
pub fn visible_projection(field: &VoxelField, pose: &CameraPose, p: &Vector3<f64>) -> Option<[f64; 2]> {
    let u = pose.project(p)?;
    let (w, h) = (pose.intrinsics.width as f64, pose.intrinsics.height as f64);
    if !(u[0] >= 0.0 && u[0] < w && u[1] >= 0.0 && u[1] < h) {
        return None;
    }
    let hit = first_hit(field, &pose.ray_for_pixel(u), surface_threshold(field))?;
    ((hit - p).norm() <= 2.0 * field.spacing().max()).then_some(u)
}

/// Renders every view and samples keypoints by casting rays through random
/// foreground pixels of randomly chosen views.
pub fn make_dataset(spec: &SynthSpec, poses: &[CameraPose], cfg: &DatasetConfig) -> Result<SynthDataset> {
    let field = make_field(spec)?;
    dataset_from_field(field, spec.seed, spec.noise_sigma, poses, cfg)
}

pub fn dataset_from_field(
    field: VoxelField,
    seed: u64,
    noise_sigma: f64,
    poses: &[CameraPose],
    cfg: &DatasetConfig,
) -> Result<SynthDataset> {
    let noise = cfg.view_noise.unwrap_or(noise_sigma);
    let dim = field.descriptor_dim();
    let views = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let r = render(&field, pose, &cfg.render, Channels::ALL)?;
            let mut features = r.features.expect("features requested");
            if noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let std = noise / (dim as f64).sqrt();
                for px in features.data_mut().chunks_exact_mut(dim) {
                    px.iter_mut()
                        .for_each(|v| *v += std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
                    normalize_in_place(px);
                }
            }
            Ok(SynthView {
                pose: *pose,
                color: r.color.expect("color requested"),
                mask: r.mask,
                features,
                nocs: r.nocs.expect("nocs requested"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut keypoints = Vec::with_capacity(cfg.n_keypoints);
    if !views.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7970);
        let threshold = surface_threshold(&field);
        let mut attempts = 0;
        while keypoints.len() < cfg.n_keypoints && attempts < 100 * cfg.n_keypoints.max(1) {
            attempts += 1;
            let v = &views[rng.random_range(0..views.len())];
            let (w, h) = (v.mask.width(), v.mask.height());
            let u = [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)];
            if v.mask.get(u[0] as usize, u[1] as usize, 0) < 0.5 {
                continue;
            }
            let Some(p) = first_hit(&field, &v.pose.ray_for_pixel(u), threshold) else {
                continue;
            };
            let projections = poses.iter().map(|pose| visible_projection(&field, pose, &p)).collect();
            keypoints.push(Keypoint {
                position: p.into(),
                projections,
            });
        }
    }
    Ok(SynthDataset {
        field,
        views,
        keypoints,
    })
}
