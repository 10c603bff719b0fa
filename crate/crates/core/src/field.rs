//! The canonical shape as dense voxel grids.
//!
//! Values live at voxel centers, `domain.min + (i + 0.5) * spacing`, and are
//! reconstructed by trilinear interpolation. Points inside the domain but
//! beyond the outermost centers clamp to the border voxels; points outside
//! the domain read as zero so that rays through empty space accumulate
//! nothing.

use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Ray;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::Invalid(format!(
                "box corners must satisfy min < max componentwise: {min:?} / {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: Vector3::repeat(-half),
            max: Vector3::repeat(half),
        }
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.size().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Parametric interval `[t_enter, t_exit]` of the ray inside the box,
    /// restricted to `t >= 0`.
    pub fn intersect_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let o = ray.origin[k];
            let d = ray.direction[k];
            if d.abs() < 1e-300 {
                if o < self.min[k] || o > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[k] - o) * inv, (self.max[k] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Normalized object coordinate of `p` inside `bbox`, clamped to `[0, 1]³`.
pub fn nocs_value(bbox: &Aabb, p: &Vector3<f64>) -> Vector3<f64> {
    let n = (p - bbox.min).component_div(&bbox.size());
    n.map(|v| v.clamp(0.0, 1.0))
}

/// Grid channel selector for [`VoxelField::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Density,
    Color,
    Descriptor,
}

/// Eight trilinear neighbors and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil3 {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

const BLOCK: usize = 4;

/// Density, color and optional descriptor grids over an axis-aligned domain.
#[derive(Debug)]
pub struct VoxelField {
    resolution: [usize; 3],
    domain: Aabb,
    spacing: Vector3<f64>,
    density: Vec<f32>,
    color: Vec<f32>,
    descriptor_dim: usize,
    descriptors: Option<Vec<f32>>,
    background_descriptor: Option<Vec<f64>>,
    block_dims: [usize; 3],
    block_occupied: Vec<bool>,
    support: Option<Aabb>,
    nocs_box: OnceLock<Option<Aabb>>,
}

impl Clone for VoxelField {
    fn clone(&self) -> Self {
        Self {
            resolution: self.resolution,
            domain: self.domain,
            spacing: self.spacing,
            density: self.density.clone(),
            color: self.color.clone(),
            descriptor_dim: self.descriptor_dim,
            descriptors: self.descriptors.clone(),
            background_descriptor: self.background_descriptor.clone(),
            block_dims: self.block_dims,
            block_occupied: self.block_occupied.clone(),
            support: self.support,
            nocs_box: OnceLock::new(),
        }
    }
}

impl VoxelField {
    /// Validates and freezes a field. Grids are indexed
    /// `(ix * ny + iy) * nz + iz`, with channel values innermost.
    pub fn new(
        resolution: [usize; 3],
        domain: Aabb,
        density: Vec<f32>,
        color: Vec<f32>,
        descriptors: Option<(usize, Vec<f32>)>,
    ) -> Result<Self> {
        let n: usize = resolution.iter().product();
        if n == 0 {
            return Err(Error::Invalid("voxel resolution must be positive".into()));
        }
        Aabb::new(domain.min, domain.max)?;
        if density.len() != n || color.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "density/color lengths {}/{} do not match {n} voxels",
                density.len(),
                color.len()
            )));
        }
        if let Some(i) = density.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Invalid(format!("density at voxel {i} is negative or non-finite")));
        }
        if let Some(i) = color.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Invalid(format!("color value {i} outside [0, 1]")));
        }
        let (descriptor_dim, descriptors) = match descriptors {
            None => (0, None),
            Some((dim, data)) => {
                if dim == 0 || data.len() != dim * n {
                    return Err(Error::ShapeMismatch(format!(
                        "descriptor grid has {} values, expected {n}x{dim}",
                        data.len()
                    )));
                }
                for (i, d) in data.chunks_exact(dim).enumerate() {
                    let norm = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    if !(norm == 0.0 || (norm - 1.0).abs() <= 1e-4) {
                        return Err(Error::Invalid(format!(
                            "descriptor at voxel {i} has norm {norm}, expected 0 or 1"
                        )));
                    }
                }
                (dim, Some(data))
            }
        };
        let spacing = domain.size().component_div(&Vector3::new(
            resolution[0] as f64,
            resolution[1] as f64,
            resolution[2] as f64,
        ));
        let mut field = Self {
            resolution,
            domain,
            spacing,
            density,
            color,
            descriptor_dim,
            descriptors,
            background_descriptor: None,
            block_dims: [0; 3],
            block_occupied: Vec::new(),
            support: None,
            nocs_box: OnceLock::new(),
        };
        field.build_blocks();
        field.support = field.density_aabb(f64::MIN_POSITIVE).ok().map(|b| Aabb {
            min: b.min - field.spacing * 0.5,
            max: b.max + field.spacing * 0.5,
        });
        Ok(field)
    }

    /// Descriptor rendered where rays leave the shape. Must be unit norm and
    /// match the descriptor dimension.
    pub fn with_background_descriptor(mut self, bg: Vec<f64>) -> Result<Self> {
        if bg.len() != self.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "background descriptor has {} entries, field descriptors have {}",
                bg.len(),
                self.descriptor_dim
            )));
        }
        let norm = bg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("background descriptor norm {norm} is not 1")));
        }
        self.background_descriptor = Some(bg);
        Ok(self)
    }

    // Marks blocks whose voxels, widened by one voxel on each side, contain
    // any density. A trilinear sample whose lower cell corner falls in an
    // unmarked block is exactly zero.
    fn build_blocks(&mut self) {
        let [nx, ny, nz] = self.resolution;
        let bd = [nx.div_ceil(BLOCK), ny.div_ceil(BLOCK), nz.div_ceil(BLOCK)];
        let mut occ = vec![false; bd[0] * bd[1] * bd[2]];
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    if self.density[(ix * ny + iy) * nz + iz] <= 0.0 {
                        continue;
                    }
                    // Voxel i is read by cells with lower corner i-1 and i.
                    for bx in block_range(ix, bd[0]) {
                        for by in block_range(iy, bd[1]) {
                            for bz in block_range(iz, bd[2]) {
                                occ[(bx * bd[1] + by) * bd[2] + bz] = true;
                            }
                        }
                    }
                }
            }
        }
        self.block_dims = bd;
        self.block_occupied = occ;
    }

    /// Box outside which every trilinear density sample is zero; `None` for
    /// an all-empty field.
    pub fn support(&self) -> Option<&Aabb> {
        self.support.as_ref()
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn domain(&self) -> &Aabb {
        &self.domain
    }

    pub fn spacing(&self) -> Vector3<f64> {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn density_grid(&self) -> &[f32] {
        &self.density
    }

    pub fn color_grid(&self) -> &[f32] {
        &self.color
    }

    pub fn descriptor_grid(&self) -> Option<&[f32]> {
        self.descriptors.as_deref()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn has_descriptors(&self) -> bool {
        self.descriptors.is_some()
    }

    pub fn background_descriptor(&self) -> Option<&[f64]> {
        self.background_descriptor.as_deref()
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().fold(0.0f32, |a, &b| a.max(b)) as f64
    }

    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.domain.min
            + Vector3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5).component_mul(&self.spacing)
    }

    /// Trilinear stencil at `p`, or `None` outside the domain.
    #[inline]
    pub fn stencil(&self, p: &Vector3<f64>) -> Option<Stencil3> {
        let (ax, ay, az) = self.axes(p)?;
        Some(self.stencil_from_axes(ax, ay, az))
    }

    #[inline]
    fn axes(&self, p: &Vector3<f64>) -> Option<(Axis, Axis, Axis)> {
        if !self.domain.contains(p) {
            return None;
        }
        let a = |k: usize| {
            let g = (p[k] - self.domain.min[k]) / self.spacing[k] - 0.5;
            axis(g, self.resolution[k])
        };
        Some((a(0), a(1), a(2)))
    }

    #[inline]
    fn stencil_from_axes(&self, ax: Axis, ay: Axis, az: Axis) -> Stencil3 {
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        let mut n = 0;
        for (ix, wx) in [(ax.i0, 1.0 - ax.f), (ax.i1, ax.f)] {
            for (iy, wy) in [(ay.i0, 1.0 - ay.f), (ay.i1, ay.f)] {
                for (iz, wz) in [(az.i0, 1.0 - az.f), (az.i1, az.f)] {
                    idx[n] = self.flat_index(ix, iy, iz);
                    w[n] = wx * wy * wz;
                    n += 1;
                }
            }
        }
        Stencil3 { idx, w }
    }

    /// Density with block-level empty-space rejection; also returns the
    /// stencil for follow-up channel reads when the density is positive.
    #[inline]
    pub fn density_with_stencil(&self, p: &Vector3<f64>) -> Option<(f64, Stencil3)> {
        let (ax, ay, az) = self.axes(p)?;
        let b = (ax.i0 / BLOCK * self.block_dims[1] + ay.i0 / BLOCK) * self.block_dims[2] + az.i0 / BLOCK;
        if !self.block_occupied[b] {
            return None;
        }
        let s = self.stencil_from_axes(ax, ay, az);
        let d = self.density_at(&s);
        if d > 0.0 {
            Some((d, s))
        } else {
            None
        }
    }

    #[inline]
    pub fn density_at(&self, s: &Stencil3) -> f64 {
        s.idx
            .iter()
            .zip(&s.w)
            .map(|(&i, &w)| w * self.density[i] as f64)
            .sum()
    }

    #[inline]
    pub fn color_at(&self, s: &Stencil3) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (&i, &w) in s.idx.iter().zip(&s.w) {
            for k in 0..3 {
                c[k] += w * self.color[3 * i + k] as f64;
            }
        }
        c
    }

    /// Adds `scale` times the interpolated descriptor into `out`.
    #[inline]
    pub fn accumulate_descriptor(&self, s: &Stencil3, scale: f64, out: &mut [f64]) -> Result<()> {
        let data = self.descriptors.as_ref().ok_or(Error::DescriptorAbsent)?;
        let dim = self.descriptor_dim;
        for (&i, &w) in s.idx.iter().zip(&s.w) {
            let ws = w * scale;
            if ws == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&data[dim * i..dim * (i + 1)]) {
                *o += ws * *v as f64;
            }
        }
        Ok(())
    }

    pub fn sample_density(&self, p: &Vector3<f64>) -> f64 {
        self.stencil(p).map_or(0.0, |s| self.density_at(&s))
    }

    pub fn sample_color(&self, p: &Vector3<f64>) -> [f64; 3] {
        self.stencil(p).map_or([0.0; 3], |s| self.color_at(&s))
    }

    pub fn sample_descriptor(&self, p: &Vector3<f64>) -> Result<Vec<f64>> {
        if !self.has_descriptors() {
            return Err(Error::DescriptorAbsent);
        }
        let mut out = vec![0.0; self.descriptor_dim];
        if let Some(s) = self.stencil(p) {
            self.accumulate_descriptor(&s, 1.0, &mut out)?;
        }
        Ok(out)
    }

    /// Trilinear sample of any channel.
    pub fn sample(&self, p: &Vector3<f64>, channel: Channel) -> Result<Vec<f64>> {
        match channel {
            Channel::Density => Ok(vec![self.sample_density(p)]),
            Channel::Color => Ok(self.sample_color(p).to_vec()),
            Channel::Descriptor => self.sample_descriptor(p),
        }
    }

    /// Tightest box over centers of voxels with density ≥ `tau`, widened by
    /// half a voxel on every side.
    pub fn density_aabb(&self, tau: f64) -> Result<Aabb> {
        let [nx, ny, nz] = self.resolution;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ix in 0..nx {
            for iy in 0..ny {
                let row = (ix * ny + iy) * nz;
                for iz in 0..nz {
                    if (self.density[row + iz] as f64) >= tau {
                        any = true;
                        for (k, i) in [ix, iy, iz].into_iter().enumerate() {
                            lo[k] = lo[k].min(i);
                            hi[k] = hi[k].max(i);
                        }
                    }
                }
            }
        }
        if !any {
            return Err(Error::EmptyField(tau));
        }
        let corner = |i: [usize; 3], off: f64| {
            self.domain.min
                + Vector3::new(i[0] as f64 + off, i[1] as f64 + off, i[2] as f64 + off)
                    .component_mul(&self.spacing)
        };
        Ok(Aabb {
            min: corner(lo, 0.0),
            max: corner(hi, 1.0),
        })
    }

    /// Default density threshold for the shape box: half the peak density.
    pub fn default_tau(&self) -> f64 {
        0.5 * self.max_density()
    }

    /// Shape box used for NOCS, computed once with [`Self::default_tau`].
    pub fn nocs_box(&self) -> Result<Aabb> {
        let tau = self.default_tau();
        self.nocs_box
            .get_or_init(|| if tau > 0.0 { self.density_aabb(tau).ok() } else { None })
            .ok_or(Error::EmptyField(tau))
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    f: f64,
}

#[inline]
fn axis(g: f64, n: usize) -> Axis {
    if !(g > 0.0) {
        return Axis { i0: 0, i1: 0, f: 0.0 };
    }
    let fl = g.floor();
    let i = fl as usize;
    if i + 1 >= n {
        return Axis {
            i0: n - 1,
            i1: n - 1,
            f: 0.0,
        };
    }
    Axis {
        i0: i,
        i1: i + 1,
        f: g - fl,
    }
}

fn block_range(i: usize, nb: usize) -> std::ops::RangeInclusive<usize> {
    let lo = i.saturating_sub(1) / BLOCK;
    let hi = (i / BLOCK).min(nb - 1);
    lo..=hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn field_from(res: [usize; 3], density: Vec<f32>) -> VoxelField {
        let n = density.len();
        VoxelField::new(res, Aabb::cube(1.0), density, vec![0.5; 3 * n], None).unwrap()
    }

    #[test]
    fn sample_at_centers_and_midpoints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let res = [5, 4, 6];
        let density: Vec<f32> = (0..120).map(|_| rng.random_range(0.0..4.0)).collect();
        let f = field_from(res, density.clone());
        for ix in 0..5 {
            for iy in 0..4 {
                for iz in 0..6 {
                    let c = f.voxel_center(ix, iy, iz);
                    assert!((f.sample_density(&c) - density[f.flat_index(ix, iy, iz)] as f64).abs() < 1e-12);
                }
            }
        }
        let a = f.voxel_center(1, 2, 3);
        let b = f.voxel_center(2, 2, 3);
        let mid = f.sample_density(&((a + b) / 2.0));
        let expect = 0.5 * (density[f.flat_index(1, 2, 3)] as f64 + density[f.flat_index(2, 2, 3)] as f64);
        assert!((mid - expect).abs() < 1e-12);
    }

    #[test]
    fn outside_domain_reads_zero() {
        let f = field_from([2, 2, 2], vec![1.0; 8]);
        assert_eq!(f.sample_density(&Vector3::new(1.5, 0.0, 0.0)), 0.0);
        assert_eq!(f.sample_color(&Vector3::new(0.0, -1.01, 0.0)), [0.0; 3]);
        assert_eq!(f.sample_density(&Vector3::new(0.99, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn descriptor_absent_error() {
        let f = field_from([2, 2, 2], vec![1.0; 8]);
        assert!(matches!(f.sample(&Vector3::zeros(), Channel::Descriptor), Err(Error::DescriptorAbsent)));
        assert_eq!(f.sample(&Vector3::zeros(), Channel::Density).unwrap(), vec![1.0]);
    }

    #[test]
    fn density_aabb_single_voxel_and_empty() {
        let mut d = vec![0.0f32; 64];
        let f0 = field_from([4, 4, 4], d.clone());
        assert!(matches!(f0.density_aabb(0.5), Err(Error::EmptyField(_))));
        assert!(f0.nocs_box().is_err());
        d[(1 * 4 + 2) * 4 + 3] = 2.0;
        let f = field_from([4, 4, 4], d);
        let b = f.density_aabb(1.0).unwrap();
        assert_eq!(b.min, Vector3::new(-0.5, 0.0, 0.5));
        assert_eq!(b.max, Vector3::new(0.0, 0.5, 1.0));
    }

    #[test]
    fn block_rejection_is_exact() {
        // Sparse random field: the fast path must agree with the plain
        // trilinear sample everywhere.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let res = [13, 9, 11];
        let n = 13 * 9 * 11;
        let density: Vec<f32> =
            (0..n).map(|_| if rng.random_bool(0.03) { rng.random_range(0.1..3.0) } else { 0.0 }).collect();
        let f = field_from(res, density);
        for _ in 0..20000 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let fast = f.density_with_stencil(&p).map_or(0.0, |(d, _)| d);
            assert_eq!(fast, f.sample_density(&p));
        }
    }

    #[test]
    fn nocs_corners_and_center() {
        let b = Aabb::new(Vector3::new(-1.0, 0.0, 2.0), Vector3::new(1.0, 4.0, 3.0)).unwrap();
        assert_eq!(nocs_value(&b, &b.min), Vector3::zeros());
        assert_eq!(nocs_value(&b, &b.max), Vector3::repeat(1.0));
        assert_eq!(nocs_value(&b, &b.center()), Vector3::repeat(0.5));
        assert_eq!(nocs_value(&b, &Vector3::new(5.0, -3.0, 2.5)), Vector3::new(1.0, 0.0, 0.5));
    }

    #[test]
    fn ray_box_interval() {
        let b = Aabb::cube(1.0);
        let ray = Ray {
            origin: Vector3::new(-3.0, 0.2, 0.0),
            direction: Vector3::x(),
        };
        let (t0, t1) = b.intersect_ray(&ray).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        let miss = Ray {
            origin: Vector3::new(-3.0, 2.0, 0.0),
            direction: Vector3::x(),
        };
        assert!(b.intersect_ray(&miss).is_none());
    }

    #[test]
    fn rejects_invalid_grids() {
        let r = VoxelField::new([1, 1, 1], Aabb::cube(1.0), vec![-1.0], vec![0.0; 3], None);
        assert!(r.is_err());
        let r = VoxelField::new([1, 1, 1], Aabb::cube(1.0), vec![1.0], vec![1.5, 0.0, 0.0], None);
        assert!(r.is_err());
        let r = VoxelField::new([1, 1, 1], Aabb::cube(1.0), vec![1.0], vec![0.0; 3], Some((2, vec![0.5, 0.5])));
        assert!(r.is_err());
    }
}
