//! Occupancy scaffold storage, trilinear sampling, mirroring and IoU.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::math::{Aabb, Vec3};

const VXG_MAGIC: &[u8; 4] = b"VXGR";
const VXG_VERSION: u32 = 1;

/// Dense occupancy grid; values sit at cell centers and are laid out as
/// `x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub bounds: Aabb,
    pub values: Vec<f64>,
}

/// The eight corner voxels and weights touched by one trilinear lookup.
/// Corners falling outside the index range have `index == None` and read as 0.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearStencil {
    pub index: [Option<usize>; 8],
    pub weight: [f64; 8],
    /// d(weight)/d(p) for each corner and axis.
    pub dweight: [[f64; 3]; 8],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], bounds: Aabb, values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|d| *d == 0) {
            return shape_err(format!("grid dims must be positive, got {dims:?}"));
        }
        if dims.iter().product::<usize>() != values.len() {
            return shape_err(format!(
                "grid {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(Self { dims, bounds, values })
    }

    pub fn filled(dims: [usize; 3], bounds: Aabb, value: f64) -> Self {
        Self {
            dims,
            bounds,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let size = self.bounds.size();
        let c = [x, y, z];
        let v: [f64; 3] =
            std::array::from_fn(|i| self.bounds.min[i] + (c[i] as f64 + 0.5) * size[i] / self.dims[i] as f64);
        Vec3::from_slice(&v)
    }

    pub fn same_layout(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.bounds == other.bounds
    }

    /// Interpolation stencil at `p`, or `None` outside the bounds.
    pub fn stencil(&self, p: Vec3) -> Option<TrilinearStencil> {
        stencil(self.dims, &self.bounds, p)
    }

    pub fn trilinear_sample(&self, p: Vec3) -> f64 {
        trilinear_sample(self, p)
    }

    pub fn mirror(&self) -> VoxelGrid {
        mirror(self)
    }

    pub fn write_vxg<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VXG_MAGIC)?;
        w.write_all(&VXG_VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.to_array().into_iter().chain(self.bounds.max.to_array()) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_vxg<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VXG_MAGIC {
            return Err(Error::Format("not a VXG file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VXG_VERSION {
            return Err(Error::Format(format!("unsupported VXG version {version}")));
        }
        let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = read_f32(&mut r)? as f64;
        }
        let bounds = Aabb::new(Vec3::from_slice(&b[..3]), Vec3::from_slice(&b[3..]))?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        VoxelGrid::new(dims, bounds, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.len() * 4);
        self.write_vxg(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_vxg(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn stencil(dims: [usize; 3], bounds: &Aabb, p: Vec3) -> Option<TrilinearStencil> {
    if !bounds.contains(p) {
        return None;
    }
    let size = bounds.size();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    let mut scale = [0.0; 3];
    for i in 0..3 {
        scale[i] = dims[i] as f64 / size[i];
        let u = (p[i] - bounds.min[i]) * scale[i] - 0.5;
        let f = u.floor();
        base[i] = f as i64;
        frac[i] = u - f;
    }
    let mut out = TrilinearStencil {
        index: [None; 8],
        weight: [0.0; 8],
        dweight: [[0.0; 3]; 8],
    };
    for corner in 0..8 {
        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = [0.0; 3];
        let mut dw = [0.0; 3];
        let mut idx = [0i64; 3];
        for i in 0..3 {
            idx[i] = base[i] + bits[i] as i64;
            if bits[i] == 1 {
                w[i] = frac[i];
                dw[i] = scale[i];
            } else {
                w[i] = 1.0 - frac[i];
                dw[i] = -scale[i];
            }
        }
        out.weight[corner] = w[0] * w[1] * w[2];
        out.dweight[corner] = [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]];
        let inside = (0..3).all(|i| idx[i] >= 0 && (idx[i] as usize) < dims[i]);
        if inside {
            let (x, y, z) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
            out.index[corner] = Some(x + dims[0] * (y + dims[1] * z));
        }
    }
    Some(out)
}

/// Trilinear interpolation between the 8 surrounding voxel centers. Points
/// outside the bounds read 0; corners beyond the outermost centers read 0.
pub fn trilinear_sample(grid: &VoxelGrid, p: Vec3) -> f64 {
    sample_values(grid.dims, &grid.bounds, &grid.values, p)
}

pub(crate) fn sample_values(dims: [usize; 3], bounds: &Aabb, values: &[f64], p: Vec3) -> f64 {
    match stencil(dims, bounds, p) {
        None => 0.0,
        Some(s) => s
            .index
            .iter()
            .zip(s.weight)
            .filter_map(|(i, w)| i.map(|i| w * values[i]))
            .sum(),
    }
}

/// Flip along the x index: `out[x, y, z] = in[nx - 1 - x, y, z]`.
pub fn mirror(grid: &VoxelGrid) -> VoxelGrid {
    VoxelGrid {
        dims: grid.dims,
        bounds: grid.bounds,
        values: mirror_values(grid.dims, &grid.values),
    }
}

pub(crate) fn mirror_values(dims: [usize; 3], values: &[f64]) -> Vec<f64> {
    let nx = dims[0];
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks_exact(nx) {
        out.extend(row.iter().rev());
    }
    out
}

/// Thresholded intersection over union; 1 when both occupied sets are empty.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid, threshold: f64) -> Result<f64> {
    if !a.same_layout(b) {
        return shape_err(format!("IoU of grids {:?} and {:?}", a.dims, b.dims));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (ia, ib) = (*x >= threshold, *y >= threshold);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], values: Vec<f64>) -> VoxelGrid {
        VoxelGrid::new(dims, Aabb::unit(), values).unwrap()
    }

    #[test]
    fn sample_at_center_returns_voxel() {
        let values: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let g = grid([4, 4, 4], values);
        let c = g.voxel_center(1, 2, 3);
        assert!((g.trilinear_sample(c) - g.get(1, 2, 3)).abs() < 1e-12);
    }

    #[test]
    fn cell_midpoint_is_corner_mean() {
        // Corners with z = 1 are occupied.
        let mut values = vec![0.0; 8];
        for v in &mut values[4..] {
            *v = 1.0;
        }
        let g = grid([2, 2, 2], values);
        assert!((g.trilinear_sample(Vec3::ZERO) - 0.5).abs() < 1e-12);
        assert_eq!(g.trilinear_sample(Vec3::new(0.7, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn mirror_examples() {
        let g = grid([2, 1, 1], vec![0.2, 0.9]);
        assert_eq!(g.mirror().values, vec![0.9, 0.2]);
        let sym = grid([3, 1, 1], vec![0.1, 0.5, 0.1]);
        assert_eq!(sym.mirror(), sym);
    }

    #[test]
    fn iou_examples() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        a[..8].iter_mut().for_each(|v| *v = 1.0);
        b[4..12].iter_mut().for_each(|v| *v = 1.0);
        let (ga, gb) = (grid([4, 4, 4], a), grid([4, 4, 4], b));
        assert_eq!(voxel_iou(&ga, &ga, 0.5).unwrap(), 1.0);
        assert!((voxel_iou(&ga, &gb, 0.5).unwrap() - 4.0 / 12.0).abs() < 1e-12);
        let mut c = vec![0.0; 64];
        c[40..48].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(voxel_iou(&ga, &grid([4, 4, 4], c), 0.5).unwrap(), 0.0);
        let empty = grid([4, 4, 4], vec![0.0; 64]);
        assert_eq!(voxel_iou(&empty, &empty, 0.5).unwrap(), 1.0);
        assert!(voxel_iou(&empty, &grid([2, 2, 2], vec![0.0; 8]), 0.5).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(VoxelGrid::new([2, 1, 1], Aabb::unit(), vec![0.0, 1.5]).is_err());
        assert!(VoxelGrid::new([2, 2, 1], Aabb::unit(), vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn vxg_round_trip_bytes() {
        let g = grid([3, 2, 2], (0..12).map(|i| i as f64 / 16.0).collect());
        let mut buf = Vec::new();
        g.write_vxg(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VXGR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 4 + 4 + 12 + 24 + 12 * 4);
        assert_eq!(VoxelGrid::read_vxg(&buf[..]).unwrap(), g);
    }

    proptest! {
        #[test]
        fn reproduces_trilinear_functions(
            c in proptest::array::uniform8(-1.0f64..1.0),
            px in -0.375f64..0.375, py in -0.375f64..0.375, pz in -0.375f64..0.375,
        ) {
            // f(x,y,z) = c0 + c1 x + c2 y + c3 z + c4 xy + c5 yz + c6 xz + c7 xyz
            let f = |p: Vec3| c[0] + c[1]*p.x + c[2]*p.y + c[3]*p.z + c[4]*p.x*p.y
                + c[5]*p.y*p.z + c[6]*p.x*p.z + c[7]*p.x*p.y*p.z;
            let dims = [4, 4, 4];
            let mut values = vec![0.0; 64];
            let probe = VoxelGrid::filled(dims, Aabb::unit(), 0.0);
            for z in 0..4 { for y in 0..4 { for x in 0..4 {
                values[probe.index(x, y, z)] = f(probe.voxel_center(x, y, z));
            }}}
            // Values may leave [0, 1]; sample the raw buffer directly.
            let p = Vec3::new(px, py, pz);
            let got = sample_values(dims, &Aabb::unit(), &values, p);
            prop_assert!((got - f(p)).abs() < 1e-12);
        }

        #[test]
        fn sample_within_corner_range(
            values in proptest::collection::vec(0.0f64..1.0, 27),
            px in -0.5f64..0.5, py in -0.5f64..0.5, pz in -0.5f64..0.5,
        ) {
            let g = grid([3, 3, 3], values);
            let s = g.stencil(Vec3::new(px, py, pz)).unwrap();
            let corners: Vec<f64> = s.index.iter().map(|i| i.map_or(0.0, |i| g.values[i])).collect();
            let v = g.trilinear_sample(Vec3::new(px, py, pz));
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn corner_derivative_is_weight(
            values in proptest::collection::vec(0.1f64..0.9, 27),
            px in -0.3f64..0.3, py in -0.3f64..0.3, pz in -0.3f64..0.3,
        ) {
            let g = grid([3, 3, 3], values.clone());
            let p = Vec3::new(px, py, pz);
            let s = g.stencil(p).unwrap();
            let h = 1e-5;
            for (idx, w) in s.index.iter().zip(s.weight) {
                let Some(i) = *idx else { continue };
                let mut plus = values.clone();
                let mut minus = values.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (sample_values(g.dims, &g.bounds, &plus, p)
                    - sample_values(g.dims, &g.bounds, &minus, p)) / (2.0 * h);
                let rel = (fd - w).abs() / w.abs().max(1e-3);
                prop_assert!(rel < 1e-6, "fd {fd} vs weight {w}");
            }
        }

        #[test]
        fn mirror_is_involution_and_permutation(values in proptest::collection::vec(0.0f64..1.0, 24)) {
            let g = grid([4, 3, 2], values);
            let m = g.mirror();
            prop_assert_eq!(m.mirror(), g.clone());
            let mut a = g.values.clone();
            let mut b = m.values.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
