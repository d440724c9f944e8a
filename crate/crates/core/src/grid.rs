//! N-dimensional rectilinear grid container shared by every value-function
//! consumer: multilinear interpolation, node-wise finite differences, upwind
//! one-sided differences, and the `VFGRID1` on-disk format.
//!
//! Fields are stored as flat row-major arrays in the axis order declared by
//! the [`GridSpec`]. Periodic axes (heading) wrap; non-periodic queries
//! outside the domain clamp to the boundary. Time-to-reach fields use an
//! IEEE `+inf` sentinel for unreachable nodes; interpolation and gradients
//! treat the sentinel explicitly rather than letting it poison arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic bytes of the binary value-function file format.
pub const VFGRID_MAGIC: &[u8; 8] = b"VFGRID1\0";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("query dimension {got} does not match grid dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid axis: {0}")]
    InvalidAxis(String),
    #[error("values length {got} does not match grid node count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("field has {snapshots} snapshots; time query requires t in [0, {max:.3}] s, got {got:.3}")]
    TimeOutOfRange { snapshots: usize, max: f64, got: f64 },
    #[error("field has a time axis; interpolation requires an explicit time")]
    TimeRequired,
    #[error("axis index {0} out of range")]
    AxisOutOfRange(usize),
    #[error("bad VFGRID1 file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One grid axis: `n` nodes spanning `[lo, hi]`, optionally periodic.
///
/// Non-periodic axes place nodes at both endpoints (spacing `(hi-lo)/(n-1)`);
/// periodic axes identify `hi` with `lo` (spacing `(hi-lo)/n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub periodic: bool,
}

impl AxisSpec {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n, periodic: false }
    }

    pub fn periodic(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n, periodic: true }
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.hi - self.lo) / self.n as f64
        } else {
            (self.hi - self.lo) / (self.n - 1) as f64
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    /// Wraps `x` into `[lo, lo + period)` for periodic axes; identity otherwise.
    pub fn wrap(&self, x: f64) -> f64 {
        if !self.periodic {
            return x;
        }
        let period = self.hi - self.lo;
        let mut u = (x - self.lo).rem_euclid(period);
        // rem_euclid can return `period` when x is a hair below a period multiple
        if u >= period {
            u -= period;
        }
        self.lo + u
    }
}

/// Rectilinear grid: an ordered list of axes. Storage is row-major in this
/// axis order (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    axes: Vec<AxisSpec>,
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::InvalidAxis("grid needs at least one axis".into()));
        }
        for (k, ax) in axes.iter().enumerate() {
            if !(ax.lo < ax.hi) || !ax.lo.is_finite() || !ax.hi.is_finite() {
                return Err(GridError::InvalidAxis(format!(
                    "axis {k}: need finite lo < hi, got [{}, {}]",
                    ax.lo, ax.hi
                )));
            }
            if ax.n < 3 {
                return Err(GridError::InvalidAxis(format!("axis {k}: need n >= 3, got {}", ax.n)));
            }
        }
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &AxisSpec {
        &self.axes[k]
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    /// Row-major strides (last axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let d = self.dim();
        let mut s = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].n;
        }
        s
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut idx = 0usize;
        for (k, &i) in multi.iter().enumerate() {
            debug_assert!(i < self.axes[k].n);
            idx = idx * self.axes[k].n + i;
        }
        idx
    }

    pub fn multi_index_into(&self, flat: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for k in (0..self.dim()).rev() {
            let n = self.axes[k].n;
            out[k] = rem % n;
            rem /= n;
        }
    }

    pub fn node_coords_into(&self, flat: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for k in (0..self.dim()).rev() {
            let ax = &self.axes[k];
            out[k] = ax.coord(rem % ax.n);
            rem /= ax.n;
        }
    }

    /// Bracketing nodes and interpolation weight along one axis.
    ///
    /// Returns `(i0, i1, w)` with the interpolated value being
    /// `(1-w)*v[i0] + w*v[i1]`. Periodic axes wrap; non-periodic queries
    /// outside the domain clamp to the boundary node.
    fn locate(&self, k: usize, x: f64) -> (usize, usize, f64) {
        let ax = &self.axes[k];
        let h = ax.spacing();
        if ax.periodic {
            let u = (ax.wrap(x) - ax.lo) / h;
            let mut i0 = u.floor() as usize;
            if i0 >= ax.n {
                i0 = ax.n - 1; // guard against wrap() rounding to exactly n
            }
            let i1 = (i0 + 1) % ax.n;
            (i0, i1, (u - i0 as f64).clamp(0.0, 1.0))
        } else {
            if x <= ax.lo {
                return (0, 0, 0.0);
            }
            if x >= ax.hi {
                return (ax.n - 1, ax.n - 1, 0.0);
            }
            let u = (x - ax.lo) / h;
            let i0 = (u.floor() as usize).min(ax.n - 2);
            (i0, i0 + 1, (u - i0 as f64).clamp(0.0, 1.0))
        }
    }
}

/// A scalar field sampled on a [`GridSpec`], optionally with uniformly spaced
/// time snapshots starting at t = 0. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GridField {
    spec: GridSpec,
    snapshots: Vec<Vec<f64>>,
    snapshot_dt: f64,
}

impl GridField {
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != spec.node_count() {
            return Err(GridError::LengthMismatch { expected: spec.node_count(), got: values.len() });
        }
        Ok(Self { spec, snapshots: vec![values], snapshot_dt: 0.0 })
    }

    pub fn from_snapshots(spec: GridSpec, snapshots: Vec<Vec<f64>>, snapshot_dt: f64) -> Result<Self, GridError> {
        if snapshots.is_empty() {
            return Err(GridError::Format("field needs at least one snapshot".into()));
        }
        for s in &snapshots {
            if s.len() != spec.node_count() {
                return Err(GridError::LengthMismatch { expected: spec.node_count(), got: s.len() });
            }
        }
        if snapshots.len() > 1 && !(snapshot_dt > 0.0) {
            return Err(GridError::Format("multi-snapshot field needs snapshot_dt > 0".into()));
        }
        Ok(Self { spec, snapshots, snapshot_dt })
    }

    /// Samples `f` at every grid node (in parallel).
    pub fn sample<F>(spec: GridSpec, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let n = spec.node_count();
        let d = spec.dim();
        let mut values = vec![0.0f64; n];
        values
            .par_chunks_mut(8192)
            .enumerate()
            .for_each(|(chunk_i, chunk)| {
                let mut coords = vec![0.0f64; d];
                let base = chunk_i * 8192;
                for (j, out) in chunk.iter_mut().enumerate() {
                    spec.node_coords_into(base + j, &mut coords);
                    *out = f(&coords);
                }
            });
        Self { spec, snapshots: vec![values], snapshot_dt: 0.0 }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// First (or only) snapshot.
    pub fn values(&self) -> &[f64] {
        &self.snapshots[0]
    }

    pub fn snapshot(&self, k: usize) -> &[f64] {
        &self.snapshots[k]
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshot_dt(&self) -> f64 {
        self.snapshot_dt
    }

    pub fn has_time_axis(&self) -> bool {
        self.snapshots.len() > 1
    }

    pub fn last_time(&self) -> f64 {
        (self.snapshots.len() - 1) as f64 * self.snapshot_dt
    }

    /// Multilinear interpolation over the 2^d enclosing nodes; linear in time
    /// between enclosing snapshots. Periodic axes wrap, non-periodic clamp.
    ///
    /// A `+inf` sentinel at any node with nonzero interpolation weight makes
    /// the result `+inf`.
    pub fn interpolate(&self, x: &[f64], t: Option<f64>) -> Result<f64, GridError> {
        if x.len() != self.spec.dim() {
            return Err(GridError::DimensionMismatch { expected: self.spec.dim(), got: x.len() });
        }
        if !self.has_time_axis() {
            return Ok(self.interpolate_snapshot(0, x));
        }
        let t = t.ok_or(GridError::TimeRequired)?;
        let max_t = self.last_time();
        // tolerate floating-point noise at the endpoints
        let eps = 1e-9 * (1.0 + max_t.abs());
        if t < -eps || t > max_t + eps {
            return Err(GridError::TimeOutOfRange { snapshots: self.snapshots.len(), max: max_t, got: t });
        }
        let tc = t.clamp(0.0, max_t);
        let u = tc / self.snapshot_dt;
        let k0 = (u.floor() as usize).min(self.snapshots.len() - 2);
        let w = (u - k0 as f64).clamp(0.0, 1.0);
        let v0 = self.interpolate_snapshot(k0, x);
        if w == 0.0 {
            return Ok(v0);
        }
        let v1 = self.interpolate_snapshot(k0 + 1, x);
        if v0.is_infinite() || v1.is_infinite() {
            return Ok(f64::INFINITY);
        }
        Ok((1.0 - w) * v0 + w * v1)
    }

    fn interpolate_snapshot(&self, snap: usize, x: &[f64]) -> f64 {
        interpolate_values(&self.spec, &self.snapshots[snap], x)
    }

    /// Node-wise gradient, one component field per axis.
    ///
    /// Central differences at interior nodes, one-sided at non-periodic
    /// boundaries, wrapped differences on periodic axes. `+inf` sentinels are
    /// excluded: a difference touching a sentinel falls back to the one-sided
    /// difference away from it, and nodes that are sentinels themselves (or
    /// are surrounded by sentinels along an axis) get a zero component.
    pub fn node_gradient(&self) -> Vec<GridField> {
        let d = self.spec.dim();
        (0..d)
            .map(|k| {
                let snaps: Vec<Vec<f64>> = self
                    .snapshots
                    .iter()
                    .map(|s| gradient_axis(&self.spec, s, k))
                    .collect();
                GridField { spec: self.spec.clone(), snapshots: snaps, snapshot_dt: self.snapshot_dt }
            })
            .collect()
    }

    /// One-sided backward/forward differences along `axis` for every node.
    ///
    /// Non-periodic boundaries use linear-extrapolation ghost values
    /// (`ghost = 2*edge - inner`), so the one-sided difference pointing out of
    /// the domain equals the one pointing in.
    pub fn upwind_derivatives(&self, axis: usize) -> Result<(GridField, GridField), GridError> {
        if axis >= self.spec.dim() {
            return Err(GridError::AxisOutOfRange(axis));
        }
        let mut lefts = Vec::with_capacity(self.snapshots.len());
        let mut rights = Vec::with_capacity(self.snapshots.len());
        for s in &self.snapshots {
            let n = s.len();
            let mut left = vec![0.0f64; n];
            let mut right = vec![0.0f64; n];
            upwind_axis_into(&self.spec, s, axis, &mut left, &mut right);
            lefts.push(left);
            rights.push(right);
        }
        let mk = |snaps| GridField { spec: self.spec.clone(), snapshots: snaps, snapshot_dt: self.snapshot_dt };
        Ok((mk(lefts), mk(rights)))
    }

    // ---- VFGRID1 binary format ------------------------------------------

    pub fn write_vfgrid<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(VFGRID_MAGIC)?;
        w.write_all(&(self.spec.dim() as u32).to_le_bytes())?;
        for ax in self.spec.axes() {
            w.write_all(&ax.lo.to_le_bytes())?;
            w.write_all(&ax.hi.to_le_bytes())?;
            w.write_all(&(ax.n as u32).to_le_bytes())?;
            w.write_all(&[ax.periodic as u8])?;
        }
        w.write_all(&(self.snapshots.len() as u32).to_le_bytes())?;
        w.write_all(&self.snapshot_dt.to_le_bytes())?;
        for snap in &self.snapshots {
            let mut buf = Vec::with_capacity(snap.len() * 8);
            for v in snap {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_vfgrid<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != VFGRID_MAGIC {
            return Err(GridError::Format("bad magic".into()));
        }
        let d = read_u32(&mut r)? as usize;
        if d == 0 || d > 16 {
            return Err(GridError::Format(format!("implausible dimension {d}")));
        }
        let mut axes = Vec::with_capacity(d);
        for _ in 0..d {
            let lo = read_f64(&mut r)?;
            let hi = read_f64(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let mut p = [0u8; 1];
            r.read_exact(&mut p)?;
            axes.push(AxisSpec { lo, hi, n, periodic: p[0] != 0 });
        }
        let spec = GridSpec::new(axes).map_err(|e| GridError::Format(e.to_string()))?;
        let s = read_u32(&mut r)? as usize;
        let dt = read_f64(&mut r)?;
        if s == 0 {
            return Err(GridError::Format("zero snapshots".into()));
        }
        let count = spec.node_count();
        let mut snapshots = Vec::with_capacity(s);
        let mut buf = vec![0u8; count * 8];
        for _ in 0..s {
            r.read_exact(&mut buf)?;
            let snap: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            snapshots.push(snap);
        }
        Self::from_snapshots(spec, snapshots, dt)
    }

    pub fn write_vfgrid_file<P: AsRef<Path>>(&self, path: P) -> io::Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_vfgrid(&mut w)?;
        w.flush()
    }

    pub fn read_vfgrid_file<P: AsRef<Path>>(path: P) -> Result<Self, GridError> {
        let f = File::open(path)?;
        Self::read_vfgrid(BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Multilinear interpolation of one flat snapshot at `x`.
///
/// Corners with zero weight are skipped so that a clamped query next to a
/// sentinel region is not poisoned by a node it does not actually use.
pub fn interpolate_values(spec: &GridSpec, values: &[f64], x: &[f64]) -> f64 {
    let d = spec.dim();
    debug_assert!(d <= 16);
    let mut i0 = [0usize; 16];
    let mut i1 = [0usize; 16];
    let mut w = [0.0f64; 16];
    for k in 0..d {
        let (a, b, wk) = spec.locate(k, x[k]);
        i0[k] = a;
        i1[k] = b;
        w[k] = wk;
    }
    let strides = spec.strides();
    let mut acc = 0.0f64;
    let corners = 1usize << d;
    for mask in 0..corners {
        let mut weight = 1.0f64;
        let mut idx = 0usize;
        for k in 0..d {
            if mask & (1 << k) != 0 {
                weight *= w[k];
                idx += i1[k] * strides[k];
            } else {
                weight *= 1.0 - w[k];
                idx += i0[k] * strides[k];
            }
            if weight == 0.0 {
                break;
            }
        }
        if weight == 0.0 {
            continue;
        }
        let v = values[idx];
        if v.is_infinite() {
            return v;
        }
        acc += weight * v;
    }
    acc
}

/// Gradient component along `axis` for one snapshot, with sentinel handling.
fn gradient_axis(spec: &GridSpec, values: &[f64], axis: usize) -> Vec<f64> {
    let ax = *spec.axis(axis);
    let h = ax.spacing();
    let strides = spec.strides();
    let stride = strides[axis];
    let n_axis = ax.n;
    let d = spec.dim();
    let mut out = vec![0.0f64; values.len()];
    out.par_chunks_mut(8192).enumerate().for_each(|(chunk_i, chunk)| {
        let base = chunk_i * 8192;
        let mut multi = vec![0usize; d];
        for (j, slot) in chunk.iter_mut().enumerate() {
            let flat = base + j;
            let vc = values[flat];
            if !vc.is_finite() {
                *slot = 0.0;
                continue;
            }
            spec.multi_index_into(flat, &mut multi);
            let i = multi[axis];
            let vm = if i > 0 {
                Some(values[flat - stride])
            } else if ax.periodic {
                Some(values[flat + (n_axis - 1) * stride])
            } else {
                None
            };
            let vp = if i + 1 < n_axis {
                Some(values[flat + stride])
            } else if ax.periodic {
                Some(values[flat - (n_axis - 1) * stride])
            } else {
                None
            };
            let m_ok = vm.map_or(false, f64::is_finite);
            let p_ok = vp.map_or(false, f64::is_finite);
            *slot = match (m_ok, p_ok) {
                (true, true) => (vp.unwrap() - vm.unwrap()) / (2.0 * h),
                (true, false) => (vc - vm.unwrap()) / h,
                (false, true) => (vp.unwrap() - vc) / h,
                (false, false) => 0.0,
            };
        }
    });
    out
}

/// Backward (`left`) and forward (`right`) one-sided differences along `axis`
/// for one snapshot. Boundary nodes on non-periodic axes use the ghost value
/// `2*edge - inner`.
pub fn upwind_axis_into(spec: &GridSpec, values: &[f64], axis: usize, left: &mut [f64], right: &mut [f64]) {
    let ax = *spec.axis(axis);
    let h = ax.spacing();
    let stride = spec.strides()[axis];
    let n_axis = ax.n;
    let d = spec.dim();
    left.par_chunks_mut(8192)
        .zip(right.par_chunks_mut(8192))
        .enumerate()
        .for_each(|(chunk_i, (lc, rc))| {
            let base = chunk_i * 8192;
            let mut multi = vec![0usize; d];
            for j in 0..lc.len() {
                let flat = base + j;
                spec.multi_index_into(flat, &mut multi);
                let i = multi[axis];
                let vc = values[flat];
                let vm = if i > 0 {
                    values[flat - stride]
                } else if ax.periodic {
                    values[flat + (n_axis - 1) * stride]
                } else {
                    2.0 * vc - values[flat + stride] // ghost
                };
                let vp = if i + 1 < n_axis {
                    values[flat + stride]
                } else if ax.periodic {
                    values[flat - (n_axis - 1) * stride]
                } else {
                    2.0 * vc - values[flat - stride] // ghost
                };
                lc[j] = (vc - vm) / h;
                rc[j] = (vp - vc) / h;
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid_2d() -> GridSpec {
        GridSpec::new(vec![AxisSpec::new(0.0, 1.0, 5), AxisSpec::new(0.0, 1.0, 5)]).unwrap()
    }

    #[test]
    fn affine_interpolation_is_exact() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |x| 3.0 * x[0] + 2.0 * x[1]);
        let v = f.interpolate(&[0.5, 0.5], None).unwrap();
        assert_relative_eq!(v, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn periodic_axis_wraps() {
        let spec = GridSpec::new(vec![AxisSpec::periodic(-PI, PI, 16)]).unwrap();
        let f = GridField::sample(spec, |x| x[0].sin());
        let a = f.interpolate(&[PI + 0.1], None).unwrap();
        let b = f.interpolate(&[-PI + 0.1], None).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn out_of_domain_queries_clamp() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |x| 3.0 * x[0] + 2.0 * x[1]);
        let v = f.interpolate(&[-1.0, 0.0], None).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        let v = f.interpolate(&[2.0, 1.0], None).unwrap();
        assert_relative_eq!(v, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |_| 0.0);
        assert!(matches!(
            f.interpolate(&[0.0], None),
            Err(GridError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn gradient_of_affine_field() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |x| 3.0 * x[0] + 2.0 * x[1]);
        let g = f.node_gradient();
        for v in g[0].values() {
            assert_relative_eq!(*v, 3.0, epsilon = 1e-10);
        }
        for v in g[1].values() {
            assert_relative_eq!(*v, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |_| 7.0);
        for comp in f.node_gradient() {
            assert!(comp.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn central_difference_1d() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 2.0, 3)]).unwrap();
        let f = GridField::from_values(spec, vec![0.0, 1.0, 4.0]).unwrap();
        let g = f.node_gradient();
        assert_relative_eq!(g[0].values()[1], 2.0, epsilon = 1e-12);
        // one-sided at boundaries
        assert_relative_eq!(g[0].values()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g[0].values()[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_skips_infinite_neighbors() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 3.0, 4)]).unwrap();
        let f = GridField::from_values(spec, vec![f64::INFINITY, 2.0, 3.0, f64::INFINITY]).unwrap();
        let g = f.node_gradient();
        let gv = g[0].values();
        assert_eq!(gv[0], 0.0); // sentinel node
        assert_relative_eq!(gv[1], 1.0, epsilon = 1e-12); // one-sided away from sentinel
        assert_relative_eq!(gv[2], 1.0, epsilon = 1e-12);
        assert_eq!(gv[3], 0.0);
    }

    #[test]
    fn upwind_linear_field() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 2.0, 5)]).unwrap();
        let f = GridField::sample(spec, |x| x[0]);
        let (l, r) = f.upwind_derivatives(0).unwrap();
        for v in l.values().iter().chain(r.values()) {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn upwind_step_field() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 3.0, 4)]).unwrap();
        let f = GridField::from_values(spec, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (l, r) = f.upwind_derivatives(0).unwrap();
        assert_relative_eq!(l.values()[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.values()[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn upwind_constant_field_is_zero() {
        let spec = grid_2d();
        let f = GridField::sample(spec, |_| 3.5);
        for axis in 0..2 {
            let (l, r) = f.upwind_derivatives(axis).unwrap();
            assert!(l.values().iter().all(|v| v.abs() < 1e-12));
            assert!(r.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn time_interpolation_is_linear() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 1.0, 3)]).unwrap();
        let snaps = vec![vec![0.0; 3], vec![2.0; 3], vec![4.0; 3]];
        let f = GridField::from_snapshots(spec, snaps, 1.0).unwrap();
        assert_relative_eq!(f.interpolate(&[0.5], Some(0.5)).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.interpolate(&[0.5], Some(1.75)).unwrap(), 3.5, epsilon = 1e-12);
        assert!(matches!(f.interpolate(&[0.5], Some(2.5)), Err(GridError::TimeOutOfRange { .. })));
        assert!(matches!(f.interpolate(&[0.5], None), Err(GridError::TimeRequired)));
    }

    #[test]
    fn infinity_poisons_interpolation_only_when_weighted() {
        let spec = GridSpec::new(vec![AxisSpec::new(0.0, 3.0, 4)]).unwrap();
        let f = GridField::from_values(spec, vec![1.0, 2.0, f64::INFINITY, f64::INFINITY]).unwrap();
        assert!(f.interpolate(&[1.5], None).unwrap().is_infinite());
        // query exactly on node 1: node 2 has zero weight
        assert_relative_eq!(f.interpolate(&[1.0], None).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn vfgrid_round_trip() {
        let spec = GridSpec::new(vec![
            AxisSpec::new(-1.0, 1.0, 4),
            AxisSpec::periodic(-PI, PI, 6),
        ])
        .unwrap();
        let mut vals = vec![0.25f64; spec.node_count()];
        vals[3] = f64::INFINITY;
        vals[5] = -7.125;
        let f = GridField::from_snapshots(spec, vec![vals.clone(), vals], 0.5).unwrap();
        let mut buf = Vec::new();
        f.write_vfgrid(&mut buf).unwrap();
        let g = GridField::read_vfgrid(&buf[..]).unwrap();
        assert_eq!(g.spec(), f.spec());
        assert_eq!(g.snapshot_count(), 2);
        assert_eq!(g.snapshot_dt(), 0.5);
        assert_eq!(g.values(), f.values());
        assert!(g.values()[3].is_infinite());
    }

    proptest! {
        #[test]
        fn prop_multilinear_reproduces_affine(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
            x in 0.0f64..2.0, y in -1.0f64..1.0,
        ) {
            let spec = GridSpec::new(vec![AxisSpec::new(0.0, 2.0, 7), AxisSpec::new(-1.0, 1.0, 5)]).unwrap();
            let f = GridField::sample(spec, |p| a * p[0] + b * p[1] + c);
            let got = f.interpolate(&[x, y], None).unwrap();
            let want = a * x + b * y + c;
            prop_assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
        }

        #[test]
        fn prop_node_queries_return_node_values(i in 0usize..7, j in 0usize..5) {
            let spec = GridSpec::new(vec![AxisSpec::new(0.0, 2.0, 7), AxisSpec::new(-1.0, 1.0, 5)]).unwrap();
            let f = GridField::sample(spec.clone(), |p| (p[0] * 13.7).sin() + p[1] * p[1]);
            let x = [spec.axis(0).coord(i), spec.axis(1).coord(j)];
            let got = f.interpolate(&x, None).unwrap();
            let want = f.values()[spec.flat_index(&[i, j])];
            prop_assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()));
        }

        #[test]
        fn prop_periodic_shift_invariance(theta in -10.0f64..10.0, shift in -3i32..3) {
            let spec = GridSpec::new(vec![AxisSpec::periodic(-PI, PI, 12)]).unwrap();
            let f = GridField::sample(spec, |p| p[0].cos() + 0.3 * (2.0 * p[0]).sin());
            let a = f.interpolate(&[theta], None).unwrap();
            let b = f.interpolate(&[theta + shift as f64 * 2.0 * PI], None).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
