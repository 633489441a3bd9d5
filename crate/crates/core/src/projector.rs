//! Matrix-free fan-beam system operator `A` and its exact adjoint.
//!
//! Each detector bin contributes one ray from the source to the bin center.
//! `a_ij` is the exact length (cm) of ray `i` inside pixel `j`, computed by
//! Siddon's parametric traversal. Forward and back projection share the same
//! traversal, so the pair is adjoint up to rounding.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{Image, ImageShape, ScanGeometry, Sinogram, SinogramDomain};
use crate::linalg;

/// Views per accumulation chunk in the adjoint. Partial images are summed in
/// chunk order, so the result does not depend on the thread count.
const ADJOINT_CHUNK: usize = 8;

/// Largest number of nonzeros kept in the cached sparse matrix (about 400 MB).
/// Bigger problems trace rays on the fly.
const MAX_CACHED_ENTRIES: usize = 1 << 25;

/// Row-compressed `A` in Siddon visiting order, so cached and traced
/// products round identically.
struct SystemMatrix {
    row_start: Vec<usize>,
    cols: Vec<u32>,
    lengths: Vec<f64>,
}

impl SystemMatrix {
    #[inline]
    fn row(&self, ray: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_start[ray], self.row_start[ray + 1]);
        (&self.cols[a..b], &self.lengths[a..b])
    }
}

impl fmt::Debug for SystemMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SystemMatrix({} nonzeros)", self.cols.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayTracing {
    Siddon,
}

#[derive(Debug, Clone)]
pub struct Projector {
    geometry: ScanGeometry,
    shape: ImageShape,
    method: RayTracing,
    sources: Vec<[f64; 2]>,
    matrix: Arc<OnceLock<Option<SystemMatrix>>>,
}

impl Projector {
    pub fn new(geometry: ScanGeometry, shape: ImageShape) -> Self {
        let sources = (0..geometry.n_views()).map(|v| geometry.source_position(v)).collect();
        Self {
            geometry,
            shape,
            method: RayTracing::Siddon,
            sources,
            matrix: Arc::new(OnceLock::new()),
        }
    }

    fn matrix(&self) -> Option<&SystemMatrix> {
        self.matrix.get_or_init(|| self.build_matrix()).as_ref()
    }

    fn build_matrix(&self) -> Option<SystemMatrix> {
        if self.shape.len() > u32::MAX as usize {
            return None;
        }
        let n_bins = self.geometry.n_bins();
        let views: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = (0..self.geometry.n_views())
            .into_par_iter()
            .map(|view| {
                let mut counts = Vec::with_capacity(n_bins);
                let mut cols = Vec::new();
                let mut lengths = Vec::new();
                for bin in 0..n_bins {
                    let before = cols.len();
                    self.trace_ray(view, bin, |j, len| {
                        cols.push(j as u32);
                        lengths.push(len);
                    });
                    counts.push(cols.len() - before);
                }
                (counts, cols, lengths)
            })
            .collect();
        let total: usize = views.iter().map(|v| v.1.len()).sum();
        if total > MAX_CACHED_ENTRIES {
            return None;
        }
        let mut row_start = Vec::with_capacity(self.n_rays() + 1);
        let mut cols = Vec::with_capacity(total);
        let mut lengths = Vec::with_capacity(total);
        row_start.push(0);
        for (counts, c, l) in views {
            for n in counts {
                row_start.push(row_start.last().unwrap() + n);
            }
            cols.extend(c);
            lengths.extend(l);
        }
        Some(SystemMatrix {
            row_start,
            cols,
            lengths,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn image_shape(&self) -> ImageShape {
        self.shape
    }

    pub fn method(&self) -> RayTracing {
        self.method
    }

    pub fn n_rays(&self) -> usize {
        self.geometry.n_views() * self.geometry.n_bins()
    }

    /// Visits every (pixel index, intersection length) pair of one ray.
    pub fn trace_ray(&self, view: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let src = self.sources[view];
        let det = self.geometry.bin_position(view, bin);
        siddon(&self.shape, src, det, &mut visit);
    }

    pub fn forward(&self, x: &Image) -> Result<Sinogram> {
        x.check_shape(&self.shape)?;
        Ok(self.forward_slice(x.values()))
    }

    pub(crate) fn forward_slice(&self, x: &[f64]) -> Sinogram {
        let n_bins = self.geometry.n_bins();
        let mut out = vec![0.0; self.n_rays()];
        let matrix = self.matrix();
        out.par_chunks_mut(n_bins).enumerate().for_each(|(view, row)| {
            for (bin, cell) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                match matrix {
                    Some(m) => {
                        let (cols, lengths) = m.row(view * n_bins + bin);
                        for (&j, &len) in cols.iter().zip(lengths) {
                            acc += len * x[j as usize];
                        }
                    }
                    None => self.trace_ray(view, bin, |j, len| acc += len * x[j]),
                }
                *cell = acc;
            }
        });
        Sinogram::from_raw(self.geometry.n_views(), n_bins, SinogramDomain::PostLog, out)
    }

    pub fn back(&self, y: &Sinogram) -> Result<Image> {
        y.check_dims(self.geometry.n_views(), self.geometry.n_bins())?;
        Ok(Image::from_raw(self.shape, self.back_slice(y.values())))
    }

    pub(crate) fn back_slice(&self, y: &[f64]) -> Vec<f64> {
        let n_views = self.geometry.n_views();
        let n_bins = self.geometry.n_bins();
        let n_pix = self.shape.len();
        let n_chunks = n_views.div_ceil(ADJOINT_CHUNK);
        let matrix = self.matrix();
        let partials: Vec<Vec<f64>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; n_pix];
                let end = ((c + 1) * ADJOINT_CHUNK).min(n_views);
                for view in c * ADJOINT_CHUNK..end {
                    for bin in 0..n_bins {
                        let w = y[view * n_bins + bin];
                        if w == 0.0 {
                            continue;
                        }
                        match matrix {
                            Some(m) => {
                                let (cols, lengths) = m.row(view * n_bins + bin);
                                for (&j, &len) in cols.iter().zip(lengths) {
                                    acc[j as usize] += len * w;
                                }
                            }
                            None => self.trace_ray(view, bin, |j, len| acc[j] += len * w),
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; n_pix];
        for p in &partials {
            linalg::axpy(1.0, p, &mut out);
        }
        out
    }

    /// Power-iteration estimate of the largest eigenvalue of `AᵀA`.
    pub fn norm_squared_estimate(&self, iterations: usize) -> f64 {
        let n = self.shape.len();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let ay = self.forward_slice(&v);
            let w = self.back_slice(ay.values());
            lambda = linalg::dot(&v, &w);
            let norm = linalg::norm(&w);
            if norm == 0.0 {
                return 0.0;
            }
            v = w.iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

/// Siddon traversal of the segment `src -> det` through the pixel grid.
fn siddon(shape: &ImageShape, src: [f64; 2], det: [f64; 2], visit: &mut impl FnMut(usize, f64)) {
    let (hx, hy) = shape.half_extent();
    let ps = shape.pixel_size;
    let d = [det[0] - src[0], det[1] - src[1]];
    let ray_len = (d[0] * d[0] + d[1] * d[1]).sqrt();

    // Clip the parameter range to the image box.
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (axis, half) in [(0usize, hx), (1usize, hy)] {
        if d[axis] == 0.0 {
            if src[axis] <= -half || src[axis] >= half {
                return;
            }
        } else {
            let ta = (-half - src[axis]) / d[axis];
            let tb = (half - src[axis]) / d[axis];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t1 <= t0 {
        return;
    }

    // Plane crossings strictly inside (t0, t1), in increasing t.
    let crossings = |axis: usize, n_planes: usize, origin: f64| {
        let da = d[axis];
        let sa = src[axis];
        let mut ts: Vec<f64> = Vec::new();
        if da != 0.0 {
            ts.reserve(n_planes + 1);
            for k in 0..=n_planes {
                let plane = origin + k as f64 * ps;
                let t = (plane - sa) / da;
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
            if da < 0.0 {
                ts.reverse();
            }
        }
        ts
    };
    let tx = crossings(0, shape.width, -hx);
    let ty = crossings(1, shape.height, -hy);

    let mut prev = t0;
    let (mut i, mut j) = (0, 0);
    let mut emit = |a: f64, b: f64| {
        if b <= a {
            return;
        }
        let tm = 0.5 * (a + b);
        let xm = src[0] + tm * d[0];
        let ym = src[1] + tm * d[1];
        let col = (((xm + hx) / ps).floor() as isize).clamp(0, shape.width as isize - 1) as usize;
        let row = (((hy - ym) / ps).floor() as isize).clamp(0, shape.height as isize - 1) as usize;
        visit(row * shape.width + col, (b - a) * ray_len);
    };
    while i < tx.len() || j < ty.len() {
        let next = if j >= ty.len() || (i < tx.len() && tx[i] <= ty[j]) {
            i += 1;
            tx[i - 1]
        } else {
            j += 1;
            ty[j - 1]
        };
        emit(prev, next);
        prev = next;
    }
    emit(prev, t1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_geometry() -> ScanGeometry {
        ScanGeometry::new(10.0, 20.0, 0.2, 32, 12, std::f64::consts::TAU, 1.6).unwrap()
    }

    #[test]
    fn cached_matrix_matches_tracing_bit_exactly() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let cached = Projector::new(small_geometry(), shape);
        let mut traced = cached.clone();
        traced.matrix = Arc::new(OnceLock::from(None));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..cached.n_rays()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(cached.forward_slice(&x), traced.forward_slice(&x));
        assert_eq!(cached.back_slice(&y), traced.back_slice(&y));
        assert!(cached.matrix().is_some() && traced.matrix().is_none());
    }

    /// Independent oracle: Liang–Barsky clipping of the full ray against one pixel box.
    fn clip_length(src: [f64; 2], det: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
        let d = [det[0] - src[0], det[1] - src[1]];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..2 {
            if d[a].abs() < 1e-300 {
                if src[a] < lo[a] || src[a] > hi[a] {
                    return 0.0;
                }
            } else {
                let ta = (lo[a] - src[a]) / d[a];
                let tb = (hi[a] - src[a]) / d[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t1 > t0 {
            (t1 - t0) * (d[0] * d[0] + d[1] * d[1]).sqrt()
        } else {
            0.0
        }
    }

    fn pixel_box(shape: &ImageShape, j: usize) -> ([f64; 2], [f64; 2]) {
        let (row, col) = (j / shape.width, j % shape.width);
        let (cx, cy) = shape.pixel_center(row, col);
        let h = shape.pixel_size / 2.0;
        ([cx - h, cy - h], [cx + h, cy + h])
    }

    #[test]
    fn zero_image_gives_zero_sinogram() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let p = Projector::new(small_geometry(), shape);
        let y = p.forward(&Image::zeros(shape)).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
        assert_eq!(y.domain(), SinogramDomain::PostLog);
        let x = p.back(&Sinogram::zeros(12, 32, SinogramDomain::PostLog)).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_matches_clipping_oracle() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let g = small_geometry();
        let p = Projector::new(g, shape);
        for j in [0, 9, 27, 36, 63] {
            let mut vals = vec![0.0; 64];
            vals[j] = 1.0;
            let y = p.forward(&Image::from_values(shape, vals).unwrap()).unwrap();
            let (lo, hi) = pixel_box(&shape, j);
            for v in 0..g.n_views() {
                for b in 0..g.n_bins() {
                    let want = clip_length(g.source_position(v), g.bin_position(v, b), lo, hi);
                    assert!((y.get(v, b) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_ray_backprojection_support_matches_oracle() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let g = small_geometry();
        let p = Projector::new(g, shape);
        let (v, b) = (5, 13);
        let mut values = vec![0.0; g.n_views() * g.n_bins()];
        values[v * g.n_bins() + b] = 1.0;
        let y = Sinogram::from_values(g.n_views(), g.n_bins(), SinogramDomain::PostLog, values).unwrap();
        let x = p.back(&y).unwrap();
        for j in 0..64 {
            let (lo, hi) = pixel_box(&shape, j);
            let want = clip_length(g.source_position(v), g.bin_position(v, b), lo, hi);
            assert!((x.values()[j] - want).abs() < 1e-12);
            assert_eq!(x.values()[j] > 1e-12, want > 1e-12);
        }
    }

    #[test]
    fn central_ray_through_disk_is_chord() {
        let g = ScanGeometry::preset("desk_small").unwrap();
        let shape = ImageShape::new(64, 64, 0.1).unwrap();
        let (r, mu) = (2.0, 0.2);
        let vals = (0..shape.len())
            .map(|j| {
                let (x, y) = shape.pixel_center(j / 64, j % 64);
                if x * x + y * y <= r * r {
                    mu
                } else {
                    0.0
                }
            })
            .collect();
        let p = Projector::new(g, shape);
        let s = p.forward(&Image::from_values(shape, vals).unwrap()).unwrap();
        // 128 bins: the two middle bins straddle the central ray.
        for v in [0, 45, 90, 133] {
            let mid = 0.5 * (s.get(v, 63) + s.get(v, 64));
            assert!((mid - 2.0 * r * mu).abs() / (2.0 * r * mu) < 0.01, "{mid}");
        }
    }

    #[test]
    fn adjoint_dot_product() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let p = Projector::new(small_geometry(), shape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..p.n_rays()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ax = p.forward_slice(&x);
            let aty = p.back_slice(&y);
            let lhs = linalg::dot(ax.values(), &y);
            let rhs = linalg::dot(&x, &aty);
            assert!((lhs - rhs).abs() / (lhs.abs() + 1e-30) < 1e-12);
        }
    }

    #[test]
    fn norm_estimate_bounds_rayleigh_quotients() {
        let shape = ImageShape::new(8, 8, 0.2).unwrap();
        let p = Projector::new(small_geometry(), shape);
        let l = p.norm_squared_estimate(50);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = p.forward_slice(&x);
        let q = linalg::dot(ax.values(), ax.values()) / linalg::dot(&x, &x);
        assert!(l > 0.0 && q <= l * (1.0 + 1e-9));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Projector::new(small_geometry(), ImageShape::new(8, 8, 0.2).unwrap());
        assert!(p.forward(&Image::new(4, 8, 0.2, 0.0).unwrap()).is_err());
        assert!(p.back(&Sinogram::zeros(11, 32, SinogramDomain::PostLog)).is_err());
    }
}
