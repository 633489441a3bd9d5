//! Filtered backprojection for the flat-panel (equidistant) fan-beam geometry.
//!
//! The detector is rescaled to a virtual detector through the isocenter. Each
//! view is cosine weighted, ramp filtered with the band-limited Ram-Lak kernel
//! and backprojected with linear interpolation and `1/U²` distance weighting.
//! Every step is linear, and [`FbpOperator::adjoint`] applies the exact
//! transpose of the whole chain.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageShape, ScanGeometry, Sinogram, SinogramDomain};

/// Band-limited ramp kernel sample `h(n)` for bin spacing `ds`.
pub fn ramp_kernel(n: isize, ds: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * ds * ds)
    } else if n % 2 == 0 {
        0.0
    } else {
        let nf = n as f64;
        -1.0 / (PI * PI * nf * nf * ds * ds)
    }
}

/// Linear (zero-padded) convolution of `row` with the ramp kernel, scaled by
/// `ds` so that it discretizes the continuous convolution integral.
pub fn ramp_filter_row(row: &[f64], ds: f64) -> Vec<f64> {
    let n = row.len() as isize;
    let taps: Vec<f64> = (-(n - 1)..n).map(|k| ds * ramp_kernel(k, ds)).collect();
    let mut out = vec![0.0; row.len()];
    convolve_taps(row, &taps, &mut out);
    out
}

/// `out[i] = sum_k row[k] * taps[i - k + n - 1]`.
fn convolve_taps(row: &[f64], taps: &[f64], out: &mut [f64]) {
    let n = row.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, r) in row.iter().enumerate() {
            acc += r * taps[i + n - 1 - k];
        }
        *o = acc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RampFilter {
    RamLak,
}

/// Per-view quantities needed by the pixel-driven backprojector.
#[derive(Debug, Clone, Copy)]
struct ViewTerms {
    to_source: [f64; 2],
    detector_axis: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct FbpOperator {
    geometry: ScanGeometry,
    shape: ImageShape,
    filter: RampFilter,
    /// `0.5 * ds * h(k)` for `k` in `-(n_bins-1)..n_bins`; the 0.5 accounts
    /// for every ray being measured twice over a full turn.
    filter_taps: Vec<f64>,
    cosine_weights: Vec<f64>,
    views: Vec<ViewTerms>,
    /// Bin spacing on the virtual detector through the isocenter.
    ds: f64,
    /// View-major interpolation stencils, built on first use.
    taps: Arc<OnceLock<Option<Vec<Tap>>>>,
}

impl FbpOperator {
    pub fn new(geometry: ScanGeometry, shape: ImageShape) -> Self {
        let mag = geometry.source_to_isocenter() / geometry.source_to_detector();
        let ds = geometry.detector_pixel_size() * mag;
        let d = geometry.source_to_isocenter();
        let nb = geometry.n_bins() as isize;
        let filter_taps = (-(nb - 1)..nb).map(|k| 0.5 * ds * ramp_kernel(k, ds)).collect();
        let cosine_weights = (0..geometry.n_bins())
            .map(|b| {
                let s = geometry.bin_offset(b) * mag;
                d / (d * d + s * s).sqrt()
            })
            .collect();
        let views = (0..geometry.n_views())
            .map(|v| {
                let f = geometry.view_frame(v);
                ViewTerms {
                    to_source: f.to_source,
                    detector_axis: f.detector_axis,
                }
            })
            .collect();
        Self {
            geometry,
            shape,
            filter: RampFilter::RamLak,
            filter_taps,
            cosine_weights,
            views,
            ds,
            taps: Arc::new(OnceLock::new()),
        }
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn image_shape(&self) -> ImageShape {
        self.shape
    }

    pub fn filter(&self) -> RampFilter {
        self.filter
    }

    pub fn reconstruct(&self, y: &Sinogram) -> Result<Image> {
        if y.domain() != SinogramDomain::PostLog {
            return Err(Error::InvalidParameter("FBP needs post-log line integrals".into()));
        }
        y.check_dims(self.geometry.n_views(), self.geometry.n_bins())?;
        Ok(Image::from_raw(self.shape, self.apply_slice(y.values())))
    }

    pub fn adjoint(&self, x: &Image) -> Result<Sinogram> {
        x.check_shape(&self.shape)?;
        Ok(self.adjoint_slice(x.values()))
    }

    pub(crate) fn apply_slice(&self, y: &[f64]) -> Vec<f64> {
        let nb = self.geometry.n_bins();
        let mut filtered = vec![0.0; y.len()];
        filtered
            .par_chunks_mut(nb)
            .zip(y.par_chunks(nb))
            .for_each(|(out, row)| {
                let weighted: Vec<f64> = row.iter().zip(&self.cosine_weights).map(|(a, w)| a * w).collect();
                convolve_taps(&weighted, &self.filter_taps, out);
            });
        self.backproject(&filtered)
    }

    pub(crate) fn adjoint_slice(&self, x: &[f64]) -> Sinogram {
        let nb = self.geometry.n_bins();
        let nv = self.geometry.n_views();
        let mut out = vec![0.0; nv * nb];
        out.par_chunks_mut(nb).enumerate().for_each(|(v, row)| {
            let mut q = vec![0.0; nb];
            self.scatter_view(v, x, &mut q);
            // the ramp matrix is symmetric
            convolve_taps(&q, &self.filter_taps, row);
            for (r, w) in row.iter_mut().zip(&self.cosine_weights) {
                *r *= w;
            }
        });
        Sinogram::from_raw(nv, nb, SinogramDomain::PostLog, out)
    }

    /// Position on the virtual detector (in bins) and backprojection weight of
    /// pixel center `p` at view `v`; `None` when the source is at the pixel.
    #[inline]
    fn project_point(&self, v: usize, p: (f64, f64)) -> Option<(f64, f64)> {
        let t = &self.views[v];
        let d = self.geometry.source_to_isocenter();
        let along = d - (p.0 * t.to_source[0] + p.1 * t.to_source[1]);
        if along <= 0.0 {
            return None;
        }
        let lateral = p.0 * t.detector_axis[0] + p.1 * t.detector_axis[1];
        let s = d * lateral / along;
        let u = along / d;
        let pos = s / self.ds + (self.geometry.n_bins() as f64 - 1.0) / 2.0;
        Some((pos, self.geometry.angular_step() / (u * u)))
    }

    fn tap(&self, v: usize, row: usize, col: usize) -> Tap {
        match self.project_point(v, self.shape.pixel_center(row, col)) {
            Some((pos, weight)) => {
                let i0 = pos.floor();
                Tap {
                    bin: i0 as isize,
                    frac: pos - i0,
                    weight,
                }
            }
            None => Tap::SKIP,
        }
    }

    fn table(&self) -> Option<&[Tap]> {
        self.taps
            .get_or_init(|| {
                let npix = self.shape.len();
                let total = npix * self.views.len();
                if total > MAX_CACHED_TAPS {
                    return None;
                }
                let w = self.shape.width;
                let mut taps = vec![Tap::SKIP; total];
                taps.par_chunks_mut(npix).enumerate().for_each(|(v, view)| {
                    for (j, t) in view.iter_mut().enumerate() {
                        *t = self.tap(v, j / w, j % w);
                    }
                });
                Some(taps)
            })
            .as_deref()
    }

    fn backproject(&self, q: &[f64]) -> Vec<f64> {
        let nb = self.geometry.n_bins();
        let w = self.shape.width;
        let npix = self.shape.len();
        let table = self.table();
        let mut out = vec![0.0; npix];
        out.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
            for v in 0..self.views.len() {
                let qv = &q[v * nb..(v + 1) * nb];
                for (col, px) in line.iter_mut().enumerate() {
                    let t = match table {
                        Some(t) => t[v * npix + row * w + col],
                        None => self.tap(v, row, col),
                    };
                    if let Some(val) = t.gather(qv) {
                        *px += t.weight * val;
                    }
                }
            }
        });
        out
    }

    /// Transpose of [`Self::backproject`] restricted to view `v`.
    fn scatter_view(&self, v: usize, x: &[f64], q: &mut [f64]) {
        let w = self.shape.width;
        let npix = self.shape.len();
        let table = self.table();
        for (j, &val) in x.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let t = match table {
                Some(t) => t[v * npix + j],
                None => self.tap(v, j / w, j % w),
            };
            t.scatter(val, q);
        }
    }
}

/// Tables above this many pixel-view entries are not cached.
const MAX_CACHED_TAPS: usize = 1 << 24;

/// Linear-interpolation stencil of one pixel in one view.
#[derive(Debug, Clone, Copy)]
struct Tap {
    bin: isize,
    frac: f64,
    weight: f64,
}

impl Tap {
    const SKIP: Tap = Tap {
        bin: isize::MIN,
        frac: 0.0,
        weight: 0.0,
    };

    #[inline]
    fn gather(&self, q: &[f64]) -> Option<f64> {
        if self.bin == isize::MIN {
            return None;
        }
        let nb = q.len() as isize;
        let mut val = 0.0;
        if self.bin >= 0 && self.bin < nb {
            val += (1.0 - self.frac) * q[self.bin as usize];
        }
        if self.bin + 1 >= 0 && self.bin + 1 < nb {
            val += self.frac * q[(self.bin + 1) as usize];
        }
        Some(val)
    }

    #[inline]
    fn scatter(&self, val: f64, q: &mut [f64]) {
        if self.bin == isize::MIN {
            return;
        }
        let nb = q.len() as isize;
        if self.bin >= 0 && self.bin < nb {
            q[self.bin as usize] += self.weight * (1.0 - self.frac) * val;
        }
        if self.bin + 1 >= 0 && self.bin + 1 < nb {
            q[(self.bin + 1) as usize] += self.weight * self.frac * val;
        }
    }
}
