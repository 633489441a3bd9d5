//! Synthetic phantoms: Shepp-Logan and randomized ellipse ensembles.
//!
//! Ellipses are given in normalized coordinates on `[-1, 1]²`, which maps
//! onto the image field of view. Rasterization uses pixel-center inclusion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageShape};

/// Field of view (cm) of the desk-scale presets.
pub const DESK_FOV: f64 = 6.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Additive attenuation (1/cm).
    pub intensity: f64,
    /// Semi-axes in normalized units.
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }

    /// Area in normalized units.
    pub fn area(&self) -> f64 {
        PI * self.semi_x * self.semi_y
    }
}

/// Sums the ellipses at every pixel center, clamping the result at zero.
pub fn rasterize(shape: ImageShape, ellipses: &[Ellipse]) -> Image {
    let (hx, hy) = shape.half_extent();
    let half = hx.max(hy);
    let mut values = vec![0.0; shape.len()];
    for (j, v) in values.iter_mut().enumerate() {
        let (x, y) = shape.pixel_center(j / shape.width, j % shape.width);
        let (xn, yn) = (x / half, y / half);
        let sum: f64 = ellipses
            .iter()
            .filter(|e| e.contains(xn, yn))
            .map(|e| e.intensity)
            .sum();
        *v = sum.max(0.0);
    }
    Image::from_raw(shape, values)
}

/// The ten ellipses of the original Shepp-Logan head phantom.
pub fn shepp_logan_ellipses() -> [Ellipse; 10] {
    let deg = PI / 180.0;
    let e = |intensity, semi_x, semi_y, center_x, center_y, rot: f64| Ellipse {
        intensity,
        semi_x,
        semi_y,
        center_x,
        center_y,
        rotation: rot * deg,
    };
    [
        e(2.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        e(-0.98, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        e(-0.02, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        e(-0.02, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        e(0.01, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        e(0.01, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        e(0.01, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        e(0.01, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        e(0.01, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        e(0.01, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ]
}

/// Shepp-Logan phantom on a `width x width` grid spanning [`DESK_FOV`].
pub fn shepp_logan(width: usize) -> Result<Image> {
    shepp_logan_with_fov(width, DESK_FOV)
}

pub fn shepp_logan_with_fov(width: usize, fov: f64) -> Result<Image> {
    if width < 16 {
        return Err(Error::InvalidParameter(format!(
            "Shepp-Logan needs width >= 16, got {width}"
        )));
    }
    let shape = ImageShape::new(width, width, fov / width as f64)?;
    Ok(rasterize(shape, &shepp_logan_ellipses()))
}

/// Pixels inside the brain ellipse shrunk by `scale`, which keeps the
/// skull edge out of accuracy comparisons.
pub fn shepp_logan_interior_mask(shape: ImageShape, scale: f64) -> Vec<bool> {
    let brain = shepp_logan_ellipses()[1];
    let shrunk = Ellipse {
        semi_x: brain.semi_x * scale,
        semi_y: brain.semi_y * scale,
        ..brain
    };
    let (hx, hy) = shape.half_extent();
    let half = hx.max(hy);
    (0..shape.len())
        .map(|j| {
            let (x, y) = shape.pixel_center(j / shape.width, j % shape.width);
            shrunk.contains(x / half, y / half)
        })
        .collect()
}

/// Distribution of random ellipse phantoms: one body ellipse plus a random
/// number of interior features with signed intensity offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsePhantomSpec {
    pub width: usize,
    pub fov: f64,
    /// Inclusive range of interior ellipse counts.
    pub n_ellipses: (usize, usize),
    pub body_intensity: (f64, f64),
    /// Body semi-axes, normalized.
    pub body_axes: (f64, f64),
    /// Interior offsets (1/cm); results are clamped to be nonnegative.
    pub intensity: (f64, f64),
    pub axes: (f64, f64),
    /// Interior centers are drawn inside this fraction of the body.
    pub center_spread: f64,
    pub rotation: (f64, f64),
    pub seed: u64,
}

impl Default for EllipsePhantomSpec {
    fn default() -> Self {
        Self {
            width: 64,
            fov: DESK_FOV,
            n_ellipses: (3, 8),
            body_intensity: (0.18, 0.22),
            body_axes: (0.6, 0.9),
            intensity: (-0.06, 0.12),
            axes: (0.05, 0.3),
            center_spread: 0.6,
            rotation: (0.0, PI),
            seed: 0,
        }
    }
}

impl EllipsePhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: (f64, f64)| {
            if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} range {r:?} is not ordered")))
            }
        };
        ordered("body_intensity", self.body_intensity)?;
        ordered("body_axes", self.body_axes)?;
        ordered("intensity", self.intensity)?;
        ordered("axes", self.axes)?;
        ordered("rotation", self.rotation)?;
        if self.n_ellipses.0 > self.n_ellipses.1 {
            return Err(Error::InvalidParameter("n_ellipses range is not ordered".into()));
        }
        if self.body_intensity.0 < 0.0 {
            return Err(Error::InvalidParameter("body intensity must be >= 0".into()));
        }
        if self.body_axes.0 <= 0.0 || self.axes.0 <= 0.0 {
            return Err(Error::InvalidParameter("semi-axes must be positive".into()));
        }
        ImageShape::new(self.width, self.width, self.fov / self.width as f64)?;
        Ok(())
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            width: self.width,
            height: self.width,
            pixel_size: self.fov / self.width as f64,
        }
    }

    /// Ellipses of phantom `index`. The generator is ChaCha8 keyed by the
    /// spec seed with `index` as the stream id.
    pub fn ellipses(&self, index: u64) -> Vec<Ellipse> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let mut draw = |r: (f64, f64)| {
            if r.0 == r.1 {
                r.0
            } else {
                rng.gen_range(r.0..r.1)
            }
        };
        let body = Ellipse {
            intensity: draw(self.body_intensity),
            semi_x: draw(self.body_axes),
            semi_y: draw(self.body_axes),
            center_x: 0.0,
            center_y: 0.0,
            rotation: draw(self.rotation),
        };
        let mut out = vec![body];
        let n = if self.n_ellipses.0 == self.n_ellipses.1 {
            self.n_ellipses.0
        } else {
            rng.gen_range(self.n_ellipses.0..=self.n_ellipses.1)
        };
        let (bs, bc) = body.rotation.sin_cos();
        for _ in 0..n {
            // uniform point in the shrunken body ellipse
            let r = self.center_spread * rng.gen::<f64>().sqrt();
            let phi = rng.gen_range(0.0..2.0 * PI);
            let (u, v) = (r * body.semi_x * phi.cos(), r * body.semi_y * phi.sin());
            let mut draw = |r: (f64, f64)| {
                if r.0 == r.1 {
                    r.0
                } else {
                    rng.gen_range(r.0..r.1)
                }
            };
            out.push(Ellipse {
                intensity: draw(self.intensity),
                semi_x: draw(self.axes),
                semi_y: draw(self.axes),
                center_x: u * bc - v * bs,
                center_y: u * bs + v * bc,
                rotation: draw(self.rotation),
            });
        }
        out
    }

    pub fn generate(&self, index: u64) -> Image {
        rasterize(self.shape(), &self.ellipses(index))
    }
}
