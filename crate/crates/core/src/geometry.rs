//! Images, sinograms and the fan-beam flat-panel acquisition geometry.
//!
//! World coordinates are in cm with the image centered on the isocenter.
//! Pixel (0, 0) is the top-left pixel; rows run downwards (-y) and columns
//! to the right (+x). View `i` sits at angle `i * angular_span / n_views`,
//! with the source starting on the +y axis and rotating counter-clockwise.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel grid description shared by images and operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    /// Pixel edge length in cm.
    pub pixel_size: f64,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World coordinates (cm) of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.pixel_size;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) * self.pixel_size;
        (x, y)
    }

    /// Half extents of the image box in cm.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.pixel_size / 2.0,
            self.height as f64 * self.pixel_size / 2.0,
        )
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{} @ {} cm", self.width, self.height, self.pixel_size)
    }
}

/// 2-D attenuation map (1/cm), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixel_size: f64, fill: f64) -> Result<Self> {
        let shape = ImageShape::new(width, height, pixel_size)?;
        if !fill.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "fill value must be finite, got {fill}"
            )));
        }
        Ok(Self {
            values: vec![fill; shape.len()],
            shape,
        })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn from_values(shape: ImageShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                values.len(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Self { shape, values })
    }

    /// Skips the finiteness scan; callers guarantee the length.
    pub(crate) fn from_raw(shape: ImageShape, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.shape.pixel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape.width + col]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_shape(&self, expected: &ImageShape) -> Result<()> {
        if self.shape.width != expected.width || self.shape.height != expected.height {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinogramDomain {
    /// Line integrals after log transform.
    PostLog,
    /// Detected photon counts before the log transform.
    PreLogCounts,
}

impl SinogramDomain {
    pub fn as_str(&self) -> &'static str {
        match self {
            SinogramDomain::PostLog => "post_log",
            SinogramDomain::PreLogCounts => "pre_log_counts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "post_log" => Some(SinogramDomain::PostLog),
            "pre_log_counts" => Some(SinogramDomain::PreLogCounts),
            _ => None,
        }
    }
}

/// Projection data indexed by (view, bin), view-major.
///
/// Pre-log counts may be negative: electronic noise is additive Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_views: usize,
    n_bins: usize,
    domain: SinogramDomain,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_views: usize, n_bins: usize, domain: SinogramDomain) -> Self {
        Self {
            n_views,
            n_bins,
            domain,
            values: vec![0.0; n_views * n_bins],
        }
    }

    pub fn from_values(n_views: usize, n_bins: usize, domain: SinogramDomain, values: Vec<f64>) -> Result<Self> {
        if n_views == 0 || n_bins == 0 {
            return Err(Error::InvalidParameter(format!(
                "sinogram dimensions must be >= 1, got {n_views}x{n_bins}"
            )));
        }
        if values.len() != n_views * n_bins {
            return Err(Error::shape(
                format!("{} values for {n_views}x{n_bins}", n_views * n_bins),
                values.len(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sinogram value {v}")));
        }
        Ok(Self {
            n_views,
            n_bins,
            domain,
            values,
        })
    }

    pub(crate) fn from_raw(n_views: usize, n_bins: usize, domain: SinogramDomain, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n_views * n_bins);
        Self {
            n_views,
            n_bins,
            domain,
            values,
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn domain(&self) -> SinogramDomain {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn view(&self, view: usize) -> &[f64] {
        &self.values[view * self.n_bins..(view + 1) * self.n_bins]
    }

    pub fn get(&self, view: usize, bin: usize) -> f64 {
        self.values[view * self.n_bins + bin]
    }

    pub(crate) fn check_dims(&self, n_views: usize, n_bins: usize) -> Result<()> {
        if self.n_views != n_views || self.n_bins != n_bins {
            return Err(Error::shape(
                format!("{n_views}x{n_bins} sinogram"),
                format!("{}x{}", self.n_views, self.n_bins),
            ));
        }
        Ok(())
    }
}

/// Fan-beam acquisition with a flat, equidistant detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryFields", into = "GeometryFields")]
pub struct ScanGeometry {
    source_to_isocenter: f64,
    source_to_detector: f64,
    detector_pixel_size: f64,
    n_bins: usize,
    n_views: usize,
    angular_span: f64,
    image_fov: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFields {
    source_to_isocenter: f64,
    source_to_detector: f64,
    detector_pixel_size: f64,
    n_bins: usize,
    n_views: usize,
    angular_span: f64,
    image_fov: f64,
}

impl TryFrom<GeometryFields> for ScanGeometry {
    type Error = Error;

    fn try_from(f: GeometryFields) -> Result<Self> {
        ScanGeometry::new(
            f.source_to_isocenter,
            f.source_to_detector,
            f.detector_pixel_size,
            f.n_bins,
            f.n_views,
            f.angular_span,
            f.image_fov,
        )
    }
}

impl From<ScanGeometry> for GeometryFields {
    fn from(g: ScanGeometry) -> Self {
        GeometryFields {
            source_to_isocenter: g.source_to_isocenter,
            source_to_detector: g.source_to_detector,
            detector_pixel_size: g.detector_pixel_size,
            n_bins: g.n_bins,
            n_views: g.n_views,
            angular_span: g.angular_span,
            image_fov: g.image_fov,
        }
    }
}

impl ScanGeometry {
    pub fn new(
        source_to_isocenter: f64,
        source_to_detector: f64,
        detector_pixel_size: f64,
        n_bins: usize,
        n_views: usize,
        angular_span: f64,
        image_fov: f64,
    ) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("source_to_isocenter", source_to_isocenter)?;
        positive("detector_pixel_size", detector_pixel_size)?;
        positive("angular_span", angular_span)?;
        positive("image_fov", image_fov)?;
        if !(source_to_detector.is_finite() && source_to_detector > source_to_isocenter) {
            return Err(Error::InvalidParameter(format!(
                "source_to_detector ({source_to_detector}) must exceed source_to_isocenter ({source_to_isocenter})"
            )));
        }
        if n_bins == 0 || n_views == 0 {
            return Err(Error::InvalidParameter(format!(
                "n_bins and n_views must be >= 1, got {n_bins} and {n_views}"
            )));
        }
        let g = Self {
            source_to_isocenter,
            source_to_detector,
            detector_pixel_size,
            n_bins,
            n_views,
            angular_span,
            image_fov,
        };
        if !g.covers_fov() {
            return Err(Error::InvalidParameter(format!(
                "detector half-fan {:.6} rad does not cover the {} cm FOV (needs {:.6} rad)",
                g.half_fan_angle(),
                image_fov,
                g.required_half_fan_angle()
            )));
        }
        Ok(g)
    }

    /// Named presets: `paper_full` (600 views, 512 bins of 0.0388 cm,
    /// SDD 100 cm, SID 50 cm) and `desk_small` (180 views, 128 bins of
    /// 0.1552 cm, SDD 50 cm, SID 25 cm, 6.4 cm FOV for 64x64 images).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper_full" => Self::new(50.0, 100.0, 0.0388, 512, 600, 2.0 * PI, 6.4),
            "desk_small" => Self::new(25.0, 50.0, 0.1552, 128, 180, 2.0 * PI, 6.4),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn with_image_fov(self, image_fov: f64) -> Result<Self> {
        Self::new(
            self.source_to_isocenter,
            self.source_to_detector,
            self.detector_pixel_size,
            self.n_bins,
            self.n_views,
            self.angular_span,
            image_fov,
        )
    }

    pub fn with_views(self, n_views: usize) -> Result<Self> {
        Self::new(
            self.source_to_isocenter,
            self.source_to_detector,
            self.detector_pixel_size,
            self.n_bins,
            n_views,
            self.angular_span,
            self.image_fov,
        )
    }

    pub fn source_to_isocenter(&self) -> f64 {
        self.source_to_isocenter
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_detector
    }

    pub fn detector_pixel_size(&self) -> f64 {
        self.detector_pixel_size
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn angular_span(&self) -> f64 {
        self.angular_span
    }

    pub fn image_fov(&self) -> f64 {
        self.image_fov
    }

    pub fn half_fan_angle(&self) -> f64 {
        (self.n_bins as f64 / 2.0 * self.detector_pixel_size / self.source_to_detector).atan()
    }

    pub fn required_half_fan_angle(&self) -> f64 {
        let r = self.image_fov / 2f64.sqrt() / self.source_to_isocenter;
        if r >= 1.0 {
            f64::INFINITY
        } else {
            r.asin()
        }
    }

    pub fn covers_fov(&self) -> bool {
        self.half_fan_angle() >= self.required_half_fan_angle()
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        view as f64 * self.angular_span / self.n_views as f64
    }

    pub fn angular_step(&self) -> f64 {
        self.angular_span / self.n_views as f64
    }

    /// Signed offset of bin `bin` from the detector center, in cm on the detector.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.detector_pixel_size
    }

    /// Frame of view `view`: unit vector from isocenter to source, and the
    /// detector's in-plane axis (direction of increasing bin index).
    pub fn view_frame(&self, view: usize) -> ViewFrame {
        let beta = self.view_angle(view);
        let (sin_b, cos_b) = beta.sin_cos();
        ViewFrame {
            to_source: [-sin_b, cos_b],
            detector_axis: [cos_b, sin_b],
        }
    }

    pub fn source_position(&self, view: usize) -> [f64; 2] {
        let f = self.view_frame(view);
        [
            self.source_to_isocenter * f.to_source[0],
            self.source_to_isocenter * f.to_source[1],
        ]
    }

    /// Center of detector bin `bin` at view `view`.
    pub fn bin_position(&self, view: usize, bin: usize) -> [f64; 2] {
        let f = self.view_frame(view);
        let back = self.source_to_detector - self.source_to_isocenter;
        let u = self.bin_offset(bin);
        [
            -back * f.to_source[0] + u * f.detector_axis[0],
            -back * f.to_source[1] + u * f.detector_axis[1],
        ]
    }

    /// Stable content hash, used to tie checkpoints and datasets to a geometry.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in [
            self.source_to_isocenter,
            self.source_to_detector,
            self.detector_pixel_size,
            self.angular_span,
            self.image_fov,
        ] {
            h.update(v.to_le_bytes());
        }
        h.update((self.n_bins as u64).to_le_bytes());
        h.update((self.n_views as u64).to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    pub to_source: [f64; 2],
    pub detector_axis: [f64; 2],
}

/// Diagonal fidelity weights `W`, one per detector ray.
#[derive(Debug, Clone, PartialEq)]
pub enum FidelityWeights {
    Identity,
    Diagonal(Vec<f64>),
}

impl FidelityWeights {
    pub fn diagonal(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "fidelity weights must be positive, got {w}"
            )));
        }
        Ok(FidelityWeights::Diagonal(weights))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, FidelityWeights::Identity)
    }

    /// Elementwise `w_i * y_i`.
    pub fn apply(&self, y: &Sinogram) -> Result<Sinogram> {
        match self {
            FidelityWeights::Identity => Ok(y.clone()),
            FidelityWeights::Diagonal(w) => {
                if w.len() != y.values().len() {
                    return Err(Error::shape(format!("{} weights", y.values().len()), w.len()));
                }
                let values = y.values().iter().zip(w).map(|(v, w)| v * w).collect();
                Ok(Sinogram::from_raw(y.n_views(), y.n_bins(), y.domain(), values))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_new_fill() {
        let img = Image::new(2, 2, 0.1, 0.0).unwrap();
        assert_eq!(img.values(), &[0.0; 4]);
        let img = Image::new(1, 1, 1.0, 3.5).unwrap();
        assert_eq!(img.values(), &[3.5]);
    }

    #[test]
    fn image_new_rejects_bad_parameters() {
        assert!(Image::new(0, 2, 0.1, 0.0).is_err());
        assert!(Image::new(2, 2, 0.0, 0.0).is_err());
        assert!(Image::new(2, 2, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn paper_full_preset_values() {
        let g = ScanGeometry::preset("paper_full").unwrap();
        assert_eq!(g.n_views(), 600);
        assert_eq!(g.n_bins(), 512);
        assert_eq!(g.source_to_detector(), 100.0);
        assert_eq!(g.source_to_isocenter(), 50.0);
        assert_eq!(g.detector_pixel_size(), 0.0388);
        assert_eq!(g.angular_span(), 2.0 * PI);
    }

    #[test]
    fn presets_cover_fov() {
        for name in ["paper_full", "desk_small"] {
            let g = ScanGeometry::preset(name).unwrap();
            let half_fan = ((g.n_bins() as f64 / 2.0) * g.detector_pixel_size() / g.source_to_detector()).atan();
            let needed = ((g.image_fov() / 2f64.sqrt()) / g.source_to_isocenter()).asin();
            assert!(half_fan >= needed, "{name}: {half_fan} < {needed}");
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(ScanGeometry::preset("foo"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn geometry_rejects_uncovered_fov() {
        let g = ScanGeometry::preset("desk_small").unwrap();
        assert!(g.with_image_fov(20.0).is_err());
        assert!(ScanGeometry::new(50.0, 40.0, 0.1, 128, 10, 1.0, 1.0).is_err());
    }

    #[test]
    fn source_starts_on_positive_y() {
        let g = ScanGeometry::preset("desk_small").unwrap();
        let s = g.source_position(0);
        assert!(s[0].abs() < 1e-12 && (s[1] - 25.0).abs() < 1e-12);
        // counter-clockwise: a quarter turn later the source is on -x
        let g = g.with_views(4).unwrap();
        let s = g.source_position(1);
        assert!((s[0] + 25.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    #[test]
    fn geometry_json_round_trip() {
        let g = ScanGeometry::preset("paper_full").unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: ScanGeometry = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.fingerprint(), back.fingerprint());
    }

    #[test]
    fn weights_apply() {
        let y = Sinogram::from_values(1, 2, SinogramDomain::PostLog, vec![1.0, 3.0]).unwrap();
        assert_eq!(FidelityWeights::Identity.apply(&y).unwrap(), y);
        let w = FidelityWeights::diagonal(vec![2.0, 2.0]).unwrap();
        assert_eq!(w.apply(&y).unwrap().values(), &[2.0, 6.0]);
        let w = FidelityWeights::diagonal(vec![2.0]).unwrap();
        assert!(w.apply(&y).is_err());
        assert!(FidelityWeights::diagonal(vec![0.0]).is_err());
    }
}
