//! TOMO1 binary container for images, sinograms and tensors.
//!
//! Layout, byte for byte:
//!
//! ```text
//! "TOMO1\n"
//! "kind=<kind> dims=<d0>x<d1>[x...] dtype=<f32|f64> meta=<key:val,...>\n"
//! payload: prod(dims) little-endian floats, row-major, d0 outermost
//! ```
//!
//! `kind` is `image` (dims = height x width, meta `pixel_size`), `sinogram`
//! (dims = views x bins, meta `domain`) or `tensor` (any rank). Meta keys and
//! values are free of whitespace, `,` and `:`; an empty meta is written as
//! `meta=`. Floats in meta use the shortest representation that parses back
//! to the same bits.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageShape, Sinogram, SinogramDomain};

pub const MAGIC: &[u8] = b"TOMO1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Decoded container: header fields plus values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub meta: Vec<(String, String)>,
    pub values: Vec<f64>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == ',' || c == ':' || c == '=')
}

impl Container {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bad = |reason: String| Error::Container {
            path: Default::default(),
            reason,
        };
        if !valid_token(&self.kind) {
            return Err(bad(format!("invalid kind `{}`", self.kind)));
        }
        if self.dims.is_empty() || self.dims.iter().product::<usize>() != self.values.len() {
            return Err(bad(format!(
                "dims {:?} do not match {} values",
                self.dims,
                self.values.len()
            )));
        }
        for (k, v) in &self.meta {
            if !valid_token(k) || !valid_token(v) {
                return Err(bad(format!("invalid meta entry `{k}:{v}`")));
            }
        }
        let dims = self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let meta = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(",");
        let header = format!(
            "kind={} dims={} dtype={} meta={}\n",
            self.kind,
            dims,
            self.dtype.as_str(),
            meta
        );
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + self.values.len() * self.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        match self.dtype {
            Dtype::F64 => self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => self
                .values
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| "missing TOMO1 magic".to_string())?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| "unterminated header".to_string())?;
        let header = std::str::from_utf8(&rest[..nl]).map_err(|e| e.to_string())?;
        let payload = &rest[nl + 1..];

        let mut kind = None;
        let mut dims = None;
        let mut dtype = None;
        let mut meta = None;
        for field in header.split(' ') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("bad header field `{field}`"))?;
            match key {
                "kind" => kind = Some(value.to_string()),
                "dims" => {
                    let d = value
                        .split('x')
                        .map(|s| s.parse::<usize>().map_err(|e| format!("bad dims: {e}")))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    dims = Some(d);
                }
                "dtype" => {
                    dtype = Some(match value {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        other => return Err(format!("unsupported dtype `{other}`")),
                    })
                }
                "meta" => {
                    let mut m = Vec::new();
                    if !value.is_empty() {
                        for entry in value.split(',') {
                            let (k, v) = entry
                                .split_once(':')
                                .ok_or_else(|| format!("bad meta entry `{entry}`"))?;
                            m.push((k.to_string(), v.to_string()));
                        }
                    }
                    meta = Some(m);
                }
                other => return Err(format!("unknown header key `{other}`")),
            }
        }
        let kind = kind.ok_or("missing kind")?;
        let dims = dims.ok_or("missing dims")?;
        let dtype = dtype.ok_or("missing dtype")?;
        let meta = meta.ok_or("missing meta")?;
        let count: usize = dims.iter().product();
        if payload.len() != count * dtype.width() {
            return Err(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                count * dtype.width()
            ));
        }
        let values = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok(Container {
            kind,
            dims,
            dtype,
            meta,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes().map_err(|e| match e {
            Error::Container { reason, .. } => Error::Container {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Container {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn image_to_container(img: &Image, dtype: Dtype) -> Container {
    Container {
        kind: "image".into(),
        dims: vec![img.height(), img.width()],
        dtype,
        meta: vec![("pixel_size".into(), format!("{:?}", img.pixel_size()))],
        values: img.values().to_vec(),
    }
}

pub fn image_from_container(c: &Container) -> std::result::Result<Image, String> {
    if c.kind != "image" || c.dims.len() != 2 {
        return Err(format!("expected a 2-D image, got kind={} dims={:?}", c.kind, c.dims));
    }
    let pixel_size: f64 = c
        .meta_get("pixel_size")
        .ok_or("image without pixel_size")?
        .parse()
        .map_err(|e| format!("bad pixel_size: {e}"))?;
    let shape = ImageShape::new(c.dims[1], c.dims[0], pixel_size).map_err(|e| e.to_string())?;
    Image::from_values(shape, c.values.clone()).map_err(|e| e.to_string())
}

pub fn sinogram_to_container(s: &Sinogram, dtype: Dtype) -> Container {
    Container {
        kind: "sinogram".into(),
        dims: vec![s.n_views(), s.n_bins()],
        dtype,
        meta: vec![("domain".into(), s.domain().as_str().into())],
        values: s.values().to_vec(),
    }
}

pub fn sinogram_from_container(c: &Container) -> std::result::Result<Sinogram, String> {
    if c.kind != "sinogram" || c.dims.len() != 2 {
        return Err(format!("expected a sinogram, got kind={} dims={:?}", c.kind, c.dims));
    }
    let domain = c
        .meta_get("domain")
        .and_then(SinogramDomain::parse)
        .ok_or("sinogram without a valid domain")?;
    Sinogram::from_values(c.dims[0], c.dims[1], domain, c.values.clone()).map_err(|e| e.to_string())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    image_to_container(img, Dtype::F64).write(path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let c = Container::read(path)?;
    image_from_container(&c).map_err(|reason| Error::Container {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    sinogram_to_container(s, Dtype::F64).write(path)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let c = Container::read(path)?;
    sinogram_from_container(&c).map_err(|reason| Error::Container {
        path: path.to_path_buf(),
        reason,
    })
}
