use crate::error::{Error, Result};

/// Dense `(batch, channels, height, width)` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], values: Vec<f64>) -> Result<Self> {
        let len = shape.iter().product::<usize>();
        if values.len() != len {
            return Err(Error::shape(format!("{len} values for {shape:?}"), values.len()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Pixels per channel.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// All channels of batch element `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.plane();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.plane();
        &mut self.values[n * len..(n + 1) * len]
    }

    /// Channel `c` of batch element `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.values[start..start + p]
    }

    /// Stacks single-channel planes into a `(planes.len(), 1, h, w)` tensor.
    pub fn from_planes(height: usize, width: usize, planes: &[&[f64]]) -> Result<Self> {
        let mut values = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::shape(height * width, p.len()));
            }
            values.extend_from_slice(p);
        }
        Self::new([planes.len(), 1, height, width], values)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidParameter("nothing to concatenate".into()))?;
        let [n, _, h, w] = first.shape;
        let mut channels = 0;
        for t in parts {
            if t.shape[0] != n || t.shape[2] != h || t.shape[3] != w {
                return Err(Error::shape(format!("[{n}, _, {h}, {w}]"), format!("{:?}", t.shape)));
            }
            channels += t.shape[1];
        }
        let mut values = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for t in parts {
                values.extend_from_slice(t.sample(b));
            }
        }
        Ok(Self {
            shape: [n, channels, h, w],
            values,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "non-finite values after {op}");
    }
}

/// Row-major matrix view: `rows x cols` with row stride `ld`, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub ld: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            ld,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Strides of the logical `rows x cols` operand, checking the extent.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        let (stored_rows, stored_cols) = if self.transposed { (cols, rows) } else { (rows, cols) };
        assert!(stored_cols <= self.ld || stored_rows <= 1);
        if stored_rows > 0 && stored_cols > 0 {
            assert!(self.data.len() >= (stored_rows - 1) * self.ld + stored_cols);
        }
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for contiguous row-major slices,
/// where `op` transposes when the flag is set. `op(a)` is `m x k`, `op(b)` is
/// `k x n`.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    transpose_a: bool,
    b: &[f64],
    transpose_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = Mat {
        data: a,
        ld: if transpose_a { m } else { k },
        transposed: transpose_a,
    };
    let b = Mat {
        data: b,
        ld: if transpose_b { k } else { n },
        transposed: transpose_b,
    };
    gemm_strided(m, k, n, alpha, a, b, beta, c, n);
}

/// `c = alpha * op(a) * op(b) + beta * c` on strided views; `c` has row
/// stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    assert!(n <= ldc || m <= 1);
    if m > 0 && n > 0 {
        assert!(c.len() >= (m - 1) * ldc + n);
    }
    // SAFETY: `strides` and the assertion above check that every addressed
    // element lies inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let naive = |ta: bool, tb: bool| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for l in 0..k {
                        let av = if ta { a[l * m + i] } else { a[i * k + l] };
                        let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                        c[i * n + j] += av * bv;
                    }
                }
            }
            c
        };
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![1.0; m * n];
            gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(naive(ta, tb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let a = Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([2, 2, 1, 2], (5..13).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.sample(1), &[3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
