use rand::Rng;

use super::tensor::{gemm_strided, Mat, Tensor};
use crate::error::{Error, Result};

/// Output pixels per im2col tile.
const TILE_COLUMNS: usize = 256;

/// 3x3 same-padded convolution (cross-correlation) with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    /// `(out_ch, in_ch, 3, 3)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    /// Kaiming-uniform weights, `U(-b, b)` with `b = sqrt(6 / fan_in)`, and
    /// zero bias.
    pub fn kaiming<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_ch * 9) as f64).sqrt();
        let mut layer = Self::zeros(in_ch, out_ch);
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
        layer
    }

    pub fn from_parts(in_ch: usize, out_ch: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_ch * in_ch * 9 {
            return Err(Error::shape(out_ch * in_ch * 9, weight.len()));
        }
        if bias.len() != out_ch {
            return Err(Error::shape(out_ch, bias.len()));
        }
        Ok(Self {
            in_ch,
            out_ch,
            weight,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_ch {
            return Err(Error::shape(format!("{} input channels", self.in_ch), x.channels()));
        }
        Ok(())
    }

    /// Image rows per im2col tile, sized so a tile stays cache resident.
    fn tile_rows(&self, w: usize) -> usize {
        (TILE_COLUMNS / w.max(1)).max(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let k = self.in_ch * 9;
        let rows = self.tile_rows(w);
        let mut out = Tensor::zeros([n, self.out_ch, h, w]);
        let mut col = vec![0.0; k * rows * w];
        let weight = Mat::new(&self.weight, k);
        for b in 0..n {
            let o = out.sample_mut(b);
            for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias[co]);
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let cols = (y1 - y0) * w;
                im2col(x.sample(b), self.in_ch, h, w, y0, y1, &mut col);
                gemm_strided(
                    self.out_ch,
                    k,
                    cols,
                    1.0,
                    weight,
                    Mat::new(&col, cols),
                    1.0,
                    &mut o[y0 * w..],
                    hw,
                );
            }
        }
        out.debug_check_finite("conv forward");
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        if grad_out.shape() != [n, self.out_ch, h, w] {
            return Err(Error::shape(
                format!("{:?}", [n, self.out_ch, h, w]),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let hw = h * w;
        let k = self.in_ch * 9;
        let rows = self.tile_rows(w);
        let mut grad_w = vec![0.0; self.weight.len()];
        let mut grad_b = vec![0.0; self.out_ch];
        let mut grad_x = Tensor::zeros(x.shape());
        let mut col = vec![0.0; k * rows * w];
        let weight = Mat::new(&self.weight, k);
        for b in 0..n {
            let go = grad_out.sample(b);
            for (gb, plane) in grad_b.iter_mut().zip(go.chunks_exact(hw)) {
                *gb += plane.iter().sum::<f64>();
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let cols = (y1 - y0) * w;
                let go_tile = Mat::new(&go[y0 * w..], hw);
                im2col(x.sample(b), self.in_ch, h, w, y0, y1, &mut col);
                gemm_strided(
                    self.out_ch,
                    cols,
                    k,
                    1.0,
                    go_tile,
                    Mat::new(&col, cols).t(),
                    1.0,
                    &mut grad_w,
                    k,
                );
                gemm_strided(k, self.out_ch, cols, 1.0, weight.t(), go_tile, 0.0, &mut col, cols);
                col2im(&col, self.in_ch, h, w, y0, y1, grad_x.sample_mut(b));
            }
        }
        Ok(ConvGrads {
            input: grad_x,
            weight: grad_w,
            bias: grad_b,
        })
    }
}

/// For output rows `y0..y1`, row `(c*9 + ky*3 + kx)` of `col` holds channel
/// `c` shifted by `(ky-1, kx-1)` with zero padding.
fn im2col(x: &[f64], channels: usize, h: usize, w: usize, y0: usize, y1: usize, col: &mut [f64]) {
    let hw = h * w;
    let cols = (y1 - y0) * w;
    for c in 0..channels {
        let src = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * cols..][..cols];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `x`.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, y0: usize, y1: usize, x: &mut [f64]) {
    let hw = h * w;
    let cols = (y1 - y0) * w;
    for c in 0..channels {
        let dst = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * cols..][..cols];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&src[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&src[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
}
