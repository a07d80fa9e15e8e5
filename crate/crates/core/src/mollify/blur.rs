use std::f64::consts::PI;

use super::MollifyError;

/// Multi-channel pixel grid stored channel-major, then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, MollifyError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(MollifyError::InvalidGrid("extents must be positive".into()));
        }
        if values.len() != height * width * channels {
            return Err(MollifyError::InvalidGrid(format!(
                "{} values for a {height}x{width}x{channels} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MollifyError::InvalidGrid("non-finite pixel value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Single-channel grid from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MollifyError> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(MollifyError::InvalidGrid("ragged rows".into()));
        }
        Self::new(rows.len(), width, 1, rows.concat())
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().sum::<f64>() / ch.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn side(&self) -> Result<usize, MollifyError> {
        if self.height != self.width {
            return Err(MollifyError::UnsupportedShape {
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.height)
    }
}

/// Orthonormal DCT-II matrix `C[k][n] = s_k cos(pi (2n + 1) k / 2K)`.
pub fn dct_matrix(k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * k];
    let kf = k as f64;
    for row in 0..k {
        let s = if row == 0 { (1.0 / kf).sqrt() } else { (2.0 / kf).sqrt() };
        for n in 0..k {
            c[row * k + n] = s * (PI * (2 * n + 1) as f64 * row as f64 / (2.0 * kf)).cos();
        }
    }
    c
}

/// `out = L * X * R` for `k x k` row-major matrices, with optional
/// transposes on `L` and `R`.
fn sandwich(c: &[f64], x: &[f64], k: usize, left_t: bool, right_t: bool) -> Vec<f64> {
    let l = |i: usize, j: usize| if left_t { c[j * k + i] } else { c[i * k + j] };
    let r = |i: usize, j: usize| if right_t { c[j * k + i] } else { c[i * k + j] };
    let mut tmp = vec![0.0; k * k];
    for i in 0..k {
        for m in 0..k {
            let lv = l(i, m);
            for j in 0..k {
                tmp[i * k + j] += lv * x[m * k + j];
            }
        }
    }
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for m in 0..k {
            let tv = tmp[i * k + m];
            for j in 0..k {
                out[i * k + j] += tv * r(m, j);
            }
        }
    }
    out
}

fn per_channel(g: &ImageGrid, f: impl Fn(&[f64]) -> Vec<f64>) -> ImageGrid {
    let values = (0..g.channels).flat_map(|c| f(g.channel(c))).collect();
    ImageGrid { values, ..g.clone() }
}

/// Orthonormal 2-D DCT-II applied along both axes of every channel.
pub fn dct2_forward(g: &ImageGrid) -> Result<ImageGrid, MollifyError> {
    let k = g.side()?;
    let c = dct_matrix(k);
    Ok(per_channel(g, |x| sandwich(&c, x, k, false, true)))
}

/// Inverse of [`dct2_forward`].
pub fn dct2_inverse(coeffs: &ImageGrid) -> Result<ImageGrid, MollifyError> {
    let k = coeffs.side()?;
    let c = dct_matrix(k);
    Ok(per_channel(coeffs, |u| sandwich(&c, u, k, true, false)))
}

fn check_time(t: f64) -> Result<(), MollifyError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(MollifyError::Parameter(format!("blur time must be non-negative, got {t}")));
    }
    Ok(())
}

/// Attenuation applied to DCT coefficient `(i, j)` of a `k x k` grid:
/// `exp(-(f_i^2 + f_j^2) t)` with `f_k = pi k / K`.
pub fn attenuation(k: usize, i: usize, j: usize, t: f64) -> f64 {
    let fi = PI * i as f64 / k as f64;
    let fj = PI * j as f64 / k as f64;
    (-(fi * fi + fj * fj) * t).exp()
}

/// Heat-equation blur in DCT space. The DC factor is exactly 1.
pub fn blur_spectrum(coeffs: &ImageGrid, t: f64) -> Result<ImageGrid, MollifyError> {
    check_time(t)?;
    let k = coeffs.side()?;
    let mut u = coeffs.clone();
    for ch in u.values.chunks_exact_mut(k * k) {
        for i in 0..k {
            for j in 0..k {
                ch[i * k + j] *= attenuation(k, i, j, t);
            }
        }
    }
    Ok(u)
}

/// Heat-equation blur of every channel; see [`blur_spectrum`].
///
/// The DC coefficient has zero frequency, so each channel keeps its mean.
pub fn blur_mollify(g: &ImageGrid, t: f64) -> Result<ImageGrid, MollifyError> {
    check_time(t)?;
    dct2_inverse(&blur_spectrum(&dct2_forward(g)?, t)?)
}
