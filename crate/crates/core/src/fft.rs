//! Iterative radix-2 Cooley-Tukey FFT.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
}

/// In-place unnormalized transform; `inverse` flips the twiddle sign.
/// The length must be a power of two.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("FFT length {n} is not a power of two")));
    }
    bit_reverse_permute(buf);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// 2-D transform of a row-major `size`x`size` complex grid: rows, then columns.
pub fn fft2_complex(grid: &mut [Complex64], size: usize, inverse: bool) -> Result<()> {
    if grid.len() != size * size {
        return Err(Error::Shape(format!(
            "grid of {} values is not {size}x{size}",
            grid.len()
        )));
    }
    for row in grid.chunks_mut(size) {
        fft_in_place(row, inverse)?;
    }
    let mut col = vec![Complex64::default(); size];
    for c in 0..size {
        for r in 0..size {
            col[r] = grid[r * size + c];
        }
        fft_in_place(&mut col, inverse)?;
        for r in 0..size {
            grid[r * size + c] = col[r];
        }
    }
    Ok(())
}

/// Forward 2-D DFT of a real square patch given as row-major values.
pub fn fft2_real(values: &[f64], size: usize) -> Result<Vec<Complex64>> {
    let mut grid: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_complex(&mut grid, size, false)?;
    Ok(grid)
}

/// Forward 2-D DFT of an `S`x`S` real tensor, returned as `[S, S, 2]`
/// (real, imaginary) pairs.
pub fn fft2(patch: &Tensor) -> Result<Tensor> {
    let size = match patch.dims() {
        [a, b] if a == b => *a,
        d => return Err(Error::Shape(format!("fft2 expects a square matrix, got {d:?}"))),
    };
    let spectrum = fft2_real(patch.data(), size)?;
    let flat = spectrum.iter().flat_map(|c| [c.re, c.im]).collect();
    Tensor::from_vec(&[size, size, 2], flat)
}
