//! 2-D FFTs over [`Grid`]s, built from `rustfft` 1-D plans (rows, transpose, rows).

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::Grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn rows(grid: &mut Grid<Complex64>, inverse: bool) {
    let w = grid.width();
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(w)
        } else {
            p.plan_fft_forward(w)
        }
    });
    fft.process(grid.data_mut());
}

fn transform(grid: &mut Grid<Complex64>, inverse: bool) {
    rows(grid, inverse);
    let mut t = grid.transpose();
    rows(&mut t, inverse);
    *grid = t.transpose();
}

/// Unnormalized forward DFT, `X[k] = sum x[n] exp(-2 pi i k n / N)` on both axes.
pub fn fft2(grid: &mut Grid<Complex64>) {
    transform(grid, false);
}

/// Inverse DFT including the `1/(W H)` factor, so `ifft2(fft2(x)) == x`.
pub fn ifft2(grid: &mut Grid<Complex64>) {
    transform(grid, true);
    let scale = 1.0 / (grid.width() * grid.height()) as f64;
    grid.data_mut().iter_mut().for_each(|v| *v *= scale);
}

pub fn fft2_real(grid: &Grid<f64>) -> Grid<Complex64> {
    let mut c = grid.map(|v| Complex64::new(v, 0.0));
    fft2(&mut c);
    c
}

/// Signed frequency index of DFT bin `k` on an axis of length `n`.
#[inline]
pub fn signed_bin(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}
