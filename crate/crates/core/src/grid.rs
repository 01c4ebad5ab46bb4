use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D array. `x` indexes columns, `y` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                expected: format!("{width}x{height} = {} samples", width * height),
                found: format!("{} samples", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Window of `w`x`h` whose top-left corner is `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Grid<T>> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape {
                expected: format!("window inside {}x{}", self.width, self.height),
                found: format!("{w}x{h} at ({x0},{y0})"),
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Grid {
            width: w,
            height: h,
            data,
        })
    }

    /// Centered `w`x`h` window; the center sample `(W/2, H/2)` maps to `(w/2, h/2)`.
    pub fn center_window(&self, w: usize, h: usize) -> Result<Grid<T>> {
        if w > self.width || h > self.height {
            return Err(Error::Shape {
                expected: format!("crop no larger than {}x{}", self.width, self.height),
                found: format!("{w}x{h}"),
            });
        }
        self.window(self.width / 2 - w / 2, self.height / 2 - h / 2, w, h)
    }

    /// Cyclic shift moving sample `(0, 0)` to `(W/2, H/2)`.
    pub fn fftshift(&self) -> Grid<T> {
        let (w, h) = (self.width, self.height);
        let (sx, sy) = (w / 2, h / 2);
        Grid::from_fn(w, h, |x, y| self.get((x + w - sx) % w, (y + h - sy) % h))
    }

    pub fn transpose(&self) -> Grid<T> {
        Grid::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }
}

impl Grid<f64> {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Bilinear sample at fractional position; `None` outside the sample hull.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            // exact hits on the last row/column
            if x0 < self.width && y0 < self.height && x == x0 as f64 && y == y0 as f64 {
                return Some(self.get(x0, y0));
            }
            return None;
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.get(x0, y0);
        let b = self.get(x0 + 1, y0);
        let c = self.get(x0, y0 + 1);
        let d = self.get(x0 + 1, y0 + 1);
        Some((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }
}
