//! Row-major 2-D grids and the small set of image operations the pipeline needs.
//! Borders are replicate-padded everywhere.

/// A dense row-major `width × height` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self {
            width,
            height,
            data,
        }
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Lookup with replicate padding.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xi = x.clamp(0, self.width as isize - 1) as usize;
        let yi = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xi, yi)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Grid<f32> {
    /// Bilinear sample with replicate padding.
    pub fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(xi, yi);
        let b = self.get_clamped(xi + 1, yi);
        let c = self.get_clamped(xi, yi + 1);
        let d = self.get_clamped(xi + 1, yi + 1);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    /// Separable correlation with a symmetric odd-length kernel.
    pub fn convolve_separable(&self, kernel: &[f32]) -> Grid<f32> {
        assert!(kernel.len() % 2 == 1);
        self.correlate_rows(kernel).correlate_cols(kernel)
    }

    /// Horizontal correlation: out(x) = Σ_k kernel[k] · in(x + k − r).
    pub fn correlate_rows(&self, kernel: &[f32]) -> Grid<f32> {
        let (w, h) = (self.width, self.height);
        let r = kernel.len() / 2;
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = if x >= r && x + r < w {
                    let win = &row[x - r..x + r + 1];
                    kernel.iter().zip(win).map(|(&k, &v)| k * v).sum()
                } else {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(k, &wt)| wt * row[(x + k).saturating_sub(r).min(w - 1)])
                        .sum()
                };
            }
        }
        Grid::from_vec(w, h, out)
    }

    /// Vertical correlation.
    pub fn correlate_cols(&self, kernel: &[f32]) -> Grid<f32> {
        let (w, h) = (self.width, self.height);
        let r = kernel.len() / 2;
        let mut out = vec![0.0f32; w * h];
        for (k, &wt) in kernel.iter().enumerate() {
            for y in 0..h {
                let sy = (y + k).saturating_sub(r).min(h - 1);
                let src = &self.data[sy * w..(sy + 1) * w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            }
        }
        Grid::from_vec(w, h, out)
    }

    pub fn gaussian_blur(&self, sigma: f32) -> Grid<f32> {
        if sigma <= 0.0 {
            return self.clone();
        }
        self.convolve_separable(&gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize))
    }

    /// Mean over a `size × size` window (size odd).
    pub fn box_filter(&self, size: usize) -> Grid<f32> {
        let r = size / 2;
        let (w, h) = (self.width, self.height);
        let inv = 1.0 / size as f64;
        // sliding sums with replicate padding, rows then columns
        let mut tmp = vec![0.0f32; w * h];
        let mut line = Vec::with_capacity(w.max(h) + 2 * r);
        let slide = |line: &[f64], out: &mut dyn FnMut(usize, f32)| {
            let mut acc: f64 = line[..size].iter().sum();
            out(0, (acc * inv) as f32);
            for i in 1..line.len() - 2 * r {
                acc += line[i + size - 1] - line[i - 1];
                out(i, (acc * inv) as f32);
            }
        };
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            line.clear();
            line.extend((0..w + 2 * r).map(|i| row[i.saturating_sub(r).min(w - 1)] as f64));
            slide(&line, &mut |x, v| tmp[y * w + x] = v);
        }
        let mut out = vec![0.0f32; w * h];
        for x in 0..w {
            line.clear();
            line.extend((0..h + 2 * r).map(|i| tmp[i.saturating_sub(r).min(h - 1) * w + x] as f64));
            slide(&line, &mut |y, v| out[y * w + x] = v);
        }
        Grid::from_vec(w, h, out)
    }

    /// Resamples to `width × height`, mapping pixel centres onto pixel centres.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Grid<f32> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Grid::from_fn(width, height, |x, y| {
            self.bilinear((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    }

    /// Central-difference gradients `(dx, dy)`.
    pub fn gradients(&self) -> (Grid<f32>, Grid<f32>) {
        let dx = Grid::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (self.get_clamped(x + 1, y) - self.get_clamped(x - 1, y))
        });
        let dy = Grid::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            0.5 * (self.get_clamped(x, y + 1) - self.get_clamped(x, y - 1))
        });
        (dx, dy)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Normalised Gaussian kernel of length `2·radius + 1`.
pub fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// `ceil(ratio × size)` guarded against float noise just above an integer.
pub fn scaled_size(size: usize, ratio: f64) -> usize {
    let v = ratio * size as f64;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r.max(1.0) as usize
    } else {
        v.ceil().max(1.0) as usize
    }
}
