//! Dense H×W×K image buffers with half-pixel-center bilinear sampling.

use crate::error::{Error, Result};

/// Row-major image with interleaved channels: `data[(row * width + col) * channels + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Semantic descriptor grid.
pub type FeatureImage = Image;

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(col, row, out)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for row in 0..height {
            for col in 0..width {
                f(col, row, img.pixel_mut(col, row));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, k: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + k]
    }

    /// Bilinear stencil at continuous pixel coordinates; samples outside the
    /// image clamp to the border pixels.
    #[inline]
    pub fn stencil(&self, x: f64, y: f64) -> Stencil2 {
        let (x0, x1, fx) = axis_stencil(x, self.width);
        let (y0, y1, fy) = axis_stencil(y, self.height);
        Stencil2 {
            idx: [(y0, x0), (y0, x1), (y1, x0), (y1, x1)],
            w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    /// Bilinear sample at continuous pixel coordinates `(x, y) = (col, row)`.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let s = self.stencil(x, y);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&(r, c), &w) in s.idx.iter().zip(&s.w) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.pixel(c, r)) {
                *o += w * v;
            }
        }
    }

    pub fn sample_bilinear_vec(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear(x, y, &mut out);
        out
    }

    /// Copies the inclusive pixel rectangle.
    pub fn crop(&self, rect: &Rect) -> Image {
        let (w, h) = (rect.width(), rect.height());
        let mut out = Image::zeros(w, h, self.channels);
        for row in 0..h {
            for col in 0..w {
                out.pixel_mut(col, row)
                    .copy_from_slice(self.pixel(rect.x0 + col, rect.y0 + row));
            }
        }
        out
    }

    /// Single channel as its own image.
    pub fn channel(&self, k: usize) -> Image {
        let data = self.data.iter().skip(k).step_by(self.channels).copied().collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Neighbor indices and interpolation weight along one axis.
#[inline]
fn axis_stencil(x: f64, n: usize) -> (usize, usize, f64) {
    let g = x - 0.5;
    if !(g > 0.0) {
        return (0, 0, 0.0);
    }
    let i0 = g.floor();
    let i = i0 as usize;
    if i + 1 >= n {
        return (n - 1, n - 1, 0.0);
    }
    (i, i + 1, g - i0)
}

/// Four bilinear neighbors `(row, col)` and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil2 {
    pub idx: [(usize, usize); 4],
    pub w: [f64; 4],
}

/// Inclusive pixel rectangle, `x` = column, `y` = row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    /// Maps the rectangle onto a grid of a different resolution, covering at
    /// least the same continuous area.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Rect {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
        let hi = |v: usize, s: f64, n: usize| (((v + 1) as f64 * s).ceil() as usize).clamp(1, n) - 1;
        Rect {
            x0: lo(self.x0, sx).min(to.0 - 1),
            y0: lo(self.y0, sy).min(to.1 - 1),
            x1: hi(self.x1, sx, to.0),
            y1: hi(self.y1, sy, to.1),
        }
    }
}

/// Smallest rectangle covering all pixels of a single-channel mask with value
/// at or above `threshold`.
pub fn tight_bbox(mask: &Image, threshold: f64) -> Result<Rect> {
    let mut rect: Option<Rect> = None;
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(col, row, 0) >= threshold {
                rect = Some(match rect {
                    None => Rect {
                        x0: col,
                        y0: row,
                        x1: col,
                        y1: row,
                    },
                    Some(r) => Rect {
                        x0: r.x0.min(col),
                        y0: r.y0.min(row),
                        x1: r.x1.max(col),
                        y1: r.y1.max(row),
                    },
                });
            }
        }
    }
    rect.ok_or(Error::EmptyMask)
}

/// Bilinear resampling to `(width, height)` with half-pixel-center alignment.
pub fn resample(image: &Image, width: usize, height: usize) -> Image {
    let sx = image.width() as f64 / width as f64;
    let sy = image.height() as f64 / height as f64;
    let mut out = Image::zeros(width, height, image.channels());
    for row in 0..height {
        for col in 0..width {
            let (x, y) = ((col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy);
            image.sample_bilinear(x, y, out.pixel_mut(col, row));
        }
    }
    out
}
