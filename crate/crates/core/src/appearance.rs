//! Low-frequency appearance representation and the appearance distance.
//!
//! An image is bilinearly resized to a small target grid and then blurred
//! with a normalized Gaussian kernel under reflect padding. The appearance
//! distance between two images is the mean squared error of their filtered
//! versions. Ridge-scale detail (identity) is removed by the filter while
//! blob shape, contrast and brightness (appearance) survive.
//!
//! The `sigma` parameter is a *variance*: kernel taps are proportional to
//! `exp(-(dx² + dy²) / (2σ))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceFilterConfig {
    /// `(height, width)` of the resized grid.
    pub resize_target: (usize, usize),
    /// Gaussian variance, in pixels² of the resized grid.
    pub sigma: f64,
    /// Odd kernel side.
    pub kernel_size: usize,
}

impl AppearanceFilterConfig {
    /// Quarter-resolution target, `σ = 2`, `n = 7`.
    pub fn for_resolution(side: usize) -> Self {
        let t = (side / 4).max(1);
        Self { resize_target: (t, t), sigma: 2.0, kernel_size: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma > 0.0 && self.sigma.is_finite(), Config, "sigma must be positive, got {}", self.sigma);
        ensure!(
            self.kernel_size >= 1 && self.kernel_size % 2 == 1,
            Config,
            "kernel size must be odd and >= 1, got {}",
            self.kernel_size
        );
        ensure!(
            self.resize_target.0 >= 1 && self.resize_target.1 >= 1,
            Config,
            "resize target must be non-empty, got {:?}",
            self.resize_target
        );
        Ok(())
    }
}

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        ensure!(
            pixels.len() == height * width,
            Usage,
            "{} pixels for a {height}x{width} image",
            pixels.len()
        );
        ensure!(pixels.iter().all(|v| v.is_finite()), Usage, "image contains non-finite pixels");
        Ok(Self { height, width, pixels })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Plain bilinear resize (half-pixel centers, edges clamped).
    pub fn resize(&self, height: usize, width: usize) -> ImageGrid {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mut out = vec![0.0; height * width];
        resize_into(&self.pixels, self.height, self.width, height, width, &mut out);
        ImageGrid { height, width, pixels: out }
    }

    /// Quantizes to 8-bit grayscale.
    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Self::from_luma8(&img.to_luma8()))
    }

    /// Lossless 8-bit round trip used for everything written to disk.
    pub fn quantized(&self) -> Self {
        Self::from_luma8(&self.to_luma8())
    }
}

/// Bilinear sample at fractional `(y, x)`; taps outside the image read `fill`.
pub fn bilinear_sample(image: &ImageGrid, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = image.dims();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let tap = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            image.get(yy as usize, xx as usize)
        }
    };
    let top = (1.0 - fx) * tap(y0, x0) + if fx > 0.0 { fx * tap(y0, x0 + 1.0) } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = (1.0 - fx) * tap(y0 + 1.0, x0) + if fx > 0.0 { fx * tap(y0 + 1.0, x0 + 1.0) } else { 0.0 };
    (1.0 - fy) * top + fy * bottom
}

/// Taps `(i0, i1, frac)` of a half-pixel-centered linear resample from
/// `src` to `dst` samples.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn resize_into(src: &[f64], h: usize, w: usize, ho: usize, wo: usize, out: &mut [f64]) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
}

fn resize_transpose(g: &[f64], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let v = g[oy * wo + ox];
            dx[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
            dx[y0 * w + x1] += v * (1.0 - fy) * fx;
            dx[y1 * w + x0] += v * fy * (1.0 - fx);
            dx[y1 * w + x1] += v * fy * fx;
        }
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Normalized `n × n` Gaussian kernel, row-major.
pub fn gaussian_kernel(sigma: f64, n: usize) -> Result<Vec<f64>> {
    ensure!(n >= 1 && n % 2 == 1, Config, "kernel size must be odd and >= 1, got {n}");
    ensure!(sigma > 0.0 && sigma.is_finite(), Config, "sigma must be positive, got {sigma}");
    let c = (n / 2) as f64;
    let mut k: Vec<f64> = (0..n * n)
        .map(|i| {
            let (dy, dx) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (-(dx * dx + dy * dy) / (2.0 * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// The resize-then-blur operator for a fixed source size.
#[derive(Clone, Debug)]
pub struct AppearanceFilter {
    src: (usize, usize),
    dst: (usize, usize),
    kernel: Vec<f64>,
    n: usize,
}

impl AppearanceFilter {
    pub fn new(src_height: usize, src_width: usize, cfg: &AppearanceFilterConfig) -> Result<Self> {
        cfg.validate()?;
        let (th, tw) = cfg.resize_target;
        ensure!(
            src_height >= th && src_width >= tw,
            Usage,
            "image {src_height}x{src_width} is smaller than the resize target {th}x{tw}"
        );
        Ok(Self {
            src: (src_height, src_width),
            dst: (th, tw),
            kernel: gaussian_kernel(cfg.sigma, cfg.kernel_size)?,
            n: cfg.kernel_size,
        })
    }

    pub fn output_len(&self) -> usize {
        self.dst.0 * self.dst.1
    }

    pub fn input_len(&self) -> usize {
        self.src.0 * self.src.1
    }

    /// Filters one flattened image.
    pub fn apply(&self, pixels: &[f64]) -> Vec<f64> {
        let (h, w) = self.src;
        let (ho, wo) = self.dst;
        let mut small = vec![0.0; ho * wo];
        resize_into(pixels, h, w, ho, wo, &mut small);
        let r = (self.n / 2) as isize;
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for ky in 0..self.n {
                    let sy = reflect(y as isize + ky as isize - r, ho);
                    for kx in 0..self.n {
                        let sx = reflect(x as isize + kx as isize - r, wo);
                        acc += self.kernel[ky * self.n + kx] * small[sy * wo + sx];
                    }
                }
                out[y * wo + x] = acc;
            }
        }
        out
    }

    /// Vector-Jacobian product of [`AppearanceFilter::apply`].
    pub fn apply_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let (h, w) = self.src;
        let (ho, wo) = self.dst;
        let r = (self.n / 2) as isize;
        let mut gsmall = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let g = grad[y * wo + x];
                for ky in 0..self.n {
                    let sy = reflect(y as isize + ky as isize - r, ho);
                    for kx in 0..self.n {
                        let sx = reflect(x as isize + kx as isize - r, wo);
                        gsmall[sy * wo + sx] += self.kernel[ky * self.n + kx] * g;
                    }
                }
            }
        }
        let mut dx = vec![0.0; h * w];
        resize_transpose(&gsmall, h, w, ho, wo, &mut dx);
        dx
    }

    /// Differentiable filtering of `x: [N, 1, H, W]` (or `[N, H·W]`) into `[N, h·w]`.
    pub fn apply_graph(&self, g: &Graph, x: Var) -> Var {
        let xv = g.value(x);
        let n = xv.dim(0);
        assert_eq!(xv.len(), n * self.input_len(), "appearance filter input size");
        let shape = xv.shape().to_vec();
        let mut out = Vec::with_capacity(n * self.output_len());
        for i in 0..n {
            out.extend(self.apply(xv.row(i)));
        }
        let this = self.clone();
        let olen = self.output_len();
        g.custom_op(Tensor::new(&[n, olen], out), &[x], move |grad, _| {
            let mut dx = Vec::with_capacity(n * this.input_len());
            for i in 0..n {
                dx.extend(this.apply_transpose(&grad.data()[i * olen..(i + 1) * olen]));
            }
            vec![Some(Tensor::new(&shape, dx))]
        })
    }
}

/// Resize to the configured target, then blur with the Gaussian kernel.
pub fn blur_downsample(image: &ImageGrid, cfg: &AppearanceFilterConfig) -> Result<ImageGrid> {
    let filter = AppearanceFilter::new(image.height, image.width, cfg)?;
    let (h, w) = cfg.resize_target;
    Ok(ImageGrid { height: h, width: w, pixels: filter.apply(&image.pixels) })
}

/// Mean squared error between the filtered versions of two images.
pub fn appearance_distance(a: &ImageGrid, b: &ImageGrid, cfg: &AppearanceFilterConfig) -> Result<f64> {
    check_same_dims(a, b)?;
    let filter = AppearanceFilter::new(a.height, a.width, cfg)?;
    Ok(filtered_mse(&filter.apply(&a.pixels), &filter.apply(&b.pixels)))
}

/// Appearance distance together with its gradient with respect to both images.
pub fn appearance_distance_with_grad(
    a: &ImageGrid,
    b: &ImageGrid,
    cfg: &AppearanceFilterConfig,
) -> Result<(f64, ImageGrid, ImageGrid)> {
    check_same_dims(a, b)?;
    let filter = AppearanceFilter::new(a.height, a.width, cfg)?;
    let (fa, fb) = (filter.apply(&a.pixels), filter.apply(&b.pixels));
    let m = fa.len() as f64;
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| 2.0 * (x - y) / m).collect();
    let ga = filter.apply_transpose(&diff);
    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
    let mk = |p| ImageGrid { height: a.height, width: a.width, pixels: p };
    Ok((filtered_mse(&fa, &fb), mk(ga), mk(gb)))
}

fn filtered_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn check_same_dims(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    ensure!(a.dims() == b.dims(), Usage, "image dimensions differ: {:?} vs {:?}", a.dims(), b.dims());
    Ok(())
}
