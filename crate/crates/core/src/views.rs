//! Two-view augmentation with crop bookkeeping, and ROI alignment that
//! maps both views' patch features onto a shared fixed grid over their
//! overlapping source region.
//!
//! View one is a global crop resized to the full input resolution; view two
//! is a smaller crop at half resolution. Crops are resampled until they
//! share at least one percent of the source area, photometric jitter is
//! applied per view from a stored seed, and horizontal flips are folded
//! into the overlap boxes so aligned rows correspond spatially.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor, Var};

/// Normalized (x0, y0, x1, y1) rectangle in [0, 1] coordinates.
pub type NormBox = (f64, f64, f64, f64);

fn check_box(b: NormBox) -> Result<()> {
    let (x0, y0, x1, y1) = b;
    let vals = [x0, y0, x1, y1];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("views", "box has non-finite edges"));
    }
    if !(0.0..=1.0).contains(&x0)
        || !(0.0..=1.0).contains(&y0)
        || !(0.0..=1.0).contains(&x1)
        || !(0.0..=1.0).contains(&y1)
        || x0 >= x1
        || y0 >= y1
    {
        return Err(Error::invalid(
            "views",
            format!("degenerate box ({x0}, {y0}, {x1}, {y1})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViewConfig {
    pub view1_scale: (f64, f64),
    pub view1_out: usize,
    pub view2_scale: (f64, f64),
    pub view2_out: usize,
    pub aspect: (f64, f64),
    pub min_overlap: f64,
    pub max_attempts: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma_max: f64,
    pub grayscale_p: f64,
    pub flip_p: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            view1_scale: (0.5, 1.0),
            view1_out: 64,
            view2_scale: (0.25, 0.75),
            view2_out: 32,
            aspect: (0.75, 4.0 / 3.0),
            min_overlap: 0.01,
            max_attempts: 100,
            brightness: 0.2,
            contrast: 0.2,
            blur_sigma_max: 1.0,
            grayscale_p: 0.2,
            flip_p: 0.5,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.view1_scale, self.view2_scale, self.aspect] {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
                return Err(Error::invalid("views", format!("bad range ({lo}, {hi})")));
            }
        }
        if self.view1_scale.1 > 1.0 || self.view2_scale.1 > 1.0 {
            return Err(Error::invalid("views", "crop scale exceeds the source"));
        }
        if self.view1_out == 0 || self.view2_out == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("views", "sizes and attempts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_overlap)
            || !(0.0..=1.0).contains(&self.grayscale_p)
            || !(0.0..=1.0).contains(&self.flip_p)
            || self.brightness < 0.0
            || self.contrast < 0.0
            || self.blur_sigma_max < 0.0
        {
            return Err(Error::invalid("views", "jitter magnitudes out of range"));
        }
        Ok(())
    }
}

/// Geometry and jitter provenance of one crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub rect: NormBox,
    pub flip: bool,
    pub jitter_seed: u64,
}

/// One augmented view: the rendered pixels plus the crop that made them.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub crop: CropParams,
}

fn overlap_area(a: NormBox, b: NormBox) -> f64 {
    let w = a.2.min(b.2) - a.0.max(b.0);
    let h = a.3.min(b.3) - a.1.max(b.1);
    w.max(0.0) * h.max(0.0)
}

fn draw_rect(rng: &mut impl Rng, scale: (f64, f64), aspect: (f64, f64)) -> NormBox {
    let area = rng.gen_range(scale.0..=scale.1);
    let ratio = rng.gen_range(aspect.0..=aspect.1);
    let w = (area * ratio).sqrt().min(1.0);
    let h = (area / ratio).sqrt().min(1.0);
    let x0 = rng.gen_range(0.0..=(1.0 - w));
    let y0 = rng.gen_range(0.0..=(1.0 - h));
    (x0, y0, x0 + w, y0 + h)
}

/// Resamples the output pixel centers bilinearly from the source region
/// `rect`, clamping sample positions to the image border.
pub fn crop_resize(image: &Image, rect: NormBox, out_h: usize, out_w: usize) -> Result<Image> {
    check_box(rect)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("views", "empty output size"));
    }
    let (c, h, w) = image.dims();
    let (x0, y0, x1, y1) = rect;
    let mut out = Image::zeros(c, out_h, out_w);
    for oy in 0..out_h {
        let v = y0 + (oy as f64 + 0.5) / out_h as f64 * (y1 - y0);
        let sy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let iy = sy.floor() as usize;
        let ny = (iy + 1).min(h - 1);
        let fy = sy - iy as f64;
        for ox in 0..out_w {
            let u = x0 + (ox as f64 + 0.5) / out_w as f64 * (x1 - x0);
            let sx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let ix = sx.floor() as usize;
            let nx = (ix + 1).min(w - 1);
            let fx = sx - ix as f64;
            for ch in 0..c {
                let top = image.at(ch, iy, ix) * (1.0 - fx) + image.at(ch, iy, nx) * fx;
                let bot = image.at(ch, ny, ix) * (1.0 - fx) + image.at(ch, ny, nx) * fx;
                out.set(ch, oy, ox, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

pub fn flip_horizontal(image: &mut Image) {
    let (c, h, w) = image.dims();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w / 2 {
                let a = image.at(ch, y, x);
                let b = image.at(ch, y, w - 1 - x);
                image.set(ch, y, x, b);
                image.set(ch, y, w - 1 - x, a);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PhotoParams {
    brightness: f64,
    contrast: f64,
    grayscale: bool,
    blur_sigma: f64,
}

fn draw_photo_params(rng: &mut impl Rng, cfg: &ViewConfig) -> PhotoParams {
    // All draws happen up front so the stream shape never depends on the
    // parameter values.
    let brightness = rng.gen_range(1.0 - cfg.brightness..=1.0 + cfg.brightness);
    let contrast = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
    let grayscale = rng.gen_range(0.0..1.0) < cfg.grayscale_p;
    let blur_sigma = rng.gen_range(0.0..=cfg.blur_sigma_max);
    PhotoParams {
        brightness,
        contrast,
        grayscale,
        blur_sigma,
    }
}

fn gaussian_blur(image: &mut Image, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (c, h, w) = image.dims();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut pass = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sx = clamp(x as i64 + k as i64 - radius, w);
                    acc += image.at(ch, y, sx) * wgt;
                }
                pass.set(ch, y, x, acc);
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sy = clamp(y as i64 + k as i64 - radius, h);
                    acc += pass.at(ch, sy, x) * wgt;
                }
                image.set(ch, y, x, acc);
            }
        }
    }
}

fn apply_photometric(image: &mut Image, p: PhotoParams) {
    let n = image.data().len() as f64;
    let mean: f64 = image.data().iter().sum::<f64>() / n;
    for v in image.data_mut() {
        *v = (mean + p.contrast * (*v - mean)) * p.brightness;
    }
    if p.grayscale {
        let (c, h, w) = image.dims();
        for y in 0..h {
            for x in 0..w {
                let avg = (0..c).map(|ch| image.at(ch, y, x)).sum::<f64>() / c as f64;
                for ch in 0..c {
                    image.set(ch, y, x, avg);
                }
            }
        }
    }
    gaussian_blur(image, p.blur_sigma);
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Renders one view of `image` from explicit crop parameters.
pub fn render_view(image: &Image, crop: CropParams, out: usize, cfg: &ViewConfig) -> Result<View> {
    check_box(crop.rect)?;
    let mut rendered = crop_resize(image, crop.rect, out, out)?;
    if crop.flip {
        flip_horizontal(&mut rendered);
    }
    let mut jitter_rng = ChaCha12Rng::seed_from_u64(crop.jitter_seed);
    let params = draw_photo_params(&mut jitter_rng, cfg);
    apply_photometric(&mut rendered, params);
    Ok(View {
        image: rendered,
        crop,
    })
}

/// Draws a global view and a smaller second view whose crops share at least
/// `min_overlap` of the source area, retrying the pair up to
/// `max_attempts` times.
pub fn sample_views(image: &Image, cfg: &ViewConfig, rng: &mut impl Rng) -> Result<(View, View)> {
    cfg.validate()?;
    let (_, h, w) = image.dims();
    if h == 0 || w == 0 {
        return Err(Error::invalid("views", "empty source image"));
    }
    for _ in 0..cfg.max_attempts {
        let r1 = draw_rect(rng, cfg.view1_scale, cfg.aspect);
        let r2 = draw_rect(rng, cfg.view2_scale, cfg.aspect);
        if overlap_area(r1, r2) < cfg.min_overlap {
            continue;
        }
        let crop1 = CropParams {
            rect: r1,
            flip: rng.gen_bool(cfg.flip_p),
            jitter_seed: rng.gen(),
        };
        let crop2 = CropParams {
            rect: r2,
            flip: rng.gen_bool(cfg.flip_p),
            jitter_seed: rng.gen(),
        };
        let v1 = render_view(image, crop1, cfg.view1_out, cfg)?;
        let v2 = render_view(image, crop2, cfg.view2_out, cfg)?;
        return Ok((v1, v2));
    }
    Err(Error::invalid(
        "views",
        format!("no overlapping crop pair in {} attempts", cfg.max_attempts),
    ))
}

/// Expresses the crops' shared source region in each view's own normalized
/// coordinates, mirroring the horizontal interval for flipped views.
pub fn intersection_boxes(a: &CropParams, b: &CropParams) -> Result<(NormBox, NormBox)> {
    check_box(a.rect)?;
    check_box(b.rect)?;
    let x0 = a.rect.0.max(b.rect.0);
    let y0 = a.rect.1.max(b.rect.1);
    let x1 = a.rect.2.min(b.rect.2);
    let y1 = a.rect.3.min(b.rect.3);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::invalid("views", "crops do not intersect"));
    }
    let to_view = |c: &CropParams| -> NormBox {
        let (cx0, cy0, cx1, cy1) = c.rect;
        let mut u0 = (x0 - cx0) / (cx1 - cx0);
        let mut u1 = (x1 - cx0) / (cx1 - cx0);
        if c.flip {
            (u0, u1) = (1.0 - u1, 1.0 - u0);
        }
        let v0 = (y0 - cy0) / (cy1 - cy0);
        let v1 = (y1 - cy0) / (cy1 - cy0);
        (u0, v0, u1, v1)
    };
    Ok((to_view(a), to_view(b)))
}

/// Bilinear sampling weights from a patch grid onto `g`x`g` cell centers of
/// `rect`. Patch centers sit at (i + 0.5) / rows; samples clamp to the
/// border. `mirror_x` reverses the horizontal traversal so rows keep their
/// source-space order when the view itself was flipped. Returns a
/// (g*g) x (rows*cols) row-stochastic matrix.
fn align_weights(grid_shape: (usize, usize), rect: NormBox, g: usize, mirror_x: bool) -> Tensor {
    let (rows, cols) = grid_shape;
    let (x0, y0, x1, y1) = rect;
    let mut m = Tensor::zeros(&[g * g, rows * cols]);
    for gy in 0..g {
        let v = y0 + (gy as f64 + 0.5) / g as f64 * (y1 - y0);
        let py = (v * rows as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
        let iy = py.floor() as usize;
        let ny = (iy + 1).min(rows - 1);
        let fy = py - iy as f64;
        for gx in 0..g {
            let step = if mirror_x {
                (g - 1 - gx) as f64 + 0.5
            } else {
                gx as f64 + 0.5
            };
            let u = x0 + step / g as f64 * (x1 - x0);
            let px = (u * cols as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
            let ix = px.floor() as usize;
            let nx = (ix + 1).min(cols - 1);
            let fx = px - ix as f64;
            let row = gy * g + gx;
            let data = m.data_mut();
            let base = row * rows * cols;
            data[base + iy * cols + ix] += (1.0 - fy) * (1.0 - fx);
            data[base + iy * cols + nx] += (1.0 - fy) * fx;
            data[base + ny * cols + ix] += fy * (1.0 - fx);
            data[base + ny * cols + nx] += fy * fx;
        }
    }
    m
}

fn check_align_args(grid_shape: (usize, usize), tokens_rows: usize, g: usize) -> Result<()> {
    if g == 0 {
        return Err(Error::invalid("views", "aligned grid must be positive"));
    }
    if grid_shape.0 * grid_shape.1 != tokens_rows {
        return Err(Error::invalid(
            "views",
            format!(
                "grid {}x{} does not cover {} token rows",
                grid_shape.0, grid_shape.1, tokens_rows
            ),
        ));
    }
    Ok(())
}

/// Differentiable ROI alignment of on-tape tokens onto a g x g grid.
/// `mirror_x` must be set when the tokens come from a flipped view.
pub fn roi_align(
    tape: &mut Tape,
    tokens: Var,
    grid_shape: (usize, usize),
    rect: NormBox,
    g: usize,
    mirror_x: bool,
) -> Result<Var> {
    check_box(rect)?;
    check_align_args(grid_shape, tape.shape(tokens)[0], g)?;
    let weights = tape.constant(align_weights(grid_shape, rect, g, mirror_x))?;
    tape.matmul(weights, tokens)
}

/// ROI alignment of plain token features.
pub fn roi_align_tokens(
    tokens: &Tensor,
    grid_shape: (usize, usize),
    rect: NormBox,
    g: usize,
    mirror_x: bool,
) -> Result<Tensor> {
    check_box(rect)?;
    check_align_args(grid_shape, tokens.rows(), g)?;
    let w = align_weights(grid_shape, rect, g, mirror_x);
    let (n, d) = (tokens.rows(), tokens.cols());
    let mut out = Tensor::zeros(&[g * g, d]);
    for s in 0..g * g {
        for k in 0..n {
            let wgt = w.at(s, k);
            if wgt == 0.0 {
                continue;
            }
            for c in 0..d {
                out.data_mut()[s * d + c] += wgt * tokens.at(k, c);
            }
        }
    }
    Ok(out)
}

/// ROI alignment of an attention distribution, renormalized to sum one
/// over the aligned cells.
pub fn roi_align_attention(
    attention: &[f64],
    grid_shape: (usize, usize),
    rect: NormBox,
    g: usize,
    mirror_x: bool,
) -> Result<Vec<f64>> {
    check_box(rect)?;
    check_align_args(grid_shape, attention.len(), g)?;
    let w = align_weights(grid_shape, rect, g, mirror_x);
    let mut out = vec![0.0; g * g];
    for (s, slot) in out.iter_mut().enumerate() {
        for (k, &a) in attention.iter().enumerate() {
            *slot += w.at(s, k) * a;
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("views", "aligned attention has no mass"));
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(out)
}
