//! Random geometric views of the edited image.
//!
//! Every transform is an inverse warp: each output pixel bilinearly samples
//! the input at a mapped location, with taps that fall outside the image
//! reading `fill_value`. For fixed sampled parameters the warp is affine in
//! the input pixels, so it doubles as a [`DiffMap`] on the training tape.

use nalgebra::{SMatrix, SVector};
use rand::Rng as _;

use crate::autodiff::DiffMap;
use crate::backends::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};

/// Resampling attempts before giving up on a degenerate corner draw.
pub const MAX_HOMOGRAPHY_ATTEMPTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Perspective,
    Affine,
    CropResize,
    None,
}

impl AugKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugKind::Perspective => "perspective",
            AugKind::Affine => "affine",
            AugKind::CropResize => "crop_resize",
            AugKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "perspective" => Some(AugKind::Perspective),
            "affine" => Some(AugKind::Affine),
            "crop_resize" | "crop" => Some(AugKind::CropResize),
            "none" => Some(AugKind::None),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Interpolation {
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub kind: AugKind,
    /// Corner displacement as a fraction of the half extent, in `[0, 1]`.
    pub distortion_scale: f64,
    pub n_views: usize,
    pub interpolation: Interpolation,
    pub fill_value: f64,
    pub seed_stream: u64,
    /// Affine: maximum absolute rotation in degrees.
    pub affine_degrees: f64,
    /// Affine: maximum absolute translation as a fraction of each side.
    pub affine_translate: f64,
    pub affine_scale: (f64, f64),
    /// Crop side length as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            kind: AugKind::Perspective,
            distortion_scale: 0.5,
            n_views: 4,
            interpolation: Interpolation::Bilinear,
            fill_value: 0.0,
            seed_stream: 0,
            affine_degrees: 15.0,
            affine_translate: 0.1,
            affine_scale: (0.9, 1.1),
            crop_fraction: 0.8,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::config("aug.n_views", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.distortion_scale) {
            return Err(Error::config("aug.distortion_scale", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::config("aug.fill_value", "must lie in [0, 1]"));
        }
        if !(self.affine_degrees >= 0.0 && self.affine_translate >= 0.0) {
            return Err(Error::config("aug.affine_degrees", "ranges must be non-negative"));
        }
        let (lo, hi) = self.affine_scale;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("aug.affine_scale_min", "need 0 < min <= max"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::BadFraction(self.crop_fraction));
        }
        Ok(())
    }
}

const OUTSIDE: u32 = u32::MAX;

/// Bilinear inverse warp with fixed sampling positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    height: usize,
    width: usize,
    channels: usize,
    fill: f64,
    /// Per output location: four `(input location, weight)` taps.
    taps: Vec<[(u32, f64); 4]>,
}

impl Warp {
    /// Builds a warp from the output→input coordinate map `f(x, y)`.
    pub fn from_inverse_map(
        height: usize,
        width: usize,
        channels: usize,
        fill: f64,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(height * width);
        let inside = |x: i64, y: i64| {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                (y as usize * width + x as usize) as u32
            } else {
                OUTSIDE
            }
        };
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = f(x as f64, y as f64);
                if !sx.is_finite() || !sy.is_finite() {
                    taps.push([(OUTSIDE, 1.0), (OUTSIDE, 0.0), (OUTSIDE, 0.0), (OUTSIDE, 0.0)]);
                    continue;
                }
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                taps.push([
                    (inside(x0, y0), (1.0 - fx) * (1.0 - fy)),
                    (inside(x0 + 1, y0), fx * (1.0 - fy)),
                    (inside(x0, y0 + 1), (1.0 - fx) * fy),
                    (inside(x0 + 1, y0 + 1), fx * fy),
                ]);
            }
        }
        Self {
            height,
            width,
            channels,
            fill,
            taps,
        }
    }

    /// Output locations whose four taps are all inside the input.
    pub fn fully_inside(&self) -> Vec<bool> {
        self.taps
            .iter()
            .map(|t| t.iter().all(|(i, w)| *i != OUTSIDE || *w == 0.0))
            .collect()
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        if img.height() != self.height || img.width() != self.width || img.channels() != self.channels {
            return Err(Error::DimensionMismatch {
                what: "warp input",
                expected: self.in_dim(),
                got: img.pixels().len(),
            });
        }
        img.with_pixels(self.forward(img.pixels()))
    }
}

impl DiffMap for Warp {
    fn in_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
    fn out_dim(&self) -> usize {
        self.in_dim()
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; x.len()];
        for (loc, taps) in self.taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(src, w) in taps {
                    let v = if src == OUTSIDE {
                        self.fill
                    } else {
                        x[src as usize * c + ch]
                    };
                    acc += w * v;
                }
                out[loc * c + ch] = acc;
            }
        }
        out
    }
    fn vjp(&self, _x: &[f64], g: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut gx = vec![0.0; g.len()];
        for (loc, taps) in self.taps.iter().enumerate() {
            for &(src, w) in taps {
                if src == OUTSIDE || w == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    gx[src as usize * c + ch] += w * g[loc * c + ch];
                }
            }
        }
        gx
    }
}

/// A sampled view: the identity or a fixed warp.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewTransform {
    Identity,
    Warp(Warp),
}

impl ViewTransform {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            ViewTransform::Identity => Ok(img.clone()),
            ViewTransform::Warp(w) => w.apply(img),
        }
    }
}

type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn any_three_collinear(p: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| cross(p[t[0]], p[t[1]], p[t[2]]).abs() < 1e-9)
}

/// Eight-parameter homography `H` with `H(from[i]) = to[i]`, returned as a
/// point map. `None` when the linear system is singular.
pub fn solve_homography(from: &[Point; 4], to: &[Point; 4]) -> Option<impl Fn(f64, f64) -> Point> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(move |x: f64, y: f64| {
        let den = h[6] * x + h[7] * y + 1.0;
        (
            (h[0] * x + h[1] * y + h[2]) / den,
            (h[3] * x + h[4] * y + h[5]) / den,
        )
    })
}

fn image_corners(height: usize, width: usize) -> [Point; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Samples displaced corners and returns the corresponding warp; `None`
/// when no corner moved.
pub fn sample_perspective(
    height: usize,
    width: usize,
    channels: usize,
    distortion_scale: f64,
    fill: f64,
    rng: &mut Rng,
) -> Result<Option<Warp>> {
    let start = image_corners(height, width);
    let half_w = distortion_scale * (width / 2) as f64;
    let half_h = distortion_scale * (height / 2) as f64;
    for _ in 0..MAX_HOMOGRAPHY_ATTEMPTS {
        let mut d = [0.0; 8];
        for v in &mut d {
            *v = rng.random::<f64>();
        }
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        let end: [Point; 4] = [
            (d[0] * half_w, d[1] * half_h),
            (w - d[2] * half_w, d[3] * half_h),
            (w - d[4] * half_w, h - d[5] * half_h),
            (d[6] * half_w, h - d[7] * half_h),
        ];
        if end == start {
            return Ok(None);
        }
        if any_three_collinear(&end) {
            continue;
        }
        // Output pixels at the displaced corners read the original corners.
        if let Some(inv) = solve_homography(&end, &start) {
            return Ok(Some(Warp::from_inverse_map(height, width, channels, fill, inv)));
        }
    }
    Err(Error::DegenerateHomography {
        attempts: MAX_HOMOGRAPHY_ATTEMPTS,
    })
}

pub fn random_perspective(img: &Image, distortion_scale: f64, fill: f64, rng: &mut Rng) -> Result<Image> {
    if !(0.0..=1.0).contains(&distortion_scale) {
        return Err(Error::config("aug.distortion_scale", "must lie in [0, 1]"));
    }
    match sample_perspective(img.height(), img.width(), img.channels(), distortion_scale, fill, rng)? {
        None => Ok(img.clone()),
        Some(w) => w.apply(img),
    }
}

/// Parameters of a similarity-plus-translation map about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    /// Translation in pixels.
    pub translate: (f64, f64),
    pub scale: f64,
}

impl AffineParams {
    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.translate == (0.0, 0.0) && self.scale == 1.0
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_affine(height: usize, width: usize, config: &AugmentationConfig, rng: &mut Rng) -> AffineParams {
    let deg = config.affine_degrees;
    let t = config.affine_translate;
    AffineParams {
        angle_deg: uniform(rng, -deg, deg),
        translate: (
            uniform(rng, -t, t) * width as f64,
            uniform(rng, -t, t) * height as f64,
        ),
        scale: uniform(rng, config.affine_scale.0, config.affine_scale.1),
    }
}

/// Warp for `out = c + s·R(θ)(in − c) + t`, sampled through its inverse.
pub fn affine_warp(height: usize, width: usize, channels: usize, fill: f64, p: &AffineParams) -> Option<Warp> {
    if p.is_identity() {
        return None;
    }
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let (tx, ty) = p.translate;
    let s = p.scale;
    Some(Warp::from_inverse_map(height, width, channels, fill, move |x, y| {
        let (dx, dy) = (x - cx - tx, y - cy - ty);
        // rotate by −θ, then undo the scale
        let rx = cos * dx + sin * dy;
        let ry = -sin * dx + cos * dy;
        (rx / s + cx, ry / s + cy)
    }))
}

pub fn random_affine(img: &Image, config: &AugmentationConfig, rng: &mut Rng) -> Result<Image> {
    let p = sample_affine(img.height(), img.width(), config, rng);
    match affine_warp(img.height(), img.width(), img.channels(), config.fill_value, &p) {
        None => Ok(img.clone()),
        Some(w) => w.apply(img),
    }
}

pub fn sample_crop(
    height: usize,
    width: usize,
    channels: usize,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Warp> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    let (ey, ex) = ((height - 1) as f64, (width - 1) as f64);
    let (ly, lx) = (fraction * ey, fraction * ex);
    let oy = rng.random::<f64>() * (ey - ly);
    let ox = rng.random::<f64>() * (ex - lx);
    Ok(Warp::from_inverse_map(height, width, channels, 0.0, move |x, y| {
        (ox + x * lx / ex, oy + y * ly / ey)
    }))
}

pub fn random_crop_resize(img: &Image, config: &AugmentationConfig, rng: &mut Rng) -> Result<Image> {
    sample_crop(img.height(), img.width(), img.channels(), config.crop_fraction, rng)?.apply(img)
}

/// The transform for one `(step, view)` coordinate.
pub fn sample_view(
    height: usize,
    width: usize,
    channels: usize,
    config: &AugmentationConfig,
    step: u64,
    view: usize,
) -> Result<ViewTransform> {
    let mut rng = rng_for(config.seed_stream, &[stream::VIEW, step, view as u64]);
    let warp = match config.kind {
        AugKind::None => None,
        AugKind::Perspective => sample_perspective(
            height,
            width,
            channels,
            config.distortion_scale,
            config.fill_value,
            &mut rng,
        )?,
        AugKind::Affine => {
            let p = sample_affine(height, width, config, &mut rng);
            affine_warp(height, width, channels, config.fill_value, &p)
        }
        AugKind::CropResize => Some(sample_crop(height, width, channels, config.crop_fraction, &mut rng)?),
    };
    Ok(warp.map_or(ViewTransform::Identity, ViewTransform::Warp))
}

pub fn view_transforms(
    height: usize,
    width: usize,
    channels: usize,
    config: &AugmentationConfig,
    step: u64,
) -> Result<Vec<ViewTransform>> {
    config.validate()?;
    (0..config.n_views)
        .map(|v| sample_view(height, width, channels, config, step, v))
        .collect()
}

/// `n_views` augmented copies of `img` for training step `step`.
pub fn make_views(img: &Image, config: &AugmentationConfig, step: u64) -> Result<Vec<Image>> {
    view_transforms(img.height(), img.width(), img.channels(), config, step)?
        .iter()
        .map(|t| t.apply(img))
        .collect()
}
