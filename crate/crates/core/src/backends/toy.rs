//! Deterministic, seeded stand-ins for the pretrained models. They are small
//! enough to finite-difference and keep every pipeline stage exercisable on a
//! laptop.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{
    BackendSuite, Dims, Frozen, Generator, IdentityNet, ImageEncoder, PerceptualNet, TextEncoder,
};
use crate::autodiff::DiffMap;
use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_for, stream, Rng};

const TEXT_BINS: usize = 256;
const PERCEPTUAL_FEATURES: usize = 8;
const NOISE_STD: f64 = 0.05;
const MAPPING_SLOPE: f64 = 0.2;

fn gaussian(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>()
}

fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|o| w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &[f64], g: &[f64], inp: usize) -> Vec<f64> {
    let mut out = vec![0.0; inp];
    for (o, &go) in g.iter().enumerate() {
        for (acc, &wv) in out.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
            *acc += go * wv;
        }
    }
    out
}

/// Normalised byte histogram of a prompt.
pub fn byte_histogram(prompt: &str) -> Vec<f64> {
    let mut h = vec![0.0; TEXT_BINS];
    let bytes = prompt.as_bytes();
    for &b in bytes {
        h[b as usize] += 1.0;
    }
    let n = bytes.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Random linear map over the byte histogram of the prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEncoder {
    pub(crate) dim: usize,
    pub(crate) weight: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self {
            dim,
            weight: gaussian(rng, dim * TEXT_BINS, 1.0),
        }
    }
}

impl Frozen for ToyTextEncoder {
    fn name(&self) -> String {
        format!("toy-text-encoder/{}", self.dim)
    }
    fn parameters(&self) -> Vec<&[f64]> {
        vec![&self.weight]
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(matvec(&self.weight, &byte_histogram(prompt), self.dim))
    }
}

/// Dense linear map without bias, optionally applied to `x − center`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub(crate) label: &'static str,
    pub(crate) out: usize,
    pub(crate) inp: usize,
    pub(crate) center: f64,
    pub(crate) weight: Vec<f64>,
}

impl LinearMap {
    pub fn random(label: &'static str, out: usize, inp: usize, center: f64, rng: &mut Rng) -> Self {
        Self {
            label,
            out,
            inp,
            center,
            weight: gaussian(rng, out * inp, 1.0 / (inp as f64).sqrt()),
        }
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
}

impl DiffMap for LinearMap {
    fn in_dim(&self) -> usize {
        self.inp
    }
    fn out_dim(&self) -> usize {
        self.out
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        if self.center == 0.0 {
            matvec(&self.weight, x, self.out)
        } else {
            let xc: Vec<f64> = x.iter().map(|v| v - self.center).collect();
            matvec(&self.weight, &xc, self.out)
        }
    }
    fn vjp(&self, _x: &[f64], g: &[f64]) -> Vec<f64> {
        matvec_t(&self.weight, g, self.inp)
    }
}

impl Frozen for LinearMap {
    fn name(&self) -> String {
        format!("toy-{}/{}x{}", self.label, self.out, self.inp)
    }
    fn parameters(&self) -> Vec<&[f64]> {
        vec![&self.weight]
    }
}

impl ImageEncoder for LinearMap {}
impl IdentityNet for LinearMap {}

/// Non-overlapping `stride × stride` patches each mapped linearly to a small
/// feature vector with shared weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPerceptual {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) channels: usize,
    pub(crate) stride: usize,
    pub(crate) features: usize,
    pub(crate) weight: Vec<f64>,
}

impl ToyPerceptual {
    pub fn new(dims: &Dims, stride: usize, rng: &mut Rng) -> Result<Self> {
        if stride == 0 || !dims.height.is_multiple_of(stride) || !dims.width.is_multiple_of(stride) {
            return Err(Error::BadDims(format!(
                "stride {stride} does not divide {}x{}",
                dims.height, dims.width
            )));
        }
        let patch = stride * stride * dims.channels;
        Ok(Self {
            height: dims.height,
            width: dims.width,
            channels: dims.channels,
            stride,
            features: PERCEPTUAL_FEATURES,
            weight: gaussian(rng, PERCEPTUAL_FEATURES * patch, 1.0 / (patch as f64).sqrt()),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    fn patch_index(&self, row: usize, col: usize, k: usize) -> usize {
        // k enumerates (dy, dx, c) inside the patch
        let c = k % self.channels;
        let dx = (k / self.channels) % self.stride;
        let dy = k / (self.channels * self.stride);
        let y = row * self.stride + dy;
        let x = col * self.stride + dx;
        (y * self.width + x) * self.channels + c
    }
}

impl DiffMap for ToyPerceptual {
    fn in_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
    fn out_dim(&self) -> usize {
        let (r, c, f) = self.feature_shape();
        r * c * f
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols, feats) = self.feature_shape();
        let patch = self.stride * self.stride * self.channels;
        let mut out = Vec::with_capacity(rows * cols * feats);
        for r in 0..rows {
            for c in 0..cols {
                let p: Vec<f64> = (0..patch).map(|k| x[self.patch_index(r, c, k)]).collect();
                out.extend(matvec(&self.weight, &p, feats));
            }
        }
        out
    }
    fn vjp(&self, _x: &[f64], g: &[f64]) -> Vec<f64> {
        let (rows, cols, feats) = self.feature_shape();
        let patch = self.stride * self.stride * self.channels;
        let mut gx = vec![0.0; self.in_dim()];
        for r in 0..rows {
            for c in 0..cols {
                let base = (r * cols + c) * feats;
                let gp = matvec_t(&self.weight, &g[base..base + feats], patch);
                for (k, v) in gp.into_iter().enumerate() {
                    gx[self.patch_index(r, c, k)] += v;
                }
            }
        }
        gx
    }
}

impl Frozen for ToyPerceptual {
    fn name(&self) -> String {
        format!("toy-perceptual/stride{}", self.stride)
    }
    fn parameters(&self) -> Vec<&[f64]> {
        vec![&self.weight]
    }
}

impl PerceptualNet for ToyPerceptual {
    fn feature_shape(&self) -> (usize, usize, usize) {
        (self.height / self.stride, self.width / self.stride, self.features)
    }
}

/// Side length of the render grid for layer `k`: coarse layers draw at low
/// resolution, the last layer at full resolution.
pub fn layer_resolution(k: usize, n_latent: usize, full: usize) -> usize {
    if n_latent <= 1 {
        return full;
    }
    let octaves = ((full as f64) / 2.0).log2().max(0.0);
    let frac = k as f64 / (n_latent - 1) as f64;
    let s = 2.0 * 2f64.powf(frac * octaves);
    (s.round() as usize).clamp(2, full)
}

/// Align-corners bilinear taps for resampling `src` points onto `dst` points.
fn taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return [(0, 1.0), (0, 0.0)];
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

/// Sum of per-layer linear renders, each bilinearly upsampled to full size,
/// plus frozen per-layer noise, squashed into `(0, 1)` by a logistic.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub(crate) dims: Dims,
    /// Mapping network weight, `dim_w × dim_w`.
    pub(crate) mapping: Vec<f64>,
    /// Per layer: the dense render matrix `pixels × dim_w` (upsampling folded in).
    pub(crate) render: Vec<Vec<f64>>,
    /// Frozen noise, summed over layers, `pixels`.
    pub(crate) noise: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(dims: &Dims, rng: &mut Rng) -> Self {
        let (h, w, c, dw) = (dims.height, dims.width, dims.channels, dims.dim_w);
        let mapping = gaussian(rng, dw * dw, (2.0 / dw as f64).sqrt());
        let gain = 1.5 / ((dw * dims.n_latent) as f64).sqrt();
        let mut render = Vec::with_capacity(dims.n_latent);
        for k in 0..dims.n_latent {
            let sh = layer_resolution(k, dims.n_latent, h);
            let sw = layer_resolution(k, dims.n_latent, w);
            let low = gaussian(rng, sh * sw * c * dw, gain);
            let (ty, tx) = (taps(sh, h), taps(sw, w));
            let mut dense = vec![0.0; h * w * c * dw];
            for (y, ty) in ty.iter().enumerate() {
                for (x, tx) in tx.iter().enumerate() {
                    for &(sy, wy) in ty {
                        for &(sx, wx) in tx {
                            let wt = wy * wx;
                            if wt == 0.0 {
                                continue;
                            }
                            for ch in 0..c {
                                let dst = ((y * w + x) * c + ch) * dw;
                                let src = ((sy * sw + sx) * c + ch) * dw;
                                for j in 0..dw {
                                    dense[dst + j] += wt * low[src + j];
                                }
                            }
                        }
                    }
                }
            }
            render.push(dense);
        }
        let noise = (0..dims.n_latent)
            .map(|_| gaussian(rng, h * w * c, NOISE_STD))
            .fold(vec![0.0; h * w * c], |acc, n| {
                acc.iter().zip(&n).map(|(a, b)| a + b).collect()
            });
        Self {
            dims: *dims,
            mapping,
            render,
            noise,
        }
    }

    /// Pre-activation image: the per-layer contributions summed with noise.
    pub fn pre_activation(&self, w: &[f64]) -> Vec<f64> {
        let dw = self.dims.dim_w;
        let mut pre = self.noise.clone();
        for (k, r) in self.render.iter().enumerate() {
            let row = &w[k * dw..(k + 1) * dw];
            for (p, acc) in pre.iter_mut().enumerate() {
                *acc += r[p * dw..(p + 1) * dw]
                    .iter()
                    .zip(row)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        pre
    }

    /// Layer `k`'s render matrix, `pixels × dim_w` row-major.
    pub fn layer_render(&self, k: usize) -> &[f64] {
        &self.render[k]
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DiffMap for ToyGenerator {
    fn in_dim(&self) -> usize {
        self.dims.latent_len()
    }
    fn out_dim(&self) -> usize {
        self.dims.pixels()
    }
    fn forward(&self, w: &[f64]) -> Vec<f64> {
        self.pre_activation(w).into_iter().map(logistic).collect()
    }
    fn vjp(&self, w: &[f64], g: &[f64]) -> Vec<f64> {
        let dw = self.dims.dim_w;
        let gpre: Vec<f64> = self
            .pre_activation(w)
            .into_iter()
            .zip(g)
            .map(|(p, gv)| {
                let s = logistic(p);
                gv * s * (1.0 - s)
            })
            .collect();
        let mut gw = vec![0.0; self.in_dim()];
        for (k, r) in self.render.iter().enumerate() {
            let out = &mut gw[k * dw..(k + 1) * dw];
            for (p, &gp) in gpre.iter().enumerate() {
                for (o, &rv) in out.iter_mut().zip(&r[p * dw..(p + 1) * dw]) {
                    *o += gp * rv;
                }
            }
        }
        gw
    }
}

impl Frozen for ToyGenerator {
    fn name(&self) -> String {
        let d = &self.dims;
        format!(
            "toy-generator/{}x{}->{}x{}x{}",
            d.n_latent, d.dim_w, d.height, d.width, d.channels
        )
    }
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = vec![&self.mapping];
        p.extend(self.render.iter().map(|r| r.as_slice()));
        p.push(&self.noise);
        p
    }
}

impl Generator for ToyGenerator {
    fn noise_dim(&self) -> usize {
        self.dims.dim_w
    }
    fn map_noise(&self, z: &[f64]) -> Vec<f64> {
        matvec(&self.mapping, z, self.dims.dim_w)
            .into_iter()
            .map(|v| if v >= 0.0 { v } else { MAPPING_SLOPE * v })
            .collect()
    }
}

/// Largest of 4, 2, 1 dividing both image sides.
pub fn default_stride(dims: &Dims) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|s| dims.height.is_multiple_of(*s) && dims.width.is_multiple_of(*s))
        .unwrap_or(1)
}

/// Builds a complete toy suite (all five members) from one seed.
pub fn make_toy_suite(seed: u64, dims: Dims) -> Result<BackendSuite> {
    dims.validate()?;
    let mut rng = rng_for(seed, &[stream::BACKEND]);
    let text = ToyTextEncoder::new(dims.dim_clip, &mut rng);
    let image = LinearMap::random("image-encoder", dims.dim_clip, dims.pixels(), 0.0, &mut rng);
    let generator = ToyGenerator::new(&dims, &mut rng);
    let identity = LinearMap::random("identity", dims.dim_clip, dims.pixels(), 0.5, &mut rng);
    let perceptual = ToyPerceptual::new(&dims, default_stride(&dims), &mut rng)?;
    // consume one draw so later additions do not shift existing weights
    let _: u64 = rng.random();
    BackendSuite::new(
        dims,
        Box::new(text),
        Box::new(image),
        Box::new(generator),
        Some(Box::new(identity)),
        Some(Box::new(perceptual)),
    )
}

/// Checks that a toy render matrix has the expected size.
pub(crate) fn check_render(dims: &Dims, render: &[Vec<f64>]) -> Result<()> {
    check_dim("render layers", dims.n_latent, render.len())?;
    for r in render {
        check_dim("render matrix", dims.pixels() * dims.dim_w, r.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Image, LatentCode};

    fn suite() -> BackendSuite {
        make_toy_suite(3, Dims::TOY).unwrap()
    }

    fn test_image(dims: &Dims, phase: f64) -> Image {
        let px = (0..dims.pixels())
            .map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin())
            .collect();
        Image::new(dims.height, dims.width, dims.channels, px).unwrap()
    }

    #[test]
    fn text_encoder_deterministic_and_distinct() {
        let s = suite();
        let a = s.encode_text("a photo of a Dog.").unwrap();
        let b = s.encode_text("a photo of a Dog.").unwrap();
        assert_eq!(a, b);
        let dog = s.encode_text("Dog").unwrap();
        let cat = s.encode_text("Cat").unwrap();
        assert_ne!(dog, cat);
        assert!(s.encode_text("").is_err());
    }

    #[test]
    fn image_encoder_is_linear() {
        let s = suite();
        let img = test_image(&s.dims, 0.0);
        let half = img
            .with_pixels(img.pixels().iter().map(|v| 0.5 * v).collect())
            .unwrap();
        let e = s.encode_image(&img).unwrap();
        let eh = s.encode_image(&half).unwrap();
        for (a, b) in e.values().iter().zip(eh.values()) {
            assert!((0.5 * a - b).abs() < 1e-12);
        }
        assert_eq!(e, s.encode_image(&img).unwrap());
    }

    #[test]
    fn encoders_share_dimension() {
        let s = suite();
        let t = s.encode_text("face").unwrap();
        let i = s.encode_image(&test_image(&s.dims, 1.0)).unwrap();
        assert_eq!(t.dim(), i.dim());
        assert_eq!(t.dim(), s.dims.dim_clip);
    }

    #[test]
    fn encode_image_rejects_wrong_dims() {
        let s = suite();
        let img = Image::filled(8, 8, 3, 0.5).unwrap();
        assert!(matches!(
            s.encode_image(&img),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn synthesize_deterministic_and_shaped() {
        let s = suite();
        let w = s.sample_latent(5).unwrap();
        let a = s.synthesize(&w).unwrap();
        let b = s.synthesize(&w).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.channels()), (16, 16, 3));
        let bad = LatentCode::zeros(3, 8);
        assert!(s.synthesize(&bad).is_err());
    }

    #[test]
    fn layer_perturbation_moves_only_its_contribution() {
        let gen = ToyGenerator::new(&Dims::TOY, &mut rng_for(11, &[]));
        let w = suite().sample_latent(1).unwrap();
        let dw = Dims::TOY.dim_w;
        for k in 0..Dims::TOY.n_latent {
            let mut wp = w.values().to_vec();
            wp[k * dw + 2] += 0.3;
            let pre0 = gen.pre_activation(w.values());
            let pre1 = gen.pre_activation(&wp);
            // Analytic: Δpre = 0.3 · render_k[:, 2]
            let r = gen.layer_render(k);
            for p in 0..Dims::TOY.pixels() {
                let expected = 0.3 * r[p * dw + 2];
                assert!((pre1[p] - pre0[p] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_layers_render_smoothly() {
        assert_eq!(layer_resolution(0, 4, 16), 2);
        assert_eq!(layer_resolution(3, 4, 16), 16);
        assert_eq!(layer_resolution(0, 18, 1024), 2);
        assert_eq!(layer_resolution(17, 18, 1024), 1024);
    }

    #[test]
    fn sample_latent_contract() {
        let s = suite();
        let a = s.sample_latent(0).unwrap();
        assert_eq!(a, s.sample_latent(0).unwrap());
        assert_ne!(a, s.sample_latent(1).unwrap());
        assert!((1..a.n_latent()).all(|i| a.row(i) == a.row(0)));
    }

    #[test]
    fn identity_and_perceptual() {
        let s = suite();
        let img = test_image(&s.dims, 0.3);
        let r = s.identity_embed(&img).unwrap();
        assert_eq!(r, s.identity_embed(&img).unwrap());
        let c = crate::geometry::cosine_similarity(&r, &r).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        let f = s.perceptual_features(&img).unwrap();
        assert_eq!(f, s.perceptual_features(&img).unwrap());
        let (rows, cols, feats) = s.perceptual_net().unwrap().feature_shape();
        assert_eq!((rows, cols), (16 / 4, 16 / 4));
        assert_eq!(f.len(), rows * cols * feats);

        let bare = suite().without_identity().without_perceptual();
        assert!(matches!(bare.identity_embed(&img), Err(Error::MissingBackend(_))));
        assert!(matches!(
            bare.perceptual_features(&img),
            Err(Error::MissingBackend(_))
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = make_toy_suite(42, Dims::TOY).unwrap();
        let b = make_toy_suite(42, Dims::TOY).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), make_toy_suite(43, Dims::TOY).unwrap().checksum());
        assert_eq!(a.dims, Dims::TOY);
    }

    #[test]
    fn bad_dims_rejected() {
        let mut d = Dims::TOY;
        d.dim_clip = 1;
        assert!(matches!(make_toy_suite(0, d), Err(Error::BadDims(_))));
    }
}
