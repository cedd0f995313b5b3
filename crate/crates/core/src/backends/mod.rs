//! Frozen models consumed by the editing pipeline: a text encoder and an
//! image encoder sharing one embedding space, a latent-conditioned generator,
//! and the optional identity and perceptual networks used as regularisers.
//!
//! Every backend is immutable once built. Differentiable members implement
//! [`DiffMap`] so the training tape can pull gradients through them.

mod latent_file;
mod store;
pub mod toy;

use sha2::{Digest, Sha256};

use crate::autodiff::DiffMap;
use crate::error::{check_dim, Error, Result};
use crate::geometry::ClipEmbedding;
use crate::rng::{rng_for, stream};

pub use latent_file::{read_latents, write_latents, write_latents_text, LATENT_MAGIC};
pub use store::{load_suite, save_suite, SUITE_FILES};

/// Shape record shared by all members of a suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub dim_clip: usize,
    pub dim_w: usize,
    pub n_latent: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    /// Desk-scale dims used throughout the tests.
    pub const TOY: Dims = Dims {
        dim_clip: 16,
        dim_w: 8,
        n_latent: 4,
        height: 16,
        width: 16,
        channels: 3,
    };

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn latent_len(&self) -> usize {
        self.n_latent * self.dim_w
    }

    pub fn validate(&self) -> Result<()> {
        let small = [
            ("dim_clip", self.dim_clip),
            ("dim_w", self.dim_w),
            ("n_latent", self.n_latent),
        ]
        .into_iter()
        .find(|(_, v)| *v < 2);
        if let Some((name, v)) = small {
            return Err(Error::BadDims(format!("{name} = {v}, must be >= 2")));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::BadDims(format!(
                "image {}x{} is smaller than 4x4",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::BadDims(format!(
                "channels = {}, must be 1 or 3",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Row-major `H × W × C` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

// Bilinear resampling can overshoot the unit interval by a few ulps.
const RANGE_SLACK: f64 = 1e-9;

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than 4x4"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels")));
        }
        check_dim("image pixels", height * width * channels, pixels.len())?;
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < -RANGE_SLACK || **v > 1.0 + RANGE_SLACK)
        {
            return Err(Error::InvalidImage(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Same geometry, new pixel buffer.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, pixels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// A code in the generator's extended latent space, `n_latent × dim_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    n_latent: usize,
    dim_w: usize,
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(n_latent: usize, dim_w: usize, values: Vec<f64>) -> Result<Self> {
        if n_latent == 0 || dim_w == 0 {
            return Err(Error::BadDims("latent code with an empty axis".into()));
        }
        check_dim("latent code", n_latent * dim_w, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadDims("non-finite latent entry".into()));
        }
        Ok(Self {
            n_latent,
            dim_w,
            values,
        })
    }

    pub fn zeros(n_latent: usize, dim_w: usize) -> Self {
        Self {
            n_latent,
            dim_w,
            values: vec![0.0; n_latent * dim_w],
        }
    }

    /// Repeats one `dim_w` row across all layers.
    pub fn broadcast(row: &[f64], n_latent: usize) -> Result<Self> {
        let values = (0..n_latent).flat_map(|_| row.iter().copied()).collect();
        Self::new(n_latent, row.len(), values)
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim_w..(i + 1) * self.dim_w]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_latent, self.dim_w)
    }

    pub fn check_shape(&self, dims: &Dims) -> Result<()> {
        check_dim("latent rows", dims.n_latent, self.n_latent)?;
        check_dim("latent width", dims.dim_w, self.dim_w)
    }
}

/// Common surface of every frozen backend.
pub trait Frozen: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn name(&self) -> String;
    /// All weights, in a fixed order, for checksumming and persistence.
    fn parameters(&self) -> Vec<&[f64]>;
}

pub trait TextEncoder: Frozen {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Flattened pixels to embedding.
pub trait ImageEncoder: Frozen + DiffMap {}

/// Flattened latent code to flattened pixels.
pub trait Generator: Frozen + DiffMap {
    fn noise_dim(&self) -> usize;
    /// Mapping network: Gaussian noise to one `dim_w` row.
    fn map_noise(&self, z: &[f64]) -> Vec<f64>;
}

/// Flattened pixels to an identity descriptor.
pub trait IdentityNet: Frozen + DiffMap {}

/// Flattened pixels to a feature tensor.
pub trait PerceptualNet: Frozen + DiffMap {
    /// `(rows, cols, features)` of the output tensor.
    fn feature_shape(&self) -> (usize, usize, usize);
}

/// The frozen models for one run.
pub struct BackendSuite {
    pub dims: Dims,
    text: Box<dyn TextEncoder>,
    image: Box<dyn ImageEncoder>,
    generator: Box<dyn Generator>,
    identity: Option<Box<dyn IdentityNet>>,
    perceptual: Option<Box<dyn PerceptualNet>>,
}

impl std::fmt::Debug for BackendSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSuite")
            .field("dims", &self.dims)
            .field("text", &self.text.name())
            .field("image", &self.image.name())
            .field("generator", &self.generator.name())
            .field("identity", &self.identity.as_ref().map(|b| b.name()))
            .field("perceptual", &self.perceptual.as_ref().map(|b| b.name()))
            .finish()
    }
}

impl BackendSuite {
    pub fn new(
        dims: Dims,
        text: Box<dyn TextEncoder>,
        image: Box<dyn ImageEncoder>,
        generator: Box<dyn Generator>,
        identity: Option<Box<dyn IdentityNet>>,
        perceptual: Option<Box<dyn PerceptualNet>>,
    ) -> Result<Self> {
        dims.validate()?;
        check_dim("text encoder output", dims.dim_clip, text.dim())?;
        check_dim("image encoder input", dims.pixels(), image.in_dim())?;
        check_dim("image encoder output", dims.dim_clip, image.out_dim())?;
        check_dim("generator input", dims.latent_len(), generator.in_dim())?;
        check_dim("generator output", dims.pixels(), generator.out_dim())?;
        if let Some(id) = &identity {
            check_dim("identity input", dims.pixels(), id.in_dim())?;
        }
        if let Some(p) = &perceptual {
            check_dim("perceptual input", dims.pixels(), p.in_dim())?;
        }
        Ok(Self {
            dims,
            text,
            image,
            generator,
            identity,
            perceptual,
        })
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }

    pub fn image_encoder(&self) -> &dyn ImageEncoder {
        self.image.as_ref()
    }

    pub fn generator(&self) -> &dyn Generator {
        self.generator.as_ref()
    }

    pub fn identity_net(&self) -> Result<&dyn IdentityNet> {
        self.identity
            .as_deref()
            .ok_or(Error::MissingBackend("identity network"))
    }

    pub fn perceptual_net(&self) -> Result<&dyn PerceptualNet> {
        self.perceptual
            .as_deref()
            .ok_or(Error::MissingBackend("perceptual network"))
    }

    pub fn has_identity(&self) -> bool {
        self.identity.is_some()
    }

    pub fn has_perceptual(&self) -> bool {
        self.perceptual.is_some()
    }

    pub fn without_identity(mut self) -> Self {
        self.identity = None;
        self
    }

    pub fn without_perceptual(mut self) -> Self {
        self.perceptual = None;
        self
    }

    pub fn encode_text(&self, prompt: &str) -> Result<ClipEmbedding> {
        if prompt.is_empty() {
            return Err(Error::BackendFailure("empty prompt".into()));
        }
        let v = self.text.encode(prompt)?;
        check_dim("text embedding", self.dims.dim_clip, v.len())?;
        ClipEmbedding::new(v)
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        check_dim("image height", self.dims.height, img.height())?;
        check_dim("image width", self.dims.width, img.width())?;
        check_dim("image channels", self.dims.channels, img.channels())
    }

    pub fn encode_image(&self, img: &Image) -> Result<ClipEmbedding> {
        self.check_image(img)?;
        ClipEmbedding::new(self.image.forward(img.pixels()))
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        w.check_shape(&self.dims)?;
        let px = self.generator.forward(w.values());
        Image::new(self.dims.height, self.dims.width, self.dims.channels, px)
            .map_err(|e| Error::BackendFailure(format!("generator output: {e}")))
    }

    /// `z ~ N(0, I)` from `seed`, mapped to one row and broadcast to all layers.
    pub fn sample_latent(&self, seed: u64) -> Result<LatentCode> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng_for(seed, &[stream::LATENT]);
        let z: Vec<f64> = (0..self.generator.noise_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let row = self.generator.map_noise(&z);
        check_dim("mapped latent", self.dims.dim_w, row.len())?;
        LatentCode::broadcast(&row, self.dims.n_latent)
    }

    pub fn identity_embed(&self, img: &Image) -> Result<Vec<f64>> {
        let net = self.identity_net()?;
        self.check_image(img)?;
        Ok(net.forward(img.pixels()))
    }

    pub fn perceptual_features(&self, img: &Image) -> Result<Vec<f64>> {
        let net = self.perceptual_net()?;
        self.check_image(img)?;
        Ok(net.forward(img.pixels()))
    }

    fn members(&self) -> Vec<&dyn Frozen> {
        let mut out: Vec<&dyn Frozen> = vec![
            self.text.as_ref() as &dyn Frozen,
            self.image.as_ref() as &dyn Frozen,
            self.generator.as_ref() as &dyn Frozen,
        ];
        if let Some(id) = &self.identity {
            out.push(id.as_ref() as &dyn Frozen);
        }
        if let Some(p) = &self.perceptual {
            out.push(p.as_ref() as &dyn Frozen);
        }
        out
    }

    /// Backend names, in suite order.
    pub fn identifiers(&self) -> Vec<String> {
        self.members().iter().map(|m| m.name()).collect()
    }

    /// SHA-256 over every backend weight, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in self.members() {
            h.update(m.name().as_bytes());
            for p in m.parameters() {
                h.update((p.len() as u64).to_le_bytes());
                for v in p {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub use toy::make_toy_suite;
