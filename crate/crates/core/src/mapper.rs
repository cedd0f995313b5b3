//! The trainable editing network.
//!
//! Three stages turn a target-text embedding `e_t` and a latent code `w` into
//! the residual `Δw`:
//!
//! 1. a text mapper with one 4-layer network per latent row, projecting `e_t`
//!    into that row's latent space;
//! 2. a fusion layer, shared across rows, applied to `[projected_i ; w_i]`;
//! 3. a residual mapper with separate coarse, medium and fine 4-block
//!    networks, each block being row normalisation, a dense layer and a leaky
//!    rectifier.
//!
//! With the final layer of every residual group zeroed, `Δw = 0` and editing
//! is the identity.

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::backends::LatentCode;
use crate::error::{check_dim, Error, Result};
use crate::geometry::ClipEmbedding;
use crate::rng::{rng_for, stream, Rng};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ROW_NORM_EPS: f64 = 1e-8;
pub const LAYERS_PER_NETWORK: usize = 4;
pub const GROUP_NAMES: [&str; 3] = ["coarse", "medium", "fine"];

/// Shapes the mapper is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapperDims {
    pub dim_clip: usize,
    pub dim_w: usize,
    pub n_latent: usize,
}

impl MapperDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim_clip < 1 || self.dim_w < 1 || self.n_latent < 1 {
            return Err(Error::BadDims(format!("mapper dims {self:?}")));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (c, w, n) = (self.dim_clip, self.dim_w, self.n_latent);
        let square = w * w + w;
        let text_block = (c * w + w) + (LAYERS_PER_NETWORK - 1) * square;
        let fusion = 2 * w * w + w;
        n * text_block + fusion + 3 * LAYERS_PER_NETWORK * square
    }
}

impl From<crate::backends::Dims> for MapperDims {
    fn from(d: crate::backends::Dims) -> Self {
        Self {
            dim_clip: d.dim_clip,
            dim_w: d.dim_w,
            n_latent: d.n_latent,
        }
    }
}

/// Coarse / medium / fine row ranges. For 18 rows this is 0–3 / 4–7 / 8–17;
/// other depths scale the boundaries proportionally.
pub fn group_ranges(n_latent: usize) -> [Range<usize>; 3] {
    let n = n_latent;
    if n < 3 {
        let a = n.min(1);
        let b = n.min(2);
        return [0..a, a..b, b..n];
    }
    let scaled = |k: f64| ((k * n as f64) / 18.0).round() as usize;
    let coarse = scaled(4.0).clamp(1, n - 2);
    let medium = scaled(8.0).clamp(coarse + 1, n - 1);
    [0..coarse, coarse..medium, medium..n]
}

/// Dense layer with `weight` stored row-major as `out × inp`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(out: usize, inp: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (inp as f64).sqrt();
        let weight = (0..out * inp)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Self {
            out,
            inp,
            weight,
            bias: vec![0.0; out],
        }
    }

    fn zero(&mut self) {
        self.weight.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// All trainable tensors of the editing network.
#[derive(Clone, Debug, PartialEq)]
pub struct MapperParams {
    dims: MapperDims,
    /// `n_latent` networks of 4 layers; the first maps `dim_clip → dim_w`.
    pub text_mapper: Vec<Vec<Linear>>,
    /// `2·dim_w → dim_w`, shared by every row.
    pub fusion: Linear,
    /// Coarse, medium and fine residual networks.
    pub latent_mapper: [Vec<Linear>; 3],
}

/// `n_latent × dim_w` output of the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding(pub LatentCode);

/// Tape handles for every parameter tensor, in [`MapperParams::tensors`] order.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl MapperParams {
    /// Seeded init: dense weights ~ N(0, 1/fan_in), zero biases. When
    /// `zero_init_last` is set, the last layer of each residual group is zero.
    pub fn init(seed: u64, dims: MapperDims, zero_init_last: bool) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let (c, w) = (dims.dim_clip, dims.dim_w);
        let text_mapper = (0..dims.n_latent)
            .map(|_| {
                (0..LAYERS_PER_NETWORK)
                    .map(|l| Linear::init(w, if l == 0 { c } else { w }, &mut rng))
                    .collect()
            })
            .collect();
        let fusion = Linear::init(w, 2 * w, &mut rng);
        let mut latent_mapper: [Vec<Linear>; 3] = std::array::from_fn(|_| {
            (0..LAYERS_PER_NETWORK)
                .map(|_| Linear::init(w, w, &mut rng))
                .collect()
        });
        if zero_init_last {
            for g in &mut latent_mapper {
                g.last_mut().unwrap().zero();
            }
        }
        Ok(Self {
            dims,
            text_mapper,
            fusion,
            latent_mapper,
        })
    }

    /// Adds `epsilon · N(0, 1)` to the last layer of every residual group.
    pub fn perturb_last_layers(&mut self, seed: u64, epsilon: f64) {
        if epsilon == 0.0 {
            return;
        }
        let mut rng = rng_for(seed, &[stream::EPSILON]);
        for g in &mut self.latent_mapper {
            let last = g.last_mut().unwrap();
            for v in last.weight.iter_mut().chain(last.bias.iter_mut()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += epsilon * z;
            }
        }
    }

    pub fn dims(&self) -> MapperDims {
        self.dims
    }

    pub fn groups(&self) -> [Range<usize>; 3] {
        group_ranges(self.dims.n_latent)
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (i, block) in self.text_mapper.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                out.push((format!("text_mapper.{i}.fc{l}"), layer));
            }
        }
        out.push(("fusion".to_string(), &self.fusion));
        for (name, g) in GROUP_NAMES.iter().zip(&self.latent_mapper) {
            for (l, layer) in g.iter().enumerate() {
                out.push((format!("latent_mapper.{name}.fc{l}"), layer));
            }
        }
        out
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weight.as_slice()),
                    (format!("{name}.bias"), l.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable tensors in [`tensors`](Self::tensors) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for block in &mut self.text_mapper {
            for l in block {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.fusion.weight);
        out.push(&mut self.fusion.bias);
        for g in &mut self.latent_mapper {
            for l in g {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter tensor as a tape leaf.
    pub fn register<'a>(&self, tape: &mut Tape<'a>) -> ParamVars {
        ParamVars(
            self.tensors()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.to_vec()))
                .collect(),
        )
    }

    fn layer_index(&self, which: LayerRef) -> usize {
        let n = self.dims.n_latent;
        match which {
            LayerRef::Text(i, l) => i * LAYERS_PER_NETWORK + l,
            LayerRef::Fusion => n * LAYERS_PER_NETWORK,
            LayerRef::Latent(g, l) => n * LAYERS_PER_NETWORK + 1 + g * LAYERS_PER_NETWORK + l,
        }
    }

    fn apply<'a>(&self, tape: &mut Tape<'a>, pv: &ParamVars, which: LayerRef, x: Var) -> Result<Var> {
        let k = self.layer_index(which);
        tape.linear(pv.0[2 * k], pv.0[2 * k + 1], x)
    }

    /// Per-row projections of `e_t`, concatenated row-major.
    pub fn text_mapper_tape<'a>(&self, tape: &mut Tape<'a>, pv: &ParamVars, e_t: Var) -> Result<Var> {
        check_dim("text embedding", self.dims.dim_clip, tape.value(e_t).len())?;
        let mut rows = Vec::with_capacity(self.dims.n_latent);
        for i in 0..self.dims.n_latent {
            let mut h = e_t;
            for l in 0..LAYERS_PER_NETWORK {
                h = self.apply(tape, pv, LayerRef::Text(i, l), h)?;
                if l + 1 < LAYERS_PER_NETWORK {
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
            }
            rows.push(h);
        }
        Ok(tape.concat(&rows))
    }

    pub fn fuse_tape<'a>(&self, tape: &mut Tape<'a>, pv: &ParamVars, projected: Var, w: Var) -> Result<Var> {
        let (n, dw) = (self.dims.n_latent, self.dims.dim_w);
        check_dim("projected embedding", n * dw, tape.value(projected).len())?;
        check_dim("latent code", n * dw, tape.value(w).len())?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let p = tape.slice(projected, i * dw, dw);
            let wi = tape.slice(w, i * dw, dw);
            let cat = tape.concat(&[p, wi]);
            rows.push(self.apply(tape, pv, LayerRef::Fusion, cat)?);
        }
        Ok(tape.concat(&rows))
    }

    pub fn latent_mapper_tape<'a>(&self, tape: &mut Tape<'a>, pv: &ParamVars, fused: Var) -> Result<Var> {
        let (n, dw) = (self.dims.n_latent, self.dims.dim_w);
        check_dim("fused embedding", n * dw, tape.value(fused).len())?;
        let mut rows = Vec::with_capacity(n);
        for (g, range) in self.groups().into_iter().enumerate() {
            for i in range {
                let mut h = tape.slice(fused, i * dw, dw);
                for l in 0..LAYERS_PER_NETWORK {
                    h = tape.pixel_norm(h, ROW_NORM_EPS);
                    h = self.apply(tape, pv, LayerRef::Latent(g, l), h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                rows.push(h);
            }
        }
        Ok(tape.concat(&rows))
    }

    /// `Δw` on the tape. With `tem` off the text branch is bypassed and the
    /// residual mapper sees `w` directly.
    pub fn delta_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        pv: &ParamVars,
        w: Var,
        e_t: Var,
        tem: bool,
    ) -> Result<Var> {
        if tem {
            let projected = self.text_mapper_tape(tape, pv, e_t)?;
            let fused = self.fuse_tape(tape, pv, projected, w)?;
            self.latent_mapper_tape(tape, pv, fused)
        } else {
            self.latent_mapper_tape(tape, pv, w)
        }
    }

    fn as_code(&self, values: Vec<f64>) -> Result<LatentCode> {
        LatentCode::new(self.dims.n_latent, self.dims.dim_w, values)
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        check_dim("latent rows", self.dims.n_latent, w.n_latent())?;
        check_dim("latent width", self.dims.dim_w, w.dim_w())
    }

    pub fn map_text_embedding(&self, e_t: &ClipEmbedding) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let e = tape.leaf(e_t.values().to_vec());
        let out = self.text_mapper_tape(&mut tape, &pv, e)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn fuse(&self, projected: &[f64], w: &LatentCode) -> Result<FusedEmbedding> {
        self.check_latent(w)?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let p = tape.leaf(projected.to_vec());
        let wv = tape.leaf(w.values().to_vec());
        let out = self.fuse_tape(&mut tape, &pv, p, wv)?;
        Ok(FusedEmbedding(self.as_code(tape.value(out).to_vec())?))
    }

    /// `Δw` from a fused embedding.
    pub fn map_latent(&self, e_f: &FusedEmbedding) -> Result<LatentCode> {
        self.check_latent(&e_f.0)?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let f = tape.leaf(e_f.0.values().to_vec());
        let out = self.latent_mapper_tape(&mut tape, &pv, f)?;
        self.as_code(tape.value(out).to_vec())
    }

    /// `Δw` for `(w, e_t)`.
    pub fn delta(&self, w: &LatentCode, e_t: &ClipEmbedding, tem: bool) -> Result<LatentCode> {
        self.check_latent(w)?;
        check_dim("text embedding", self.dims.dim_clip, e_t.dim())?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let wv = tape.leaf(w.values().to_vec());
        let e = tape.leaf(e_t.values().to_vec());
        let d = self.delta_tape(&mut tape, &pv, wv, e, tem)?;
        self.as_code(tape.value(d).to_vec())
    }

    /// `w′ = w + Δw`.
    pub fn edit_latent(&self, w: &LatentCode, e_t: &ClipEmbedding) -> Result<LatentCode> {
        self.edit_latent_with(w, e_t, true)
    }

    pub fn edit_latent_with(&self, w: &LatentCode, e_t: &ClipEmbedding, tem: bool) -> Result<LatentCode> {
        let delta = self.delta(w, e_t, tem)?;
        let values = w
            .values()
            .iter()
            .zip(delta.values())
            .map(|(a, b)| a + b)
            .collect();
        self.as_code(values)
    }

    /// Replaces every tensor, checking names and sizes.
    pub fn load_tensors(&mut self, tensors: &[(String, Vec<f64>)]) -> Result<()> {
        let expected: Vec<(String, usize)> = self
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::corrupt(
                "params",
                format!("{} tensors, expected {}", tensors.len(), expected.len()),
            ));
        }
        for ((name, len), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || *len != got.len() {
                return Err(Error::corrupt(
                    name.clone(),
                    format!("found {got_name} with {} values, expected {len}", got.len()),
                ));
            }
        }
        for (slot, (_, t)) in self.tensors_mut().into_iter().zip(tensors) {
            slot.clone_from(t);
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum LayerRef {
    Text(usize, usize),
    Fusion,
    Latent(usize, usize),
}
