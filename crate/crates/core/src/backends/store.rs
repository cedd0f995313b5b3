//! On-disk backend checkpoints.
//!
//! A suite directory holds one `.cfbk` file per member. The identity and
//! perceptual files are optional; a suite loaded without them reports
//! [`Error::MissingBackend`] when those networks are requested.
//!
//! Each file is `"CFBK" | u32 version | u32 kind_len | kind | u32 n_ints |
//! u64 × n_ints | u32 n_tensors | (u64 len | f64 × len) × n_tensors`, all
//! little-endian.

use std::path::Path;

use super::toy::{check_render, LinearMap, ToyGenerator, ToyPerceptual, ToyTextEncoder};
use super::{BackendSuite, Dims, Frozen, Generator, IdentityNet, ImageEncoder, PerceptualNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFBK";
const VERSION: u32 = 1;

/// File names inside a suite directory, in suite order.
pub const SUITE_FILES: [&str; 5] = [
    "text_encoder.cfbk",
    "image_encoder.cfbk",
    "generator.cfbk",
    "identity.cfbk",
    "perceptual.cfbk",
];

struct Blob {
    kind: String,
    ints: Vec<u64>,
    tensors: Vec<Vec<f64>>,
}

fn dims_ints(d: &Dims) -> Vec<u64> {
    [d.dim_clip, d.dim_w, d.n_latent, d.height, d.width, d.channels]
        .iter()
        .map(|&v| v as u64)
        .collect()
}

fn write_blob(path: &Path, kind: &str, ints: &[u64], tensors: &[&[f64]]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    buf.extend_from_slice(kind.as_bytes());
    buf.extend_from_slice(&(ints.len() as u32).to_le_bytes());
    for i in ints {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in *t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn fail(&self, msg: &str) -> Error {
        Error::BackendFailure(format!("{}: {msg}", self.path.display()))
    }
}

fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::BackendFailure(format!("{}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(r.fail("unsupported version"));
    }
    let klen = r.u32()? as usize;
    let kind = String::from_utf8(r.take(klen)?.to_vec()).map_err(|_| r.fail("bad kind"))?;
    let n_ints = r.u32()? as usize;
    let ints = (0..n_ints).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let len = r.u64()? as usize;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| r.fail("bad length"))?)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Blob {
        kind,
        ints,
        tensors,
    })
}

/// Writes every member of a toy suite to `dir`.
pub fn save_suite(suite: &BackendSuite, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = dims_ints(&suite.dims);
    let members: [Option<&dyn Frozen>; 5] = [
        Some(suite.text_encoder() as &dyn Frozen),
        Some(suite.image_encoder() as &dyn Frozen),
        Some(suite.generator() as &dyn Frozen),
        suite.identity_net().ok().map(|m| m as &dyn Frozen),
        suite.perceptual_net().ok().map(|m| m as &dyn Frozen),
    ];
    for (file, member) in SUITE_FILES.iter().zip(members) {
        let path = dir.join(file);
        match member {
            Some(m) => write_blob(&path, &m.name(), &d, &m.parameters())?,
            None if path.exists() => std::fs::remove_file(&path)?,
            None => {}
        }
    }
    Ok(())
}

fn dims_from(blob: &Blob) -> Result<Dims> {
    match blob.ints.as_slice() {
        &[dim_clip, dim_w, n_latent, height, width, channels] => Ok(Dims {
            dim_clip: dim_clip as usize,
            dim_w: dim_w as usize,
            n_latent: n_latent as usize,
            height: height as usize,
            width: width as usize,
            channels: channels as usize,
        }),
        _ => Err(Error::BackendFailure(format!(
            "{}: missing dims record",
            blob.kind
        ))),
    }
}

fn one_tensor(blob: &Blob, expected: usize) -> Result<Vec<f64>> {
    match blob.tensors.as_slice() {
        [t] if t.len() == expected => Ok(t.clone()),
        _ => Err(Error::BackendFailure(format!(
            "{}: expected one tensor of {expected} values",
            blob.kind
        ))),
    }
}

fn load_linear(blob: &Blob, label: &'static str, out: usize, inp: usize, center: f64) -> Result<LinearMap> {
    if !blob.kind.starts_with(&format!("toy-{label}/")) {
        return Err(Error::BackendFailure(format!(
            "expected a {label} checkpoint, found {}",
            blob.kind
        )));
    }
    Ok(LinearMap {
        label,
        out,
        inp,
        center,
        weight: one_tensor(blob, out * inp)?,
    })
}

/// Loads a suite directory written by [`save_suite`].
pub fn load_suite(dir: &Path) -> Result<BackendSuite> {
    let gen_blob = read_blob(&dir.join(SUITE_FILES[2]))?;
    let dims = dims_from(&gen_blob)?;
    dims.validate()?;
    if !gen_blob.kind.starts_with("toy-generator/") {
        return Err(Error::BackendFailure(format!(
            "unsupported generator kind {}",
            gen_blob.kind
        )));
    }
    let n = dims.n_latent;
    if gen_blob.tensors.len() != n + 2 {
        return Err(Error::BackendFailure("generator tensor count".into()));
    }
    let render = gen_blob.tensors[1..=n].to_vec();
    check_render(&dims, &render)?;
    let generator = ToyGenerator {
        dims,
        mapping: gen_blob.tensors[0].clone(),
        render,
        noise: gen_blob.tensors[n + 1].clone(),
    };
    if generator.mapping.len() != dims.dim_w * dims.dim_w || generator.noise.len() != dims.pixels() {
        return Err(Error::BackendFailure("generator tensor sizes".into()));
    }

    let text_blob = read_blob(&dir.join(SUITE_FILES[0]))?;
    if !text_blob.kind.starts_with("toy-text-encoder/") {
        return Err(Error::BackendFailure(format!(
            "unsupported text encoder kind {}",
            text_blob.kind
        )));
    }
    let text = ToyTextEncoder {
        dim: dims.dim_clip,
        weight: one_tensor(&text_blob, dims.dim_clip * 256)?,
    };
    let image = load_linear(
        &read_blob(&dir.join(SUITE_FILES[1]))?,
        "image-encoder",
        dims.dim_clip,
        dims.pixels(),
        0.0,
    )?;

    let id_path = dir.join(SUITE_FILES[3]);
    let identity: Option<Box<dyn IdentityNet>> = if id_path.exists() {
        Some(Box::new(load_linear(
            &read_blob(&id_path)?,
            "identity",
            dims.dim_clip,
            dims.pixels(),
            0.5,
        )?))
    } else {
        None
    };
    let perc_path = dir.join(SUITE_FILES[4]);
    let perceptual: Option<Box<dyn PerceptualNet>> = if perc_path.exists() {
        let blob = read_blob(&perc_path)?;
        let stride = blob
            .kind
            .strip_prefix("toy-perceptual/stride")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::BackendFailure(format!("unsupported kind {}", blob.kind)))?;
        let mut net = ToyPerceptual::new(&dims, stride, &mut crate::rng::rng_for(0, &[]))?;
        net.weight = one_tensor(&blob, net.weight.len())?;
        Some(Box::new(net))
    } else {
        None
    };

    BackendSuite::new(
        dims,
        Box::new(text),
        Box::new(image) as Box<dyn ImageEncoder>,
        Box::new(generator) as Box<dyn Generator>,
        identity,
        perceptual,
    )
}
