//! Minimal reverse-mode differentiation over flat `f64` buffers.
//!
//! A [`Tape`] records each operation together with a closure that maps the
//! output cotangent to cotangents of its inputs. Shapes are the caller's
//! business: every node is a flat vector and matrix layouts are row-major.
//! Frozen backends plug in through [`DiffMap`], which supplies a forward map
//! and its vector-Jacobian product.

use crate::error::{Error, Result};

/// Norm floor below which a vector is treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// A differentiable map between flat vectors with an explicit VJP.
pub trait DiffMap {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    /// Cotangent of the input given the cotangent of the output at `x`.
    fn vjp(&self, x: &[f64], grad_out: &[f64]) -> Vec<f64>;
}

type Backward<'a> = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)> + 'a>;

struct Node<'a> {
    value: Vec<f64>,
    backward: Option<Backward<'a>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Cotangents for every node reachable from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, backward: Option<Backward<'a>>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn dims_match(&self, what: &'static str, a: Var, b: Var) -> Result<()> {
        crate::error::check_dim(what, self.value(a).len(), self.value(b).len())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dims_match("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (ia, ib) = (a.0, b.0);
        Ok(self.push(
            value,
            Some(Box::new(move |g| vec![(ia, g.to_vec()), (ib, g.to_vec())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dims_match("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let (ia, ib) = (a.0, b.0);
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ia, g.to_vec()), (ib, g.iter().map(|x| -x).collect())]
            })),
        ))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ix, g.iter().map(|v| scale * v).collect())]
            })),
        )
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `weight · x + bias` with `weight` stored row-major as `out × inp`.
    pub fn linear(&mut self, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let inp = self.value(x).len();
        let out = self.value(bias).len();
        crate::error::check_dim("linear weight", out * inp, self.value(weight).len())?;
        let w = self.value(weight).to_vec();
        let xv = self.value(x).to_vec();
        let value: Vec<f64> = (0..out)
            .map(|o| dot(&w[o * inp..(o + 1) * inp], &xv) + self.value(bias)[o])
            .collect();
        let (iw, ib, ix) = (weight.0, bias.0, x.0);
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                let mut gw = vec![0.0; out * inp];
                let mut gx = vec![0.0; inp];
                for (o, &go) in g.iter().enumerate() {
                    let row = &w[o * inp..(o + 1) * inp];
                    let grow = &mut gw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        grow[i] = go * xv[i];
                        gx[i] += go * row[i];
                    }
                }
                vec![(iw, gw), (ib, g.to_vec()), (ix, gx)]
            })),
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x).to_vec();
        let value = xv
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gv, &v)| if v >= 0.0 { gv } else { slope * gv })
                    .collect();
                vec![(ix, gx)]
            })),
        )
    }

    /// `x / sqrt(mean(x²) + eps)`.
    pub fn pixel_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x).to_vec();
        let n = xv.len() as f64;
        let r = (dot(&xv, &xv) / n + eps).sqrt();
        let value = xv.iter().map(|v| v / r).collect();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                // d(x_j / r)/dx_i = δ_ij / r − x_j x_i / (n r³)
                let gx_dot = dot(g, &xv);
                let gx = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gv, &v)| gv / r - v * gx_dot / (n * r * r * r))
                    .collect();
                vec![(ix, gx)]
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let start = value.len();
            value.extend_from_slice(self.value(*p));
            spans.push((p.0, start, value.len()));
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                spans
                    .iter()
                    .map(|&(i, s, e)| (i, g[s..e].to_vec()))
                    .collect()
            })),
        )
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let total = self.value(x).len();
        let value = self.value(x)[start..start + len].to_vec();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; total];
                gx[start..start + len].copy_from_slice(g);
                vec![(ix, gx)]
            })),
        )
    }

    /// Applies a frozen differentiable map.
    pub fn map(&mut self, f: &'a dyn DiffMap, x: Var) -> Result<Var> {
        crate::error::check_dim("map input", f.in_dim(), self.value(x).len())?;
        let xv = self.value(x).to_vec();
        let value = f.forward(&xv);
        let ix = x.0;
        Ok(self.push(value, Some(Box::new(move |g| vec![(ix, f.vjp(&xv, g))]))))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dims_match("dot", a, b)?;
        let (av, bv) = (self.value(a).to_vec(), self.value(b).to_vec());
        let value = vec![dot(&av, &bv)];
        let (ia, ib) = (a.0, b.0);
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                vec![
                    (ia, bv.iter().map(|v| g[0] * v).collect()),
                    (ib, av.iter().map(|v| g[0] * v).collect()),
                ]
            })),
        ))
    }

    /// Euclidean norm; the subgradient at zero is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let xv = self.value(x).to_vec();
        let n = l2_norm(&xv);
        let ix = x.0;
        self.push(
            vec![n],
            Some(Box::new(move |g| {
                let gx = if n > 0.0 {
                    xv.iter().map(|v| g[0] * v / n).collect()
                } else {
                    vec![0.0; xv.len()]
                };
                vec![(ix, gx)]
            })),
        )
    }

    pub fn normalize(&mut self, x: Var, what: &'static str) -> Result<Var> {
        let xv = self.value(x).to_vec();
        let n = l2_norm(&xv);
        if !(n >= NORM_FLOOR) {
            return Err(Error::ZeroVector(what));
        }
        let u: Vec<f64> = xv.iter().map(|v| v / n).collect();
        let ix = x.0;
        let uc = u.clone();
        Ok(self.push(
            u,
            Some(Box::new(move |g| {
                let gu = dot(g, &uc);
                let gx = g
                    .iter()
                    .zip(&uc)
                    .map(|(&gv, &uv)| (gv - gu * uv) / n)
                    .collect();
                vec![(ix, gx)]
            })),
        ))
    }

    pub fn cosine(&mut self, a: Var, b: Var, what: &'static str) -> Result<Var> {
        self.dims_match("cosine", a, b)?;
        let ua = self.normalize(a, what)?;
        let ub = self.normalize(b, what)?;
        self.dot(ua, ub)
    }

    /// Stable `log Σ exp(x_i)` of a vector.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xv = self.value(x).to_vec();
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xv.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        let ix = x.0;
        self.push(
            vec![lse],
            Some(Box::new(move |g| {
                vec![(ix, xv.iter().map(|v| g[0] * (v - lse).exp()).collect())]
            })),
        )
    }

    /// Elementwise sum of equally sized values.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::BadDims("empty sum".into()))?;
        let len = self.value(*first).len();
        let mut value = vec![0.0; len];
        for x in xs {
            crate::error::check_dim("sum", len, self.value(*x).len())?;
            value
                .iter_mut()
                .zip(self.value(*x))
                .for_each(|(a, b)| *a += b);
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                ids.iter().map(|&i| (i, g.to_vec())).collect()
            })),
        ))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let s = self.sum(xs)?;
        Ok(self.scale(s, 1.0 / xs.len() as f64))
    }

    /// Sum of all entries of one value.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let value = vec![self.value(x).iter().sum()];
        let ix = x.0;
        self.push(value, Some(Box::new(move |g| vec![(ix, vec![g[0]; len])])))
    }

    /// `mean |a − b|`; the subgradient of |·| at zero is zero.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dims_match("mean_abs_diff", a, b)?;
        let diff: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let n = diff.len() as f64;
        let value = vec![diff.iter().map(|d| d.abs()).sum::<f64>() / n];
        let (ia, ib) = (a.0, b.0);
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                let ga: Vec<f64> = diff
                    .iter()
                    .map(|&d| {
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * s / n
                    })
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(ia, ga), (ib, gb)]
            })),
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                for (parent, contrib) in bw(&g) {
                    accumulate(&mut grads[parent], contrib);
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn pixel_norm_gradient() {
        let x0 = vec![0.3, -1.2, 0.7, 2.0];
        let w = vec![0.5, -0.1, 0.9, 0.2];
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let xv = t.leaf(x.to_vec());
            let wv = t.leaf(w.clone());
            let y = t.pixel_norm(xv, 1e-8);
            let d = t.dot(y, wv).unwrap();
            t.scalar(d)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let wv = t.leaf(w.clone());
        let y = t.pixel_norm(xv, 1e-8);
        let d = t.dot(y, wv).unwrap();
        close(&t.backward(d).get(xv), &numeric_grad(f, &x0), 1e-6);
    }

    #[test]
    fn logsumexp_gradient_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1000.0, 1000.0]);
        let l = t.logsumexp(x);
        assert!((t.scalar(l) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let g = t.backward(l).get(x);
        close(&g, &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 3]);
        assert!(matches!(t.normalize(x, "x"), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0]);
        let y = t.add(x, x).unwrap();
        let z = t.dot(y, x).unwrap();
        // z = 2x², dz/dx = 4x
        assert_eq!(t.backward(z).get(x), vec![8.0]);
    }
}
