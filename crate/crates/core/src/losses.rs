//! Objective terms.
//!
//! Each loss exists twice: a plain function over values, used for reporting
//! and as the reference for gradient checks, and a tape builder in [`graph`]
//! used by the training step.

use crate::autodiff::NORM_FLOOR;
use crate::backends::{BackendSuite, Image, LatentCode};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{
    cosine_similarity, direction_tagged, normalize, ClipEmbedding, Direction, PromptSet, Tag,
};

/// Query, positives and negatives for one contrastive evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    /// `E_I(view_v) − E_I(I_src)`, one per augmented view.
    pub query: Vec<Direction>,
    /// `E_T(t_tgt) − E_T(t_src)`.
    pub pos_text: Direction,
    /// `E_T(t_tgt) − E_I(I_src)`.
    pub pos_image: Direction,
    /// `E_T(t_src,j) − E_I(I_src)`, one per neutral prompt.
    pub negatives: Vec<Direction>,
}

impl DirectionSet {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::BadDims("direction set without queries".into()));
        }
        if self.negatives.is_empty() {
            return Err(Error::BadDims("direction set without negatives".into()));
        }
        let d = self.pos_text.dim();
        check_dim("pos_image", d, self.pos_image.dim())?;
        for q in &self.query {
            check_dim("query", d, q.dim())?;
        }
        for n in &self.negatives {
            check_dim("negative", d, n.dim())?;
        }
        Ok(())
    }
}

/// Text embeddings that stay fixed for a whole run.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAnchors {
    pub target_prompt: String,
    pub target: ClipEmbedding,
    pub prompts: PromptSet,
    /// One embedding per rendered neutral prompt; the first is the canonical
    /// source text.
    pub sources: Vec<ClipEmbedding>,
}

impl TextAnchors {
    pub fn encode(suite: &BackendSuite, target_prompt: &str, prompts: &PromptSet) -> Result<Self> {
        let target = suite.encode_text(target_prompt)?;
        let sources = prompts
            .rendered
            .iter()
            .map(|p| suite.encode_text(p))
            .collect::<Result<Vec<_>>>()?;
        if sources.is_empty() {
            return Err(Error::BadDims("prompt set has no rendered prompts".into()));
        }
        Ok(Self {
            target_prompt: target_prompt.to_string(),
            target,
            prompts: prompts.clone(),
            sources,
        })
    }

    /// `ΔT = E_T(t_tgt) − E_T(t_src)` for the canonical source text.
    pub fn text_direction(&self) -> Result<Direction> {
        direction_tagged(
            &self.sources[0],
            Tag::Text(self.prompts.canonical().to_string()),
            &self.target,
            Tag::Text(self.target_prompt.clone()),
        )
    }

    /// Assembles the direction set from precomputed image embeddings.
    pub fn direction_set(&self, src_image: &ClipEmbedding, views: &[ClipEmbedding]) -> Result<DirectionSet> {
        if views.is_empty() {
            return Err(Error::BadDims("at least one augmented view is required".into()));
        }
        let src_tag = || Tag::Image("I_src".to_string());
        let query = views
            .iter()
            .enumerate()
            .map(|(v, e)| direction_tagged(src_image, src_tag(), e, Tag::Image(format!("I_aug[{v}]"))))
            .collect::<Result<Vec<_>>>()?;
        let negatives = self
            .sources
            .iter()
            .zip(&self.prompts.rendered)
            .map(|(e, p)| direction_tagged(src_image, src_tag(), e, Tag::Text(p.clone())))
            .collect::<Result<Vec<_>>>()?;
        let ds = DirectionSet {
            query,
            pos_text: self.text_direction()?,
            pos_image: direction_tagged(
                src_image,
                src_tag(),
                &self.target,
                Tag::Text(self.target_prompt.clone()),
            )?,
            negatives,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Encodes everything and assembles the contrastive direction families.
/// `prompts.canonical()` is the source text of the text positive.
pub fn build_direction_set(
    suite: &BackendSuite,
    target_prompt: &str,
    prompts: &PromptSet,
    src: &Image,
    views: &[Image],
) -> Result<DirectionSet> {
    let anchors = TextAnchors::encode(suite, target_prompt, prompts)?;
    let e_src = suite.encode_image(src)?;
    let e_views = views
        .iter()
        .map(|v| suite.encode_image(v))
        .collect::<Result<Vec<_>>>()?;
    let ds = anchors.direction_set(&e_src, &e_views)?;
    if ds.query.iter().any(|q| crate::autodiff::l2_norm(&q.values) < NORM_FLOOR) {
        return Err(Error::ZeroVector("query direction"));
    }
    Ok(ds)
}

/// `1 − cos(E_I(I_edit), E_T(t_tgt))`.
pub fn global_clip_loss(img_emb: &[f64], txt_emb: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(img_emb, txt_emb)?)
}

/// `1 − cos(ΔT, ΔI)`.
pub fn directional_clip_loss(delta_t: &Direction, delta_i: &Direction) -> Result<f64> {
    Ok(1.0 - cosine_similarity(&delta_t.values, &delta_i.values)?)
}

/// `log Σ exp(xs) − xs[pick]`, accurate when `xs[pick]` dominates.
fn softmax_nll(xs: &[f64], pick: usize) -> f64 {
    let (arg, m) = xs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, &x)| if x > a.1 { (i, x) } else { a });
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, x)| (x - m).exp())
        .sum();
    (m - xs[pick]) + rest.ln_1p()
}

/// Contrastive loss over unit-normalised directions, averaged over views.
/// Both positive terms share the same negatives.
pub fn clip_nce_loss(ds: &DirectionSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("weights.tau", format!("{tau} is not positive")));
    }
    ds.validate()?;
    let kt = normalize(&ds.pos_text.values)?;
    let ki = normalize(&ds.pos_image.values)?;
    let negs = ds
        .negatives
        .iter()
        .map(|n| normalize(&n.values))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for q in &ds.query {
        let q = normalize(&q.values)?;
        let dot = |k: &[f64]| crate::autodiff::dot(&q, k) / tau;
        let neg_logits: Vec<f64> = negs.iter().map(|k| dot(k)).collect();
        for pos in [dot(&kt), dot(&ki)] {
            let mut logits = Vec::with_capacity(neg_logits.len() + 1);
            logits.push(pos);
            logits.extend_from_slice(&neg_logits);
            total += softmax_nll(&logits, 0);
        }
    }
    Ok(total / ds.query.len() as f64)
}

/// `‖w − w′‖₂` over all entries.
pub fn latent_l2_loss(w: &LatentCode, w_prime: &LatentCode) -> Result<f64> {
    check_dim("latent rows", w.n_latent(), w_prime.n_latent())?;
    check_dim("latent width", w.dim_w(), w_prime.dim_w())?;
    Ok(w.values()
        .iter()
        .zip(w_prime.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `1 − cos(R(I_edit), R(I_src))`.
pub fn identity_loss(suite: &BackendSuite, edit: &Image, src: &Image) -> Result<f64> {
    let a = suite.identity_embed(edit)?;
    let b = suite.identity_embed(src)?;
    Ok(1.0 - cosine_similarity(&a, &b)?)
}

/// Mean absolute difference of perceptual features.
pub fn perceptual_loss(suite: &BackendSuite, edit: &Image, src: &Image) -> Result<f64> {
    let a = suite.perceptual_features(edit)?;
    let b = suite.perceptual_features(src)?;
    Ok(mean_abs_diff(&a, &b))
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Dataset profile deciding which regulariser is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Facial,
    NonFacial,
}

/// Weights of the total objective and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_nce: f64,
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub lambda_perc: f64,
    pub tau: f64,
}

impl LossWeights {
    pub const TAU: f64 = 0.1;

    pub fn facial() -> Self {
        Self {
            lambda_nce: 0.3,
            lambda_l2: 0.8,
            lambda_id: 0.2,
            lambda_perc: 0.0,
            tau: Self::TAU,
        }
    }

    pub fn non_facial() -> Self {
        Self {
            lambda_nce: 0.3,
            lambda_l2: 0.8,
            lambda_id: 0.0,
            lambda_perc: 0.01,
            tau: Self::TAU,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Facial => Self::facial(),
            Profile::NonFacial => Self::non_facial(),
        }
    }

    pub fn validate(&self, profile: Profile) -> Result<()> {
        let named = [
            ("weights.lambda_nce", self.lambda_nce),
            ("weights.lambda_l2", self.lambda_l2),
            ("weights.lambda_id", self.lambda_id),
            ("weights.lambda_perc", self.lambda_perc),
        ];
        for (key, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("{v} is not a non-negative weight")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("weights.tau", format!("{} is not positive", self.tau)));
        }
        match profile {
            Profile::Facial if self.lambda_perc != 0.0 => Err(Error::config(
                "weights.lambda_perc",
                "must be 0 for the facial profile",
            )),
            Profile::NonFacial if self.lambda_id != 0.0 => Err(Error::config(
                "weights.lambda_id",
                "must be 0 for the non-facial profile",
            )),
            _ => Ok(()),
        }
    }
}

/// Per-sample loss values; `None` when a term was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub nce: Option<f64>,
    pub l2: Option<f64>,
    pub id: Option<f64>,
    pub perc: Option<f64>,
}

/// `λ_NCE·L_NCE + λ_L2·L_L2 + λ_ID·L_ID + λ_perc·L_perc`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    let parts = [
        ("nce", terms.nce, weights.lambda_nce),
        ("l2", terms.l2, weights.lambda_l2),
        ("id", terms.id, weights.lambda_id),
        ("perc", terms.perc, weights.lambda_perc),
    ];
    let mut total = 0.0;
    for (name, term, lambda) in parts {
        match term {
            Some(v) => total += lambda * v,
            None if lambda > 0.0 => return Err(Error::MissingTerm(name)),
            None => {}
        }
    }
    Ok(total)
}

/// Tape builders mirroring the plain functions above.
pub mod graph {
    use crate::autodiff::{Tape, Var};
    use crate::error::{Error, Result};

    /// `1 − cos(a, b)`.
    pub fn one_minus_cos<'a>(tape: &mut Tape<'a>, a: Var, b: Var, what: &'static str) -> Result<Var> {
        let c = tape.cosine(a, b, what)?;
        Ok(tape.affine(c, -1.0, 1.0))
    }

    /// Contrastive loss averaged over `queries`; all inputs are raw directions.
    pub fn clip_nce<'a>(
        tape: &mut Tape<'a>,
        queries: &[Var],
        pos_text: Var,
        pos_image: Var,
        negatives: &[Var],
        tau: f64,
    ) -> Result<Var> {
        if queries.is_empty() || negatives.is_empty() {
            return Err(Error::BadDims("contrastive loss needs queries and negatives".into()));
        }
        let kt = tape.normalize(pos_text, "text positive")?;
        let ki = tape.normalize(pos_image, "image positive")?;
        let negs = negatives
            .iter()
            .map(|n| tape.normalize(*n, "negative"))
            .collect::<Result<Vec<_>>>()?;
        let mut per_view = Vec::with_capacity(queries.len());
        for &q in queries {
            let q = tape.normalize(q, "query direction")?;
            let mut neg_logits = Vec::with_capacity(negs.len());
            for &k in &negs {
                let d = tape.dot(q, k)?;
                neg_logits.push(tape.scale(d, 1.0 / tau));
            }
            let mut terms = Vec::with_capacity(2);
            for pos in [kt, ki] {
                let d = tape.dot(q, pos)?;
                let p = tape.scale(d, 1.0 / tau);
                let mut all = vec![p];
                all.extend_from_slice(&neg_logits);
                let logits = tape.concat(&all);
                let lse = tape.logsumexp(logits);
                terms.push(tape.sub(lse, p)?);
            }
            per_view.push(tape.sum(&terms)?);
        }
        tape.mean(&per_view)
    }
}
