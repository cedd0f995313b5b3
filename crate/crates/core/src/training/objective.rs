//! Per-sample objective on the tape.

use super::config::{LossKind, TrainConfig};
use crate::augmentation::ViewTransform;
use crate::autodiff::{l2_norm, DiffMap, Tape, Var, NORM_FLOOR};
use crate::backends::{BackendSuite, LatentCode};
use crate::error::{Error, Result};
use crate::geometry::cosine_similarity;
use crate::losses::{graph, LossWeights, Profile, TextAnchors};
use crate::mapper::{MapperParams, ParamVars};

/// Scalar values of one sample's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleValues {
    pub total: f64,
    /// The active CLIP-space term (contrastive, global or directional).
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
    pub perc: f64,
    pub cos_dir: f64,
}

/// Frozen pieces of the objective, computed once per run.
pub struct Objective<'s> {
    suite: &'s BackendSuite,
    profile: Profile,
    weights: LossWeights,
    loss: LossKind,
    tem: bool,
    pub anchors: TextAnchors,
    text_dir: Vec<f64>,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl<'s> Objective<'s> {
    pub fn new(config: &TrainConfig, suite: &'s BackendSuite) -> Result<Self> {
        if suite.dims != config.dims {
            return Err(Error::config(
                "dims",
                format!("config has {:?}, backend suite has {:?}", config.dims, suite.dims),
            ));
        }
        match config.profile {
            Profile::Facial => {
                suite.identity_net()?;
            }
            Profile::NonFacial => {
                suite.perceptual_net()?;
            }
        }
        let anchors = TextAnchors::encode(suite, &config.target_text, &config.prompts()?)?;
        let text_dir = anchors.text_direction()?.values;
        if l2_norm(&text_dir) < NORM_FLOOR {
            return Err(Error::ZeroVector("text direction"));
        }
        Ok(Self {
            suite,
            profile: config.profile,
            weights: config.weights,
            loss: config.loss,
            tem: config.tem,
            anchors,
            text_dir,
        })
    }

    pub fn text_direction(&self) -> &[f64] {
        &self.text_dir
    }

    /// `cos(ΔT, E_I(I_edit) − E_I(I_src))`; 0 while the image is unchanged.
    pub fn cos_dir(&self, edit_px: &[f64], src_emb: &[f64]) -> Result<f64> {
        let di = sub(&self.suite.image_encoder().forward(edit_px), src_emb);
        if l2_norm(&di) < NORM_FLOOR {
            return Ok(0.0);
        }
        cosine_similarity(&self.text_dir, &di)
    }

    /// `Δw` norm and alignment for one code under `params`, without a tape.
    pub fn evaluate(&self, params: &MapperParams, w: &LatentCode) -> Result<(f64, f64)> {
        let delta = params.delta(w, &self.anchors.target, self.tem)?;
        let edited: Vec<f64> = w.values().iter().zip(delta.values()).map(|(a, b)| a + b).collect();
        let src = self.suite.synthesize(w)?;
        let src_emb = self.suite.encode_image(&src)?;
        let edit_px = self.suite.generator().forward(&edited);
        Ok((l2_norm(delta.values()), self.cos_dir(&edit_px, src_emb.values())?))
    }

    /// Records the weighted loss of one latent code and returns its node.
    pub fn sample_loss<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        params: &MapperParams,
        pv: &ParamVars,
        w: &LatentCode,
        views: &'t [ViewTransform],
        step: u64,
    ) -> Result<(Var, SampleValues)>
    where
        's: 't,
    {
        let suite = self.suite;
        let src = suite.synthesize(w)?;
        let src_emb = suite.encode_image(&src)?.into_inner();

        let wv = tape.leaf(w.values().to_vec());
        let et = tape.leaf(self.anchors.target.values().to_vec());
        let delta = params.delta_tape(tape, pv, wv, et, self.tem)?;
        let w_edit = tape.add(wv, delta)?;
        let edit = tape.map(suite.generator() as &dyn DiffMap, w_edit)?;
        let cos_dir = self.cos_dir(tape.value(edit), &src_emb)?;

        let encoder = suite.image_encoder() as &dyn DiffMap;
        let src_leaf = tape.leaf(src_emb.clone());
        let mut view_embs = Vec::with_capacity(views.len());
        let mut queries = Vec::with_capacity(views.len());
        for view in views {
            let px = match view {
                ViewTransform::Identity => edit,
                ViewTransform::Warp(warp) => tape.map(warp, edit)?,
            };
            let emb = tape.map(encoder, px)?;
            let q = tape.sub(emb, src_leaf)?;
            if tape.value(q).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "image embedding of an edited view".into(),
                });
            }
            if l2_norm(tape.value(q)) < NORM_FLOOR {
                return Err(Error::DegenerateQuery { step });
            }
            view_embs.push(emb);
            queries.push(q);
        }

        let text_dir = tape.leaf(self.text_dir.clone());
        let clip = match self.loss {
            LossKind::Nce => {
                let target = self.anchors.target.values();
                let pos_image = tape.leaf(sub(target, &src_emb));
                let negatives: Vec<Var> = self
                    .anchors
                    .sources
                    .iter()
                    .map(|s| tape.leaf(sub(s.values(), &src_emb)))
                    .collect();
                graph::clip_nce(tape, &queries, text_dir, pos_image, &negatives, self.weights.tau)?
            }
            LossKind::Global => {
                let target = tape.leaf(self.anchors.target.values().to_vec());
                let per_view = view_embs
                    .iter()
                    .map(|&e| graph::one_minus_cos(tape, e, target, "global loss"))
                    .collect::<Result<Vec<_>>>()?;
                tape.mean(&per_view)?
            }
            LossKind::Directional => {
                let per_view = queries
                    .iter()
                    .map(|&q| graph::one_minus_cos(tape, text_dir, q, "directional loss"))
                    .collect::<Result<Vec<_>>>()?;
                tape.mean(&per_view)?
            }
        };
        let l2 = tape.norm(delta);

        let mut values = SampleValues {
            clip: tape.scalar(clip),
            l2: tape.scalar(l2),
            cos_dir,
            ..SampleValues::default()
        };
        let mut parts = vec![
            tape.scale(clip, self.weights.lambda_nce),
            tape.scale(l2, self.weights.lambda_l2),
        ];
        match self.profile {
            Profile::Facial => {
                let net = suite.identity_net()? as &dyn DiffMap;
                let r_src = tape.leaf(net.forward(src.pixels()));
                let r_edit = tape.map(net, edit)?;
                let id = graph::one_minus_cos(tape, r_edit, r_src, "identity embedding")?;
                values.id = tape.scalar(id);
                parts.push(tape.scale(id, self.weights.lambda_id));
            }
            Profile::NonFacial => {
                let net = suite.perceptual_net()? as &dyn DiffMap;
                let f_src = tape.leaf(net.forward(src.pixels()));
                let f_edit = tape.map(net, edit)?;
                let perc = tape.mean_abs_diff(f_edit, f_src)?;
                values.perc = tape.scalar(perc);
                parts.push(tape.scale(perc, self.weights.lambda_perc));
            }
        }
        let total = tape.sum(&parts)?;
        values.total = tape.scalar(total);
        Ok((total, values))
    }
}
