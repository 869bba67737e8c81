//! Additive attention from patches to words.
//!
//! For patch `p` and word `s` the logit is `w · tanh(W_v v_p + W_q q_s)`;
//! a softmax over the words gives `e[p, s]`, and the fused feature is
//! `f_p = Σ_s e[p, s] q_s`. No bias terms.

use dualcorr_numcore::{Graph, Tensor, Var};
use rand::Rng;

use crate::encoders::{PatchFeatureMap, WordFeatures};
use crate::error::{Error, Result};
use crate::params::uniform;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// Scoring projection, `D×1`.
    pub w: Tensor,
    /// Applied to patch rows from the right, `D×D`.
    pub w_v: Tensor,
    /// Applied to word rows from the right, `D×D`.
    pub w_q: Tensor,
}

impl FusionParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            w: uniform(rng, &[dim, 1], dim, 1),
            w_v: uniform(rng, &[dim, dim], dim, dim),
            w_q: uniform(rng, &[dim, dim], dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_v.rows()
    }
}

pub struct FusionVars {
    pub w: Var,
    pub w_v: Var,
    pub w_q: Var,
}

/// Textual-aware patch features with the attention that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatureMap {
    /// `P×D`
    pub features: Tensor,
    /// `P×S`, rows sum to one.
    pub attention: Tensor,
}

/// Records the fusion of `patches` (P×D) with `words` (S×D).
///
/// Returns `(fused P×D, attention P×S)`.
pub fn attend_graph(g: &mut Graph, vars: &FusionVars, patches: Var, words: Var) -> Result<(Var, Var)> {
    let p = g.shape(patches)[0];
    let s = g.shape(words)[0];
    if g.shape(patches)[1] != g.shape(words)[1] {
        return Err(Error::Config(format!(
            "patch dim {} differs from word dim {}",
            g.shape(patches)[1],
            g.shape(words)[1]
        )));
    }
    let pv = g.matmul(patches, vars.w_v)?;
    let qv = g.matmul(words, vars.w_q)?;
    let pairs = g.pairwise_add(pv, qv)?;
    let act = g.tanh(pairs);
    let logits = g.matmul(act, vars.w)?;
    let logits = g.reshape(logits, &[p, s])?;
    let attention = g.softmax(logits, 1)?;
    let fused = g.matmul(attention, words)?;
    Ok((fused, attention))
}

pub fn attend(v: &PatchFeatureMap, q: &WordFeatures, params: &FusionParams) -> Result<FusedFeatureMap> {
    if q.words() == 0 {
        return Err(Error::Config("query has no words".into()));
    }
    let mut g = Graph::new();
    let vars = FusionVars {
        w: g.constant(params.w.clone()),
        w_v: g.constant(params.w_v.clone()),
        w_q: g.constant(params.w_q.clone()),
    };
    let pv = g.constant(v.features.clone());
    let qv = g.constant(q.features.clone());
    let (fused, attention) = attend_graph(&mut g, &vars, pv, qv)?;
    Ok(FusedFeatureMap {
        features: g.value(fused).clone(),
        attention: g.value(attention).clone(),
    })
}
