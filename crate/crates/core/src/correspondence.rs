//! Inter-frame and cross-modal correspondence mining with their contrastive
//! losses.
//!
//! Both losses share one shape: every anchor patch is pulled towards a
//! pooled positive (the mean of its top-K most cosine-similar candidates)
//! against all candidates of the other frame, or all query words:
//!
//! ```text
//! loss = mean_p [ log Σ_c exp(cos(a_p, c) / τ) - cos(a_p, m_p) / τ ]
//! ```
//!
//! Mining is a hard selection made on current feature values. The pooled
//! positive itself is built on the tape from the raw (un-normalised) rows,
//! so gradients flow into it, and no candidate is excluded from the
//! denominator.

use std::fmt;
use std::str::FromStr;

use dualcorr_numcore::{argmax, topk, Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{PatchFeatureMap, WordFeatures};
use crate::error::{Error, Result};

/// How pairwise inter-frame losses are combined over the sampled frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterMode {
    /// Ordered pairs `(i, i+1)` and `(i+1, i)`.
    Adjacent,
    /// Every ordered pair `i != j`.
    FullyConnected,
}

/// How positive words are chosen for each patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossSelect {
    PatchTopk,
    WordTopk,
    Random,
}

/// Where inter-frame positives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterAlign {
    /// Top-K mining over all patches.
    Dense,
    /// Only patches inside the annotated boxes.
    Sparse,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(InterMode { Adjacent => "adjacent", FullyConnected => "fully_connected" });
keyword_enum!(CrossSelect { PatchTopk => "patch_topk", WordTopk => "word_topk", Random => "random" });
keyword_enum!(InterAlign { Dense => "dense", Sparse => "sparse" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    pub tau: f64,
    pub r_inter: usize,
    pub r_cross: usize,
    pub inter_mode: InterMode,
    pub cross_select: CrossSelect,
    pub inter_align: InterAlign,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            r_inter: 8,
            r_cross: 3,
            inter_mode: InterMode::Adjacent,
            cross_select: CrossSelect::PatchTopk,
            inter_align: InterAlign::Dense,
        }
    }
}

impl CorrespondenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.r_inter == 0 || self.r_cross == 0 {
            return Err(Error::Config("sampling divisors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pooled positive for every anchor with the candidate indices behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveSet {
    /// One row per anchor.
    pub pooled: Tensor,
    pub contributor_indices: Vec<Vec<usize>>,
}

/// `max(1, ⌊pool_size / divisor⌋)`.
pub fn k_from_ratio(pool_size: usize, divisor: usize) -> usize {
    (pool_size / divisor.max(1)).max(1)
}

/// Pairwise cosine similarities between the rows of `a` and `b`
/// (`rows(a) × rows(b)`, zero rows give 0).
pub fn cosine_table(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let t = g.cosine_table(av, bv)?;
    Ok(g.value(t).clone())
}

fn pool(source: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(source.clone());
    let p = g.pool_rows(s, groups)?;
    Ok(g.value(p).clone())
}

fn same_dim(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Config(format!(
            "feature dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// For each patch of frame `i`, the `k` most similar patches of frame `j`
/// and the mean of their raw feature rows.
pub fn mine_inter(v_i: &Tensor, v_j: &Tensor, k: usize) -> Result<PositiveSet> {
    same_dim(v_i, v_j)?;
    if v_i.rows() != v_j.rows() {
        return Err(Error::Config(format!(
            "frames hold {} and {} patches",
            v_i.rows(),
            v_j.rows()
        )));
    }
    let sims = cosine_table(v_i, v_j)?;
    let contributor_indices = (0..sims.rows())
        .map(|p| topk(sims.row(p), k).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositiveSet {
        pooled: pool(v_j, &contributor_indices)?,
        contributor_indices,
    })
}

/// Anchors and positives for box-restricted alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePositives {
    /// Patches of frame `i` inside its box.
    pub anchors: Vec<usize>,
    /// One row per anchor; every row is the mean of the in-box patches of
    /// frame `j`.
    pub positives: PositiveSet,
}

/// Box-restricted positives; `None` when either box covers no cell centre,
/// in which case the frame pair is skipped.
pub fn mine_sparse(
    v_i: &Tensor,
    v_j: &Tensor,
    cells_i: &[usize],
    cells_j: &[usize],
) -> Result<Option<SparsePositives>> {
    same_dim(v_i, v_j)?;
    if cells_i.is_empty() || cells_j.is_empty() {
        return Ok(None);
    }
    let groups = vec![cells_j.to_vec(); cells_i.len()];
    Ok(Some(SparsePositives {
        anchors: cells_i.to_vec(),
        positives: PositiveSet {
            pooled: pool(v_j, &groups)?,
            contributor_indices: groups,
        },
    }))
}

/// Positive words for every patch of one frame.
pub fn mine_cross<R: Rng>(
    v_i: &Tensor,
    q: &Tensor,
    config: &CorrespondenceConfig,
    rng: &mut R,
) -> Result<PositiveSet> {
    same_dim(v_i, q)?;
    let (p, s) = (v_i.rows(), q.rows());
    let k = k_from_ratio(s, config.r_cross);
    let contributor_indices: Vec<Vec<usize>> = match config.cross_select {
        CrossSelect::PatchTopk => {
            let sims = cosine_table(v_i, q)?;
            (0..p)
                .map(|r| topk(sims.row(r), k).map_err(Error::from))
                .collect::<Result<_>>()?
        }
        CrossSelect::WordTopk => {
            let sims = cosine_table(v_i, q)?;
            let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); p];
            let kp = k.min(p);
            for word in 0..s {
                let column: Vec<f64> = (0..p).map(|r| sims.get(&[r, word])).collect();
                for patch in topk(&column, kp)? {
                    chosen[patch].push(word);
                }
            }
            for (r, words) in chosen.iter_mut().enumerate() {
                if words.is_empty() {
                    words.push(argmax(sims.row(r)).expect("at least one word"));
                }
            }
            chosen
        }
        CrossSelect::Random => (0..p)
            .map(|_| {
                let mut idx = sample(rng, s, k).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect(),
    };
    Ok(PositiveSet {
        pooled: pool(q, &contributor_indices)?,
        contributor_indices,
    })
}

/// `mine_cross` with its own seeded generator (used by the random variant).
pub fn mine_cross_seeded(
    v_i: &PatchFeatureMap,
    q: &WordFeatures,
    config: &CorrespondenceConfig,
    seed: u64,
) -> Result<PositiveSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mine_cross(&v_i.features, &q.features, config, &mut rng)
}

/// Records `mean_r [ lse_c(cos(a_r, c)/τ) - cos(a_r, m_r)/τ ]`.
pub fn info_nce(g: &mut Graph, anchors: Var, positives: Var, candidates: Var, tau: f64) -> Result<Var> {
    let pos = g.row_cosine(anchors, positives)?;
    let sims = g.cosine_table(anchors, candidates)?;
    let scaled = g.scale(sims, 1.0 / tau);
    let lse = g.logsumexp(scaled, 1)?;
    let pos = g.scale(pos, 1.0 / tau);
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

/// Records the loss of anchor frame `v_i` against frame `v_j`, with the
/// positives pooled from `v_j` on the tape.
pub fn inter_pair_graph(
    g: &mut Graph,
    v_i: Var,
    v_j: Var,
    contributors: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    let positives = g.pool_rows(v_j, contributors)?;
    info_nce(g, v_i, positives, v_j, tau)
}

fn sparse_pair_graph(g: &mut Graph, v_i: Var, v_j: Var, mined: &SparsePositives, tau: f64) -> Result<Var> {
    let anchors = g.gather_rows(v_i, &mined.anchors)?;
    let positives = g.pool_rows(v_j, &mined.positives.contributor_indices)?;
    info_nce(g, anchors, positives, v_j, tau)
}

/// Ordered frame pairs visited by an aggregation mode.
pub fn frame_pairs(frames: usize, mode: InterMode) -> Vec<(usize, usize)> {
    match mode {
        InterMode::Adjacent => (0..frames.saturating_sub(1))
            .flat_map(|i| [(i, i + 1), (i + 1, i)])
            .collect(),
        InterMode::FullyConnected => (0..frames)
            .flat_map(|i| (0..frames).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect(),
    }
}

/// Result of recording the aggregated inter-frame loss.
#[derive(Clone, Debug)]
pub struct InterLoss {
    pub loss: Var,
    pub pairs: usize,
    /// Pairs skipped because a box covered no cell (sparse alignment).
    pub flagged: Vec<(usize, usize)>,
}

/// Records the inter-frame loss over all frames of a clip.
///
/// `box_cells[t]` lists the patches of frame `t` whose centres lie inside
/// its ground-truth box; it is required for sparse alignment only.
pub fn inter_loss_graph(
    g: &mut Graph,
    frames: &[Var],
    config: &CorrespondenceConfig,
    box_cells: Option<&[Vec<usize>]>,
) -> Result<InterLoss> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            available: frames.len(),
        });
    }
    let pairs = frame_pairs(frames.len(), config.inter_mode);
    let mut terms = Vec::with_capacity(pairs.len());
    let mut flagged = Vec::new();
    for &(i, j) in &pairs {
        let (vi, vj) = (g.value(frames[i]).clone(), g.value(frames[j]).clone());
        match config.inter_align {
            InterAlign::Dense => {
                let k = k_from_ratio(vj.rows(), config.r_inter);
                let mined = mine_inter(&vi, &vj, k)?;
                terms.push(inter_pair_graph(
                    g,
                    frames[i],
                    frames[j],
                    &mined.contributor_indices,
                    config.tau,
                )?);
            }
            InterAlign::Sparse => {
                let cells = box_cells.ok_or_else(|| {
                    Error::Config("sparse alignment needs ground-truth boxes".into())
                })?;
                match mine_sparse(&vi, &vj, &cells[i], &cells[j])? {
                    Some(mined) => {
                        terms.push(sparse_pair_graph(g, frames[i], frames[j], &mined, config.tau)?)
                    }
                    None => flagged.push((i, j)),
                }
            }
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / pairs.len() as f64);
    Ok(InterLoss {
        loss,
        pairs: pairs.len(),
        flagged,
    })
}

/// Records the cross-modal loss averaged over frames.
pub fn cross_loss_graph<R: Rng>(
    g: &mut Graph,
    frames: &[Var],
    words: Var,
    config: &CorrespondenceConfig,
    rng: &mut R,
) -> Result<Var> {
    if frames.is_empty() {
        return Err(Error::InsufficientFrames {
            needed: 1,
            available: 0,
        });
    }
    let q = g.value(words).clone();
    let mut total = g.constant(Tensor::scalar(0.0));
    for &frame in frames {
        let v = g.value(frame).clone();
        let mined = mine_cross(&v, &q, config, rng)?;
        let positives = g.pool_rows(words, &mined.contributor_indices)?;
        let term = info_nce(g, frame, positives, words, config.tau)?;
        total = g.add(total, term)?;
    }
    Ok(g.scale(total, 1.0 / frames.len() as f64))
}

/// Value of the loss of `v_i` against `v_j` for already mined positives.
pub fn inter_loss_pair(v_i: &Tensor, v_j: &Tensor, positives: &PositiveSet, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(v_i.clone());
    let b = g.constant(v_j.clone());
    let l = inter_pair_graph(&mut g, a, b, &positives.contributor_indices, tau)?;
    Ok(g.scalar_value(l))
}

/// Value of the aggregated inter-frame loss (dense alignment).
pub fn inter_loss(frames: &[PatchFeatureMap], config: &CorrespondenceConfig) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.features.clone())).collect();
    let out = inter_loss_graph(&mut g, &vars, config, None)?;
    Ok(g.scalar_value(out.loss))
}

/// Value of the cross-modal loss; `seed` drives the random variant.
pub fn cross_loss(
    frames: &[PatchFeatureMap],
    q: &WordFeatures,
    config: &CorrespondenceConfig,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.features.clone())).collect();
    let w = g.constant(q.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cross_loss_graph(&mut g, &vars, w, config, &mut rng)?;
    Ok(g.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn k_formula() {
        assert_eq!(k_from_ratio(64, 8), 8);
        assert_eq!(k_from_ratio(4, 8), 1);
        assert_eq!(k_from_ratio(3, 3), 1);
        assert_eq!(k_from_ratio(9, 3), 3);
    }

    #[test]
    fn keywords_round_trip() {
        for m in [InterMode::Adjacent, InterMode::FullyConnected] {
            assert_eq!(m.to_string().parse::<InterMode>().unwrap(), m);
        }
        for c in [CrossSelect::PatchTopk, CrossSelect::WordTopk, CrossSelect::Random] {
            assert_eq!(c.to_string().parse::<CrossSelect>().unwrap(), c);
        }
        assert!("dense".parse::<InterAlign>().is_ok());
        assert!("diagonal".parse::<InterAlign>().is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = CorrespondenceConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c = CorrespondenceConfig { r_cross: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn self_match_with_distinct_unit_patches() {
        let v = rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let mined = mine_inter(&v, &v, 1).unwrap();
        for p in 0..3 {
            assert_eq!(mined.contributor_indices[p], vec![p]);
            assert_eq!(mined.pooled.row(p), v.row(p));
        }
    }

    #[test]
    fn single_patch_pool() {
        let vi = rows(&[vec![0.3, -0.2]]);
        let vj = rows(&[vec![1.5, 2.0]]);
        let mined = mine_inter(&vi, &vj, 1).unwrap();
        assert_eq!(mined.pooled.row(0), vj.row(0));
        assert!(mine_inter(&vi, &vj, 2).is_err());
    }

    #[test]
    fn single_patch_loss_is_zero() {
        let vi = rows(&[vec![0.3, -0.2, 0.9]]);
        let vj = rows(&[vec![-1.0, 0.4, 0.2]]);
        let mined = mine_inter(&vi, &vj, 1).unwrap();
        assert_eq!(inter_loss_pair(&vi, &vj, &mined, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn identical_candidates_give_log_p() {
        let vi = rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.4, 0.1], vec![0.0, 1.0]]);
        let shared = vec![0.7, -0.3];
        let vj = rows(&vec![shared; 4]);
        let mined = mine_inter(&vi, &vj, 4).unwrap();
        let loss = inter_loss_pair(&vi, &vj, &mined, 0.07).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-10, "{loss}");
    }

    #[test]
    fn loss_is_nonnegative_when_k_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let vi = random(&mut rng, &[6, 3]);
            let vj = random(&mut rng, &[6, 3]);
            let mined = mine_inter(&vi, &vj, 1).unwrap();
            assert!(inter_loss_pair(&vi, &vj, &mined, 0.1).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn pair_counts_per_mode() {
        assert_eq!(frame_pairs(2, InterMode::Adjacent), vec![(0, 1), (1, 0)]);
        assert_eq!(frame_pairs(2, InterMode::FullyConnected), vec![(0, 1), (1, 0)]);
        assert_eq!(frame_pairs(4, InterMode::Adjacent).len(), 6);
        assert_eq!(frame_pairs(4, InterMode::FullyConnected).len(), 12);
    }

    #[test]
    fn too_few_frames() {
        let map = PatchFeatureMap {
            features: rows(&[vec![1.0, 0.0]]),
            grid_h: 1,
            grid_w: 1,
        };
        assert!(matches!(
            inter_loss(&[map], &CorrespondenceConfig::default()),
            Err(Error::InsufficientFrames { .. })
        ));
    }

    #[test]
    fn sparse_single_cell_and_full_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vi = random(&mut rng, &[4, 3]);
        let vj = random(&mut rng, &[4, 3]);
        let mined = mine_sparse(&vi, &vj, &[2], &[1]).unwrap().unwrap();
        assert_eq!(mined.anchors, vec![2]);
        assert_eq!(mined.positives.pooled.row(0), vj.row(1));

        let all = mine_sparse(&vi, &vj, &[0, 3], &[0, 1, 2, 3]).unwrap().unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| vj.get(&[r, c])).sum::<f64>() / 4.0;
            assert!((all.positives.pooled.get(&[1, c]) - mean).abs() < 1e-15);
        }
        assert!(mine_sparse(&vi, &vj, &[], &[1]).unwrap().is_none());
    }

    #[test]
    fn sparse_without_boxes_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 2]));
        let b = g.constant(Tensor::ones(&[2, 2]));
        let cfg = CorrespondenceConfig {
            inter_align: InterAlign::Sparse,
            ..Default::default()
        };
        assert!(inter_loss_graph(&mut g, &[a, b], &cfg, None).is_err());
    }

    #[test]
    fn sparse_pair_with_empty_box_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, &[4, 3]));
        let b = g.constant(random(&mut rng, &[4, 3]));
        let cfg = CorrespondenceConfig {
            inter_align: InterAlign::Sparse,
            ..Default::default()
        };
        let cells = vec![vec![1, 2], vec![]];
        let out = inter_loss_graph(&mut g, &[a, b], &cfg, Some(&cells)).unwrap();
        assert_eq!(out.flagged, vec![(0, 1), (1, 0)]);
        assert_eq!(g.scalar_value(out.loss), 0.0);
    }

    #[test]
    fn single_word_positive_is_that_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random(&mut rng, &[5, 3]);
        let q = random(&mut rng, &[1, 3]);
        for select in [CrossSelect::PatchTopk, CrossSelect::WordTopk, CrossSelect::Random] {
            let cfg = CorrespondenceConfig {
                cross_select: select,
                ..Default::default()
            };
            let mined = mine_cross(&v, &q, &cfg, &mut rng).unwrap();
            for p in 0..5 {
                assert_eq!(mined.pooled.row(p), q.row(0));
            }
        }
    }

    #[test]
    fn three_words_ratio_three_takes_the_best_word() {
        let v = rows(&[vec![1.0, 0.1], vec![-0.2, 1.0]]);
        let q = rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0]]);
        let cfg = CorrespondenceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mined = mine_cross(&v, &q, &cfg, &mut rng).unwrap();
        assert_eq!(mined.contributor_indices, vec![vec![1], vec![0]]);
    }

    #[test]
    fn word_topk_falls_back_to_best_word() {
        // two words, four patches; with R_cross = 2 each word picks one patch
        let v = rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.2, 0.8],
        ]);
        let q = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cfg = CorrespondenceConfig {
            cross_select: CrossSelect::WordTopk,
            r_cross: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mined = mine_cross(&v, &q, &cfg, &mut rng).unwrap();
        assert_eq!(mined.contributor_indices, vec![vec![0], vec![0], vec![1], vec![1]]);
    }

    #[test]
    fn random_selection_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&mut rng, &[6, 3]);
        let q = random(&mut rng, &[6, 3]);
        let cfg = CorrespondenceConfig {
            cross_select: CrossSelect::Random,
            ..Default::default()
        };
        let a = mine_cross(&v, &q, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = mine_cross(&v, &q, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.contributor_indices.iter().all(|c| c.len() == 2));
    }

    #[test]
    fn cross_loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<PatchFeatureMap> = (0..2)
            .map(|_| PatchFeatureMap {
                features: random(&mut rng, &[4, 3]),
                grid_h: 2,
                grid_w: 2,
            })
            .collect();
        let cfg = CorrespondenceConfig::default();
        let one = WordFeatures {
            features: random(&mut rng, &[1, 3]),
        };
        assert_eq!(cross_loss(&frames, &one, &cfg, 0).unwrap(), 0.0);

        let word = random(&mut rng, &[1, 3]);
        let same = WordFeatures {
            features: Tensor::new(vec![3, 3], word.data().repeat(3)).unwrap(),
        };
        let all_k = CorrespondenceConfig { r_cross: 1, ..cfg };
        let l = cross_loss(&frames, &same, &all_k, 0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-10);
    }
}
