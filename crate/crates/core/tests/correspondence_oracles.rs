//! Mining and contrastive losses against brute-force reference code.

use dualcorr::correspondence::{
    cross_loss, inter_loss, inter_loss_pair, k_from_ratio, mine_cross, mine_inter, CorrespondenceConfig,
    CrossSelect,
};
use dualcorr::encoders::{PatchFeatureMap, WordFeatures};
use dualcorr_numcore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Every row of `a` against every row of `b`.
fn table(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| cos(x, y)).collect()).collect()
}

/// Indices of the `k` largest entries by full sort; ties to the lower index.
fn best(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

fn mean_rows(src: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; src[0].len()];
    for &i in idx {
        for (o, x) in out.iter_mut().zip(&src[i]) {
            *o += x / idx.len() as f64;
        }
    }
    out
}

/// `mean_a [ log Σ_c exp(cos(a, c)/τ) - cos(a, m_a)/τ ]`, in plain loops.
fn info_nce_ref(anchors: &[Vec<f64>], positives: &[Vec<f64>], candidates: &[Vec<f64>], tau: f64) -> f64 {
    let per: Vec<f64> = anchors
        .iter()
        .zip(positives)
        .map(|(a, m)| {
            let z: f64 = candidates.iter().map(|c| (cos(a, c) / tau).exp()).sum();
            z.ln() - cos(a, m) / tau
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn patch_map(t: Tensor) -> PatchFeatureMap {
    let p = t.rows();
    PatchFeatureMap {
        features: t,
        grid_h: 1,
        grid_w: p,
    }
}

#[test]
fn inter_mining_matches_exhaustive_table_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let k = k_from_ratio(p, rng.gen_range(1..=8));
        let (vi, vj) = (random(&mut rng, p, d), random(&mut rng, p, d));
        let mined = mine_inter(&vi, &vj, k).unwrap();
        let t = table(&rows_of(&vi), &rows_of(&vj));
        for (row, got) in t.iter().zip(&mined.contributor_indices) {
            assert_eq!(sorted(got.clone()), best(row, k));
        }
        for (r, idx) in mined.contributor_indices.iter().enumerate() {
            let expect = mean_rows(&rows_of(&vj), idx);
            for (a, b) in mined.pooled.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_mining_matches_exhaustive_table_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let p = rng.gen_range(1..=8);
        let s = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let r_cross = rng.gen_range(1..=4);
        let (v, q) = (random(&mut rng, p, d), random(&mut rng, s, d));
        let k = k_from_ratio(s, r_cross);
        let t = table(&rows_of(&v), &rows_of(&q));

        let config = CorrespondenceConfig {
            r_cross,
            ..CorrespondenceConfig::default()
        };
        let mined = mine_cross(&v, &q, &config, &mut rng).unwrap();
        for (row, got) in t.iter().zip(&mined.contributor_indices) {
            assert_eq!(sorted(got.clone()), best(row, k));
        }

        let config = CorrespondenceConfig {
            r_cross,
            cross_select: CrossSelect::WordTopk,
            ..CorrespondenceConfig::default()
        };
        let mined = mine_cross(&v, &q, &config, &mut rng).unwrap();
        let mut expect: Vec<Vec<usize>> = vec![Vec::new(); p];
        for w in 0..s {
            let column: Vec<f64> = t.iter().map(|row| row[w]).collect();
            for patch in best(&column, k.min(p)) {
                expect[patch].push(w);
            }
        }
        for (patch, e) in expect.iter_mut().enumerate() {
            if e.is_empty() {
                e.push(best(&t[patch], 1)[0]);
            }
        }
        let got: Vec<Vec<usize>> = mined.contributor_indices.into_iter().map(sorted).collect();
        assert_eq!(got, expect);
    }
}

#[test]
fn random_selection_draws_k_distinct_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (v, q) = (random(&mut rng, 6, 4), random(&mut rng, 9, 4));
    let config = CorrespondenceConfig {
        cross_select: CrossSelect::Random,
        ..CorrespondenceConfig::default()
    };
    let mined = mine_cross(&v, &q, &config, &mut rng).unwrap();
    for idx in &mined.contributor_indices {
        assert_eq!(idx.len(), 3);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 9));
    }
}

#[test]
fn inter_loss_is_zero_for_a_single_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = vec![patch_map(random(&mut rng, 1, 5)), patch_map(random(&mut rng, 1, 5))];
    let l = inter_loss(&frames, &CorrespondenceConfig::default()).unwrap();
    assert!(l.abs() < 1e-10, "{l}");
}

#[test]
fn cross_loss_is_zero_for_a_single_word() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = vec![patch_map(random(&mut rng, 6, 5)), patch_map(random(&mut rng, 6, 5))];
    let q = WordFeatures {
        features: random(&mut rng, 1, 5),
    };
    for select in [CrossSelect::PatchTopk, CrossSelect::WordTopk, CrossSelect::Random] {
        let config = CorrespondenceConfig {
            cross_select: select,
            ..CorrespondenceConfig::default()
        };
        let l = cross_loss(&frames, &q, &config, 0).unwrap();
        assert!(l.abs() < 1e-10, "{select}: {l}");
    }
}

#[test]
fn uniform_candidates_give_log_pool_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [2usize, 5, 8] {
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let same = Tensor::from_fn(&[p, 4], |i| row[i % 4]);
        let frames = [patch_map(random(&mut rng, p, 4)), patch_map(same)];
        let config = CorrespondenceConfig::default();
        // Only the pair anchored on the random frame has uniform candidates.
        let mined = mine_inter(&frames[0].features, &frames[1].features, 1).unwrap();
        let l = inter_loss_pair(&frames[0].features, &frames[1].features, &mined, config.tau).unwrap();
        assert!((l - (p as f64).ln()).abs() < 1e-10, "P={p}: {l}");
    }
    for s in [2usize, 3, 9] {
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = WordFeatures {
            features: Tensor::from_fn(&[s, 4], |i| row[i % 4]),
        };
        let frames = vec![patch_map(random(&mut rng, 5, 4))];
        let l = cross_loss(&frames, &q, &CorrespondenceConfig::default(), 0).unwrap();
        assert!((l - (s as f64).ln()).abs() < 1e-10, "S={s}: {l}");
    }
}

#[test]
fn inter_loss_matches_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = CorrespondenceConfig::default();
    for _ in 0..20 {
        let p = rng.gen_range(2..=8);
        let frames: Vec<PatchFeatureMap> = (0..3).map(|_| patch_map(random(&mut rng, p, 3))).collect();
        let k = k_from_ratio(p, config.r_inter);
        let pairs = [(0, 1), (1, 0), (1, 2), (2, 1)];
        let expect: f64 = pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (rows_of(&frames[i].features), rows_of(&frames[j].features));
                let t = table(&a, &b);
                let pos: Vec<Vec<f64>> = t.iter().map(|row| mean_rows(&b, &best(row, k))).collect();
                info_nce_ref(&a, &pos, &b, config.tau)
            })
            .sum::<f64>()
            / pairs.len() as f64;
        let got = inter_loss(&frames, &config).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn cross_loss_matches_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = CorrespondenceConfig::default();
    for _ in 0..20 {
        let s = rng.gen_range(2..=9);
        let frames: Vec<PatchFeatureMap> = (0..2).map(|_| patch_map(random(&mut rng, 6, 3))).collect();
        let q = random(&mut rng, s, 3);
        let k = k_from_ratio(s, config.r_cross);
        let words = rows_of(&q);
        let expect: f64 = frames
            .iter()
            .map(|f| {
                let a = rows_of(&f.features);
                let pos: Vec<Vec<f64>> = table(&a, &words).iter().map(|row| mean_rows(&words, &best(row, k))).collect();
                info_nce_ref(&a, &pos, &words, config.tau)
            })
            .sum::<f64>()
            / frames.len() as f64;
        let got = cross_loss(&frames, &WordFeatures { features: q }, &config, 0).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0), "{got} vs {expect}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mining_contributors_are_k_distinct_indices(p in 1usize..9, r in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (vi, vj) = (random(&mut rng, p, 3), random(&mut rng, p, 3));
        let k = k_from_ratio(p, r);
        let mined = mine_inter(&vi, &vj, k).unwrap();
        prop_assert_eq!(mined.pooled.shape(), &[p, 3][..]);
        for idx in &mined.contributor_indices {
            let s = sorted(idx.clone());
            prop_assert_eq!(s.len(), k);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&i| i < p));
        }
    }

    #[test]
    fn inter_loss_ignores_feature_scale(p in 2usize..8, scale in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, p, 4);
        let b = random(&mut rng, p, 4);
        let config = CorrespondenceConfig::default();
        let base = inter_loss(&[patch_map(a.clone()), patch_map(b.clone())], &config).unwrap();
        let scaled = inter_loss(&[patch_map(a.map(|x| x * scale)), patch_map(b.map(|x| x * scale))], &config).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn inter_loss_bounded_by_log_pool_plus_two_over_tau(p in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = [patch_map(random(&mut rng, p, 3)), patch_map(random(&mut rng, p, 3))];
        let config = CorrespondenceConfig::default();
        let l = inter_loss(&frames, &config).unwrap();
        // Cosines lie in [-1, 1], which bounds every per-anchor term.
        prop_assert!(l.is_finite());
        prop_assert!(l <= (p as f64).ln() + 2.0 / config.tau + 1e-9);
        prop_assert!(l >= -2.0 / config.tau - 1e-9);
    }
}
