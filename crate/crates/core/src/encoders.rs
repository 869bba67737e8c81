//! Small trainable stand-ins for the video and language backbones.
//!
//! The video side cuts every frame into a grid of `stride`-spaced cells,
//! flattens a `window`-sized neighbourhood around each cell (zero padded at
//! the border) and maps it through one linear layer and `tanh`, so a black
//! neighbourhood encodes to the zero vector. The query
//! side looks up token and position embeddings, mixes them with a shared
//! linear layer and adds a projection of the sentence mean, so every word
//! sees some context. The sum is scaled by a per-position gain, shifted by a
//! bias and passed through `tanh`. The gain lets a word's meaning depend on
//! where it sits in the sentence.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use dualcorr_numcore::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, IoContext, Result};
use crate::params::uniform;

/// `T` frames of `H×W×C` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor>,
    frame_indices: Vec<usize>,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor>, frame_indices: Vec<usize>) -> Result<Self> {
        if frames.len() != frame_indices.len() {
            return Err(Error::Config(format!(
                "{} frames but {} frame indices",
                frames.len(),
                frame_indices.len()
            )));
        }
        if let Some(first) = frames.first() {
            if first.rank() != 3 {
                return Err(Error::Config(format!(
                    "frames must be H×W×C, got {:?}",
                    first.shape()
                )));
            }
            if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
                return Err(Error::Config(format!(
                    "frame shape {:?} differs from {:?}",
                    bad.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self {
            frames,
            frame_indices,
        })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width, channels) of every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames
            .first()
            .map_or((0, 0, 0), |f| (f.shape()[0], f.shape()[1], f.shape()[2]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTokens {
    pub token_ids: Vec<usize>,
    pub raw_words: Vec<String>,
}

impl QueryTokens {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

impl fmt::Display for QueryTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_words.join(" "))
    }
}

/// Closed word list; the line number of a word in the vocabulary file is
/// its id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim_end))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, sentence: &str) -> Result<QueryTokens> {
        let raw_words: Vec<String> = sentence.split_whitespace().map(str::to_owned).collect();
        let token_ids = raw_words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.clone())))
            .collect::<Result<_>>()?;
        Ok(QueryTokens {
            token_ids,
            raw_words,
        })
    }
}

/// Encoded patches of one frame, rows in row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    pub features: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchFeatureMap {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// (row, column) of patch `p`.
    pub fn cell(&self, p: usize) -> (usize, usize) {
        (p / self.grid_w, p % self.grid_w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordFeatures {
    pub features: Tensor,
}

impl WordFeatures {
    pub fn words(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stride: usize,
    /// Side of the pixel neighbourhood read for each cell; centred on the
    /// cell, so `window - stride` must be even.
    pub window: usize,
    pub dim: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_words: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            window: 12,
            dim: 32,
            channels: 3,
            vocab_size: crate::synthgen::builtin_vocabulary().len(),
            max_words: 12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dim == 0 || self.channels == 0 {
            return Err(Error::Config("stride, dim and channels must be positive".into()));
        }
        if self.window < self.stride || !(self.window - self.stride).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window {} must be >= stride {} with an even difference",
                self.window, self.stride
            )));
        }
        if self.vocab_size == 0 || self.max_words == 0 {
            return Err(Error::Config("vocab_size and max_words must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.window * self.window * self.channels
    }

    /// Grid extents for an `height×width` frame.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.stride) || !width.is_multiple_of(self.stride) {
            return Err(Error::Geometry {
                height,
                width,
                stride: self.stride,
            });
        }
        Ok((height / self.stride, width / self.stride))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoderParams {
    /// `window²·C × D`, no bias.
    pub weight: Tensor,
}

impl VideoEncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        let fan_in = config.patch_len();
        Self {
            weight: uniform(rng, &[fan_in, config.dim], fan_in, config.dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoderParams {
    /// `vocab × D`
    pub embedding: Tensor,
    /// `max_words × D`, added to the token embedding by word position.
    pub position: Tensor,
    pub mix: Tensor,
    /// `D × D`, maps the mean input row of the sentence onto every word.
    pub context: Tensor,
    /// `max_words × D`, multiplies the mixed features by word position.
    pub gain: Tensor,
    pub bias: Tensor,
}

impl QueryEncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.dim;
        Self {
            embedding: Tensor::from_fn(&[config.vocab_size, d], |_| rng.gen_range(-1.0..1.0)),
            position: Tensor::from_fn(&[config.max_words, d], |_| rng.gen_range(-0.5..0.5)),
            mix: uniform(rng, &[d, d], d, d),
            context: uniform(rng, &[d, d], d, d),
            gain: Tensor::ones(&[config.max_words, d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

pub struct VideoEncoderVars {
    pub weight: Var,
}

pub struct QueryEncoderVars {
    pub embedding: Var,
    pub position: Var,
    pub mix: Var,
    pub context: Var,
    pub gain: Var,
    pub bias: Var,
}

/// Flattens the neighbourhood of every cell into one row.
///
/// Returns the `P × window²·C` patch matrix with the grid extents.
pub fn patchify(frame: &Tensor, config: &EncoderConfig) -> Result<(Tensor, usize, usize)> {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if c != config.channels {
        return Err(Error::Config(format!(
            "frame has {c} channels, encoder expects {}",
            config.channels
        )));
    }
    let (gh, gw) = config.grid(h, w)?;
    let win = config.window;
    let pad = ((win - config.stride) / 2) as isize;
    let row_len = config.patch_len();
    let src = frame.data();
    let mut out = vec![0.0; gh * gw * row_len];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * row_len..(gy * gw + gx + 1) * row_len];
            let y0 = (gy * config.stride) as isize - pad;
            let x0 = (gx * config.stride) as isize - pad;
            for dy in 0..win {
                let y = y0 + dy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..win {
                    let x = x0 + dx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let from = (y as usize * w + x as usize) * c;
                    let to = (dy * win + dx) * c;
                    row[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, row_len], out)?, gh, gw))
}

/// Records `tanh(patches·W)` for one frame.
pub fn encode_patches(g: &mut Graph, vars: &VideoEncoderVars, patches: Var) -> Result<Var> {
    let lin = g.matmul(patches, vars.weight)?;
    Ok(g.tanh(lin))
}

/// Records the word features of a query.
pub fn encode_tokens(
    g: &mut Graph,
    vars: &QueryEncoderVars,
    tokens: &QueryTokens,
    config: &EncoderConfig,
) -> Result<Var> {
    check_tokens(tokens, config)?;
    let emb = g.gather_rows(vars.embedding, &tokens.token_ids)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.gather_rows(vars.position, &positions)?;
    let x = g.add(emb, pos)?;
    let lin = g.matmul(x, vars.mix)?;
    let mean = g.pool_rows(x, std::slice::from_ref(&positions))?;
    let ctx = g.matmul(mean, vars.context)?;
    let ctx = g.pool_rows(ctx, &vec![vec![0]; tokens.len()])?;
    let lin = g.add(lin, ctx)?;
    let gain = g.gather_rows(vars.gain, &positions)?;
    let lin = g.mul(lin, gain)?;
    let lin = g.add_row(lin, vars.bias)?;
    Ok(g.tanh(lin))
}

fn check_tokens(tokens: &QueryTokens, config: &EncoderConfig) -> Result<()> {
    if tokens.is_empty() || tokens.len() > config.max_words {
        return Err(Error::Config(format!(
            "query length {} outside 1..={}",
            tokens.len(),
            config.max_words
        )));
    }
    if let Some(&id) = tokens.token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::OutOfVocabulary {
            id,
            size: config.vocab_size,
        });
    }
    Ok(())
}

/// Patch features of every frame of `clip`.
pub fn encode_video(
    clip: &VideoClip,
    params: &VideoEncoderParams,
    config: &EncoderConfig,
) -> Result<Vec<PatchFeatureMap>> {
    let mut g = Graph::new();
    let vars = VideoEncoderVars {
        weight: g.constant(params.weight.clone()),
    };
    clip.frames()
        .iter()
        .map(|frame| {
            let (patches, grid_h, grid_w) = patchify(frame, config)?;
            let pv = g.constant(patches);
            let out = encode_patches(&mut g, &vars, pv)?;
            Ok(PatchFeatureMap {
                features: g.value(out).clone(),
                grid_h,
                grid_w,
            })
        })
        .collect()
}

pub fn encode_query(
    tokens: &QueryTokens,
    params: &QueryEncoderParams,
    config: &EncoderConfig,
) -> Result<WordFeatures> {
    let mut g = Graph::new();
    let vars = QueryEncoderVars {
        embedding: g.constant(params.embedding.clone()),
        position: g.constant(params.position.clone()),
        mix: g.constant(params.mix.clone()),
        context: g.constant(params.context.clone()),
        gain: g.constant(params.gain.clone()),
        bias: g.constant(params.bias.clone()),
    };
    let out = encode_tokens(&mut g, &vars, tokens, config)?;
    Ok(WordFeatures {
        features: g.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualcorr_numcore::{finite_diff_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 6,
            max_words: 4,
            dim: 5,
            ..EncoderConfig::default()
        }
    }

    fn random_clip(rng: &mut ChaCha8Rng, frames: usize, side: usize) -> VideoClip {
        let frames = (0..frames)
            .map(|_| Tensor::from_fn(&[side, side, 3], |_| rng.gen()))
            .collect();
        VideoClip::new(frames, (0..2).collect()).unwrap()
    }

    #[test]
    fn default_grid_is_eight_by_eight() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = VideoEncoderParams::init(&cfg, &mut rng);
        let clip = random_clip(&mut rng, 2, 32);
        let maps = encode_video(&clip, &params, &cfg).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].patches(), 64);
        assert_eq!((maps[0].grid_h, maps[0].grid_w), (8, 8));
        assert_eq!(maps[0].features.shape(), &[64, cfg.dim]);
        assert_eq!(maps[0].cell(13), (1, 5));
    }

    #[test]
    fn black_frames_encode_to_zero() {
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = VideoEncoderParams::init(&cfg, &mut rng);
        let clip = VideoClip::new(vec![Tensor::zeros(&[16, 16, 3]); 2], vec![0, 1]).unwrap();
        let maps = encode_video(&clip, &params, &cfg).unwrap();
        assert!(maps.iter().all(|m| m.features.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = VideoEncoderParams::init(&cfg, &mut rng);
        let clip = random_clip(&mut rng, 2, 16);
        let a = encode_video(&clip, &params, &cfg).unwrap();
        let b = encode_video(&clip, &params, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let same = x
                .features
                .data()
                .iter()
                .zip(y.features.data())
                .all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        let cfg = config();
        let frame = Tensor::zeros(&[10, 12, 3]);
        assert!(matches!(patchify(&frame, &cfg), Err(Error::Geometry { .. })));
    }

    #[test]
    fn patch_rows_hold_the_centred_window() {
        let cfg = EncoderConfig {
            stride: 2,
            window: 4,
            channels: 1,
            ..config()
        };
        let frame = Tensor::from_fn(&[4, 4, 1], |i| (i + 1) as f64);
        let (patches, gh, gw) = patchify(&frame, &cfg).unwrap();
        assert_eq!((gh, gw), (2, 2));
        // cell (0,0) window starts at pixel (-1,-1)
        let row = patches.row(0);
        assert_eq!(&row[0..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&row[4..8], &[0.0, 1.0, 2.0, 3.0]);
        // cell (1,1) window covers pixels 1..5 in both axes
        let row = patches.row(3);
        assert_eq!(&row[0..4], &[6.0, 7.0, 8.0, 0.0]);
        assert_eq!(&row[12..16], &[0.0, 0.0, 0.0, 0.0]);
    }

    fn identity_query_params(cfg: &EncoderConfig) -> QueryEncoderParams {
        QueryEncoderParams {
            embedding: Tensor::from_fn(&[cfg.vocab_size, cfg.dim], |i| ((i % 7) as f64 - 3.0) * 0.2),
            position: Tensor::zeros(&[cfg.max_words, cfg.dim]),
            mix: Tensor::identity(cfg.dim),
            context: Tensor::zeros(&[cfg.dim, cfg.dim]),
            gain: Tensor::ones(&[cfg.max_words, cfg.dim]),
            bias: Tensor::zeros(&[cfg.dim]),
        }
    }

    #[test]
    fn single_word_query_is_its_processed_embedding() {
        let cfg = config();
        let params = identity_query_params(&cfg);
        let tokens = QueryTokens {
            token_ids: vec![3],
            raw_words: vec!["x".into()],
        };
        let q = encode_query(&tokens, &params, &cfg).unwrap();
        assert_eq!(q.features.shape(), &[1, cfg.dim]);
        let expected: Vec<f64> = params.embedding.row(3).iter().map(|x| x.tanh()).collect();
        assert_eq!(q.features.row(0), expected.as_slice());
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let cfg = config();
        let params = identity_query_params(&cfg);
        let t = |ids: Vec<usize>| QueryTokens {
            raw_words: ids.iter().map(|i| i.to_string()).collect(),
            token_ids: ids,
        };
        let a = encode_query(&t(vec![1, 4, 2]), &params, &cfg).unwrap();
        let b = encode_query(&t(vec![4, 1, 2]), &params, &cfg).unwrap();
        assert_eq!(a.features.row(0), b.features.row(1));
        assert_eq!(a.features.row(1), b.features.row(0));
        assert_eq!(a.features.row(2), b.features.row(2));
        assert_ne!(a.features.row(0), a.features.row(1));
    }

    #[test]
    fn out_of_vocabulary_id_is_rejected() {
        let cfg = config();
        let params = identity_query_params(&cfg);
        let tokens = QueryTokens {
            token_ids: vec![0, 6],
            raw_words: vec!["a".into(), "b".into()],
        };
        assert!(matches!(
            encode_query(&tokens, &params, &cfg),
            Err(Error::OutOfVocabulary { id: 6, size: 6 })
        ));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = QueryEncoderParams::init(&cfg, &mut rng);
        let tokens = QueryTokens {
            token_ids: vec![2, 0, 2],
            raw_words: vec!["a".into(), "b".into(), "a".into()],
        };
        let report = finite_diff_check(
            |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let vars = QueryEncoderVars {
                    embedding: v[0],
                    position: v[1],
                    mix: v[2],
                    context: v[3],
                    gain: v[4],
                    bias: v[5],
                };
                let q = encode_tokens(g, &vars, &tokens, &cfg)?;
                Ok(g.sum(q))
            },
            &[params.embedding, params.position, params.mix, params.context, params.gain.map(|x| x + 0.1 * x.sin()), params.bias],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn vocabulary_round_trip_and_tokenize() {
        let v = Vocabulary::new(["the", "red", "square"]).unwrap();
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        let t = v.tokenize("the red square").unwrap();
        assert_eq!(t.token_ids, vec![0, 1, 2]);
        assert!(matches!(v.tokenize("the blue"), Err(Error::UnknownWord(_))));
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }
}
