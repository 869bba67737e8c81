//! The full grounding network: encoders, fusion and head, with the flat
//! parameter list used by the optimizer and checkpoints.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dualcorr_numcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    encode_patches, encode_tokens, patchify, EncoderConfig, QueryEncoderParams, QueryEncoderVars,
    QueryTokens, VideoClip, VideoEncoderParams, VideoEncoderVars,
};
use crate::error::{Error, IoContext, Result};
use crate::fusion::{attend_graph, FusionParams, FusionVars};
use crate::grounding::{head_graph, GridGeometry, GroundingPrediction, HeadParams, HeadVars};
use crate::params::uniform;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the tanh layer in front of the box head; 0 feeds the head
    /// directly.
    pub head_hidden: usize,
    /// Anchor side in pixels.
    pub anchor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 0,
            anchor: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.anchor > 0.0 && self.anchor.is_finite()) {
            return Err(Error::Config(format!("anchor must be positive, got {}", self.anchor)));
        }
        Ok(())
    }

    /// Width of the per-cell head input: patch feature, fused feature and
    /// their elementwise product.
    pub fn head_input(&self) -> usize {
        3 * self.encoder.dim
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<GridGeometry> {
        let (grid_h, grid_w) = self.encoder.grid(height, width)?;
        Ok(GridGeometry {
            grid_h,
            grid_w,
            image_h: height,
            image_w: width,
            anchor_w: self.anchor,
            anchor_h: self.anchor,
        })
    }

    fn header(&self) -> Tensor {
        let e = &self.encoder;
        Tensor::vector(vec![
            e.stride as f64,
            e.window as f64,
            e.dim as f64,
            e.channels as f64,
            e.vocab_size as f64,
            e.max_words as f64,
            self.head_hidden as f64,
            self.anchor,
        ])
    }

    fn from_header(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if t.rank() != 1 || d.len() != 8 {
            return Err(Error::Config("checkpoint header has the wrong layout".into()));
        }
        let config = Self {
            encoder: EncoderConfig {
                stride: d[0] as usize,
                window: d[1] as usize,
                dim: d[2] as usize,
                channels: d[3] as usize,
                vocab_size: d[4] as usize,
                max_words: d[5] as usize,
            },
            head_hidden: d[6] as usize,
            anchor: d[7],
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub video: VideoEncoderParams,
    pub query: QueryEncoderParams,
    pub fusion: FusionParams,
    pub hidden: Option<HiddenParams>,
    pub head: HeadParams,
}

/// Graph handles for every parameter.
pub struct ModelVars {
    pub video: VideoEncoderVars,
    pub query: QueryEncoderVars,
    pub fusion: FusionVars,
    pub hidden: Option<(Var, Var)>,
    pub head: HeadVars,
    /// Same order as [`ModelParams::tensors`].
    pub all: Vec<Var>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = VideoEncoderParams::init(&config.encoder, &mut rng);
        let query = QueryEncoderParams::init(&config.encoder, &mut rng);
        let fusion = FusionParams::init(config.encoder.dim, &mut rng);
        let input = config.head_input();
        let hidden = (config.head_hidden > 0).then(|| HiddenParams {
            weight: uniform(&mut rng, &[input, config.head_hidden], input, config.head_hidden),
            bias: Tensor::zeros(&[config.head_hidden]),
        });
        let head_in = if config.head_hidden > 0 { config.head_hidden } else { input };
        let head = HeadParams::init(head_in, &mut rng);
        Ok(Self {
            config: config.clone(),
            video,
            query,
            fusion,
            hidden,
            head,
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "video.weight",
            "query.embedding",
            "query.position",
            "query.mix",
            "query.context",
            "query.gain",
            "query.bias",
            "fusion.w",
            "fusion.w_v",
            "fusion.w_q",
        ];
        if self.hidden.is_some() {
            names.extend(["hidden.weight", "hidden.bias"]);
        }
        names.extend(["head.weight", "head.bias"]);
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.video.weight,
            &self.query.embedding,
            &self.query.position,
            &self.query.mix,
            &self.query.context,
            &self.query.gain,
            &self.query.bias,
            &self.fusion.w,
            &self.fusion.w_v,
            &self.fusion.w_q,
        ];
        if let Some(h) = &self.hidden {
            out.extend([&h.weight, &h.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.video.weight,
            &mut self.query.embedding,
            &mut self.query.position,
            &mut self.query.mix,
            &mut self.query.context,
            &mut self.query.gain,
            &mut self.query.bias,
            &mut self.fusion.w,
            &mut self.fusion.w_v,
            &mut self.fusion.w_q,
        ];
        if let Some(h) = &mut self.hidden {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let all: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        ModelVars::from_slice(&all, self.hidden.is_some())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        self.config.header().write_to(&mut w)?;
        for t in self.tensors() {
            t.write_to(&mut w)?;
        }
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).at(path)?;
        let mut r = BufReader::new(file);
        let config = ModelConfig::from_header(&Tensor::read_from(&mut r)?)?;
        let mut params = Self::init(&config, 0)?;
        for (name, t) in params.names().into_iter().zip(params.tensors_mut()) {
            let loaded = Tensor::read_from(&mut r)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    reason: format!("{name} has shape {:?}, expected {:?}", loaded.shape(), t.shape()),
                });
            }
            *t = loaded;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).at(path)?;
        if !rest.is_empty() {
            return Err(Error::Data {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", rest.len()),
            });
        }
        Ok(params)
    }
}

impl ModelVars {
    /// Rebuilds the handles from a flat list in [`ModelParams::tensors`]
    /// order.
    pub fn from_slice(all: &[Var], with_hidden: bool) -> Self {
        let hidden = with_hidden.then(|| (all[10], all[11]));
        let h = if with_hidden { 12 } else { 10 };
        Self {
            video: VideoEncoderVars { weight: all[0] },
            query: QueryEncoderVars {
                embedding: all[1],
                position: all[2],
                mix: all[3],
                context: all[4],
                gain: all[5],
                bias: all[6],
            },
            fusion: FusionVars {
                w: all[7],
                w_v: all[8],
                w_q: all[9],
            },
            hidden,
            head: HeadVars {
                weight: all[h],
                bias: all[h + 1],
            },
            all: all.to_vec(),
        }
    }
}

/// Graph handles produced by one forward pass over a clip.
pub struct ClipForward {
    /// Pre-fusion patch features per frame, `P×D`.
    pub patches: Vec<Var>,
    /// `S×D`
    pub words: Var,
    pub fused: Vec<Var>,
    /// `P×S` per frame.
    pub attention: Vec<Var>,
    /// Head output per frame, `P×5`.
    pub head: Vec<Var>,
    pub grid: GridGeometry,
}

/// Records the network over every frame of `clip`.
pub fn forward_graph(
    g: &mut Graph,
    vars: &ModelVars,
    config: &ModelConfig,
    clip: &VideoClip,
    tokens: &QueryTokens,
) -> Result<ClipForward> {
    let (h, w, _) = clip.dims();
    let grid = config.grid(h, w)?;
    let words = encode_tokens(g, &vars.query, tokens, &config.encoder)?;
    let mut out = ClipForward {
        patches: Vec::with_capacity(clip.len()),
        words,
        fused: Vec::with_capacity(clip.len()),
        attention: Vec::with_capacity(clip.len()),
        head: Vec::with_capacity(clip.len()),
        grid,
    };
    for frame in clip.frames() {
        let (patches, _, _) = patchify(frame, &config.encoder)?;
        let x = g.constant(patches);
        let v = encode_patches(g, &vars.video, x)?;
        let (fused, attention) = attend_graph(g, &vars.fusion, v, words)?;
        let agree = g.mul(v, fused)?;
        let mut input = g.concat_cols(v, fused)?;
        input = g.concat_cols(input, agree)?;
        if let Some((wh, bh)) = vars.hidden {
            let lin = g.matmul(input, wh)?;
            let lin = g.add_row(lin, bh)?;
            input = g.tanh(lin);
        }
        let head = head_graph(g, &vars.head, input)?;
        out.patches.push(v);
        out.fused.push(fused);
        out.attention.push(attention);
        out.head.push(head);
    }
    Ok(out)
}

/// Per-frame outputs of the trained network.
#[derive(Clone, Debug)]
pub struct ClipOutput {
    pub predictions: Vec<GroundingPrediction>,
    pub patches: Vec<Tensor>,
    pub words: Tensor,
    pub attention: Vec<Tensor>,
    pub grid: GridGeometry,
}

pub fn run_clip(params: &ModelParams, clip: &VideoClip, tokens: &QueryTokens) -> Result<ClipOutput> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let fwd = forward_graph(&mut g, &vars, &params.config, clip, tokens)?;
    let predictions = fwd
        .head
        .iter()
        .map(|&h| GroundingPrediction::from_head_output(g.value(h), &fwd.grid))
        .collect::<Result<_>>()?;
    Ok(ClipOutput {
        predictions,
        patches: fwd.patches.iter().map(|&v| g.value(v).clone()).collect(),
        words: g.value(fwd.words).clone(),
        attention: fwd.attention.iter().map(|&a| g.value(a).clone()).collect(),
        grid: fwd.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sample, GenConfig};

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        params.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), params);

        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, bytes).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn names_match_tensors() {
        for hidden in [0, 8] {
            let config = ModelConfig {
                head_hidden: hidden,
                ..ModelConfig::default()
            };
            let params = ModelParams::init(&config, 0).unwrap();
            assert_eq!(params.names().len(), params.tensors().len());
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            assert_eq!(g.shape(vars.head.weight)[0], if hidden > 0 { 8 } else { 96 });
        }
    }

    #[test]
    fn forward_shapes() {
        let sample = generate_sample(0, &GenConfig::default()).unwrap();
        let params = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let out = run_clip(&params, &sample.clip, &sample.tokens).unwrap();
        assert_eq!(out.predictions.len(), 12);
        assert_eq!(out.patches[0].shape(), &[64, 32]);
        assert_eq!(out.words.shape(), &[9, 32]);
        assert_eq!(out.attention[0].shape(), &[64, 9]);
        assert_eq!(out.predictions[0].conf_logits.len(), 64);
    }

    #[test]
    fn same_seed_same_init() {
        let c = ModelConfig::default();
        assert_eq!(ModelParams::init(&c, 5).unwrap(), ModelParams::init(&c, 5).unwrap());
        assert_ne!(ModelParams::init(&c, 5).unwrap(), ModelParams::init(&c, 6).unwrap());
    }
}
