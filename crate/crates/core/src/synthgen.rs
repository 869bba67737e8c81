//! Seeded synthetic referring-expression videos.
//!
//! Each scene holds one referent and a few distractors (filled squares,
//! circles and triangles from an eight-colour palette) moving on straight
//! lines over a black background. The query names the referent by colour
//! and shape, its motion, and one contextual object. Occlusion and blur
//! events are recorded alongside the frames.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualcorr_numcore::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{QueryTokens, VideoClip, Vocabulary};
use crate::error::{Error, IoContext, Result};
use crate::grounding::{BBox, GridGeometry, GroundTruthBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point lies inside a shape of side `size` centred at
    /// `(cx, cy)`.
    fn covers(self, x: f64, y: f64, cx: f64, cy: f64, size: f64) -> bool {
        let half = size / 2.0;
        match self {
            Shape::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= half * half,
            Shape::Triangle => {
                // apex up, base along the bottom edge
                let t = (y - (cy - half)) / size;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * half
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

const DIRECTIONS: [&str; 5] = ["left", "right", "up", "down", "nowhere"];
const OCCLUDER: [f64; 3] = [0.5, 0.5, 0.5];

/// Every word the query template can produce, in id order.
pub fn builtin_vocabulary() -> Vocabulary {
    let words = ["the", "moving", "past"]
        .into_iter()
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(Shape::ALL.iter().map(|s| s.word()))
        .chain(DIRECTIONS);
    Vocabulary::new(words).expect("builtin words are distinct")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

impl ObjectSpec {
    pub fn center_at(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        (
            self.start.0 + self.velocity.0 * t,
            self.start.1 + self.velocity.1 * t,
        )
    }

    /// Analytic bounding box of the shape at `frame`.
    pub fn bbox_at(&self, frame: usize) -> BBox {
        let (cx, cy) = self.center_at(frame);
        BBox::from_center(cx, cy, self.size, self.size)
    }

    pub fn direction_word(&self) -> &'static str {
        let (vx, vy) = self.velocity;
        if vx.hypot(vy) < 0.1 {
            "nowhere"
        } else if vx.abs() >= vy.abs() {
            if vx < 0.0 {
                "left"
            } else {
                "right"
            }
        } else if vy < 0.0 {
            "up"
        } else {
            "down"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Occlusion,
    Blur,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Occlusion => "occlusion",
            EventKind::Blur => "blur",
        })
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occlusion" => Ok(EventKind::Occlusion),
            "blur" => Ok(EventKind::Blur),
            other => Err(Error::Config(format!("unknown event kind {other:?}"))),
        }
    }
}

/// A stress event over an inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
    pub target: usize,
}

impl Event {
    pub fn covers(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub referent_index: usize,
    pub events: Vec<Event>,
}

impl SceneSpec {
    pub fn referent(&self) -> &ObjectSpec {
        &self.objects[self.referent_index]
    }

    /// The distractor named in the query, if any.
    pub fn context_object(&self) -> Option<&ObjectSpec> {
        self.objects
            .iter()
            .enumerate()
            .find(|&(i, _)| i != self.referent_index)
            .map(|(_, o)| o)
    }

    pub fn query_text(&self) -> String {
        let r = self.referent();
        let mut s = format!(
            "the {} {} moving {}",
            r.color.word(),
            r.shape.word(),
            r.direction_word()
        );
        if let Some(c) = self.context_object() {
            s.push_str(&format!(" past the {} {}", c.color.word(), c.shape.word()));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-axis speed bound in pixels per frame.
    pub max_speed: f64,
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    /// Side of the occluder relative to the referent box.
    pub occlusion_coverage: f64,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Distractors share one attribute with the referent.
    pub distractor_heavy: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            height: 32,
            width: 32,
            min_distractors: 1,
            max_distractors: 2,
            min_size: 8.0,
            max_size: 12.0,
            max_speed: 1.0,
            occlusion_prob: 0.25,
            blur_prob: 0.25,
            occlusion_coverage: 0.6,
            min_event_len: 2,
            max_event_len: 4,
            distractor_heavy: false,
        }
    }
}

impl GenConfig {
    pub fn distractor_heavy() -> Self {
        Self {
            min_distractors: 2,
            max_distractors: 3,
            distractor_heavy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad(format!("bad size range {}..{}", self.min_size, self.max_size));
        }
        let travel = self.max_speed.abs() * (self.frames - 1) as f64;
        let room = self.height.min(self.width) as f64 - self.max_size;
        if travel > room {
            return bad(format!(
                "objects may travel {travel} px but only {room} px keep them in frame"
            ));
        }
        if self.min_distractors > self.max_distractors {
            return bad("min_distractors exceeds max_distractors".into());
        }
        let limit = if self.distractor_heavy {
            Shape::ALL.len() - 1 + Color::ALL.len() - 1
        } else {
            Shape::ALL.len() * Color::ALL.len() - 1
        };
        if self.max_distractors > limit {
            return bad(format!("at most {limit} distinct distractors"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.blur_prob) {
            return bad("event probabilities must lie in [0, 1]".into());
        }
        if self.min_event_len == 0
            || self.min_event_len > self.max_event_len
            || self.max_event_len > self.frames
        {
            return bad("bad event length range".into());
        }
        Ok(())
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("min_distractors", self.min_distractors.to_string()),
            ("max_distractors", self.max_distractors.to_string()),
            ("min_size", self.min_size.to_string()),
            ("max_size", self.max_size.to_string()),
            ("max_speed", self.max_speed.to_string()),
            ("occlusion_prob", self.occlusion_prob.to_string()),
            ("blur_prob", self.blur_prob.to_string()),
            ("occlusion_coverage", self.occlusion_coverage.to_string()),
            ("min_event_len", self.min_event_len.to_string()),
            ("max_event_len", self.max_event_len.to_string()),
            ("distractor_heavy", self.distractor_heavy.to_string()),
        ]
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "frames" => self.frames = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "min_distractors" => self.min_distractors = parse(key, value)?,
            "max_distractors" => self.max_distractors = parse(key, value)?,
            "min_size" => self.min_size = parse(key, value)?,
            "max_size" => self.max_size = parse(key, value)?,
            "max_speed" => self.max_speed = parse(key, value)?,
            "occlusion_prob" => self.occlusion_prob = parse(key, value)?,
            "blur_prob" => self.blur_prob = parse(key, value)?,
            "occlusion_coverage" => self.occlusion_coverage = parse(key, value)?,
            "min_event_len" => self.min_event_len = parse(key, value)?,
            "max_event_len" => self.max_event_len = parse(key, value)?,
            "distractor_heavy" => self.distractor_heavy = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown generator key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub clip: VideoClip,
    pub tokens: QueryTokens,
    /// Referent box per frame, kept during occlusion.
    pub gt_boxes: Vec<BBox>,
    pub events: Vec<Event>,
    /// Present for freshly generated samples.
    pub scene: Option<SceneSpec>,
}

impl VideoSample {
    pub fn ground_truth(&self, grid: &GridGeometry) -> Result<Vec<GroundTruthBox>> {
        self.gt_boxes
            .iter()
            .map(|b| GroundTruthBox::new(*b, grid))
            .collect()
    }

    pub fn has_event(&self, kind: EventKind) -> bool {
        self.events.iter().any(|e| e.kind == kind)
    }

    pub fn frame_has_event(&self, frame: usize, kind: EventKind) -> bool {
        self.events.iter().any(|e| e.kind == kind && e.covers(frame))
    }
}

/// Deterministic per-index seed derivation.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_attributes<R: Rng>(rng: &mut R, config: &GenConfig, count: usize) -> Vec<(Shape, Color)> {
    let referent = (
        *Shape::ALL.choose(rng).expect("shapes"),
        *Color::ALL.choose(rng).expect("colors"),
    );
    let mut pool: Vec<(Shape, Color)> = if config.distractor_heavy {
        let same_shape = Color::ALL
            .iter()
            .filter(|&&c| c != referent.1)
            .map(|&c| (referent.0, c));
        let same_color = Shape::ALL
            .iter()
            .filter(|&&s| s != referent.0)
            .map(|&s| (s, referent.1));
        same_shape.chain(same_color).collect()
    } else {
        Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .filter(|&a| a != referent)
            .collect()
    };
    pool.shuffle(rng);
    if config.distractor_heavy && count >= 2 {
        // keep at least one distractor of each kind
        let first_color = pool.iter().position(|a| a.0 == referent.0);
        let first_shape = pool.iter().position(|a| a.1 == referent.1);
        if let (Some(c), Some(s)) = (first_color, first_shape) {
            pool.swap(0, c.min(s));
            let other = if c < s { s } else { c };
            let other = if other == 0 { c.min(s) } else { other };
            pool.swap(1, other);
        }
    }
    std::iter::once(referent)
        .chain(pool.into_iter().take(count))
        .collect()
}

fn sample_trajectory<R: Rng>(rng: &mut R, config: &GenConfig, size: f64) -> ((f64, f64), (f64, f64)) {
    let span = (config.frames - 1) as f64;
    let mut axis = |extent: usize| {
        let v = if config.max_speed > 0.0 {
            rng.gen_range(-config.max_speed..=config.max_speed)
        } else {
            0.0
        };
        let travel = v * span;
        let lo = size / 2.0 - travel.min(0.0);
        let hi = extent as f64 - size / 2.0 - travel.max(0.0);
        let start = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        (start, v)
    };
    let (sx, vx) = axis(config.width);
    let (sy, vy) = axis(config.height);
    ((sx, sy), (vx, vy))
}

fn min_gap(a: &ObjectSpec, b: &ObjectSpec, frames: usize) -> f64 {
    (0..frames)
        .map(|t| {
            let (ax, ay) = a.center_at(t);
            let (bx, by) = b.center_at(t);
            (ax - bx).hypot(ay - by)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Draws a scene description.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_distractors = rng.gen_range(config.min_distractors..=config.max_distractors);
    let attributes = sample_attributes(&mut rng, config, n_distractors);

    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(attributes.len());
    for &(shape, color) in &attributes {
        let mut candidate = None;
        for _ in 0..64 {
            let size = rng.gen_range(config.min_size..=config.max_size);
            let (start, velocity) = sample_trajectory(&mut rng, config, size);
            let obj = ObjectSpec {
                shape,
                color,
                size,
                start,
                velocity,
            };
            let clear = objects
                .iter()
                .all(|o| min_gap(o, &obj, config.frames) >= 0.5 * (o.size + obj.size));
            candidate = Some(obj);
            if clear {
                break;
            }
        }
        objects.push(candidate.expect("at least one attempt"));
    }

    let mut events = Vec::new();
    for (kind, prob) in [
        (EventKind::Occlusion, config.occlusion_prob),
        (EventKind::Blur, config.blur_prob),
    ] {
        if rng.gen_bool(prob) {
            let len = rng.gen_range(config.min_event_len..=config.max_event_len);
            let start = rng.gen_range(0..=config.frames - len);
            events.push(Event {
                kind,
                start,
                end: start + len - 1,
                target: 0,
            });
        }
    }
    Ok(SceneSpec {
        objects,
        referent_index: 0,
        events,
    })
}

fn paint(frame: &mut Tensor, width: usize, height: usize, rgb: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
    let data = frame.data_mut();
    for y in 0..height {
        for x in 0..width {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                let o = (y * width + x) * 3;
                data[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
}

fn box_blur(frame: &Tensor) -> Tensor {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let src = frame.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += src[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = acc / 9.0;
            }
        }
    }
    Tensor::new(frame.shape().to_vec(), out).expect("same shape")
}

/// Renders frame `t` of a scene.
pub fn render_frame(scene: &SceneSpec, t: usize, config: &GenConfig) -> Tensor {
    let (w, h) = (config.width, config.height);
    let mut frame = Tensor::zeros(&[h, w, 3]);
    // referent last so distractors never hide it
    let order = (0..scene.objects.len())
        .filter(|&i| i != scene.referent_index)
        .chain(std::iter::once(scene.referent_index));
    for i in order {
        let o = &scene.objects[i];
        let (cx, cy) = o.center_at(t);
        paint(&mut frame, w, h, o.color.rgb(), |x, y| o.shape.covers(x, y, cx, cy, o.size));
    }
    for e in scene.events.iter().filter(|e| e.covers(t)) {
        match e.kind {
            EventKind::Occlusion => {
                let target = &scene.objects[scene.referent_index];
                let (cx, cy) = target.center_at(t);
                let side = target.size * config.occlusion_coverage;
                let cover = BBox::from_center(cx, cy, side, side);
                paint(&mut frame, w, h, OCCLUDER, |x, y| cover.contains(x, y));
            }
            EventKind::Blur => frame = box_blur(&frame),
        }
    }
    frame
}

/// Renders a full sample from a scene.
pub fn render_sample(scene: &SceneSpec, config: &GenConfig, vocab: &Vocabulary) -> Result<VideoSample> {
    let frames: Vec<Tensor> = (0..config.frames).map(|t| render_frame(scene, t, config)).collect();
    let clip = VideoClip::new(frames, (0..config.frames).collect())?;
    let tokens = vocab.tokenize(&scene.query_text())?;
    let gt_boxes = (0..config.frames)
        .map(|t| scene.referent().bbox_at(t))
        .collect();
    Ok(VideoSample {
        clip,
        tokens,
        gt_boxes,
        events: scene.events.clone(),
        scene: Some(scene.clone()),
    })
}

pub fn generate_sample(seed: u64, config: &GenConfig) -> Result<VideoSample> {
    let scene = generate_scene(seed, config)?;
    render_sample(&scene, config, &builtin_vocabulary())
}

/// `T` frames at stride `F` from a random start, with their boxes.
pub fn sample_clip<R: Rng>(
    sample: &VideoSample,
    clip_len: usize,
    frame_distance: usize,
    rng: &mut R,
) -> Result<(VideoClip, Vec<BBox>)> {
    let total = sample.clip.len();
    let span = clip_len.saturating_sub(1) * frame_distance + 1;
    if clip_len == 0 || frame_distance == 0 || span > total {
        return Err(Error::InsufficientFrames {
            needed: span.max(1),
            available: total,
        });
    }
    let start = rng.gen_range(0..=total - span);
    let indices: Vec<usize> = (0..clip_len).map(|k| start + k * frame_distance).collect();
    let frames = indices.iter().map(|&i| sample.clip.frames()[i].clone()).collect();
    let boxes = indices.iter().map(|&i| sample.gt_boxes[i]).collect();
    let source: Vec<usize> = indices
        .iter()
        .map(|&i| sample.clip.frame_indices()[i])
        .collect();
    Ok((VideoClip::new(frames, source)?, boxes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

impl FlipAxis {
    fn swapped(self, word: &str) -> &str {
        match (self, word) {
            (FlipAxis::Horizontal, "left") => "right",
            (FlipAxis::Horizontal, "right") => "left",
            (FlipAxis::Vertical, "up") => "down",
            (FlipAxis::Vertical, "down") => "up",
            _ => word,
        }
    }
}

/// Mirrors every frame and box, swapping the direction words the mirror
/// reverses.
pub fn flip_clip(
    clip: &VideoClip,
    boxes: &[BBox],
    tokens: &QueryTokens,
    vocab: &Vocabulary,
    axis: FlipAxis,
) -> Result<(VideoClip, Vec<BBox>, QueryTokens)> {
    let (h, w, c) = clip.dims();
    let frames = clip
        .frames()
        .iter()
        .map(|f| {
            let src = f.data();
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match axis {
                        FlipAxis::Horizontal => (y, w - 1 - x),
                        FlipAxis::Vertical => (h - 1 - y, x),
                    };
                    let (o, i) = ((y * w + x) * c, (sy * w + sx) * c);
                    out[o..o + c].copy_from_slice(&src[i..i + c]);
                }
            }
            Tensor::new(f.shape().to_vec(), out)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (wf, hf) = (w as f64, h as f64);
    let boxes = boxes
        .iter()
        .map(|b| match axis {
            FlipAxis::Horizontal => BBox::new(wf - b.x_max, b.y_min, wf - b.x_min, b.y_max),
            FlipAxis::Vertical => BBox::new(b.x_min, hf - b.y_max, b.x_max, hf - b.y_min),
        })
        .collect();
    let sentence: Vec<&str> = tokens.raw_words.iter().map(|w| axis.swapped(w)).collect();
    let tokens = vocab.tokenize(&sentence.join(" "))?;
    Ok((VideoClip::new(frames, clip.frame_indices().to_vec())?, boxes, tokens))
}

/// Repaints every pixel that carries a palette colour with its image under
/// `perm` (indices into [`Color::ALL`]) and renames colour words to match.
/// Other pixels, such as the background, the occluder and blurred edges,
/// are kept.
pub fn permute_colors(
    clip: &VideoClip,
    tokens: &QueryTokens,
    vocab: &Vocabulary,
    perm: &[usize; 8],
) -> Result<(VideoClip, QueryTokens)> {
    let palette: Vec<[f64; 3]> = Color::ALL.iter().map(|c| c.rgb()).collect();
    let frames = clip
        .frames()
        .iter()
        .map(|f| {
            let mut t = f.clone();
            for px in t.data_mut().chunks_exact_mut(3) {
                if let Some(i) = palette.iter().position(|c| c[..] == px[..]) {
                    px.copy_from_slice(&palette[perm[i]]);
                }
            }
            t
        })
        .collect();
    let sentence: Vec<&str> = tokens
        .raw_words
        .iter()
        .map(|w| match Color::ALL.iter().position(|c| c.word() == w) {
            Some(i) => Color::ALL[perm[i]].word(),
            None => w.as_str(),
        })
        .collect();
    let tokens = vocab.tokenize(&sentence.join(" "))?;
    Ok((VideoClip::new(frames, clip.frame_indices().to_vec())?, tokens))
}

/// Samples with the generator settings and seed that produced them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub config: GenConfig,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn generate(n: usize, seed: u64, config: &GenConfig) -> Result<Self> {
        config.validate()?;
        let samples = (0..n as u64)
            .map(|i| generate_sample(mix_seed(seed, i), config))
            .collect::<Result<_>>()?;
        Ok(Self {
            seed,
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Train and test indices. Samples are ranked by a hash of
    /// `(seed, index)` and the lowest `⌊n·test_fraction⌋` go to test.
    pub fn split(&self, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.samples.len();
        let n_test = ((n as f64) * test_fraction).floor() as usize;
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by_key(|&i| (mix_seed(self.seed ^ 0x5EED_5EED, i as u64), i));
        let mut test: Vec<usize> = ranked[..n_test].to_vec();
        let mut train: Vec<usize> = ranked[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (train, test)
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<VideoSample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Writes the dataset directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut header = format!("seed={}\nsamples={}\n", self.seed, self.samples.len());
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("gen.{k}={v}\n"));
        }
        let p = dir.join("dataset.txt");
        fs::write(&p, header).at(&p)?;
        builtin_vocabulary().save(&dir.join("vocab.txt"))?;
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("sample_{i:04}");
            write_sample(s, &dir.join(&name))?;
            manifest.push_str(&name);
            manifest.push('\n');
        }
        let p = dir.join("manifest.txt");
        fs::write(&p, manifest).at(&p)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join("dataset.txt");
        let header = fs::read_to_string(&header_path).at(&header_path)?;
        let mut seed = None;
        let mut config = GenConfig::default();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data {
                path: header_path.clone(),
                reason: format!("expected key=value, got {line:?}"),
            })?;
            match k {
                "seed" => seed = Some(v.parse().map_err(|_| data_err(&header_path, "bad seed"))?),
                "samples" => {}
                _ => match k.strip_prefix("gen.") {
                    Some(gk) => config.set(gk, v)?,
                    None => return Err(data_err(&header_path, &format!("unknown key {k}"))),
                },
            }
        }
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let manifest_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).at(&manifest_path)?;
        let samples = manifest
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|name| read_sample(&dir.join(name.trim()), &vocab))
            .collect::<Result<_>>()?;
        Ok(Self {
            seed: seed.ok_or_else(|| data_err(&header_path, "missing seed"))?,
            config,
            samples,
        })
    }
}

fn data_err(path: &Path, reason: &str) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Generates `n` samples and writes them under `dir`.
pub fn make_dataset(n: usize, seed: u64, config: &GenConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(n, seed, config)?;
    ds.save(dir)?;
    Ok(ds)
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:03}.bin"))
}

pub fn write_sample(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in sample.clip.frames().iter().enumerate() {
        let p = frame_path(dir, i);
        fs::write(&p, f.to_bytes()).at(&p)?;
    }
    let p = dir.join("query.txt");
    fs::write(&p, format!("{}\n", sample.tokens)).at(&p)?;
    let boxes: String = sample
        .gt_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{i} {b}\n"))
        .collect();
    let p = dir.join("boxes.txt");
    fs::write(&p, boxes).at(&p)?;
    let events: String = sample
        .events
        .iter()
        .map(|e| format!("{} {} {}\n", e.kind, e.start, e.end))
        .collect();
    let p = dir.join("events.txt");
    fs::write(&p, events).at(&p)
}

pub fn read_sample(dir: &Path, vocab: &Vocabulary) -> Result<VideoSample> {
    let query_path = dir.join("query.txt");
    let query = fs::read_to_string(&query_path).at(&query_path)?;
    let tokens = vocab.tokenize(query.trim())?;

    let boxes_path = dir.join("boxes.txt");
    let text = fs::read_to_string(&boxes_path).at(&boxes_path)?;
    let mut gt_boxes = Vec::new();
    for (expected, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let (idx, rest) = line
            .trim()
            .split_once(' ')
            .ok_or_else(|| data_err(&boxes_path, line))?;
        if idx.parse::<usize>().ok() != Some(expected) {
            return Err(data_err(&boxes_path, &format!("frame index out of order: {line:?}")));
        }
        gt_boxes.push(rest.parse::<BBox>()?);
    }

    let mut frames = Vec::with_capacity(gt_boxes.len());
    for i in 0..gt_boxes.len() {
        let p = frame_path(dir, i);
        let bytes = fs::read(&p).at(&p)?;
        frames.push(Tensor::from_bytes(&bytes)?);
    }

    let events_path = dir.join("events.txt");
    let text = fs::read_to_string(&events_path).at(&events_path)?;
    let mut events = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [kind, start, end] = parts.as_slice() else {
            return Err(data_err(&events_path, line));
        };
        events.push(Event {
            kind: kind.parse()?,
            start: start.parse().map_err(|_| data_err(&events_path, line))?,
            end: end.parse().map_err(|_| data_err(&events_path, line))?,
            target: 0,
        });
    }
    let n = frames.len();
    Ok(VideoSample {
        clip: VideoClip::new(frames, (0..n).collect())?,
        tokens,
        gt_boxes,
        events,
        scene: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = GenConfig::default();
        let a = generate_sample(42, &cfg).unwrap();
        let b = generate_sample(42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(43, &cfg).unwrap();
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn default_sample_shape() {
        let s = generate_sample(1, &GenConfig::default()).unwrap();
        assert_eq!(s.clip.len(), 12);
        assert_eq!(s.clip.dims(), (32, 32, 3));
        assert_eq!(s.gt_boxes.len(), 12);
        assert!(s.tokens.len() == 9);
        assert_eq!(s.tokens.raw_words[0], "the");
        assert_eq!(s.tokens.raw_words[5], "past");
    }

    #[test]
    fn zero_velocity_keeps_box_fixed() {
        let cfg = GenConfig {
            max_speed: 0.0,
            ..GenConfig::default()
        };
        let s = generate_sample(5, &cfg).unwrap();
        assert!(s.gt_boxes.windows(2).all(|w| w[0] == w[1]));
        assert!(s.tokens.raw_words.contains(&"nowhere".to_string()));
    }

    #[test]
    fn out_of_frame_configs_are_rejected() {
        let cfg = GenConfig {
            max_speed: 3.0,
            ..GenConfig::default()
        };
        assert!(generate_sample(0, &cfg).is_err());
    }

    #[test]
    fn clip_sampling() {
        let cfg = GenConfig {
            frames: 2,
            min_event_len: 1,
            max_event_len: 2,
            ..GenConfig::default()
        };
        let s = generate_sample(3, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, boxes) = sample_clip(&s, 2, 1, &mut rng).unwrap();
        assert_eq!(clip.frame_indices(), &[0, 1]);
        assert_eq!(clip.frames(), s.clip.frames());
        assert_eq!(boxes, s.gt_boxes);
        assert!(sample_clip(&s, 3, 1, &mut rng).is_err());

        let s = generate_sample(3, &GenConfig::default()).unwrap();
        for seed in 0..20 {
            let (clip, _) = sample_clip(&s, 4, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let idx = clip.frame_indices();
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 3));
            let (again, _) = sample_clip(&s, 4, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(again.frame_indices(), idx);
        }
    }

    #[test]
    fn flips_mirror_pixels_boxes_and_words() {
        let s = generate_sample(11, &GenConfig::default()).unwrap();
        let vocab = builtin_vocabulary();
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let (clip, boxes, tokens) = flip_clip(&s.clip, &s.gt_boxes, &s.tokens, &vocab, axis).unwrap();
            let f0 = &s.clip.frames()[0];
            let g0 = &clip.frames()[0];
            for ch in 0..3 {
                let (a, b) = match axis {
                    FlipAxis::Horizontal => (f0.get(&[3, 0, ch]), g0.get(&[3, 31, ch])),
                    FlipAxis::Vertical => (f0.get(&[0, 5, ch]), g0.get(&[31, 5, ch])),
                };
                assert_eq!(a, b);
            }
            assert_eq!(tokens.len(), s.tokens.len());
            let (back_clip, back_boxes, back_tokens) = flip_clip(&clip, &boxes, &tokens, &vocab, axis).unwrap();
            assert_eq!(back_clip, s.clip);
            assert_eq!(back_tokens, s.tokens);
            for (a, b) in back_boxes.iter().zip(&s.gt_boxes) {
                assert!((a.x_min - b.x_min).abs() < 1e-12 && (a.y_max - b.y_max).abs() < 1e-12);
            }
        }
        let q = vocab.tokenize("the red square moving left").unwrap();
        let (_, _, t) = flip_clip(&s.clip, &s.gt_boxes, &q, &vocab, FlipAxis::Horizontal).unwrap();
        assert_eq!(t.raw_words[4], "right");
    }

    #[test]
    fn colour_permutation_repaints_and_renames() {
        let cfg = GenConfig {
            blur_prob: 0.0,
            occlusion_prob: 0.0,
            ..GenConfig::default()
        };
        let s = generate_sample(4, &cfg).unwrap();
        let vocab = builtin_vocabulary();
        let mut perm = [0usize; 8];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = (i + 3) % 8;
        }
        let (clip, tokens) = permute_colors(&s.clip, &s.tokens, &vocab, &perm).unwrap();
        let scene = s.scene.as_ref().unwrap();
        let r = scene.referent();
        let shifted = Color::ALL[(Color::ALL.iter().position(|&c| c == r.color).unwrap() + 3) % 8];
        assert_eq!(tokens.raw_words[1], shifted.word());
        let (cx, cy) = r.center_at(0);
        let px = |t: &Tensor| (0..3).map(|c| t.get(&[cy as usize, cx as usize, c])).collect::<Vec<_>>();
        assert_eq!(px(&clip.frames()[0]), shifted.rgb().to_vec());
        assert_eq!(px(&s.clip.frames()[0]), r.color.rgb().to_vec());
        // background untouched
        assert_eq!(clip.frames()[0].get(&[0, 0, 0]), s.clip.frames()[0].get(&[0, 0, 0]));
    }

    #[test]
    fn split_is_stable_and_exact() {
        let ds = Dataset::generate(20, 9, &GenConfig::default()).unwrap();
        let (train, test) = ds.split(0.25);
        assert_eq!(test.len(), 5);
        assert_eq!(train.len(), 15);
        assert_eq!(ds.split(0.25), (train.clone(), test.clone()));
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn distractor_heavy_shares_attributes() {
        let cfg = GenConfig::distractor_heavy();
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let r = scene.referent();
            for (i, o) in scene.objects.iter().enumerate() {
                if i != scene.referent_index {
                    assert!((o.shape == r.shape) ^ (o.color == r.color));
                }
            }
        }
    }

    #[test]
    fn builtin_vocabulary_covers_template() {
        let v = builtin_vocabulary();
        assert_eq!(v.len(), 19);
        assert_eq!(v.id("the"), Some(0));
    }
}
