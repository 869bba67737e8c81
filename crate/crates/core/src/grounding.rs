//! Per-cell box regression and confidence over the feature grid.
//!
//! Each cell predicts `(tx, ty, tw, th, conf)`. The box centre is
//! `(cell + sigmoid(t)) · cell_size` and its size is `anchor · exp(t)`;
//! the cell with the highest confidence logit wins at inference.

use std::fmt;
use std::str::FromStr;

use dualcorr_numcore::{argmax, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::uniform;

/// Outputs per cell.
pub const HEAD_OUTPUTS: usize = 5;
const CONF: usize = 4;
/// Centre offsets are clamped this far from the cell edges before the
/// logit is taken.
const OFFSET_MARGIN: f64 = 0.01;

/// Axis-aligned pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl FromStr for BBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("bad box {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        match v.as_slice() {
            &[a, b, c, d] => Ok(Self::new(a, b, c, d)),
            _ => Err(Error::Config(format!("box needs 4 numbers: {s:?}"))),
        }
    }
}

/// Intersection over union; 0 for boxes without area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Geometry shared by the head, the losses and the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub anchor_w: f64,
    pub anchor_h: f64,
}

impl GridGeometry {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell_w(&self) -> f64 {
        self.image_w as f64 / self.grid_w as f64
    }

    pub fn cell_h(&self) -> f64 {
        self.image_h as f64 / self.grid_h as f64
    }

    /// Cell holding the point; a point on a boundary belongs to the
    /// lower-index cell.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let col = axis_cell(x, self.cell_w(), self.grid_w);
        let row = axis_cell(y, self.cell_h(), self.grid_h);
        row * self.grid_w + col
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.grid_w, cell % self.grid_w);
        (
            (col as f64 + 0.5) * self.cell_w(),
            (row as f64 + 0.5) * self.cell_h(),
        )
    }

    /// Cells whose centres lie inside `b` (edges included).
    pub fn cells_inside(&self, b: &BBox) -> Vec<usize> {
        (0..self.cells())
            .filter(|&c| {
                let (x, y) = self.cell_center(c);
                b.contains(x, y)
            })
            .collect()
    }
}

fn axis_cell(v: f64, size: f64, n: usize) -> usize {
    let idx = (v / size).ceil() - 1.0;
    (idx.max(0.0) as usize).min(n - 1)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ground-truth box with the cell responsible for predicting it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub responsible_cell: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, grid: &GridGeometry) -> Result<Self> {
        let valid = bbox.x_min < bbox.x_max
            && bbox.y_min < bbox.y_max
            && bbox.x_min >= 0.0
            && bbox.y_min >= 0.0
            && bbox.x_max <= grid.image_w as f64
            && bbox.y_max <= grid.image_h as f64;
        if !valid {
            return Err(Error::Config(format!(
                "box {bbox} is empty or leaves the {}x{} image",
                grid.image_w, grid.image_h
            )));
        }
        let (cx, cy) = bbox.center();
        Ok(Self {
            bbox,
            responsible_cell: grid.cell_of(cx, cy),
        })
    }

    /// Regression target `(tx, ty, tw, th)` at the responsible cell.
    pub fn encode(&self, grid: &GridGeometry) -> [f64; 4] {
        encode_box(&self.bbox, self.responsible_cell, grid)
    }
}

/// Raw head parameters that decode to `b` from `cell`.
pub fn encode_box(b: &BBox, cell: usize, grid: &GridGeometry) -> [f64; 4] {
    let (row, col) = (cell / grid.grid_w, cell % grid.grid_w);
    let (cx, cy) = b.center();
    let ox = (cx / grid.cell_w() - col as f64).clamp(OFFSET_MARGIN, 1.0 - OFFSET_MARGIN);
    let oy = (cy / grid.cell_h() - row as f64).clamp(OFFSET_MARGIN, 1.0 - OFFSET_MARGIN);
    [
        logit(ox),
        logit(oy),
        (b.width() / grid.anchor_w).ln(),
        (b.height() / grid.anchor_h).ln(),
    ]
}

/// Box predicted by `cell` from its raw parameters, clipped to the image.
pub fn decode_box(raw: &[f64], cell: usize, grid: &GridGeometry) -> BBox {
    let (row, col) = (cell / grid.grid_w, cell % grid.grid_w);
    let cx = (col as f64 + sigmoid(raw[0])) * grid.cell_w();
    let cy = (row as f64 + sigmoid(raw[1])) * grid.cell_h();
    let w = grid.anchor_w * raw[2].exp();
    let h = grid.anchor_h * raw[3].exp();
    BBox::from_center(cx, cy, w, h).clipped(grid.image_w as f64, grid.image_h as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `in × 5`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng>(input_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform(rng, &[input_dim, HEAD_OUTPUTS], input_dim, HEAD_OUTPUTS),
            bias: Tensor::zeros(&[HEAD_OUTPUTS]),
        }
    }
}

pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Records the head over per-cell input rows; the result is `P×5`.
pub fn head_graph(g: &mut Graph, vars: &HeadVars, input: Var) -> Result<Var> {
    let lin = g.matmul(input, vars.weight)?;
    Ok(g.add_row(lin, vars.bias)?)
}

/// Records the mean squared error of the four box parameters at the
/// responsible cell.
pub fn loc_loss_graph(g: &mut Graph, head_out: Var, gt: &GroundTruthBox, grid: &GridGeometry) -> Result<Var> {
    let base = gt.responsible_cell * HEAD_OUTPUTS;
    let raw = g.pick(head_out, &[base, base + 1, base + 2, base + 3])?;
    let target = g.constant(Tensor::vector(gt.encode(grid).to_vec()));
    let diff = g.sub(raw, target)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq))
}

/// Records the cross-entropy of the softmax over cell confidences against
/// the responsible cell.
pub fn cls_loss_graph(g: &mut Graph, head_out: Var, gt: &GroundTruthBox) -> Result<Var> {
    let cells = g.shape(head_out)[0];
    let idx: Vec<usize> = (0..cells).map(|c| c * HEAD_OUTPUTS + CONF).collect();
    let logits = g.pick(head_out, &idx)?;
    let logp = g.log_softmax(logits, 0)?;
    let picked = g.pick(logp, &[gt.responsible_cell])?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

/// Chosen box with its cell and softmax confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub cell: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingPrediction {
    /// Raw `(tx, ty, tw, th)` per cell, `P×4`.
    pub boxes: Tensor,
    pub conf_logits: Vec<f64>,
    pub selected: Selection,
}

impl GroundingPrediction {
    /// Splits a `P×5` head output and selects the best cell.
    pub fn from_head_output(out: &Tensor, grid: &GridGeometry) -> Result<Self> {
        if out.rank() != 2 || out.cols() != HEAD_OUTPUTS || out.rows() != grid.cells() {
            return Err(Error::Config(format!(
                "head output {:?} does not match {} cells",
                out.shape(),
                grid.cells()
            )));
        }
        let mut boxes = Vec::with_capacity(out.rows() * 4);
        let mut conf_logits = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row(r);
            boxes.extend_from_slice(&row[..4]);
            conf_logits.push(row[CONF]);
        }
        let boxes = Tensor::new(vec![out.rows(), 4], boxes)?;
        let selected = select(&boxes, &conf_logits, grid);
        Ok(Self {
            boxes,
            conf_logits,
            selected,
        })
    }

    pub fn confidences(&self) -> Vec<f64> {
        softmax(&self.conf_logits)
    }

    pub fn decode_cell(&self, cell: usize, grid: &GridGeometry) -> BBox {
        decode_box(self.boxes.row(cell), cell, grid)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn select(boxes: &Tensor, logits: &[f64], grid: &GridGeometry) -> Selection {
    let cell = argmax(logits).expect("grid has at least one cell");
    Selection {
        cell,
        bbox: decode_box(boxes.row(cell), cell, grid),
        confidence: softmax(logits)[cell],
    }
}

/// Runs the head on `P×in` input rows.
pub fn predict(input: &Tensor, params: &HeadParams, grid: &GridGeometry) -> Result<GroundingPrediction> {
    let mut g = Graph::new();
    let vars = HeadVars {
        weight: g.constant(params.weight.clone()),
        bias: g.constant(params.bias.clone()),
    };
    let x = g.constant(input.clone());
    let out = head_graph(&mut g, &vars, x)?;
    GroundingPrediction::from_head_output(g.value(out), grid)
}

/// The decoded box of the most confident cell (lowest index on ties).
pub fn infer(pred: &GroundingPrediction, grid: &GridGeometry) -> Selection {
    select(&pred.boxes, &pred.conf_logits, grid)
}

pub fn loc_loss(pred: &GroundingPrediction, gt: &GroundTruthBox, grid: &GridGeometry) -> f64 {
    let target = gt.encode(grid);
    let raw = pred.boxes.row(gt.responsible_cell);
    raw.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0
}

pub fn cls_loss(pred: &GroundingPrediction, gt: &GroundTruthBox) -> f64 {
    let x = &pred.conf_logits;
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - x[gt.responsible_cell]
}
