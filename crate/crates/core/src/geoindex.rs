//! Aerial reference grid and exact nearest-neighbor localization.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{format_zooms, parse_zooms, Point, Zoom};
use crate::image::RgbImage;
use crate::models::{checksum, AerialModel};
use crate::synth::{render_aerial, World, WorldSpec};
use crate::tensor::Tensor;
use crate::trainer::ImageTable;

pub const INDEX_MAGIC: &[u8; 4] = b"CVIX";
pub const INDEX_VERSION: u16 = 1;
pub const TIE_RULE: &str = "ascending cell index";

/// Thresholds the accuracy curve is sampled at.
pub const CURVE_THRESHOLDS: [f64; 15] = [
    0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
];

const BUILD_BATCH: usize = 64;

/// Regular grid; cell `i` is row `i / cols`, column `i % cols`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub x0: f64,
    pub y0: f64,
    pub cell_w: f64,
    pub cell_h: f64,
    pub cols: usize,
    pub rows: usize,
}

impl Grid {
    pub fn square(x0: f64, y0: f64, cell: f64, cols: usize, rows: usize) -> Self {
        Grid { x0, y0, cell_w: cell, cell_h: cell, cols, rows }
    }

    /// `cols × rows` cells tiling the region where tiles can be centered.
    pub fn covering(spec: &WorldSpec, cols: usize, rows: usize) -> Self {
        let m = spec.margin();
        let span = spec.extent - 2.0 * m;
        Grid { x0: m, y0: m, cell_w: span / cols as f64, cell_h: span / rows as f64, cols, rows }
    }

    /// Grid of `cols × rows` cells of `stride` meters centered on `center`.
    pub fn centered(center: Point, stride: f64, cols: usize, rows: usize) -> Self {
        Grid::square(
            center.x - stride * cols as f64 / 2.0,
            center.y - stride * rows as f64 / 2.0,
            stride,
            cols,
            rows,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x0, self.y0, self.cell_w, self.cell_h].iter().all(|v| v.is_finite())
            && self.cell_w > 0.0
            && self.cell_h > 0.0
            && self.cols > 0
            && self.rows > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad grid {self:?}")))
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, cell: usize) -> Point {
        let (i, j) = (cell / self.cols, cell % self.cols);
        Point::new(
            self.x0 + (j as f64 + 0.5) * self.cell_w,
            self.y0 + (i as f64 + 0.5) * self.cell_h,
        )
    }

    /// Cell containing `p`; cells are half-open on their upper edges.
    pub fn cell_of(&self, p: Point) -> Option<usize> {
        let j = ((p.x - self.x0) / self.cell_w).floor();
        let i = ((p.y - self.y0) / self.cell_h).floor();
        if j >= 0.0 && i >= 0.0 && (j as usize) < self.cols && (i as usize) < self.rows {
            Some(i as usize * self.cols + j as usize)
        } else {
            None
        }
    }
}

/// Dense aerial features over a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceIndex {
    pub grid: Grid,
    dim: usize,
    features: Vec<f32>,
    /// SHA-256 of the checkpoint that produced the features.
    pub model_id: [u8; 32],
    pub zooms: Vec<Zoom>,
}

impl ReferenceIndex {
    pub fn new(grid: Grid, features: Tensor, model_id: [u8; 32], zooms: Vec<Zoom>) -> Result<Self> {
        grid.validate()?;
        if features.rank() != 2 || features.shape()[0] != grid.len() {
            return Err(Error::shape("reference index", &[grid.len(), 0], features.shape()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("reference features".into()));
        }
        let dim = features.shape()[1];
        Ok(ReferenceIndex { grid, dim, features: features.into_data(), model_id, zooms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature(&self, cell: usize) -> &[f32] {
        &self.features[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Distance from `query` to every cell, in cell order.
    pub fn distances(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::shape("localize", &[self.dim], &[query.len()]));
        }
        Ok(self.features.chunks_exact(self.dim).map(|f| distance(f, query)).collect())
    }

    /// Binary layout: magic, version u16, x0 y0 cell_w cell_h as f64, cols
    /// rows as u32, D u32, 32-byte model checksum, then row-major f32
    /// features, all little-endian. The zoom set goes in a trailing
    /// length-prefixed text field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(64 + self.features.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        for v in [g.x0, g.y0, g.cell_w, g.cell_h] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [g.cols as u32, g.rows as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.model_id);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let zooms = format_zooms(&self.zooms);
        out.extend_from_slice(&(zooms.len() as u16).to_le_bytes());
        out.extend_from_slice(zooms.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("index file: {m}"));
        const HEAD: usize = 4 + 2 + 32 + 12 + 32;
        if bytes.len() < HEAD || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != INDEX_VERSION {
            return Err(bad("unsupported version"));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let grid = Grid {
            x0: f64_at(6),
            y0: f64_at(14),
            cell_w: f64_at(22),
            cell_h: f64_at(30),
            cols: u32_at(38),
            rows: u32_at(42),
        };
        let dim = u32_at(46);
        let model_id: [u8; 32] = bytes[50..82].try_into().expect("32 bytes");
        let n = grid.len().checked_mul(dim).ok_or_else(|| bad("size overflow"))?;
        let feat_end = HEAD + n * 4;
        if bytes.len() < feat_end + 2 {
            return Err(bad("truncated features"));
        }
        let features: Vec<f32> = bytes[HEAD..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let zlen = u16::from_le_bytes([bytes[feat_end], bytes[feat_end + 1]]) as usize;
        let ztext = bytes
            .get(feat_end + 2..feat_end + 2 + zlen)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("bad zoom field"))?;
        if bytes.len() != feat_end + 2 + zlen {
            return Err(bad("trailing bytes"));
        }
        let zooms = parse_zooms(ztext)?;
        ReferenceIndex::new(grid, Tensor::new([grid.len(), dim], features)?, model_id, zooms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[inline]
fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Aerial tiles centered on `center` for each zoom the model reads.
pub fn render_tiles(world: &World, center: Point, zooms: &[Zoom], side: usize) -> Result<Vec<RgbImage>> {
    if !world.spec().contains_center(center) {
        return Err(Error::OutsideWorld((center.x, center.y)));
    }
    zooms
        .iter()
        .map(|&z| Ok(render_aerial(world, center, world.spec().tile_side(z)?, side)))
        .collect()
}

/// Extract features for the tiles centered on each point, in order.
pub fn extract_at(model: &dyn AerialModel, world: &World, points: &[Point]) -> Result<Tensor> {
    let zooms = model.zooms()?;
    for z in &zooms {
        world.spec().tile_side(*z).map_err(|_| {
            Error::Invalid(format!("model reads z{z} but the world does not render it"))
        })?;
    }
    let side = model.input_side();
    let d = model.feature_dim();
    let mut out = Vec::with_capacity(points.len() * d);
    for chunk in points.chunks(BUILD_BATCH) {
        let tiles = chunk
            .par_iter()
            .map(|&p| render_tiles(world, p, &zooms, side))
            .collect::<Result<Vec<_>>>()?;
        let per_zoom: Vec<Tensor> = (0..zooms.len())
            .map(|k| {
                let imgs: Vec<RgbImage> = tiles.iter().map(|t| t[k].clone()).collect();
                ImageTable::from_images(side, &imgs).all()
            })
            .collect();
        let refs: Vec<&Tensor> = per_zoom.iter().collect();
        out.extend_from_slice(model.extract(&refs)?.data());
    }
    Tensor::new([points.len(), d], out)
}

/// Render and embed the tiles at every cell center.
pub fn build_index(model: &dyn AerialModel, world: &World, grid: &Grid) -> Result<ReferenceIndex> {
    grid.validate()?;
    let centers: Vec<Point> = (0..grid.len()).map(|i| grid.center(i)).collect();
    if let Some(p) = centers.iter().find(|p| !world.spec().contains_center(**p)) {
        return Err(Error::OutsideWorld((p.x, p.y)));
    }
    let features = extract_at(model, world, &centers)?;
    ReferenceIndex::new(*grid, features, checksum(&model.to_bytes()?), model.zooms()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub query_id: u64,
    /// `(cell, distance)`, nearest first, ties by ascending cell.
    pub candidates: Vec<(usize, f64)>,
    pub truth_cell: Option<usize>,
    pub rank: Option<usize>,
    pub rank_percentile: Option<f64>,
}

fn total_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Cells that count as correct for a query at `truth`.
fn correct_cells(grid: &Grid, truth: Point, tolerance: f64) -> Result<Vec<usize>> {
    let cell = grid.cell_of(truth).ok_or(Error::OutsideGrid((truth.x, truth.y)))?;
    let mut cells = vec![cell];
    if tolerance > 0.0 {
        cells.extend((0..grid.len()).filter(|&i| i != cell && grid.center(i).dist(truth) <= tolerance));
    }
    Ok(cells)
}

/// 1-based rank of the best correct cell under the total order, without
/// sorting.
fn rank_of(dist: &[f64], correct: &[usize]) -> usize {
    let best = correct
        .iter()
        .map(|&c| (c, dist[c]))
        .min_by(|&a, &b| total_order(a, b))
        .expect("at least the containing cell");
    1 + dist
        .iter()
        .enumerate()
        .filter(|&(i, &d)| total_order((i, d), best) == Ordering::Less)
        .count()
}

/// Exact distances to every cell with the fully sorted candidate list.
pub fn localize(
    index: &ReferenceIndex,
    query_id: u64,
    query: &[f32],
    truth: Option<Point>,
    tolerance: f64,
) -> Result<LocalizationResult> {
    let dist = index.distances(query)?;
    let mut candidates: Vec<(usize, f64)> = dist.iter().copied().enumerate().collect();
    candidates.sort_unstable_by(|&a, &b| total_order(a, b));
    let (truth_cell, rank) = match truth {
        Some(t) => {
            let correct = correct_cells(&index.grid, t, tolerance)?;
            (Some(correct[0]), Some(rank_of(&dist, &correct)))
        }
        None => (None, None),
    };
    Ok(LocalizationResult {
        query_id,
        candidates,
        truth_cell,
        rank,
        rank_percentile: rank.map(|r| r as f64 / index.len() as f64),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl AccuracyCurve {
    pub fn from_percentiles(percentiles: &[f64]) -> Self {
        let n = percentiles.len().max(1) as f64;
        let values = CURVE_THRESHOLDS
            .iter()
            .map(|&t| percentiles.iter().filter(|&&p| p <= t + 1e-12).count() as f64 / n)
            .collect();
        AccuracyCurve { thresholds: CURVE_THRESHOLDS.to_vec(), values }
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.values[i])
    }

    /// Trapezoid area over the sampled points, starting from the origin.
    pub fn auc(&self) -> f64 {
        let mut prev = (0.0, 0.0);
        let mut area = 0.0;
        for (&t, &v) in self.thresholds.iter().zip(&self.values) {
            area += (t - prev.0) * (v + prev.1) / 2.0;
            prev = (t, v);
        }
        area
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,accuracy\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub top1pct: f64,
    pub median_percentile: f64,
    pub auc: f64,
    pub queries: usize,
    pub cells: usize,
    pub tolerance: f64,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "top1pct": self.top1pct,
            "median_percentile": self.median_percentile,
            "auc": self.auc,
            "queries": self.queries,
            "cells": self.cells,
            "tolerance_m": self.tolerance,
            "tie_break": TIE_RULE,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub curve: AccuracyCurve,
    pub summary: EvalSummary,
    /// Rank percentile of each query, in input order.
    pub percentiles: Vec<f64>,
}

impl Evaluation {
    /// Write `curve.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [("curve.csv", self.curve.to_csv()), ("summary.json", self.summary.to_json() + "\n")] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Rank every query (`features` row `i` taken at `truths[i]`) and summarize.
pub fn evaluate(index: &ReferenceIndex, features: &Tensor, truths: &[Point], tolerance: f64) -> Result<Evaluation> {
    if truths.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one query".into()));
    }
    if features.rank() != 2 || features.shape()[0] != truths.len() {
        return Err(Error::shape("evaluate", &[truths.len(), index.dim()], features.shape()));
    }
    let percentiles = (0..truths.len())
        .into_par_iter()
        .map(|i| {
            let dist = index.distances(features.row(i))?;
            let correct = correct_cells(&index.grid, truths[i], tolerance)?;
            Ok(rank_of(&dist, &correct) as f64 / index.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = AccuracyCurve::from_percentiles(&percentiles);
    let mut sorted = percentiles.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
    let summary = EvalSummary {
        top1pct: curve.at(0.01).expect("sampled threshold"),
        median_percentile: median,
        auc: curve.auc(),
        queries: truths.len(),
        cells: index.len(),
        tolerance,
    };
    Ok(Evaluation { curve, summary, percentiles })
}
