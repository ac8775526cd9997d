//! Distance heatmaps, false-color maps and the max-activation report.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::Point;
use crate::geoindex::{extract_at, Grid, ReferenceIndex};
use crate::image::{quantize, RgbImage};
use crate::models::{AerialModel, Network};
use crate::synth::{render_aerial, World};
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.6;

/// An image plus the grid its pixels were computed on. With `georef` set,
/// each grid cell covers a `pixels_per_cell` square, north up.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub image: RgbImage,
    pub georef: Option<Grid>,
    pub pixels_per_cell: usize,
    /// Scalar behind each cell's color (distance for heatmaps), cell order.
    pub values: Vec<f64>,
}

impl Raster {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Pixel at the top-left of grid cell `cell`.
    pub fn cell_pixel(&self, cell: usize) -> Option<(usize, usize)> {
        let g = self.georef?;
        let (i, j) = (cell / g.cols, cell % g.cols);
        Some((j * self.pixels_per_cell, (g.rows - 1 - i) * self.pixels_per_cell))
    }

    pub fn cell_color(&self, cell: usize) -> Option<[u8; 3]> {
        self.cell_pixel(cell).map(|(x, y)| self.image.get(x, y))
    }

    /// Five lines: x0, y0, cell size, columns, rows.
    pub fn georef_text(&self) -> Option<String> {
        self.georef
            .map(|g| format!("{}\n{}\n{}\n{}\n{}\n", g.x0, g.y0, g.cell_w, g.cols, g.rows))
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("georef")
    }

    /// Write the PPM and, when georeferenced, the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.image.save_ppm(path)?;
        if let Some(text) = self.georef_text() {
            let p = Self::sidecar_path(path);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Red (`t = 0`) through gray to blue (`t = 1`).
pub fn red_blue(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [1.0 - t, t.min(1.0 - t), t]
}

/// Affine map of `values` onto `[0, 1]`; a constant field maps to 0.5.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

fn paint_cells(grid: &Grid, ppc: usize, colors: &[[f64; 3]]) -> RgbImage {
    let mut img = RgbImage::new(grid.cols * ppc, grid.rows * ppc);
    for (cell, c) in colors.iter().enumerate() {
        let (i, j) = (cell / grid.cols, cell % grid.cols);
        let px = c.map(quantize);
        for y in 0..ppc {
            for x in 0..ppc {
                img.put(j * ppc + x, (grid.rows - 1 - i) * ppc + y, px);
            }
        }
    }
    img
}

/// Black ring around the cell holding `p`; the cell itself keeps its color.
fn mark(img: &mut RgbImage, grid: &Grid, ppc: usize, p: Point) {
    let Some(cell) = grid.cell_of(p) else { return };
    let (i, j) = (cell / grid.cols, cell % grid.cols);
    let (cx, cy) = ((j * ppc) as isize, ((grid.rows - 1 - i) * ppc) as isize);
    let s = ppc as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let t = (s / 4).max(1);
    for y in cy - t..cy + s + t {
        for x in cx - t..cx + s + t {
            let inside = x >= cx && x < cx + s && y >= cy && y < cy + s;
            if !inside && x >= 0 && y >= 0 && x < w && y < h {
                img.put(x as usize, y as usize, [0, 0, 0]);
            }
        }
    }
}

/// Distance from `query` to every index cell, colored nearest red.
pub fn distance_heatmap(
    index: &ReferenceIndex,
    query: &[f32],
    truth: Option<Point>,
    pixels_per_cell: usize,
) -> Result<Raster> {
    let ppc = pixels_per_cell.max(1);
    let values = index.distances(query)?;
    let colors: Vec<[f64; 3]> = normalize(&values).into_iter().map(red_blue).collect();
    let mut image = paint_cells(&index.grid, ppc, &colors);
    if let Some(p) = truth {
        mark(&mut image, &index.grid, ppc, p);
    }
    Ok(Raster { image, georef: Some(index.grid), pixels_per_cell: ppc, values })
}

/// Sliding-window search around `center`: the model's tiles are extracted
/// at every point of a `stride`-spaced grid spanning `span` meters, and the
/// distance map is laid over an aerial rendering of the searched area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineHeatmapSpec {
    pub center: Point,
    pub span_meters: f64,
    pub stride_meters: f64,
    pub pixels_per_cell: usize,
    pub alpha: f64,
}

impl FineHeatmapSpec {
    pub fn new(center: Point, span_meters: f64, stride_meters: f64) -> Self {
        FineHeatmapSpec { center, span_meters, stride_meters, pixels_per_cell: 8, alpha: OVERLAY_ALPHA }
    }

    pub fn grid(&self) -> Result<Grid> {
        if !(self.stride_meters > 0.0 && self.span_meters >= self.stride_meters) {
            return Err(Error::Invalid(format!(
                "need 0 < stride ({}) <= span ({})",
                self.stride_meters, self.span_meters
            )));
        }
        let n = (self.span_meters / self.stride_meters + 1e-9).floor() as usize;
        Ok(Grid::centered(self.center, self.stride_meters, n, n))
    }
}

pub fn fine_heatmap(model: &dyn AerialModel, world: &World, spec: &FineHeatmapSpec, query: &[f32]) -> Result<Raster> {
    if query.len() != model.feature_dim() {
        return Err(Error::shape("fine_heatmap", &[model.feature_dim()], &[query.len()]));
    }
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(Error::Invalid(format!("alpha {} outside [0, 1]", spec.alpha)));
    }
    let grid = spec.grid()?;
    let centers: Vec<Point> = (0..grid.len()).map(|i| grid.center(i)).collect();
    let feats = extract_at(model, world, &centers)?;
    let values: Vec<f64> = (0..grid.len())
        .map(|i| {
            feats.row(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let ppc = spec.pixels_per_cell.max(1);
    let colors: Vec<[f64; 3]> = normalize(&values).into_iter().map(red_blue).collect();
    let heat = paint_cells(&grid, ppc, &colors);
    let side = grid.cols * ppc;
    let base = render_aerial(world, spec.center, grid.cols as f64 * grid.cell_w, side);
    let mut image = RgbImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let (h, b) = (heat.get(x, y), base.get(x, y));
            let mix = |k: usize| spec.alpha * h[k] as f64 / 255.0 + (1.0 - spec.alpha) * b[k] as f64 / 255.0;
            image.put_f(x, y, [mix(0), mix(1), mix(2)]);
        }
    }
    Ok(Raster { image, georef: Some(grid), pixels_per_cell: ppc, values })
}

/// Three embedding-coordinate groups mapped to red, green and blue.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryGroups {
    /// `(name, coordinates)` for red, green, blue.
    pub groups: [(String, Vec<usize>); 3],
    pub allow_overlap: bool,
}

impl Default for CategoryGroups {
    fn default() -> Self {
        CategoryGroups {
            groups: [
                ("urban".into(), vec![5, 6]),
                ("rural".into(), vec![2, 3]),
                ("water".into(), vec![0, 1]),
            ],
            allow_overlap: false,
        }
    }
}

impl CategoryGroups {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, idx) in &self.groups {
            if idx.is_empty() {
                return Err(Error::Invalid(format!("group {name:?} is empty")));
            }
            for &i in idx {
                if i >= dim {
                    return Err(Error::Invalid(format!("group {name:?} uses coordinate {i} >= {dim}")));
                }
                if !seen.insert(i) && !self.allow_overlap {
                    return Err(Error::Invalid(format!("coordinate {i} is in more than one group")));
                }
            }
        }
        Ok(())
    }
}

/// Per cell, each channel is the mean of its group's coordinates, then every
/// channel is rescaled to span `[0, 1]` over the raster.
pub fn falsecolor_map(index: &ReferenceIndex, groups: &CategoryGroups, pixels_per_cell: usize) -> Result<Raster> {
    groups.validate(index.dim())?;
    let n = index.len();
    let channels: Vec<Vec<f64>> = groups
        .groups
        .iter()
        .map(|(_, idx)| {
            let raw: Vec<f64> = (0..n)
                .map(|c| {
                    let f = index.feature(c);
                    idx.iter().map(|&i| f[i] as f64).sum::<f64>() / idx.len() as f64
                })
                .collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; n]
            }
        })
        .collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|c| [channels[0][c], channels[1][c], channels[2][c]]).collect();
    let ppc = pixels_per_cell.max(1);
    Ok(Raster { image: paint_cells(&index.grid, ppc, &colors), georef: Some(index.grid), pixels_per_cell: ppc, values: Vec::new() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateReport {
    pub coordinate: usize,
    /// `(image id, activation)`, highest first, ties by ascending id.
    pub top: Vec<(u64, f32)>,
}

/// The `k` images that excite each requested embedding coordinate most.
/// Repeated ids are scored once, from their first occurrence.
pub fn max_activation_report(
    model: &Network,
    ids: &[u64],
    images: &Tensor,
    coordinates: &[usize],
    k: usize,
) -> Result<Vec<CoordinateReport>> {
    if ids.is_empty() {
        return Err(Error::Invalid("max-activation report needs at least one image".into()));
    }
    if images.shape().first() != Some(&ids.len()) {
        return Err(Error::shape("max_activation_report", &[ids.len()], images.shape()));
    }
    let d = model.feature_dim();
    if let Some(&c) = coordinates.iter().find(|&&c| c >= d) {
        return Err(Error::Invalid(format!("coordinate {c} out of range for D = {d}")));
    }
    let mut seen = BTreeSet::new();
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| seen.insert(ids[i])).collect();
    let feats = model.extract(&images.gather_rows(&keep))?;
    Ok(coordinates
        .iter()
        .map(|&c| {
            let mut top: Vec<(u64, f32)> = keep.iter().enumerate().map(|(r, &i)| (ids[i], feats.row(r)[c])).collect();
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            top.truncate(k);
            CoordinateReport { coordinate: c, top }
        })
        .collect())
}

pub fn report_csv(reports: &[CoordinateReport]) -> String {
    let mut s = String::from("coordinate,rank,image_id,activation\n");
    for r in reports {
        for (rank, (id, a)) in r.top.iter().enumerate() {
            s.push_str(&format!("{},{},{id},{a}\n", r.coordinate, rank + 1));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Zoom;
    use crate::models::ArchSpec;

    fn index(features: Vec<f32>, d: usize, cols: usize, rows: usize) -> ReferenceIndex {
        let n = cols * rows;
        ReferenceIndex::new(Grid::square(0.0, 0.0, 100.0, cols, rows), Tensor::new([n, d], features).unwrap(), [0; 32], vec![Zoom::Z18]).unwrap()
    }

    #[test]
    fn colormap_ends_and_midpoint() {
        assert_eq!(red_blue(0.0).map(quantize), [255, 0, 0]);
        assert_eq!(red_blue(0.5).map(quantize), [128, 128, 128]);
        assert_eq!(red_blue(1.0).map(quantize), [0, 0, 255]);
    }

    #[test]
    fn constant_field_is_mid_gray() {
        let idx = index(vec![1.0; 12 * 4], 4, 4, 3);
        let r = distance_heatmap(&idx, &[0.0; 4], None, 1).unwrap();
        assert!(r.image.pixels().all(|p| p == [128, 128, 128]));
        assert_eq!((r.width(), r.height()), (4, 3));
    }

    #[test]
    fn exact_match_is_the_unique_reddest_pixel() {
        let feats: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let idx = index(feats, 1, 5, 4);
        let r = distance_heatmap(&idx, &[7.0], None, 2).unwrap();
        let (x, y) = r.cell_pixel(7).unwrap();
        let reddest = r.image.get(x, y);
        assert_eq!(reddest, [255, 0, 0]);
        for c in (0..20).filter(|&c| c != 7) {
            assert!(r.cell_color(c).unwrap()[0] < 255);
        }
    }

    #[test]
    fn colors_preserve_distance_order() {
        let feats: Vec<f32> = (0..50).map(|i| ((i * 37) % 50) as f32).collect();
        let idx = index(feats, 1, 10, 5);
        let r = distance_heatmap(&idx, &[0.0], None, 1).unwrap();
        for a in 0..50 {
            for b in 0..50 {
                if r.values[a] < r.values[b] {
                    assert!(r.cell_color(a).unwrap()[0] > r.cell_color(b).unwrap()[0]);
                }
            }
        }
    }

    #[test]
    fn marker_and_sidecar() {
        let idx = index((0..9).map(|i| i as f32).collect(), 1, 3, 3);
        let r = distance_heatmap(&idx, &[4.0], Some(idx.grid.center(4)), 4).unwrap();
        assert_eq!(r.cell_color(4), Some([255, 0, 0]));
        assert_eq!(r.image.get(3, 3), [0, 0, 0]);
        assert_eq!(r.georef_text().unwrap(), "0\n0\n100\n3\n3\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.ppm");
        r.save(&p).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("h.georef")).unwrap().lines().count(), 5);
        assert!(distance_heatmap(&idx, &[0.0, 1.0], None, 1).is_err());
    }

    #[test]
    fn north_is_up() {
        let idx = index(vec![0.0, 0.0, 1.0, 1.0], 1, 2, 2);
        let r = distance_heatmap(&idx, &[0.0], None, 1).unwrap();
        // Cells 2 and 3 are the northern row and far from the query.
        assert_eq!(r.image.get(0, 0), [0, 0, 255]);
        assert_eq!(r.image.get(0, 1), [255, 0, 0]);
    }

    #[test]
    fn indicator_features_give_pure_red() {
        let d = 8;
        let mut f = vec![0.0f32; 6 * d];
        for cell in [1, 4] {
            f[cell * d + 6] = 1.0;
        }
        let idx = index(f, d, 3, 2);
        let r = falsecolor_map(&idx, &CategoryGroups::default(), 1).unwrap();
        for cell in 0..6 {
            let want = if cell == 1 || cell == 4 { [255, 0, 0] } else { [0, 0, 0] };
            assert_eq!(r.cell_color(cell).unwrap(), want);
        }
    }

    #[test]
    fn falsecolor_channels_span_full_range() {
        let d = 8;
        let f: Vec<f32> = (0..30 * d).map(|i| ((i * 7919) % 101) as f32 / 10.0 - 5.0).collect();
        let idx = index(f, d, 6, 5);
        let r = falsecolor_map(&idx, &CategoryGroups::default(), 1).unwrap();
        for k in 0..3 {
            let vals: Vec<u8> = r.image.pixels().map(|p| p[k]).collect();
            assert_eq!(*vals.iter().min().unwrap(), 0);
            assert_eq!(*vals.iter().max().unwrap(), 255);
        }
    }

    #[test]
    fn group_validation() {
        let mut g = CategoryGroups::default();
        assert!(g.validate(8).is_ok());
        assert!(g.validate(6).is_err());
        g.groups[1].1 = vec![];
        assert!(g.validate(8).is_err());
        let mut g = CategoryGroups::default();
        g.groups[1].1 = vec![0];
        assert!(g.validate(8).is_err());
        g.allow_overlap = true;
        assert!(g.validate(8).is_ok());
    }

    #[test]
    fn report_truncates_dedupes_and_orders() {
        let spec = ArchSpec { input_side: 8, conv_blocks: vec![2], fc_hidden: 4, feature_dim: 3, ..ArchSpec::default() };
        let net = Network::new(spec, 1).unwrap();
        let base: Vec<f32> = (0..4 * 3 * 64).map(|i| ((i * 13) % 17) as f32 / 17.0).collect();
        let imgs = Tensor::new([4, 3, 8, 8], base).unwrap();
        let imgs = Tensor::stack(&[0, 1, 2, 3, 1].map(|i| Tensor::new([3, 8, 8], imgs.row(i).to_vec()).unwrap())).unwrap();
        let ids = [10, 11, 12, 13, 11];
        let reps = max_activation_report(&net, &ids, &imgs, &[0, 2], 10).unwrap();
        for r in &reps {
            assert_eq!(r.top.len(), 4);
            assert!(r.top.windows(2).all(|w| w[0].1 >= w[1].1));
            let set: BTreeSet<u64> = r.top.iter().map(|t| t.0).collect();
            assert_eq!(set.len(), 4);
        }
        assert_eq!(max_activation_report(&net, &ids, &imgs, &[1], 2).unwrap()[0].top.len(), 2);
        assert!(max_activation_report(&net, &ids, &imgs, &[3], 2).is_err());
        let csv = report_csv(&reps);
        assert!(csv.starts_with("coordinate,rank,image_id,activation\n0,1,"));
    }

    #[test]
    fn ties_break_by_id() {
        let spec = ArchSpec { input_side: 8, conv_blocks: vec![2], fc_hidden: 4, feature_dim: 3, ..ArchSpec::default() };
        let net = Network::new(spec, 1).unwrap();
        let imgs = Tensor::full([3, 3, 8, 8], 0.25);
        let reps = max_activation_report(&net, &[9, 2, 5], &imgs, &[0], 3).unwrap();
        assert_eq!(reps[0].top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![2, 5, 9]);
    }
}
