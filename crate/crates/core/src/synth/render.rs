use std::collections::BTreeMap;
use std::f64::consts::TAU;

use super::noise::{hash3, mix64, unit, value_noise};
use super::world::{FieldSample, World};
use crate::error::{Error, Result};
use crate::geo::{Point, Zoom};
use crate::image::RgbImage;
use crate::tensor::Tensor;

type Rgb = [f64; 3];

const AERIAL: [Rgb; 8] = [
    [0.10, 0.24, 0.52], // water
    [0.82, 0.76, 0.56], // coast
    [0.52, 0.66, 0.28], // rural
    [0.10, 0.36, 0.14], // forest
    [0.86, 0.68, 0.42], // desert
    [0.58, 0.58, 0.50], // suburban
    [0.40, 0.40, 0.44], // urban
    [0.46, 0.40, 0.36], // mountain
];

const GROUND: [Rgb; 8] = [
    [0.16, 0.42, 0.62],
    [0.92, 0.86, 0.66],
    [0.72, 0.78, 0.30],
    [0.18, 0.30, 0.12],
    [0.94, 0.80, 0.52],
    [0.38, 0.62, 0.30],
    [0.56, 0.54, 0.58],
    [0.50, 0.46, 0.44],
];

/// Silhouette color of each class seen on the horizon.
const FAR: [Rgb; 8] = [
    [0.30, 0.50, 0.70],
    [0.80, 0.78, 0.68],
    [0.44, 0.54, 0.26],
    [0.08, 0.20, 0.10],
    [0.78, 0.64, 0.46],
    [0.70, 0.40, 0.32],
    [0.30, 0.30, 0.36],
    [0.36, 0.34, 0.38],
];

/// Meters of world per sub-sample along one axis before a tile pixel is
/// averaged over several samples.
const SUBSAMPLE_METERS: f64 = 25.0;

/// Fraction of the ground image height above the horizon.
const HORIZON: f64 = 0.45;

/// One rendered location.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub location: Point,
    pub scene_class: usize,
    pub ground_image: RgbImage,
    pub aerial_tiles: BTreeMap<Zoom, RgbImage>,
}

impl Sample {
    pub fn ground_tensor(&self) -> Tensor {
        self.ground_image.to_tensor()
    }

    pub fn aerial_tensor(&self, zoom: Zoom) -> Result<Tensor> {
        self.aerial_tiles
            .get(&zoom)
            .map(RgbImage::to_tensor)
            .ok_or_else(|| Error::Invalid(format!("sample {} has no z{zoom} tile", self.id)))
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: Rgb, s: f64) -> Rgb {
    c.map(|v| v * s)
}

/// Shared slow color drift: moisture greens, albedo brightens, warmth
/// trades blue for red.
fn tint(c: Rgb, f: &FieldSample) -> Rgb {
    let m = f.moisture - 0.5;
    let w = f.warmth - 0.5;
    let b = 0.78 + 0.44 * f.albedo;
    [
        c[0] * (1.0 - 0.5 * m + 0.5 * w) * b,
        c[1] * (1.0 + 0.4 * m) * b,
        c[2] * (1.0 + 0.2 * m - 0.5 * w) * b,
    ]
}

fn aerial_point(world: &World, p: Point) -> Rgb {
    let f = world.sample(p);
    let seed = world.spec().seed;
    let base = AERIAL[f.class];
    let n = |s: u64, w: f64| value_noise(mix64(seed ^ s), p.x / w, p.y / w) - 0.5;
    let cell = |w: f64, s: u64| unit(hash3(seed ^ s, (p.x / w).floor() as i64 as u64, (p.y / w).floor() as i64 as u64)) - 0.5;
    let wave = |w: f64| (TAU * p.x / w).cos().max((TAU * p.y / w).cos());
    let c = match f.class {
        0 => scale(base, 1.0 + 0.25 * n(1, 40.0)),
        1 => scale(base, 1.0 + 0.3 * n(2, 30.0)),
        2 => {
            let field = cell(120.0, 3);
            let stripe = if field > 0.0 { (TAU * p.x / 30.0).cos() } else { (TAU * p.y / 30.0).cos() };
            scale(lerp(base, [0.72, 0.62, 0.36], field + 0.5), 1.0 + 0.08 * stripe)
        }
        3 => scale(base, 1.0 + 0.9 * n(4, 30.0)),
        4 => {
            let dune = (TAU * (0.8 * p.x + 0.6 * p.y) / 70.0 + 4.0 * n(5, 300.0)).sin();
            scale(base, 1.0 + 0.15 * dune)
        }
        5 => {
            let street = ((wave(80.0) - 0.7) / 0.3).clamp(0.0, 1.0);
            let roof = ((n(6, 25.0) - 0.1) * 6.0).clamp(0.0, 1.0);
            lerp(lerp(base, [0.70, 0.34, 0.28], roof), [0.78, 0.78, 0.76], street)
        }
        6 => {
            let street = ((wave(60.0) - 0.6) / 0.4).clamp(0.0, 1.0);
            let block = scale(base, 1.0 + 0.6 * cell(60.0, 7));
            lerp(block, [0.20, 0.20, 0.22], street)
        }
        _ => {
            let ridge = 1.0 - (2.0 * (n(8, 90.0) + 0.5) - 1.0).abs();
            let rock = scale(base, 0.7 + 0.6 * ridge);
            lerp(rock, [0.95, 0.95, 0.97], ((f.band_pos - 0.6) / 0.3).clamp(0.0, 1.0))
        }
    };
    tint(c, &f)
}

/// Top-down tile of side `meters` centered on `center`. Image rows run north
/// to south, so `+y` is up.
pub fn render_aerial(world: &World, center: Point, meters: f64, side: usize) -> RgbImage {
    let mut img = RgbImage::new(side, side);
    let px = meters / side as f64;
    let ss = (px / SUBSAMPLE_METERS).ceil().max(1.0) as usize;
    let sub = px / ss as f64;
    let (x0, y1) = (center.x - meters / 2.0, center.y + meters / 2.0);
    for r in 0..side {
        for c in 0..side {
            let mut acc = [0.0; 3];
            for i in 0..ss {
                for j in 0..ss {
                    let p = Point::new(
                        x0 + c as f64 * px + (j as f64 + 0.5) * sub,
                        y1 - r as f64 * px - (i as f64 + 0.5) * sub,
                    );
                    let v = aerial_point(world, p);
                    for k in 0..3 {
                        acc[k] += v[k];
                    }
                }
            }
            let inv = 1.0 / (ss * ss) as f64;
            img.put_f(c, r, acc.map(|v| v * inv));
        }
    }
    img
}

/// How far this location's ground view reaches, in meters.
pub fn context_radius(world: &World, loc: Point) -> f64 {
    let (lo, hi) = world.spec().context_radius;
    let h = hash3(world.spec().seed ^ 0xC0_47E7, loc.x.to_bits(), loc.y.to_bits());
    lo + (hi - lo) * unit(h)
}

/// Height of a horizon silhouette as a fraction of image height.
fn skyline(class: usize, u: usize, side: usize, nuis: u64) -> f64 {
    let col = |w: usize, s: u64| unit(hash3(nuis ^ s, (u * 64 / side / w) as u64, 0));
    let t = u as f64 / side as f64;
    match class {
        0 => 0.0,
        1 => 0.015,
        2 => 0.03 + 0.02 * col(4, 1),
        3 => 0.09 + 0.05 * (TAU * 9.0 * t).sin().abs() + 0.02 * col(2, 2),
        4 => 0.03 + 0.02 * (TAU * 3.0 * t + 1.0).sin(),
        5 => 0.05 + 0.03 * (col(6, 3) > 0.4) as u8 as f64,
        6 => 0.10 + 0.20 * col(4, 4),
        _ => 0.12 + 0.20 * (1.0 - (2.0 * (t * 4.0).fract() - 1.0).abs()),
    }
}

/// Ground texture multiplier for a foreground pixel; `t` is depth in
/// `[0, 1]`, 0 at the viewer.
fn ground_texture(class: usize, u: usize, v: usize, t: f64, nuis: u64, side: usize) -> f64 {
    let phase = unit(nuis) * TAU;
    let uf = u as f64 * 64.0 / side as f64;
    let vf = v as f64 * 64.0 / side as f64;
    match class {
        0 => 1.0 + 0.15 * (vf * 1.3 / (t + 0.2) + phase).sin(),
        1 => 1.0 + 0.25 * (((vf / (t + 0.3) + phase).sin() > 0.9) as u8 as f64),
        2 => 1.0 + 0.12 * (TAU * 2.0 / (t + 0.15) + phase).sin(),
        3 => {
            let trunk = unit(hash3(nuis, (uf / 3.0) as u64, 5)) > 0.7;
            if trunk { 0.55 } else { 1.0 + 0.1 * (value_noise(nuis, uf / 3.0, vf / 3.0) - 0.5) }
        }
        4 => 1.0 + 0.08 * (vf * 0.8 / (t + 0.3) + phase).sin(),
        5 => 1.0 + 0.15 * ((hash3(nuis, (uf / 8.0) as u64, (vf / 4.0) as u64) & 1) as f64),
        6 => {
            let lane = (uf % 16.0 - 8.0).abs() < 0.6 && ((vf / 3.0) as u64 % 2 == 0);
            if lane { 1.7 } else { 1.0 + 0.05 * (value_noise(nuis, uf, vf) - 0.5) }
        }
        _ => 1.0 + 0.35 * (value_noise(nuis ^ 9, uf / 4.0, vf / 4.0) - 0.5),
    }
}

/// Panoramic ground view: columns sweep all bearings clockwise from north,
/// the lower rows show the ground receding toward the horizon, and the
/// horizon carries silhouettes of whatever stands at the context radius.
pub fn render_ground(world: &World, loc: Point, side: usize) -> RgbImage {
    let mut img = RgbImage::new(side, side);
    let seed = world.spec().seed;
    let nuis = hash3(seed ^ 0x6A0D, loc.x.to_bits(), loc.y.to_bits());
    let r = context_radius(world, loc);
    let here = world.sample(loc);
    let horizon = ((side as f64) * HORIZON).round() as usize;
    let haze = here.moisture;
    let sky_top = lerp([0.28, 0.48, 0.86], [0.62, 0.64, 0.68], haze);
    let sky_low = lerp([0.78, 0.86, 0.96], [0.86, 0.86, 0.86], haze);
    for u in 0..side {
        let bearing = TAU * (u as f64 + 0.5) / side as f64;
        let dir = (bearing.sin(), bearing.cos());
        let far = world.sample(Point::new(loc.x + r * dir.0, loc.y + r * dir.1));
        let top = horizon as f64 - skyline(far.class, u, side, nuis) * side as f64;
        for v in 0..horizon {
            let c = if (v as f64) >= top {
                tint(FAR[far.class], &far)
            } else {
                lerp(sky_top, sky_low, v as f64 / horizon as f64)
            };
            img.put_f(u, v, c);
        }
        let rows = side - horizon;
        for v in horizon..side {
            let t = (side - v) as f64 / rows as f64 - 0.5 / rows as f64;
            let d = r * t * t;
            let f = world.sample(Point::new(loc.x + d * dir.0, loc.y + d * dir.1));
            let c = scale(GROUND[f.class], ground_texture(f.class, u, v, t, nuis, side));
            img.put_f(u, v, lerp(tint(c, &f), sky_low, 0.25 * t * t));
        }
    }
    img
}

/// Ground view plus every configured aerial tile for one location.
pub fn render_pair(world: &World, id: u64, loc: Point, side: usize) -> Result<Sample> {
    if !world.spec().contains_center(loc) {
        return Err(Error::OutsideWorld((loc.x, loc.y)));
    }
    if side == 0 {
        return Err(Error::Invalid("image side must be positive".into()));
    }
    let aerial_tiles = world
        .spec()
        .tile_meters
        .iter()
        .map(|(&z, &m)| (z, render_aerial(world, loc, m, side)))
        .collect();
    Ok(Sample {
        id,
        location: loc,
        scene_class: world.class_at(loc),
        ground_image: render_ground(world, loc, side),
        aerial_tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::world::WorldSpec;

    fn world() -> World {
        World::new(WorldSpec::default()).unwrap()
    }

    fn luma(img: &RgbImage) -> Vec<f64> {
        img.pixels().map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    }

    /// Shrink `fine` by 4 with a box filter and correlate it with the
    /// central quarter of `coarse`.
    fn pyramid_correlation(fine: &RgbImage, coarse: &RgbImage) -> f64 {
        let s = fine.width();
        let q = s / 4;
        let lf = luma(fine);
        let lc = luma(coarse);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in 0..q {
            for c in 0..q {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += lf[(r * 4 + i) * s + c * 4 + j];
                    }
                }
                a.push(acc / 16.0);
                b.push(lc[(r + 3 * q / 2) * s + c + 3 * q / 2]);
            }
        }
        pearson(&a, &b)
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn render_is_deterministic() {
        let w = world();
        let p = Point::new(12_345.67, 20_000.01);
        assert_eq!(render_pair(&w, 1, p, 32).unwrap(), render_pair(&w, 1, p, 32).unwrap());
    }

    #[test]
    fn boundary_is_enforced() {
        let w = world();
        assert!(matches!(render_pair(&w, 0, Point::new(1000.0, 20_000.0), 16), Err(Error::OutsideWorld(_))));
        assert!(render_pair(&w, 0, Point::new(1600.0, 1600.0), 16).is_ok());
    }

    #[test]
    fn distant_classes_differ_in_aerial_color() {
        let w = world();
        let lattice: Vec<Point> = (0..30 * 30)
            .map(|k| Point::new(2000.0 + 1200.0 * (k % 30) as f64, 2000.0 + 1200.0 * (k / 30) as f64))
            .collect();
        let of_class = |c| lattice.iter().copied().filter(|&p| w.class_at(p) == c).collect::<Vec<_>>();
        let (water, urban) = (of_class(0), of_class(6));
        let found = water.iter().flat_map(|&a| urban.iter().map(move |&b| (a, b))).find(|(a, b)| a.dist(*b) >= 5000.0);
        let (a, b) = found.expect("water and urban 5 km apart");
        let mean = |img: &RgbImage| {
            let mut m = [0.0; 3];
            for p in img.pixels() {
                for k in 0..3 {
                    m[k] += p[k] as f64;
                }
            }
            m
        };
        let (ma, mb) = (mean(&render_aerial(&w, a, 200.0, 32)), mean(&render_aerial(&w, b, 200.0, 32)));
        assert!(ma[2] > ma[0] && mb[0] > mb[2] * 0.8);
        assert_ne!(ma, mb);
    }

    #[test]
    fn zoom_pyramid_is_consistent() {
        let w = world();
        let mut rng_state = 99u64;
        let mut worst = f64::INFINITY;
        for _ in 0..20 {
            rng_state = mix64(rng_state);
            let x = 2000.0 + unit(rng_state) * 36_000.0;
            rng_state = mix64(rng_state);
            let y = 2000.0 + unit(rng_state) * 36_000.0;
            let s = render_pair(&w, 0, Point::new(x, y), 64).unwrap();
            let z18 = &s.aerial_tiles[&Zoom::Z18];
            let z16 = &s.aerial_tiles[&Zoom::Z16];
            let z14 = &s.aerial_tiles[&Zoom::Z14];
            worst = worst.min(pyramid_correlation(z18, z16)).min(pyramid_correlation(z16, z14));
        }
        assert!(worst > 0.5, "worst pyramid correlation {worst}");
    }

    #[test]
    fn ground_has_sky_above_horizon() {
        let w = world();
        let s = render_pair(&w, 0, Point::new(20_000.0, 20_000.0), 64).unwrap();
        let top = s.ground_image.get(10, 0);
        assert!(top[2] > top[0], "sky is blue-ish: {top:?}");
    }
}
