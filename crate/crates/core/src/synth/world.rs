use std::collections::BTreeMap;

use super::noise::{mix64, Fbm};
use crate::error::{Error, Result};
use crate::geo::{Point, Zoom};

pub const CLASS_NAMES: [&str; 8] = [
    "water", "coast", "rural", "forest", "desert", "suburban", "urban", "mountain",
];

/// Area share of each elevation band for the default eight classes, lowest
/// band first.
const DEFAULT_SHARES: [f64; 8] = [0.15, 0.08, 0.15, 0.14, 0.10, 0.14, 0.10, 0.14];

const CALIBRATION_LATTICE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Everywhere,
    Disk { center: Point, radius: f64 },
    /// Points `p` with `(p - point) · normal >= 0`.
    HalfPlane { point: Point, normal: (f64, f64) },
}

impl Region {
    pub fn contains(&self, p: Point) -> bool {
        match *self {
            Region::Everywhere => true,
            Region::Disk { center, radius } => p.dist(center) <= radius,
            Region::HalfPlane { point, normal } => {
                (p.x - point.x) * normal.0 + (p.y - point.y) * normal.1 >= 0.0
            }
        }
    }
}

/// Class override painted over the procedural field. Later patches win.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub region: Region,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    /// Side of the square world in meters.
    pub extent: f64,
    pub class_count: usize,
    pub noise_octaves: u32,
    /// Wavelength in meters of the coarsest noise octave behind the class
    /// field; sets the typical size of a class region.
    pub region_scale: f64,
    /// Ground side covered by one aerial tile at each zoom.
    pub tile_meters: BTreeMap<Zoom, f64>,
    /// The ground renderer looks out to a radius drawn from this range
    /// (meters), fixed per location.
    pub context_radius: (f64, f64),
    pub patches: Vec<Patch>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            extent: 40_000.0,
            class_count: 8,
            noise_octaves: 2,
            region_scale: 24_000.0,
            tile_meters: BTreeMap::from([(Zoom::Z18, 200.0), (Zoom::Z16, 800.0), (Zoom::Z14, 3200.0)]),
            context_radius: (100.0, 100.0),
            patches: Vec::new(),
        }
    }
}

impl WorldSpec {
    /// The benchmark variant whose ground views reach anywhere between the
    /// z18 and z16 tile half-sides.
    pub fn scale_ambiguous(mut self) -> Self {
        let fine = self.tile_meters.get(&Zoom::Z18).copied().unwrap_or(200.0);
        let mid = self.tile_meters.get(&Zoom::Z16).copied().unwrap_or(800.0);
        self.context_radius = (fine / 2.0, mid / 2.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASS_NAMES.len()).contains(&self.class_count) {
            return Err(Error::Invalid(format!(
                "class_count must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.class_count
            )));
        }
        if self.tile_meters.is_empty() {
            return Err(Error::Invalid("tile_meters is empty".into()));
        }
        // Coarse to fine.
        let levels: Vec<(Zoom, f64)> = self.tile_meters.iter().map(|(z, m)| (*z, *m)).collect();
        for &(z, m) in &levels {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Invalid(format!("tile_meters for z{z} must be positive")));
            }
        }
        for w in levels.windows(2) {
            let ((zc, mc), (zf, mf)) = (w[0], w[1]);
            let want = mf * 2f64.powi((zf.0 - zc.0) as i32);
            if (mc - want).abs() > 1e-9 * want {
                return Err(Error::Invalid(format!(
                    "z{zc} must cover {want} m (z{zf} covers {mf} m, side doubles per zoom step), got {mc}"
                )));
            }
        }
        let largest = levels[0].1;
        if !(self.extent >= 10.0 * largest) {
            return Err(Error::Invalid(format!(
                "extent {} must be at least 10 x the largest tile ({largest} m)",
                self.extent
            )));
        }
        if !(self.region_scale.is_finite() && self.region_scale > 0.0) {
            return Err(Error::Invalid(format!("region_scale must be positive, got {}", self.region_scale)));
        }
        let (lo, hi) = self.context_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Invalid(format!("bad context radius range {lo}..{hi}")));
        }
        for p in &self.patches {
            if p.class >= self.class_count {
                return Err(Error::Invalid(format!("patch class {} out of range", p.class)));
            }
        }
        Ok(())
    }

    pub fn tile_side(&self, zoom: Zoom) -> Result<f64> {
        self.tile_meters
            .get(&zoom)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("zoom {zoom} is not configured")))
    }

    pub fn zooms(&self) -> Vec<Zoom> {
        self.tile_meters.keys().rev().copied().collect()
    }

    /// Largest tile half-side: renderable centers keep this far from the edge.
    pub fn margin(&self) -> f64 {
        self.tile_meters.values().fold(0.0f64, |a, &b| a.max(b)) / 2.0
    }

    pub fn contains_center(&self, p: Point) -> bool {
        let m = self.margin();
        let hi = self.extent - m;
        p.x >= m && p.x <= hi && p.y >= m && p.y <= hi
    }
}

/// Everything the renderers need at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub class: usize,
    /// Raw band-selecting field in `[0, 1]`.
    pub elevation: f64,
    /// Position inside the class band, `[0, 1]`.
    pub band_pos: f64,
    pub moisture: f64,
    pub albedo: f64,
    pub warmth: f64,
}

/// Calibrated class field of a [`WorldSpec`].
#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    /// Upper elevation bound of every band but the last.
    thresholds: Vec<f64>,
    elevation: Fbm,
    moisture: Fbm,
    albedo: Fbm,
    warmth: Fbm,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let e = spec.extent;
        let elevation = Fbm {
            seed: mix64(spec.seed ^ 0xE1E7),
            wavelength: spec.region_scale,
            octaves: spec.noise_octaves.max(1),
        };
        let moisture = Fbm { seed: mix64(spec.seed ^ 0x3015), wavelength: e / 5.0, octaves: 2 };
        let albedo = Fbm { seed: mix64(spec.seed ^ 0xA1BE), wavelength: e / 7.0, octaves: 2 };
        let warmth = Fbm { seed: mix64(spec.seed ^ 0x3A27), wavelength: e / 6.0, octaves: 2 };
        let mut world = World { spec, thresholds: Vec::new(), elevation, moisture, albedo, warmth };
        world.thresholds = world.calibrate();
        Ok(world)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    /// Band edges at empirical quantiles of the elevation field over the
    /// renderable region, so class shares hold for any seed.
    fn calibrate(&self) -> Vec<f64> {
        let k = self.spec.class_count;
        if k == 1 {
            return Vec::new();
        }
        let m = self.spec.margin();
        let span = self.spec.extent - 2.0 * m;
        let n = CALIBRATION_LATTICE;
        let mut vals = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let x = m + span * (j as f64 + 0.5) / n as f64;
                let y = m + span * (i as f64 + 0.5) / n as f64;
                vals.push(self.elevation.sample(x, y));
            }
        }
        vals.sort_by(f64::total_cmp);
        let shares: Vec<f64> = if k == DEFAULT_SHARES.len() {
            DEFAULT_SHARES.to_vec()
        } else {
            vec![1.0 / k as f64; k]
        };
        let mut acc = 0.0;
        shares[..k - 1]
            .iter()
            .map(|s| {
                acc += s;
                vals[((acc * vals.len() as f64) as usize).min(vals.len() - 1)]
            })
            .collect()
    }

    pub fn sample(&self, p: Point) -> FieldSample {
        let elevation = self.elevation.sample(p.x, p.y);
        let band = self.thresholds.partition_point(|&t| t <= elevation);
        let lo = if band == 0 { 0.0 } else { self.thresholds[band - 1] };
        let hi = self.thresholds.get(band).copied().unwrap_or(1.0);
        let band_pos = if hi > lo { ((elevation - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
        let class = self
            .spec
            .patches
            .iter()
            .rev()
            .find(|patch| patch.region.contains(p))
            .map_or(band, |patch| patch.class);
        FieldSample {
            class,
            elevation,
            band_pos,
            moisture: self.moisture.sample(p.x, p.y),
            albedo: self.albedo.sample(p.x, p.y),
            warmth: self.warmth.sample(p.x, p.y),
        }
    }

    pub fn class_at(&self, p: Point) -> usize {
        self.sample(p).class
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_points(world: &World, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, e) = (world.spec().margin(), world.spec().extent);
        (0..n)
            .map(|_| Point::new(rng.random_range(m..e - m), rng.random_range(m..e - m)))
            .collect()
    }

    #[test]
    fn spec_validation() {
        WorldSpec::default().validate().unwrap();
        let mut s = WorldSpec::default();
        s.tile_meters.insert(Zoom::Z14, 3000.0);
        assert!(s.validate().is_err());
        let s = WorldSpec { extent: 20_000.0, ..WorldSpec::default() };
        assert!(s.validate().is_err());
        let s = WorldSpec { class_count: 9, ..WorldSpec::default() };
        assert!(s.validate().is_err());
        let s = WorldSpec::default().scale_ambiguous();
        assert_eq!(s.context_radius, (100.0, 400.0));
    }

    #[test]
    fn field_is_deterministic() {
        let a = World::new(WorldSpec::default()).unwrap();
        let b = World::new(WorldSpec::default()).unwrap();
        for p in uniform_points(&a, 500, 3) {
            assert_eq!(a.sample(p), b.sample(p));
        }
    }

    #[test]
    fn every_class_is_common() {
        let world = World::new(WorldSpec::default()).unwrap();
        let mut hist = [0usize; 8];
        let pts = uniform_points(&world, 100_000, 11);
        for &p in &pts {
            hist[world.class_at(p)] += 1;
        }
        for (c, &h) in hist.iter().enumerate() {
            let f = h as f64 / pts.len() as f64;
            assert!(f >= 0.02, "{} has share {f}", CLASS_NAMES[c]);
        }
    }

    #[test]
    fn classes_are_spatially_coherent() {
        let world = World::new(WorldSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = uniform_points(&world, 20_000, 12);
        let same = pts
            .iter()
            .filter(|&&p| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                world.class_at(p) == world.class_at(Point::new(p.x + a.cos(), p.y + a.sin()))
            })
            .count();
        assert!(same as f64 / pts.len() as f64 >= 0.99);
    }

    #[test]
    fn coast_borders_water() {
        // Walking from a water point to a non-water, non-coast point crosses coast.
        let world = World::new(WorldSpec::default()).unwrap();
        let pts = uniform_points(&world, 4000, 13);
        let water = pts.iter().find(|&&p| world.class_at(p) == 0).copied().unwrap();
        let mut crossings = 0;
        for &q in pts.iter().filter(|&&p| world.class_at(p) == 2).take(20) {
            let mut prev = 0;
            for s in 0..=4000 {
                let t = s as f64 / 4000.0;
                let c = world.class_at(Point::new(water.x + (q.x - water.x) * t, water.y + (q.y - water.y) * t));
                if prev == 0 && c != 0 {
                    assert_eq!(c, 1, "water must hand over to coast");
                    crossings += 1;
                }
                prev = c;
            }
        }
        assert!(crossings > 0);
    }

    #[test]
    fn patches_override_later_first() {
        let spec = WorldSpec {
            patches: vec![
                Patch { region: Region::Everywhere, class: 2 },
                Patch { region: Region::Disk { center: Point::new(5000.0, 5000.0), radius: 100.0 }, class: 6 },
            ],
            ..WorldSpec::default()
        };
        let world = World::new(spec).unwrap();
        assert_eq!(world.class_at(Point::new(5050.0, 5000.0)), 6);
        assert_eq!(world.class_at(Point::new(5150.0, 5000.0)), 2);
    }
}
