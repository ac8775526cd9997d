use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::noise::hash3;
use super::render::{render_pair, Sample};
use super::world::World;
use crate::error::{Error, Result};
use crate::geo::{Point, Zoom};
use crate::image::{ppm_dimensions, RgbImage};

pub const MANIFEST_FILE: &str = "manifest.csv";
const FIXED_COLUMNS: [&str; 6] = ["id", "x", "y", "class", "split", "ground"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub location: Point,
    pub scene_class: usize,
    pub split: Split,
    pub ground: PathBuf,
    pub aerial: BTreeMap<Zoom, PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Records with these scene classes are dropped on load.
    pub class_blocklist: Vec<usize>,
    /// Required image side; taken from the first image when unset.
    pub expected_side: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    side: usize,
    records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &LoadOptions::default())
    }

    /// Parse the CSV and check that every referenced image exists and is
    /// square with the common side. Pixel data is decoded later, on demand.
    pub fn load_with(path: &Path, opts: &LoadOptions) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingAsset(path.to_path_buf()));
        }
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = parse_records(&text)?;
        records.retain(|r| !opts.class_blocklist.contains(&r.scene_class));
        let mut side = opts.expected_side;
        for r in &records {
            for rel in std::iter::once(&r.ground).chain(r.aerial.values()) {
                let full = root.join(rel);
                let (w, h) = ppm_dimensions(&full)?;
                let want = *side.get_or_insert(w);
                if w != want || h != want {
                    return Err(Error::ImageSide { path: full, found: if w != want { w } else { h }, expected: want });
                }
            }
        }
        Ok(Manifest { root, side: side.unwrap_or(0), records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Image side shared by every view; 0 for an empty manifest.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Zooms every record provides, fine to coarse.
    pub fn zooms(&self) -> Vec<Zoom> {
        let mut common: Option<BTreeSet<Zoom>> = None;
        for r in &self.records {
            let z: BTreeSet<Zoom> = r.aerial.keys().copied().collect();
            common = Some(match common {
                None => z,
                Some(c) => c.intersection(&z).copied().collect(),
            });
        }
        common.unwrap_or_default().into_iter().rev().collect()
    }

    pub fn ground_image(&self, index: usize) -> Result<RgbImage> {
        let r = &self.records[index];
        self.decode(r.id, &r.ground)
    }

    pub fn aerial_image(&self, index: usize, zoom: Zoom) -> Result<RgbImage> {
        let r = &self.records[index];
        let rel = r
            .aerial
            .get(&zoom)
            .ok_or_else(|| Error::Invalid(format!("record {} has no z{zoom} tile", r.id)))?;
        self.decode(r.id, rel)
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let aerial_tiles = r
            .aerial
            .keys()
            .map(|&z| Ok((z, self.aerial_image(index, z)?)))
            .collect::<Result<_>>()?;
        Ok(Sample {
            id: r.id,
            location: r.location,
            scene_class: r.scene_class,
            ground_image: self.ground_image(index)?,
            aerial_tiles,
        })
    }

    fn decode(&self, id: u64, rel: &Path) -> Result<RgbImage> {
        let full = self.root.join(rel);
        let img = RgbImage::load_ppm(&full).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("record {id}: {msg}")),
            other => other,
        })?;
        if img.width() != self.side || img.height() != self.side {
            return Err(Error::ImageSide { path: full, found: img.width(), expected: self.side });
        }
        Ok(img)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        let mut zooms: BTreeSet<Zoom> = Zoom::PYRAMID.into_iter().collect();
        for r in &self.records {
            zooms.extend(r.aerial.keys());
        }
        let zooms: Vec<Zoom> = zooms.into_iter().rev().collect();
        header.extend(zooms.iter().map(|z| format!("aerial_z{z}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.to_string(),
                format!("{:.2}", r.location.x),
                format!("{:.2}", r.location.y),
                r.scene_class.to_string(),
                r.split.to_string(),
                path_str(&r.ground),
            ];
            row.extend(zooms.iter().map(|z| r.aerial.get(z).map(|p| path_str(p)).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn parse_records(text: &[u8]) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
    let header = rdr
        .headers()
        .map_err(|e| Error::Malformed { line: 1, reason: e.to_string() })?
        .clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let mut fixed = [0usize; 6];
    for (slot, name) in fixed.iter_mut().zip(FIXED_COLUMNS) {
        *slot = col(name).ok_or_else(|| Error::Malformed { line: 1, reason: format!("missing column {name:?}") })?;
    }
    let mut aerial_cols = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if let Some(z) = h.trim().strip_prefix("aerial_") {
            let zoom: Zoom = z.parse().map_err(|_| Error::Malformed { line: 1, reason: format!("bad column {h:?}") })?;
            aerial_cols.push((i, zoom));
        }
    }
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Malformed {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| Error::Malformed { line, reason };
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad {} value {:?}", FIXED_COLUMNS[fixed.iter().position(|&c| c == i).unwrap_or(0)], field(i))))
        };
        let id: u64 = field(fixed[0]).parse().map_err(|_| bad(format!("bad id {:?}", field(fixed[0]))))?;
        if !ids.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        let location = Point::new(num(fixed[1])?, num(fixed[2])?);
        let scene_class = field(fixed[3]).parse().map_err(|_| bad(format!("bad class {:?}", field(fixed[3]))))?;
        let split = field(fixed[4]).parse().map_err(|e: Error| bad(e.to_string()))?;
        let ground = field(fixed[5]);
        if ground.is_empty() {
            return Err(bad("empty ground path".into()));
        }
        let aerial = aerial_cols
            .iter()
            .filter(|(i, _)| !field(*i).is_empty())
            .map(|&(i, z)| (z, PathBuf::from(field(i))))
            .collect();
        records.push(Record { id, location, scene_class, split, ground: PathBuf::from(ground), aerial });
    }
    Ok(records)
}

/// Render `n` pairs at seeded uniform locations, write their images under
/// `out_dir`, assign splits by a seeded shuffle and write `manifest.csv`.
pub fn generate_dataset(
    world: &World,
    n: usize,
    holdout_val: usize,
    holdout_test: usize,
    side: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if n <= holdout_val + holdout_test {
        return Err(Error::Invalid(format!(
            "n ({n}) must exceed val ({holdout_val}) + test ({holdout_test})"
        )));
    }
    let spec = world.spec();
    let zooms = spec.zooms();
    let mut dirs = vec!["ground".to_string()];
    dirs.extend(zooms.iter().map(|z| format!("aerial_z{z}")));
    for d in &dirs {
        let p = out_dir.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hash3(spec.seed, 0x5917, n as u64)));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..holdout_val] {
        splits[i] = Split::Val;
    }
    for &i in &order[holdout_val..holdout_val + holdout_test] {
        splits[i] = Split::Test;
    }

    let (lo, hi) = (spec.margin() + 0.01, spec.extent - spec.margin() - 0.01);
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(hash3(spec.seed, 0x5A3E, i as u64));
            let cm = |v: f64| (v * 100.0).round() / 100.0;
            let loc = Point::new(cm(rng.random_range(lo..hi)), cm(rng.random_range(lo..hi)));
            let sample = render_pair(world, i as u64, loc, side)?;
            let name = format!("{i:06}.ppm");
            let ground = PathBuf::from("ground").join(&name);
            sample.ground_image.save_ppm(&out_dir.join(&ground))?;
            let mut aerial = BTreeMap::new();
            for (z, tile) in &sample.aerial_tiles {
                let rel = PathBuf::from(format!("aerial_z{z}")).join(&name);
                tile.save_ppm(&out_dir.join(&rel))?;
                aerial.insert(*z, rel);
            }
            Ok(Record { id: i as u64, location: loc, scene_class: sample.scene_class, split: splits[i], ground, aerial })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest { root: out_dir.to_path_buf(), side, records };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
