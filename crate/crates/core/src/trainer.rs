//! Ground pretraining and cross-view training.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::Zoom;
use crate::image::RgbImage;
use crate::models::{ArchSpec, Mode, MultiScaleNet, Network};
use crate::synth::{Manifest, Split};
use crate::tensor::{Graph, ParamStore, Sgd, Tensor};

pub const FEATURES_MAGIC: &[u8; 4] = b"CVFT";
pub const FEATURES_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetZoom {
    Single(Zoom),
    Multi,
}

impl fmt::Display for TargetZoom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetZoom::Single(z) => write!(f, "{z}"),
            TargetZoom::Multi => f.write_str("multi"),
        }
    }
}

impl FromStr for TargetZoom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "multi" {
            Ok(TargetZoom::Multi)
        } else {
            s.parse().map(TargetZoom::Single)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation runs at step 0, after every `eval_every` updates and after
    /// the last update.
    pub eval_every: usize,
    pub target_zoom: TargetZoom,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            eval_every: 100,
            target_zoom: TargetZoom::Single(Zoom::Z18),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it is the null-optimizer configuration.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("batch_size, epochs and eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Training loss of update `i` (0-based).
    pub losses: Vec<f32>,
    /// `(updates so far, validation metric)`; lower is better.
    pub evals: Vec<(usize, f64)>,
    pub epoch_seconds: Vec<f64>,
    /// Update count at which the returned parameters were taken.
    pub best_step: usize,
    /// Name of the validation metric column.
    pub metric: &'static str,
    /// Classification accuracy of the returned ground network on val.
    pub val_accuracy: Option<f64>,
}

impl TrainLog {
    pub fn best_metric(&self) -> f64 {
        self.evals
            .iter()
            .find(|(s, _)| *s == self.best_step)
            .map_or(f64::NAN, |e| e.1)
    }

    pub fn initial_metric(&self) -> f64 {
        self.evals.first().map_or(f64::NAN, |e| e.1)
    }

    /// Trailing moving average of the loss over `window` updates.
    pub fn smoothed_losses(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, &l) in self.losses.iter().enumerate() {
            acc += l as f64;
            if i >= w {
                acc -= self.losses[i - w] as f64;
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.metric);
        for (step, v) in &self.evals {
            s.push_str(&format!("{step},{v}\n"));
        }
        s
    }

    /// Write `{prefix}_loss.csv` and `{prefix}_val.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (name, body) in [("loss", self.loss_csv()), ("val", self.eval_csv())] {
            let p = dir.join(format!("{prefix}_{name}.csv"));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Which picture of a record to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Ground,
    Aerial(Zoom),
}

/// Decoded 8-bit images of selected manifest records, planar per image.
#[derive(Clone, Debug)]
pub struct ImageTable {
    side: usize,
    data: Vec<u8>,
    len: usize,
}

impl ImageTable {
    pub fn from_manifest(manifest: &Manifest, rows: &[usize], view: View) -> Result<Self> {
        let images = rows
            .par_iter()
            .map(|&i| match view {
                View::Ground => manifest.ground_image(i),
                View::Aerial(z) => manifest.aerial_image(i, z),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_images(manifest.side(), &images))
    }

    pub fn from_images(side: usize, images: &[RgbImage]) -> Self {
        let plane = side * side;
        let mut data = Vec::with_capacity(images.len() * 3 * plane);
        for img in images {
            let raw = img.as_raw();
            for c in 0..3 {
                data.extend(raw.iter().skip(c).step_by(3));
            }
        }
        ImageTable { side, data, len: images.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn image_len(&self) -> usize {
        3 * self.side * self.side
    }

    /// `[rows.len(), 3, S, S]` in `[0, 1]`.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let n = self.image_len();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend(self.data[r * n..(r + 1) * n].iter().map(|&v| v as f32 / 255.0));
        }
        Tensor::new([rows.len(), 3, self.side, self.side], out).expect("sized above")
    }

    pub fn all(&self) -> Tensor {
        self.batch(&(0..self.len).collect::<Vec<_>>())
    }

    /// Per-channel mean in `[0, 1]` units.
    pub fn channel_mean(&self) -> [f32; 3] {
        let plane = self.side * self.side;
        let mut sums = [0u64; 3];
        for img in self.data.chunks_exact(self.image_len().max(1)) {
            for c in 0..3 {
                sums[c] += img[c * plane..(c + 1) * plane].iter().map(|&v| v as u64).sum::<u64>();
            }
        }
        let count = (self.len * plane).max(1) as f64 * 255.0;
        sums.map(|s| (s as f64 / count) as f32)
    }
}

/// Ground embeddings keyed by record id: the constant regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    /// `[ids.len(), D]`.
    pub features: Tensor,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    fn index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Rows of `features` for the given manifest records.
    pub fn rows_for(&self, manifest: &Manifest, rows: &[usize]) -> Result<Tensor> {
        let index = self.index();
        let picked = rows
            .iter()
            .map(|&r| {
                let id = manifest.records()[r].id;
                index
                    .get(&id)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("no target feature for record {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.features.gather_rows(&picked))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURES_MAGIC);
        out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("feature table: {m}"));
        if bytes.len() < 14 || &bytes[..4] != FEATURES_MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != FEATURES_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        let body = &bytes[14..];
        if body.len() != n * 8 + n * d * 4 {
            return Err(bad("size does not match header"));
        }
        let ids = body[..n * 8]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let data = body[n * 8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FeatureTable { ids, features: Tensor::new([n, d], data)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Mean unsquared distance between matching rows.
pub fn mean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape("mean_distance", a.shape(), b.shape()));
    }
    let n = a.shape()[0];
    if n == 0 {
        return Err(Error::Invalid("mean distance of an empty set".into()));
    }
    let total: f64 = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Shared SGD loop. `step` returns the batch loss and parameter gradients;
/// `eval` returns the validation metric.
fn optimize(
    params: &mut ParamStore,
    train_len: usize,
    cfg: &TrainConfig,
    metric: &'static str,
    mut step: impl FnMut(&ParamStore, &[usize]) -> Result<(f32, BTreeMap<String, Tensor>)>,
    mut eval: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<(ParamStore, TrainLog)> {
    cfg.validate()?;
    if train_len == 0 {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog { metric, ..TrainLog::default() };
    let mut best = params.clone();
    let mut best_value = f64::INFINITY;
    let mut record = |log: &mut TrainLog, params: &ParamStore, updates: usize| -> Result<()> {
        let v = eval(params)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation {metric} is {v} after {updates} updates (lr {})",
                cfg.lr
            )));
        }
        log.evals.push((updates, v));
        if v < best_value {
            best_value = v;
            best = params.clone();
            log.best_step = updates;
        }
        Ok(())
    };

    record(&mut log, params, 0)?;
    let mut order: Vec<usize> = (0..train_len).collect();
    let mut updates = 0;
    for _ in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = step(params, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at step {updates} (lr {})",
                    cfg.lr
                )));
            }
            log.losses.push(loss);
            sgd.step(params, &grads)?;
            updates += 1;
            if updates % cfg.eval_every == 0 {
                record(&mut log, params, updates)?;
            }
        }
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if updates % cfg.eval_every != 0 {
        record(&mut log, params, updates)?;
    }
    Ok((best, log))
}

fn class_labels(manifest: &Manifest, rows: &[usize], classes: usize) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            let rec = &manifest.records()[r];
            if rec.scene_class >= classes {
                Err(Error::Invalid(format!(
                    "record {} has class {} but the network has {classes} classes",
                    rec.id, rec.scene_class
                )))
            } else {
                Ok(rec.scene_class)
            }
        })
        .collect()
}

fn accuracy(net: &Network, images: &ImageTable, labels: &[usize], classes: usize) -> Result<f64> {
    let feats = net.extract(&images.all())?;
    let hits = (0..labels.len())
        .filter(|&i| {
            let row = &feats.row(i)[..classes];
            let arg = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == labels[i]
        })
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Validation rows, or training rows when the manifest has no val split.
fn holdout(manifest: &Manifest, train: &[usize]) -> Vec<usize> {
    let val = manifest.split_indices(Split::Val);
    if val.is_empty() {
        train.to_vec()
    } else {
        val
    }
}

/// Train the ground extractor as a scene classifier on the embedding's
/// first `class_count` coordinates. The returned network is in eval mode.
pub fn pretrain_ground(manifest: &Manifest, arch: &ArchSpec, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    let classes = arch
        .class_count
        .ok_or_else(|| Error::Invalid("ground pretraining needs class_count".into()))?;
    let train = manifest.split_indices(Split::Train);
    let val = holdout(manifest, &train);
    let train_labels = class_labels(manifest, &train, classes)?;
    let val_labels = class_labels(manifest, &val, classes)?;
    let train_img = ImageTable::from_manifest(manifest, &train, View::Ground)?;
    let val_img = ImageTable::from_manifest(manifest, &val, View::Ground)?;

    let mut net = Network::new(arch.clone(), cfg.seed)?;
    net.input_mean = train_img.channel_mean();
    let template = net.clone();
    let mut params = net.params.clone();
    let (best, mut log) = optimize(
        &mut params,
        train.len(),
        cfg,
        "val_error",
        |p, batch| {
            let mut g = Graph::new();
            let y = template.forward_with(p, &mut g, &train_img.batch(batch), true)?;
            let logits = g.narrow(y, 0, classes)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), g.param_grads()))
        },
        |p| {
            let probe = Network { params: p.clone(), ..template.clone() };
            Ok(1.0 - accuracy(&probe, &val_img, &val_labels, classes)?)
        },
    )?;
    net.params = best;
    net.mode = Mode::Eval;
    log.val_accuracy = Some(1.0 - log.best_metric());
    Ok((net, log))
}

/// Ground embedding of every manifest record, in manifest order.
pub fn precompute_targets(f_g: &Network, manifest: &Manifest) -> Result<FeatureTable> {
    if f_g.mode != Mode::Eval {
        return Err(Error::Invalid("ground network must be in eval mode".into()));
    }
    let d = f_g.feature_dim();
    let mut data = Vec::with_capacity(manifest.len() * d);
    let rows: Vec<usize> = (0..manifest.len()).collect();
    for chunk in rows.chunks(256) {
        let images = chunk
            .par_iter()
            .map(|&i| {
                manifest.ground_image(i).map_err(|e| match e {
                    Error::Format(m) => Error::Format(format!("record {}: {m}", manifest.records()[i].id)),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = ImageTable::from_images(manifest.side(), &images);
        data.extend_from_slice(f_g.extract_ground(&table.all())?.data());
    }
    Ok(FeatureTable {
        ids: manifest.records().iter().map(|r| r.id).collect(),
        features: Tensor::new([manifest.len(), d], data)?,
    })
}

fn require_zoom(manifest: &Manifest, zoom: Zoom) -> Result<()> {
    if manifest.zooms().contains(&zoom) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("manifest has no z{zoom} tiles for every record")))
    }
}

/// Regress an aerial network, started from the ground network's weights,
/// onto the cached ground embeddings.
pub fn train_crossview_single(
    manifest: &Manifest,
    targets: &FeatureTable,
    f_g: &Network,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    let TargetZoom::Single(zoom) = cfg.target_zoom else {
        return Err(Error::Invalid("single-scale training needs a single target zoom".into()));
    };
    require_zoom(manifest, zoom)?;
    let train = manifest.split_indices(Split::Train);
    let val = holdout(manifest, &train);
    let train_t = targets.rows_for(manifest, &train)?;
    let val_t = targets.rows_for(manifest, &val)?;
    let train_img = ImageTable::from_manifest(manifest, &train, View::Aerial(zoom))?;
    let val_img = ImageTable::from_manifest(manifest, &val, View::Aerial(zoom))?;

    let mut net = f_g.clone();
    net.zoom = Some(zoom);
    net.mode = Mode::Train;
    net.input_mean = train_img.channel_mean();
    let template = net.clone();
    let mut params = net.params.clone();
    let (best, log) = optimize(
        &mut params,
        train.len(),
        cfg,
        "val_distance",
        |p, batch| {
            let mut g = Graph::new();
            let y = template.forward_with(p, &mut g, &train_img.batch(batch), true)?;
            let t = g.constant(train_t.gather_rows(batch));
            let loss = g.euclidean_loss(y, t)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), g.param_grads()))
        },
        |p| {
            let probe = Network { params: p.clone(), ..template.clone() };
            mean_distance(&probe.extract(&val_img.all())?, &val_t)
        },
    )?;
    net.params = best;
    net.mode = Mode::Eval;
    Ok((net, log))
}

/// Three untied copies of the best single-scale network plus a fresh fusion
/// layer, all trained end to end against the same targets.
pub fn train_crossview_multi(
    manifest: &Manifest,
    targets: &FeatureTable,
    f_a_best: &Network,
    cfg: &TrainConfig,
) -> Result<(MultiScaleNet, TrainLog)> {
    let zooms = Zoom::PYRAMID;
    for z in zooms {
        require_zoom(manifest, z)?;
    }
    let train = manifest.split_indices(Split::Train);
    let val = holdout(manifest, &train);
    let train_t = targets.rows_for(manifest, &train)?;
    let val_t = targets.rows_for(manifest, &val)?;
    let load = |rows: &[usize]| -> Result<Vec<ImageTable>> {
        zooms.iter().map(|&z| ImageTable::from_manifest(manifest, rows, View::Aerial(z))).collect()
    };
    let train_img = load(&train)?;
    let val_img = load(&val)?;

    let mut net = MultiScaleNet::from_single(f_a_best, zooms, cfg.seed)?;
    let template = net.clone();
    let mut params = net.params.clone();
    let (best, log) = optimize(
        &mut params,
        train.len(),
        cfg,
        "val_distance",
        |p, batch| {
            let mut g = Graph::new();
            let b: Vec<Tensor> = train_img.iter().map(|t| t.batch(batch)).collect();
            let y = template.forward_with(p, &mut g, [&b[0], &b[1], &b[2]], true)?;
            let t = g.constant(train_t.gather_rows(batch));
            let loss = g.euclidean_loss(y, t)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), g.param_grads()))
        },
        |p| {
            let probe = MultiScaleNet { params: p.clone(), ..template.clone() };
            let f = probe.extract_aerial_multi(&val_img[0].all(), &val_img[1].all(), &val_img[2].all())?;
            mean_distance(&f, &val_t)
        },
    )?;
    net.params = best;
    net.mode = Mode::Eval;
    Ok((net, log))
}
