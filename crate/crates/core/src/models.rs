//! The three network roles: ground extractor, single-scale aerial extractor
//! and the multi-scale fusion extractor.
//!
//! All three share one miniature convolutional trunk:
//! `[conv3x3(pad 1) → relu → maxpool2]* → fc(hidden) → relu → fc(D)`.
//! The last layer is the embedding; when the network has a classification
//! head its first `class_count` coordinates are the class logits, so the
//! embedding is the pre-softmax layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{format_zooms, parse_zooms, Zoom};
use crate::tensor::{gradient_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Real, Tensor, Var};

const EXTRACT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_side: usize,
    pub input_channels: usize,
    /// Output channels of each conv block.
    pub conv_blocks: Vec<usize>,
    pub fc_hidden: usize,
    pub feature_dim: usize,
    pub class_count: Option<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_side: 64,
            input_channels: 3,
            conv_blocks: vec![16, 32, 64],
            fc_hidden: 128,
            feature_dim: 32,
            class_count: None,
        }
    }
}

impl ArchSpec {
    pub fn with_classes(mut self, class_count: usize) -> Self {
        self.class_count = Some(class_count);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.conv_blocks.len();
        if self.input_side == 0 || self.input_side % div != 0 {
            return Err(Error::Invalid(format!(
                "input_side {} must be a positive multiple of 2^{}",
                self.input_side,
                self.conv_blocks.len()
            )));
        }
        if self.input_channels == 0 || self.fc_hidden == 0 || self.conv_blocks.contains(&0) {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Invalid(format!("feature_dim {} must be >= 2", self.feature_dim)));
        }
        if let Some(c) = self.class_count {
            if c < 2 || c > self.feature_dim {
                return Err(Error::Invalid(format!(
                    "class_count {c} must be in [2, feature_dim={}]",
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Width of the flattened last conv block.
    pub fn flat_dim(&self) -> usize {
        let side = self.input_side >> self.conv_blocks.len();
        self.conv_blocks.last().copied().unwrap_or(self.input_channels) * side * side
    }

    pub fn write_kv(&self, kv: &mut BTreeMap<String, String>) {
        let blocks = self.conv_blocks.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv.insert("input_side".into(), self.input_side.to_string());
        kv.insert("input_channels".into(), self.input_channels.to_string());
        kv.insert("conv_blocks".into(), blocks);
        kv.insert("fc_hidden".into(), self.fc_hidden.to_string());
        kv.insert("feature_dim".into(), self.feature_dim.to_string());
        if let Some(c) = self.class_count {
            kv.insert("class_count".into(), c.to_string());
        }
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("architecture is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("architecture field {k} is not an integer")))
        };
        let conv_blocks = get("conv_blocks")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format("bad conv_blocks".into()))?;
        let spec = ArchSpec {
            input_side: num("input_side")?,
            input_channels: num("input_channels")?,
            conv_blocks,
            fc_hidden: num("fc_hidden")?,
            feature_dim: num("feature_dim")?,
            class_count: if kv.contains_key("class_count") {
                Some(num("class_count")?)
            } else {
                None
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Seeded parameters for one trunk.
pub fn init_params(spec: &ArchSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new(seed);
    let mut c_in = spec.input_channels;
    for (i, &k) in spec.conv_blocks.iter().enumerate() {
        p.insert(format!("conv{}.weight", i + 1), he_normal(&[k, c_in, 3, 3], c_in * 9, &mut rng))?;
        p.insert(format!("conv{}.bias", i + 1), Tensor::zeros([k]))?;
        c_in = k;
    }
    let flat = spec.flat_dim();
    p.insert("hidden.weight", he_normal(&[flat, spec.fc_hidden], flat, &mut rng))?;
    p.insert("hidden.bias", Tensor::zeros([spec.fc_hidden]))?;
    p.insert(
        "embed.weight",
        he_normal(&[spec.fc_hidden, spec.feature_dim], spec.fc_hidden, &mut rng),
    )?;
    p.insert("embed.bias", Tensor::zeros([spec.feature_dim]))?;
    Ok(p)
}

fn bind<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
    let t = params.get(name)?.clone();
    Ok(if trainable { g.param(name, t) } else { g.constant(t) })
}

/// Trunk forward pass on normalized input `[N, C, S, S]`, reading parameters
/// named `{prefix}conv1.weight`, ….
pub fn trunk<T: Real>(
    spec: &ArchSpec,
    params: &ParamStore<T>,
    prefix: &str,
    g: &mut Graph<T>,
    x: Var,
    trainable: bool,
) -> Result<Var> {
    let mut h = x;
    for i in 1..=spec.conv_blocks.len() {
        let w = bind(g, params, &format!("{prefix}conv{i}.weight"), trainable)?;
        let b = bind(g, params, &format!("{prefix}conv{i}.bias"), trainable)?;
        h = g.conv2d(h, w, b, 1, 1)?;
        h = g.relu(h);
        h = g.maxpool2d(h)?;
    }
    h = g.flatten(h)?;
    let w = bind(g, params, &format!("{prefix}hidden.weight"), trainable)?;
    let b = bind(g, params, &format!("{prefix}hidden.bias"), trainable)?;
    h = g.fully_connected(h, w, b)?;
    h = g.relu(h);
    let w = bind(g, params, &format!("{prefix}embed.weight"), trainable)?;
    let b = bind(g, params, &format!("{prefix}embed.bias"), trainable)?;
    g.fully_connected(h, w, b)
}

fn check_images(spec: &ArchSpec, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let want = [images.shape().first().copied().unwrap_or(0), spec.input_channels, spec.input_side, spec.input_side];
    if s != want {
        return Err(Error::shape("network input", &want, s));
    }
    Ok(())
}

fn normalize<T: Real>(images: &Tensor, mean: &[f32; 3]) -> Tensor<T> {
    let plane = images.shape()[2] * images.shape()[3];
    let channels = images.shape()[1];
    let data = images
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % channels;
            T::from_f64((v - mean.get(c).copied().unwrap_or(0.0)) as f64)
        })
        .collect();
    Tensor::new(images.shape(), data).expect("same shape")
}

fn format_mean(m: &[f32; 3]) -> String {
    m.iter().map(f32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_mean(s: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad input_mean {s:?}")))?;
    v.try_into().map_err(|_| Error::Format(format!("input_mean needs 3 values, got {s:?}")))
}

/// SHA-256 of a serialized checkpoint.
pub fn checksum(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A single trunk: the ground extractor or a single-scale aerial extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: ArchSpec,
    pub params: ParamStore,
    pub mode: Mode,
    /// Per-channel mean subtracted from `[0, 1]` pixels before the first conv.
    pub input_mean: [f32; 3],
    /// Aerial zoom the network reads; `None` for a ground extractor.
    pub zoom: Option<Zoom>,
}

impl Network {
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Network {
            spec,
            params,
            mode: Mode::Train,
            input_mean: [0.0; 3],
            zoom: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Forward pass on raw `[0, 1]` pixels, registering parameters as
    /// trainable leaves when `trainable`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, trainable: bool) -> Result<Var> {
        self.forward_with(&self.params, g, images, trainable)
    }

    /// Same as [`Network::forward`] with externally supplied parameters, in
    /// any precision.
    pub fn forward_with<T: Real>(
        &self,
        params: &ParamStore<T>,
        g: &mut Graph<T>,
        images: &Tensor,
        trainable: bool,
    ) -> Result<Var> {
        check_images(&self.spec, images)?;
        let x = g.constant(normalize(images, &self.input_mean));
        trunk(&self.spec, params, "", g, x, trainable)
    }

    /// Embeddings `[N, D]` for a batch of images; no gradients are kept.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        check_images(&self.spec, images)?;
        let n = images.shape()[0];
        let d = self.spec.feature_dim;
        let mut out = Vec::with_capacity(n * d);
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(EXTRACT_BATCH) {
            let batch = images.gather_rows(chunk);
            let mut g = Graph::new();
            let y = self.forward(&mut g, &batch, false)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::new([n, d], out)
    }

    /// The ground extractor's pre-softmax embedding.
    pub fn extract_ground(&self, images: &Tensor) -> Result<Tensor> {
        if self.spec.class_count.is_none() {
            return Err(Error::Invalid("ground extractor needs a classification head".into()));
        }
        self.extract(images)
    }

    pub fn extract_aerial_single(&self, tiles: &Tensor) -> Result<Tensor> {
        self.extract(tiles)
    }

    pub fn header(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("kind".into(), "single".into());
        self.spec.write_kv(&mut kv);
        kv.insert("input_mean".into(), format_mean(&self.input_mean));
        if let Some(z) = self.zoom {
            kv.insert("zooms".into(), z.to_string());
        }
        kv
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.encode(&self.header())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, kv) = ParamStore::decode(bytes)?;
        Self::from_parts(params, &kv)
    }

    fn from_parts(params: ParamStore, kv: &BTreeMap<String, String>) -> Result<Self> {
        if kv.get("kind").map(String::as_str) != Some("single") {
            return Err(Error::Format("checkpoint is not a single-trunk network".into()));
        }
        let spec = ArchSpec::from_kv(kv)?;
        let expected = init_params(&spec, 0)?;
        for (name, t) in expected.iter() {
            let got = params.get(name).map_err(|e| Error::Format(e.to_string()))?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint entry", t.shape(), got.shape()));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Format("checkpoint has unexpected entries".into()));
        }
        let zoom = match kv.get("zooms") {
            Some(z) => parse_zooms(z)?.first().copied(),
            None => None,
        };
        Ok(Network {
            spec,
            params,
            mode: Mode::Eval,
            input_mean: kv.get("input_mean").map(|s| parse_mean(s)).transpose()?.unwrap_or([0.0; 3]),
            zoom,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn checksum(&self) -> Result<[u8; 32]> {
        Ok(checksum(&self.to_bytes()?))
    }
}

/// Three untied trunks, one per zoom (fine → coarse), whose embeddings are
/// concatenated and fused by one fully-connected layer.
///
/// All parameters live in one store: subnet entries are prefixed with
/// `fine.`, `mid.` and `coarse.`, the fusion layer with `fusion.`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleNet {
    pub spec: ArchSpec,
    pub params: ParamStore,
    pub mode: Mode,
    pub input_mean: [f32; 3],
    pub zooms: [Zoom; 3],
}

pub const SCALE_PREFIXES: [&str; 3] = ["fine.", "mid.", "coarse."];
pub const FUSION_WEIGHT: &str = "fusion.weight";
pub const FUSION_BIAS: &str = "fusion.bias";

impl MultiScaleNet {
    /// Copy `best` into all three subnets and draw a fresh fusion layer.
    pub fn from_single(best: &Network, zooms: [Zoom; 3], seed: u64) -> Result<Self> {
        let d = best.spec.feature_dim;
        let mut params = ParamStore::new(seed);
        for prefix in SCALE_PREFIXES {
            params.absorb(prefix, best.params.clone())?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.insert(FUSION_WEIGHT, he_normal(&[3 * d, d], 3 * d, &mut rng))?;
        params.insert(FUSION_BIAS, Tensor::zeros([d]))?;
        Ok(MultiScaleNet {
            spec: best.spec.clone(),
            params,
            mode: Mode::Train,
            input_mean: best.input_mean,
            zooms,
        })
    }

    /// Subnet `i` (0 = fine) as a standalone network.
    pub fn subnet(&self, i: usize) -> Network {
        Network {
            spec: self.spec.clone(),
            params: self.params.sub_store(SCALE_PREFIXES[i]),
            mode: self.mode,
            input_mean: self.input_mean,
            zoom: Some(self.zooms[i]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn forward(&self, g: &mut Graph, tiles: [&Tensor; 3], trainable: bool) -> Result<Var> {
        self.forward_with(&self.params, g, tiles, trainable)
    }

    pub fn forward_with<T: Real>(
        &self,
        params: &ParamStore<T>,
        g: &mut Graph<T>,
        tiles: [&Tensor; 3],
        trainable: bool,
    ) -> Result<Var> {
        let n = tiles[0].shape().first().copied().unwrap_or(0);
        let mut feats = Vec::with_capacity(3);
        for (t, prefix) in tiles.iter().zip(SCALE_PREFIXES) {
            check_images(&self.spec, t)?;
            if t.shape()[0] != n {
                return Err(Error::shape("multi-scale batch", tiles[0].shape(), t.shape()));
            }
            let x = g.constant(normalize(t, &self.input_mean));
            feats.push(trunk(&self.spec, params, prefix, g, x, trainable)?);
        }
        let cat = g.concat(&feats)?;
        let w = bind(g, params, FUSION_WEIGHT, trainable)?;
        let b = bind(g, params, FUSION_BIAS, trainable)?;
        g.fully_connected(cat, w, b)
    }

    pub fn extract_aerial_multi(&self, fine: &Tensor, mid: &Tensor, coarse: &Tensor) -> Result<Tensor> {
        let n = fine.shape().first().copied().unwrap_or(0);
        if mid.shape().first() != Some(&n) || coarse.shape().first() != Some(&n) {
            return Err(Error::shape("multi-scale batch", fine.shape(), mid.shape()));
        }
        for t in [fine, mid, coarse] {
            check_images(&self.spec, t)?;
        }
        let d = self.spec.feature_dim;
        let mut out = Vec::with_capacity(n * d);
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(EXTRACT_BATCH) {
            let b = [fine.gather_rows(chunk), mid.gather_rows(chunk), coarse.gather_rows(chunk)];
            let mut g = Graph::new();
            let y = self.forward(&mut g, [&b[0], &b[1], &b[2]], false)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::new([n, d], out)
    }

    pub fn header(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("kind".into(), "multi".into());
        self.spec.write_kv(&mut kv);
        kv.insert("input_mean".into(), format_mean(&self.input_mean));
        kv.insert("zooms".into(), format_zooms(&self.zooms));
        kv
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.encode(&self.header())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, kv) = ParamStore::decode(bytes)?;
        if kv.get("kind").map(String::as_str) != Some("multi") {
            return Err(Error::Format("checkpoint is not a multi-scale network".into()));
        }
        let spec = ArchSpec::from_kv(&kv)?;
        let zooms: [Zoom; 3] = parse_zooms(kv.get("zooms").map(String::as_str).unwrap_or(""))?
            .try_into()
            .map_err(|_| Error::Format("multi-scale checkpoint needs three zooms".into()))?;
        let d = spec.feature_dim;
        if params.get(FUSION_WEIGHT).map(|t| t.shape().to_vec()).ok() != Some(vec![3 * d, d]) {
            return Err(Error::Format("fusion layer missing or misshapen".into()));
        }
        Ok(MultiScaleNet {
            spec,
            params,
            mode: Mode::Eval,
            input_mean: kv.get("input_mean").map(|s| parse_mean(s)).transpose()?.unwrap_or([0.0; 3]),
            zooms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// What the trainer and the index builder need from an aerial extractor.
pub trait AerialModel: Send + Sync {
    /// Zoom of each input, in the order `forward` expects them.
    fn zooms(&self) -> Result<Vec<Zoom>>;
    fn feature_dim(&self) -> usize;
    fn input_side(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn set_mode(&mut self, mode: Mode);
    fn forward(&self, g: &mut Graph, tiles: &[&Tensor], trainable: bool) -> Result<Var>;
    fn extract(&self, tiles: &[&Tensor]) -> Result<Tensor>;
    fn to_bytes(&self) -> Result<Vec<u8>>;
}

impl AerialModel for Network {
    fn zooms(&self) -> Result<Vec<Zoom>> {
        self.zoom
            .map(|z| vec![z])
            .ok_or_else(|| Error::Invalid("network has no aerial zoom assigned".into()))
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn input_side(&self) -> usize {
        self.spec.input_side
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn forward(&self, g: &mut Graph, tiles: &[&Tensor], trainable: bool) -> Result<Var> {
        match tiles {
            [t] => Network::forward(self, g, t, trainable),
            _ => Err(Error::Invalid(format!("single-scale network takes 1 input, got {}", tiles.len()))),
        }
    }

    fn extract(&self, tiles: &[&Tensor]) -> Result<Tensor> {
        match tiles {
            [t] => self.extract_aerial_single(t),
            _ => Err(Error::Invalid(format!("single-scale network takes 1 input, got {}", tiles.len()))),
        }
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        Network::to_bytes(self)
    }
}

impl AerialModel for MultiScaleNet {
    fn zooms(&self) -> Result<Vec<Zoom>> {
        Ok(self.zooms.to_vec())
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn input_side(&self) -> usize {
        self.spec.input_side
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn forward(&self, g: &mut Graph, tiles: &[&Tensor], trainable: bool) -> Result<Var> {
        match tiles {
            [a, b, c] => MultiScaleNet::forward(self, g, [a, b, c], trainable),
            _ => Err(Error::Invalid(format!("multi-scale network takes 3 inputs, got {}", tiles.len()))),
        }
    }

    fn extract(&self, tiles: &[&Tensor]) -> Result<Tensor> {
        match tiles {
            [a, b, c] => self.extract_aerial_multi(a, b, c),
            _ => Err(Error::Invalid(format!("multi-scale network takes 3 inputs, got {}", tiles.len()))),
        }
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        MultiScaleNet::to_bytes(self)
    }
}

/// Load either kind of aerial checkpoint.
pub fn load_aerial(path: &Path) -> Result<Box<dyn AerialModel>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, kv) = ParamStore::decode(&bytes)?;
    match kv.get("kind").map(String::as_str) {
        Some("multi") => Ok(Box::new(MultiScaleNet::from_bytes(&bytes)?)),
        Some("single") => Ok(Box::new(Network::from_bytes(&bytes)?)),
        other => Err(Error::Format(format!("unknown checkpoint kind {other:?}"))),
    }
}

/// Gradient check of a seeded network of shape `spec` on a random batch,
/// regressed onto a random target, in double precision.
pub fn check_network(spec: &ArchSpec, batch: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let net = Network::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C1D);
    let side = spec.input_side;
    let n = batch * spec.input_channels * side * side;
    let images = Tensor::new([batch, spec.input_channels, side, side], (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let d = spec.feature_dim;
    let target = Tensor::<f64>::new([batch, d], (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    gradient_check(
        &net.params.cast(),
        |g, p| {
            let y = net.forward_with(p, g, &images, true)?;
            let t = g.constant(target.clone());
            g.euclidean_loss(y, t)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ArchSpec {
        ArchSpec {
            input_side: 8,
            input_channels: 3,
            conv_blocks: vec![4, 6],
            fc_hidden: 10,
            feature_dim: 5,
            class_count: Some(3),
        }
    }

    fn random_images(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new([n, 3, side, side], data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ArchSpec::default().validate().is_ok());
        let bad_side = ArchSpec {
            input_side: 60,
            ..ArchSpec::default()
        };
        assert!(bad_side.validate().is_err());
        let bad_dim = ArchSpec {
            feature_dim: 1,
            ..ArchSpec::default()
        };
        assert!(bad_dim.validate().is_err());
        assert!(ArchSpec::default().with_classes(1).validate().is_err());
        assert_eq!(ArchSpec::default().flat_dim(), 64 * 8 * 8);
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let a = Network::new(ArchSpec::default().with_classes(8), 11).unwrap();
        let b = Network::new(ArchSpec::default().with_classes(8), 11).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = Network::new(ArchSpec::default().with_classes(8), 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn empty_batch_gives_empty_features() {
        let net = Network::new(small_spec(), 1).unwrap();
        let out = net.extract_ground(&Tensor::zeros([0, 3, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[0, 5]);
    }

    #[test]
    fn wrong_side_is_rejected() {
        let net = Network::new(small_spec(), 1).unwrap();
        assert!(net.extract_ground(&Tensor::zeros([1, 3, 16, 16])).is_err());
        let headless = Network::new(
            ArchSpec {
                class_count: None,
                ..small_spec()
            },
            1,
        )
        .unwrap();
        assert!(headless.extract_ground(&Tensor::zeros([1, 3, 8, 8])).is_err());
        assert!(headless.extract_aerial_single(&Tensor::zeros([1, 3, 8, 8])).is_ok());
    }

    #[test]
    fn duplicated_rows_give_identical_features() {
        let net = Network::new(small_spec(), 3).unwrap();
        let one = random_images(1, 8, 5);
        let five = Tensor::stack(&vec![one.reshape([3, 8, 8]).unwrap(); 5]).unwrap();
        let feats = net.extract_aerial_single(&five).unwrap();
        let single = net.extract_aerial_single(&one).unwrap();
        for i in 0..5 {
            assert_eq!(feats.row(i), single.row(0));
        }
    }

    #[test]
    fn shared_weights_imply_shared_function() {
        let ground = Network::new(small_spec(), 4).unwrap();
        let mut aerial = ground.clone();
        aerial.zoom = Some(Zoom::Z18);
        let tiles = random_images(3, 8, 6);
        assert_eq!(
            ground.extract_ground(&tiles).unwrap(),
            AerialModel::extract(&aerial, &[&tiles]).unwrap()
        );
    }

    #[test]
    fn fusion_projection_reproduces_fine_subnet() {
        let best = Network::new(small_spec(), 7).unwrap();
        let mut multi = MultiScaleNet::from_single(&best, Zoom::PYRAMID, 9).unwrap();
        // Perturb the coarser subnets so a leak would show.
        for (name, t) in multi.params.iter_mut() {
            if name.starts_with("mid.") || name.starts_with("coarse.") {
                t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
            }
        }
        let d = 5;
        let mut w = vec![0.0; 3 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        *multi.params.get_mut(FUSION_WEIGHT).unwrap() = Tensor::new([3 * d, d], w).unwrap();
        let (f, m, c) = (random_images(4, 8, 1), random_images(4, 8, 2), random_images(4, 8, 3));
        let fused = multi.extract_aerial_multi(&f, &m, &c).unwrap();
        let fine = multi.subnet(0).extract_aerial_single(&f).unwrap();
        assert_eq!(fused, fine);
    }

    #[test]
    fn multi_scale_is_batch_equivariant() {
        let best = Network::new(small_spec(), 7).unwrap();
        let multi = MultiScaleNet::from_single(&best, Zoom::PYRAMID, 9).unwrap();
        let (f, m, c) = (random_images(4, 8, 1), random_images(4, 8, 2), random_images(4, 8, 3));
        let out = multi.extract_aerial_multi(&f, &m, &c).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = multi
            .extract_aerial_multi(&f.gather_rows(&perm), &m.gather_rows(&perm), &c.gather_rows(&perm))
            .unwrap();
        assert_eq!(permuted, out.gather_rows(&perm));
        assert!(multi.extract_aerial_multi(&f, &m.gather_rows(&[0, 1]), &c).is_err());
    }

    #[test]
    fn subnets_are_untied() {
        let best = Network::new(small_spec(), 7).unwrap();
        let mut multi = MultiScaleNet::from_single(&best, Zoom::PYRAMID, 9).unwrap();
        assert_eq!(multi.params.len(), 3 * best.params.len() + 2);
        multi.params.get_mut("fine.conv1.weight").unwrap().data_mut()[0] += 1.0;
        let same = |a: &ParamStore, b: &ParamStore| a.iter().eq(b.iter());
        assert!(!same(&multi.subnet(0).params, &best.params));
        assert!(same(&multi.subnet(1).params, &best.params));
        assert!(same(&multi.subnet(2).params, &best.params));
    }

    #[test]
    fn multi_scale_gradient_check() {
        let best = Network::new(small_spec(), 7).unwrap();
        let multi = MultiScaleNet::from_single(&best, Zoom::PYRAMID, 9).unwrap();
        let tiles = [random_images(2, 8, 1), random_images(2, 8, 2), random_images(2, 8, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Tensor::<f64>::new([2, 5], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = gradient_check(
            &multi.params.cast(),
            |g, p| {
                let y = multi.forward_with(p, g, [&tiles[0], &tiles[1], &tiles[2]], true)?;
                let t = g.constant(target.clone());
                g.euclidean_loss(y, t)
            },
            &GradCheckOptions {
                coords_per_entry: Some(6),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass(), "{report:#?}");
        for prefix in SCALE_PREFIXES {
            assert!(report.entries.iter().any(|e| e.name.starts_with(prefix) && e.checked > 0));
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut net = Network::new(small_spec(), 2).unwrap();
        net.input_mean = [0.1, 0.25, 1.0 / 3.0];
        net.zoom = Some(Zoom::Z16);
        let back = Network::from_bytes(&net.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.input_mean, net.input_mean);
        assert_eq!(back.zoom, net.zoom);
        assert_eq!(back.spec, net.spec);

        let multi = MultiScaleNet::from_single(&net, Zoom::PYRAMID, 1).unwrap();
        let bytes = multi.to_bytes().unwrap();
        let back = MultiScaleNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, multi.params);
        assert!(Network::from_bytes(&bytes).is_err());
    }
}
