//! The `crossview` command line: one subcommand per pipeline stage, each
//! driven by a resolved key=value configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::geo::{Point, Zoom};
use crate::geoindex::{build_index, evaluate, localize, Grid, ReferenceIndex};
use crate::models::{check_network, load_aerial, ArchSpec, Network};
use crate::synth::{generate_dataset, Manifest, Split, World, WorldSpec, MANIFEST_FILE};
use crate::tensor::{check_linear, GradCheckOptions, GradCheckReport, Tensor};
use crate::trainer::{
    precompute_targets, pretrain_ground, train_crossview_multi, train_crossview_single, ImageTable, TargetZoom,
    TrainConfig, View,
};
use crate::viz::{distance_heatmap, falsecolor_map, fine_heatmap, max_activation_report, report_csv, CategoryGroups, FineHeatmapSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// File the dataset's world parameters are stored in, next to the manifest.
pub const WORLD_FILE: &str = "world.cfg";

/// `(key, default, description)`. An empty default means unset.
const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "1", "global seed: world, splits, initialization, shuffling"),
    ("threads", "", "worker threads; empty uses every core"),
    ("out", "out", "output directory"),
    ("data", "", "dataset directory holding manifest.csv"),
    ("n", "4000", "samples to generate"),
    ("val", "", "validation samples; defaults to n/8"),
    ("test", "", "test samples; defaults to n/8"),
    ("side", "64", "image side in pixels"),
    ("extent", "40000", "world side in meters"),
    ("class_count", "8", "scene classes"),
    ("noise_octaves", "2", "octaves of the class noise"),
    ("region_scale", "24000", "wavelength of the coarsest class-noise octave, meters"),
    ("z18_meters", "200", "ground side of a z18 tile; coarser zooms double per step"),
    ("context_min", "100", "smallest ground-view context radius, meters"),
    ("context_max", "100", "largest ground-view context radius, meters"),
    ("conv_blocks", "16,32,64", "conv block widths"),
    ("fc_hidden", "128", "hidden fully connected width"),
    ("feature_dim", "32", "embedding dimension"),
    ("lr", "0.01", "learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("batch_size", "32", "minibatch size"),
    ("epochs", "30", "training epochs"),
    ("eval_every", "100", "updates between validation passes"),
    ("zoom", "z18", "aerial zoom for single-scale training"),
    ("ground_checkpoint", "", "ground network checkpoint"),
    ("checkpoint", "", "aerial checkpoint (single or multi-scale)"),
    ("index", "", "reference index file"),
    ("grid_cols", "50", "index grid columns"),
    ("grid_rows", "50", "index grid rows"),
    ("tolerance", "0", "radius in meters within which a cell counts as correct"),
    ("split", "test", "manifest split used for queries (train, val, test or all)"),
    ("queries", "0", "cap on evaluated queries; 0 uses the whole split"),
    ("query_id", "", "manifest id of the query"),
    ("top_k", "10", "candidates listed by localize"),
    ("pixels_per_cell", "4", "raster pixels per grid cell"),
    ("center_x", "", "fine heatmap center; defaults to the query location"),
    ("center_y", "", "fine heatmap center; defaults to the query location"),
    ("span", "2000", "fine heatmap searched side, meters"),
    ("stride", "200", "fine heatmap step, meters"),
    ("alpha", "0.6", "fine heatmap overlay opacity"),
    ("group_red", "5,6", "embedding coordinates averaged into red"),
    ("group_green", "2,3", "embedding coordinates averaged into green"),
    ("group_blue", "0,1", "embedding coordinates averaged into blue"),
    ("allow_overlap", "false", "let false-color groups share coordinates"),
    ("coords", "0,1,2,3,4,5,6,7", "embedding coordinates reported by maxact"),
    ("k", "5", "images per coordinate in maxact"),
    ("gradcheck_epsilon", "0.001", "central-difference step"),
    ("gradcheck_tolerance", "0.001", "relative error bound for the network check"),
    ("gradcheck_coords", "16", "coordinates probed per parameter tensor"),
];

const WORLD_KEYS: &[&str] =
    &["seed", "extent", "class_count", "noise_octaves", "region_scale", "z18_meters", "context_min", "context_max"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Run(e) if e.is_data_error() || matches!(e, Error::Shape { .. }) => EXIT_DATA,
            CliError::Run(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Merge `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Run(Error::io(path, e)))?;
        self.merge_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("cannot parse {key}={raw:?}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T> {
        self.optional(key)?
            .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    pub fn list(&self, key: &str) -> CliResult<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad entry {s:?} in {key}"))))
            .collect()
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn world_spec(&self) -> CliResult<WorldSpec> {
        let z18: f64 = self.get("z18_meters")?;
        let spec = WorldSpec {
            seed: self.get("seed")?,
            extent: self.get("extent")?,
            class_count: self.get("class_count")?,
            noise_octaves: self.get("noise_octaves")?,
            region_scale: self.get("region_scale")?,
            tile_meters: BTreeMap::from([(Zoom::Z18, z18), (Zoom::Z16, 4.0 * z18), (Zoom::Z14, 16.0 * z18)]),
            context_radius: (self.get("context_min")?, self.get("context_max")?),
            patches: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn arch(&self) -> CliResult<ArchSpec> {
        let spec = ArchSpec {
            input_side: self.get("side")?,
            input_channels: 3,
            conv_blocks: self.list("conv_blocks")?,
            fc_hidden: self.get("fc_hidden")?,
            feature_dim: self.get("feature_dim")?,
            class_count: None,
        }
        .with_classes(self.get("class_count")?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            momentum: self.get("momentum")?,
            batch_size: self.get("batch_size")?,
            epochs: self.get("epochs")?,
            seed: self.get("seed")?,
            eval_every: self.get("eval_every")?,
            target_zoom: TargetZoom::Single(self.get("zoom")?),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Help text listing every config key with its default.
pub fn config_reference() -> String {
    let mut s = String::from("config keys (key=value; flags override the file):\n");
    for (k, v, help) in KEYS {
        let _ = writeln!(s, "  {k:<20} {help} [default: {}]", if v.is_empty() { "unset" } else { v });
    }
    s
}

macro_rules! flag_set {
    ($name:ident { $($(#[doc = $doc:literal])* $field:ident),* $(,)? }) => {
        #[derive(Args, Debug, Default, Clone)]
        pub struct $name {
            $( $(#[doc = $doc])* #[arg(long)] pub $field: Option<String>, )*
        }

        impl $name {
            fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $( if let Some(x) = &self.$field { v.push((stringify!($field), x.clone())); } )*
                v
            }
        }
    };
}

flag_set!(GenFlags {
    /// Samples to generate.
    n,
    /// Validation samples.
    val,
    /// Test samples.
    test,
    side, extent, class_count, noise_octaves, region_scale, z18_meters, context_min, context_max,
});

flag_set!(TrainFlags {
    /// Dataset directory.
    data,
    /// Ground network checkpoint.
    ground_checkpoint,
    /// Best single-scale aerial checkpoint (train-multi).
    checkpoint,
    lr, momentum, batch_size, epochs, eval_every, zoom, conv_blocks, fc_hidden, feature_dim, class_count,
});

flag_set!(IndexFlags {
    /// Dataset directory; its world.cfg fixes the world.
    data,
    /// Aerial checkpoint.
    checkpoint,
    grid_cols, grid_rows,
});

flag_set!(QueryFlags {
    /// Dataset directory.
    data,
    /// Reference index file.
    index,
    /// Ground network checkpoint.
    ground_checkpoint,
    /// Manifest id of the query.
    query_id,
    split, queries, tolerance, top_k, pixels_per_cell,
});

flag_set!(FineFlags {
    data, checkpoint, ground_checkpoint, query_id, center_x, center_y, span, stride, alpha, pixels_per_cell,
});

flag_set!(FalseFlags { index, group_red, group_green, group_blue, allow_overlap, pixels_per_cell });

flag_set!(MaxactFlags { data, ground_checkpoint, split, coords, k });

flag_set!(GradFlags {
    side, conv_blocks, fc_hidden, feature_dim, class_count, gradcheck_epsilon, gradcheck_tolerance, gradcheck_coords,
});

#[derive(Parser, Debug)]
#[command(name = "crossview", version, about = "Cross-view ground-to-aerial geolocalization pipeline", after_help = config_reference())]
pub struct Cli {
    /// key=value config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(GenFlags),
    /// Train the ground network as a scene classifier.
    PretrainGround(TrainFlags),
    /// Train a single-scale aerial network against the ground features.
    TrainCross(TrainFlags),
    /// Train the three-scale aerial network from a single-scale one.
    TrainMulti(TrainFlags),
    /// Extract aerial features over a grid into a reference index.
    BuildIndex(IndexFlags),
    /// Rank every index cell for one ground query.
    Localize(QueryFlags),
    /// Rank-percentile evaluation of a query split.
    Eval(QueryFlags),
    /// Distance heatmap of one query over the index grid.
    Heatmap(QueryFlags),
    /// Sliding-window distance heatmap around a location.
    FineHeatmap(FineFlags),
    /// False-color map of embedding coordinate groups.
    Falsecolor(FalseFlags),
    /// Images that activate chosen embedding coordinates most.
    Maxact(MaxactFlags),
    /// Finite-difference check of backprop gradients.
    Gradcheck(GradFlags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::PretrainGround(_) => "pretrain-ground",
            Command::TrainCross(_) => "train-cross",
            Command::TrainMulti(_) => "train-multi",
            Command::BuildIndex(_) => "build-index",
            Command::Localize(_) => "localize",
            Command::Eval(_) => "eval",
            Command::Heatmap(_) => "heatmap",
            Command::FineHeatmap(_) => "fine-heatmap",
            Command::Falsecolor(_) => "falsecolor",
            Command::Maxact(_) => "maxact",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    /// Keys without defaults that the command cannot run without.
    fn required(&self) -> &'static [&'static str] {
        match self {
            Command::GenData(_) | Command::Gradcheck(_) => &[],
            Command::PretrainGround(_) => &["data"],
            Command::TrainCross(_) => &["data", "ground_checkpoint"],
            Command::TrainMulti(_) => &["data", "ground_checkpoint", "checkpoint"],
            Command::BuildIndex(_) => &["data", "checkpoint"],
            Command::Eval(_) => &["data", "index", "ground_checkpoint"],
            Command::Localize(_) | Command::Heatmap(_) => &["data", "index", "ground_checkpoint", "query_id"],
            Command::FineHeatmap(_) => &["data", "checkpoint", "ground_checkpoint", "query_id"],
            Command::Falsecolor(_) => &["index"],
            Command::Maxact(_) => &["data", "ground_checkpoint"],
        }
    }

    fn overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::GenData(f) => f.overrides(),
            Command::PretrainGround(f) | Command::TrainCross(f) | Command::TrainMulti(f) => f.overrides(),
            Command::BuildIndex(f) => f.overrides(),
            Command::Localize(f) | Command::Eval(f) | Command::Heatmap(f) => f.overrides(),
            Command::FineHeatmap(f) => f.overrides(),
            Command::Falsecolor(f) => f.overrides(),
            Command::Maxact(f) => f.overrides(),
            Command::Gradcheck(f) => f.overrides(),
        }
    }
}

impl Cli {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.merge_file(p)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(t) = self.threads {
            cfg.set("threads", &t.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.set("out", &o.to_string_lossy())?;
        }
        for (k, v) in self.command.overrides() {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

/// Parse `args` (program name first), run, print diagnostics and return the
/// process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("crossview {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.resolve()?;
    for key in cli.command.required() {
        cfg.require::<String>(key)?;
    }
    let threads: Option<usize> = cfg.optional("threads")?;
    match threads {
        Some(0) => return Err(CliError::Usage("--threads must be >= 1".into())),
        Some(t) => {
            // A second call in the same process keeps the first pool, which is
            // harmless: results never depend on the worker count.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        None => {}
    }
    let out = cfg.out();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let name = cli.command.name();
    let resolved = out.join(format!("{name}.cfg"));
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    match &cli.command {
        Command::GenData(_) => gen_data(&cfg),
        Command::PretrainGround(_) => pretrain(&cfg),
        Command::TrainCross(_) => train_cross(&cfg),
        Command::TrainMulti(_) => train_multi(&cfg),
        Command::BuildIndex(_) => cmd_build_index(&cfg),
        Command::Localize(_) => cmd_localize(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Heatmap(_) => cmd_heatmap(&cfg),
        Command::FineHeatmap(_) => cmd_fine_heatmap(&cfg),
        Command::Falsecolor(_) => cmd_falsecolor(&cfg),
        Command::Maxact(_) => cmd_maxact(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::Run(Error::io(path, e)))
}

fn data_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.require("data")
}

fn load_manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    Ok(Manifest::load(&data_dir(cfg)?.join(MANIFEST_FILE))?)
}

/// The world a dataset was generated from.
fn load_world(cfg: &RunConfig) -> CliResult<World> {
    let path = data_dir(cfg)?.join(WORLD_FILE);
    if !path.is_file() {
        return Err(CliError::Run(Error::MissingAsset(path)));
    }
    let mut world_cfg = RunConfig::default();
    world_cfg.merge_file(&path)?;
    Ok(World::new(world_cfg.world_spec()?)?)
}

fn load_ground(cfg: &RunConfig) -> CliResult<Network> {
    Ok(Network::load(&cfg.require::<PathBuf>("ground_checkpoint")?)?)
}

fn query_rows(cfg: &RunConfig, manifest: &Manifest) -> CliResult<Vec<usize>> {
    let split = cfg.raw("split");
    let mut rows = if split == "all" {
        (0..manifest.len()).collect()
    } else {
        manifest.split_indices(split.parse::<Split>().map_err(|e| CliError::Usage(e.to_string()))?)
    };
    let cap: usize = cfg.get("queries")?;
    if cap > 0 {
        rows.truncate(cap);
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} has no records")));
    }
    Ok(rows)
}

fn row_of(manifest: &Manifest, id: u64) -> CliResult<usize> {
    manifest
        .records()
        .iter()
        .position(|r| r.id == id)
        .ok_or_else(|| CliError::Usage(format!("no record with id {id}")))
}

fn ground_features(f_g: &Network, manifest: &Manifest, rows: &[usize]) -> CliResult<Tensor> {
    let table = ImageTable::from_manifest(manifest, rows, View::Ground)?;
    Ok(f_g.extract_ground(&table.all())?)
}

fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let world = World::new(cfg.world_spec()?)?;
    let out = cfg.out();
    let n: usize = cfg.get("n")?;
    let val = cfg.optional("val")?.unwrap_or(n / 8);
    let test = cfg.optional("test")?.unwrap_or(n / 8);
    let manifest = generate_dataset(&world, n, val, test, cfg.get("side")?, &out)?;
    let world_text: String = WORLD_KEYS.iter().map(|k| format!("{k}={}\n", cfg.raw(k))).collect();
    write_file(&out.join(WORLD_FILE), world_text)?;
    println!("wrote {} records to {}", manifest.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(cfg)?;
    let (net, log) = pretrain_ground(&manifest, &cfg.arch()?, &cfg.train()?)?;
    let out = cfg.out();
    net.save(&out.join("ground.cvwt"))?;
    log.write_csvs(&out, "pretrain")?;
    println!("val_accuracy={:.4}", log.val_accuracy.unwrap_or(f64::NAN));
    Ok(())
}

fn train_cross(cfg: &RunConfig) -> CliResult<()> {
    let f_g = load_ground(cfg)?;
    let manifest = load_manifest(cfg)?;
    let targets = precompute_targets(&f_g, &manifest)?;
    let (net, log) = train_crossview_single(&manifest, &targets, &f_g, &cfg.train()?)?;
    let out = cfg.out();
    targets.save(&out.join("targets.cvft"))?;
    net.save(&out.join("aerial.cvwt"))?;
    log.write_csvs(&out, "cross")?;
    println!("val_distance={:.6}", log.best_metric());
    Ok(())
}

fn train_multi(cfg: &RunConfig) -> CliResult<()> {
    let f_g = load_ground(cfg)?;
    let best = Network::load(&cfg.require::<PathBuf>("checkpoint")?)?;
    let manifest = load_manifest(cfg)?;
    let targets = precompute_targets(&f_g, &manifest)?;
    let mut train = cfg.train()?;
    train.target_zoom = TargetZoom::Multi;
    let (net, log) = train_crossview_multi(&manifest, &targets, &best, &train)?;
    let out = cfg.out();
    net.save(&out.join("multi.cvwt"))?;
    log.write_csvs(&out, "multi")?;
    println!("val_distance={:.6}", log.best_metric());
    Ok(())
}

fn cmd_build_index(cfg: &RunConfig) -> CliResult<()> {
    let world = load_world(cfg)?;
    let model = load_aerial(&cfg.require::<PathBuf>("checkpoint")?)?;
    let grid = Grid::covering(world.spec(), cfg.get("grid_cols")?, cfg.get("grid_rows")?);
    let index = build_index(model.as_ref(), &world, &grid)?;
    let path = cfg.out().join("index.cvix");
    index.save(&path)?;
    println!("wrote {} cells to {}", index.len(), path.display());
    Ok(())
}

fn load_index(cfg: &RunConfig) -> CliResult<ReferenceIndex> {
    Ok(ReferenceIndex::load(&cfg.require::<PathBuf>("index")?)?)
}

fn cmd_localize(cfg: &RunConfig) -> CliResult<()> {
    let index = load_index(cfg)?;
    let manifest = load_manifest(cfg)?;
    let f_g = load_ground(cfg)?;
    let id: u64 = cfg.require("query_id")?;
    let row = row_of(&manifest, id)?;
    let feat = ground_features(&f_g, &manifest, &[row])?;
    let truth = manifest.records()[row].location;
    let res = localize(&index, id, feat.row(0), Some(truth), cfg.get("tolerance")?)?;
    let mut csv = String::from("rank,cell,x,y,distance\n");
    for (r, &(cell, d)) in res.candidates.iter().enumerate() {
        let c = index.grid.center(cell);
        let _ = writeln!(csv, "{},{cell},{:.2},{:.2},{d}", r + 1, c.x, c.y);
    }
    write_file(&cfg.out().join(format!("localize_{id}.csv")), csv)?;
    let top_k: usize = cfg.get("top_k")?;
    for (r, &(cell, d)) in res.candidates.iter().take(top_k).enumerate() {
        let c = index.grid.center(cell);
        println!("{} cell={cell} x={:.1} y={:.1} distance={d:.4}", r + 1, c.x, c.y);
    }
    if let (Some(rank), Some(p)) = (res.rank, res.rank_percentile) {
        println!("truth_rank={rank} rank_percentile={p:.4}");
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let index = load_index(cfg)?;
    let manifest = load_manifest(cfg)?;
    let f_g = load_ground(cfg)?;
    let rows = query_rows(cfg, &manifest)?;
    let feats = ground_features(&f_g, &manifest, &rows)?;
    let truths: Vec<Point> = rows.iter().map(|&r| manifest.records()[r].location).collect();
    let ev = evaluate(&index, &feats, &truths, cfg.get("tolerance")?)?;
    ev.write(&cfg.out())?;
    let s = &ev.summary;
    println!(
        "top1pct={:.4} median_percentile={:.4} auc={:.4} queries={} cells={}",
        s.top1pct, s.median_percentile, s.auc, s.queries, s.cells
    );
    Ok(())
}

fn cmd_heatmap(cfg: &RunConfig) -> CliResult<()> {
    let index = load_index(cfg)?;
    let manifest = load_manifest(cfg)?;
    let f_g = load_ground(cfg)?;
    let id: u64 = cfg.require("query_id")?;
    let row = row_of(&manifest, id)?;
    let feat = ground_features(&f_g, &manifest, &[row])?;
    let raster = distance_heatmap(&index, feat.row(0), Some(manifest.records()[row].location), cfg.get("pixels_per_cell")?)?;
    let path = cfg.out().join(format!("heatmap_{id}.ppm"));
    raster.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fine_heatmap(cfg: &RunConfig) -> CliResult<()> {
    let world = load_world(cfg)?;
    let manifest = load_manifest(cfg)?;
    let f_g = load_ground(cfg)?;
    let model = load_aerial(&cfg.require::<PathBuf>("checkpoint")?)?;
    let id: u64 = cfg.require("query_id")?;
    let row = row_of(&manifest, id)?;
    let feat = ground_features(&f_g, &manifest, &[row])?;
    let loc = manifest.records()[row].location;
    let center = Point::new(cfg.optional("center_x")?.unwrap_or(loc.x), cfg.optional("center_y")?.unwrap_or(loc.y));
    let spec = FineHeatmapSpec {
        pixels_per_cell: cfg.get("pixels_per_cell")?,
        alpha: cfg.get("alpha")?,
        ..FineHeatmapSpec::new(center, cfg.get("span")?, cfg.get("stride")?)
    };
    let raster = fine_heatmap(model.as_ref(), &world, &spec, feat.row(0))?;
    let path = cfg.out().join(format!("fine_heatmap_{id}.ppm"));
    raster.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_falsecolor(cfg: &RunConfig) -> CliResult<()> {
    let index = load_index(cfg)?;
    let groups = CategoryGroups {
        groups: [
            ("red".into(), cfg.list("group_red")?),
            ("green".into(), cfg.list("group_green")?),
            ("blue".into(), cfg.list("group_blue")?),
        ],
        allow_overlap: cfg.get("allow_overlap")?,
    };
    let raster = falsecolor_map(&index, &groups, cfg.get("pixels_per_cell")?)?;
    let path = cfg.out().join("falsecolor.ppm");
    raster.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_maxact(cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(cfg)?;
    let f_g = load_ground(cfg)?;
    let rows = query_rows(cfg, &manifest)?;
    let ids: Vec<u64> = rows.iter().map(|&r| manifest.records()[r].id).collect();
    let images = ImageTable::from_manifest(&manifest, &rows, View::Ground)?.all();
    let reports = max_activation_report(&f_g, &ids, &images, &cfg.list("coords")?, cfg.get("k")?)?;
    let csv = report_csv(&reports);
    write_file(&cfg.out().join("maxact.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn print_report(label: &str, r: &GradCheckReport) {
    for e in &r.entries {
        println!(
            "{label} {:<16} checked={:<3} refined={:<3} skipped={:<3} max_rel_error={:.3e}",
            e.name, e.checked, e.refined, e.skipped, e.max_rel_error
        );
    }
    println!("{label} {} max_rel_error={:.3e} tolerance={:.0e}", if r.pass() { "PASS" } else { "FAIL" }, r.max_rel_error(), r.tolerance);
}

fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<()> {
    let opts = GradCheckOptions {
        epsilon: cfg.get("gradcheck_epsilon")?,
        tolerance: cfg.get("gradcheck_tolerance")?,
        coords_per_entry: Some(cfg.get("gradcheck_coords")?),
        seed: cfg.get("seed")?,
    };
    let net = check_network(&cfg.arch()?, 2, opts.seed, &opts)?;
    print_report("network", &net);
    let lin = check_linear(opts.seed, &GradCheckOptions { tolerance: 1e-6, coords_per_entry: None, ..opts })?;
    print_report("linear", &lin);
    if net.pass() && lin.pass() {
        Ok(())
    } else {
        Err(CliError::Run(Error::NonFinite(format!(
            "gradient check failed: network {:.3e}, linear {:.3e}",
            net.max_rel_error(),
            lin.max_rel_error()
        ))))
    }
}
