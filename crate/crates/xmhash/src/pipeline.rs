//! End-to-end pipeline: config parsing, staged execution with content-hashed
//! artifacts, and the stage functions behind the CLI subcommands.
//!
//! Every stage writes a stamp file holding a hash of its own config section
//! chained with the upstream stamp. Downstream stages refuse to run against
//! missing or stale artifacts instead of silently recomputing.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor_graph::{self, AnchorGraph, AnchorSet, ModalityGraph, Sigma};
use crate::codes::{self, BinaryCodes, Stage1Config};
use crate::dataset::{self, FeatureMatrix, MultiModalDataset};
use crate::error::{Error, Result};
use crate::hashfn::{self, Architecture, HashModel, Stage2Config};
use crate::io::{self, MatrixFormat};
use crate::retrieval::{self, PackedCodes, RetrievalResult};

pub const ENV_PREFIX: &str = "XMHASH_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dims: Vec<usize>,
    pub spread: f64,
    pub elongation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            clusters: 3,
            per_cluster: 200,
            dims: vec![12, 10],
            spread: 0.15,
            elongation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    /// One feature file per modality.
    pub paths: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub format: MatrixFormat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Exactly one of `synthetic` / `files` must be set.
    pub synthetic: Option<SyntheticConfig>,
    pub files: Option<FilesConfig>,
    pub normalize: bool,
    pub query_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            synthetic: Some(SyntheticConfig::default()),
            files: None,
            normalize: true,
            query_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Number of joint anchors P.
    pub anchors: usize,
    /// Data-to-anchor neighbor count.
    pub k: usize,
    /// Anchor-to-anchor reciprocal neighbor count.
    pub k_a: usize,
    /// Fixed kernel bandwidth; absent means learned from neighbor distances.
    pub sigma_data: Option<f64>,
    pub sigma_anchor: Option<f64>,
    pub kmeans_max_iters: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            anchors: 500,
            k: 3,
            k_a: 2,
            sigma_data: None,
            sigma_anchor: None,
            kmeans_max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub model: ModelKind,
    /// Hidden layer widths, used only by the MLP model.
    pub hidden: Vec<usize>,
    pub optimizer: Stage2Config,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            model: ModelKind::Linear,
            hidden: vec![64],
            optimizer: Stage2Config {
                learning_rate: 1e-5,
                epochs: 300,
                ..Stage2Config::default()
            },
        }
    }
}

impl Stage2Section {
    pub fn architecture(&self) -> Architecture {
        match self.model {
            ModelKind::Linear => Architecture::Linear,
            ModelKind::Mlp => Architecture::Mlp {
                hidden: self.hidden.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Hamming-ball radius for the precision metric.
    pub radius: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { radius: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub graph: GraphConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Section,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parse a TOML file, then apply environment overrides
    /// (`XMHASH_GRAPH__ANCHORS=32` sets `graph.anchors`).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        apply_env_overrides(&mut value, std::env::vars())?;
        let config: PipelineConfig = value
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.synthetic, &self.dataset.files) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset.synthetic and dataset.files are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of dataset.synthetic or dataset.files is required".into(),
                ))
            }
            _ => {}
        }
        if !(self.dataset.query_fraction > 0.0 && self.dataset.query_fraction < 1.0) {
            return Err(Error::Config("dataset.query_fraction must be in (0, 1)".into()));
        }
        if self.graph.anchors == 0 {
            return Err(Error::Config("graph.anchors must be >= 1".into()));
        }
        if self.stage2.model == ModelKind::Mlp && self.stage2.hidden.is_empty() {
            return Err(Error::Config("stage2.hidden must be non-empty for the MLP".into()));
        }
        self.stage1.validate()?;
        self.stage2.optimizer.validate()?;
        Ok(())
    }

    /// Shrink the anchor budget for fast desk-scale runs.
    pub fn apply_desk_scale(&mut self) {
        self.graph.anchors = 32;
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

/// Apply `XMHASH_SECTION__FIELD=value` overrides onto a parsed TOML tree.
/// Values parse as TOML scalars, falling back to plain strings.
pub fn apply_env_overrides(
    value: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("bad override variable {key}")));
        }
        let parsed: toml::Value = raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| raw.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| raw.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(raw.clone()));
        let mut node = &mut *value;
        for seg in &segments[..segments.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key} crosses a non-table")))?;
            node = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key} crosses a non-table")))?;
        table.insert(segments.last().unwrap().clone(), parsed);
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn hash_json(value: &impl Serialize, upstream: Option<&str>) -> Result<String> {
    let json =
        serde_json::to_string(value).map_err(|e| Error::Config(format!("hash config: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    if let Some(up) = upstream {
        hasher.update(up.as_bytes());
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn stamp_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("{stage}.stamp"))
}

fn write_stamp(out: &Path, stage: &str, hash: &str) -> Result<()> {
    let path = stamp_path(out, stage);
    std::fs::write(&path, hash).map_err(io_err(&path))
}

/// Fail with MissingArtifact / StaleArtifact unless `stage` ran with a config
/// hashing to `expected`.
fn check_stamp(out: &Path, stage: &str, expected: &str) -> Result<()> {
    let path = stamp_path(out, stage);
    let found = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
        path: path.clone(),
        stage: stage.to_string(),
    })?;
    if found.trim() != expected {
        return Err(Error::StaleArtifact {
            path,
            stage: stage.to_string(),
        });
    }
    Ok(())
}

fn synth_hash(config: &PipelineConfig) -> Result<String> {
    hash_json(&(config.seed, &config.dataset), None)
}

fn graph_hash(config: &PipelineConfig) -> Result<String> {
    hash_json(&config.graph, Some(&synth_hash(config)?))
}

fn codes_hash(config: &PipelineConfig) -> Result<String> {
    hash_json(&config.stage1, Some(&graph_hash(config)?))
}

fn train_hash(config: &PipelineConfig) -> Result<String> {
    hash_json(&config.stage2, Some(&codes_hash(config)?))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))
}

/// Generate the configured synthetic dataset into `out`. Errors when the
/// dataset source is external files.
pub fn run_synth(out: &Path, config: &PipelineConfig) -> Result<()> {
    let work = || -> Result<()> {
        ensure_dir(out)?;
        let synth = config.dataset.synthetic.as_ref().ok_or_else(|| {
            Error::Config("synth stage requires dataset.synthetic".into())
        })?;
        let ds = dataset::synthesize_clustered_anisotropic(
            synth.clusters,
            synth.per_cluster,
            &synth.dims,
            synth.spread,
            synth.elongation,
            config.seed,
        )?;
        for (m, fm) in ds.modalities().iter().enumerate() {
            io::write_raw_f32(&out.join(format!("data_m{m}.xmf")), fm.as_matrix())?;
        }
        io::write_labels(&out.join("labels.csv"), ds.labels().unwrap())?;
        write_stamp(out, "synth", &synth_hash(config)?)
    };
    work().map_err(|e| e.in_stage("synth"))
}

/// Load the stage input dataset: synth artifacts for the synthetic source,
/// the configured files otherwise. Returns the raw (unnormalized) dataset.
pub fn load_input_dataset(out: &Path, config: &PipelineConfig) -> Result<MultiModalDataset> {
    if let Some(synth) = &config.dataset.synthetic {
        check_stamp(out, "synth", &synth_hash(config)?)?;
        let paths: Vec<PathBuf> = (0..synth.dims.len())
            .map(|m| out.join(format!("data_m{m}.xmf")))
            .collect();
        let ds = dataset::load_dataset(&paths, MatrixFormat::RawF32)?;
        let labels = io::read_labels(&out.join("labels.csv"))?;
        ds.with_labels(labels)
    } else {
        let files = config.dataset.files.as_ref().unwrap();
        let ds = dataset::load_dataset(&files.paths, files.format)?;
        match &files.labels {
            Some(p) => ds.with_labels(io::read_labels(p)?),
            None => Ok(ds),
        }
    }
}

fn normalized_input(out: &Path, config: &PipelineConfig) -> Result<MultiModalDataset> {
    let ds = load_input_dataset(out, config)?;
    if config.dataset.normalize {
        dataset::unit_variance_normalize(&ds)
    } else {
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphMeta {
    modalities: usize,
    anchors: usize,
    k: usize,
    k_a: usize,
    sigma_data: Vec<f64>,
    sigma_anchor: Vec<f64>,
}

/// Learn joint anchors and build the per-modality anchor graphs.
pub fn run_graph(out: &Path, config: &PipelineConfig) -> Result<AnchorGraph> {
    let work = || -> Result<AnchorGraph> {
        ensure_dir(out)?;
        let ds = normalized_input(out, config)?;
        let anchors = anchor_graph::learn_joint_anchors(
            &ds,
            config.graph.anchors,
            config.seed,
            config.graph.kmeans_max_iters,
        )?;
        let graph = anchor_graph::build_graph(
            &ds,
            &anchors,
            config.graph.k,
            config.graph.k_a,
            config.graph.sigma_data.map(Sigma::Fixed).unwrap_or(Sigma::Auto),
            config.graph.sigma_anchor.map(Sigma::Fixed).unwrap_or(Sigma::Auto),
        )?;
        graph.dump(out)?;
        for m in 0..anchors.modality_count() {
            io::write_raw_f32(&out.join(format!("anchors_m{m}.xmf")), anchors.modality(m))?;
        }
        let meta = GraphMeta {
            modalities: graph.modality_count(),
            anchors: config.graph.anchors,
            k: graph.k,
            k_a: graph.k_a,
            sigma_data: graph.modalities.iter().map(|g| g.sigma_data).collect(),
            sigma_anchor: graph.modalities.iter().map(|g| g.sigma_anchor).collect(),
        };
        let meta_path = out.join("graph_meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?,
        )
        .map_err(io_err(&meta_path))?;
        write_stamp(out, "graph", &graph_hash(config)?)?;
        Ok(graph)
    };
    work().map_err(|e| e.in_stage("graph"))
}

/// Reload a dumped anchor graph from `out`.
pub fn load_graph(out: &Path, config: &PipelineConfig) -> Result<AnchorGraph> {
    check_stamp(out, "graph", &graph_hash(config)?)?;
    let meta_path = out.join("graph_meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|_| Error::MissingArtifact {
        path: meta_path.clone(),
        stage: "graph".to_string(),
    })?;
    let meta: GraphMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::Config(format!("graph_meta: {e}")))?;
    let mut modalities = Vec::with_capacity(meta.modalities);
    for m in 0..meta.modalities {
        let z = io::read_raw_f32(&out.join(format!("z_{m}.xmf")))?;
        let s = io::read_raw_f32(&out.join(format!("s_{m}.xmf")))?;
        let z_hat = io::read_raw_f32(&out.join(format!("zhat_{m}.xmf")))?;
        let affinity = io::read_raw_f32(&out.join(format!("affinity_{m}.xmf")))?;
        let laplacian = io::read_raw_f32(&out.join(format!("laplacian_{m}.xmf")))?;
        let mut lambda = DVector::zeros(z_hat.ncols());
        for c in 0..z_hat.ncols() {
            let col_sum: f64 = z_hat.column(c).sum();
            lambda[c] = if col_sum > 0.0 { col_sum } else { 1.0 };
        }
        modalities.push(ModalityGraph {
            z,
            s,
            z_hat,
            lambda,
            affinity,
            laplacian,
            sigma_data: meta.sigma_data[m],
            sigma_anchor: meta.sigma_anchor[m],
        });
    }
    Ok(AnchorGraph {
        modalities,
        k: meta.k,
        k_a: meta.k_a,
    })
}

pub fn load_anchor_set(out: &Path, config: &PipelineConfig) -> Result<AnchorSet> {
    check_stamp(out, "graph", &graph_hash(config)?)?;
    let meta_path = out.join("graph_meta.json");
    let meta: GraphMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|_| Error::MissingArtifact {
            path: meta_path.clone(),
            stage: "graph".to_string(),
        })?,
    )
    .map_err(|e| Error::Config(format!("graph_meta: {e}")))?;
    let per_modality = (0..meta.modalities)
        .map(|m| io::read_raw_f32(&out.join(format!("anchors_m{m}.xmf"))))
        .collect::<Result<Vec<_>>>()?;
    AnchorSet::new(per_modality)
}

/// Run the stage-1 alternating optimizer against the stored graph.
pub fn run_codes(out: &Path, config: &PipelineConfig) -> Result<BinaryCodes> {
    let work = || -> Result<BinaryCodes> {
        let graph = load_graph(out, config)?;
        let (binary, embeddings) = codes::solve_joint_codes(&graph, &config.stage1)?;
        codes::write_codes_text(&out.join("codes.txt"), &binary.codes)?;
        codes::write_trace_csv(&out.join("trace.csv"), &binary.trace)?;
        for (m, e) in embeddings.iter().enumerate() {
            io::write_raw_f32(&out.join(format!("embedding_m{m}.xmf")), &e.y)?;
        }
        write_stamp(out, "codes", &codes_hash(config)?)?;
        Ok(binary)
    };
    work().map_err(|e| e.in_stage("codes"))
}

pub fn load_codes(out: &Path, config: &PipelineConfig) -> Result<DMatrix<f64>> {
    check_stamp(out, "codes", &codes_hash(config)?)?;
    codes::read_codes_text(&out.join("codes.txt"))
}

/// Fit the per-modality hash functions to the stored joint codes.
pub fn run_train(out: &Path, config: &PipelineConfig) -> Result<Vec<HashModel>> {
    let work = || -> Result<Vec<HashModel>> {
        let ds = normalized_input(out, config)?;
        let b = load_codes(out, config)?;
        let arch = config.stage2.architecture();
        let optimizer = Stage2Config {
            seed: config.seed,
            ..config.stage2.optimizer.clone()
        };
        let (models, report) = hashfn::train_hash_models(&ds, &b, &arch, &optimizer)?;
        for (m, model) in models.iter().enumerate() {
            model.save(&out.join(format!("model_m{m}.bin")))?;
        }
        let loss_path = out.join("train_loss.csv");
        let mut text = String::from("epoch,mean_batch_loss\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(&loss_path, text).map_err(io_err(&loss_path))?;
        write_stamp(out, "train", &train_hash(config)?)?;
        Ok(models)
    };
    work().map_err(|e| e.in_stage("train"))
}

pub fn load_models(out: &Path, config: &PipelineConfig) -> Result<Vec<HashModel>> {
    check_stamp(out, "train", &train_hash(config)?)?;
    let n_modalities = match &config.dataset.synthetic {
        Some(s) => s.dims.len(),
        None => config.dataset.files.as_ref().unwrap().paths.len(),
    };
    (0..n_modalities)
        .map(|m| HashModel::load(&out.join(format!("model_m{m}.bin"))))
        .collect()
}

/// Split into query/database, encode both sides with the trained models, and
/// score every cross-modal task.
pub fn run_eval(out: &Path, config: &PipelineConfig) -> Result<Vec<RetrievalResult>> {
    let work = || -> Result<Vec<RetrievalResult>> {
        let ds = normalized_input(out, config)?;
        let labels = ds
            .labels()
            .ok_or_else(|| Error::Config("evaluation requires labels".into()))?
            .to_vec();
        let models = load_models(out, config)?;
        let n = ds.instance_count();
        let (query_idx, db_idx) =
            dataset::split_indices(n, config.dataset.query_fraction, config.seed)?;
        let mut query_codes = Vec::with_capacity(models.len());
        let mut db_codes = Vec::with_capacity(models.len());
        for (m, model) in models.iter().enumerate() {
            let encoded = hashfn::encode(model, ds.modality(m))?;
            let pick = |idx: &[usize]| {
                DMatrix::from_fn(idx.len(), encoded.ncols(), |r, c| encoded[(idx[r], c)])
            };
            query_codes.push(PackedCodes::pack(&pick(&query_idx)));
            db_codes.push(PackedCodes::pack(&pick(&db_idx)));
        }
        let query_labels: Vec<Vec<u32>> = query_idx.iter().map(|&i| labels[i].clone()).collect();
        let db_labels: Vec<Vec<u32>> = db_idx.iter().map(|&i| labels[i].clone()).collect();
        let results = retrieval::evaluate_all_tasks(
            &query_codes,
            &db_codes,
            &query_labels,
            &db_labels,
            config.eval.radius,
        )?;
        retrieval::write_results_json(&out.join("results.json"), &results)?;
        retrieval::write_results_csv(&out.join("results.csv"), &results)?;
        Ok(results)
    };
    work().map_err(|e| e.in_stage("eval"))
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    seed: u64,
    config: &'a PipelineConfig,
}

/// Run every stage in order and write a manifest echoing the full config.
pub fn run_pipeline(out: &Path, config: &PipelineConfig) -> Result<Vec<RetrievalResult>> {
    config.validate()?;
    ensure_dir(out)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
    };
    let manifest_path = out.join("run_manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )
    .map_err(io_err(&manifest_path))?;
    if config.dataset.synthetic.is_some() {
        run_synth(out, config)?;
    }
    run_graph(out, config)?;
    run_codes(out, config)?;
    run_train(out, config)?;
    run_eval(out, config)
}

/// Out-of-sample codes for new feature rows of one modality. The features
/// must already be normalized consistently with training.
pub fn encode_features(model: &HashModel, features: &FeatureMatrix) -> Result<DMatrix<f64>> {
    hashfn::encode(model, features)
}
