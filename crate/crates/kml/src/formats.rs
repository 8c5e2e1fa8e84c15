//! On-disk formats: graph JSON, question JSONL, checkpoints, logs and reports.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use kml_core::nn::RelationModule;
use kml_core::qa::QaInstance;
use kml_core::train::{EmbeddingMode, EmbeddingTable, KnowledgeModules, LogEntry};
use kml_core::{Entity, KgError, KnowledgeGraph, RelationId, Triplet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version written into every checkpoint manifest.
pub const FORMAT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("malformed JSON in {path}, line {line}")]
    JsonLine {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: invalid graph: {}", join(.errors))]
    Graph { path: PathBuf, errors: Vec<KgError> },
    #[error("{path}: checkpoint version {found} is incompatible with {expected}")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn join(errors: &[KgError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> FormatError {
    FormatError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| FormatError::JsonLine {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| FormatError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KgFile {
    pub entities: Vec<Entity>,
    pub triplets: Vec<Triplet>,
}

impl KgFile {
    pub fn from_graph(kg: &KnowledgeGraph) -> Self {
        KgFile {
            entities: kg.entities().map(|(_, e)| e.clone()).collect(),
            triplets: kg.forward_triplets(),
        }
    }
}

pub fn load_kg(path: &Path) -> Result<KnowledgeGraph, FormatError> {
    let file: KgFile = read_json(path)?;
    KnowledgeGraph::build(&file.entities, &file.triplets).map_err(|errors| FormatError::Graph {
        path: path.to_path_buf(),
        errors,
    })
}

pub fn save_kg(path: &Path, kg: &KnowledgeGraph) -> Result<(), FormatError> {
    write_json(path, &KgFile::from_graph(kg))
}

pub fn load_qa(path: &Path) -> Result<Vec<QaInstance>, FormatError> {
    read_jsonl(path)
}

pub fn save_qa(path: &Path, qa: &[QaInstance]) -> Result<(), FormatError> {
    write_jsonl(path, qa)
}

pub fn save_train_log(path: &Path, log: &[LogEntry]) -> Result<(), FormatError> {
    write_jsonl(path, log)
}

/// Header line of a module weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleHeader {
    pub relation: RelationId,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub activation: String,
    pub seed: u64,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub rows: usize,
    pub cols: usize,
    pub mode: EmbeddingMode,
    /// Entity id of each row.
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub relation: RelationId,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub modules: Vec<ManifestEntry>,
    pub embeddings: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn major(v: &str) -> &str {
    v.split('.').next().unwrap_or(v)
}

/// Writes a JSON header line followed by little-endian `f32` values.
fn write_blob<H: Serialize>(path: &Path, header: &H, parts: &[&[f32]]) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for part in parts {
        for v in *part {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_blob<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>), FormatError> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(path, "missing header line"))?;
    let header = serde_json::from_slice(&bytes[..nl]).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let body = &bytes[nl + 1..];
    if body.len() % 4 != 0 {
        return Err(corrupt(path, "payload is not a whole number of f32 values"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

fn module_file(rel: RelationId) -> String {
    format!("{}.kmw", rel.name())
}

/// Saves modules and embeddings as one weight file per module, an embedding
/// file and a manifest.
pub fn save_checkpoint(
    dir: &Path,
    modules: &KnowledgeModules<f32>,
    embeddings: &EmbeddingTable<f32>,
    kg: &KnowledgeGraph,
    seed: u64,
) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    let (mut dim, mut hidden) = (embeddings.dim(), 0);
    for (rel, m) in modules.iter() {
        let file = module_file(rel);
        let header = ModuleHeader {
            relation: rel,
            d_in: m.d_in(),
            d_hidden: m.d_hidden(),
            d_out: m.d_out(),
            activation: "tanh".into(),
            seed,
            trained: modules.is_trained(rel),
        };
        write_blob(&dir.join(&file), &header, &m.slices())?;
        entries.push(ManifestEntry {
            relation: rel,
            file,
        });
        dim = m.d_in();
        hidden = m.d_hidden();
    }
    let header = EmbeddingHeader {
        rows: embeddings.len(),
        cols: embeddings.dim(),
        mode: embeddings.mode,
        ids: kg.entities().map(|(_, e)| e.id.clone()).collect(),
    };
    write_blob(
        &dir.join("embeddings.bin"),
        &header,
        &[embeddings.matrix().as_slice()],
    )?;
    let manifest = Manifest {
        version: FORMAT_VERSION.into(),
        dim,
        hidden,
        seed,
        modules: entries,
        embeddings: "embeddings.bin".into(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub modules: KnowledgeModules<f32>,
    pub embeddings: EmbeddingTable<f32>,
}

/// Loads a checkpoint, checking its version and that its embedding rows
/// line up with `kg`.
pub fn load_checkpoint(dir: &Path, kg: &KnowledgeGraph) -> Result<Checkpoint, FormatError> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&mpath)?;
    if major(&manifest.version) != major(FORMAT_VERSION) {
        return Err(FormatError::Version {
            path: mpath,
            found: manifest.version,
            expected: FORMAT_VERSION.into(),
        });
    }
    let mut modules = KnowledgeModules::default();
    for entry in &manifest.modules {
        let path = dir.join(&entry.file);
        let (h, values): (ModuleHeader, _) = read_blob(&path)?;
        if h.relation != entry.relation {
            return Err(corrupt(
                &path,
                format!(
                    "holds {} but the manifest lists {}",
                    h.relation, entry.relation
                ),
            ));
        }
        let mut m = RelationModule::<f32>::zeros(h.d_in, h.d_hidden, h.d_out);
        let expected: usize = m.slices().iter().map(|s| s.len()).sum();
        if values.len() != expected {
            return Err(corrupt(
                &path,
                format!("expected {expected} weights, found {}", values.len()),
            ));
        }
        let mut offset = 0;
        for s in m.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        modules.insert(h.relation, m, h.trained);
    }
    let epath = dir.join(&manifest.embeddings);
    let (h, values): (EmbeddingHeader, _) = read_blob(&epath)?;
    if values.len() != h.rows * h.cols {
        return Err(corrupt(
            &epath,
            format!(
                "expected {}x{} values, found {}",
                h.rows,
                h.cols,
                values.len()
            ),
        ));
    }
    let ids: Vec<&str> = kg.entities().map(|(_, e)| e.id.as_str()).collect();
    if h.ids != ids {
        return Err(corrupt(
            &epath,
            "embedding rows do not match the graph's entities",
        ));
    }
    let rows: Vec<Vec<f32>> = values.chunks(h.cols.max(1)).map(<[f32]>::to_vec).collect();
    let embeddings =
        EmbeddingTable::from_rows(&rows, h.mode).map_err(|e| corrupt(&epath, e.to_string()))?;
    Ok(Checkpoint {
        manifest,
        modules,
        embeddings,
    })
}

/// Embedding vectors keyed by entity id or option label.
pub type VectorFile = BTreeMap<String, Vec<f32>>;

/// Builds an embedding table from a `{id: [..]}` file covering every entity.
pub fn load_embedding_file(
    path: &Path,
    kg: &KnowledgeGraph,
    mode: EmbeddingMode,
) -> Result<EmbeddingTable<f32>, FormatError> {
    let vectors: VectorFile = read_json(path)?;
    let mut rows = Vec::with_capacity(kg.len());
    for (_, e) in kg.entities() {
        rows.push(
            vectors
                .get(&e.id)
                .cloned()
                .ok_or_else(|| corrupt(path, format!("no vector for entity `{}`", e.id)))?,
        );
    }
    EmbeddingTable::from_rows(&rows, mode).map_err(|e| corrupt(path, e.to_string()))
}
