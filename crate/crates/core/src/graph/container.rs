//! On-disk graph container: a directory holding a TOML manifest and raw
//! little-endian binary arrays.
//!
//! ```text
//! manifest.toml        n, edges, d, label_level, classes, domain_tag, edge_features
//! features.bin         f32, row-major n x d
//! edges.bin            u32 pairs
//! labels.bin           i32 per node/edge, or f32 per task (NaN = missing)
//! edge_features.bin    f32, row-major |E| x d (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphCollection, LabelLevel, Labels, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n: usize,
    pub edges: usize,
    pub d: usize,
    pub label_level: LabelLevel,
    pub classes: usize,
    pub domain_tag: String,
    #[serde(default)]
    pub edge_features: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectionManifest {
    format_version: u32,
    graphs: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.span().map_or(0, |s| s.start as u64),
        detail: e.message().to_string(),
    })
}

fn expect_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            detail: format!("expected {expected} bytes, file has {}", bytes.len()),
        });
    }
    Ok(())
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

fn read_matrix<S: Scalar>(path: &Path, rows: usize, cols: usize) -> Result<Tensor<S>> {
    let bytes = read(path)?;
    expect_len(path, &bytes, rows * cols * 4)?;
    Tensor::matrix(rows, cols, f32s(&bytes).map(|v| S::from_f64_lossy(v as f64)).collect())
}

fn matrix_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|v| (v.f64() as f32).to_le_bytes())
        .collect()
}

pub fn load_graph<S: Scalar>(dir: impl AsRef<Path>) -> Result<TextAttributedGraph<S>> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.toml");
    let m: Manifest = read_manifest(&mpath)?;
    if m.format_version != CONTAINER_VERSION {
        return Err(Error::Schema {
            expected: format!("container format {CONTAINER_VERSION}"),
            found: format!("container format {}", m.format_version),
        });
    }
    let features = read_matrix(&dir.join("features.bin"), m.n, m.d)?;

    let epath = dir.join("edges.bin");
    let eb = read(&epath)?;
    expect_len(&epath, &eb, m.edges * 8)?;
    let edges = eb
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize,
                u32::from_le_bytes([c[4], c[5], c[6], c[7]]) as usize,
            )
        })
        .collect();

    let lpath = dir.join("labels.bin");
    let lb = read(&lpath)?;
    let labels = match m.label_level {
        LabelLevel::Node | LabelLevel::Edge => {
            let count = if m.label_level == LabelLevel::Node { m.n } else { m.edges };
            expect_len(&lpath, &lb, count * 4)?;
            let v: Vec<i32> = lb
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if m.label_level == LabelLevel::Node {
                Labels::Node(v)
            } else {
                Labels::Edge(v)
            }
        }
        LabelLevel::Graph => {
            expect_len(&lpath, &lb, m.classes * 4)?;
            Labels::Graph(f32s(&lb).collect())
        }
    };

    let edge_features = if m.edge_features {
        Some(read_matrix(&dir.join("edge_features.bin"), m.edges, m.d)?)
    } else {
        None
    };

    TextAttributedGraph::new(m.n, edges, features, edge_features, labels, m.classes, m.domain_tag)
}

pub fn save_graph<S: Scalar>(graph: &TextAttributedGraph<S>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = Manifest {
        format_version: CONTAINER_VERSION,
        n: graph.node_count(),
        edges: graph.edge_count(),
        d: graph.feature_dim(),
        label_level: graph.label_level(),
        classes: graph.arity(),
        domain_tag: graph.domain_tag().to_string(),
        edge_features: graph.edge_features().is_some(),
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("manifest.toml"), text.as_bytes())?;
    write(&dir.join("features.bin"), &matrix_bytes(graph.features()))?;
    let eb: Vec<u8> = graph
        .edges()
        .iter()
        .flat_map(|&(u, v)| {
            let mut b = (u as u32).to_le_bytes().to_vec();
            b.extend((v as u32).to_le_bytes());
            b
        })
        .collect();
    write(&dir.join("edges.bin"), &eb)?;
    let lb: Vec<u8> = match graph.labels() {
        Labels::Node(v) | Labels::Edge(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Labels::Graph(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    write(&dir.join("labels.bin"), &lb)?;
    if let Some(ef) = graph.edge_features() {
        write(&dir.join("edge_features.bin"), &matrix_bytes(ef))?;
    }
    Ok(())
}

fn member_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("graph_{i:05}"))
}

pub fn save_collection<S: Scalar>(c: &GraphCollection<S>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = CollectionManifest {
        format_version: CONTAINER_VERSION,
        graphs: c.len(),
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("collection.toml"), text.as_bytes())?;
    for (i, g) in c.graphs().iter().enumerate() {
        save_graph(g, member_dir(dir, i))?;
    }
    Ok(())
}

pub fn load_collection<S: Scalar>(dir: impl AsRef<Path>) -> Result<GraphCollection<S>> {
    let dir = dir.as_ref();
    let m: CollectionManifest = read_manifest(&dir.join("collection.toml"))?;
    if m.format_version != CONTAINER_VERSION {
        return Err(Error::Schema {
            expected: format!("container format {CONTAINER_VERSION}"),
            found: format!("container format {}", m.format_version),
        });
    }
    let graphs = (0..m.graphs)
        .map(|i| load_graph(member_dir(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    GraphCollection::new(graphs)
}
