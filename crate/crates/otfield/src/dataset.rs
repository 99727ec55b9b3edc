//! Dataset files: a line-oriented graph format, plain columnar signals,
//! point-cloud files, and the JSON manifest tying samples together.
//! All writers emit byte-deterministic output (fixed float formatting,
//! sorted keys).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, GraphData, NodeSignal};
use crate::ot::EmpiricalMeasure;
use crate::util::format_f64;

pub const GRAPH_MAGIC: &str = "otfield-graph v1";
pub const SIGNAL_MAGIC: &str = "otfield-signal v1";
pub const POINTS_MAGIC: &str = "otfield-points v1";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write through a temporary sibling and rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Non-empty, non-comment lines with their 1-based line numbers.
struct Lines<'a> {
    path: &'a Path,
    items: Vec<(usize, &'a str)>,
    cursor: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self {
            path,
            items,
            cursor: 0,
        }
    }

    fn error(&self, line: Option<usize>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let item = self.items.get(self.cursor).copied();
        self.cursor += 1;
        item.ok_or_else(|| self.error(None, format!("unexpected end of file, expected {what}")))
    }

    fn expect_magic(&mut self, magic: &str) -> Result<()> {
        let (no, line) = self.next("format header")?;
        if line != magic {
            return Err(self.error(
                Some(no),
                format!("expected header '{magic}', found '{line}'"),
            ));
        }
        Ok(())
    }

    fn keyword_count(&mut self, keyword: &str) -> Result<usize> {
        let (no, line) = self.next(&format!("'{keyword} <count>'"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(self.error(
                Some(no),
                format!("expected '{keyword} <count>', found '{line}'"),
            ));
        }
        let value = parts
            .next()
            .ok_or_else(|| self.error(Some(no), format!("'{keyword}' needs a count")))?;
        if parts.next().is_some() {
            return Err(self.error(Some(no), format!("trailing tokens after '{keyword}'")));
        }
        value
            .parse()
            .map_err(|_| self.error(Some(no), format!("'{value}' is not a valid count")))
    }

    fn floats(&mut self, expected: Option<usize>, what: &str) -> Result<(usize, Vec<f64>)> {
        let (no, line) = self.next(what)?;
        let mut out = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| self.error(Some(no), format!("'{tok}' is not a number")))?;
            out.push(v);
        }
        if let Some(n) = expected {
            if out.len() != n {
                return Err(self.error(
                    Some(no),
                    format!("expected {n} values for {what}, found {}", out.len()),
                ));
            }
        }
        Ok((no, out))
    }

    fn finished(&self) -> Result<()> {
        if let Some(&(no, line)) = self.items.get(self.cursor) {
            return Err(self.error(Some(no), format!("unexpected trailing content '{line}'")));
        }
        Ok(())
    }
}

/// Parse a graph file into raw parts (no validation beyond syntax).
pub fn read_graph_data(path: &Path) -> Result<GraphData> {
    let text = read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    lines.expect_magic(GRAPH_MAGIC)?;
    let nodes = lines.keyword_count("nodes")?;
    let dim = lines.keyword_count("dim")?;
    let (no, kw) = lines.next("'features'")?;
    if kw != "features" {
        return Err(lines.error(Some(no), format!("expected 'features', found '{kw}'")));
    }
    let mut features = DMatrix::zeros(nodes, dim);
    for r in 0..nodes {
        let (_, row) = lines.floats(Some(dim), "a feature row")?;
        for (c, v) in row.into_iter().enumerate() {
            features[(r, c)] = v;
        }
    }
    let edge_count = lines.keyword_count("edges")?;
    let mut edges = Vec::with_capacity(edge_count);
    let mut weights = Vec::with_capacity(edge_count);
    let mut any_weight = false;
    for _ in 0..edge_count {
        let (no, line) = lines.next("an edge line 'u v [w]'")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 && toks.len() != 3 {
            return Err(lines.error(Some(no), format!("edge line needs 2 or 3 tokens: '{line}'")));
        }
        let u: usize = toks[0]
            .parse()
            .map_err(|_| lines.error(Some(no), format!("'{}' is not a node index", toks[0])))?;
        let v: usize = toks[1]
            .parse()
            .map_err(|_| lines.error(Some(no), format!("'{}' is not a node index", toks[1])))?;
        let w = if toks.len() == 3 {
            any_weight = true;
            toks[2]
                .parse()
                .map_err(|_| lines.error(Some(no), format!("'{}' is not a weight", toks[2])))?
        } else {
            1.0
        };
        edges.push((u, v));
        weights.push(w);
    }
    lines.finished()?;
    Ok(GraphData {
        node_count: nodes,
        features,
        edges,
        weights: any_weight.then_some(weights),
    })
}

pub fn read_graph(path: &Path) -> Result<AttributedGraph> {
    AttributedGraph::from_data(read_graph_data(path)?)
}

pub fn graph_to_string(graph: &AttributedGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{GRAPH_MAGIC}");
    let _ = writeln!(out, "nodes {}", graph.node_count());
    let _ = writeln!(out, "dim {}", graph.attr_dim());
    let _ = writeln!(out, "features");
    for r in 0..graph.node_count() {
        let row: Vec<String> = (0..graph.attr_dim())
            .map(|c| format_f64(graph.features()[(r, c)]))
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "edges {}", graph.edges().len());
    for (&(u, v), &w) in graph.edges().iter().zip(graph.weights()) {
        if w == 1.0 {
            let _ = writeln!(out, "{u} {v}");
        } else {
            let _ = writeln!(out, "{u} {v} {}", format_f64(w));
        }
    }
    out
}

pub fn write_graph(path: &Path, graph: &AttributedGraph) -> Result<()> {
    write_atomic(path, graph_to_string(graph).as_bytes())
}

pub fn read_signal_values(path: &Path) -> Result<Vec<f64>> {
    let text = read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    lines.expect_magic(SIGNAL_MAGIC)?;
    let count = lines.keyword_count("values")?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let (_, row) = lines.floats(Some(1), "a signal value")?;
        values.push(row[0]);
    }
    lines.finished()?;
    Ok(values)
}

pub fn signal_to_string(values: &[f64]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SIGNAL_MAGIC}");
    let _ = writeln!(out, "values {}", values.len());
    for v in values {
        let _ = writeln!(out, "{}", format_f64(*v));
    }
    out
}

pub fn write_signal(path: &Path, values: &[f64]) -> Result<()> {
    write_atomic(path, signal_to_string(values).as_bytes())
}

pub fn read_points(path: &Path) -> Result<EmpiricalMeasure> {
    let text = read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    lines.expect_magic(POINTS_MAGIC)?;
    let count = lines.keyword_count("points")?;
    let dim = lines.keyword_count("dim")?;
    let mut support = DMatrix::zeros(count, dim);
    for r in 0..count {
        let (_, row) = lines.floats(Some(dim), "a point row")?;
        for (c, v) in row.into_iter().enumerate() {
            support[(r, c)] = v;
        }
    }
    lines.finished()?;
    EmpiricalMeasure::new(support)
}

pub fn points_to_string(measure: &EmpiricalMeasure) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POINTS_MAGIC}");
    let _ = writeln!(out, "points {}", measure.len());
    let _ = writeln!(out, "dim {}", measure.dim());
    for r in 0..measure.len() {
        let row: Vec<String> = (0..measure.dim())
            .map(|c| format_f64(measure.support()[(r, c)]))
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn write_points(path: &Path, measure: &EmpiricalMeasure) -> Result<()> {
    write_atomic(path, points_to_string(measure).as_bytes())
}

/// One sample record in a manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub graph: String,
    pub signals: BTreeMap<String, String>,
    #[serde(default)]
    pub scalars: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    /// Signal fields every sample must provide.
    pub fields: Vec<String>,
    /// Names of the per-sample scalar inputs (may be empty).
    #[serde(default)]
    pub scalar_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

/// A fully loaded and validated sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub graph: AttributedGraph,
    pub signals: BTreeMap<String, NodeSignal>,
    pub scalars: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub fields: Vec<String>,
    pub scalar_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Content hash over all graphs, signals, and scalars, in order.
    pub fingerprint: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn field_signals(&self, field: &str) -> Result<Vec<&NodeSignal>> {
        self.samples
            .iter()
            .map(|s| {
                s.signals.get(field).ok_or_else(|| Error::Data {
                    sample: None,
                    message: format!("field '{field}' missing from a sample"),
                })
            })
            .collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: None,
            message: format!(
                "unsupported manifest schema version {} (supported: {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        });
    }
    Ok(manifest)
}

/// Load every sample a manifest references, in manifest order, and
/// compute the dataset content fingerprint.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let scalar_count = if manifest.scalar_names.is_empty() {
        manifest.samples.first().map_or(0, |s| s.scalars.len())
    } else {
        manifest.scalar_names.len()
    };

    let mut hasher = Sha256::new();
    hasher.update(manifest.dataset_id.as_bytes());
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, record) in manifest.samples.iter().enumerate() {
        let graph = read_graph(&base.join(&record.graph)).map_err(|e| e.with_sample(i))?;
        hasher.update(graph_to_string(&graph).as_bytes());

        let mut signals = BTreeMap::new();
        for field in &manifest.fields {
            let rel = record.signals.get(field).ok_or_else(|| Error::Data {
                sample: Some(i),
                message: format!("sample is missing a file for field '{field}'"),
            })?;
            let values = read_signal_values(&base.join(rel)).map_err(|e| e.with_sample(i))?;
            let signal = NodeSignal::new(values, graph.node_count()).map_err(|e| match e {
                Error::ShapeMismatch(m) => Error::Data {
                    sample: Some(i),
                    message: m,
                },
                other => other.with_sample(i),
            })?;
            hasher.update(field.as_bytes());
            for v in signal.values().iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
            signals.insert(field.clone(), signal);
        }

        if record.scalars.len() != scalar_count {
            return Err(Error::Data {
                sample: Some(i),
                message: format!(
                    "sample has {} scalar inputs but the dataset uses {scalar_count}",
                    record.scalars.len()
                ),
            });
        }
        for v in &record.scalars {
            if !v.is_finite() {
                return Err(Error::Data {
                    sample: Some(i),
                    message: "scalar input is not finite".into(),
                });
            }
            hasher.update(v.to_bits().to_le_bytes());
        }
        samples.push(Sample {
            graph,
            signals,
            scalars: record.scalars.clone(),
        });
    }
    let mut scalar_names = manifest.scalar_names;
    if scalar_names.is_empty() {
        scalar_names = (0..scalar_count).map(|i| format!("s{i}")).collect();
    }
    Ok(Dataset {
        id: manifest.dataset_id,
        fields: manifest.fields,
        scalar_names,
        samples,
        fingerprint: format!("{:x}", hasher.finalize()),
    })
}
