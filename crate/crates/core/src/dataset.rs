//! Dataset ingestion: TU benchmark directories and a generic JSON format.
//!
//! JSON schema:
//!
//! ```json
//! {"graphs": [{"num_nodes": 3, "edges": [[0, 1], [1, 2]],
//!              "node_features": [[1.0], [0.0], [1.0]], "label": 0}]}
//! ```
//!
//! Edges are read as undirected pairs. `node_features` and `label` may be
//! omitted; graphs without features get degree one-hot features.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::graph::{degree_onehot_features, max_degree, Graph};

/// Feature width cap for the degree encoding.
pub const MAX_DEGREE_CAP: usize = 128;

/// A loaded, feature-complete collection of graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub num_features: usize,
    /// Degree cap used to synthesize features, if the graphs had none.
    pub degree_features: Option<usize>,
}

impl Dataset {
    /// Wraps graphs, substituting degree features when no graph carries
    /// attributes. `max_degree = None` uses the observed maximum (capped).
    pub fn from_graphs(
        name: impl Into<String>,
        graphs: Vec<Graph>,
        max_deg: Option<usize>,
    ) -> Result<Dataset, DataError> {
        if graphs.is_empty() {
            return Err(DataError::Empty);
        }
        let (graphs, degree_features) = if graphs.iter().all(|g| g.num_features == 0) {
            let md = max_deg.unwrap_or_else(|| max_degree(&graphs).min(MAX_DEGREE_CAP));
            (
                graphs
                    .iter()
                    .map(|g| degree_onehot_features(g, md))
                    .collect(),
                Some(md),
            )
        } else {
            (graphs, None)
        };
        let num_features = graphs[0].num_features;
        if graphs.iter().any(|g| g.num_features != num_features) {
            return Err(DataError::InvalidGraph(
                "graphs disagree on feature width".into(),
            ));
        }
        let num_classes = graphs
            .iter()
            .filter_map(|g| g.label)
            .max()
            .map_or(0, |m| m + 1);
        Ok(Dataset {
            name: name.into(),
            graphs,
            num_classes,
            num_features,
            degree_features,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Graph> {
        indices.iter().map(|&i| self.graphs[i].clone()).collect()
    }

    /// Share of the most frequent label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes.max(1)];
        for l in self.graphs.iter().filter_map(|g| g.label) {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len() as f64
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_ints(path: &Path) -> Result<Vec<i64>, DataError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.parse::<i64>()
                .map_err(|e| parse_err(path, i + 1, format!("'{l}': {e}")))
        })
        .collect()
}

/// Finds the `DS` prefix of a TU directory (the part before `_A.txt`).
fn tu_prefix(dir: &Path) -> Result<String, DataError> {
    if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
        if dir.join(format!("{name}_A.txt")).exists() {
            return Ok(name.to_string());
        }
    }
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    for entry in entries.flatten() {
        if let Some(prefix) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix("_A.txt"))
        {
            return Ok(prefix.to_string());
        }
    }
    Err(DataError::MissingFile(dir.join("DS_A.txt")))
}

/// Loads a TU-format directory (1-based, comma separated).
///
/// Node labels become one-hot features (ordered by label value), node
/// attributes are appended after them, graph labels are remapped to
/// contiguous 0-based classes in ascending order, and arcs are symmetrized
/// and de-duplicated.
pub fn load_tu_dataset(dir: &Path) -> Result<Vec<Graph>, DataError> {
    let prefix = tu_prefix(dir)?;
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{prefix}_{suffix}.txt")) };

    let indicator_path = file("graph_indicator");
    let indicator = parse_ints(&indicator_path)?;
    let graph_labels = parse_ints(&file("graph_labels"))?;
    let num_graphs = graph_labels.len();

    // node → (graph, local index)
    let mut sizes = vec![0usize; num_graphs];
    let mut local = Vec::with_capacity(indicator.len());
    for (i, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(parse_err(
                &indicator_path,
                i + 1,
                format!("graph id {g} outside 1..={num_graphs}"),
            ));
        }
        let g = g as usize - 1;
        local.push((g, sizes[g]));
        sizes[g] += 1;
    }

    let edge_path = file("A");
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (i, line) in read_lines(&edge_path)?.iter().enumerate() {
        let mut parts = line.split(',').map(str::trim);
        let mut next = || -> Result<usize, DataError> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(&edge_path, i + 1, "expected two node ids"))?;
            let id: usize = tok
                .parse()
                .map_err(|e| parse_err(&edge_path, i + 1, format!("'{tok}': {e}")))?;
            if id == 0 || id > local.len() {
                return Err(parse_err(
                    &edge_path,
                    i + 1,
                    format!("node {id} outside 1..={}", local.len()),
                ));
            }
            Ok(id - 1)
        };
        let (a, b) = (next()?, next()?);
        let ((ga, la), (gb, lb)) = (local[a], local[b]);
        if ga != gb {
            return Err(parse_err(
                &edge_path,
                i + 1,
                format!(
                    "edge ({}, {}) crosses graphs {} and {}",
                    a + 1,
                    b + 1,
                    ga + 1,
                    gb + 1
                ),
            ));
        }
        pairs[ga].push((la, lb));
    }

    let node_label_path = file("node_labels");
    let node_labels = if node_label_path.exists() {
        let l = parse_ints(&node_label_path)?;
        if l.len() != local.len() {
            return Err(parse_err(
                &node_label_path,
                l.len(),
                format!("expected {} node labels", local.len()),
            ));
        }
        Some(l)
    } else {
        None
    };
    let attr_path = file("node_attributes");
    let attributes: Option<Vec<Vec<f64>>> = if attr_path.exists() {
        let rows = read_lines(&attr_path)?
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|e| parse_err(&attr_path, i + 1, format!("'{t}': {e}")))
                    })
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if rows.len() != local.len() {
            return Err(parse_err(
                &attr_path,
                rows.len(),
                format!("expected {} attribute rows", local.len()),
            ));
        }
        Some(rows)
    } else {
        None
    };

    let label_values: Vec<i64> = node_labels
        .as_ref()
        .map(|l| {
            l.iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .unwrap_or_default();
    let attr_width = attributes
        .as_ref()
        .and_then(|a| a.first())
        .map_or(0, Vec::len);
    let width = label_values.len() + attr_width;

    let mut features: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&n| Vec::with_capacity(n * width))
        .collect();
    for (node, &(g, _)) in local.iter().enumerate() {
        let row = &mut features[g];
        if let Some(labels) = &node_labels {
            let slot = label_values
                .binary_search(&labels[node])
                .expect("label in set");
            row.extend((0..label_values.len()).map(|j| if j == slot { 1.0 } else { 0.0 }));
        }
        if let Some(attrs) = &attributes {
            if attrs[node].len() != attr_width {
                return Err(parse_err(&attr_path, node + 1, "ragged attribute row"));
            }
            row.extend_from_slice(&attrs[node]);
        }
    }

    let classes: Vec<i64> = graph_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, feats) in features.into_iter().enumerate() {
        let class = classes
            .binary_search(&graph_labels[g])
            .expect("label in set");
        graphs.push(Graph::undirected(
            sizes[g],
            width,
            feats,
            &pairs[g],
            Some(class),
        )?);
    }
    Ok(graphs)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGraph {
    num_nodes: usize,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGraphs {
    graphs: Vec<JsonGraph>,
}

pub fn parse_graph_json(text: &str) -> Result<Vec<Graph>, DataError> {
    let doc: JsonGraphs = serde_json::from_str(text)?;
    doc.graphs
        .into_iter()
        .enumerate()
        .map(|(i, jg)| {
            let (width, feats) = match jg.node_features {
                Some(rows) => {
                    if rows.len() != jg.num_nodes {
                        return Err(DataError::InvalidGraph(format!(
                            "graph {i}: {} feature rows for {} nodes",
                            rows.len(),
                            jg.num_nodes
                        )));
                    }
                    let w = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != w) {
                        return Err(DataError::InvalidGraph(format!(
                            "graph {i}: ragged feature rows"
                        )));
                    }
                    (w, rows.into_iter().flatten().collect())
                }
                None => (0, Vec::new()),
            };
            let pairs: Vec<(usize, usize)> = jg.edges.iter().map(|e| (e[0], e[1])).collect();
            Graph::undirected(jg.num_nodes, width, feats, &pairs, jg.label)
                .map_err(|e| DataError::InvalidGraph(format!("graph {i}: {e}")))
        })
        .collect()
}

pub fn load_graph_json(path: &Path) -> Result<Vec<Graph>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_graph_json(&text)
}

/// Serializes graphs in the generic JSON format (undirected pairs).
pub fn graphs_to_json(graphs: &[Graph]) -> serde_json::Value {
    let doc = JsonGraphs {
        graphs: graphs
            .iter()
            .map(|g| JsonGraph {
                num_nodes: g.num_nodes,
                edges: g
                    .undirected_pairs()
                    .into_iter()
                    .map(|(s, d)| [s, d])
                    .collect(),
                node_features: (g.num_features > 0).then(|| {
                    (0..g.num_nodes)
                        .map(|v| g.feature_row(v).to_vec())
                        .collect()
                }),
                label: g.label,
            })
            .collect(),
    };
    serde_json::to_value(doc).expect("graphs serialize")
}

/// Dataset format on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Tu,
    Json,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tu" => Ok(DataFormat::Tu),
            "json" => Ok(DataFormat::Json),
            other => Err(format!(
                "unknown dataset format '{other}' (expected tu|json)"
            )),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Tu => "tu",
            DataFormat::Json => "json",
        })
    }
}

/// Loads a dataset in either format and completes its features.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    max_deg: Option<usize>,
) -> Result<Dataset, DataError> {
    let graphs = match format {
        DataFormat::Tu => load_tu_dataset(path)?,
        DataFormat::Json => load_graph_json(path)?,
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Dataset::from_graphs(name, graphs, max_deg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tu(dir: &Path, name: &str, files: &[(&str, &str)]) -> PathBuf {
        let d = dir.join(name);
        fs::create_dir_all(&d).unwrap();
        for (suffix, body) in files {
            fs::write(d.join(format!("{name}_{suffix}.txt")), body).unwrap();
        }
        d
    }

    #[test]
    fn toy_tu_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let d = write_tu(
            tmp.path(),
            "TOY",
            &[
                ("A", "1, 2\n"),
                ("graph_indicator", "1\n1\n"),
                ("graph_labels", "1\n"),
            ],
        );
        let gs = load_tu_dataset(&d).unwrap();
        assert_eq!(gs.len(), 1);
        assert_eq!(gs[0].num_nodes, 2);
        assert_eq!(gs[0].edges, vec![(0, 1), (1, 0)]);
        assert_eq!(gs[0].label, Some(0));
        // loading twice is idempotent
        assert_eq!(load_tu_dataset(&d).unwrap(), gs);
    }

    #[test]
    fn labels_remapped_and_node_labels_one_hot() {
        let tmp = tempfile::tempdir().unwrap();
        let d = write_tu(
            tmp.path(),
            "LAB",
            &[
                ("A", "1,2\n2,1\n3,4\n"),
                ("graph_indicator", "1\n1\n2\n2\n"),
                ("graph_labels", "-1\n1\n"),
                ("node_labels", "3\n0\n3\n5\n"),
            ],
        );
        let gs = load_tu_dataset(&d).unwrap();
        assert_eq!(gs[0].label, Some(0));
        assert_eq!(gs[1].label, Some(1));
        assert_eq!(gs[0].num_features, 3);
        assert_eq!(gs[0].feature_row(0), &[0., 1., 0.]);
        assert_eq!(gs[0].feature_row(1), &[1., 0., 0.]);
        assert_eq!(gs[1].feature_row(1), &[0., 0., 1.]);
    }

    #[test]
    fn missing_file_and_cross_graph_edge() {
        let tmp = tempfile::tempdir().unwrap();
        let d = write_tu(
            tmp.path(),
            "MISS",
            &[("A", "1, 2\n"), ("graph_indicator", "1\n1\n")],
        );
        assert!(matches!(
            load_tu_dataset(&d),
            Err(DataError::MissingFile(_))
        ));

        let d = write_tu(
            tmp.path(),
            "CROSS",
            &[
                ("A", "1, 3\n"),
                ("graph_indicator", "1\n1\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
        let err = load_tu_dataset(&d).unwrap_err();
        assert!(err.to_string().contains("crosses graphs"), "{err}");
    }

    #[test]
    fn json_round_trip_and_degree_fallback() {
        let text = r#"{"graphs":[{"num_nodes":3,"edges":[[0,1],[1,2]],"label":1},
                                 {"num_nodes":1,"edges":[],"label":0}]}"#;
        let gs = parse_graph_json(text).unwrap();
        assert_eq!(gs[0].edges.len(), 4);
        let ds = Dataset::from_graphs("toy", gs, None).unwrap();
        assert_eq!(ds.num_features, 3);
        assert_eq!(ds.num_classes, 2);
        let back = parse_graph_json(&graphs_to_json(&ds.graphs).to_string()).unwrap();
        assert_eq!(back, ds.graphs);
        assert!(parse_graph_json(r#"{"graphs":[{"num_nodes":1,"bogus":1}]}"#).is_err());
    }
}
