//! SWC morphology files: parsing, validation, serialization and resampling.
//!
//! An SWC file is a list of `id type x y z radius parent` rows plus `#`
//! comment lines. Parent `-1` marks a root; several roots make a forest.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Type code written for every node the pipeline emits.
pub const DEFAULT_NODE_TYPE: i32 = 2;

const DEFAULT_HEADER: &str = "id type x y z radius parent";

#[derive(Debug, Clone, PartialEq)]
pub struct SwcNode {
    pub id: i64,
    pub node_type: i32,
    pub position: Point3,
    pub radius: f64,
    pub parent_id: i64,
}

impl SwcNode {
    pub fn is_root(&self) -> bool {
        self.parent_id == -1
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronTree {
    pub nodes: Vec<SwcNode>,
    pub comments: Vec<String>,
}

impl NeuronTree {
    pub fn new(nodes: Vec<SwcNode>) -> Self {
        Self {
            nodes,
            comments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    /// Map from node id to its index in `nodes`. Later duplicates win.
    pub fn index_of(&self) -> HashMap<i64, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    /// Parent index per node (`None` for roots and dangling parents).
    pub fn parent_indices(&self) -> Vec<Option<usize>> {
        let idx = self.index_of();
        self.nodes
            .iter()
            .map(|n| {
                if n.is_root() {
                    None
                } else {
                    idx.get(&n.parent_id).copied()
                }
            })
            .collect()
    }

    /// Undirected parent-child edges as index pairs, in child order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent_indices()
            .into_iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
            .collect()
    }

    pub fn root_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_root()).count()
    }
}

/// Result of [`validate_tree`]. Each list names the offending node ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub duplicate_ids: Vec<i64>,
    pub orphan_parents: Vec<i64>,
    pub cycles: Vec<i64>,
    pub negative_radii: Vec<i64>,
    pub non_positive_ids: Vec<i64>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.duplicate_ids.is_empty()
            && self.orphan_parents.is_empty()
            && self.cycles.is_empty()
            && self.negative_radii.is_empty()
            && self.non_positive_ids.is_empty()
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if !self.duplicate_ids.is_empty() {
            parts.push(format!("duplicate ids {:?}", self.duplicate_ids));
        }
        if !self.orphan_parents.is_empty() {
            parts.push(format!("missing parents for ids {:?}", self.orphan_parents));
        }
        if !self.cycles.is_empty() {
            parts.push(format!("cycle through ids {:?}", self.cycles));
        }
        if !self.negative_radii.is_empty() {
            parts.push(format!("negative radius at ids {:?}", self.negative_radii));
        }
        if !self.non_positive_ids.is_empty() {
            parts.push(format!("non-positive ids {:?}", self.non_positive_ids));
        }
        parts.join("; ")
    }
}

pub fn validate_tree(tree: &NeuronTree) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashMap<i64, usize> = HashMap::with_capacity(tree.len());
    for (i, n) in tree.nodes.iter().enumerate() {
        if n.id <= 0 {
            report.non_positive_ids.push(n.id);
        }
        if seen.insert(n.id, i).is_some() && !report.duplicate_ids.contains(&n.id) {
            report.duplicate_ids.push(n.id);
        }
        if !(n.radius >= 0.0) {
            report.negative_radii.push(n.id);
        }
    }
    for n in &tree.nodes {
        if !n.is_root() && !seen.contains_key(&n.parent_id) {
            report.orphan_parents.push(n.id);
        }
    }

    // 0 = unvisited, 1 = on current chain, 2 = known acyclic
    let mut state = vec![0u8; tree.len()];
    for start in 0..tree.len() {
        if state[start] != 0 {
            continue;
        }
        let mut chain: Vec<usize> = Vec::new();
        let mut cur = Some(start);
        while let Some(i) = cur {
            match state[i] {
                2 => break,
                1 => {
                    let pos = chain.iter().position(|&c| c == i).unwrap_or(0);
                    for &c in &chain[pos..] {
                        report.cycles.push(tree.nodes[c].id);
                    }
                    break;
                }
                _ => {}
            }
            state[i] = 1;
            chain.push(i);
            let n = &tree.nodes[i];
            cur = if n.is_root() {
                None
            } else {
                seen.get(&n.parent_id).copied()
            };
        }
        for c in chain {
            state[c] = 2;
        }
    }
    report
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} `{s}`"),
    })
}

pub fn parse_swc(bytes: &[u8]) -> Result<NeuronTree> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut tree = NeuronTree::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.strip_prefix(' ').unwrap_or(rest);
            tree.comments.push(rest.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let id: i64 = parse_field(fields[0], line_no, "id")?;
        if id <= 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("id must be positive, got {id}"),
            });
        }
        let node = SwcNode {
            id,
            node_type: parse_field(fields[1], line_no, "type")?,
            position: [
                parse_field(fields[2], line_no, "x")?,
                parse_field(fields[3], line_no, "y")?,
                parse_field(fields[4], line_no, "z")?,
            ],
            radius: parse_field(fields[5], line_no, "radius")?,
            parent_id: parse_field(fields[6], line_no, "parent")?,
        };
        if node.position.iter().any(|v| !v.is_finite()) || !node.radius.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite coordinate or radius".into(),
            });
        }
        tree.nodes.push(node);
    }

    let report = validate_tree(&tree);
    if !report.duplicate_ids.is_empty()
        || !report.orphan_parents.is_empty()
        || !report.cycles.is_empty()
    {
        return Err(Error::Structure(report.describe()));
    }
    Ok(tree)
}

/// Formats a value with six significant digits, trailing zeros removed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() {
            "0".into()
        } else {
            format!("{v}")
        };
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .unwrap_or(0);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let (mantissa, e) = sci.split_once('e').unwrap_or((&sci, "0"));
        format!("{}e{}", trim_zeros(mantissa.to_string()), e)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" {
            "0".into()
        } else {
            t.to_string()
        }
    } else {
        s
    }
}

pub fn write_swc(tree: &NeuronTree) -> Result<Vec<u8>> {
    let report = validate_tree(tree);
    if !report.ok() {
        return Err(Error::Structure(report.describe()));
    }
    let mut out = String::new();
    if tree.comments.is_empty() {
        let _ = writeln!(out, "# {DEFAULT_HEADER}");
    }
    for c in &tree.comments {
        let _ = writeln!(out, "# {c}");
    }
    for n in &tree.nodes {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            n.id,
            n.node_type,
            format_sig6(n.position[0]),
            format_sig6(n.position[1]),
            format_sig6(n.position[2]),
            format_sig6(n.radius),
            n.parent_id
        );
    }
    Ok(out.into_bytes())
}

/// A sample along the neurite centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlinePoint {
    pub position: Point3,
    pub radius: f64,
}

/// All node positions followed by interior points every `spacing` along each
/// parent-child segment, measured from the parent end.
pub fn resample_edges(tree: &NeuronTree, spacing: f64) -> Result<Vec<CenterlinePoint>> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "resample spacing must be positive, got {spacing}"
        )));
    }
    let mut out: Vec<CenterlinePoint> = tree
        .nodes
        .iter()
        .map(|n| CenterlinePoint {
            position: n.position,
            radius: n.radius,
        })
        .collect();
    for (p, c) in tree.edges() {
        let a = &tree.nodes[p];
        let b = &tree.nodes[c];
        let len = geom::dist(&a.position, &b.position);
        // tolerance keeps unit-length edges from gaining a near-duplicate point
        let segments = (len / spacing - 1e-9).ceil().max(1.0) as usize;
        for k in 1..segments {
            let t = (k as f64 * spacing) / len;
            out.push(CenterlinePoint {
                position: geom::lerp(&a.position, &b.position, t),
                radius: a.radius + (b.radius - a.radius) * t,
            });
        }
    }
    Ok(out)
}
