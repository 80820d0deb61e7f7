//! Binary class hierarchy induced from the classifier weight rows.
//!
//! Leaves take ids `0..C` (leaf `c` holds class `c`); inner nodes take ids
//! `C..2C-1` in merge order, so the root is always `2C - 2`.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const HIERARCHY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    /// Empty for leaves, exactly two entries otherwise.
    pub children: Vec<usize>,
    pub leaf_class: Option<usize>,
    /// Sorted classes under this node.
    pub class_set: Vec<usize>,
    pub representative: Vec<f64>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducedHierarchy {
    pub d: usize,
    pub root_id: usize,
    /// Indexed by node id.
    pub nodes: Vec<Node>,
    pub class_names: Vec<String>,
}

fn weight_rows<T: Scalar>(w: ArrayView2<T>) -> Vec<Vec<f64>> {
    w.outer_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

fn mean_rows(rows: &[Vec<f64>], classes: &[usize], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for &c in classes {
        for (o, v) in out.iter_mut().zip(&rows[c]) {
            *o += v;
        }
    }
    let n = classes.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Cosine distance `1 - cos` between every pair of rows.
fn cosine_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    unit.iter()
        .map(|a| unit.iter().map(|b| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).collect())
        .collect()
}

/// Average of the pairwise leaf distances between two clusters.
fn average_linkage(dist: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &i in a {
        for &j in b {
            sum += dist[i][j];
        }
    }
    sum / (a.len() * b.len()) as f64
}

impl InducedHierarchy {
    /// Agglomerative clustering of the L2-normalised rows of `w` `(C, d)`
    /// under average linkage on cosine distance. Equal costs go to the pair
    /// with the smaller `(first id, second id)`.
    pub fn induce<T: Scalar>(w: ArrayView2<T>) -> Result<Self> {
        let c = w.nrows();
        Self::induce_named(w, (0..c).map(|i| format!("class{i}")).collect())
    }

    pub fn induce_named<T: Scalar>(w: ArrayView2<T>, class_names: Vec<String>) -> Result<Self> {
        let (c, d) = w.dim();
        if c < 2 {
            return Err(Error::InsufficientClasses(c));
        }
        if class_names.len() != c {
            return Err(Error::InvalidArgument(format!("{} class names for {c} classes", class_names.len())));
        }
        let rows = weight_rows(w);
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) || r.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateWeights(i));
            }
        }
        let dist = cosine_distances(&rows);
        let mut nodes: Vec<Node> = (0..c)
            .map(|i| Node {
                id: i,
                children: vec![],
                leaf_class: Some(i),
                class_set: vec![i],
                representative: rows[i].clone(),
            })
            .collect();
        // Active cluster ids, kept sorted ascending.
        let mut active: Vec<usize> = (0..c).collect();
        while active.len() > 1 {
            let mut best: Option<(f64, usize, usize)> = None;
            for (ai, &a) in active.iter().enumerate() {
                for &b in &active[ai + 1..] {
                    let cost = average_linkage(&dist, &nodes[a].class_set, &nodes[b].class_set);
                    if best.map_or(true, |(bc, _, _)| cost < bc) {
                        best = Some((cost, a, b));
                    }
                }
            }
            let (_, a, b) = best.expect("at least two active clusters");
            let mut class_set = [nodes[a].class_set.clone(), nodes[b].class_set.clone()].concat();
            class_set.sort_unstable();
            let id = nodes.len();
            nodes.push(Node {
                id,
                children: vec![a, b],
                leaf_class: None,
                representative: mean_rows(&rows, &class_set, d),
                class_set,
            });
            active.retain(|&x| x != a && x != b);
            active.push(id);
        }
        Ok(Self {
            d,
            root_id: nodes.len() - 1,
            nodes,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    /// Inner node ids, ascending.
    pub fn inner_nodes(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn leaf_of(&self, class: usize) -> Result<usize> {
        self.nodes
            .iter()
            .find(|n| n.leaf_class == Some(class))
            .map(|n| n.id)
            .ok_or(Error::UnknownClass(class))
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes.iter().find(|n| n.children.contains(&id)).map(|n| n.id)
    }

    /// `(node, child index)` for every step from the root down to `class`.
    pub fn path_to_class(&self, class: usize) -> Result<Vec<(usize, usize)>> {
        let mut id = self.leaf_of(class)?;
        let mut path = Vec::new();
        while let Some(p) = self.parent(id) {
            let j = self.nodes[p].children.iter().position(|&ch| ch == id).expect("child of parent");
            path.push((p, j));
            id = p;
        }
        path.reverse();
        Ok(path)
    }

    pub fn depth(&self, id: usize) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            depth += 1;
            cur = p;
        }
        depth
    }

    pub fn leaf_depth(&self, class: usize) -> Result<usize> {
        Ok(self.depth(self.leaf_of(class)?))
    }

    /// Deepest node whose class set holds both classes.
    pub fn lowest_common_ancestor(&self, a: usize, b: usize) -> Result<usize> {
        self.leaf_of(a)?;
        self.leaf_of(b)?;
        self.nodes
            .iter()
            .filter(|n| n.class_set.contains(&a) && n.class_set.contains(&b))
            .max_by_key(|n| (self.depth(n.id), std::cmp::Reverse(n.id)))
            .map(|n| n.id)
            .ok_or(Error::UnknownClass(b))
    }

    /// Same structure, representatives recomputed from new weight rows.
    pub fn with_weights<T: Scalar>(&self, w: ArrayView2<T>) -> Result<Self> {
        let (c, d) = w.dim();
        if c != self.num_classes() || d != self.d {
            return Err(Error::HierarchyDimensionMismatch {
                hierarchy: self.d,
                model: d,
            });
        }
        let rows = weight_rows(w);
        let mut out = self.clone();
        for n in &mut out.nodes {
            n.representative = mean_rows(&rows, &n.class_set, d);
        }
        Ok(out)
    }

    /// Set of inner-node class sets; equal for two trees iff they have the
    /// same shape over the same leaves.
    pub fn clusters(&self) -> std::collections::BTreeSet<Vec<usize>> {
        self.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.class_set.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        let bad = |m: String| Err(Error::SchemaMismatch(m));
        if c < 2 || self.nodes.len() != 2 * c - 1 {
            return bad(format!("{} nodes for {c} classes", self.nodes.len()));
        }
        if self.root_id >= self.nodes.len() {
            return bad(format!("root {} out of range", self.root_id));
        }
        let mut leaf_seen = vec![false; c];
        let mut parent_count = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at position {i} has id {}", n.id));
            }
            if n.representative.len() != self.d {
                return bad(format!("node {i} representative has {} entries", n.representative.len()));
            }
            match (n.children.len(), n.leaf_class) {
                (0, Some(cls)) => {
                    if cls >= c || leaf_seen[cls] {
                        return bad(format!("leaf_class {cls} duplicated or out of range"));
                    }
                    leaf_seen[cls] = true;
                    if n.class_set != [cls] {
                        return bad(format!("leaf {i} class_set {:?}", n.class_set));
                    }
                }
                (2, None) => {
                    for &ch in &n.children {
                        if ch >= self.nodes.len() || ch == i {
                            return bad(format!("node {i} has bad child {ch}"));
                        }
                        parent_count[ch] += 1;
                    }
                    let mut union =
                        [self.nodes[n.children[0]].class_set.clone(), self.nodes[n.children[1]].class_set.clone()]
                            .concat();
                    union.sort_unstable();
                    if union.windows(2).any(|p| p[0] == p[1]) || union != n.class_set {
                        return bad(format!("node {i} class_set is not the disjoint union of its children"));
                    }
                }
                _ => return bad(format!("node {i} is neither a leaf nor a binary split")),
            }
        }
        for (i, &count) in parent_count.iter().enumerate() {
            let expected = usize::from(i != self.root_id);
            if count != expected {
                return bad(format!("node {i} has {count} parents"));
            }
        }
        if self.nodes[self.root_id].class_set.len() != c {
            return bad("root does not cover every class".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    id: usize,
    children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leaf_class: Option<usize>,
    class_set: Vec<usize>,
    /// Shortest round-tripping decimal strings.
    representative: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyFile {
    format_version: u32,
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    root_id: usize,
    nodes: Vec<NodeFile>,
    class_names: Vec<String>,
}

pub fn hierarchy_to_json(h: &InducedHierarchy) -> Result<String> {
    let file = HierarchyFile {
        format_version: HIERARCHY_FORMAT_VERSION,
        d: h.d,
        c: h.num_classes(),
        root_id: h.root_id,
        nodes: h
            .nodes
            .iter()
            .map(|n| NodeFile {
                id: n.id,
                children: n.children.clone(),
                leaf_class: n.leaf_class,
                class_set: n.class_set.clone(),
                representative: n.representative.iter().map(|v| format!("{v:?}")).collect(),
            })
            .collect(),
        class_names: h.class_names.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn hierarchy_from_json(text: &str) -> Result<InducedHierarchy> {
    let file: HierarchyFile = serde_json::from_str(text).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    if file.format_version != HIERARCHY_FORMAT_VERSION {
        return Err(Error::SchemaMismatch(format!("unsupported format_version {}", file.format_version)));
    }
    if file.c != file.class_names.len() {
        return Err(Error::SchemaMismatch(format!("C = {} but {} class names", file.c, file.class_names.len())));
    }
    let nodes = file
        .nodes
        .into_iter()
        .map(|n| {
            let representative = n
                .representative
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::SchemaMismatch(format!("representative {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            Ok(Node {
                id: n.id,
                children: n.children,
                leaf_class: n.leaf_class,
                class_set: n.class_set,
                representative,
            })
        })
        .collect::<Result<_>>()?;
    let h = InducedHierarchy {
        d: file.d,
        root_id: file.root_id,
        nodes,
        class_names: file.class_names,
    };
    h.validate()?;
    Ok(h)
}

pub fn save_hierarchy(h: &InducedHierarchy, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, hierarchy_to_json(h)?)?;
    Ok(())
}

pub fn load_hierarchy(path: &Path) -> Result<InducedHierarchy> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    hierarchy_from_json(&fs::read_to_string(path)?)
}
