//! Graph-of-groups input format, validation, and the BFS maximal subtree.
//!
//! Line-oriented format:
//!
//! ```text
//! # comment
//! budget 30
//! seed 42
//! vertex <id> group Z^<d> x table:<rows>
//! edge <id> from <v> to <v> sigma table:<rows> s_images:<list> r_images:<list> [tree]
//! ```
//!
//! Table rows are semicolon-separated lists of comma-separated indices.
//! Image lists are comma-separated elements like `(0,a)` (vector entries then
//! the finite-part name). Each `edge` line declares one oriented edge; the
//! reverse edge is implicit.

use crate::base::{BaseElement, BaseGroup};
use crate::finite::{Embedding, FiniteGroup};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Clone, Debug)]
pub struct Vertex {
    pub id: usize,
    pub group: Rc<BaseGroup>,
}

#[derive(Clone, Debug)]
pub struct EdgePair {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub sigma: Rc<FiniteGroup>,
    /// Images of sigma in the vertex group at `from`.
    pub s_images: Vec<BaseElement>,
    /// Images of sigma in the vertex group at `to`.
    pub r_images: Vec<BaseElement>,
    pub in_tree: bool,
    /// Whether the input file carried an explicit `tree` marker.
    pub declared_tree: bool,
}

#[derive(Clone, Debug)]
pub struct GraphOfGroups {
    pub vertices: BTreeMap<usize, Vertex>,
    pub edges: Vec<EdgePair>,
    pub budget: Option<u64>,
    pub seed: u64,
}

impl GraphOfGroups {
    pub fn vertex(&self, id: usize) -> &Vertex {
        &self.vertices[&id]
    }

    pub fn edge(&self, id: usize) -> &EdgePair {
        self.edges.iter().find(|e| e.id == id).expect("edge id")
    }

    pub fn parse(text: &str) -> Result<GraphOfGroups> {
        let mut vertices: BTreeMap<usize, Vertex> = BTreeMap::new();
        let mut raw_edges: Vec<(usize, EdgePair)> = Vec::new(); // (line, edge)
        let mut budget = None;
        let mut seed = 0u64;
        for (ln, line) in text.lines().enumerate() {
            let ln = ln + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "budget" => {
                    budget = Some(parse_field(toks.get(1), ln, "budget value")?);
                }
                "seed" => {
                    seed = parse_field(toks.get(1), ln, "seed value")?;
                }
                "vertex" => {
                    let v = parse_vertex(&toks, ln)?;
                    if vertices.contains_key(&v.id) {
                        return Err(Error::Parse {
                            line: ln,
                            msg: format!("duplicate vertex id {}", v.id),
                        });
                    }
                    vertices.insert(v.id, v);
                }
                "edge" => {
                    let e = parse_edge(&toks, ln)?;
                    if raw_edges.iter().any(|(_, x)| x.id == e.id) {
                        return Err(Error::Parse {
                            line: ln,
                            msg: format!("duplicate edge id {}", e.id),
                        });
                    }
                    raw_edges.push((ln, e));
                }
                other => {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("unknown directive `{other}`"),
                    });
                }
            }
        }
        if vertices.is_empty() {
            return Err(Error::validation("no vertices declared"));
        }
        // incidences and embeddings
        for (ln, e) in &raw_edges {
            for v in [e.from, e.to] {
                if !vertices.contains_key(&v) {
                    return Err(Error::Parse {
                        line: *ln,
                        msg: format!("edge {} references missing vertex {v}", e.id),
                    });
                }
            }
            let s_emb = Embedding::into_base(
                e.sigma.clone(),
                vertices[&e.from].group.clone(),
                e.s_images.clone(),
            );
            s_emb.check().map_err(|err| Error::Parse {
                line: *ln,
                msg: format!("edge {}: s_images invalid: {err}", e.id),
            })?;
            let r_emb = Embedding::into_base(
                e.sigma.clone(),
                vertices[&e.to].group.clone(),
                e.r_images.clone(),
            );
            r_emb.check().map_err(|err| Error::Parse {
                line: *ln,
                msg: format!("edge {}: r_images invalid: {err}", e.id),
            })?;
        }
        let mut edges: Vec<EdgePair> = raw_edges.into_iter().map(|(_, e)| e).collect();
        edges.sort_by_key(|e| e.id);
        if edges.is_empty() {
            // "non-trivial" requires at least one edge pair {e, e-bar}
            return Err(Error::validation(
                "graph is trivial: needs at least one edge and its inverse edge",
            ));
        }
        let mut g = GraphOfGroups { vertices, edges, budget, seed };
        g.check_connected()?;
        g.compute_tree()?;
        Ok(g)
    }

    fn check_connected(&self) -> Result<()> {
        let first = *self.vertices.keys().next().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        seen.insert(first);
        let mut queue = vec![first];
        while let Some(v) = queue.pop() {
            for e in &self.edges {
                for (a, b) in [(e.from, e.to), (e.to, e.from)] {
                    if a == v && seen.insert(b) {
                        queue.push(b);
                    }
                }
            }
        }
        if seen.len() != self.vertices.len() {
            let missing: Vec<usize> =
                self.vertices.keys().filter(|v| !seen.contains(v)).copied().collect();
            return Err(Error::validation(format!(
                "graph is disconnected: vertices {missing:?} unreachable"
            )));
        }
        Ok(())
    }

    /// BFS spanning tree from the least vertex id, ties broken by edge id.
    fn compute_tree(&mut self) -> Result<()> {
        let root = *self.vertices.keys().next().unwrap();
        let mut visited = std::collections::BTreeSet::new();
        visited.insert(root);
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(root);
        let mut tree_ids = std::collections::BTreeSet::new();
        while let Some(v) = frontier.pop_front() {
            for e in &self.edges {
                let other = if e.from == v && !visited.contains(&e.to) {
                    Some(e.to)
                } else if e.to == v && !visited.contains(&e.from) {
                    Some(e.from)
                } else {
                    None
                };
                if let Some(u) = other {
                    visited.insert(u);
                    tree_ids.insert(e.id);
                    frontier.push_back(u);
                }
            }
        }
        for e in &mut self.edges {
            e.in_tree = tree_ids.contains(&e.id);
            if e.declared_tree && !e.in_tree {
                return Err(Error::validation(format!(
                    "edge {} is marked `tree` but the BFS maximal subtree excludes it",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn tree_edges(&self) -> Vec<usize> {
        self.edges.iter().filter(|e| e.in_tree).map(|e| e.id).collect()
    }

    pub fn non_tree_edges(&self) -> Vec<usize> {
        self.edges.iter().filter(|e| !e.in_tree).map(|e| e.id).collect()
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&&str>, ln: usize, what: &str) -> Result<T> {
    tok.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
        line: ln,
        msg: format!("missing or malformed {what}"),
    })
}

fn parse_table(spec: &str, ln: usize) -> Result<Vec<Vec<usize>>> {
    let body = spec.strip_prefix("table:").ok_or_else(|| Error::Parse {
        line: ln,
        msg: format!("expected `table:<rows>`, got `{spec}`"),
    })?;
    let mut rows = Vec::new();
    for row in body.split(';') {
        let mut out = Vec::new();
        for cell in row.split(',') {
            out.push(cell.trim().parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad table entry `{cell}`"),
            })?);
        }
        rows.push(out);
    }
    Ok(rows)
}

fn parse_vertex(toks: &[&str], ln: usize) -> Result<Vertex> {
    // vertex <id> group Z^<d> x table:<rows>
    if toks.len() != 6 || toks[2] != "group" || toks[4] != "x" {
        return Err(Error::Parse {
            line: ln,
            msg: "expected `vertex <id> group Z^<d> x table:<rows>`".into(),
        });
    }
    let id = parse_field(toks.get(1), ln, "vertex id")?;
    let d: usize = toks[3]
        .strip_prefix("Z^")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse { line: ln, msg: format!("bad rank `{}`", toks[3]) })?;
    let table = parse_table(toks[5], ln)?;
    let fin = FiniteGroup::from_table(table)
        .map_err(|e| Error::Parse { line: ln, msg: format!("vertex {id}: {e}") })?;
    Ok(Vertex { id, group: Rc::new(BaseGroup::new(d, fin)) })
}

fn parse_images(spec: &str, prefix: &str, ln: usize) -> Result<Vec<BaseElement>> {
    let body = spec.strip_prefix(prefix).ok_or_else(|| Error::Parse {
        line: ln,
        msg: format!("expected `{prefix}<list>`, got `{spec}`"),
    })?;
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in body.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
            }
            ',' if depth == 0 => {
                out.push(cur.clone());
                cur.clear();
            }
            _ => cur.push(ch),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.iter()
        .map(|s| {
            BaseElement::parse(s).map_err(|e| Error::Parse { line: ln, msg: format!("{e}") })
        })
        .collect()
}

fn parse_edge(toks: &[&str], ln: usize) -> Result<EdgePair> {
    // edge <id> from <v> to <v> sigma table:<rows> s_images:<list> r_images:<list> [tree]
    if toks.len() < 10 || toks[2] != "from" || toks[4] != "to" || toks[6] != "sigma" {
        return Err(Error::Parse {
            line: ln,
            msg: "expected `edge <id> from <v> to <v> sigma table:<rows> s_images:<list> r_images:<list> [tree]`".into(),
        });
    }
    let id = parse_field(toks.get(1), ln, "edge id")?;
    let from = parse_field(toks.get(3), ln, "source vertex")?;
    let to = parse_field(toks.get(5), ln, "range vertex")?;
    let table = parse_table(toks[7], ln)?;
    let sigma = FiniteGroup::from_table(table)
        .map_err(|e| Error::Parse { line: ln, msg: format!("edge {id}: {e}") })?;
    let s_images = parse_images(toks[8], "s_images:", ln)?;
    let r_images = parse_images(toks[9], "r_images:", ln)?;
    let declared_tree = match toks.get(10) {
        None => false,
        Some(&"tree") => true,
        Some(other) => {
            return Err(Error::Parse { line: ln, msg: format!("unexpected token `{other}`") })
        }
    };
    Ok(EdgePair {
        id,
        from,
        to,
        sigma: Rc::new(sigma),
        s_images,
        r_images,
        in_tree: false,
        declared_tree,
    })
}

#[cfg(test)]
pub mod samples {
    pub const LOOP_Z_C2: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
edge 0 from 0 to 0 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a)
";

    pub const LOOP_Z: &str = "\
vertex 0 group Z^1 x table:0
edge 0 from 0 to 0 sigma table:0 s_images:(0,e) r_images:(0,e)
";

    pub const AMALGAM_Z_C2: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
vertex 1 group Z^1 x table:0,1;1,0
edge 0 from 0 to 1 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a) tree
";

    pub const AMALGAM_Z_Z: &str = "\
vertex 0 group Z^1 x table:0
vertex 1 group Z^1 x table:0
edge 0 from 0 to 1 sigma table:0 s_images:(0,e) r_images:(0,e) tree
";

    pub const TWO_EDGE: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
vertex 1 group Z^1 x table:0
edge 0 from 0 to 0 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a)
edge 1 from 0 to 1 sigma table:0 s_images:(0,e) r_images:(0,e) tree
";
}

#[cfg(test)]
mod tests {
    use super::samples::*;
    use super::*;

    #[test]
    fn hnn_loop_parses() {
        let g = GraphOfGroups::parse(LOOP_Z_C2).unwrap();
        assert_eq!(g.vertices.len(), 1);
        assert_eq!(g.edges.len(), 1);
        assert!(!g.edges[0].in_tree, "a loop cannot be a tree edge");
        assert_eq!(g.edges[0].sigma.order, 2);
    }

    #[test]
    fn amalgam_parses_with_tree_edge() {
        let g = GraphOfGroups::parse(AMALGAM_Z_C2).unwrap();
        assert_eq!(g.tree_edges(), vec![0]);
        assert!(g.non_tree_edges().is_empty());
    }

    #[test]
    fn two_edge_graph_splits_tree() {
        let g = GraphOfGroups::parse(TWO_EDGE).unwrap();
        assert_eq!(g.tree_edges(), vec![1]);
        assert_eq!(g.non_tree_edges(), vec![0]);
    }

    #[test]
    fn trivial_graph_rejected() {
        let text = "\
vertex 0 group Z^1 x table:0
vertex 1 group Z^1 x table:0
";
        let err = GraphOfGroups::parse(text).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("trivial") || msg.contains("disconnected"), "{msg}");
    }

    #[test]
    fn disconnected_rejected() {
        let text = "\
vertex 0 group Z^1 x table:0
vertex 1 group Z^1 x table:0
vertex 2 group Z^1 x table:0
edge 0 from 0 to 1 sigma table:0 s_images:(0,e) r_images:(0,e)
";
        let err = GraphOfGroups::parse(text).unwrap_err();
        assert!(format!("{err}").contains("disconnected"));
    }

    #[test]
    fn bad_embedding_cites_edge() {
        let text = "\
vertex 0 group Z^1 x table:0,1;1,0
edge 0 from 0 to 0 sigma table:0,1;1,0 s_images:(0,e),(1,e) r_images:(0,e),(0,a)
";
        let err = GraphOfGroups::parse(text).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("edge 0"), "message should cite the edge: {msg}");
        assert!(msg.contains("infinite order"), "{msg}");
    }

    #[test]
    fn dangling_incidence_rejected() {
        let text = "\
vertex 0 group Z^1 x table:0
edge 0 from 0 to 3 sigma table:0 s_images:(0,e) r_images:(0,e)
";
        let err = GraphOfGroups::parse(text).unwrap_err();
        assert!(format!("{err}").contains("missing vertex 3"));
    }

    #[test]
    fn false_tree_marker_rejected() {
        let text = "\
vertex 0 group Z^1 x table:0
edge 0 from 0 to 0 sigma table:0 s_images:(0,e) r_images:(0,e) tree
";
        let err = GraphOfGroups::parse(text).unwrap_err();
        assert!(format!("{err}").contains("tree"));
    }
}
