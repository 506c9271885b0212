//! Interned points of the countable sets the actions live on.
//!
//! A point is a hereditarily structured value: a vertex-group element, a class
//! of an induced action (base point plus canonical coset representative), a
//! copy-indexed pair, a tuple of pairwise distinct points, or a tagged member
//! of a disjoint union. Points are interned to dense `u32` ids in an
//! append-only registry; ids are stable for the lifetime of a run and are the
//! currency of the commitment log and all certificates.

use crate::word::Nf;
use crate::{Error, Result};
use std::collections::HashMap;
use std::rc::Rc;

pub type PointId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PointKey {
    /// Element of the translation action of a vertex group.
    Base { vertex: usize, elem: crate::base::BaseElement },
    /// Class [y, rep] of an induced action; `step` and `sub` name the
    /// inducing subgroup (engine step plus side marker).
    Induced { step: u32, sub: u8, y: PointId, rep: Rc<Nf> },
    /// Pair (y, n) of a copy-stabilized action.
    Copy { y: PointId, n: u32 },
    /// Tuple of pairwise distinct points (off-diagonal power).
    Tuple(Vec<PointId>),
    /// Tagged member of a disjoint union (tag 1 or 2).
    Side { tag: u8, y: PointId },
}

#[derive(Default, Debug)]
pub struct PointTable {
    keys: Vec<PointKey>,
    index: HashMap<PointKey, PointId>,
}

impl PointTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn intern(&mut self, key: PointKey) -> PointId {
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.keys.len() as PointId;
        self.keys.push(key.clone());
        self.index.insert(key, id);
        id
    }

    pub fn key(&self, id: PointId) -> &PointKey {
        &self.keys[id as usize]
    }

    pub fn lookup(&self, key: &PointKey) -> Option<PointId> {
        self.index.get(key).copied()
    }

    /// Copy index of a stabilized point.
    pub fn copy_index(&self, id: PointId) -> u32 {
        match self.key(id) {
            PointKey::Copy { n, .. } => *n,
            other => panic!("expected a copy point, got {other:?}"),
        }
    }

    pub fn copy_parts(&self, id: PointId) -> (PointId, u32) {
        match self.key(id) {
            PointKey::Copy { y, n } => (*y, *n),
            other => panic!("expected a copy point, got {other:?}"),
        }
    }

    /// Serialization used by `wlog.txt`; one line per point, in id order.
    pub fn render_lines(&self, render_nf: &dyn Fn(u32, u8, &Nf) -> String) -> Vec<String> {
        self.keys
            .iter()
            .enumerate()
            .map(|(id, key)| match key {
                PointKey::Base { vertex, elem } => {
                    format!("p {id} b {vertex} {}", elem.render())
                }
                PointKey::Induced { step, sub, y, rep } => {
                    format!("p {id} i {step} {sub} {y} {}", render_nf(*step, *sub, rep))
                }
                PointKey::Copy { y, n } => format!("p {id} c {y} {n}"),
                PointKey::Tuple(ids) => {
                    let body: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                    format!("p {id} t {}", body.join(" "))
                }
                PointKey::Side { tag, y } => format!("p {id} s {tag} {y}"),
            })
            .collect()
    }

    /// Rebuilds a table from serialized lines. `parse_nf` resolves a rendered
    /// word against the group of the named step/side.
    pub fn parse_lines(
        lines: &[&str],
        parse_nf: &dyn Fn(u32, u8, &str) -> Result<Nf>,
    ) -> Result<PointTable> {
        let mut table = PointTable::new();
        for (i, line) in lines.iter().enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::validation(format!("bad point line `{line}`"));
            if toks.len() < 3 || toks[0] != "p" {
                return Err(bad());
            }
            let id: PointId = toks[1].parse().map_err(|_| bad())?;
            if id as usize != i {
                return Err(Error::validation(format!(
                    "point ids must be dense and ordered; saw {id} at row {i}"
                )));
            }
            let key = match toks[2] {
                "b" => PointKey::Base {
                    vertex: toks.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                    elem: crate::base::BaseElement::parse(toks.get(4).ok_or_else(bad)?)?,
                },
                "i" => {
                    let step = toks.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    let sub = toks.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    let y = toks.get(5).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    let word = toks[6..].join(" ");
                    let rep = parse_nf(step, sub, &word)?;
                    PointKey::Induced { step, sub, y, rep: Rc::new(rep) }
                }
                "c" => PointKey::Copy {
                    y: toks.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                    n: toks.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                },
                "t" => {
                    let ids: Option<Vec<PointId>> =
                        toks[3..].iter().map(|s| s.parse().ok()).collect();
                    PointKey::Tuple(ids.ok_or_else(bad)?)
                }
                "s" => PointKey::Side {
                    tag: toks.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                    y: toks.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                },
                _ => return Err(bad()),
            };
            table.intern(key);
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::BaseElement;

    #[test]
    fn interning_is_injective_and_stable() {
        let mut t = PointTable::new();
        let a = t.intern(PointKey::Base { vertex: 0, elem: BaseElement::new(vec![1], 0) });
        let b = t.intern(PointKey::Base { vertex: 0, elem: BaseElement::new(vec![2], 0) });
        let a2 = t.intern(PointKey::Base { vertex: 0, elem: BaseElement::new(vec![1], 0) });
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let c = t.intern(PointKey::Copy { y: a, n: 3 });
        assert_eq!(t.copy_parts(c), (a, 3));
    }

    #[test]
    fn base_points_distinguish_vertices() {
        let mut t = PointTable::new();
        let a = t.intern(PointKey::Base { vertex: 0, elem: BaseElement::new(vec![1], 0) });
        let b = t.intern(PointKey::Base { vertex: 1, elem: BaseElement::new(vec![1], 0) });
        assert_ne!(a, b);
    }
}
