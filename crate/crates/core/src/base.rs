//! Vertex groups `Z^d x F` with componentwise arithmetic and the fixed global
//! enumeration order (max-norm shell, then lexicographic vector, then finite
//! part index). Every downstream "choose the least" rule refers to this order.

use crate::finite::FiniteGroup;
use crate::{Error, Result};
use std::cmp::Ordering;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BaseElement {
    pub vector: Vec<i64>,
    pub fin: usize,
}

impl BaseElement {
    pub fn new(vector: Vec<i64>, fin: usize) -> Self {
        BaseElement { vector, fin }
    }

    pub fn is_identity(&self) -> bool {
        self.fin == 0 && self.vector.iter().all(|&v| v == 0)
    }

    /// Word norm: sum of coordinate magnitudes plus one for a nontrivial
    /// finite part. Drives word sizes for composed groups.
    pub fn word_norm(&self) -> u64 {
        self.vector.iter().map(|v| v.unsigned_abs()).sum::<u64>()
            + if self.fin != 0 { 1 } else { 0 }
    }

    pub fn max_norm(&self) -> i64 {
        self.vector.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Text form `(v1,..,vd,f)` with the finite part named `e,a,b,...`.
    pub fn render(&self) -> String {
        let mut parts: Vec<String> = self.vector.iter().map(|v| v.to_string()).collect();
        parts.push(FiniteGroup::elem_name(self.fin));
        format!("({})", parts.join(","))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let inner = text
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| Error::validation(format!("malformed element `{text}`")))?;
        let parts: Vec<&str> = if inner.is_empty() { vec![] } else { inner.split(',').collect() };
        if parts.is_empty() {
            return Err(Error::validation(format!("malformed element `{text}`")));
        }
        let fin_name = parts[parts.len() - 1];
        let fin = FiniteGroup::elem_index(fin_name)
            .ok_or_else(|| Error::validation(format!("unknown finite element `{fin_name}`")))?;
        let mut vector = Vec::with_capacity(parts.len() - 1);
        for p in &parts[..parts.len() - 1] {
            vector.push(p.parse().map_err(|_| {
                Error::validation(format!("bad integer `{p}` in element `{text}`"))
            })?);
        }
        Ok(BaseElement { vector, fin })
    }
}

impl fmt::Display for BaseElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseGroup {
    pub rank: usize,
    pub finite_part: FiniteGroup,
}

impl BaseGroup {
    pub fn new(rank: usize, finite_part: FiniteGroup) -> Self {
        BaseGroup { rank, finite_part }
    }

    pub fn is_infinite(&self) -> bool {
        self.rank >= 1
    }

    pub fn order_if_finite(&self) -> Option<usize> {
        if self.rank == 0 { Some(self.finite_part.order) } else { None }
    }

    pub fn identity(&self) -> BaseElement {
        BaseElement::new(vec![0; self.rank], 0)
    }

    pub fn contains(&self, g: &BaseElement) -> bool {
        g.vector.len() == self.rank && g.fin < self.finite_part.order
    }

    pub fn mul(&self, g: &BaseElement, h: &BaseElement) -> Result<BaseElement> {
        if !self.contains(g) || !self.contains(h) {
            return Err(Error::validation("element does not belong to this group"));
        }
        let vector = g.vector.iter().zip(&h.vector).map(|(a, b)| a + b).collect();
        Ok(BaseElement::new(vector, self.finite_part.mul(g.fin, h.fin)))
    }

    pub fn inv(&self, g: &BaseElement) -> BaseElement {
        BaseElement::new(
            g.vector.iter().map(|v| -v).collect(),
            self.finite_part.inv(g.fin),
        )
    }

    /// The fixed enumeration comparator: max-norm, then lexicographic vector,
    /// then finite part index.
    pub fn cmp_enum(a: &BaseElement, b: &BaseElement) -> Ordering {
        a.max_norm()
            .cmp(&b.max_norm())
            .then_with(|| a.vector.cmp(&b.vector))
            .then_with(|| a.fin.cmp(&b.fin))
    }

    /// Vectors of max-norm exactly `r`, lexicographic order.
    fn shell_vectors(&self, r: i64, out: &mut Vec<Vec<i64>>) {
        fn rec(d: usize, r: i64, prefix: &mut Vec<i64>, hit: bool, out: &mut Vec<Vec<i64>>) {
            if d == 0 {
                if hit {
                    out.push(prefix.clone());
                }
                return;
            }
            for v in -r..=r {
                prefix.push(v);
                rec(d - 1, r, prefix, hit || v.abs() == r, out);
                prefix.pop();
            }
        }
        if self.rank == 0 {
            if r == 0 {
                out.push(vec![]);
            }
            return;
        }
        rec(self.rank, r, &mut Vec::new(), r == 0, out);
    }

    /// The element at position `idx` of the enumeration, or `None` when the
    /// group is finite and exhausted.
    pub fn enumerate_at(&self, idx: u64) -> Option<BaseElement> {
        let per = self.finite_part.order as u64;
        let mut seen = 0u64;
        let mut r = 0i64;
        loop {
            let mut vecs = Vec::new();
            self.shell_vectors(r, &mut vecs);
            let shell = vecs.len() as u64 * per;
            if idx < seen + shell {
                let off = idx - seen;
                let v = &vecs[(off / per) as usize];
                return Some(BaseElement::new(v.clone(), (off % per) as usize));
            }
            seen += shell;
            if self.rank == 0 {
                return None;
            }
            r += 1;
        }
    }

    /// Position of `g` in the enumeration.
    pub fn index_of(&self, g: &BaseElement) -> u64 {
        let per = self.finite_part.order as u64;
        let mut seen = 0u64;
        for r in 0..=g.max_norm() {
            let mut vecs = Vec::new();
            self.shell_vectors(r, &mut vecs);
            if r == g.max_norm() {
                let pos = vecs.iter().position(|v| *v == g.vector).expect("vector in its shell");
                return seen + pos as u64 * per + g.fin as u64;
            }
            seen += vecs.len() as u64 * per;
        }
        unreachable!()
    }

    /// All elements of word norm exactly `n`, ordered by the enumeration
    /// comparator. Used by word-size enumeration in composed groups.
    pub fn elements_of_word_norm(&self, n: u64) -> Vec<BaseElement> {
        let mut out = Vec::new();
        // vectors with |v|_1 = n (fin = e), or |v|_1 = n-1 (fin != e)
        fn vectors_l1(d: usize, n: i64, prefix: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
            if d == 0 {
                if n == 0 {
                    out.push(prefix.clone());
                }
                return;
            }
            for v in -n..=n {
                prefix.push(v);
                vectors_l1(d - 1, n - v.abs(), prefix, out);
                prefix.pop();
            }
        }
        let mut vecs = Vec::new();
        vectors_l1(self.rank, n as i64, &mut Vec::new(), &mut vecs);
        for v in vecs {
            out.push(BaseElement::new(v, 0));
        }
        if n >= 1 {
            let mut vecs = Vec::new();
            vectors_l1(self.rank, n as i64 - 1, &mut Vec::new(), &mut vecs);
            for v in vecs {
                for f in 1..self.finite_part.order {
                    out.push(BaseElement::new(v.clone(), f));
                }
            }
        }
        out.sort_by(BaseGroup::cmp_enum);
        out
    }
}
