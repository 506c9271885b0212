//! Finite groups given by explicit multiplication tables, and embeddings of
//! such groups into vertex groups.

use crate::base::{BaseElement, BaseGroup};
use crate::{Error, Result};
use std::rc::Rc;

/// A finite group as a multiplication table over indices `0..order`, with
/// index 0 the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FiniteGroup {
    pub order: usize,
    pub mul_table: Vec<Vec<usize>>,
    pub inv_table: Vec<usize>,
}

impl FiniteGroup {
    pub fn trivial() -> Self {
        FiniteGroup { order: 1, mul_table: vec![vec![0]], inv_table: vec![0] }
    }

    /// Validates the table: Latin square, identity at index 0, associativity
    /// on all triples, and inverses.
    pub fn from_table(rows: Vec<Vec<usize>>) -> Result<Self> {
        let order = rows.len();
        if order == 0 {
            return Err(Error::validation("finite group table is empty"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != order {
                return Err(Error::validation(format!(
                    "finite group table row {i} has {} entries, expected {order}",
                    row.len()
                )));
            }
            for &v in row {
                if v >= order {
                    return Err(Error::validation(format!(
                        "finite group table row {i} has out-of-range entry {v}"
                    )));
                }
            }
        }
        // identity behaves neutrally
        for (j, row) in rows.iter().enumerate() {
            if rows[0][j] != j || row[0] != j {
                return Err(Error::validation("index 0 is not a two-sided identity"));
            }
        }
        // Latin square
        for i in 0..order {
            let mut seen_row = vec![false; order];
            let mut seen_col = vec![false; order];
            for j in 0..order {
                if seen_row[rows[i][j]] {
                    return Err(Error::validation(format!("row {i} repeats an entry")));
                }
                seen_row[rows[i][j]] = true;
                if seen_col[rows[j][i]] {
                    return Err(Error::validation(format!("column {i} repeats an entry")));
                }
                seen_col[rows[j][i]] = true;
            }
        }
        // associativity, exhaustively
        for a in 0..order {
            for b in 0..order {
                for c in 0..order {
                    if rows[rows[a][b]][c] != rows[a][rows[b][c]] {
                        return Err(Error::validation(format!(
                            "associativity fails on triple ({a},{b},{c})"
                        )));
                    }
                }
            }
        }
        let mut inv_table = vec![usize::MAX; order];
        for a in 0..order {
            for (b, row_b) in rows.iter().enumerate() {
                if rows[a][b] == 0 && row_b[a] == 0 {
                    inv_table[a] = b;
                }
            }
            if inv_table[a] == usize::MAX {
                return Err(Error::validation(format!("element {a} has no inverse")));
            }
        }
        Ok(FiniteGroup { order, mul_table: rows, inv_table })
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.mul_table[a][b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inv_table[a]
    }

    /// Display name for element `i`: `e` for the identity, `a`..`d` for the
    /// next four, then `x<i>`.
    pub fn elem_name(i: usize) -> String {
        match i {
            0 => "e".to_string(),
            1..=4 => ((b'a' + (i - 1) as u8) as char).to_string(),
            _ => format!("x{i}"),
        }
    }

    pub fn elem_index(name: &str) -> Option<usize> {
        match name {
            "e" => Some(0),
            "a" => Some(1),
            "b" => Some(2),
            "c" => Some(3),
            "d" => Some(4),
            _ => name.strip_prefix('x').and_then(|s| s.parse().ok()),
        }
    }
}

/// Codomain of an embedding: either a vertex group or another finite group.
#[derive(Clone, Debug)]
pub enum EmbeddingCodomain {
    Base(Rc<BaseGroup>),
    Finite(Rc<FiniteGroup>),
}

/// An injective homomorphism from a finite group, given by its image table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub domain: Rc<FiniteGroup>,
    pub codomain: EmbeddingCodomain,
    pub base_images: Vec<BaseElement>,
    pub finite_images: Vec<usize>,
}

impl Embedding {
    pub fn into_base(
        domain: Rc<FiniteGroup>,
        codomain: Rc<BaseGroup>,
        images: Vec<BaseElement>,
    ) -> Self {
        Embedding {
            domain,
            codomain: EmbeddingCodomain::Base(codomain),
            base_images: images,
            finite_images: Vec::new(),
        }
    }

    pub fn image(&self, i: usize) -> &BaseElement {
        &self.base_images[i]
    }

    /// Exhaustive homomorphism + injectivity check; images of a finite group
    /// must be torsion, which in `Z^d x F` means a zero vector part.
    pub fn check(&self) -> Result<()> {
        let n = self.domain.order;
        match &self.codomain {
            EmbeddingCodomain::Base(g) => {
                if self.base_images.len() != n {
                    return Err(Error::validation(format!(
                        "embedding lists {} images for a domain of order {n}",
                        self.base_images.len()
                    )));
                }
                for (i, img) in self.base_images.iter().enumerate() {
                    if img.vector.len() != g.rank {
                        return Err(Error::validation(format!(
                            "image of element {i} has rank {} but codomain has rank {}",
                            img.vector.len(),
                            g.rank
                        )));
                    }
                    if img.fin >= g.finite_part.order {
                        return Err(Error::validation(format!(
                            "image of element {i} has out-of-range finite part"
                        )));
                    }
                    if i != 0 && img.vector.iter().any(|&v| v != 0) {
                        return Err(Error::validation(format!(
                            "image of element {i} has infinite order (nonzero vector part)"
                        )));
                    }
                }
                if !self.base_images[0].is_identity() {
                    return Err(Error::validation("identity does not map to the identity"));
                }
                for a in 0..n {
                    for b in 0..n {
                        let lhs = self.base_images[self.domain.mul(a, b)].clone();
                        let rhs = g.mul(&self.base_images[a], &self.base_images[b])?;
                        if lhs != rhs {
                            return Err(Error::validation(format!(
                                "not a homomorphism: images of ({a},{b}) disagree"
                            )));
                        }
                    }
                }
                for a in 0..n {
                    for b in 0..a {
                        if self.base_images[a] == self.base_images[b] {
                            return Err(Error::validation(format!(
                                "not injective: elements {b} and {a} share an image"
                            )));
                        }
                    }
                }
                Ok(())
            }
            EmbeddingCodomain::Finite(g) => {
                if self.finite_images.len() != n {
                    return Err(Error::validation("image list length mismatch"));
                }
                if self.finite_images[0] != 0 {
                    return Err(Error::validation("identity does not map to the identity"));
                }
                for a in 0..n {
                    for b in 0..n {
                        if self.finite_images[self.domain.mul(a, b)]
                            != g.mul(self.finite_images[a], self.finite_images[b])
                        {
                            return Err(Error::validation(format!(
                                "not a homomorphism: images of ({a},{b}) disagree"
                            )));
                        }
                    }
                }
                for a in 0..n {
                    for b in 0..a {
                        if self.finite_images[a] == self.finite_images[b] {
                            return Err(Error::validation(format!(
                                "not injective: elements {b} and {a} share an image"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}
