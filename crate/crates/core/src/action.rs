//! Actions on interned points and the combinators that transform them:
//! translation actions of vertex groups, induced actions along a subgroup,
//! copy stabilization, disjoint unions, and off-diagonal powers, together
//! with the Folner-set producers each of them supports.
//!
//! Guarantees (faithful, infinite orbits, freeness, empty fixed sets) are
//! carried as tags established when a combinator is applied; runtime checks
//! sample-test them but the construction itself is the justification.

use crate::point::{PointId, PointKey, PointTable};
use crate::word::{GroupNode, Nf};
use crate::{Error, Q, Result};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

#[derive(Clone, Debug, Default)]
pub struct Guarantees {
    pub faithful: bool,
    pub infinite_orbits: bool,
    /// The action is free (every nontrivial element moves every point).
    pub free: bool,
    /// Elements certified to act without fixed points.
    pub fix_empty: Vec<Nf>,
    /// Construction steps that granted the tags above, outermost last.
    pub provenance: Vec<String>,
}

/// Exact per-generator symmetric difference counts for a finite set.
#[derive(Clone, Debug)]
pub struct FolnerSet {
    pub points: Vec<PointId>,
    pub counts: Vec<(Nf, u64)>,
}

impl FolnerSet {
    pub fn worst_ratio(&self) -> Q {
        let n = self.points.len() as i64;
        self.counts
            .iter()
            .map(|(_, c)| Q::new(*c as i64, n))
            .max()
            .unwrap_or_else(|| Q::new(0, 1))
    }
}

pub trait Action {
    fn group(&self) -> Rc<GroupNode>;
    fn table(&self) -> Rc<RefCell<PointTable>>;
    /// Applies a group element to a point. May extend lazy state (inner
    /// engines commit on demand), hence `&mut`.
    fn apply(&mut self, g: &Nf, x: PointId) -> PointId;
    /// The `idx`-th point of the canonical deterministic enumeration of the
    /// space.
    fn point_at(&mut self, idx: u64) -> PointId;
    /// A finite set whose exact symmetric-difference ratio is strictly below
    /// `eps` for every listed generator; saturated under the registered
    /// finite subgroup.
    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet>;
    /// Some point moved by `g` (which must be nontrivial).
    fn moved_point(&mut self, g: &Nf) -> Result<PointId>;
    fn guarantees(&self) -> Guarantees;
    /// Registers the finite subgroup whose orbits folner sets must respect.
    fn register_sigma(&mut self, sigma: Vec<Nf>);
    fn sigma(&self) -> Vec<Nf>;
    /// Exact number of fixed points of `g`, when the handle can certify it.
    fn count_fixed(&mut self, g: &Nf) -> Result<u64> {
        if self.group().is_identity(g) {
            return Err(Error::validation("identity fixes everything"));
        }
        if self.guarantees().free || self.guarantees().fix_empty.contains(g) {
            return Ok(0);
        }
        Err(Error::Budget { what: "fixed-point counting on an infinite space".into(), cap: 0 })
    }
}

/// Exact recount of |gC Δ C| for each generator.
pub fn recount(action: &mut dyn Action, gens: &[Nf], set: &[PointId]) -> Vec<(Nf, u64)> {
    let base: HashSet<PointId> = set.iter().copied().collect();
    gens.iter()
        .map(|g| {
            let image: HashSet<PointId> = set.iter().map(|&x| action.apply(g, x)).collect();
            assert_eq!(image.len(), base.len(), "action must be injective on the set");
            let inter = image.intersection(&base).count() as u64;
            (g.clone(), 2 * (base.len() as u64 - inter))
        })
        .collect()
}

fn assert_strict(counts: &[(Nf, u64)], size: usize, eps: Q) {
    for (_, c) in counts {
        assert!(
            Q::new(*c as i64, size as i64) < eps,
            "folner producer returned a set violating its bound"
        );
    }
}

// ---------------------------------------------------------------------------
// translation action
// ---------------------------------------------------------------------------

/// A vertex group acting on itself by left translation. Folner sets are
/// boxes `[0,N)^d x F`, which are invariant under every torsion element, so
/// saturation by any registered finite subgroup is automatic.
pub struct TranslationAction {
    group: Rc<GroupNode>,
    vertex: usize,
    table: Rc<RefCell<PointTable>>,
    sigma_reg: Vec<Nf>,
}

impl TranslationAction {
    pub fn new(group: Rc<GroupNode>, table: Rc<RefCell<PointTable>>) -> Result<Self> {
        let (vertex, base) = match &*group {
            GroupNode::Leaf { vertex, group } => (*vertex, group.clone()),
            _ => return Err(Error::validation("translation action needs a vertex group")),
        };
        if !base.is_infinite() {
            return Err(Error::validation(
                "translation action rejected: finite vertex group has no infinite orbits \
                 (finite vertex stabilizers make the group virtually free)",
            ));
        }
        Ok(TranslationAction { group, vertex, table, sigma_reg: Vec::new() })
    }

    fn base(&self) -> Rc<crate::base::BaseGroup> {
        match &*self.group {
            GroupNode::Leaf { group, .. } => group.clone(),
            _ => unreachable!(),
        }
    }

    fn intern(&self, e: crate::base::BaseElement) -> PointId {
        self.table.borrow_mut().intern(PointKey::Base { vertex: self.vertex, elem: e })
    }

    fn box_points(&self, n: i64) -> Vec<PointId> {
        let base = self.base();
        let mut out = Vec::new();
        let d = base.rank;
        let mut v = vec![0i64; d];
        loop {
            for f in 0..base.finite_part.order {
                out.push(self.intern(crate::base::BaseElement::new(v.clone(), f)));
            }
            // odometer over [0,n)^d
            let mut i = 0;
            loop {
                if i == d {
                    return out;
                }
                v[i] += 1;
                if v[i] < n {
                    break;
                }
                v[i] = 0;
                i += 1;
            }
        }
    }
}

impl Action for TranslationAction {
    fn group(&self) -> Rc<GroupNode> {
        self.group.clone()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let ge = match g {
            Nf::Leaf(e) => e,
            _ => panic!("element does not belong to the vertex group"),
        };
        let key = self.table.borrow().key(x).clone();
        let xe = match key {
            PointKey::Base { vertex, elem } if vertex == self.vertex => elem,
            other => panic!("foreign point {other:?} for translation action"),
        };
        let prod = self.base().mul(ge, &xe).expect("same group");
        self.intern(prod)
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        let e = self.base().enumerate_at(idx).expect("infinite vertex group");
        self.intern(e)
    }

    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet> {
        // least N with strict ratio < eps for every generator; the pass
        // region is upward closed in N, so double then binary search
        let check = |me: &mut Self, n: i64| -> Option<FolnerSet> {
            let points = me.box_points(n);
            let counts = recount(me, gens, &points);
            let size = points.len() as i64;
            if counts.iter().all(|(_, c)| Q::new(*c as i64, size) < eps) {
                Some(FolnerSet { points, counts })
            } else {
                None
            }
        };
        let mut hi = 1i64;
        let mut found = loop {
            if let Some(fs) = check(self, hi) {
                break fs;
            }
            hi *= 2;
            if hi > 1 << 24 {
                return Err(Error::Budget { what: "translation folner box".into(), cap: 1 << 24 });
            }
        };
        let mut lo = hi / 2; // lo fails (or is 0), hi passes
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            match check(self, mid) {
                Some(fs) => {
                    hi = mid;
                    found = fs;
                }
                None => lo = mid,
            }
        }
        Ok(found)
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        if self.group.is_identity(g) {
            return Err(Error::validation("identity moves nothing"));
        }
        // translation is free: the identity point always moves
        Ok(self.point_at(0))
    }

    fn guarantees(&self) -> Guarantees {
        Guarantees {
            faithful: true,
            infinite_orbits: true,
            free: true,
            fix_empty: Vec::new(),
            provenance: vec!["left translation of an infinite group".into()],
        }
    }

    fn register_sigma(&mut self, sigma: Vec<Nf>) {
        for s in &sigma {
            if let Nf::Leaf(e) = s {
                assert!(
                    e.vector.iter().all(|&v| v == 0),
                    "registered subgroup must be torsion"
                );
            }
        }
        self.sigma_reg = sigma;
    }

    fn sigma(&self) -> Vec<Nf> {
        self.sigma_reg.clone()
    }

    fn count_fixed(&mut self, g: &Nf) -> Result<u64> {
        if self.group.is_identity(g) {
            return Err(Error::validation("identity fixes everything"));
        }
        Ok(0)
    }
}

// ---------------------------------------------------------------------------
// induced action
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubMarker {
    HnnBase,
    AmSide(u8),
}

/// The induced action of the full group on classes `[y, rep]`, built from an
/// action of the distinguished subgroup of one HNN or amalgam step.
pub struct InducedAction {
    pub base: Box<dyn Action>,
    group: Rc<GroupNode>,
    pub marker: SubMarker,
    step: u32,
    table: Rc<RefCell<PointTable>>,
    sigma_reg: Vec<Nf>,
    rep_stream: Vec<Rc<Nf>>,
    rep_scan_next: u64,
}

impl InducedAction {
    pub fn new(base: Box<dyn Action>, group: Rc<GroupNode>, marker: SubMarker, step: u32) -> Self {
        let table = base.table();
        InducedAction {
            base,
            group,
            marker,
            step,
            table,
            sigma_reg: Vec::new(),
            rep_stream: Vec::new(),
            rep_scan_next: 0,
        }
    }

    fn sub_tag(&self) -> u8 {
        match self.marker {
            SubMarker::HnnBase => 0,
            SubMarker::AmSide(s) => s + 1,
        }
    }

    /// Membership of a full-group element in the distinguished subgroup,
    /// returned as an element of the base group.
    pub fn down(&self, g: &Nf) -> Option<Nf> {
        match self.marker {
            SubMarker::HnnBase => self.group.hnn_down(g),
            SubMarker::AmSide(s) => self.group.am_down(s, g),
        }
    }

    pub fn up(&self, h: &Nf) -> Nf {
        match self.marker {
            SubMarker::HnnBase => self.group.embed_base(h),
            SubMarker::AmSide(s) => self.group.embed_factor(s, h),
        }
    }

    pub fn coset_rep(&self, g: &Nf) -> Nf {
        match self.marker {
            SubMarker::HnnBase => self.group.rep_coset_hnn(g),
            SubMarker::AmSide(s) => self.group.rep_coset_am(s, g),
        }
    }

    fn is_rep(&self, g: &Nf) -> bool {
        self.coset_rep(g) == *g
    }

    pub fn intern_class(&mut self, y: PointId, rep: Rc<Nf>) -> PointId {
        self.table
            .borrow_mut()
            .intern(PointKey::Induced { step: self.step, sub: self.sub_tag(), y, rep })
    }

    /// The equivariant embedded copy `y -> [y, 1]`.
    pub fn embed_point(&mut self, y: PointId) -> PointId {
        let rep = Rc::new(self.group.identity());
        self.intern_class(y, rep)
    }

    fn rep_at(&mut self, idx: u64) -> Rc<Nf> {
        while self.rep_stream.len() <= idx as usize {
            let cand = self
                .group
                .enum_at(self.rep_scan_next)
                .expect("composed groups are infinite");
            self.rep_scan_next += 1;
            if self.is_rep(&cand) {
                self.rep_stream.push(Rc::new(cand));
            }
        }
        self.rep_stream[idx as usize].clone()
    }
}

fn cantor_unpair(z: u64) -> (u64, u64) {
    // inverse of z = (a+b)(a+b+1)/2 + a
    let w = ((8 * z + 1) as f64).sqrt() as u64;
    let w = w.div_ceil(2);
    let w = if w * (w + 1) / 2 > z { w - 1 } else { w };
    let a = z - w * (w + 1) / 2;
    (a, w - a)
}

impl Action for InducedAction {
    fn group(&self) -> Rc<GroupNode> {
        self.group.clone()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let (y, rep) = match self.table.borrow().key(x) {
            PointKey::Induced { step, sub, y, rep }
                if *step == self.step && *sub == self.sub_tag() =>
            {
                (*y, rep.clone())
            }
            other => panic!("foreign point {other:?} for induced action"),
        };
        // [y, rep] . g = [y, rep g^-1], renormalized to a canonical pair
        let v = self.group.mul(&rep, &self.group.inv(g));
        let r2 = self.coset_rep(&v);
        let h_full = self.group.mul(&v, &self.group.inv(&r2));
        let h = self
            .down(&h_full)
            .expect("renormalization failure: quotient residue left the subgroup");
        let base_group = self.base.group();
        let y2 = self.base.apply(&base_group.inv(&h), y);
        self.intern_class(y2, Rc::new(r2))
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        let (a, b) = cantor_unpair(idx);
        let rep = self.rep_at(a);
        let y = self.base.point_at(b);
        self.intern_class(y, rep)
    }

    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet> {
        // Folner sets of the subgroup action embed equivariantly along
        // y -> [y, 1], so delegate and re-wrap.
        let mut base_gens = Vec::with_capacity(gens.len());
        for g in gens {
            base_gens.push(self.down(g).ok_or_else(|| {
                Error::validation("folner generators must lie in the distinguished subgroup")
            })?);
        }
        let inner = self.base.folner(&base_gens, eps)?;
        let points: Vec<PointId> =
            inner.points.iter().map(|&y| self.embed_point(y)).collect();
        let counts = recount(self, gens, &points);
        assert_strict(&counts, points.len(), eps);
        Ok(FolnerSet { points, counts })
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        if self.group.is_identity(g) {
            return Err(Error::validation("identity moves nothing"));
        }
        match self.down(g) {
            None => {
                // g is outside the subgroup, so it moves [y, 1] to a class
                // with a different representative
                let y = self.base.point_at(0);
                let x = self.embed_point(y);
                debug_assert_ne!(self.apply(g, x), x);
                Ok(x)
            }
            Some(h) => {
                let y = self.base.moved_point(&h)?;
                let x = self.embed_point(y);
                debug_assert_ne!(self.apply(g, x), x);
                Ok(x)
            }
        }
    }

    fn guarantees(&self) -> Guarantees {
        let inner = self.base.guarantees();
        let mut provenance = inner.provenance;
        provenance.push("induced along the step subgroup".into());
        Guarantees {
            faithful: inner.faithful,
            // finite edge groups make the subgroup almost malnormal, which
            // keeps subgroup orbits infinite on the induced space
            infinite_orbits: inner.infinite_orbits,
            free: false,
            fix_empty: inner.fix_empty.iter().map(|h| self.up(h)).collect(),
            provenance,
        }
    }

    fn register_sigma(&mut self, sigma: Vec<Nf>) {
        let down: Vec<Nf> = sigma
            .iter()
            .map(|s| self.down(s).expect("saturation subgroup must lie in the step subgroup"))
            .collect();
        self.base.register_sigma(down);
        self.sigma_reg = sigma;
    }

    fn sigma(&self) -> Vec<Nf> {
        self.sigma_reg.clone()
    }
}

// ---------------------------------------------------------------------------
// copy stabilization
// ---------------------------------------------------------------------------

/// The copy-preserving action on `Y x N`.
pub struct StabilizedAction {
    pub base: Box<dyn Action>,
    table: Rc<RefCell<PointTable>>,
}

impl StabilizedAction {
    pub fn new(base: Box<dyn Action>) -> Self {
        let table = base.table();
        StabilizedAction { base, table }
    }

    pub fn lift(&mut self, y: PointId, n: u32) -> PointId {
        self.table.borrow_mut().intern(PointKey::Copy { y, n })
    }
}

impl Action for StabilizedAction {
    fn group(&self) -> Rc<GroupNode> {
        self.base.group()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let (y, n) = self.table.borrow().copy_parts(x);
        let y2 = self.base.apply(g, y);
        self.lift(y2, n)
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        let (n, i) = cantor_unpair(idx);
        let y = self.base.point_at(i);
        self.lift(y, n as u32)
    }

    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet> {
        let inner = self.base.folner(gens, eps)?;
        let points: Vec<PointId> = inner.points.iter().map(|&y| self.lift(y, 0)).collect();
        let counts = recount(self, gens, &points);
        assert_strict(&counts, points.len(), eps);
        Ok(FolnerSet { points, counts })
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        let y = self.base.moved_point(g)?;
        Ok(self.lift(y, 0))
    }

    fn guarantees(&self) -> Guarantees {
        let inner = self.base.guarantees();
        let mut provenance = inner.provenance;
        provenance.push("copy-preserving stabilization".into());
        Guarantees { provenance, ..inner }
    }

    fn register_sigma(&mut self, sigma: Vec<Nf>) {
        self.base.register_sigma(sigma);
    }

    fn sigma(&self) -> Vec<Nf> {
        self.base.sigma()
    }
}

// ---------------------------------------------------------------------------
// disjoint union
// ---------------------------------------------------------------------------

/// Two actions of the same group, glued on tagged points.
pub struct UnionAction {
    pub left: Box<dyn Action>,
    pub right: Box<dyn Action>,
    table: Rc<RefCell<PointTable>>,
}

impl UnionAction {
    pub fn new(left: Box<dyn Action>, right: Box<dyn Action>) -> Result<Self> {
        if !Rc::ptr_eq(&left.group(), &right.group()) {
            return Err(Error::validation("disjoint union requires actions of the same group"));
        }
        let table = left.table();
        Ok(UnionAction { left, right, table })
    }

    pub fn tag(&mut self, tag: u8, y: PointId) -> PointId {
        self.table.borrow_mut().intern(PointKey::Side { tag, y })
    }
}

impl Action for UnionAction {
    fn group(&self) -> Rc<GroupNode> {
        self.left.group()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let (tag, y) = match self.table.borrow().key(x) {
            PointKey::Side { tag, y } => (*tag, *y),
            other => panic!("foreign point {other:?} for union action"),
        };
        let y2 = if tag == 1 { self.left.apply(g, y) } else { self.right.apply(g, y) };
        self.tag(tag, y2)
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        let side = (idx % 2) as u8 + 1;
        let sub = idx / 2;
        let y = if side == 1 { self.left.point_at(sub) } else { self.right.point_at(sub) };
        self.tag(side, y)
    }

    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet> {
        // a Folner set on either side works for the union
        let inner = self.left.folner(gens, eps)?;
        let points: Vec<PointId> = inner.points.iter().map(|&y| self.tag(1, y)).collect();
        let counts = recount(self, gens, &points);
        assert_strict(&counts, points.len(), eps);
        Ok(FolnerSet { points, counts })
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        match self.left.moved_point(g) {
            Ok(y) => Ok(self.tag(1, y)),
            Err(_) => {
                let y = self.right.moved_point(g)?;
                Ok(self.tag(2, y))
            }
        }
    }

    fn guarantees(&self) -> Guarantees {
        let l = self.left.guarantees();
        let r = self.right.guarantees();
        let mut fix_empty = Vec::new();
        // an element must avoid fixed points on both sides
        for h in &l.fix_empty {
            if r.fix_empty.contains(h) || r.free {
                fix_empty.push(h.clone());
            }
        }
        if l.free {
            for h in &r.fix_empty {
                if !fix_empty.contains(h) {
                    fix_empty.push(h.clone());
                }
            }
        }
        let mut provenance = l.provenance;
        provenance.push("disjoint union".into());
        Guarantees {
            faithful: l.faithful || r.faithful,
            infinite_orbits: l.infinite_orbits && r.infinite_orbits,
            free: l.free && r.free,
            fix_empty,
            provenance,
        }
    }

    fn register_sigma(&mut self, sigma: Vec<Nf>) {
        self.left.register_sigma(sigma.clone());
        self.right.register_sigma(sigma);
    }

    fn sigma(&self) -> Vec<Nf> {
        self.left.sigma()
    }
}

// ---------------------------------------------------------------------------
// off-diagonal power
// ---------------------------------------------------------------------------

/// The diagonal action on m-tuples with pairwise distinct entries.
pub struct OffDiagAction {
    pub base: Box<dyn Action>,
    pub m: usize,
    table: Rc<RefCell<PointTable>>,
}

impl OffDiagAction {
    pub fn new(base: Box<dyn Action>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::validation("off-diagonal power needs m >= 1"));
        }
        let table = base.table();
        Ok(OffDiagAction { base, m, table })
    }

    fn tuple(&mut self, ids: Vec<PointId>) -> PointId {
        debug_assert!(all_distinct(&ids), "tuple entries must be pairwise distinct");
        self.table.borrow_mut().intern(PointKey::Tuple(ids))
    }

    /// All off-diagonal m-tuples over a window of base points.
    pub fn tuples_over(&mut self, window: &[PointId]) -> Vec<PointId> {
        let mut out = Vec::new();
        let m = self.m;
        let mut idx = vec![0usize; m];
        'outer: loop {
            let ids: Vec<PointId> = idx.iter().map(|&i| window[i]).collect();
            if all_distinct(&ids) {
                out.push(self.tuple(ids));
            }
            let mut k = 0;
            loop {
                if k == m {
                    break 'outer;
                }
                idx[k] += 1;
                if idx[k] < window.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
        out
    }
}

fn all_distinct(ids: &[PointId]) -> bool {
    for i in 0..ids.len() {
        for j in 0..i {
            if ids[i] == ids[j] {
                return false;
            }
        }
    }
    true
}

impl Action for OffDiagAction {
    fn group(&self) -> Rc<GroupNode> {
        self.base.group()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let ids = match self.table.borrow().key(x) {
            PointKey::Tuple(ids) => ids.clone(),
            other => panic!("foreign point {other:?} for off-diagonal action"),
        };
        let ids: Vec<PointId> = ids.iter().map(|&y| self.base.apply(g, y)).collect();
        self.tuple(ids)
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        // walk windows [0, w) and enumerate the tuples that use the newest
        // base point, so every off-diagonal tuple appears exactly once
        let m = self.m;
        let mut seen = 0u64;
        let mut w = m as u64;
        loop {
            let window: Vec<PointId> = (0..w).map(|i| self.base.point_at(i)).collect();
            let fresh = window[w as usize - 1];
            let tuples = self.tuples_over(&window);
            let mut fresh_tuples = Vec::new();
            for t in tuples {
                let uses_fresh = match self.table.borrow().key(t) {
                    PointKey::Tuple(ids) => ids.contains(&fresh),
                    _ => unreachable!(),
                };
                if uses_fresh {
                    fresh_tuples.push(t);
                }
            }
            if idx < seen + fresh_tuples.len() as u64 {
                return fresh_tuples[(idx - seen) as usize];
            }
            seen += fresh_tuples.len() as u64;
            w += 1;
        }
    }

    fn folner(&mut self, gens: &[Nf], eps: Q) -> Result<FolnerSet> {
        // product sets minus the large diagonal; the diagonal loss is at most
        // m(m-1)/2 |C|^{m-1}, so growing |C| wins
        let m = self.m as i64;
        let mut min_size = 2 * self.m as u64;
        loop {
            let inner = folner_grow(self.base.as_mut(), gens, eps / (4 * m), min_size)?;
            let points = self.tuples_over(&inner.points);
            if !points.is_empty() {
                let counts = recount(self, gens, &points);
                let size = points.len() as i64;
                if counts.iter().all(|(_, c)| Q::new(*c as i64, size) < eps) {
                    return Ok(FolnerSet { points, counts });
                }
            }
            min_size *= 2;
            if min_size > crate::budget_cap() {
                return Err(Error::Budget {
                    what: "off-diagonal folner growth".into(),
                    cap: crate::budget_cap(),
                });
            }
        }
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        let y = self.base.moved_point(g)?;
        let mut ids = vec![y];
        let mut i = 0;
        while ids.len() < self.m {
            let cand = self.base.point_at(i);
            if !ids.contains(&cand) {
                ids.push(cand);
            }
            i += 1;
        }
        Ok(self.tuple(ids))
    }

    fn guarantees(&self) -> Guarantees {
        let inner = self.base.guarantees();
        let mut provenance = inner.provenance;
        provenance.push(format!("off-diagonal power m={}", self.m));
        Guarantees {
            faithful: inner.faithful,
            infinite_orbits: inner.infinite_orbits,
            free: inner.free,
            fix_empty: inner.fix_empty,
            provenance,
        }
    }

    fn register_sigma(&mut self, sigma: Vec<Nf>) {
        self.base.register_sigma(sigma);
    }

    fn sigma(&self) -> Vec<Nf> {
        self.base.sigma()
    }
}

// ---------------------------------------------------------------------------
// finite permutation model (testing and upgrade examples)
// ---------------------------------------------------------------------------

/// A finite group acting by explicit permutations on `0..n`. Used as a desk
/// model for fixed-point counting and off-diagonal upgrades.
pub struct FinitePermAction {
    group: Rc<GroupNode>,
    vertex: usize,
    n: usize,
    perms: Vec<Vec<usize>>,
    table: Rc<RefCell<PointTable>>,
}

impl FinitePermAction {
    /// `perms[f]` is the permutation of the finite-part element with index
    /// `f`; index 0 must be the identity permutation.
    pub fn new(
        group: Rc<GroupNode>,
        perms: Vec<Vec<usize>>,
        table: Rc<RefCell<PointTable>>,
        vertex: usize,
    ) -> Result<Self> {
        let n = perms.first().map(|p| p.len()).unwrap_or(0);
        if n == 0 || perms.iter().any(|p| p.len() != n) {
            return Err(Error::validation("permutation table must be rectangular"));
        }
        Ok(FinitePermAction { group, vertex, n, perms, table })
    }

    fn intern(&self, k: usize) -> PointId {
        self.table.borrow_mut().intern(PointKey::Base {
            vertex: self.vertex,
            elem: crate::base::BaseElement::new(vec![k as i64], 0),
        })
    }

    fn decode(&self, x: PointId) -> usize {
        match self.table.borrow().key(x) {
            PointKey::Base { vertex, elem } if *vertex == self.vertex => elem.vector[0] as usize,
            other => panic!("foreign point {other:?} for finite model"),
        }
    }
}

impl Action for FinitePermAction {
    fn group(&self) -> Rc<GroupNode> {
        self.group.clone()
    }

    fn table(&self) -> Rc<RefCell<PointTable>> {
        self.table.clone()
    }

    fn apply(&mut self, g: &Nf, x: PointId) -> PointId {
        let f = match g {
            Nf::Leaf(e) => e.fin,
            _ => panic!("finite model acts through its finite part"),
        };
        let k = self.decode(x);
        self.intern(self.perms[f][k])
    }

    fn point_at(&mut self, idx: u64) -> PointId {
        self.intern(idx as usize % self.n)
    }

    fn folner(&mut self, gens: &[Nf], _eps: Q) -> Result<FolnerSet> {
        // the whole finite set is exactly invariant
        let points: Vec<PointId> = (0..self.n).map(|k| self.intern(k)).collect();
        let counts = recount(self, gens, &points);
        Ok(FolnerSet { points, counts })
    }

    fn moved_point(&mut self, g: &Nf) -> Result<PointId> {
        for k in 0..self.n {
            let x = self.intern(k);
            if self.apply(g, x) != x {
                return Ok(x);
            }
        }
        Err(Error::validation("element acts trivially on the finite model"))
    }

    fn guarantees(&self) -> Guarantees {
        Guarantees {
            faithful: false,
            infinite_orbits: false,
            free: false,
            fix_empty: Vec::new(),
            provenance: vec!["finite permutation model".into()],
        }
    }

    fn register_sigma(&mut self, _sigma: Vec<Nf>) {}

    fn sigma(&self) -> Vec<Nf> {
        Vec::new()
    }

    fn count_fixed(&mut self, g: &Nf) -> Result<u64> {
        let mut count = 0;
        for k in 0..self.n {
            let x = self.intern(k);
            if self.apply(g, x) == x {
                count += 1;
            }
        }
        Ok(count)
    }
}

// ---------------------------------------------------------------------------
// folner growth and sizing
// ---------------------------------------------------------------------------

/// A Folner set of size at least `min_size` with worst ratio strictly below
/// `eps`, built by unioning sets at geometrically shrinking tolerances: the
/// symmetric difference of a union is covered by the union of the symmetric
/// differences, so the combined ratio stays below the sum of tolerances.
pub fn folner_grow(
    action: &mut dyn Action,
    gens: &[Nf],
    eps: Q,
    min_size: u64,
) -> Result<FolnerSet> {
    if !action.guarantees().infinite_orbits {
        return Err(Error::validation("folner growth needs the infinite-orbit guarantee"));
    }
    let mut points: Vec<PointId> = Vec::new();
    let mut have: HashSet<PointId> = HashSet::new();
    let mut slice_eps = eps / 2;
    let mut rounds = 0;
    loop {
        let piece = action.folner(gens, slice_eps)?;
        for p in piece.points {
            if have.insert(p) {
                points.push(p);
            }
        }
        if points.len() as u64 >= min_size {
            let counts = recount(action, gens, &points);
            let size = points.len() as i64;
            if counts.iter().all(|(_, c)| Q::new(*c as i64, size) < eps) {
                return Ok(FolnerSet { points, counts });
            }
        }
        slice_eps /= 2;
        rounds += 1;
        if rounds > 64 {
            return Err(Error::Budget { what: "folner growth".into(), cap: 64 });
        }
    }
}

/// Witness of the copy-stacking construction: `q` disjoint copies of a
/// `(1/k, F)`-Folner set of `Y`, sized against the target sequence so that
/// `1 <= a(n_k) / |C| < 1 + 2/k`.
#[derive(Clone, Debug)]
pub struct SizedFolner {
    pub n_index: u64,
    pub target: i64,
    pub q: u64,
    pub base_set: Vec<PointId>,
    pub base_counts: Vec<(Nf, u64)>,
    pub points: Vec<PointId>,
}

impl SizedFolner {
    pub fn size_ratio(&self) -> Q {
        Q::new(self.target, self.points.len() as i64)
    }
}

/// Core of the sizing construction; `copies` must provide at least `q` fresh
/// copy indices (the caller decides which indices are fresh).
pub fn folner_sized(
    action: &mut dyn Action,
    gens: &[Nf],
    k: u64,
    a: &dyn Fn(u64) -> i64,
    min_n: u64,
    table: &Rc<RefCell<PointTable>>,
    mut next_copy: impl FnMut() -> u32,
) -> Result<SizedFolner> {
    assert!(k >= 1);
    let base = action.folner(gens, Q::new(1, k as i64))?;
    let d = base.points.len() as u64;
    let mut n = min_n.max(1);
    let cap = crate::budget_cap();
    while (a(n).max(0) as u64) < k * d {
        n += 1;
        if n > cap {
            return Err(Error::Budget { what: "sizing index search".into(), cap });
        }
    }
    let target = a(n);
    let q = target as u64 / d;
    debug_assert!(q >= k);
    let mut points = Vec::with_capacity((q * d) as usize);
    for _ in 0..q {
        let c = next_copy();
        for &y in &base.points {
            points.push(table.borrow_mut().intern(PointKey::Copy { y, n: c }));
        }
    }
    Ok(SizedFolner { n_index: n, target, q, base_set: base.points, base_counts: base.counts, points })
}

/// Upgrades an almost free action to one with empty fixed sets for every
/// element of `bad`: take the off-diagonal power with exponent one more than
/// the largest fixed-point count.
pub fn upgrade_almost_free(
    action: Box<dyn Action>,
    bad: &[Nf],
) -> Result<(Box<dyn Action>, usize)> {
    let mut action = action;
    let group = action.group();
    if bad.is_empty() || action.guarantees().free {
        return Ok((action, 1));
    }
    let mut max_fix = 0u64;
    for g in bad {
        if group.is_identity(g) {
            return Err(Error::validation("the excluded set must not contain the identity"));
        }
        max_fix = max_fix.max(action.count_fixed(g)?);
    }
    let m = (max_fix + 1) as usize;
    if m == 1 {
        return Ok((action, 1));
    }
    let off = OffDiagAction::new(action, m)?;
    Ok((Box::new(off), m))
}
