//! Independent certificate verification. The verifier rebuilds the group
//! structure from the input file and re-evaluates every certificate against
//! the serialized point table and commitment log alone: reference actions are
//! recomputed from the induced-action formulas, `w` is a plain lookup, and a
//! missing log entry is a certificate failure, never a lazy extension.

use crate::cert::{parse_cert, resolve_word, ParsedCert};
use crate::composer::{build_run, plan, Plan};
use crate::engine::{FaithfulCert, FolnerCert, TransitiveCert};
use crate::fnv::digest_hex;
use crate::graph::GraphOfGroups;
use crate::manifest::{parse_wlog, render_run, Manifest, WlogData};
use crate::point::{PointId, PointKey, PointTable};
use crate::word::{parse_word, GroupNode, Nf};
use crate::{Error, Q, Result};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::rc::Rc;

#[derive(Clone, Debug)]
pub enum ChildRef {
    Leaf(usize),
    Step(usize),
}

#[derive(Clone, Debug)]
pub enum VKind {
    Hnn { sigma_dom: Vec<Nf>, sigma_cod: Vec<Nf> },
    Am { sigma: Vec<Nf> },
}

pub struct VStep {
    pub node: Rc<GroupNode>,
    pub kind: VKind,
    pub children: Vec<ChildRef>,
}

/// Rebuilds the step table (group nodes, subgroup data, child links) from the
/// graph and plan, mirroring the composer's construction order exactly but
/// with no engines attached.
pub fn verify_steps(g: &GraphOfGroups, p: &Plan) -> Result<(Rc<GroupNode>, Vec<VStep>)> {
    let mut steps: Vec<VStep> = Vec::new();
    let (node, _) = build_nodes(g, p, &mut steps)?;
    Ok((node, steps))
}

fn build_nodes(
    g: &GraphOfGroups,
    p: &Plan,
    steps: &mut Vec<VStep>,
) -> Result<(Rc<GroupNode>, ChildRef)> {
    match p {
        Plan::Leaf { vertex } => {
            let group = g.vertex(*vertex).group.clone();
            Ok((Rc::new(GroupNode::Leaf { vertex: *vertex, group }), ChildRef::Leaf(*vertex)))
        }
        Plan::Hnn { edge, base } => {
            let (bnode, child) = build_nodes(g, base, steps)?;
            let e = g.edge(*edge);
            let dom_imgs: Vec<Nf> = e
                .r_images
                .iter()
                .map(|i| bnode.embed_vertex(e.to, i).expect("vertex in sub-plan"))
                .collect();
            let cod_imgs: Vec<Nf> = e
                .s_images
                .iter()
                .map(|i| bnode.embed_vertex(e.from, i).expect("vertex in sub-plan"))
                .collect();
            let node = Rc::new(GroupNode::Hnn {
                edge: *edge,
                base: bnode,
                sigma: e.sigma.clone(),
                dom_imgs: dom_imgs.clone(),
                cod_imgs: cod_imgs.clone(),
            });
            let sigma_dom: Vec<Nf> = dom_imgs.iter().map(|i| node.embed_base(i)).collect();
            let sigma_cod: Vec<Nf> = cod_imgs.iter().map(|i| node.embed_base(i)).collect();
            let id = steps.len();
            steps.push(VStep {
                node: node.clone(),
                kind: VKind::Hnn { sigma_dom, sigma_cod },
                children: vec![child],
            });
            Ok((node, ChildRef::Step(id)))
        }
        Plan::Am { edge, left, right } => {
            let (lnode, lchild) = build_nodes(g, left, steps)?;
            let (rnode, rchild) = build_nodes(g, right, steps)?;
            let e = g.edge(*edge);
            let left_imgs: Vec<Nf> = e
                .s_images
                .iter()
                .map(|i| lnode.embed_vertex(e.from, i).expect("vertex in left component"))
                .collect();
            let right_imgs: Vec<Nf> = e
                .r_images
                .iter()
                .map(|i| rnode.embed_vertex(e.to, i).expect("vertex in right component"))
                .collect();
            let node = Rc::new(GroupNode::Am {
                edge: *edge,
                left: lnode,
                right: rnode,
                sigma: e.sigma.clone(),
                left_imgs,
                right_imgs,
            });
            let sigma: Vec<Nf> =
                (0..e.sigma.order).map(|i| Nf::Am { letters: Vec::new(), tail: i }).collect();
            let id = steps.len();
            steps.push(VStep {
                node: node.clone(),
                kind: VKind::Am { sigma },
                children: vec![lchild, rchild],
            });
            Ok((node, ChildRef::Step(id)))
        }
    }
}

pub struct VerifyCtx {
    pub steps: Vec<VStep>,
    pub table: PointTable,
    pub fwd: Vec<HashMap<PointId, PointId>>,
    pub bwd: Vec<HashMap<PointId, PointId>>,
}

impl VerifyCtx {
    pub fn new(g: &GraphOfGroups, p: &Plan, wlog_text: &str) -> Result<VerifyCtx> {
        let (_, steps) = verify_steps(g, p)?;
        let data: WlogData = parse_wlog(wlog_text, &|step, _sub, word| {
            let s = steps
                .get(step as usize)
                .ok_or_else(|| Error::validation(format!("wlog references step {step}")))?;
            resolve_word(&s.node, word)
        })?;
        if data.logs.len() != steps.len() {
            return Err(Error::validation("wlog step count does not match the plan"));
        }
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for log in &data.logs {
            let mut f = HashMap::new();
            let mut b = HashMap::new();
            for &(d, r) in log {
                if f.insert(d, r).is_some() || b.insert(r, d).is_some() {
                    return Err(Error::cert("wlog", format!("duplicate entry at ({d},{r})")));
                }
            }
            fwd.push(f);
            bwd.push(b);
        }
        Ok(VerifyCtx { steps, table: data.table, fwd, bwd })
    }

    fn lookup(&self, key: PointKey) -> Result<PointId> {
        self.table.lookup(&key).ok_or_else(|| {
            Error::cert("evaluation", "reached a point outside the logged universe")
        })
    }

    fn w(&self, step: usize, x: PointId, forward: bool) -> Result<PointId> {
        let map = if forward { &self.fwd[step] } else { &self.bwd[step] };
        map.get(&x).copied().ok_or_else(|| {
            Error::cert("wlog", format!("step {step}: w undefined at point {x}"))
        })
    }

    /// Reference action of the full step group on an ambient (copy) point.
    pub fn ref_apply(&self, step: usize, g: &Nf, x: PointId) -> Result<PointId> {
        let (y, n) = match self.table.key(x) {
            PointKey::Copy { y, n } => (*y, *n),
            other => {
                return Err(Error::cert(
                    "evaluation",
                    format!("expected an ambient copy point, got {other:?}"),
                ))
            }
        };
        let y2 = self.y_apply(step, g, y)?;
        self.lookup(PointKey::Copy { y: y2, n })
    }

    fn y_apply(&self, step: usize, g: &Nf, y: PointId) -> Result<PointId> {
        match &self.steps[step].kind {
            VKind::Hnn { .. } => self.induced_apply(step, 0, 0, g, y),
            VKind::Am { .. } => {
                let (tag, inner) = match self.table.key(y) {
                    PointKey::Side { tag, y } => (*tag, *y),
                    other => {
                        return Err(Error::cert(
                            "evaluation",
                            format!("expected a side point, got {other:?}"),
                        ))
                    }
                };
                let moved = self.induced_apply(step, tag, (tag - 1) as usize, g, inner)?;
                self.lookup(PointKey::Side { tag, y: moved })
            }
        }
    }

    fn induced_apply(
        &self,
        step: usize,
        sub: u8,
        child_idx: usize,
        g: &Nf,
        y: PointId,
    ) -> Result<PointId> {
        let node = &self.steps[step].node;
        let (y0, rep) = match self.table.key(y) {
            PointKey::Induced { step: s, sub: su, y, rep }
                if *s == step as u32 && *su == sub =>
            {
                (*y, rep.clone())
            }
            other => {
                return Err(Error::cert(
                    "evaluation",
                    format!("expected an induced point of step {step}/{sub}, got {other:?}"),
                ))
            }
        };
        let v = node.mul(&rep, &node.inv(g));
        let (r2, h) = match &self.steps[step].kind {
            VKind::Hnn { .. } => {
                let r2 = node.rep_coset_hnn(&v);
                let hh = node.mul(&v, &node.inv(&r2));
                let h = node
                    .hnn_down(&hh)
                    .ok_or_else(|| Error::cert("evaluation", "renormalization failure"))?;
                (r2, h)
            }
            VKind::Am { .. } => {
                let side = sub - 1;
                let r2 = node.rep_coset_am(side, &v);
                let hh = node.mul(&v, &node.inv(&r2));
                let h = node
                    .am_down(side, &hh)
                    .ok_or_else(|| Error::cert("evaluation", "renormalization failure"))?;
                (r2, h)
            }
        };
        let child = &self.steps[step].children[child_idx];
        let child_node = self.child_node(step, child_idx);
        let y02 = self.child_apply(child, &child_node, &child_node.inv(&h), y0)?;
        self.lookup(PointKey::Induced { step: step as u32, sub, y: y02, rep: Rc::new(r2) })
    }

    fn child_node(&self, step: usize, child_idx: usize) -> Rc<GroupNode> {
        let node = &self.steps[step].node;
        match &**node {
            GroupNode::Hnn { base, .. } => base.clone(),
            GroupNode::Am { left, right, .. } => {
                if child_idx == 0 {
                    left.clone()
                } else {
                    right.clone()
                }
            }
            GroupNode::Leaf { .. } => unreachable!(),
        }
    }

    fn child_apply(
        &self,
        child: &ChildRef,
        child_node: &GroupNode,
        h: &Nf,
        y: PointId,
    ) -> Result<PointId> {
        match child {
            ChildRef::Leaf(v) => {
                let group = match child_node {
                    GroupNode::Leaf { group, .. } => group.clone(),
                    _ => return Err(Error::cert("evaluation", "plan child mismatch")),
                };
                let he = match h {
                    Nf::Leaf(e) => e,
                    _ => return Err(Error::cert("evaluation", "leaf element expected")),
                };
                let elem = match self.table.key(y) {
                    PointKey::Base { vertex, elem } if vertex == v => elem.clone(),
                    other => {
                        return Err(Error::cert(
                            "evaluation",
                            format!("expected a vertex point of v{v}, got {other:?}"),
                        ))
                    }
                };
                let prod = group
                    .mul(he, &elem)
                    .map_err(|e| Error::cert("evaluation", format!("{e}")))?;
                self.lookup(PointKey::Base { vertex: *v, elem: prod })
            }
            ChildRef::Step(j) => self.eval(*j, h, y),
        }
    }

    /// Evaluation of the represented homomorphism of a step against the log.
    pub fn eval(&self, step: usize, g: &Nf, x: PointId) -> Result<PointId> {
        match &self.steps[step].kind {
            VKind::Hnn { .. } => {
                let (head, tail) = match g {
                    Nf::Hnn { head, tail } => (head, tail),
                    _ => return Err(Error::cert("evaluation", "malformed HNN word")),
                };
                let node = &self.steps[step].node;
                let mut cur = x;
                for (eps, h) in tail.iter().rev() {
                    let hg = node.embed_base(h);
                    if !node.is_identity(&hg) {
                        cur = self.ref_apply(step, &hg, cur)?;
                    }
                    cur = self.w(step, cur, *eps > 0)?;
                }
                let hg = node.embed_base(head);
                if !node.is_identity(&hg) {
                    cur = self.ref_apply(step, &hg, cur)?;
                }
                Ok(cur)
            }
            VKind::Am { .. } => {
                let (letters, tail) = match g {
                    Nf::Am { letters, tail } => (letters, *tail),
                    _ => return Err(Error::cert("evaluation", "malformed amalgam word")),
                };
                let node = &self.steps[step].node;
                let mut cur = x;
                if tail != 0 {
                    cur = self.ref_apply(step, &Nf::Am { letters: Vec::new(), tail }, cur)?;
                }
                for (side, letter) in letters.iter().rev() {
                    let lg = node.embed_factor(*side, letter);
                    if *side == 0 {
                        cur = self.ref_apply(step, &lg, cur)?;
                    } else {
                        cur = self.w(step, cur, true)?;
                        cur = self.ref_apply(step, &lg, cur)?;
                        cur = self.w(step, cur, false)?;
                    }
                }
                Ok(cur)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// verification driver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyMode {
    All,
    Folner,
    Transitive,
    Faithful,
    Equivariance,
}

impl VerifyMode {
    pub fn parse(s: &str) -> Result<VerifyMode> {
        Ok(match s {
            "all" => VerifyMode::All,
            "folner" => VerifyMode::Folner,
            "transitive" => VerifyMode::Transitive,
            "faithful" => VerifyMode::Faithful,
            "equivariance" => VerifyMode::Equivariance,
            other => return Err(Error::validation(format!("unknown verify mode `{other}`"))),
        })
    }
}

pub struct VerifyReport {
    pub lines: Vec<String>,
}

pub fn verify(manifest_path: &Path, mode: VerifyMode, depth: u64) -> Result<VerifyReport> {
    let manifest = Manifest::load(manifest_path)?;
    let input = manifest.input_text()?;
    let graph = GraphOfGroups::parse(&input)?;
    let p = plan(&graph)?;
    crate::manifest::check_plan_text(&p, &manifest.plan_text)?;
    let wlog_text = std::fs::read_to_string(manifest.dir.join(&manifest.wlog_path))?;
    if digest_hex(wlog_text.as_bytes()) != manifest.wlog_digest {
        return Err(Error::cert("wlog", "digest mismatch against the manifest"));
    }
    let ctx = VerifyCtx::new(&graph, &p, &wlog_text)?;
    let mut certs: Vec<(String, ParsedCert)> = Vec::new();
    for (path, digest) in &manifest.certs {
        let body = std::fs::read_to_string(manifest.dir.join(path))?;
        if &digest_hex(body.as_bytes()) != digest {
            return Err(Error::cert(path.clone(), "digest mismatch against the manifest"));
        }
        let parsed = parse_cert(&body, &|step, word| {
            let s = ctx
                .steps
                .get(step as usize)
                .ok_or_else(|| Error::cert(path.clone(), "unknown step"))?;
            resolve_word(&s.node, word)
        })?;
        certs.push((path.clone(), parsed));
    }
    let mut lines = Vec::new();
    let want = |m: VerifyMode| mode == VerifyMode::All || mode == m;
    if want(VerifyMode::Folner) {
        for (path, c) in &certs {
            if let ParsedCert::Folner { step, cert } = c {
                check_folner(&ctx, *step as usize, cert)
                    .map_err(|e| Error::cert(path.clone(), format!("{e}")))?;
                lines.push(format!("ok folner {path} ratio {}", render_q(cert.worst_ratio())));
            }
        }
    }
    if want(VerifyMode::Transitive) {
        for (path, c) in &certs {
            if let ParsedCert::Transitive { step, cert } = c {
                check_transitive(&ctx, *step as usize, cert)
                    .map_err(|e| Error::cert(path.clone(), format!("{e}")))?;
                lines.push(format!("ok transitive {path}"));
            }
        }
    }
    if want(VerifyMode::Equivariance) {
        for step in 0..ctx.steps.len() {
            let n = check_equivariance(&ctx, step)?;
            lines.push(format!("ok equivariance step {step} ({n} pairs)"));
        }
    }
    if want(VerifyMode::Faithful) {
        let covered = check_faithful(&ctx, &certs, depth, &input, &manifest)?;
        lines.push(format!("ok faithful depth {depth} ({covered} words)"));
    }
    Ok(VerifyReport { lines })
}

fn render_q(q: Q) -> String {
    format!("{}/{}", q.numer(), q.denom())
}

fn check_folner(ctx: &VerifyCtx, step: usize, cert: &FolnerCert) -> Result<()> {
    if cert.set.is_empty() {
        return Err(Error::cert("folner", "empty set"));
    }
    let n = cert.set.len() as i64;
    let bound = Q::new(1, cert.m as i64);
    let base: HashSet<PointId> = cert.set.iter().copied().collect();
    for (g, count) in &cert.direct {
        let image: HashSet<PointId> = cert
            .set
            .iter()
            .map(|&p| ctx.ref_apply(step, g, p))
            .collect::<Result<_>>()?;
        let c = 2 * (base.len() as u64 - image.intersection(&base).count() as u64);
        if c != *count {
            return Err(Error::cert("folner", format!("direct recount {c} != stored {count}")));
        }
        if Q::new(c as i64, n) >= bound {
            return Err(Error::cert("folner", "direct ratio breaks the 1/m bound"));
        }
    }
    let needs_w = cert.w_count.is_some() || !cert.conj.is_empty();
    if needs_w {
        let w_image: Vec<PointId> = cert
            .set
            .iter()
            .map(|&p| ctx.w(step, p, true))
            .collect::<Result<_>>()?;
        if let Some(stored) = cert.w_count {
            let wset: HashSet<PointId> = w_image.iter().copied().collect();
            let c = (wset.symmetric_difference(&base).count()) as u64;
            if c != stored {
                return Err(Error::cert("folner", format!("w recount {c} != stored {stored}")));
            }
            if Q::new(c as i64, n) >= bound {
                return Err(Error::cert("folner", "w ratio breaks the 1/m bound"));
            }
        }
        let wset: HashSet<PointId> = w_image.iter().copied().collect();
        for (h, count) in &cert.conj {
            let image: HashSet<PointId> = w_image
                .iter()
                .map(|&p| ctx.ref_apply(step, h, p))
                .collect::<Result<_>>()?;
            let c = 2 * (wset.len() as u64 - image.intersection(&wset).count() as u64);
            if c != *count {
                return Err(Error::cert("folner", format!("conj recount {c} != stored {count}")));
            }
            if Q::new(c as i64, n) >= bound {
                return Err(Error::cert("folner", "conjugated ratio breaks the 1/m bound"));
            }
        }
    }
    Ok(())
}

fn check_transitive(ctx: &VerifyCtx, step: usize, cert: &TransitiveCert) -> Result<()> {
    let got = ctx.eval(step, &cert.witness, cert.x)?;
    if got != cert.y {
        return Err(Error::cert("transitive", format!("witness maps {} to {got}", cert.x)));
    }
    Ok(())
}

fn check_equivariance(ctx: &VerifyCtx, step: usize) -> Result<u64> {
    let (doms, rans): (Vec<Nf>, Vec<Nf>) = match &ctx.steps[step].kind {
        VKind::Hnn { sigma_dom, sigma_cod } => (sigma_dom.clone(), sigma_cod.clone()),
        VKind::Am { sigma } => (sigma.clone(), sigma.clone()),
    };
    let mut checked = 0;
    for (&d, &r) in ctx.fwd[step].iter() {
        for i in 1..doms.len() {
            let dd = ctx.ref_apply(step, &doms[i], d)?;
            let rr = ctx.ref_apply(step, &rans[i], r)?;
            match ctx.fwd[step].get(&dd) {
                Some(&v) if v == rr => {}
                _ => {
                    return Err(Error::cert(
                        "equivariance",
                        format!("step {step}: law fails at pair ({d},{r})"),
                    ))
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}

fn check_faithful(
    ctx: &VerifyCtx,
    certs: &[(String, ParsedCert)],
    depth: u64,
    input: &str,
    manifest: &Manifest,
) -> Result<u64> {
    // re-check present certificates first
    let outer = ctx.steps.len() - 1;
    let mut by_word: HashMap<Nf, &FaithfulCert> = HashMap::new();
    for (path, c) in certs {
        if let ParsedCert::Faithful { step, cert } = c {
            let got = ctx.eval(*step as usize, &cert.g, cert.moved)?;
            if got != cert.image || got == cert.moved {
                return Err(Error::cert(path.clone(), "moved point does not re-evaluate"));
            }
            if *step as usize == outer {
                by_word.insert(cert.g.clone(), cert);
            }
        }
    }
    if depth == 0 {
        return Ok(0);
    }
    // exhaustive coverage of the outer group up to the requested word size;
    // words without a stored certificate are checked on a deterministic
    // replay of the build
    let node = ctx.steps[outer].node.clone();
    let mut words = Vec::new();
    for s in 1..=depth {
        words.extend(node.elements_of_size(s));
    }
    let mut replay = None;
    let mut covered = 0;
    for g in words {
        if by_word.contains_key(&g) {
            covered += 1;
            continue;
        }
        if replay.is_none() {
            let run = build_run(input, Some(manifest.budget))?;
            let files = render_run(&run);
            if digest_hex(files.wlog.as_bytes()) != manifest.wlog_digest {
                return Err(Error::cert(
                    "replay",
                    "deterministic rebuild disagrees with the manifest log",
                ));
            }
            replay = Some(run);
        }
        let run = replay.as_mut().unwrap();
        let outer_engine = run.result.engines.last().unwrap().clone();
        let cert = outer_engine.borrow_mut().ensure_faithful(&g)?;
        if cert.moved == cert.image {
            return Err(Error::cert("faithful", format!("no moved point for {}", node.render(&g))));
        }
        covered += 1;
    }
    Ok(covered)
}

// ---------------------------------------------------------------------------
// schreier export
// ---------------------------------------------------------------------------

/// Parses a generator name: `id`, `e<k>`, `~e<k>`, `v<p>.x<i>` (unit vector)
/// or `v<p>.f<j>` (finite-part element).
pub fn parse_gen(node: &GroupNode, graph: &GraphOfGroups, name: &str) -> Result<Nf> {
    if name == "id" {
        return Ok(node.identity());
    }
    if name.starts_with('e') || name.starts_with("~e") {
        let word = parse_word(name)?;
        return node.reduce_word(&word).map_err(|_| unknown_gen(name));
    }
    if let Some(rest) = name.strip_prefix('v') {
        if let Some((vid, gen)) = rest.split_once('.') {
            let vid: usize = vid.parse().map_err(|_| unknown_gen(name))?;
            let vertex = graph
                .vertices
                .get(&vid)
                .ok_or_else(|| unknown_gen(name))?;
            let d = vertex.group.rank;
            if let Some(i) = gen.strip_prefix('x') {
                let i: usize = i.parse().map_err(|_| unknown_gen(name))?;
                if i >= d {
                    return Err(unknown_gen(name));
                }
                let mut v = vec![0i64; d];
                v[i] = 1;
                let elem = crate::base::BaseElement::new(v, 0);
                return node.embed_vertex(vid, &elem).ok_or_else(|| unknown_gen(name));
            }
            if let Some(j) = gen.strip_prefix('f') {
                let j: usize = j.parse().map_err(|_| unknown_gen(name))?;
                if j >= vertex.group.finite_part.order {
                    return Err(unknown_gen(name));
                }
                let elem = crate::base::BaseElement::new(vec![0; d], j);
                return node.embed_vertex(vid, &elem).ok_or_else(|| unknown_gen(name));
            }
        }
    }
    Err(unknown_gen(name))
}

fn unknown_gen(name: &str) -> Error {
    Error::validation(format!("unknown generator name `{name}`"))
}

/// Schreier fragment: the first `points` ambient points under the listed
/// generators, as deterministic DOT text. Arcs are drawn only between the
/// selected points.
pub fn schreier(manifest_path: &Path, points: u64, gens: &[String]) -> Result<String> {
    let manifest = Manifest::load(manifest_path)?;
    let input = manifest.input_text()?;
    let run = build_run(&input, Some(manifest.budget))?;
    let graph = &run.graph;
    let outer = run.result.engines.last().unwrap().clone();
    let node = outer.borrow().group.clone();
    let mut parsed_gens = Vec::new();
    for name in gens {
        parsed_gens.push((name.clone(), parse_gen(&node, graph, name)?));
    }
    let mut ids = Vec::new();
    for i in 0..points {
        ids.push(outer.borrow_mut().ambient_at(i));
    }
    let id_set: HashSet<PointId> = ids.iter().copied().collect();
    let mut out = String::new();
    out.push_str("digraph schreier {\n");
    out.push_str("  rankdir=LR;\n");
    for &p in &ids {
        out.push_str(&format!("  \"{p}\";\n"));
    }
    for (name, g) in &parsed_gens {
        for &p in &ids {
            let q = outer.borrow_mut().eval(g, p)?;
            if id_set.contains(&q) {
                out.push_str(&format!("  \"{p}\" -> \"{q}\" [label=\"{name}\"];\n"));
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}
