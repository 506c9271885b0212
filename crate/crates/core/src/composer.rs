//! Edge-by-edge composition: peel non-tree edges as HNN steps over the
//! remainder, split tree edges as amalgam steps, prepare vertex actions at
//! the leaves, and thread the empty-fixed-set ledger through every step so
//! each engine's freeness hypotheses are discharged before it runs.

use crate::action::{upgrade_almost_free, Action, InducedAction, SubMarker, TranslationAction};
use crate::base::BaseElement;
use crate::engine::{Engine, EngineAction, Mode, YLayer};
use crate::graph::GraphOfGroups;
use crate::point::PointTable;
use crate::word::{GroupNode, Nf};
use crate::{Error, Result};
use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Plan {
    Leaf { vertex: usize },
    Hnn { edge: usize, base: Box<Plan> },
    Am { edge: usize, left: Box<Plan>, right: Box<Plan> },
}

impl Plan {
    pub fn render(&self) -> String {
        match self {
            Plan::Leaf { vertex } => format!("v{vertex}"),
            Plan::Hnn { edge, base } => format!("hnn(e{edge},{})", base.render()),
            Plan::Am { edge, left, right } => {
                format!("am(e{edge},{},{})", left.render(), right.render())
            }
        }
    }

    pub fn step_count(&self) -> usize {
        match self {
            Plan::Leaf { .. } => 0,
            Plan::Hnn { base, .. } => 1 + base.step_count(),
            Plan::Am { left, right, .. } => 1 + left.step_count() + right.step_count(),
        }
    }
}

fn components(vertices: &BTreeSet<usize>, edges: &[usize], g: &GraphOfGroups) -> Vec<BTreeSet<usize>> {
    let mut remaining: BTreeSet<usize> = vertices.clone();
    let mut out = Vec::new();
    while let Some(&start) = remaining.iter().next() {
        let mut comp = BTreeSet::new();
        comp.insert(start);
        let mut queue = vec![start];
        while let Some(v) = queue.pop() {
            for &eid in edges {
                let e = g.edge(eid);
                for (a, b) in [(e.from, e.to), (e.to, e.from)] {
                    if a == v && vertices.contains(&b) && comp.insert(b) {
                        queue.push(b);
                    }
                }
            }
        }
        for v in &comp {
            remaining.remove(v);
        }
        out.push(comp);
    }
    out
}

/// Deterministic composition plan: non-tree edges first (HNN, least id), then
/// tree edges (amalgam, least id); the connectivity kind of every step is
/// re-verified against the graph.
pub fn plan(g: &GraphOfGroups) -> Result<Plan> {
    let vertices: BTreeSet<usize> = g.vertices.keys().copied().collect();
    let edges: Vec<usize> = g.edges.iter().map(|e| e.id).collect();
    plan_sub(g, &vertices, &edges)
}

fn plan_sub(g: &GraphOfGroups, vertices: &BTreeSet<usize>, edges: &[usize]) -> Result<Plan> {
    if edges.is_empty() {
        let mut it = vertices.iter();
        let v = *it.next().ok_or_else(|| Error::validation("empty component"))?;
        if it.next().is_some() {
            return Err(Error::validation("disconnected component without edges"));
        }
        return Ok(Plan::Leaf { vertex: v });
    }
    let non_tree: Vec<usize> =
        edges.iter().copied().filter(|&id| !g.edge(id).in_tree).collect();
    if let Some(&e) = non_tree.first() {
        let rest: Vec<usize> = edges.iter().copied().filter(|&id| id != e).collect();
        let comps = components(vertices, &rest, g);
        if comps.len() != 1 {
            return Err(Error::validation(format!(
                "edge {e} was classified as an HNN step but removing it disconnects the graph"
            )));
        }
        return Ok(Plan::Hnn { edge: e, base: Box::new(plan_sub(g, vertices, &rest)?) });
    }
    let e = edges[0];
    let rest: Vec<usize> = edges.iter().copied().filter(|&id| id != e).collect();
    let comps = components(vertices, &rest, g);
    if comps.len() != 2 {
        return Err(Error::validation(format!(
            "edge {e} was classified as an amalgam step but removing it leaves {} components",
            comps.len()
        )));
    }
    let edat = g.edge(e);
    let (cl, cr) = if comps[0].contains(&edat.from) {
        (&comps[0], &comps[1])
    } else {
        (&comps[1], &comps[0])
    };
    if !cr.contains(&edat.to) {
        return Err(Error::validation(format!(
            "edge {e}: endpoints fell into the same component"
        )));
    }
    let split = |c: &BTreeSet<usize>| -> Vec<usize> {
        rest.iter()
            .copied()
            .filter(|&id| c.contains(&g.edge(id).from) && c.contains(&g.edge(id).to))
            .collect()
    };
    Ok(Plan::Am {
        edge: e,
        left: Box::new(plan_sub(g, cl, &split(cl))?),
        right: Box::new(plan_sub(g, cr, &split(cr))?),
    })
}

/// One entry of the empty-fixed-set ledger: a tracked vertex-group element
/// and the construction chain that transported its guarantee.
#[derive(Clone, Debug)]
pub struct LedgerEntry {
    pub vertex: usize,
    pub elem: BaseElement,
    pub chain: Vec<String>,
}

pub struct ComposeResult {
    pub group: Rc<GroupNode>,
    pub action: Box<dyn Action>,
    /// All engines, in construction (inner-first) order.
    pub engines: Vec<Rc<RefCell<Engine>>>,
    pub ledger: Vec<LedgerEntry>,
    pub plan: Plan,
}

/// Incident edge-subgroup images at a vertex, nontrivial elements only.
fn incident_images(g: &GraphOfGroups, v: usize) -> Vec<BaseElement> {
    let mut out: Vec<BaseElement> = Vec::new();
    for e in &g.edges {
        let mut push_all = |imgs: &[BaseElement]| {
            for img in imgs.iter().skip(1) {
                if !out.contains(img) {
                    out.push(img.clone());
                }
            }
        };
        if e.from == v {
            push_all(&e.s_images);
        }
        if e.to == v {
            push_all(&e.r_images);
        }
    }
    out
}

pub type PreparedPiece = (Rc<GroupNode>, Box<dyn Action>, Vec<LedgerEntry>);

/// An amenable, faithful, infinite-orbit action of the vertex group, free on
/// every incident edge-subgroup image: the translation action, upgraded by an
/// off-diagonal power when it has fixed points (translation never does).
pub fn prepare_vertex_action(
    g: &GraphOfGroups,
    v: usize,
    table: &Rc<RefCell<PointTable>>,
) -> Result<PreparedPiece> {
    let vertex = g.vertex(v);
    let node = Rc::new(GroupNode::Leaf { vertex: v, group: vertex.group.clone() });
    let act = TranslationAction::new(node.clone(), table.clone())?;
    let bad: Vec<Nf> = incident_images(g, v).into_iter().map(Nf::Leaf).collect();
    let (act, _m) = upgrade_almost_free(Box::new(act), &bad)?;
    let ledger = incident_images(g, v)
        .into_iter()
        .map(|elem| LedgerEntry {
            vertex: v,
            elem,
            chain: vec![format!("v{v}: free translation action")],
        })
        .collect();
    Ok((node, act, ledger))
}

/// Checks that the base action certifies an empty fixed set for `elem`.
fn discharge(
    act: &dyn Action,
    node: &GroupNode,
    vertex: usize,
    elem: &BaseElement,
    edge: usize,
) -> Result<()> {
    if elem.is_identity() {
        return Ok(());
    }
    let embedded = node
        .embed_vertex(vertex, elem)
        .ok_or_else(|| Error::validation(format!("vertex {vertex} missing from sub-plan")))?;
    let gu = act.guarantees();
    if gu.free || gu.fix_empty.contains(&embedded) {
        return Ok(());
    }
    Err(Error::validation(format!(
        "ledger gap: edge {edge} subgroup element v{vertex}:{} has no empty-fixed-set guarantee",
        elem.render()
    )))
}

pub fn compose(g: &GraphOfGroups, plan: &Plan, table: Rc<RefCell<PointTable>>) -> Result<ComposeResult> {
    let mut engines = Vec::new();
    let (group, action, ledger) = build(g, plan, &table, &mut engines)?;
    Ok(ComposeResult { group, action, engines, ledger, plan: plan.clone() })
}

fn build(
    g: &GraphOfGroups,
    plan: &Plan,
    table: &Rc<RefCell<PointTable>>,
    engines: &mut Vec<Rc<RefCell<Engine>>>,
) -> Result<PreparedPiece> {
    match plan {
        Plan::Leaf { vertex } => prepare_vertex_action(g, *vertex, table),
        Plan::Hnn { edge, base } => {
            let (bnode, bact, bledger) = build(g, base, table, engines)?;
            let e = g.edge(*edge);
            // sigma sits in the base through the range map; theta through the
            // source map; both must act freely there
            for img in &e.r_images {
                discharge(bact.as_ref(), &bnode, e.to, img, *edge)?;
            }
            for img in &e.s_images {
                discharge(bact.as_ref(), &bnode, e.from, img, *edge)?;
            }
            let dom_imgs: Vec<Nf> = e
                .r_images
                .iter()
                .map(|i| {
                    bnode.embed_vertex(e.to, i).ok_or_else(|| {
                        Error::validation(format!("vertex {} missing from sub-plan", e.to))
                    })
                })
                .collect::<Result<_>>()?;
            let cod_imgs: Vec<Nf> = e
                .s_images
                .iter()
                .map(|i| {
                    bnode.embed_vertex(e.from, i).ok_or_else(|| {
                        Error::validation(format!("vertex {} missing from sub-plan", e.from))
                    })
                })
                .collect::<Result<_>>()?;
            let node = Rc::new(GroupNode::Hnn {
                edge: *edge,
                base: bnode.clone(),
                sigma: e.sigma.clone(),
                dom_imgs: dom_imgs.clone(),
                cod_imgs: cod_imgs.clone(),
            });
            let step = engines.len() as u32;
            let mut ind = InducedAction::new(bact, node.clone(), SubMarker::HnnBase, step);
            let sigma_dom: Vec<Nf> = dom_imgs.iter().map(|i| node.embed_base(i)).collect();
            let sigma_cod: Vec<Nf> = cod_imgs.iter().map(|i| node.embed_base(i)).collect();
            ind.register_sigma(sigma_dom.clone());
            let t = node.edge_letter(*edge, 1).expect("own stable letter");
            let engine = Engine::new(
                step,
                node.clone(),
                Mode::Hnn { t, sigma_dom, sigma_cod },
                YLayer::Hnn(ind),
                table.clone(),
            );
            let rc = Rc::new(RefCell::new(engine));
            engines.push(rc.clone());
            // thread the ledger through: subgroup elements act directly, so
            // empty fixed sets persist
            let mut ledger = Vec::new();
            let mut fix_empty = Vec::new();
            for entry in bledger {
                let mut chain = entry.chain.clone();
                chain.push(format!(
                    "hnn step {step} (e{edge}): induced + stabilized, base letters act directly"
                ));
                if let Some(nf) = node.embed_vertex(entry.vertex, &entry.elem) {
                    fix_empty.push(nf);
                }
                ledger.push(LedgerEntry { chain, ..entry });
            }
            rc.borrow_mut().fix_empty = fix_empty;
            Ok((node, Box::new(EngineAction::new(rc)), ledger))
        }
        Plan::Am { edge, left, right } => {
            let (lnode, lact, lledger) = build(g, left, table, engines)?;
            let (rnode, ract, rledger) = build(g, right, table, engines)?;
            let e = g.edge(*edge);
            for img in e.s_images.iter() {
                discharge(lact.as_ref(), &lnode, e.from, img, *edge)?;
            }
            for img in e.r_images.iter() {
                discharge(ract.as_ref(), &rnode, e.to, img, *edge)?;
            }
            let left_imgs: Vec<Nf> = e
                .s_images
                .iter()
                .map(|i| {
                    lnode.embed_vertex(e.from, i).ok_or_else(|| {
                        Error::validation(format!("vertex {} missing from left component", e.from))
                    })
                })
                .collect::<Result<_>>()?;
            let right_imgs: Vec<Nf> = e
                .r_images
                .iter()
                .map(|i| {
                    rnode.embed_vertex(e.to, i).ok_or_else(|| {
                        Error::validation(format!("vertex {} missing from right component", e.to))
                    })
                })
                .collect::<Result<_>>()?;
            let node = Rc::new(GroupNode::Am {
                edge: *edge,
                left: lnode,
                right: rnode,
                sigma: e.sigma.clone(),
                left_imgs: left_imgs.clone(),
                right_imgs: right_imgs.clone(),
            });
            let step = engines.len() as u32;
            let sigma: Vec<Nf> =
                (0..e.sigma.order).map(|i| Nf::Am { letters: Vec::new(), tail: i }).collect();
            let mut ind_left =
                InducedAction::new(lact, node.clone(), SubMarker::AmSide(0), step);
            let mut ind_right =
                InducedAction::new(ract, node.clone(), SubMarker::AmSide(1), step);
            ind_left.register_sigma(sigma.clone());
            ind_right.register_sigma(sigma.clone());
            let engine = Engine::new(
                step,
                node.clone(),
                Mode::Am { sigma },
                YLayer::Am { left: ind_left, right: ind_right },
                table.clone(),
            );
            let rc = Rc::new(RefCell::new(engine));
            engines.push(rc.clone());
            let mut ledger = Vec::new();
            let mut fix_empty = Vec::new();
            for (side_name, entries) in [("left", lledger), ("right", rledger)] {
                for entry in entries {
                    let mut chain = entry.chain.clone();
                    if side_name == "left" {
                        chain.push(format!(
                            "amalgam step {step} (e{edge}): left factor acts directly"
                        ));
                    } else {
                        chain.push(format!(
                            "amalgam step {step} (e{edge}): right factor conjugated by w, \
                             fixed sets transported by w^-1"
                        ));
                    }
                    if let Some(nf) = node.embed_vertex(entry.vertex, &entry.elem) {
                        fix_empty.push(nf);
                    }
                    ledger.push(LedgerEntry { chain, ..entry });
                }
            }
            rc.borrow_mut().fix_empty = fix_empty;
            Ok((node, Box::new(EngineAction::new(rc)), ledger))
        }
    }
}

/// A fully built run: parsed graph, plan, composed action, engines. When the
/// schedule hit a budget diagnostic the partial certificate list is still
/// available and `diagnostic` records the abort.
pub struct BuiltRun {
    pub graph: GraphOfGroups,
    pub plan: Plan,
    pub result: ComposeResult,
    pub budget: u64,
    pub input_text: String,
    pub diagnostic: Option<crate::Error>,
}

pub fn build_run(input_text: &str, budget_override: Option<u64>) -> Result<BuiltRun> {
    let graph = GraphOfGroups::parse(input_text)?;
    let budget = budget_override.or(graph.budget).unwrap_or(0);
    let p = plan(&graph)?;
    let table = Rc::new(RefCell::new(PointTable::new()));
    let result = compose(&graph, &p, table)?;
    let diagnostic = {
        let outer = result.engines.last().expect("non-trivial graphs have at least one step");
        let r = outer.borrow_mut().run_schedule(budget);
        r.err()
    };
    if let Some(e) = &diagnostic {
        if !matches!(e, crate::Error::Budget { .. }) {
            return Err(crate::Error::validation(format!("{e}")));
        }
    }
    Ok(BuiltRun { graph, plan: p, result, budget, input_text: input_text.to_string(), diagnostic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::samples::*;

    #[test]
    fn single_loop_plans_as_hnn() {
        let g = GraphOfGroups::parse(LOOP_Z_C2).unwrap();
        let p = plan(&g).unwrap();
        assert_eq!(p, Plan::Hnn { edge: 0, base: Box::new(Plan::Leaf { vertex: 0 }) });
        assert_eq!(p.render(), "hnn(e0,v0)");
    }

    #[test]
    fn single_tree_edge_plans_as_amalgam() {
        let g = GraphOfGroups::parse(AMALGAM_Z_C2).unwrap();
        let p = plan(&g).unwrap();
        assert_eq!(
            p,
            Plan::Am {
                edge: 0,
                left: Box::new(Plan::Leaf { vertex: 0 }),
                right: Box::new(Plan::Leaf { vertex: 1 }),
            }
        );
    }

    #[test]
    fn loop_plus_tree_edge_peels_loop_first() {
        let g = GraphOfGroups::parse(TWO_EDGE).unwrap();
        let p = plan(&g).unwrap();
        // peel the loop first: an HNN step whose base is the amalgam of the
        // tree edge; connectivity was checked at each step
        assert_eq!(p.render(), "hnn(e0,am(e1,v0,v1))");
    }

    #[test]
    fn prepare_rejects_finite_vertex_groups() {
        let text = "\
vertex 0 group Z^0 x table:0,1;1,0
edge 0 from 0 to 0 sigma table:0 s_images:(e) r_images:(e)
";
        let g = GraphOfGroups::parse(text).unwrap();
        let table = Rc::new(RefCell::new(PointTable::new()));
        let err = match prepare_vertex_action(&g, 0, &table) {
            Err(e) => e,
            Ok(_) => panic!("finite vertex group must be rejected"),
        };
        assert!(format!("{err}").contains("virtually free"));
    }

    #[test]
    fn prepare_is_noop_for_torsion_free_incidence() {
        let g = GraphOfGroups::parse(LOOP_Z_C2).unwrap();
        let table = Rc::new(RefCell::new(PointTable::new()));
        let (_, act, ledger) = prepare_vertex_action(&g, 0, &table).unwrap();
        assert!(act.guarantees().free, "translation is already free");
        assert_eq!(ledger.len(), 1, "C2 has one nontrivial element");
    }

    #[test]
    fn trivial_incidence_keeps_plain_translation() {
        let g = GraphOfGroups::parse(LOOP_Z).unwrap();
        let table = Rc::new(RefCell::new(PointTable::new()));
        let (_, act, ledger) = prepare_vertex_action(&g, 0, &table).unwrap();
        assert!(act.guarantees().free);
        assert!(ledger.is_empty(), "trivial edge groups track nothing");
    }

    #[test]
    fn one_loop_compose_has_one_ledger_entry() {
        let g = GraphOfGroups::parse(LOOP_Z_C2).unwrap();
        let p = plan(&g).unwrap();
        let table = Rc::new(RefCell::new(PointTable::new()));
        let result = compose(&g, &p, table).unwrap();
        assert_eq!(result.ledger.len(), 1);
        let outer = result.engines.last().unwrap().borrow();
        assert_eq!(outer.fix_empty.len(), 1);
    }

    #[test]
    fn compose_builds_nested_engines_for_two_edges() {
        let g = GraphOfGroups::parse(TWO_EDGE).unwrap();
        let p = plan(&g).unwrap();
        let table = Rc::new(RefCell::new(PointTable::new()));
        let result = compose(&g, &p, table).unwrap();
        assert_eq!(result.engines.len(), 2);
        assert_eq!(result.engines[0].borrow().mode.name(), "amalgam");
        assert_eq!(result.engines[1].borrow().mode.name(), "hnn");
        // outer sigma freeness was discharged from the inner ledger
        assert_eq!(result.ledger.len(), 1);
        assert_eq!(result.ledger[0].chain.len(), 3);
    }
}
