//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantities. Run with `cargo test --test acceptance` (use
//! `--release` for comfortable margins; every bound is exact either way).

use baire::action::{folner_sized, Action, InducedAction, SubMarker, TranslationAction};
use baire::base::BaseElement;
use baire::composer::build_run;
use baire::manifest::{render_run, write_run};
use baire::point::{PointId, PointKey, PointTable};
use baire::rng::SplitMix64;
use baire::verify::{verify, VerifyMode};
use baire::word::{GroupNode, Nf};
use baire::Q;
use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

const FREE_PRODUCT: &str = "\
vertex 0 group Z^1 x table:0
edge 0 from 0 to 0 sigma table:0 s_images:(0,e) r_images:(0,e)
";

const HNN_TORSION: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
edge 0 from 0 to 0 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a)
";

const AMALGAM_TORSION: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
vertex 1 group Z^1 x table:0,1;1,0
edge 0 from 0 to 1 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a) tree
";

const TWO_EDGE: &str = "\
vertex 0 group Z^1 x table:0,1;1,0
vertex 1 group Z^1 x table:0
edge 0 from 0 to 0 sigma table:0,1;1,0 s_images:(0,e),(0,a) r_images:(0,e),(0,a)
edge 1 from 0 to 1 sigma table:0 s_images:(0,e) r_images:(0,e) tree
";

fn z_leaf() -> Rc<GroupNode> {
    Rc::new(GroupNode::Leaf {
        vertex: 0,
        group: Rc::new(baire::base::BaseGroup::new(1, baire::finite::FiniteGroup::trivial())),
    })
}

/// Independent oracle: the number of reduced words over two letters and their
/// inverses with lengths in 1..=depth.
fn reduced_word_count(depth: usize) -> u64 {
    fn rec(len: usize, last: i32) -> u64 {
        if len == 0 {
            return 1;
        }
        let mut total = 0;
        for x in [1, -1, 2, -2] {
            if last != 0 && x == -last {
                continue;
            }
            total += rec(len - 1, x);
        }
        total
    }
    (1..=depth).map(|l| rec(l, 0)).sum()
}

#[test]
fn criterion_1_free_product_sanity() {
    let t0 = Instant::now();
    let run = build_run(FREE_PRODUCT, Some(30)).unwrap();
    let rc = run.result.engines.last().unwrap().clone();
    // transitivity witnesses for all pairs among the first 20 interned points
    {
        let mut e = rc.borrow_mut();
        let pts: Vec<PointId> = (0..20).map(|i| e.ambient_at(i)).collect();
        for &x in &pts {
            for &y in &pts {
                let cert = e.ensure_transitive(x, y).unwrap();
                assert_eq!(e.eval(&cert.witness, x).unwrap(), y);
            }
        }
    }
    // a Folner certificate with exact ratio < 1/4 covering the vertex
    // generators and the stable letter through w
    {
        let mut e = rc.borrow_mut();
        let cert = e.ensure_folner(4).unwrap();
        let gens: Vec<&Nf> = cert.direct.iter().map(|(g, _)| g).collect();
        let a_plus = e.group.embed_vertex(0, &BaseElement::new(vec![1], 0)).unwrap();
        let a_minus = e.group.embed_vertex(0, &BaseElement::new(vec![-1], 0)).unwrap();
        assert!(gens.contains(&&a_plus) && gens.contains(&&a_minus));
        assert!(cert.w_count.is_some());
        assert!(cert.worst_ratio() < Q::new(1, 4), "ratio {:?}", cert.worst_ratio());
    }
    // faithfulness for every reduced word of length <= 5, counted against the
    // enumeration oracle
    {
        let mut e = rc.borrow_mut();
        let node = e.group.clone();
        let mut count = 0u64;
        for s in 1..=5u64 {
            for g in node.elements_of_size(s) {
                let cert = e.ensure_faithful(&g).unwrap();
                assert_ne!(cert.moved, cert.image);
                count += 1;
            }
        }
        assert_eq!(count, 484);
        assert_eq!(count, reduced_word_count(5));
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 1 exceeded 60 s: {elapsed:?}");
    println!("criterion 1: PASS (free product sanity, {elapsed:?})");
}

#[test]
fn criterion_2_hnn_with_torsion() {
    let run = build_run(HNN_TORSION, Some(9)).unwrap();
    let rc = run.result.engines.last().unwrap().clone();
    // equivariance sweep on 100% of the commitment log, exact
    {
        let mut e = rc.borrow_mut();
        assert!(!e.log.is_empty());
        e.check_equivariance().unwrap();
    }
    // Folner certificate for m = 3
    {
        let mut e = rc.borrow_mut();
        let cert = e.ensure_folner(3).unwrap();
        assert!(cert.worst_ratio() < Q::new(1, 3));
    }
    // faithfulness to depth 4: every nontrivial normal form exhibits a moved
    // point
    {
        let mut e = rc.borrow_mut();
        let node = e.group.clone();
        let mut count = 0;
        for s in 1..=4u64 {
            for g in node.elements_of_size(s) {
                let cert = e.ensure_faithful(&g).unwrap();
                assert_ne!(cert.moved, cert.image);
                count += 1;
            }
        }
        assert!(count > 0);
        println!("criterion 2: PASS (hnn with torsion, {count} words at depth 4)");
    }
    // file-level sweep over the grown log: digests, recounts, equivariance
    let dir = std::env::temp_dir().join("baire-acceptance-c2");
    let _ = std::fs::remove_dir_all(&dir);
    write_run(&run, &dir).unwrap();
    verify(&dir, VerifyMode::All, 0).unwrap();
}

#[test]
fn criterion_3_amalgam_with_torsion() {
    let run = build_run(AMALGAM_TORSION, Some(9)).unwrap();
    let rc = run.result.engines.last().unwrap().clone();
    {
        let mut e = rc.borrow_mut();
        assert!(!e.log.is_empty());
        e.check_equivariance().unwrap();
        let cert = e.ensure_folner(3).unwrap();
        assert!(cert.worst_ratio() < Q::new(1, 3));
    }
    // faithfulness to depth 4
    {
        let mut e = rc.borrow_mut();
        let node = e.group.clone();
        for s in 1..=4u64 {
            for g in node.elements_of_size(s) {
                let cert = e.ensure_faithful(&g).unwrap();
                assert_ne!(cert.moved, cert.image);
            }
        }
    }
    // conjugation law Fix(pi_w(h)) = w^-1 Fix(h) spot-checked on 10^3 points
    {
        let mut e = rc.borrow_mut();
        let h_raw = e.group.factor(1).enum_at(1).unwrap();
        let h = e.group.embed_factor(1, &h_raw);
        let mut fixed_lhs = 0;
        for i in 0..1000u64 {
            let x = e.ambient_at(i);
            let lhs = e.eval(&h, x).unwrap() == x;
            let wx = e.apply_w(x).unwrap();
            let rhs = e.ref_apply(&h, wx) == wx;
            assert_eq!(lhs, rhs, "conjugation law failed at stream point {i}");
            if lhs {
                fixed_lhs += 1;
            }
        }
        println!("criterion 3: PASS (amalgam with torsion, {fixed_lhs} fixed among 1000)");
    }
    let dir = std::env::temp_dir().join("baire-acceptance-c3");
    let _ = std::fs::remove_dir_all(&dir);
    write_run(&run, &dir).unwrap();
    verify(&dir, VerifyMode::All, 0).unwrap();
}

#[test]
fn criterion_4_sizing_bound() {
    // a_n = n^2, k = 1..20: 1 <= a(n_k)/|C_k| < 1 + 2/k with exact rationals,
    // and each C_k recounts as a (1/k, F_k)-Folner set
    let node = z_leaf();
    let table = Rc::new(RefCell::new(PointTable::new()));
    let mut act = TranslationAction::new(node.clone(), table.clone()).unwrap();
    for k in 1..=20u64 {
        let gens: Vec<Nf> = (0..k)
            .map(|i| match node.enum_at(i).unwrap() {
                Nf::Leaf(e) => Nf::Leaf(e),
                _ => unreachable!(),
            })
            .collect();
        let mut copy = 0u32;
        let sized = folner_sized(
            &mut act,
            &gens,
            k,
            &|n| (n * n) as i64,
            1,
            &table,
            move || {
                copy += 1;
                copy
            },
        )
        .unwrap();
        let ratio = sized.size_ratio();
        assert!(Q::new(1, 1) <= ratio, "k={k}: ratio {ratio} below 1");
        assert!(
            ratio < Q::new(1, 1) + Q::new(2, k as i64),
            "k={k}: ratio {ratio} breaks 1 + 2/k"
        );
        // recount through an independent stabilized handle
        let mut stab = baire::action::StabilizedAction::new(Box::new(
            TranslationAction::new(node.clone(), table.clone()).unwrap(),
        ));
        let counts = baire::action::recount(&mut stab, &gens, &sized.points);
        let n = sized.points.len() as i64;
        for (g, c) in counts {
            assert!(
                Q::new(c as i64, n) < Q::new(1, k as i64),
                "k={k}: generator {g:?} recounts to {c}/{n}"
            );
        }
    }
    println!("criterion 4: PASS (sizing bound, k = 1..20, zero tolerance)");
}

#[test]
fn criterion_5_diagonal_count() {
    // Z-translation, m in {2,3}, boxes of size 10..100 step 10: exact
    // diagonal count bound and monotone off-diagonal ratio
    for m in [2usize, 3] {
        let mut prev_ratio: Option<Q> = None;
        for size in (10..=100).step_by(10) {
            let n = size as u64;
            // brute force over index tuples: count tuples with a repeat
            let mut diag = 0u64;
            let mut offdiag = 0u64;
            let mut leaves = 0u64; // off-diagonal tuples leaving the window under +1
            let mut idx = vec![0u64; m];
            'outer: loop {
                let mut repeat = false;
                for i in 0..m {
                    for j in 0..i {
                        if idx[i] == idx[j] {
                            repeat = true;
                        }
                    }
                }
                if repeat {
                    diag += 1;
                } else {
                    offdiag += 1;
                    if idx.iter().any(|&v| v == n - 1) {
                        leaves += 1;
                    }
                }
                let mut c = 0;
                loop {
                    if c == m {
                        break 'outer;
                    }
                    idx[c] += 1;
                    if idx[c] < n {
                        break;
                    }
                    idx[c] = 0;
                    c += 1;
                }
            }
            let bound = (m as u64 * (m as u64 - 1) / 2) * n.pow(m as u32 - 1);
            assert!(diag <= bound, "m={m} size={n}: diagonal {diag} > bound {bound}");
            // |gD delta D| = 2 * (tuples leaving the window) for the +1 shift
            let ratio = Q::new(2 * leaves as i64, offdiag as i64);
            if let Some(p) = prev_ratio {
                assert!(ratio <= p, "m={m} size={n}: ratio not monotone");
            }
            prev_ratio = Some(ratio);
        }
    }
    println!("criterion 5: PASS (diagonal count and monotone off-diagonal ratio)");
}

#[test]
fn criterion_6_induced_well_definedness() {
    // canonicalize(h y, h g) == canonicalize(y, g) on 10^3 random triples,
    // for the HNN step of criterion 2 and both sides of the amalgam step of
    // criterion 3; plus H-equivariance of the embedded copy.
    let mut rng = SplitMix64::new(2024);

    // --- HNN step
    {
        let run = build_run(HNN_TORSION, Some(0)).unwrap();
        let node = run.result.engines.last().unwrap().borrow().group.clone();
        let base = node.base_rc();
        let h_elems = base.enum_prefix(40);
        let g_elems = node.enum_prefix(60);
        let canonical = |y: &Nf, g: &Nf| -> (Nf, Nf) {
            let rep = node.rep_coset_hnn(g);
            let h_full = node.mul(g, &node.inv(&rep));
            let h = node.hnn_down(&h_full).expect("residue in subgroup");
            (base.mul(&base.inv(&h), y), rep)
        };
        for _ in 0..1000 {
            let h = &h_elems[rng.below(40) as usize];
            let y = &h_elems[rng.below(40) as usize];
            let g = &g_elems[rng.below(60) as usize];
            let hy = base.mul(h, y);
            let hg = node.mul(&node.embed_base(h), g);
            assert_eq!(canonical(&hy, &hg), canonical(y, g));
        }
        // embedded copy equivariance through the induced action itself
        let table = Rc::new(RefCell::new(PointTable::new()));
        let tr = TranslationAction::new(
            Rc::new(GroupNode::Leaf {
                vertex: 0,
                group: match &*base {
                    GroupNode::Leaf { group, .. } => group.clone(),
                    _ => unreachable!(),
                },
            }),
            table,
        )
        .unwrap();
        let mut ind = InducedAction::new(Box::new(tr), node.clone(), SubMarker::HnnBase, 0);
        for _ in 0..1000 {
            let h = &h_elems[rng.below(40) as usize];
            let i = rng.below(50);
            let y = ind.base.point_at(i);
            let hy = ind.base.apply(h, y);
            let embedded = ind.embed_point(y);
            let lhs = ind.apply(&node.embed_base(h), embedded);
            let rhs = ind.embed_point(hy);
            assert_eq!(lhs, rhs, "embedded copy must be equivariant");
        }
    }

    // --- amalgam step, both sides
    {
        let run = build_run(AMALGAM_TORSION, Some(0)).unwrap();
        let node = run.result.engines.last().unwrap().borrow().group.clone();
        for side in [0u8, 1u8] {
            let factor = node.factor_rc(side);
            let h_elems = factor.enum_prefix(40);
            let g_elems = node.enum_prefix(60);
            let canonical = |y: &Nf, g: &Nf| -> (Nf, Nf) {
                let rep = node.rep_coset_am(side, g);
                let h_full = node.mul(g, &node.inv(&rep));
                let h = node.am_down(side, &h_full).expect("residue in subgroup");
                (factor.mul(&factor.inv(&h), y), rep)
            };
            for _ in 0..1000 {
                let h = &h_elems[rng.below(40) as usize];
                let y = &h_elems[rng.below(40) as usize];
                let g = &g_elems[rng.below(60) as usize];
                let hy = factor.mul(h, y);
                let hg = node.mul(&node.embed_factor(side, h), g);
                assert_eq!(canonical(&hy, &hg), canonical(y, g), "side {side}");
            }
        }
    }
    println!("criterion 6: PASS (induced action well-definedness, 10^3 samples per step)");
}

#[test]
fn criterion_7_two_edge_end_to_end() {
    let t0 = Instant::now();
    let run = build_run(TWO_EDGE, Some(9)).unwrap();
    assert_eq!(run.result.engines.len(), 2, "both nested engines must run");
    assert!(run.result.engines[0].borrow().committed() > 0, "inner engine was driven");
    // snapshot the artifacts before any further queries grow the log
    let dir = std::env::temp_dir().join("baire-acceptance-c7");
    let _ = std::fs::remove_dir_all(&dir);
    write_run(&run, &dir).unwrap();
    // ledger audit: the torsion element is tracked with a full chain, and
    // sampling finds no fixed point in the final action
    assert_eq!(run.result.ledger.len(), 1);
    let entry = &run.result.ledger[0];
    assert_eq!(entry.chain.len(), 3, "leaf + amalgam + hnn transfers");
    {
        let rc = run.result.engines.last().unwrap().clone();
        let mut e = rc.borrow_mut();
        let h = e.group.embed_vertex(entry.vertex, &entry.elem).unwrap();
        assert!(e.fix_empty.contains(&h), "outer engine carries the guarantee");
        for i in 0..1000u64 {
            let x = e.ambient_at(i);
            assert_ne!(e.eval(&h, x).unwrap(), x, "ledger element fixed a point");
        }
    }
    // file-level verification at faithfulness depth 3
    let report = verify(&dir, VerifyMode::All, 3).unwrap();
    assert!(report.lines.iter().any(|l| l.starts_with("ok faithful")));
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 300, "criterion 7 exceeded 5 min: {elapsed:?}");
    println!("criterion 7: PASS (two-edge end-to-end, {elapsed:?})");
}

#[test]
fn criterion_8_determinism() {
    for (name, input, budget) in [
        ("free product", FREE_PRODUCT, 30),
        ("hnn torsion", HNN_TORSION, 9),
        ("amalgam torsion", AMALGAM_TORSION, 9),
    ] {
        let a = render_run(&build_run(input, Some(budget)).unwrap());
        let b = render_run(&build_run(input, Some(budget)).unwrap());
        assert_eq!(a.manifest, b.manifest, "{name}: manifests differ");
        assert_eq!(a.wlog, b.wlog, "{name}: logs differ");
        assert_eq!(a.certs, b.certs, "{name}: certificates differ");
    }
    println!("criterion 8: PASS (byte-identical re-runs for criteria 1-3)");
}

/// Longer interleaved schedules keep every invariant: the surgeries never
/// collide, and the full artifact set still verifies.
#[test]
fn long_schedule_soak() {
    for (tag, input, budget) in
        [("hnn", HNN_TORSION, 24u64), ("am", AMALGAM_TORSION, 15)]
    {
        let run = build_run(input, Some(budget)).unwrap();
        let dir = std::env::temp_dir().join(format!("baire-soak-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        write_run(&run, &dir).unwrap();
        verify(&dir, VerifyMode::All, 2).unwrap();
    }
}

/// The acceptance inputs parse to the intended shapes (guards the fixtures
/// themselves).
#[test]
fn fixture_shapes() {
    let f = build_run(FREE_PRODUCT, Some(0)).unwrap();
    assert_eq!(f.plan.render(), "hnn(e0,v0)");
    let h = build_run(HNN_TORSION, Some(0)).unwrap();
    assert_eq!(h.plan.render(), "hnn(e0,v0)");
    let a = build_run(AMALGAM_TORSION, Some(0)).unwrap();
    assert_eq!(a.plan.render(), "am(e0,v0,v1)");
    let t = build_run(TWO_EDGE, Some(0)).unwrap();
    assert_eq!(t.plan.render(), "hnn(e0,am(e1,v0,v1))");
    let _ = PointKey::Tuple(vec![]);
}
