//! Run artifacts on disk: `manifest.txt`, `wlog.txt`, `certs/*.txt` and the
//! copied input, all deterministic byte-for-byte for a given input file.

use crate::cert;
use crate::composer::{BuiltRun, Plan};
use crate::fnv::digest_hex;
use crate::point::PointTable;
use crate::word::{GroupNode, Nf};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

pub const ENGINE_VERSION: u32 = 1;

/// Kind and group node of each step, in construction (inner-first) order.
pub struct StepNode {
    pub id: u32,
    pub node: Rc<GroupNode>,
    pub kind: &'static str,
}

/// Renders the step table of a built run.
pub fn step_nodes(run: &BuiltRun) -> Vec<StepNode> {
    run.result
        .engines
        .iter()
        .map(|e| {
            let e = e.borrow();
            StepNode { id: e.step_id, node: e.group.clone(), kind: e.mode.name() }
        })
        .collect()
}

fn render_points(table: &PointTable, steps: &[StepNode]) -> Vec<String> {
    table.render_lines(&|step, _sub, nf: &Nf| steps[step as usize].node.render(nf))
}

pub struct RunFiles {
    pub manifest: String,
    pub wlog: String,
    /// Relative path -> contents.
    pub certs: BTreeMap<String, String>,
}

pub fn render_run(run: &BuiltRun) -> RunFiles {
    let steps = step_nodes(run);
    // wlog: point table followed by per-step commitment logs
    let mut wlog = String::new();
    wlog.push_str("baire-wlog 1\n");
    {
        let table = run.result.engines[0].borrow().table.clone();
        let table = table.borrow();
        wlog.push_str(&format!("points {}\n", table.len()));
        for line in render_points(&table, &steps) {
            wlog.push_str(&line);
            wlog.push('\n');
        }
    }
    wlog.push_str(&format!("steps {}\n", steps.len()));
    for engine in &run.result.engines {
        let e = engine.borrow();
        let edge = match &*e.group {
            GroupNode::Hnn { edge, .. } | GroupNode::Am { edge, .. } => *edge,
            GroupNode::Leaf { .. } => unreachable!("steps are never leaves"),
        };
        wlog.push_str(&format!("step {} {} e{}\n", e.step_id, e.mode.name(), edge));
        for (d, r) in &e.log {
            wlog.push_str(&format!("w {} {} {}\n", e.step_id, d, r));
        }
    }
    // certificates
    let mut certs = BTreeMap::new();
    for engine in &run.result.engines {
        let e = engine.borrow();
        let node = &steps[e.step_id as usize].node;
        for (i, c) in e.certs.transitive.iter().enumerate() {
            certs.insert(
                format!("certs/s{}-transitive-{:04}.txt", e.step_id, i),
                cert::render_transitive(e.step_id, node, c),
            );
        }
        for (m, c) in &e.certs.folner {
            certs.insert(
                format!("certs/s{}-folner-m{:04}.txt", e.step_id, m),
                cert::render_folner(e.step_id, node, c),
            );
        }
        for (i, c) in e.certs.faithful.iter().enumerate() {
            certs.insert(
                format!("certs/s{}-faithful-{:04}.txt", e.step_id, i),
                cert::render_faithful(e.step_id, node, c),
            );
        }
    }
    // manifest
    let mut manifest = String::new();
    manifest.push_str("baire-manifest 1\n");
    manifest.push_str(&format!("engine-version {ENGINE_VERSION}\n"));
    manifest.push_str(&format!("input input.gg {}\n", digest_hex(run.input_text.as_bytes())));
    manifest.push_str(&format!("budget {}\n", run.budget));
    manifest.push_str(&format!("seed {}\n", run.graph.seed));
    manifest.push_str(&format!("plan {}\n", run.plan.render()));
    manifest.push_str(&format!("wlog wlog.txt {}\n", digest_hex(wlog.as_bytes())));
    for (path, body) in &certs {
        manifest.push_str(&format!("cert {path} {}\n", digest_hex(body.as_bytes())));
    }
    RunFiles { manifest, wlog, certs }
}

pub fn write_run(run: &BuiltRun, out_dir: &Path) -> Result<()> {
    let files = render_run(run);
    std::fs::create_dir_all(out_dir.join("certs"))?;
    std::fs::write(out_dir.join("input.gg"), &run.input_text)?;
    std::fs::write(out_dir.join("wlog.txt"), &files.wlog)?;
    for (path, body) in &files.certs {
        std::fs::write(out_dir.join(path), body)?;
    }
    std::fs::write(out_dir.join("manifest.txt"), &files.manifest)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub engine_version: u32,
    pub input_path: String,
    pub input_digest: String,
    pub budget: u64,
    pub seed: u64,
    pub plan_text: String,
    pub wlog_path: String,
    pub wlog_digest: String,
    pub certs: Vec<(String, String)>,
    pub dir: PathBuf,
}

impl Manifest {
    /// Accepts either the manifest file or the run directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let manifest_path = if path.is_dir() { path.join("manifest.txt") } else { path.to_path_buf() };
        let dir = manifest_path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let text = std::fs::read_to_string(&manifest_path)?;
        let mut m = Manifest {
            engine_version: 0,
            input_path: String::new(),
            input_digest: String::new(),
            budget: 0,
            seed: 0,
            plan_text: String::new(),
            wlog_path: String::new(),
            wlog_digest: String::new(),
            certs: Vec::new(),
            dir,
        };
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "baire-manifest 1" {
                    return Err(Error::validation(format!("unknown manifest header `{line}`")));
                }
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["engine-version", v] => {
                    m.engine_version = v.parse().map_err(|_| {
                        Error::validation("bad engine-version in manifest")
                    })?
                }
                ["input", p, d] => {
                    m.input_path = p.to_string();
                    m.input_digest = d.to_string();
                }
                ["budget", v] => {
                    m.budget =
                        v.parse().map_err(|_| Error::validation("bad budget in manifest"))?
                }
                ["seed", v] => {
                    m.seed = v.parse().map_err(|_| Error::validation("bad seed in manifest"))?
                }
                ["plan", rest @ ..] => m.plan_text = rest.join(" "),
                ["wlog", p, d] => {
                    m.wlog_path = p.to_string();
                    m.wlog_digest = d.to_string();
                }
                ["cert", p, d] => m.certs.push((p.to_string(), d.to_string())),
                _ => return Err(Error::validation(format!("bad manifest line `{line}`"))),
            }
        }
        Ok(m)
    }

    pub fn input_text(&self) -> Result<String> {
        let text = std::fs::read_to_string(self.dir.join(&self.input_path))?;
        if digest_hex(text.as_bytes()) != self.input_digest {
            return Err(Error::cert("input", "digest mismatch against the manifest"));
        }
        Ok(text)
    }
}

/// Parsed `wlog.txt`: the point table plus one commitment log per step.
pub struct WlogData {
    pub table: PointTable,
    pub step_kinds: Vec<(String, usize)>,
    pub logs: Vec<Vec<(u32, u32)>>,
}

pub fn parse_wlog(
    text: &str,
    resolve: &dyn Fn(u32, u8, &str) -> Result<Nf>,
) -> Result<WlogData> {
    let mut lines = text.lines();
    match lines.next() {
        Some("baire-wlog 1") => {}
        other => return Err(Error::validation(format!("unknown wlog header {other:?}"))),
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("points "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation("missing point count"))?;
    let point_lines: Vec<&str> = (&mut lines).take(count).collect();
    if point_lines.len() != count {
        return Err(Error::validation("truncated point table"));
    }
    let table = PointTable::parse_lines(&point_lines, resolve)?;
    let steps: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("steps "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation("missing step count"))?;
    let mut step_kinds = Vec::with_capacity(steps);
    let mut logs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); steps];
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["step", _id, kind, edge] => {
                let edge: usize = edge
                    .strip_prefix('e')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::validation("bad step edge"))?;
                step_kinds.push((kind.to_string(), edge));
            }
            ["w", s, d, r] => {
                let s: usize =
                    s.parse().map_err(|_| Error::validation("bad wlog step index"))?;
                let d = d.parse().map_err(|_| Error::validation("bad wlog domain id"))?;
                let r = r.parse().map_err(|_| Error::validation("bad wlog range id"))?;
                if s >= steps {
                    return Err(Error::validation("wlog entry for unknown step"));
                }
                logs[s].push((d, r));
            }
            _ => return Err(Error::validation(format!("bad wlog line `{line}`"))),
        }
    }
    if step_kinds.len() != steps {
        return Err(Error::validation("wlog step headers do not match the count"));
    }
    Ok(WlogData { table, step_kinds, logs })
}

/// Re-renders the plan from its manifest text and checks it parses back.
pub fn check_plan_text(plan: &Plan, text: &str) -> Result<()> {
    if plan.render() != text {
        return Err(Error::cert("plan", "manifest plan does not match the input"));
    }
    Ok(())
}
