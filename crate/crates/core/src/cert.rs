//! Text serialization of certificates. One certificate per file, line
//! oriented, words rendered in the presentation alphabet so an independent
//! reader can re-evaluate everything against the commitment log.

use crate::engine::{FaithfulCert, FolnerCert, TransitiveCert};
use crate::point::PointId;
use crate::word::{parse_word, GroupNode, Nf};
use crate::{Error, Result};

pub fn render_transitive(step: u32, node: &GroupNode, c: &TransitiveCert) -> String {
    format!(
        "kind transitive\nstep {step}\nx {}\ny {}\nwitness {}\n",
        c.x,
        c.y,
        node.render(&c.witness)
    )
}

pub fn render_folner(step: u32, node: &GroupNode, c: &FolnerCert) -> String {
    let mut out = String::new();
    out.push_str("kind folner\n");
    out.push_str(&format!("step {step}\n"));
    out.push_str(&format!("m {}\n", c.m));
    out.push_str(&format!("size {}\n", c.set.len()));
    out.push_str(&format!("bound 1/{}\n", c.m));
    let mut ids: Vec<PointId> = c.set.clone();
    ids.sort_unstable();
    let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    out.push_str(&format!("set {}\n", ids.join(" ")));
    for (g, count) in &c.direct {
        out.push_str(&format!("direct {count} {}\n", node.render(g)));
    }
    for (g, count) in &c.conj {
        out.push_str(&format!("conj {count} {}\n", node.render(g)));
    }
    if let Some(w) = c.w_count {
        out.push_str(&format!("wcount {w}\n"));
    }
    out
}

pub fn render_faithful(step: u32, node: &GroupNode, c: &FaithfulCert) -> String {
    format!(
        "kind faithful\nstep {step}\ng {}\nmoved {}\nimage {}\n",
        node.render(&c.g),
        c.moved,
        c.image
    )
}

#[derive(Clone, Debug)]
pub enum ParsedCert {
    Transitive { step: u32, cert: TransitiveCert },
    Folner { step: u32, cert: FolnerCert },
    Faithful { step: u32, cert: FaithfulCert },
}

impl ParsedCert {
    pub fn step(&self) -> u32 {
        match self {
            ParsedCert::Transitive { step, .. }
            | ParsedCert::Folner { step, .. }
            | ParsedCert::Faithful { step, .. } => *step,
        }
    }
}

/// Parses one certificate file; `resolve` folds a rendered word for the given
/// step back into a normal form.
pub fn parse_cert(text: &str, resolve: &dyn Fn(u32, &str) -> Result<Nf>) -> Result<ParsedCert> {
    let mut kind = None;
    let mut step = None;
    let mut fields: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::cert("certificate", format!("bad line `{line}`")))?;
        match k {
            "kind" => kind = Some(v.to_string()),
            "step" => {
                step = Some(v.parse::<u32>().map_err(|_| {
                    Error::cert("certificate", format!("bad step `{v}`"))
                })?)
            }
            _ => fields.push((k.to_string(), v.to_string())),
        }
    }
    let step = step.ok_or_else(|| Error::cert("certificate", "missing step"))?;
    let get = |name: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::cert("certificate", format!("missing field `{name}`")))
    };
    match kind.as_deref() {
        Some("transitive") => {
            let x = get("x")?.parse().map_err(|_| Error::cert("certificate", "bad x"))?;
            let y = get("y")?.parse().map_err(|_| Error::cert("certificate", "bad y"))?;
            let witness = resolve(step, get("witness")?)?;
            Ok(ParsedCert::Transitive { step, cert: TransitiveCert { x, y, witness } })
        }
        Some("folner") => {
            let m = get("m")?.parse().map_err(|_| Error::cert("certificate", "bad m"))?;
            let set: Vec<PointId> = get("set")?
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::cert("certificate", "bad set id")))
                .collect::<Result<_>>()?;
            let size: usize =
                get("size")?.parse().map_err(|_| Error::cert("certificate", "bad size"))?;
            if size != set.len() {
                return Err(Error::cert("certificate", "size does not match the set"));
            }
            let mut direct = Vec::new();
            let mut conj = Vec::new();
            let mut w_count = None;
            for (k, v) in &fields {
                match k.as_str() {
                    "direct" | "conj" => {
                        let (count, word) = v.split_once(' ').ok_or_else(|| {
                            Error::cert("certificate", format!("bad count line `{v}`"))
                        })?;
                        let count =
                            count.parse().map_err(|_| Error::cert("certificate", "bad count"))?;
                        let nf = resolve(step, word)?;
                        if k == "direct" {
                            direct.push((nf, count));
                        } else {
                            conj.push((nf, count));
                        }
                    }
                    "wcount" => {
                        w_count = Some(
                            v.parse().map_err(|_| Error::cert("certificate", "bad wcount"))?,
                        );
                    }
                    _ => {}
                }
            }
            Ok(ParsedCert::Folner { step, cert: FolnerCert { m, set, direct, conj, w_count } })
        }
        Some("faithful") => {
            let g = resolve(step, get("g")?)?;
            let moved =
                get("moved")?.parse().map_err(|_| Error::cert("certificate", "bad moved"))?;
            let image =
                get("image")?.parse().map_err(|_| Error::cert("certificate", "bad image"))?;
            Ok(ParsedCert::Faithful { step, cert: FaithfulCert { g, moved, image } })
        }
        other => Err(Error::cert("certificate", format!("unknown kind {other:?}"))),
    }
}

/// Convenience resolver: parse then fold against a node.
pub fn resolve_word(node: &GroupNode, text: &str) -> Result<Nf> {
    node.reduce_word(&parse_word(text)?)
}
