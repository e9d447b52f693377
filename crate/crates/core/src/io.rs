//! Line-oriented text formats for events, models and sequences.
//!
//! Blank lines and lines starting with `#` are ignored everywhere. Parse
//! errors carry the 1-based line number. Serializers write a canonical form
//! (sorted feature ids, weights with 17 significant digits) that parses back
//! to an identical value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hidden::{Emitters, HiddenMaxentModel};
use crate::maxent::{Candidate, Dataset, EventBlock, MaxentModel};
use crate::seq::{MemmModel, SeqDataset, SeqEventBlock};
use crate::transforms::{Group, GroupKind, GroupPartition};

/// C-style `%e`: six fractional digits and an exponent of at least two digits.
pub fn fmt_e(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.6e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// 17 significant digits: enough for any `f64` to parse back unchanged.
fn fmt_weight(w: f64) -> String {
    format!("{w:.16e}")
}

struct Lines<'a> {
    lines: Vec<(usize, Vec<&'a str>, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .filter_map(|(i, raw)| {
                let t = raw.trim();
                (!t.is_empty() && !t.starts_with('#')).then(|| (i + 1, t.split_whitespace().collect(), t))
            })
            .collect();
        Self { lines, pos: 0 }
    }

    fn peek(&self) -> Option<&(usize, Vec<&'a str>, &'a str)> {
        self.lines.get(self.pos)
    }

    fn next(&mut self) -> Option<(usize, Vec<&'a str>, &'a str)> {
        let l = self.lines.get(self.pos).cloned();
        self.pos += 1;
        l
    }

    fn last_line(&self) -> usize {
        self.lines.last().map_or(0, |l| l.0)
    }

    fn expect(&mut self, what: &str) -> Result<(usize, Vec<&'a str>, &'a str)> {
        let line = self.last_line();
        self.next()
            .ok_or_else(|| Error::parse(line, format!("unexpected end of file, expected {what}")))
    }
}

fn num<T: std::str::FromStr>(line: usize, tok: Option<&&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} {tok:?}")))
}

fn word<'a>(line: usize, tok: Option<&&'a str>, what: &str) -> Result<&'a str> {
    tok.copied()
        .ok_or_else(|| Error::parse(line, format!("missing {what}")))
}

fn arity(line: usize, toks: &[&str], n: usize) -> Result<()> {
    if toks.len() == n {
        Ok(())
    } else {
        Err(Error::parse(
            line,
            format!("{} expects {} fields, found {}", toks[0], n - 1, toks.len() - 1),
        ))
    }
}

/// Attaches a line number to errors raised by constructors.
fn at<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } => e,
        other => Error::parse(line, other.to_string()),
    })
}

fn parse_cand(line: usize, toks: &[&str]) -> Result<Candidate> {
    let label = word(line, toks.get(1), "candidate label")?;
    let ids = toks[2..]
        .iter()
        .map(|t| num(line, Some(t), "feature id"))
        .collect::<Result<Vec<usize>>>()?;
    at(line, Candidate::new(label, ids))
}

fn write_cand(out: &mut String, c: &Candidate) {
    out.push_str("CAND ");
    out.push_str(&c.label);
    for id in c.active() {
        let _ = write!(out, " {id}");
    }
    out.push('\n');
}

fn features_line(lines: &mut Lines<'_>) -> Result<Option<usize>> {
    match lines.peek() {
        Some((n, toks, _)) if toks[0] == "FEATURES" => {
            let n = *n;
            let toks = toks.clone();
            lines.next();
            arity(n, &toks, 2)?;
            Ok(Some(num(n, toks.get(1), "feature count")?))
        }
        _ => Ok(None),
    }
}

/// A parse result plus non-fatal diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

/// Events file:
///
/// ```text
/// FEATURES 6            # optional; defaults to the largest id + 1
/// EVENT e1 L
/// CAND L 0 1 2
/// CAND M 3 4 5
/// END
/// ```
pub fn parse_events(text: &str) -> Result<Parsed<Dataset>> {
    let mut lines = Lines::new(text);
    let declared = features_line(&mut lines)?;
    let mut events = Vec::new();
    while let Some((n, toks, _)) = lines.next() {
        if toks[0] != "EVENT" {
            return Err(Error::parse(n, format!("expected EVENT, found {:?}", toks[0])));
        }
        arity(n, &toks, 3)?;
        let mut cands = Vec::new();
        loop {
            let (m, t, _) = lines.expect("CAND or END")?;
            match t[0] {
                "CAND" => cands.push(parse_cand(m, &t)?),
                "END" => {
                    arity(m, &t, 1)?;
                    break;
                }
                other => return Err(Error::parse(m, format!("expected CAND or END, found {other:?}"))),
            }
        }
        events.push(at(n, EventBlock::new(toks[1], toks[2], cands))?);
    }
    let mut warnings = Vec::new();
    if events.is_empty() {
        warnings.push("no events in file".to_string());
    }
    let data = match declared {
        Some(g) => Dataset::new(events, g)?,
        None => Dataset::from_events(events),
    };
    Ok(Parsed { value: data, warnings })
}

pub fn write_events(data: &Dataset) -> String {
    let mut out = format!("FEATURES {}\n", data.num_features());
    for e in data.events() {
        let _ = writeln!(out, "EVENT {} {}", e.id, e.true_label());
        for c in e.candidates() {
            write_cand(&mut out, c);
        }
        out.push_str("END\n");
    }
    out
}

/// Any model the tools read or write.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelFile {
    Maxent {
        model: MaxentModel,
        /// Present after a `group` transform.
        partition: Option<GroupPartition>,
    },
    Hidden(HiddenMaxentModel),
    Memm(MemmModel),
}

impl ModelFile {
    pub fn plain(model: MaxentModel) -> Self {
        ModelFile::Maxent { model, partition: None }
    }
}

fn write_maxent(out: &mut String, m: &MaxentModel) {
    let _ = writeln!(out, "MAXENT {}", m.num_features());
    for (i, w) in m.weights().iter().enumerate() {
        let _ = writeln!(out, "W {i} {}", fmt_weight(*w));
    }
    for (i, name) in m.names() {
        let _ = writeln!(out, "NAME {i} {name}");
    }
}

fn parse_maxent(lines: &mut Lines<'_>) -> Result<MaxentModel> {
    let (n, toks, _) = lines.expect("MAXENT")?;
    if toks[0] != "MAXENT" {
        return Err(Error::parse(n, format!("expected MAXENT, found {:?}", toks[0])));
    }
    arity(n, &toks, 2)?;
    let g: usize = num(n, toks.get(1), "feature count")?;
    let mut weights = Vec::with_capacity(g);
    for i in 0..g {
        let (m, t, _) = lines.expect("W")?;
        if t[0] != "W" {
            return Err(Error::parse(m, format!("expected W, found {:?}", t[0])));
        }
        arity(m, &t, 3)?;
        let id: usize = num(m, t.get(1), "feature id")?;
        if id != i {
            return Err(Error::parse(
                m,
                format!("weight ids must be dense and ordered: expected {i}, found {id}"),
            ));
        }
        let w: f64 = num(m, t.get(2), "weight")?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::parse(m, format!("weight must be positive, found {w}")));
        }
        weights.push(w);
    }
    let mut model = MaxentModel::new(weights)?;
    while let Some((m, t, raw)) = lines.peek().cloned() {
        if t[0] != "NAME" {
            break;
        }
        lines.next();
        let id: usize = num(m, t.get(1), "feature id")?;
        if id >= g {
            return Err(Error::parse(m, format!("name for unknown feature {id}")));
        }
        let name = raw[4..]
            .trim_start()
            .split_once(char::is_whitespace)
            .map_or("", |(_, rest)| rest.trim());
        if name.is_empty() {
            return Err(Error::parse(m, "missing feature name"));
        }
        model.set_name(id, name);
    }
    Ok(model)
}

fn write_partition(out: &mut String, part: &GroupPartition) {
    for g in &part.groups {
        let kind = match g.kind {
            GroupKind::Exact => "exact",
            GroupKind::Exclusive => "exclusive",
        };
        let _ = write!(out, "GROUP {kind}");
        for m in &g.members {
            let _ = write!(out, " {m}");
        }
        out.push('\n');
    }
    if !part.anti_ids.is_empty() {
        out.push_str("ANTI");
        for a in &part.anti_ids {
            let _ = write!(out, " {a}");
        }
        out.push('\n');
    }
}

fn parse_partition(lines: &mut Lines<'_>) -> Result<Option<GroupPartition>> {
    let mut part = GroupPartition::default();
    let mut seen = false;
    while let Some((n, t, _)) = lines.peek().cloned() {
        match t[0] {
            "GROUP" => {
                let kind = match word(n, t.get(1), "group kind")? {
                    "exact" => GroupKind::Exact,
                    "exclusive" => GroupKind::Exclusive,
                    other => return Err(Error::parse(n, format!("unknown group kind {other:?}"))),
                };
                let members = t[2..]
                    .iter()
                    .map(|x| num(n, Some(x), "feature id"))
                    .collect::<Result<Vec<usize>>>()?;
                part.groups.push(Group { members, kind });
            }
            "ANTI" => {
                for x in &t[1..] {
                    part.anti_ids.insert(num(n, Some(x), "feature id")?);
                }
            }
            _ => break,
        }
        seen = true;
        lines.next();
    }
    Ok(seen.then_some(part))
}

/// Model file. Plain models:
///
/// ```text
/// MAXENT 2
/// W 0 5.0000000000000000e-1
/// W 1 1.0000000000000000e0
/// NAME 0 suffix=ing
/// ```
///
/// Hidden models start with `HIDDEN <k>`, then `SELECTOR` and a plain block,
/// then per hidden value `EMITTER <z> <name>` and a plain block, or
/// `EMITTER <z> <name> LABEL <label>` for a deterministic emitter. MEMMs
/// start with `MEMM <n>`, then per state `STATE <name>` and a plain block.
pub fn parse_model(text: &str) -> Result<ModelFile> {
    let mut lines = Lines::new(text);
    let (n, toks, _) = lines
        .peek()
        .cloned()
        .ok_or_else(|| Error::parse(0, "empty model file"))?;
    let model = match toks[0] {
        "MAXENT" => {
            let model = parse_maxent(&mut lines)?;
            let partition = parse_partition(&mut lines)?;
            if let Some(p) = &partition {
                if p.num_features() != model.num_features() {
                    return Err(Error::parse(n, "groups do not cover the model's features"));
                }
            }
            ModelFile::Maxent { model, partition }
        }
        "HIDDEN" => {
            lines.next();
            arity(n, &toks, 2)?;
            let k: usize = num(n, toks.get(1), "hidden value count")?;
            let (m, t, _) = lines.expect("SELECTOR")?;
            if t != ["SELECTOR"] {
                return Err(Error::parse(m, "expected SELECTOR"));
            }
            let selector = parse_maxent(&mut lines)?;
            let mut names = Vec::new();
            let mut models = Vec::new();
            let mut labels = Vec::new();
            for z in 0..k {
                let (m, t, _) = lines.expect("EMITTER")?;
                if t[0] != "EMITTER" || num::<usize>(m, t.get(1), "hidden index")? != z {
                    return Err(Error::parse(m, format!("expected EMITTER {z}")));
                }
                names.push(word(m, t.get(2), "hidden value name")?.to_string());
                match t.len() {
                    3 => models.push(parse_maxent(&mut lines)?),
                    5 if t[3] == "LABEL" => labels.push(t[4].to_string()),
                    _ => return Err(Error::parse(m, "expected EMITTER <z> <name> [LABEL <label>]")),
                }
            }
            let emitters = match (models.is_empty(), labels.is_empty()) {
                (_, true) => Emitters::Maxent(models),
                (true, false) => Emitters::Deterministic(labels),
                _ => return Err(Error::parse(n, "mixed deterministic and maxent emitters")),
            };
            ModelFile::Hidden(HiddenMaxentModel {
                hidden_values: names,
                selector,
                emitters,
            })
        }
        "MEMM" => {
            lines.next();
            arity(n, &toks, 2)?;
            let count: usize = num(n, toks.get(1), "state count")?;
            let mut observations = BTreeSet::new();
            if let Some((_, t, _)) = lines.peek() {
                if t[0] == "OBS" {
                    observations.extend(t[1..].iter().map(|s| s.to_string()));
                    lines.next();
                }
            }
            let mut models = BTreeMap::new();
            let mut g = None;
            for _ in 0..count {
                let (m, t, _) = lines.expect("STATE")?;
                if t[0] != "STATE" {
                    return Err(Error::parse(m, format!("expected STATE, found {:?}", t[0])));
                }
                arity(m, &t, 2)?;
                let model = parse_maxent(&mut lines)?;
                if *g.get_or_insert(model.num_features()) != model.num_features() {
                    return Err(Error::parse(m, "state models differ in feature count"));
                }
                if models.insert(t[1].to_string(), model).is_some() {
                    return Err(Error::parse(m, format!("duplicate state {:?}", t[1])));
                }
            }
            ModelFile::Memm(MemmModel {
                num_features: g.unwrap_or(0),
                models,
                observations,
            })
        }
        other => return Err(Error::parse(n, format!("unknown model kind {other:?}"))),
    };
    if let Some((m, t, _)) = lines.next() {
        return Err(Error::parse(m, format!("unexpected {:?} after the model", t[0])));
    }
    Ok(model)
}

pub fn write_model(model: &ModelFile) -> String {
    let mut out = String::new();
    match model {
        ModelFile::Maxent { model, partition } => {
            write_maxent(&mut out, model);
            if let Some(p) = partition {
                write_partition(&mut out, p);
            }
        }
        ModelFile::Hidden(h) => {
            let _ = writeln!(out, "HIDDEN {}", h.num_hidden());
            out.push_str("SELECTOR\n");
            write_maxent(&mut out, &h.selector);
            for (z, name) in h.hidden_values.iter().enumerate() {
                match &h.emitters {
                    Emitters::Maxent(ms) => {
                        let _ = writeln!(out, "EMITTER {z} {name}");
                        write_maxent(&mut out, &ms[z]);
                    }
                    Emitters::Deterministic(labels) => {
                        let _ = writeln!(out, "EMITTER {z} {name} LABEL {}", labels[z]);
                    }
                }
            }
        }
        ModelFile::Memm(m) => {
            let _ = writeln!(out, "MEMM {}", m.models.len());
            if !m.observations.is_empty() {
                out.push_str("OBS");
                for o in &m.observations {
                    let _ = write!(out, " {o}");
                }
                out.push('\n');
            }
            for (s, model) in &m.models {
                let _ = writeln!(out, "STATE {s}");
                write_maxent(&mut out, model);
            }
        }
    }
    out
}

/// Sequence file:
///
/// ```text
/// FEATURES 8            # optional
/// SEQ s1
/// STEP 1 A o0 B
/// CAND A 0 4
/// CAND B 1 5
/// ENDSEQ
/// ```
pub fn parse_seq(text: &str) -> Result<Parsed<SeqDataset>> {
    let mut lines = Lines::new(text);
    let declared = features_line(&mut lines)?;
    let mut blocks: Vec<SeqEventBlock> = Vec::new();
    let mut max_id = None;
    while let Some((n, toks, _)) = lines.next() {
        if toks[0] != "SEQ" {
            return Err(Error::parse(n, format!("expected SEQ, found {:?}", toks[0])));
        }
        arity(n, &toks, 2)?;
        let id = toks[1];
        let mut prev_pos = 0usize;
        let mut pending: Option<(usize, Vec<&str>)> = None;
        let mut cands: Vec<Candidate> = Vec::new();
        let mut flush = |pending: &mut Option<(usize, Vec<&str>)>, cands: &mut Vec<Candidate>| -> Result<()> {
            if let Some((m, st)) = pending.take() {
                let pos: usize = num(m, st.get(1), "position")?;
                blocks.push(at(
                    m,
                    SeqEventBlock::new(id, pos, st[2], st[3], std::mem::take(cands), st[4]),
                )?);
            }
            Ok(())
        };
        loop {
            let (m, t, _) = lines.expect("STEP, CAND or ENDSEQ")?;
            match t[0] {
                "STEP" => {
                    arity(m, &t, 5)?;
                    flush(&mut pending, &mut cands)?;
                    let pos: usize = num(m, t.get(1), "position")?;
                    if pos != prev_pos && pos != prev_pos + 1 {
                        return Err(Error::parse(
                            m,
                            format!("positions must be consecutive from 1, found {pos} after {prev_pos}"),
                        ));
                    }
                    prev_pos = pos;
                    pending = Some((m, t));
                }
                "CAND" => {
                    if pending.is_none() {
                        return Err(Error::parse(m, "CAND before STEP"));
                    }
                    let c = parse_cand(m, &t)?;
                    max_id = max_id.max(c.active().last().copied());
                    cands.push(c);
                }
                "ENDSEQ" => {
                    arity(m, &t, 1)?;
                    flush(&mut pending, &mut cands)?;
                    break;
                }
                other => {
                    return Err(Error::parse(
                        m,
                        format!("expected STEP, CAND or ENDSEQ, found {other:?}"),
                    ))
                }
            }
        }
    }
    let mut warnings = Vec::new();
    if blocks.is_empty() {
        warnings.push("no sequences in file".to_string());
    }
    let g = declared.unwrap_or(max_id.map_or(0, |m| m + 1));
    Ok(Parsed {
        value: SeqDataset::new(blocks, g)?,
        warnings,
    })
}

pub fn write_seq(data: &SeqDataset) -> String {
    let mut out = format!("FEATURES {}\n", data.num_features);
    for (id, blocks) in data.sequences() {
        let _ = writeln!(out, "SEQ {id}");
        for b in blocks {
            let _ = writeln!(
                out,
                "STEP {} {} {} {}",
                b.position, b.source_state, b.observation, b.gold_next
            );
            for c in &b.candidates {
                write_cand(&mut out, c);
            }
        }
        out.push_str("ENDSEQ\n");
    }
    out
}

pub fn read_to_string(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    parse_model(&read_to_string(path)?)
}

pub fn read_events(path: &Path) -> Result<Parsed<Dataset>> {
    parse_events(&read_to_string(path)?)
}

pub fn read_seq(path: &Path) -> Result<Parsed<SeqDataset>> {
    parse_seq(&read_to_string(path)?)
}
