//! Lightweight lexical checks over emitted Verilog: module/endmodule
//! balance, instantiated modules defined, named port connections matching
//! the definition, plus parse-back of ROM contents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::VerilogProject;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub file: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.file, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(String),
    Sym(char),
}

const KEYWORDS: &[&str] = &[
    "module", "endmodule", "input", "output", "inout", "wire", "reg", "integer", "assign", "always", "initial",
    "begin", "end", "if", "else", "case", "endcase", "default", "function", "endfunction", "for", "repeat",
    "localparam", "parameter", "signed", "posedge", "negedge", "or", "and", "not",
];

fn tokenize(src: &str) -> Vec<Tok> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if src[i..].starts_with("//") {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if src[i..].starts_with("/*") {
            i = src[i + 2..].find("*/").map_or(b.len(), |k| i + 2 + k + 2);
        } else if c == b'"' {
            i += 1;
            while i < b.len() && b[i] != b'"' {
                i += if b[i] == b'\\' { 2 } else { 1 };
            }
            i += 1;
        } else if c == b'`' {
            // compiler directive: skip the line
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if c.is_ascii_alphabetic() || c == b'_' || c == b'$' {
            let s = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'$') {
                i += 1;
            }
            out.push(Tok::Ident(src[s..i].to_string()));
        } else if c.is_ascii_digit() || c == b'\'' {
            let s = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'\'') {
                i += 1;
            }
            out.push(Tok::Num(src[s..i].to_string()));
        } else {
            out.push(Tok::Sym(c as char));
            i += 1;
        }
    }
    out
}

fn ident(t: Option<&Tok>) -> Option<&str> {
    match t {
        Some(Tok::Ident(s)) if !KEYWORDS.contains(&s.as_str()) => Some(s),
        _ => None,
    }
}

/// Index just past the group opened at `open` (which must hold `(`).
fn skip_group(t: &[Tok], open: usize) -> usize {
    let mut depth = 0;
    for (k, tok) in t.iter().enumerate().skip(open) {
        match tok {
            Tok::Sym('(') => depth += 1,
            Tok::Sym(')') => {
                depth -= 1;
                if depth == 0 {
                    return k + 1;
                }
            }
            _ => {}
        }
    }
    t.len()
}

fn decimal(tok: &Tok) -> Option<i64> {
    match tok {
        Tok::Num(s) => s.parse().ok(),
        _ => None,
    }
}

#[derive(Debug, Clone)]
struct ModuleDef {
    ports: Vec<(String, u32)>,
}

#[derive(Debug, Clone)]
struct Instance {
    module: String,
    name: String,
    parent: String,
    conns: Vec<String>,
}

#[derive(Debug, Default)]
struct Scan {
    modules: BTreeMap<String, ModuleDef>,
    instances: Vec<Instance>,
    problems: Vec<String>,
}

fn header_ports(t: &[Tok], open: usize, close: usize) -> Vec<(String, u32)> {
    let mut ports = Vec::new();
    let mut chunk: Vec<&Tok> = Vec::new();
    let mut flush = |chunk: &mut Vec<&Tok>| {
        let name = chunk.iter().rev().find_map(|x| ident(Some(x)));
        let mut width = 1;
        if let Some(k) = chunk.iter().position(|x| **x == Tok::Sym('[')) {
            if let (Some(hi), Some(lo)) = (chunk.get(k + 1).and_then(|x| decimal(x)), chunk.get(k + 3).and_then(|x| decimal(x))) {
                width = (hi - lo + 1) as u32;
            }
        }
        if let Some(n) = name {
            ports.push((n.to_string(), width));
        }
        chunk.clear();
    };
    for tok in &t[open + 1..close - 1] {
        if *tok == Tok::Sym(',') {
            flush(&mut chunk);
        } else {
            chunk.push(tok);
        }
    }
    flush(&mut chunk);
    ports
}

fn scan(src: &str) -> Scan {
    let t = tokenize(src);
    let mut sc = Scan::default();
    let mut current: Option<String> = None;
    let mut i = 0;
    while i < t.len() {
        match &t[i] {
            Tok::Ident(k) if k == "module" => {
                if let Some(m) = &current {
                    sc.problems.push(format!("module inside module {m}"));
                }
                let Some(name) = ident(t.get(i + 1)).map(str::to_string) else {
                    sc.problems.push("module without a name".into());
                    i += 1;
                    continue;
                };
                let mut k = i + 2;
                if t.get(k) == Some(&Tok::Sym('#')) {
                    k = skip_group(&t, k + 1);
                }
                let mut ports = Vec::new();
                if t.get(k) == Some(&Tok::Sym('(')) {
                    let end = skip_group(&t, k);
                    ports = header_ports(&t, k, end);
                    k = end;
                }
                if sc.modules.insert(name.clone(), ModuleDef { ports }).is_some() {
                    sc.problems.push(format!("module {name} defined twice"));
                }
                current = Some(name);
                i = k;
            }
            Tok::Ident(k) if k == "endmodule" => {
                if current.take().is_none() {
                    sc.problems.push("endmodule without module".into());
                }
                i += 1;
            }
            Tok::Ident(_) => {
                let Some(a) = ident(t.get(i)) else {
                    i += 1;
                    continue;
                };
                let mut k = i + 1;
                if t.get(k) == Some(&Tok::Sym('#')) && t.get(k + 1) == Some(&Tok::Sym('(')) {
                    k = skip_group(&t, k + 1);
                }
                let is_inst = ident(t.get(k)).is_some()
                    && t.get(k + 1) == Some(&Tok::Sym('('))
                    && matches!(t.get(k + 2), Some(Tok::Sym('.')) | Some(Tok::Sym(')')));
                if !is_inst {
                    i += 1;
                    continue;
                }
                let name = ident(t.get(k)).unwrap_or_default().to_string();
                let end = skip_group(&t, k + 1);
                let mut conns = Vec::new();
                let mut depth = 0;
                for j in k + 1..end {
                    match &t[j] {
                        Tok::Sym('(') => depth += 1,
                        Tok::Sym(')') => depth -= 1,
                        Tok::Sym('.') if depth == 1 => {
                            if let Some(Tok::Ident(p)) = t.get(j + 1) {
                                conns.push(p.clone());
                            }
                        }
                        _ => {}
                    }
                }
                match &current {
                    Some(parent) => sc.instances.push(Instance { module: a.to_string(), name, parent: parent.clone(), conns }),
                    None => sc.problems.push(format!("instance {name} outside any module")),
                }
                i = end;
            }
            _ => i += 1,
        }
    }
    if let Some(m) = current {
        sc.problems.push(format!("module {m} has no endmodule"));
    }
    sc
}

/// Structural problems across the whole project; empty when well formed.
pub fn verify(p: &VerilogProject) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut defs: BTreeMap<String, (String, ModuleDef)> = BTreeMap::new();
    let mut insts: Vec<(String, Instance)> = Vec::new();
    for f in &p.sources {
        let sc = scan(&f.text);
        issues.extend(sc.problems.into_iter().map(|message| Issue { file: f.name.clone(), message }));
        for (name, d) in sc.modules {
            if defs.contains_key(&name) {
                issues.push(Issue { file: f.name.clone(), message: format!("module {name} defined in two files") });
            }
            defs.insert(name, (f.name.clone(), d));
        }
        insts.extend(sc.instances.into_iter().map(|x| (f.name.clone(), x)));
    }
    for (file, inst) in &insts {
        let at = |message: String| Issue { file: file.clone(), message };
        let Some((_, def)) = defs.get(&inst.module) else {
            issues.push(at(format!("{}: instance {} of undefined module {}", inst.parent, inst.name, inst.module)));
            continue;
        };
        let want: BTreeSet<&str> = def.ports.iter().map(|(n, _)| n.as_str()).collect();
        let mut seen = BTreeSet::new();
        for c in &inst.conns {
            if !want.contains(c.as_str()) {
                issues.push(at(format!("{}: {} connects unknown port {c}", inst.parent, inst.name)));
            }
            if !seen.insert(c.as_str()) {
                issues.push(at(format!("{}: {} connects port {c} twice", inst.parent, inst.name)));
            }
        }
        if seen.len() != want.len() || inst.conns.len() != def.ports.len() {
            issues.push(at(format!(
                "{}: {} connects {} of {} ports of {}",
                inst.parent,
                inst.name,
                inst.conns.len(),
                def.ports.len(),
                inst.module
            )));
        }
    }
    issues
}

/// Instances per module name across the project.
pub fn instance_counts(p: &VerilogProject) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for f in &p.sources {
        let sc = scan(&f.text);
        for name in sc.modules.keys() {
            out.entry(name.clone()).or_default();
        }
        for inst in sc.instances {
            *out.entry(inst.module).or_default() += 1;
        }
    }
    out
}

/// Declared ports of `module` with their bit widths.
pub fn port_widths(src: &str, module: &str) -> Option<Vec<(String, u32)>> {
    scan(src).modules.remove(module).map(|d| d.ports)
}

/// Value of a sized Verilog literal such as `16'shff80` or `10'd3`.
fn literal(s: &str) -> Option<i128> {
    let (w, rest) = s.split_once('\'')?;
    let w: u32 = w.parse().ok()?;
    let (signed, rest) = match rest.strip_prefix('s') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let (radix, digits) = match rest.chars().next()? {
        'h' => (16, &rest[1..]),
        'd' => (10, &rest[1..]),
        'b' => (2, &rest[1..]),
        _ => return None,
    };
    let v = u128::from_str_radix(&digits.replace('_', ""), radix).ok()?;
    Some(sign_extend(v, w, signed))
}

fn sign_extend(v: u128, w: u32, signed: bool) -> i128 {
    if !signed || w >= 128 {
        return v as i128;
    }
    let v = v & ((1u128 << w) - 1);
    if v >> (w - 1) & 1 == 1 {
        (v as i128) - (1i128 << w)
    } else {
        v as i128
    }
}

/// Case-ROM contents assigned to `var` inside function `func`, by address.
/// Addresses must run contiguously from zero.
pub fn parse_rom_function(src: &str, func: &str, var: &str) -> Option<Vec<i128>> {
    let start = src.lines().position(|l| {
        let l = l.trim();
        l.starts_with("function") && l.trim_end_matches(';').split_whitespace().last() == Some(func)
    })?;
    let mut out = Vec::new();
    let pat = format!("{var} = ");
    for line in src.lines().skip(start + 1) {
        let line = line.trim();
        if line.starts_with("endfunction") {
            break;
        }
        let Some((addr, body)) = line.split_once(':') else { continue };
        let Some(addr) = literal(addr.trim()) else { continue };
        let Some(k) = body.find(&pat) else { continue };
        let lit = body[k + pat.len()..].split(';').next()?.trim();
        if addr != out.len() as i128 {
            return None;
        }
        out.push(literal(lit)?);
    }
    (!out.is_empty()).then_some(out)
}

/// Values of a `$readmemh` image of `width`-bit two's complement words.
pub fn parse_mem(text: &str, width: u32) -> Option<Vec<i128>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| u128::from_str_radix(l, 16).ok().map(|v| sign_extend(v, width, true)))
        .collect()
}
