//! Verilog-2001 emission from an elaborated [`Netlist`].
//!
//! The text comes from fixed templates, one per generator of the original
//! tool flow: top, input layer, hidden layer, output layer, activation ROM,
//! MACC unit, controller and a self-checking testbench. Every constant
//! (weights, biases, output matrix, decoders, activation table) is read back
//! from the netlist, so what is emitted is what the equivalence gate ran.
//!
//! Register positions follow the templates; a retimed netlist emits the
//! same structure as before retiming. C-slowing and output pipelining are
//! carried by the netlist metadata and do change the emitted registers.

mod lint;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

pub use lint::{instance_counts, parse_mem, parse_rom_function, port_widths, verify, Issue};

use crate::fixed::{ceil_log2, FixedPointFormat};
use crate::model::{ActivationKind, StateSpaceModel};
use crate::netlist::{Netlist, NodeKind};
use crate::rtlsim::{functional_outputs, hex_bus, hex_word, RtlError};
use crate::sim::lut::{lut_eval_raw, LutRom, COEF_GUARD_BITS};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("netlist has no node `{0}`")]
    MissingNode(String),
    #[error("node `{0}` is not a ROM or constant")]
    NotATable(String),
    #[error("cannot emit: {0}")]
    Unsupported(String),
}

/// Raw stimulus and expected outputs for the testbench.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TestVectors {
    /// Input words per sample, in the input format.
    pub inputs: Vec<Vec<i128>>,
    /// Output words per sample, in the output format.
    pub expected: Vec<Vec<i128>>,
}

impl TestVectors {
    /// Quantized `samples` and their bit-accurate functional outputs.
    pub fn from_functional(m: &StateSpaceModel, n: &Netlist, samples: &[Vec<f64>]) -> Result<Self, RtlError> {
        let fmt = n.meta.formats.input;
        let inputs = samples
            .iter()
            .map(|u| u.iter().map(|&v| crate::fixed::quantize(v, fmt).raw()).collect())
            .collect();
        Ok(Self { inputs, expected: functional_outputs(m, n, samples)? })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmitConfig {
    /// Activation tables as `$readmemh` files instead of inline case ROMs.
    pub rom_files: bool,
    /// Module name prefix; derived from the model name when absent.
    pub prefix: Option<String>,
    pub vectors: TestVectors,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectFile {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerilogProject {
    /// Name of the top module.
    pub top: String,
    /// Verilog sources, in a fixed order.
    pub sources: Vec<ProjectFile>,
    /// Hex data: testbench vectors and optional ROM images.
    pub data: Vec<ProjectFile>,
}

impl VerilogProject {
    pub fn source(&self, name: &str) -> Option<&str> {
        self.sources.iter().find(|f| f.name == name).map(|f| f.text.as_str())
    }

    pub fn data_file(&self, name: &str) -> Option<&str> {
        self.data.iter().find(|f| f.name == name).map(|f| f.text.as_str())
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for f in self.sources.iter().chain(&self.data) {
            let p = dir.join(&f.name);
            std::fs::write(&p, &f.text)?;
            out.push(p);
        }
        Ok(out)
    }
}

pub const SOURCE_FILES: [&str; 8] = [
    "top.v",
    "input_layer.v",
    "hidden_layer.v",
    "output_layer.v",
    "activation_rom.v",
    "macc.v",
    "controller.v",
    "testbench.v",
];

macro_rules! ln {
    ($s:expr) => { $s.push('\n') };
    ($s:expr, $($t:tt)*) => {{ let _ = writeln!($s, $($t)*); }};
}

/// Signed sized literal in two's complement hex.
fn slit(v: i128, w: u32) -> String {
    format!("{w}'sh{}", hex_word(v, w))
}

fn ulit(v: usize, w: u32) -> String {
    format!("{w}'d{v}")
}

fn range(w: u32) -> String {
    format!("[{}:0]", w - 1)
}

fn sanitize(name: &str) -> String {
    let mut s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    if !s.starts_with(|c: char| c.is_ascii_alphabetic()) {
        s.insert_str(0, "m_");
    }
    s
}

/// Resolved emission context.
struct Ctx<'a> {
    n: &'a Netlist,
    by_name: HashMap<&'a str, usize>,
    prefix: String,
    rom_files: bool,
    l: usize,
    m: usize,
    p: usize,
    lanes: usize,
    wi: u32,
    ws: u32,
    ww: u32,
    wa: u32,
    wo: u32,
    slow: usize,
    pipe: usize,
}

impl<'a> Ctx<'a> {
    fn new(n: &'a Netlist, cfg: &EmitConfig) -> Result<Self, EmitError> {
        let meta = &n.meta;
        let f = meta.formats;
        if let Some(lut) = &meta.lut {
            if lut.in_fmt().word_length() != f.state.word_length() || lut.out_fmt().word_length() != f.state.word_length() {
                return Err(EmitError::Unsupported("activation table formats differ from the state format".into()));
            }
        }
        let prefix = cfg.prefix.clone().unwrap_or_else(|| sanitize(if meta.model.is_empty() { "design" } else { &meta.model }));
        Ok(Self {
            n,
            by_name: n.nodes.iter().enumerate().map(|(i, x)| (x.name.as_str(), i)).collect(),
            prefix: sanitize(&prefix),
            rom_files: cfg.rom_files,
            l: meta.input_dim,
            m: meta.state_dim,
            p: meta.output_dim,
            lanes: meta.multipliers_per_node,
            wi: f.input.word_length(),
            ws: f.state.word_length(),
            ww: f.weight.word_length(),
            wa: f.accumulator.word_length(),
            wo: f.output.word_length(),
            slow: meta.slow,
            pipe: meta.out_pipeline * meta.slow,
        })
    }

    fn module(&self, role: &str) -> String {
        format!("{}_{role}", self.prefix)
    }

    fn table(&self, name: &str) -> Result<Arc<Vec<i128>>, EmitError> {
        let &i = self.by_name.get(name).ok_or_else(|| EmitError::MissingNode(name.into()))?;
        match &self.n.nodes[i].kind {
            NodeKind::Rom { table } => Ok(table.clone()),
            NodeKind::Const(v) => Ok(Arc::new(vec![*v])),
            _ => Err(EmitError::NotATable(name.into())),
        }
    }

    fn konst(&self, name: &str) -> Result<i128, EmitError> {
        Ok(self.table(name)?[0])
    }

    /// Width of a controller decoder output.
    fn decoder_width(&self, name: &str) -> Result<u32, EmitError> {
        let t = self.table(name)?;
        let max = t.iter().copied().max().unwrap_or(0).max(0) as u64;
        Ok(ceil_log2(max + 1).max(1))
    }

    fn state_width(&self) -> u32 {
        self.n.meta.fsm.state_width()
    }

    fn activation_lut(&self) -> Option<&LutRom> {
        match self.n.meta.activation {
            ActivationKind::Identity => None,
            _ => self.n.meta.lut.as_deref(),
        }
    }

    fn output_lut(&self) -> Option<&LutRom> {
        match self.n.meta.output_activation {
            None | Some(ActivationKind::Identity) => None,
            Some(_) => self.n.meta.lut.as_deref(),
        }
    }
}

/// Register (or, after C-slowing, a chain of `slow` registers) named `name`
/// whose next value is `d`; `d` may refer to `name` for hold terms.
fn register(s: &mut String, name: &str, decl: &str, init: &str, d: &str, slow: usize) {
    if slow <= 1 {
        ln!(s, "    reg {decl} {name};");
        ln!(s, "    always @(posedge clock)");
        ln!(s, "        if (reset) {name} <= {init};");
        ln!(s, "        else {name} <= {d};");
        return;
    }
    ln!(s, "    reg {decl} {name}_c [0:{}];", slow - 1);
    ln!(s, "    wire {decl} {name} = {name}_c[{}];", slow - 1);
    ln!(s, "    integer {name}_i;");
    ln!(s, "    always @(posedge clock)");
    ln!(s, "        if (reset)");
    ln!(s, "            for ({name}_i = 0; {name}_i < {slow}; {name}_i = {name}_i + 1) {name}_c[{name}_i] <= {init};");
    ln!(s, "        else begin");
    ln!(s, "            {name}_c[0] <= {d};");
    ln!(s, "            for ({name}_i = 1; {name}_i < {slow}; {name}_i = {name}_i + 1) {name}_c[{name}_i] <= {name}_c[{name}_i - 1];");
    ln!(s, "        end");
}

/// Plain delay line of `depth` registers, reset to zero.
fn delay_line(s: &mut String, name: &str, decl: &str, width: u32, d: &str, depth: usize) {
    if depth == 0 {
        ln!(s, "    wire {decl} {name} = {d};");
        return;
    }
    let zero = if decl.contains("signed") { slit(0, width) } else { format!("{width}'d0") };
    register(s, name, decl, &zero, d, depth);
}

fn clamp_tail(s: &mut String, fname: &str, v: &str, k: u32, to: FixedPointFormat) {
    let wb = to.word_length();
    ln!(s, "        if ({v} > {}) {fname} = {};", slit(to.max_raw(), k), slit(to.max_raw(), wb));
    ln!(s, "        else if ({v} < {}) {fname} = {};", slit(to.min_raw(), k), slit(to.min_raw(), wb));
    ln!(s, "        else {fname} = {v}[{}:0];", wb - 1);
}

fn requant_name(a: FixedPointFormat, b: FixedPointFormat) -> String {
    format!("rq_{}_{}_to_{}_{}", a.word_length(), a.frac_length(), b.word_length(), b.frac_length())
}

/// Function moving a raw value from format `a` to `b`: round half away
/// from zero, then saturate.
fn requant_fn(s: &mut String, a: FixedPointFormat, b: FixedPointFormat) {
    let name = requant_name(a, b);
    let (wa, fa, wb, fb) = (a.word_length(), a.frac_length(), b.word_length(), b.frac_length());
    let k = if fb > fa { wa + (fb - fa) + 1 } else { wa.max(fa - fb) + 2 }.max(wb + 1);
    ln!(s, "    function signed {} {name};", range(wb));
    ln!(s, "        input signed {} a;", range(wa));
    ln!(s, "        reg signed {} v;", range(k));
    ln!(s, "        reg signed {} q;", range(k));
    ln!(s, "    begin");
    ln!(s, "        v = a;");
    if fb > fa {
        ln!(s, "        q = v <<< {};", fb - fa);
    } else if fb < fa {
        let sh = fa - fb;
        ln!(s, "        q = v[{}] ? -v : v;", k - 1);
        ln!(s, "        q = (q + {}) >>> {sh};", slit(1i128 << (sh - 1), k));
        ln!(s, "        if (v[{}]) q = -q;", k - 1);
    } else {
        ln!(s, "        q = v;");
    }
    clamp_tail(s, &name, "q", k, b);
    ln!(s, "    end");
    ln!(s, "    endfunction");
}

/// Saturating add of two accumulator words.
fn sat_add_fn(s: &mut String, acc: FixedPointFormat) {
    let w = acc.word_length();
    let k = w + 1;
    ln!(s, "    function signed {} sat_add;", range(w));
    ln!(s, "        input signed {} a;", range(w));
    ln!(s, "        input signed {} b;", range(w));
    ln!(s, "        reg signed {} t;", range(k));
    ln!(s, "    begin");
    ln!(s, "        t = a;");
    ln!(s, "        t = t + b;");
    clamp_tail(s, "sat_add", "t", k, acc);
    ln!(s, "    end");
    ln!(s, "    endfunction");
}

/// Exact product of a weight and a state word, saturated to the accumulator.
fn mul_fn(s: &mut String, name: &str, w: FixedPointFormat, x: FixedPointFormat, acc: FixedPointFormat) {
    let k = w.word_length() + x.word_length();
    ln!(s, "    function signed {} {name};", range(acc.word_length()));
    ln!(s, "        input signed {} c;", range(w.word_length()));
    ln!(s, "        input signed {} v;", range(x.word_length()));
    ln!(s, "        reg signed {} t;", range(k.max(acc.word_length()) + 1));
    ln!(s, "    begin");
    ln!(s, "        t = c * v;");
    clamp_tail(s, name, "t", k.max(acc.word_length()) + 1, acc);
    ln!(s, "    end");
    ln!(s, "    endfunction");
}

/// Table-source names for the activation function body.
struct LutNames {
    func: String,
    /// Array prefix when tables live in `$readmemh` images.
    arrays: Option<String>,
}

/// Coefficient word and Horner register widths.
fn lut_widths(lut: &LutRom) -> Result<(u32, u32), EmitError> {
    let d = lut.degree();
    let cw = lut.coef_fmt().word_length();
    let hw = cw + ceil_log2(u64::from(d) + 1) + 2;
    let pw = hw + lut.grid().bin_shift + 2;
    if d > 0 && pw > 127 {
        return Err(EmitError::Unsupported(format!("interpolated table needs {pw}-bit products")));
    }
    Ok((cw, pw.max(lut.out_fmt().word_length() + COEF_GUARD_BITS + 2)))
}

/// Table image names: entries first, then one per coefficient order.
pub fn lut_image_names(prefix: &str, lut: &LutRom) -> Vec<String> {
    let mut v = vec![format!("{prefix}_act_entries.mem")];
    v.extend((1..=lut.degree()).map(|k| format!("{prefix}_act_c{k}.mem")));
    v
}

/// Combinational activation function over a raw word of width `wx`
/// (declarations for the table arrays included when `names.arrays` is set).
fn lut_fn(s: &mut String, lut: &LutRom, wx: u32, names: &LutNames, prefix: &str) -> Result<(), EmitError> {
    let (cw, pw) = lut_widths(lut)?;
    let g = lut.grid();
    let ab = lut.addr_bits();
    let bs = g.bin_shift;
    let sh = g.frac - lut.in_fmt().frac_length();
    let span = 1i128 << (ab + bs);
    let bits = |v: i128| 128 - v.unsigned_abs().leading_zeros() + 1;
    let k = (wx + sh).max(bits(g.lo)).max(ab + bs + 1) + 2;
    let wo = lut.out_fmt().word_length();
    let d = lut.degree() as usize;
    let f = &names.func;
    if let Some(arr) = &names.arrays {
        let files = lut_image_names(prefix, lut);
        ln!(s, "    reg {} {arr}_entries [0:{}];", range(wo), lut.len() - 1);
        for c in 1..=d {
            ln!(s, "    reg {} {arr}_c{c} [0:{}];", range(cw), lut.len() - 1);
        }
        ln!(s, "    initial begin");
        ln!(s, "        $readmemh(\"{}\", {arr}_entries);", files[0]);
        for c in 1..=d {
            ln!(s, "        $readmemh(\"{}\", {arr}_c{c});", files[c]);
        }
        ln!(s, "    end");
    }
    ln!(s, "    function signed {} {f};", range(wo));
    ln!(s, "        input signed {} x;", range(wx));
    ln!(s, "        reg signed {} g;", range(k));
    ln!(s, "        reg {} addr;", range(ab));
    if bs > 0 {
        ln!(s, "        reg {} resid;", range(bs));
    }
    ln!(s, "        reg signed {} entry;", range(wo));
    for c in 1..=d {
        ln!(s, "        reg signed {} c{c};", range(cw));
    }
    if d > 0 && bs > 0 {
        ln!(s, "        reg signed {} h;", range(pw));
        ln!(s, "        reg signed {} t;", range(pw));
        ln!(s, "        reg signed {} r;", range(pw));
    }
    ln!(s, "    begin");
    ln!(s, "        g = x;");
    if sh > 0 {
        ln!(s, "        g = g <<< {sh};");
    }
    ln!(s, "        g = g - {};", slit(g.lo, k));
    ln!(s, "        if (g[{}]) g = {};", k - 1, slit(0, k));
    ln!(s, "        else if (g > {}) g = {};", slit(span - 1, k), slit(span - 1, k));
    ln!(s, "        addr = g[{}:{}];", ab + bs - 1, bs);
    if bs > 0 {
        ln!(s, "        resid = g[{}:0];", bs - 1);
    }
    match &names.arrays {
        Some(arr) => {
            ln!(s, "        entry = {arr}_entries[addr];");
            for c in 1..=d {
                ln!(s, "        c{c} = {arr}_c{c}[addr];");
            }
        }
        None => {
            ln!(s, "        case (addr)");
            for a in 0..lut.len() {
                if d == 0 {
                    ln!(s, "            {}: entry = {};", ulit(a, ab), slit(lut.entries()[a], wo));
                } else {
                    let mut line = format!("            {}: begin entry = {};", ulit(a, ab), slit(lut.entries()[a], wo));
                    for c in 1..=d {
                        let _ = write!(line, " c{c} = {};", slit(lut.coeffs()[c - 1][a], cw));
                    }
                    line.push_str(" end");
                    ln!(s, "{line}");
                }
            }
            ln!(s, "            default: entry = {};", slit(0, wo));
            ln!(s, "        endcase");
        }
    }
    if d == 0 || bs == 0 {
        ln!(s, "        {f} = entry;");
    } else {
        // Horner over the in-bin residual, then fold into the entry
        let gf = g.frac;
        let round = |s: &mut String, src: &str, dst: &str, shift: u32| {
            if shift == 0 {
                ln!(s, "        {dst} = {src};");
                return;
            }
            ln!(s, "        r = {src}[{}] ? -{src} : {src};", pw - 1);
            ln!(s, "        r = (r + {}) >>> {shift};", slit(1i128 << (shift - 1), pw));
            ln!(s, "        {dst} = {src}[{}] ? -r : r;", pw - 1);
        };
        ln!(s, "        h = {};", slit(0, pw));
        for c in (1..=d).rev() {
            ln!(s, "        h = h + c{c};");
            ln!(s, "        t = h * $signed({{1'b0, resid}});");
            round(s, "t", "h", gf);
        }
        ln!(s, "        t = entry;");
        ln!(s, "        t = (t <<< {COEF_GUARD_BITS}) + h;");
        round(s, "t", "h", COEF_GUARD_BITS);
        clamp_tail(s, f, "h", pw, lut.out_fmt());
    }
    ln!(s, "    end");
    ln!(s, "    endfunction");
    Ok(())
}

fn header(s: &mut String, what: &str) {
    ln!(s, "// {what}");
    ln!(s, "// generated by statesynth; do not edit");
    ln!(s);
}

fn ports(s: &mut String, module: &str, list: &[String]) {
    ln!(s, "module {module} (");
    for (i, p) in list.iter().enumerate() {
        ln!(s, "    {p}{}", if i + 1 < list.len() { "," } else { "" });
    }
    ln!(s, ");");
}

fn instance(s: &mut String, module: &str, name: &str, conns: &[(&str, String)]) {
    ln!(s, "    {module} {name} (");
    for (i, (p, e)) in conns.iter().enumerate() {
        ln!(s, "        .{p}({e}){}", if i + 1 < conns.len() { "," } else { "" });
    }
    ln!(s, "    );");
}

fn control_ports(c: &Ctx<'_>) -> Result<Vec<(String, u32)>, EmitError> {
    Ok(vec![
        ("capture".into(), 1),
        ("first".into(), 1),
        ("acc_en".into(), 1),
        ("req_en".into(), 1),
        ("act_en".into(), 1),
        ("dv_out".into(), 1),
        ("layer".into(), c.decoder_width("ctrl_layer")?),
        ("wsel".into(), c.decoder_width("ctrl_wsel")?),
        ("opsel".into(), opsel_width(c)? * c.lanes as u32),
    ])
}

fn opsel_width(c: &Ctx<'_>) -> Result<u32, EmitError> {
    (0..c.lanes).map(|q| c.decoder_width(&format!("ctrl_opsel{q}"))).try_fold(1, |a, w| w.map(|w| a.max(w)))
}

fn wire_decl(w: u32) -> String {
    if w == 1 {
        String::new()
    } else {
        range(w)
    }
}

pub fn emit_top(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    let c = Ctx::new(n, cfg)?;
    top(&c)
}

fn top(c: &Ctx<'_>) -> Result<String, EmitError> {
    let mut s = String::new();
    header(&mut s, &format!("top level of {}", c.n.meta.model));
    ports(
        &mut s,
        &c.module("top"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            "input wire data_valid_in".into(),
            format!("input wire {} u", range(c.l as u32 * c.wi)),
            format!("output wire {} y", range(c.p as u32 * c.wo)),
            "output wire data_valid_out".into(),
        ],
    );
    let ctl = control_ports(c)?;
    for (name, w) in &ctl {
        ln!(s, "    wire {} {name};", wire_decl(*w));
    }
    ln!(s, "    wire {} u_q;", range(c.l as u32 * c.ws));
    ln!(s, "    wire {} x;", range(c.m as u32 * c.ws));
    ln!(s);
    let mut conns: Vec<(&str, String)> =
        vec![("clock", "clock".into()), ("reset", "reset".into()), ("data_valid_in", "data_valid_in".into())];
    conns.extend(ctl.iter().map(|(p, _)| (p.as_str(), p.clone())));
    instance(&mut s, &c.module("controller"), "ctrl", &conns);
    instance(
        &mut s,
        &c.module("input_layer"),
        "layer_in",
        &[
            ("clock", "clock".into()),
            ("reset", "reset".into()),
            ("capture", "capture".into()),
            ("u", "u".into()),
            ("u_q", "u_q".into()),
        ],
    );
    let mut conns: Vec<(&str, String)> = vec![("clock", "clock".into()), ("reset", "reset".into())];
    conns.extend(ctl.iter().filter(|(p, _)| p != "dv_out").map(|(p, _)| (p.as_str(), p.clone())));
    conns.push(("u_q", "u_q".into()));
    conns.push(("x", "x".into()));
    instance(&mut s, &c.module("hidden_layer"), "layer_hidden", &conns);
    instance(
        &mut s,
        &c.module("output_layer"),
        "layer_out",
        &[
            ("clock", "clock".into()),
            ("reset", "reset".into()),
            ("x", "x".into()),
            ("dv_in", "dv_out".into()),
            ("y", "y".into()),
            ("data_valid_out", "data_valid_out".into()),
        ],
    );
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_controller(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    controller(&Ctx::new(n, cfg)?)
}

fn controller(c: &Ctx<'_>) -> Result<String, EmitError> {
    let fsm = &c.n.meta.fsm;
    let sw = c.state_width();
    let mut s = String::new();
    header(&mut s, &format!("Moore controller: {} states, {} layers", fsm.state_count(), fsm.layers()));
    let ctl = control_ports(c)?;
    let mut list = vec!["input wire clock".to_string(), "input wire reset".into(), "input wire data_valid_in".into()];
    list.extend(ctl.iter().map(|(p, w)| format!("output wire {} {p}", wire_decl(*w)).replace("  ", " ")));
    ports(&mut s, &c.module("controller"), &list);
    register(&mut s, "state", &range(sw), &ulit(0, sw), "next", c.slow);
    ln!(s, "    reg {} next;", range(sw));
    ln!(s, "    always @* begin");
    ln!(s, "        case (state)");
    for code in 0..fsm.state_count() {
        let (n0, n1) = (fsm.next(code, false), fsm.next(code, true));
        let label = fsm.decode(code).map(|x| x.to_string()).unwrap_or_default();
        if n0 == n1 {
            ln!(s, "            {}: next = {}; // {label}", ulit(code, sw), ulit(n0, sw));
        } else {
            ln!(s, "            {}: next = data_valid_in ? {} : {}; // {label}", ulit(code, sw), ulit(n1, sw), ulit(n0, sw));
        }
    }
    ln!(s, "            default: next = {};", ulit(0, sw));
    ln!(s, "        endcase");
    ln!(s, "    end");
    ln!(s);

    // decoded outputs, one table per signal as in the netlist
    let osw = opsel_width(c)?;
    let mut decoded: Vec<(String, u32, Arc<Vec<i128>>)> = Vec::new();
    for (sig, node) in [
        ("accept", "ctrl_accept"),
        ("first_r", "ctrl_first"),
        ("acc_en_r", "ctrl_acc_en"),
        ("req_en_r", "ctrl_req_en"),
        ("act_en_r", "ctrl_act_en"),
        ("dv_out_r", "ctrl_dv_out"),
        ("layer_r", "ctrl_layer"),
        ("wsel_r", "ctrl_wsel"),
    ] {
        decoded.push((sig.to_string(), c.decoder_width(node)?, c.table(node)?));
    }
    for q in 0..c.lanes {
        decoded.push((format!("opsel{q}_r"), osw, c.table(&format!("ctrl_opsel{q}"))?));
    }
    for (sig, w, _) in &decoded {
        ln!(s, "    reg {} {sig};", wire_decl(*w));
    }
    ln!(s, "    always @* begin");
    // defaults are the values of unused codes, when there are any
    let fallback = |t: &[i128]| t.get(fsm.state_count()).copied().unwrap_or(0);
    for (sig, w, t) in &decoded {
        ln!(s, "        {sig} = {};", ulit(fallback(t) as usize, *w));
    }
    ln!(s, "        case (state)");
    for code in 0..fsm.state_count() {
        let mut parts = Vec::new();
        for (sig, w, t) in &decoded {
            if t[code] != fallback(t) {
                parts.push(format!("{sig} = {};", ulit(t[code] as usize, *w)));
            }
        }
        if !parts.is_empty() {
            ln!(s, "            {}: begin {} end", ulit(code, sw), parts.join(" "));
        }
    }
    ln!(s, "            default: ;");
    ln!(s, "        endcase");
    ln!(s, "    end");
    ln!(s);
    ln!(s, "    assign capture = accept & data_valid_in;");
    for sig in ["first", "acc_en", "req_en", "act_en", "dv_out", "layer", "wsel"] {
        ln!(s, "    assign {sig} = {sig}_r;");
    }
    let lanes: Vec<String> = (0..c.lanes).rev().map(|q| format!("opsel{q}_r")).collect();
    ln!(s, "    assign opsel = {{{}}};", lanes.join(", "));
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_input_layer(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    input_layer(&Ctx::new(n, cfg)?)
}

fn input_layer(c: &Ctx<'_>) -> Result<String, EmitError> {
    let f = c.n.meta.formats;
    let mut s = String::new();
    header(&mut s, &format!("input layer: captures {} input words into the state format", c.l));
    ports(
        &mut s,
        &c.module("input_layer"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            "input wire capture".into(),
            format!("input wire {} u", range(c.l as u32 * c.wi)),
            format!("output wire {} u_q", range(c.l as u32 * c.ws)),
        ],
    );
    requant_fn(&mut s, f.input, f.state);
    let rq = requant_name(f.input, f.state);
    for j in 0..c.l {
        ln!(s);
        ln!(s, "    wire signed {} u{j} = u[{}:{}];", range(c.wi), (j as u32 + 1) * c.wi - 1, j as u32 * c.wi);
        register(&mut s, &format!("u{j}_q"), &format!("signed {}", range(c.ws)), &slit(0, c.ws), &format!("capture ? {rq}(u{j}) : u{j}_q"), c.slow);
        ln!(s, "    assign u_q[{}:{}] = u{j}_q;", (j as u32 + 1) * c.ws - 1, j as u32 * c.ws);
    }
    ln!(s, "endmodule");
    Ok(s)
}

fn rom_block(s: &mut String, name: &str, w: u32, sel: &str, sel_w: u32, table: &[i128]) {
    ln!(s, "    reg signed {} {name};", range(w));
    ln!(s, "    always @* begin");
    ln!(s, "        case ({sel})");
    for (a, &v) in table.iter().enumerate().take(table.len() - 1) {
        ln!(s, "            {}: {name} = {};", ulit(a, sel_w), slit(v, w));
    }
    // out-of-range addresses read the last entry
    ln!(s, "            default: {name} = {};", slit(*table.last().expect("non-empty ROM"), w));
    ln!(s, "        endcase");
    ln!(s, "    end");
}

pub fn emit_hidden_layer(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    hidden_layer(&Ctx::new(n, cfg)?)
}

fn hidden_layer(c: &Ctx<'_>) -> Result<String, EmitError> {
    let f = c.n.meta.formats;
    let osw = opsel_width(c)?;
    let lw = c.decoder_width("ctrl_layer")?;
    let wsw = c.decoder_width("ctrl_wsel")?;
    let mut s = String::new();
    header(
        &mut s,
        &format!(
            "shared layer: {} nodes x {} MACCs, reused for {} layers",
            c.m, c.lanes, c.n.meta.layers
        ),
    );
    ports(
        &mut s,
        &c.module("hidden_layer"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            "input wire capture".into(),
            "input wire first".into(),
            "input wire acc_en".into(),
            "input wire req_en".into(),
            "input wire act_en".into(),
            format!("input wire {} layer", range(lw)),
            format!("input wire {} wsel", range(wsw)),
            format!("input wire {} opsel", range(osw * c.lanes as u32)),
            format!("input wire {} u_q", range(c.l as u32 * c.ws)),
            format!("output wire {} x", range(c.m as u32 * c.ws)),
        ],
    );
    sat_add_fn(&mut s, f.accumulator);
    requant_fn(&mut s, f.accumulator, f.state);
    let rq = requant_name(f.accumulator, f.state);
    let st = format!("signed {}", range(c.ws));
    ln!(s);
    for j in 0..c.l {
        ln!(s, "    wire {st} u{j}_q = u_q[{}:{}];", (j as u32 + 1) * c.ws - 1, j as u32 * c.ws);
    }
    for i in 0..c.m {
        ln!(s, "    wire {st} act{i};");
    }
    ln!(s);
    ln!(s, "    // state bank");
    for i in 0..c.m {
        let x0 = c.konst(&format!("x{i}_init"))?;
        register(
            &mut s,
            &format!("x{i}"),
            &st,
            &slit(x0, c.ws),
            &format!("capture ? {} : (act_en ? act{i} : x{i})", slit(x0, c.ws)),
            c.slow,
        );
        ln!(s, "    assign x[{}:{}] = x{i};", (i as u32 + 1) * c.ws - 1, i as u32 * c.ws);
    }
    ln!(s);
    ln!(s, "    // operand select");
    for q in 0..c.lanes {
        ln!(s, "    reg {st} operand{q};");
        ln!(s, "    always @* begin");
        ln!(s, "        case (opsel[{}:{}])", (q as u32 + 1) * osw - 1, q as u32 * osw);
        for i in 0..c.m {
            ln!(s, "            {}: operand{q} = x{i};", ulit(i, osw));
        }
        for j in 0..c.l {
            ln!(s, "            {}: operand{q} = u{j}_q;", ulit(c.m + j, osw));
        }
        ln!(s, "            default: operand{q} = {};", slit(0, c.ws));
        ln!(s, "        endcase");
        ln!(s, "    end");
    }
    for i in 0..c.m {
        ln!(s);
        ln!(s, "    // node {i}");
        rom_block(&mut s, &format!("node{i}_bias"), c.wa, "layer", lw, &c.table(&format!("node{i}_bias"))?);
        for q in 0..c.lanes {
            let base = format!("node{i}_macc{q}");
            rom_block(&mut s, &format!("{base}_weight"), c.ww, "wsel", wsw, &c.table(&format!("{base}_weight"))?);
            ln!(s, "    wire signed {} {base}_acc;", range(c.wa));
            ln!(s, "    wire signed {} {base}_product;", range(c.ww + c.ws));
            let init = if q == 0 { format!("node{i}_bias") } else { slit(0, c.wa) };
            instance(
                &mut s,
                &c.module("macc"),
                &base,
                &[
                    ("clock", "clock".into()),
                    ("reset", "reset".into()),
                    ("first", "first".into()),
                    ("acc_en", "acc_en".into()),
                    ("weight", format!("{base}_weight")),
                    ("operand", format!("operand{q}")),
                    ("init", init),
                    ("product", format!("{base}_product")),
                    ("acc", format!("{base}_acc")),
                ],
            );
        }
        let mut total = format!("node{i}_macc0_acc");
        for q in 1..c.lanes {
            total = format!("sat_add({total}, node{i}_macc{q}_acc)");
        }
        ln!(s, "    wire {st} node{i}_pre = {rq}({total});");
        instance(
            &mut s,
            &c.module("activation"),
            &format!("node{i}_act"),
            &[
                ("clock", "clock".into()),
                ("reset", "reset".into()),
                ("en", "req_en".into()),
                ("x", format!("node{i}_pre")),
                ("y", format!("act{i}")),
            ],
        );
    }
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_macc(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    macc(&Ctx::new(n, cfg)?)
}

fn macc(c: &Ctx<'_>) -> Result<String, EmitError> {
    let f = c.n.meta.formats;
    let mut s = String::new();
    header(
        &mut s,
        &format!("MACC: {} x {} -> {}-bit product, {}-bit accumulator", f.weight, f.state, c.ww + c.ws, c.wa),
    );
    ports(
        &mut s,
        &c.module("macc"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            "input wire first".into(),
            "input wire acc_en".into(),
            format!("input wire signed {} weight", range(c.ww)),
            format!("input wire signed {} operand", range(c.ws)),
            format!("input wire signed {} init", range(c.wa)),
            format!("output wire signed {} product", range(c.ww + c.ws)),
            format!("output wire signed {} acc", range(c.wa)),
        ],
    );
    sat_add_fn(&mut s, f.accumulator);
    mul_fn(&mut s, "widen", f.weight, f.state, f.accumulator);
    ln!(s);
    ln!(s, "    assign product = weight * operand;");
    ln!(s, "    wire signed {} base = first ? init : acc_q;", range(c.wa));
    ln!(s, "    wire signed {} sum = sat_add(base, widen(weight, operand));", range(c.wa));
    register(&mut s, "acc_q", &format!("signed {}", range(c.wa)), &slit(0, c.wa), "acc_en ? sum : acc_q", c.slow);
    ln!(s, "    assign acc = acc_q;");
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_activation_rom(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    activation(&Ctx::new(n, cfg)?)
}

fn activation(c: &Ctx<'_>) -> Result<String, EmitError> {
    let mut s = String::new();
    let lut = c.activation_lut();
    match lut {
        Some(t) => header(
            &mut s,
            &format!(
                "activation ROM: {:?}, {} entries over [{}, {}), degree {}, registered read",
                t.kind(),
                t.len(),
                t.range().0,
                t.range().1,
                t.degree()
            ),
        ),
        None => header(&mut s, "activation: identity, registered"),
    }
    ports(
        &mut s,
        &c.module("activation"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            "input wire en".into(),
            format!("input wire signed {} x", range(c.ws)),
            format!("output wire signed {} y", range(c.ws)),
        ],
    );
    let st = format!("signed {}", range(c.ws));
    match lut {
        Some(t) => {
            let names = LutNames { func: "act".into(), arrays: c.rom_files.then(|| "act".to_string()) };
            lut_fn(&mut s, t, c.ws, &names, &c.prefix)?;
            // reset value equals the function at the netlist's reset input
            let init = lut_eval_raw(t, 0).raw();
            register(&mut s, "y_q", &st, &slit(init, c.ws), "en ? act(x) : y_q", c.slow);
        }
        None => register(&mut s, "y_q", &st, &slit(0, c.ws), "en ? x : y_q", c.slow),
    }
    ln!(s, "    assign y = y_q;");
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_output_layer(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    output_layer(&Ctx::new(n, cfg)?)
}

fn output_layer(c: &Ctx<'_>) -> Result<String, EmitError> {
    let f = c.n.meta.formats;
    let mut s = String::new();
    let end = c.n.meta.output_activation;
    header(
        &mut s,
        &format!(
            "output layer: {} outputs from {} state words, end activation {}",
            c.p,
            c.m,
            end.map_or("none".to_string(), |k| format!("{k:?}").to_lowercase())
        ),
    );
    ports(
        &mut s,
        &c.module("output_layer"),
        &[
            "input wire clock".into(),
            "input wire reset".into(),
            format!("input wire {} x", range(c.m as u32 * c.ws)),
            "input wire dv_in".into(),
            format!("output wire {} y", range(c.p as u32 * c.wo)),
            "output wire data_valid_out".into(),
        ],
    );
    sat_add_fn(&mut s, f.accumulator);
    mul_fn(&mut s, "widen", f.weight, f.state, f.accumulator);
    if end.is_some() {
        requant_fn(&mut s, f.accumulator, f.state);
        requant_fn(&mut s, f.state, f.output);
    } else {
        requant_fn(&mut s, f.accumulator, f.output);
    }
    if let Some(t) = c.output_lut() {
        let names = LutNames { func: "end_act".into(), arrays: c.rom_files.then(|| "end_act".to_string()) };
        lut_fn(&mut s, t, c.ws, &names, &c.prefix)?;
    }
    let st = format!("signed {}", range(c.ws));
    let acc = format!("signed {}", range(c.wa));
    ln!(s);
    for i in 0..c.m {
        ln!(s, "    wire {st} x{i} = x[{}:{}];", (i as u32 + 1) * c.ws - 1, i as u32 * c.ws);
    }
    for r in 0..c.p {
        ln!(s);
        for i in 0..c.m {
            let cv = c.konst(&format!("y{r}_c{i}"))?;
            delay_line(&mut s, &format!("y{r}_mul{i}"), &acc, c.wa, &format!("widen({}, x{i})", slit(cv, c.ww)), c.pipe);
        }
        let mut sum = format!("y{r}_mul0");
        for i in 1..c.m {
            sum = format!("sat_add({sum}, y{r}_mul{i})");
        }
        ln!(s, "    wire {acc} y{r}_sum = {sum};");
        let v = match end {
            Some(kind) => {
                let pre = format!("{}(y{r}_sum)", requant_name(f.accumulator, f.state));
                let act = match (kind, c.output_lut()) {
                    (ActivationKind::Identity, _) | (_, None) => pre,
                    (_, Some(_)) => format!("end_act({pre})"),
                };
                ln!(s, "    wire {st} y{r}_act = {act};");
                format!("{}(y{r}_act)", requant_name(f.state, f.output))
            }
            None => format!("{}(y{r}_sum)", requant_name(f.accumulator, f.output)),
        };
        ln!(s, "    assign y[{}:{}] = {v};", (r as u32 + 1) * c.wo - 1, r as u32 * c.wo);
    }
    ln!(s);
    delay_line(&mut s, "dv_q", "", 1, "dv_in", c.pipe);
    ln!(s, "    assign data_valid_out = dv_q;");
    ln!(s, "endmodule");
    Ok(s)
}

pub fn emit_testbench(n: &Netlist, cfg: &EmitConfig) -> Result<String, EmitError> {
    testbench(&Ctx::new(n, cfg)?, &cfg.vectors)
}

fn testbench(c: &Ctx<'_>, v: &TestVectors) -> Result<String, EmitError> {
    let samples = v.inputs.len();
    if v.expected.len() != samples {
        return Err(EmitError::Unsupported(format!(
            "{} stimulus samples but {} expected outputs",
            samples,
            v.expected.len()
        )));
    }
    let (uw, yw) = (c.l as u32 * c.wi, c.p as u32 * c.wo);
    let lat = crate::elaborate::latency(c.n);
    let ratio = c.n.meta.clock_ratio;
    let limit = samples.div_ceil(c.slow) * ratio * c.slow + lat + 16;
    let depth = samples.max(1) - 1;
    let mut s = String::new();
    header(&mut s, &format!("self-checking testbench: {samples} samples, raw comparison"));
    ln!(s, "`timescale 1ns / 1ps");
    ln!(s, "module {};", c.module("tb"));
    ln!(s, "    localparam SAMPLES = {samples};");
    ln!(s, "    localparam RATIO = {ratio};");
    ln!(s, "    localparam SLOW = {};", c.slow);
    ln!(s, "    localparam LIMIT = {limit};");
    ln!(s);
    ln!(s, "    reg clock = 1'b0;");
    ln!(s, "    reg reset = 1'b1;");
    ln!(s, "    reg data_valid_in = 1'b0;");
    ln!(s, "    reg {} u = {uw}'d0;", range(uw));
    ln!(s, "    wire {} y;", range(yw));
    ln!(s, "    wire data_valid_out;");
    ln!(s, "    reg {} stimulus [0:{depth}];", range(uw));
    ln!(s, "    reg {} expected [0:{depth}];", range(yw));
    ln!(s, "    integer cycle = 0;");
    ln!(s, "    integer fed = 0;");
    ln!(s, "    integer got = 0;");
    ln!(s, "    integer errors = 0;");
    ln!(s);
    instance(
        &mut s,
        &c.module("top"),
        "dut",
        &[
            ("clock", "clock".into()),
            ("reset", "reset".into()),
            ("data_valid_in", "data_valid_in".into()),
            ("u", "u".into()),
            ("y", "y".into()),
            ("data_valid_out", "data_valid_out".into()),
        ],
    );
    ln!(s);
    ln!(s, "    always #5 clock = ~clock;");
    ln!(s);
    ln!(s, "    initial begin");
    ln!(s, "        if (SAMPLES > 0) begin");
    ln!(s, "            $readmemh(\"stimulus.hex\", stimulus);");
    ln!(s, "            $readmemh(\"expected.hex\", expected);");
    ln!(s, "        end");
    ln!(s, "        repeat (2) @(posedge clock);");
    ln!(s, "        @(negedge clock) reset = 1'b0;");
    ln!(s, "    end");
    ln!(s);
    ln!(s, "    // sample i goes to stream i % SLOW, each stream paced by RATIO");
    ln!(s, "    always @(negedge clock) if (!reset) begin");
    ln!(s, "        if (fed < SAMPLES && cycle == (fed / SLOW) * RATIO * SLOW + fed % SLOW) begin");
    ln!(s, "            data_valid_in <= 1'b1;");
    ln!(s, "            u <= stimulus[fed];");
    ln!(s, "            fed <= fed + 1;");
    ln!(s, "        end else begin");
    ln!(s, "            data_valid_in <= 1'b0;");
    ln!(s, "        end");
    ln!(s, "        cycle <= cycle + 1;");
    ln!(s, "    end");
    ln!(s);
    ln!(s, "    always @(posedge clock) if (!reset && data_valid_out) begin");
    ln!(s, "        if (got < SAMPLES && y !== expected[got]) begin");
    ln!(s, "            errors = errors + 1;");
    ln!(s, "            $display(\"sample %0d: expected %h, got %h\", got, expected[got], y);");
    ln!(s, "        end");
    ln!(s, "        got = got + 1;");
    ln!(s, "    end");
    ln!(s);
    ln!(s, "    always @(posedge clock) if (got >= SAMPLES || cycle > LIMIT) begin");
    ln!(s, "        if (errors == 0 && got >= SAMPLES) $display(\"PASS %0d samples\", got);");
    ln!(s, "        else $display(\"FAIL %0d mismatches, %0d of %0d outputs\", errors, got, SAMPLES);");
    ln!(s, "        $finish;");
    ln!(s, "    end");
    ln!(s, "endmodule");
    Ok(s)
}

fn hex_lines(rows: &[Vec<i128>], w: u32) -> String {
    rows.iter().map(|r| hex_bus(r, w) + "\n").collect()
}

/// One raw value per line, two's complement in `width` bits.
pub fn mem_image(values: &[i128], width: u32) -> String {
    values.iter().map(|&v| hex_word(v, width) + "\n").collect()
}

/// The full file set.
pub fn emit_project(n: &Netlist, cfg: &EmitConfig) -> Result<VerilogProject, EmitError> {
    let c = Ctx::new(n, cfg)?;
    let texts = [
        top(&c)?,
        input_layer(&c)?,
        hidden_layer(&c)?,
        output_layer(&c)?,
        activation(&c)?,
        macc(&c)?,
        controller(&c)?,
        testbench(&c, &cfg.vectors)?,
    ];
    let sources = SOURCE_FILES
        .iter()
        .zip(texts)
        .map(|(name, text)| ProjectFile { name: name.to_string(), text })
        .collect();
    let mut data = vec![
        ProjectFile { name: "stimulus.hex".into(), text: hex_lines(&cfg.vectors.inputs, c.wi) },
        ProjectFile { name: "expected.hex".into(), text: hex_lines(&cfg.vectors.expected, c.wo) },
    ];
    if cfg.rom_files {
        if let Some(t) = c.activation_lut().or_else(|| c.output_lut()) {
            let names = lut_image_names(&c.prefix, t);
            let cw = t.coef_fmt().word_length();
            data.push(ProjectFile { name: names[0].clone(), text: mem_image(t.entries(), t.out_fmt().word_length()) });
            for (k, col) in t.coeffs().iter().enumerate() {
                data.push(ProjectFile { name: names[k + 1].clone(), text: mem_image(col, cw) });
            }
        }
    }
    Ok(VerilogProject { top: c.module("top"), sources, data })
}
