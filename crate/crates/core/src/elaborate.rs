//! Lowering of a state-space model plus a resource schedule into a
//! [`Netlist`]: one shared layer of M node units with p MACCs each, an
//! M-word state bank, weight and bias ROMs addressed by the controller, the
//! activation ROM, and a combinational output layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerFsm, CtrlOutputs};
use crate::fixed::{ceil_log2, quantize_raw, rescale_raw};
use crate::model::{validate_model, ActivationKind, DataflowGraph, DfOp, NodeId, StateSpaceModel};
use crate::netlist::{Netlist, NetlistMeta, NodeIdx, NodeKind, Role, SigType, Wire};
use crate::sim::fixed::{FixedProgram, FormatAssignment, ResolvedFormats};
use crate::sim::lut::LutRom;
use crate::sim::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// MACC units per node, `1 ≤ p ≤ M`.
    pub multipliers_per_node: usize,
    /// System-clock cycles between data samples.
    pub clock_ratio: usize,
}

#[derive(Debug, Error)]
pub enum ElabError {
    #[error("model is invalid: {0}")]
    Invalid(String),
    #[error("unsupported model structure: {0}")]
    Unsupported(String),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("multipliers_per_node {p} outside 1..={m}")]
    Multipliers { p: usize, m: usize },
    #[error("schedule infeasible: clock_ratio {clock_ratio} is below the latency of {latency} cycles")]
    Infeasible { clock_ratio: usize, latency: usize },
}

/// Quantized per-step parameters in the weight format (row-major).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepTables {
    /// M×M state term.
    pub a: Option<Vec<i128>>,
    /// M×L input term.
    pub b: Option<Vec<i128>>,
    /// M-vector bias.
    pub bias: Option<Vec<i128>>,
}

impl StepTables {
    /// Operand columns: state columns first, then input columns.
    pub fn columns(&self, m: usize, l: usize) -> usize {
        self.a.as_ref().map_or(0, |_| m) + self.b.as_ref().map_or(0, |_| l)
    }

    /// Weight of node `i` on operand column `c`, with the operand index
    /// (`j` for state word j, `M + j` for input word j).
    pub fn column(&self, m: usize, l: usize, i: usize, c: usize) -> Option<(i128, usize)> {
        let mut c = c;
        if let Some(a) = &self.a {
            if c < m {
                return Some((a[i * m + c], c));
            }
            c -= m;
        }
        match &self.b {
            Some(b) if c < l => Some((b[i * l + c], m + c)),
            _ => None,
        }
    }
}

/// Everything the datapath stores, already quantized.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HwTables {
    pub steps: Vec<StepTables>,
    /// P×M output matrix.
    pub output: Vec<i128>,
    /// Initial state in the state format.
    pub x0: Vec<i128>,
}

impl HwTables {
    /// Operand columns one MACC sweep covers: never fewer than M, so a layer
    /// with only input columns still takes a full-width sweep.
    pub fn max_columns(&self, m: usize, l: usize) -> usize {
        self.steps.iter().map(|s| s.columns(m, l)).max().unwrap_or(0).max(m).max(1)
    }
}

/// Table names of an `[act](A·x + B·u + b)` map.
#[derive(Debug, Default)]
pub(crate) struct Affine {
    pub(crate) activation: Option<ActivationKind>,
    pub(crate) state: Option<String>,
    pub(crate) input: Option<String>,
    pub(crate) bias: Option<String>,
}

fn collect_terms(g: &DataflowGraph, id: NodeId, out: &mut Affine) -> Result<(), ElabError> {
    let node = &g.nodes[id];
    let dup = |what: &str| ElabError::Unsupported(format!("more than one {what} term"));
    match &node.op {
        DfOp::VecAdd => {
            collect_terms(g, node.inputs[0], out)?;
            collect_terms(g, node.inputs[1], out)
        }
        DfOp::MatVec(t) => match g.nodes[node.inputs[0]].op {
            DfOp::StateIn if out.state.is_none() => {
                out.state = Some(t.clone());
                Ok(())
            }
            DfOp::Input if out.input.is_none() => {
                out.input = Some(t.clone());
                Ok(())
            }
            DfOp::StateIn => Err(dup("state")),
            DfOp::Input => Err(dup("input")),
            _ => Err(ElabError::Unsupported(format!("node {id}: matrix operand must be the state or the input"))),
        },
        DfOp::Param(t) if out.bias.is_none() => {
            out.bias = Some(t.clone());
            Ok(())
        }
        DfOp::Param(_) => Err(dup("bias")),
        op => Err(ElabError::Unsupported(format!("node {id}: {op:?} outside the affine pattern"))),
    }
}

pub(crate) fn affine_terms(g: &DataflowGraph) -> Result<Affine, ElabError> {
    let mut a = Affine::default();
    let mut root = g.output;
    if let DfOp::Activation(kind) = g.nodes[root].op {
        a.activation = Some(kind);
        root = g.nodes[root].inputs[0];
    }
    collect_terms(g, root, &mut a)?;
    Ok(a)
}

/// Data-path constants of a model in the resolved formats.
pub fn hw_tables(m: &StateSpaceModel, prog: &FixedProgram<'_>) -> Result<(HwTables, MapActivations), ElabError> {
    let upd = affine_terms(&m.update_graph)?;
    let out = affine_terms(&m.output_graph)?;
    if out.input.is_some() || out.bias.is_some() {
        return Err(ElabError::Unsupported("output map must be C·x with an optional activation".into()));
    }
    let Some(c_name) = &out.state else {
        return Err(ElabError::Unsupported("output map has no C·x term".into()));
    };
    let fetch = |name: &Option<String>, k: usize| name.as_ref().and_then(|t| prog.table(t, k)).map(<[i128]>::to_vec);
    let steps = (0..m.horizon)
        .map(|k| StepTables { a: fetch(&upd.state, k), b: fetch(&upd.input, k), bias: fetch(&upd.bias, k) })
        .collect();
    let output = prog
        .table(c_name, m.horizon)
        .map_or_else(|| vec![0; m.output_dim * m.state_dim], <[i128]>::to_vec);
    let state = prog.formats().state;
    let x0 = m.initial_state.iter().map(|&v| quantize_raw(v, state)).collect();
    Ok((
        HwTables { steps, output, x0 },
        MapActivations { activation: upd.activation, output_activation: out.activation },
    ))
}

/// Activations found around the affine update and output maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapActivations {
    pub activation: Option<ActivationKind>,
    pub output_activation: Option<ActivationKind>,
}

/// MACC cycles per layer for the given operand count.
pub fn macc_cycles(columns: usize, p: usize) -> usize {
    columns.div_ceil(p).max(1)
}

pub fn build_controller(layers: usize, macc_cycles: usize, _s: &Schedule) -> ControllerFsm {
    ControllerFsm::new(layers, macc_cycles)
}

/// data_valid_in → data_valid_out distance of one stream, in cycles.
pub fn latency(n: &Netlist) -> usize {
    n.meta.slow * (n.meta.fsm.latency() + n.meta.out_pipeline)
}

struct Builder {
    n: Netlist,
}

impl Builder {
    fn node(&mut self, name: impl Into<String>, kind: NodeKind, ty: SigType, inputs: Vec<Wire>, role: Role) -> NodeIdx {
        self.n.add(name, kind, ty, inputs, role)
    }

    fn comb(&mut self, name: impl Into<String>, kind: NodeKind, ty: SigType, srcs: &[NodeIdx]) -> NodeIdx {
        self.node(name, kind, ty, srcs.iter().map(|&s| Wire::comb(s)).collect(), Role::Datapath)
    }

    fn konst(&mut self, name: impl Into<String>, v: i128, ty: SigType) -> NodeIdx {
        self.node(name, NodeKind::Const(v), ty, vec![], Role::Datapath)
    }

    /// Register whose output is a named buffer; the D input is patched in
    /// later via [`Builder::close`].
    fn register(&mut self, name: impl Into<String>, ty: SigType, init: i128) -> NodeIdx {
        self.node(name, NodeKind::Buf, ty, vec![Wire::reg(usize::MAX, init)], Role::Datapath)
    }

    fn close(&mut self, reg: NodeIdx, d: NodeIdx) {
        self.n.nodes[reg].inputs[0].src = d;
    }

    fn decoder(&mut self, name: &str, fsm: &ControllerFsm, state: NodeIdx, f: impl Fn(&CtrlOutputs) -> usize) -> NodeIdx {
        let table = fsm.decoder(f);
        let max = table.iter().copied().max().unwrap_or(0);
        let width = ceil_log2(max as u64 + 1).max(1);
        self.node(
            name,
            NodeKind::Rom { table: Arc::new(table) },
            SigType::Bits(width),
            vec![Wire::comb(state)],
            Role::Control,
        )
    }
}

/// Lowers `m` onto the shared-layer architecture.
pub fn elaborate(
    m: &StateSpaceModel,
    s: &Schedule,
    fmts: &FormatAssignment,
    lut: Option<&LutRom>,
) -> Result<Netlist, ElabError> {
    if let Some(d) = validate_model(m).first() {
        return Err(ElabError::Invalid(d.to_string()));
    }
    let prog = FixedProgram::new(m, fmts, lut)?;
    let f: ResolvedFormats = *prog.formats();
    let (tables, maps) = hw_tables(m, &prog)?;
    let (l, mm, pp, nl) = (m.input_dim, m.state_dim, m.output_dim, m.horizon);
    let p = s.multipliers_per_node;
    if p == 0 || p > mm {
        return Err(ElabError::Multipliers { p, m: mm });
    }
    let mc = macc_cycles(tables.max_columns(mm, l), p);
    let fsm = Arc::new(build_controller(nl, mc, s));
    if s.clock_ratio < fsm.latency() {
        return Err(ElabError::Infeasible { clock_ratio: s.clock_ratio, latency: fsm.latency() });
    }
    let activation = maps.activation.unwrap_or(ActivationKind::Identity);
    let lut_arc = lut.map(|t| Arc::new(t.clone()));
    let meta = NetlistMeta {
        model: m.name.clone(),
        input_dim: l,
        state_dim: mm,
        output_dim: pp,
        layers: nl,
        multipliers_per_node: p,
        macc_cycles: mc,
        clock_ratio: s.clock_ratio,
        formats: f,
        lut: lut_arc.clone(),
        activation,
        output_activation: maps.output_activation,
        fsm: fsm.clone(),
        tables: Arc::new(tables.clone()),
        slow: 1,
        out_pipeline: 0,
    };
    let mut b = Builder { n: Netlist::new(meta) };
    let bit = SigType::Bits(1);
    let (st, acc, wt) = (SigType::Fixed(f.state), SigType::Fixed(f.accumulator), SigType::Fixed(f.weight));

    // ports and controller
    let dv_in = b.node("data_valid_in", NodeKind::Input { port: "data_valid_in".into() }, bit, vec![], Role::Port);
    let u_in: Vec<NodeIdx> = (0..l)
        .map(|j| {
            let port = format!("u{j}");
            b.node(port.clone(), NodeKind::Input { port }, SigType::Fixed(f.input), vec![], Role::Port)
        })
        .collect();
    let sw = SigType::Bits(fsm.state_width());
    let state = b.register("ctrl_state", sw, 0);
    let next = b.node(
        "ctrl_next",
        NodeKind::FsmNext { fsm: fsm.clone() },
        sw,
        vec![Wire::comb(state), Wire::comb(dv_in)],
        Role::NextState,
    );
    b.close(state, next);
    let accept = b.decoder("ctrl_accept", &fsm, state, |o| o.accept as usize);
    let first = b.decoder("ctrl_first", &fsm, state, |o| o.first as usize);
    let acc_en = b.decoder("ctrl_acc_en", &fsm, state, |o| o.acc_en as usize);
    let req_en = b.decoder("ctrl_req_en", &fsm, state, |o| o.req_en as usize);
    let act_en = b.decoder("ctrl_act_en", &fsm, state, |o| o.act_en as usize);
    let dv_out = b.decoder("ctrl_dv_out", &fsm, state, |o| o.dv_out as usize);
    let layer = b.decoder("ctrl_layer", &fsm, state, |o| o.layer);
    let wsel = b.decoder("ctrl_wsel", &fsm, state, |o| o.wsel);
    let cap = b.comb("capture", NodeKind::And, bit, &[accept, dv_in]);

    // input layer: captured, requantized input words
    let u_q: Vec<NodeIdx> = (0..l)
        .map(|j| {
            let s_j = b.comb(format!("u{j}_state"), NodeKind::Requant, st, &[u_in[j]]);
            let q = b.register(format!("u{j}_q"), st, 0);
            let d = b.comb(format!("u{j}_d"), NodeKind::Mux, st, &[cap, q, s_j]);
            b.close(q, d);
            q
        })
        .collect();

    // state bank
    let x_q: Vec<NodeIdx> = (0..mm).map(|i| b.register(format!("x{i}_q"), st, tables.x0[i])).collect();

    // operand select per MACC lane
    let zero_st = b.konst("zero_state", 0, st);
    let opnd: Vec<NodeIdx> = (0..p)
        .map(|q| {
            let sel = b.decoder(&format!("ctrl_opsel{q}"), &fsm, state, |o| {
                if !o.acc_en {
                    return mm + l;
                }
                tables.steps[o.layer].column(mm, l, 0, q * mc + o.macc_cycle).map_or(mm + l, |(_, src)| src)
            });
            let mut srcs = vec![sel];
            srcs.extend(&x_q);
            srcs.extend(&u_q);
            srcs.push(zero_st);
            b.comb(format!("operand{q}"), NodeKind::Mux, st, &srcs)
        })
        .collect();

    // shared hidden layer
    let zero_acc = b.konst("zero_acc", 0, acc);
    let bias_shift = |v: i128| f.accumulator.saturate(rescale_raw(v, f.weight.frac_length(), f.accumulator.frac_length()));
    let mut acts = Vec::with_capacity(mm);
    for i in 0..mm {
        let bias: Vec<i128> = tables.steps.iter().map(|st| st.bias.as_ref().map_or(0, |v| bias_shift(v[i]))).collect();
        let bias_rom =
            b.node(format!("node{i}_bias"), NodeKind::Rom { table: Arc::new(bias) }, acc, vec![Wire::comb(layer)], Role::Datapath);
        let mut lanes = Vec::with_capacity(p);
        for q in 0..p {
            let weights: Vec<i128> = (0..nl * mc)
                .map(|a| {
                    let (k, c) = (a / mc, a % mc);
                    tables.steps[k].column(mm, l, i, q * mc + c).map_or(0, |(w, _)| w)
                })
                .collect();
            let rom = b.node(
                format!("node{i}_macc{q}_weight"),
                NodeKind::Rom { table: Arc::new(weights) },
                wt,
                vec![Wire::comb(wsel)],
                Role::Datapath,
            );
            let prod = b.node(
                format!("node{i}_macc{q}_mul"),
                NodeKind::Mul,
                acc,
                vec![Wire::comb(rom), Wire::comb(opnd[q])],
                Role::Macc,
            );
            let a_q = b.register(format!("node{i}_macc{q}_acc"), acc, 0);
            let init = if q == 0 { bias_rom } else { zero_acc };
            let base = b.comb(format!("node{i}_macc{q}_base"), NodeKind::Mux, acc, &[first, a_q, init]);
            let sum = b.comb(format!("node{i}_macc{q}_sum"), NodeKind::Add, acc, &[base, prod]);
            let d = b.comb(format!("node{i}_macc{q}_d"), NodeKind::Mux, acc, &[acc_en, a_q, sum]);
            b.close(a_q, d);
            lanes.push(a_q);
        }
        let mut total = lanes[0];
        for (q, &lane) in lanes.iter().enumerate().skip(1) {
            total = b.comb(format!("node{i}_sum{q}"), NodeKind::Add, acc, &[total, lane]);
        }
        let rq = b.comb(format!("node{i}_requant"), NodeKind::Requant, st, &[total]);
        let z = b.register(format!("node{i}_z"), st, 0);
        let zd = b.comb(format!("node{i}_z_d"), NodeKind::Mux, st, &[req_en, z, rq]);
        b.close(z, zd);
        let act = b.comb(format!("node{i}_act"), NodeKind::Activation { kind: activation, lut: lut_arc.clone() }, st, &[z]);
        acts.push(act);
    }
    for i in 0..mm {
        let x0 = b.konst(format!("x{i}_init"), tables.x0[i], st);
        let hold = b.comb(format!("x{i}_upd"), NodeKind::Mux, st, &[act_en, x_q[i], acts[i]]);
        let d = b.comb(format!("x{i}_d"), NodeKind::Mux, st, &[cap, hold, x0]);
        b.close(x_q[i], d);
    }

    // output layer
    for r in 0..pp {
        let mut sum = None;
        for i in 0..mm {
            let c = b.konst(format!("y{r}_c{i}"), tables.output[r * mm + i], wt);
            let prod = b.node(
                format!("y{r}_mul{i}"),
                NodeKind::Mul,
                acc,
                vec![Wire::comb(c), Wire::comb(x_q[i])],
                Role::OutputProduct,
            );
            sum = Some(match sum {
                None => prod,
                Some(s) => b.comb(format!("y{r}_sum{i}"), NodeKind::Add, acc, &[s, prod]),
            });
        }
        let mut v = sum.expect("state_dim ≥ 1");
        if let Some(kind) = maps.output_activation {
            let rq = b.comb(format!("y{r}_requant"), NodeKind::Requant, st, &[v]);
            v = b.comb(format!("y{r}_act"), NodeKind::Activation { kind, lut: lut_arc.clone() }, st, &[rq]);
        }
        let out_ty = SigType::Fixed(f.output);
        let y = b.comb(format!("y{r}_out"), NodeKind::Requant, out_ty, &[v]);
        let port = format!("y{r}");
        b.node(port.clone(), NodeKind::Output { port }, out_ty, vec![Wire::comb(y)], Role::Port);
    }
    b.node(
        "data_valid_out",
        NodeKind::Output { port: "data_valid_out".into() },
        bit,
        vec![Wire::comb(dv_out)],
        Role::Port,
    );
    let n = b.n;
    if let Some(e) = n.validate().into_iter().next() {
        return Err(ElabError::Invalid(format!("internal netlist check failed: {e}")));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::FixedPointFormat;
    use crate::netlist::moore_violations;
    use crate::nn::{build_state_space, random_nn};
    use crate::sim::lut::{gen_activation_lut, DEFAULT_RANGE};

    fn fig5(p: usize, w: u32) -> Netlist {
        let m = build_state_space(&random_nn(3, 4, 4, 2, 1)).unwrap();
        let f = FixedPointFormat::new(w, w - 4).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        elaborate(&m, &Schedule { multipliers_per_node: p, clock_ratio: 100 }, &FormatAssignment::uniform(f), Some(&lut))
            .unwrap()
    }

    #[test]
    fn fig5_fully_parallel_has_one_macc_cycle() {
        let n = fig5(4, 16);
        assert_eq!(n.meta.macc_cycles, 1);
        assert_eq!(latency(&n), 14);
        assert_eq!(n.count_role(Role::Macc), 16);
    }

    #[test]
    fn one_multiplier_per_node_takes_m_cycles() {
        let n = fig5(1, 16);
        assert_eq!(n.meta.macc_cycles, 4);
        assert_eq!(n.count_role(Role::Macc), 4);
    }

    #[test]
    fn multiplier_count_is_independent_of_depth() {
        let f = FixedPointFormat::new(12, 8).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        for layers in [1, 2, 8] {
            let m = build_state_space(&random_nn(3, layers, 4, 2, 3)).unwrap();
            let n = elaborate(&m, &Schedule { multipliers_per_node: 2, clock_ratio: 200 }, &FormatAssignment::uniform(f), Some(&lut))
                .unwrap();
            assert_eq!(n.count_role(Role::Macc), 8);
        }
    }

    #[test]
    fn controller_outputs_are_moore() {
        assert!(moore_violations(&fig5(2, 12)).is_empty());
    }

    #[test]
    fn slow_clock_ratio_is_infeasible() {
        let m = build_state_space(&random_nn(3, 4, 4, 2, 1)).unwrap();
        let f = FixedPointFormat::new(16, 12).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        let e = elaborate(&m, &Schedule { multipliers_per_node: 4, clock_ratio: 2 }, &FormatAssignment::uniform(f), Some(&lut));
        assert!(matches!(e, Err(ElabError::Infeasible { clock_ratio: 2, latency: 14 })));
        let e = elaborate(&m, &Schedule { multipliers_per_node: 5, clock_ratio: 20 }, &FormatAssignment::uniform(f), Some(&lut));
        assert!(matches!(e, Err(ElabError::Multipliers { p: 5, m: 4 })));
    }

    #[test]
    fn port_widths_follow_formats() {
        let n = fig5(4, 16);
        for i in n.inputs().into_iter().chain(n.outputs()) {
            let w = n.nodes[i].ty.width();
            match n.port_name(i).unwrap() {
                "data_valid_in" | "data_valid_out" => assert_eq!(w, 1),
                _ => assert_eq!(w, 16),
            }
        }
        assert_eq!(n.inputs().len(), 1 + 3);
        assert_eq!(n.outputs().len(), 2 + 1);
    }

    #[test]
    fn nonaffine_update_is_unsupported() {
        let mut m = build_state_space(&random_nn(2, 2, 2, 1, 0)).unwrap();
        let g = &mut m.update_graph;
        let x = g.add(DfOp::StateIn, &[]);
        let t = g.add(DfOp::Activation(ActivationKind::Tanh), &[x]);
        let root = g.output;
        let s = g.add(DfOp::VecAdd, &[root, t]);
        g.set_output(s);
        let f = FixedPointFormat::new(16, 12).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        let e = elaborate(&m, &Schedule { multipliers_per_node: 1, clock_ratio: 100 }, &FormatAssignment::uniform(f), Some(&lut));
        assert!(matches!(e, Err(ElabError::Unsupported(_))), "{e:?}");
    }
}
