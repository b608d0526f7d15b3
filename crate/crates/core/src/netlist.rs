//! Synchronous single-clock netlist.
//!
//! Registers live on wires: a [`Wire`] carries a chain of zero or more
//! registers (each with its reset value) between its source node and the
//! consuming node. Every node is combinational. This makes retiming and
//! C-slowing pure edge-weight edits.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerFsm;
use crate::fixed::{rescale_raw, FixedPointFormat};
use crate::model::ActivationKind;
use crate::sim::fixed::ResolvedFormats;
use crate::sim::lut::{lut_eval_raw, LutRom};

pub type NodeIdx = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SigType {
    Fixed(FixedPointFormat),
    /// Unsigned control value of the given width.
    Bits(u32),
}

impl SigType {
    pub fn width(&self) -> u32 {
        match self {
            SigType::Fixed(f) => f.word_length(),
            SigType::Bits(w) => *w,
        }
    }

    pub fn fixed(&self) -> Option<FixedPointFormat> {
        match self {
            SigType::Fixed(f) => Some(*f),
            SigType::Bits(_) => None,
        }
    }

    pub fn contains(&self, raw: i128) -> bool {
        match self {
            SigType::Fixed(f) => f.contains_raw(raw),
            SigType::Bits(w) => raw >= 0 && (*w >= 127 || raw < 1i128 << w),
        }
    }

    fn clamp(&self, raw: i128) -> i128 {
        match self {
            SigType::Fixed(f) => f.saturate(raw),
            SigType::Bits(w) if *w >= 127 => raw.max(0),
            SigType::Bits(w) => raw & ((1i128 << w) - 1),
        }
    }
}

impl fmt::Display for SigType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigType::Fixed(x) => write!(f, "{x}"),
            SigType::Bits(w) => write!(f, "bits{w}"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Input { port: String },
    Output { port: String },
    Const(i128),
    /// Identity; also the named output of a register chain.
    Buf,
    /// Both operands aligned to the node format, summed, saturated.
    Add,
    /// Exact product, rounded to the node format and saturated.
    Mul,
    /// Round to nearest (ties away) and saturate into the node format.
    Requant,
    /// `[sel, d0, d1, …]`; out-of-range selects pick the last input.
    Mux,
    /// Table read, index clamped to the last entry.
    Rom { table: Arc<Vec<i128>> },
    /// Activation applied to a state-format operand.
    Activation { kind: ActivationKind, lut: Option<Arc<LutRom>> },
    And,
    Not,
    /// `[state, data_valid_in]` → next controller state.
    FsmNext { fsm: Arc<ControllerFsm> },
}

impl NodeKind {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Output { .. } => "output",
            NodeKind::Const(_) => "const",
            NodeKind::Buf => "buf",
            NodeKind::Add => "add",
            NodeKind::Mul => "mul",
            NodeKind::Requant => "requant",
            NodeKind::Mux => "mux",
            NodeKind::Rom { .. } => "rom",
            NodeKind::Activation { .. } => "activation",
            NodeKind::And => "and",
            NodeKind::Not => "not",
            NodeKind::FsmNext { .. } => "fsm_next",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            NodeKind::Input { .. } | NodeKind::Const(_) => Some(0),
            NodeKind::Output { .. }
            | NodeKind::Buf
            | NodeKind::Requant
            | NodeKind::Rom { .. }
            | NodeKind::Activation { .. }
            | NodeKind::Not => Some(1),
            NodeKind::Add | NodeKind::Mul | NodeKind::And | NodeKind::FsmNext { .. } => Some(2),
            NodeKind::Mux => None,
        }
    }
}

/// What a node is for; used for resource counts and structural checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Datapath,
    /// Multiplier of a shared-layer MACC unit.
    Macc,
    /// Constant-coefficient product in the output layer.
    OutputProduct,
    /// Moore decoder driven by the controller state.
    Control,
    NextState,
    Port,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wire {
    pub src: NodeIdx,
    /// Reset values of the register chain; `regs[0]` is nearest the source.
    pub regs: Vec<i128>,
}

impl Wire {
    pub fn comb(src: NodeIdx) -> Self {
        Self { src, regs: Vec::new() }
    }

    pub fn reg(src: NodeIdx, init: i128) -> Self {
        Self { src, regs: vec![init] }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub ty: SigType,
    pub inputs: Vec<Wire>,
    pub role: Role,
}

/// Elaboration parameters the emitters and the verification gate need.
#[derive(Debug, Clone)]
pub struct NetlistMeta {
    pub model: String,
    pub input_dim: usize,
    pub state_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub multipliers_per_node: usize,
    pub macc_cycles: usize,
    pub clock_ratio: usize,
    pub formats: ResolvedFormats,
    pub lut: Option<Arc<LutRom>>,
    pub activation: ActivationKind,
    /// `None` when the output map is a bare weighted sum.
    pub output_activation: Option<ActivationKind>,
    pub fsm: Arc<ControllerFsm>,
    pub tables: Arc<crate::elaborate::HwTables>,
    /// Interleaved streams after C-slowing.
    pub slow: usize,
    /// Extra register stages between the output layer and the ports.
    pub out_pipeline: usize,
}

#[derive(Debug, Clone)]
pub struct Netlist {
    pub nodes: Vec<Node>,
    pub meta: NetlistMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetlistError {
    #[error("node {node} ({name}): {message}")]
    Node { node: NodeIdx, name: String, message: String },
    #[error("combinational cycle through node {0}")]
    CombinationalCycle(NodeIdx),
    #[error("duplicate port {0}")]
    DuplicatePort(String),
}

impl Netlist {
    pub fn new(meta: NetlistMeta) -> Self {
        Self { nodes: Vec::new(), meta }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: NodeKind, ty: SigType, inputs: Vec<Wire>, role: Role) -> NodeIdx {
        self.nodes.push(Node { name: name.into(), kind, ty, inputs, role });
        self.nodes.len() - 1
    }

    pub fn inputs(&self) -> Vec<NodeIdx> {
        self.nodes_where(|n| matches!(n.kind, NodeKind::Input { .. }))
    }

    pub fn outputs(&self) -> Vec<NodeIdx> {
        self.nodes_where(|n| matches!(n.kind, NodeKind::Output { .. }))
    }

    fn nodes_where(&self, f: impl Fn(&Node) -> bool) -> Vec<NodeIdx> {
        (0..self.nodes.len()).filter(|&i| f(&self.nodes[i])).collect()
    }

    pub fn port_name(&self, i: NodeIdx) -> Option<&str> {
        match &self.nodes[i].kind {
            NodeKind::Input { port } | NodeKind::Output { port } => Some(port),
            _ => None,
        }
    }

    pub fn find_port(&self, port: &str) -> Option<NodeIdx> {
        (0..self.nodes.len()).find(|&i| self.port_name(i) == Some(port))
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.nodes.iter().filter(|n| n.role == role).count()
    }

    pub fn register_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.inputs).map(|w| w.regs.len()).sum()
    }

    /// Consumers of each node as `(dst, input slot)`.
    pub fn fanout(&self) -> Vec<Vec<(NodeIdx, usize)>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (d, n) in self.nodes.iter().enumerate() {
            for (slot, w) in n.inputs.iter().enumerate() {
                out[w.src].push((d, slot));
            }
        }
        out
    }

    /// Evaluation order over register-free wires.
    pub fn topo_order(&self) -> Result<Vec<NodeIdx>, NetlistError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for (d, node) in self.nodes.iter().enumerate() {
            for w in node.inputs.iter().filter(|w| w.regs.is_empty()) {
                indeg[d] += 1;
                succ[w.src].push(d);
            }
        }
        let mut ready: Vec<NodeIdx> = (0..n).rev().filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &d in succ[i].iter().rev() {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(d);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(NetlistError::CombinationalCycle(stuck));
        }
        Ok(order)
    }

    /// Value of node `i` given its operand values.
    pub fn eval_node(&self, i: NodeIdx, args: &[i128]) -> i128 {
        eval_node(&self.nodes, i, args)
    }

    pub fn validate(&self) -> Vec<NetlistError> {
        let mut errs = Vec::new();
        let mut ports = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(port) = self.port_name(i) {
                if ports.insert(port.to_string(), i).is_some() {
                    errs.push(NetlistError::DuplicatePort(port.to_string()));
                }
            }
            errs.extend(
                self.node_problems(i)
                    .into_iter()
                    .map(|message| NetlistError::Node { node: i, name: node.name.clone(), message }),
            );
        }
        if let Err(e) = self.topo_order() {
            errs.push(e);
        }
        errs
    }

    fn node_problems(&self, i: NodeIdx) -> Vec<String> {
        let node = &self.nodes[i];
        let mut bad = Vec::new();
        match node.kind.arity() {
            Some(a) if node.inputs.len() != a => {
                return vec![format!("{} takes {a} inputs, has {}", node.kind.mnemonic(), node.inputs.len())];
            }
            None if node.inputs.len() < 2 => return vec!["mux needs a select and at least one data input".into()],
            _ => {}
        }
        if let Some(w) = node.inputs.iter().find(|w| w.src >= self.nodes.len()) {
            return vec![format!("input from missing node {}", w.src)];
        }
        for w in &node.inputs {
            let ty = self.nodes[w.src].ty;
            if let Some(r) = w.regs.iter().find(|&&r| !ty.contains(r)) {
                bad.push(format!("register init {r} outside {ty}"));
            }
        }
        let ty_of = |slot: usize| self.nodes[node.inputs[slot].src].ty;
        match &node.kind {
            NodeKind::Output { .. } if ty_of(0) != node.ty => {
                bad.push(format!("port width {} differs from driver {}", node.ty, ty_of(0)));
            }
            NodeKind::Const(v) if !node.ty.contains(*v) => bad.push(format!("constant {v} outside {}", node.ty)),
            NodeKind::Buf if ty_of(0) != node.ty => bad.push(format!("buffer of {} typed {}", ty_of(0), node.ty)),
            NodeKind::Add | NodeKind::Mul | NodeKind::Requant => {
                if node.ty.fixed().is_none() || (0..node.inputs.len()).any(|s| ty_of(s).fixed().is_none()) {
                    bad.push("arithmetic on control bits".into());
                }
            }
            NodeKind::Mux => {
                if ty_of(0).fixed().is_some() {
                    bad.push("mux select must be bits".into());
                }
                if (1..node.inputs.len()).any(|s| ty_of(s) != node.ty) {
                    bad.push("mux data inputs must match the output type".into());
                }
            }
            NodeKind::Rom { table } => {
                if table.is_empty() || table.iter().any(|&v| !node.ty.contains(v)) {
                    bad.push("rom contents empty or outside the output type".into());
                }
            }
            NodeKind::Activation { kind, lut } => {
                if ty_of(0) != node.ty {
                    bad.push("activation operand and result formats differ".into());
                }
                if *kind == ActivationKind::Tanh {
                    match lut {
                        Some(l) if SigType::Fixed(l.in_fmt()) == node.ty && SigType::Fixed(l.out_fmt()) == node.ty => {}
                        _ => bad.push("tanh needs a table in the operand format".into()),
                    }
                }
            }
            _ => {}
        }
        bad
    }
}

fn arg_frac(nodes: &[Node], i: NodeIdx, slot: usize) -> u32 {
    nodes[nodes[i].inputs[slot].src].ty.fixed().map_or(0, |f| f.frac_length())
}

pub(crate) fn eval_node(nodes: &[Node], i: NodeIdx, args: &[i128]) -> i128 {
    let node = &nodes[i];
    let frac = node.ty.fixed().map_or(0, |f| f.frac_length());
    match &node.kind {
        NodeKind::Input { .. } => 0,
        NodeKind::Const(v) => *v,
        NodeKind::Output { .. } | NodeKind::Buf => args[0],
        NodeKind::Add => {
            let a = rescale_raw(args[0], arg_frac(nodes, i, 0), frac);
            let b = rescale_raw(args[1], arg_frac(nodes, i, 1), frac);
            node.ty.clamp(a.saturating_add(b))
        }
        NodeKind::Mul => {
            let from = arg_frac(nodes, i, 0) + arg_frac(nodes, i, 1);
            node.ty.clamp(rescale_raw(args[0].saturating_mul(args[1]), from, frac))
        }
        NodeKind::Requant => node.ty.clamp(rescale_raw(args[0], arg_frac(nodes, i, 0), frac)),
        NodeKind::Mux => {
            let sel = usize::try_from(args[0]).unwrap_or(usize::MAX);
            args[1 + sel.min(args.len() - 2)]
        }
        NodeKind::Rom { table } => {
            let a = usize::try_from(args[0]).unwrap_or(0);
            table[a.min(table.len() - 1)]
        }
        NodeKind::Activation { kind: ActivationKind::Identity, .. } => args[0],
        NodeKind::Activation { lut, .. } => {
            lut_eval_raw(lut.as_ref().expect("validated activation"), args[0]).raw()
        }
        NodeKind::And => i128::from(args[0] != 0 && args[1] != 0),
        NodeKind::Not => i128::from(args[0] == 0),
        NodeKind::FsmNext { fsm } => {
            fsm.next(usize::try_from(args[0]).unwrap_or(usize::MAX), args[1] != 0) as i128
        }
    }
}

/// Combinational delay per node class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayModel {
    pub mul: u32,
    pub add: u32,
    pub lut: u32,
    pub other: u32,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self { mul: 3, add: 1, lut: 1, other: 1 }
    }
}

impl DelayModel {
    pub fn delay(&self, kind: &NodeKind) -> u32 {
        match kind {
            NodeKind::Mul => self.mul,
            NodeKind::Add => self.add,
            NodeKind::Activation { kind: ActivationKind::Tanh, .. } | NodeKind::Rom { .. } => self.lut,
            NodeKind::Input { .. } | NodeKind::Output { .. } | NodeKind::Const(_) | NodeKind::Buf => 0,
            NodeKind::Activation { .. } => 0,
            _ => self.other,
        }
    }
}

/// Arrival time of every node: its delay plus the latest register-free
/// predecessor.
pub fn arrival_times(n: &Netlist, dm: &DelayModel) -> Result<Vec<u32>, NetlistError> {
    let order = n.topo_order()?;
    let mut at = vec![0u32; n.nodes.len()];
    for i in order {
        let node = &n.nodes[i];
        let pre = node.inputs.iter().filter(|w| w.regs.is_empty()).map(|w| at[w.src]).max().unwrap_or(0);
        at[i] = pre + dm.delay(&node.kind);
    }
    Ok(at)
}

/// Longest register-free chain under the delay model.
pub fn critical_path(n: &Netlist, dm: &DelayModel) -> Result<u32, NetlistError> {
    Ok(arrival_times(n, dm)?.into_iter().max().unwrap_or(0))
}

/// Register-free paths from any input to any output port.
pub fn has_comb_path(n: &Netlist, from: NodeIdx, to: NodeIdx) -> bool {
    let fo = n.fanout();
    let mut seen = vec![false; n.nodes.len()];
    let mut stack = vec![from];
    while let Some(i) = stack.pop() {
        if i == to {
            return true;
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        for &(d, slot) in &fo[i] {
            if n.nodes[d].inputs[slot].regs.is_empty() {
                stack.push(d);
            }
        }
    }
    false
}

/// Moore check: no register-free path from an input port into a control
/// decoder.
pub fn moore_violations(n: &Netlist) -> Vec<(NodeIdx, NodeIdx)> {
    let mut out = Vec::new();
    for i in n.inputs() {
        for (c, node) in n.nodes.iter().enumerate() {
            if node.role == Role::Control && has_comb_path(n, i, c) {
                out.push((i, c));
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::elaborate::HwTables;

    pub(crate) fn bare_meta() -> NetlistMeta {
        let f = FixedPointFormat::new(8, 4).unwrap();
        NetlistMeta {
            model: "t".into(),
            input_dim: 1,
            state_dim: 1,
            output_dim: 1,
            layers: 1,
            multipliers_per_node: 1,
            macc_cycles: 1,
            clock_ratio: 5,
            formats: ResolvedFormats { input: f, weight: f, state: f, output: f, accumulator: f },
            lut: None,
            activation: ActivationKind::Identity,
            output_activation: None,
            fsm: Arc::new(ControllerFsm::new(1, 1)),
            tables: Arc::new(HwTables::default()),
            slow: 1,
            out_pipeline: 0,
        }
    }

    fn q(w: u32, f: u32) -> SigType {
        SigType::Fixed(FixedPointFormat::new(w, f).unwrap())
    }

    #[test]
    fn add_aligns_and_saturates() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(8, 4), vec![], Role::Port);
        let b = n.add("b", NodeKind::Input { port: "b".into() }, q(8, 2), vec![], Role::Port);
        let s = n.add("s", NodeKind::Add, q(8, 4), vec![Wire::comb(a), Wire::comb(b)], Role::Datapath);
        // 1.5 + 0.75
        assert_eq!(n.eval_node(s, &[24, 3]), 36);
        assert_eq!(n.eval_node(s, &[127, 127]), 127);
    }

    #[test]
    fn mul_is_exact_then_rounded() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(8, 4), vec![], Role::Port);
        let p = n.add("p", NodeKind::Mul, q(16, 8), vec![Wire::comb(a), Wire::comb(a)], Role::Macc);
        let r = n.add("r", NodeKind::Mul, q(8, 4), vec![Wire::comb(a), Wire::comb(a)], Role::Macc);
        assert_eq!(n.eval_node(p, &[-128, -128]), 16384);
        // 0.5625 · 0.5625 = 0.31640625 → 5/16
        assert_eq!(n.eval_node(r, &[9, 9]), 5);
    }

    #[test]
    fn mux_and_rom_clamp() {
        let mut n = Netlist::new(bare_meta());
        let s = n.add("s", NodeKind::Input { port: "s".into() }, SigType::Bits(2), vec![], Role::Port);
        let c0 = n.add("c0", NodeKind::Const(1), q(8, 4), vec![], Role::Datapath);
        let c1 = n.add("c1", NodeKind::Const(2), q(8, 4), vec![], Role::Datapath);
        let m = n.add("m", NodeKind::Mux, q(8, 4), vec![Wire::comb(s), Wire::comb(c0), Wire::comb(c1)], Role::Datapath);
        let rom = n.add("r", NodeKind::Rom { table: Arc::new(vec![7, 8]) }, q(8, 4), vec![Wire::comb(s)], Role::Control);
        assert_eq!(n.eval_node(m, &[0, 1, 2]), 1);
        assert_eq!(n.eval_node(m, &[3, 1, 2]), 2);
        assert_eq!(n.eval_node(rom, &[3]), 8);
        assert!(n.validate().is_empty());
    }

    #[test]
    fn combinational_loop_is_rejected_registered_loop_is_not() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(8, 4), vec![], Role::Port);
        let s = n.add("s", NodeKind::Add, q(8, 4), vec![Wire::comb(a), Wire::comb(a)], Role::Datapath);
        n.nodes[s].inputs[1] = Wire::comb(s);
        assert!(matches!(n.topo_order(), Err(NetlistError::CombinationalCycle(_))));
        n.nodes[s].inputs[1] = Wire::reg(s, 0);
        assert!(n.topo_order().is_ok());
        assert!(n.validate().is_empty());
    }

    #[test]
    fn validation_catches_types() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(8, 4), vec![], Role::Port);
        n.add("o", NodeKind::Output { port: "o".into() }, q(9, 4), vec![Wire::reg(a, 500)], Role::Port);
        n.add("x", NodeKind::Output { port: "a".into() }, q(8, 4), vec![Wire::comb(a)], Role::Port);
        let errs = n.validate();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn critical_path_stops_at_registers() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(8, 4), vec![], Role::Port);
        let m = n.add("m", NodeKind::Mul, q(8, 4), vec![Wire::comb(a), Wire::comb(a)], Role::Macc);
        let s = n.add("s", NodeKind::Add, q(8, 4), vec![Wire::comb(m), Wire::comb(a)], Role::Datapath);
        let dm = DelayModel::default();
        assert_eq!(critical_path(&n, &dm).unwrap(), 4);
        n.nodes[s].inputs[0].regs.push(0);
        assert_eq!(critical_path(&n, &dm).unwrap(), 3);
    }
}
