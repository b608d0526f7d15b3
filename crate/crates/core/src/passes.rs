//! Model and netlist optimization passes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::elaborate::affine_terms;
use crate::model::{validate_model, DataflowGraph, DfOp, Matrix, ParamTable, StateSpaceModel, TableSteps};
use crate::netlist::{arrival_times, critical_path, DelayModel, Netlist, NodeIdx, NodeKind, Role, Wire};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PassError {
    #[error("update map is nonlinear at node {node} ({op})")]
    Nonlinear { node: usize, op: String },
    #[error("update map is not of the form A·x + B·u + b: {0}")]
    NotAffine(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("fusion span j must be at least 1")]
    ZeroSpan,
    #[error("node {0} is not a multiplier")]
    NotMultiplier(NodeIdx),
    #[error("unknown pass `{0}`")]
    Unknown(String),
}

/// Φ blocks for one fused step: `x' = Φ·x + Γ·u + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlock {
    pub start: usize,
    /// Number of original steps covered (j + 1 except possibly the last).
    pub span: usize,
    pub phi: Matrix,
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// Per-step `(A[k], B[k], b[k])` of a linear model, absent terms as zeros.
fn linear_steps(m: &StateSpaceModel) -> Result<Vec<(Matrix, Matrix, Matrix)>, PassError> {
    if let Some((node, n)) = m.update_graph.nodes.iter().enumerate().find(|(_, n)| !n.op.is_linear()) {
        return Err(PassError::Nonlinear { node, op: format!("{:?}", n.op) });
    }
    let terms = affine_terms(&m.update_graph).map_err(|e| PassError::NotAffine(e.to_string()))?;
    let (mm, l) = (m.state_dim, m.input_dim);
    let at = |name: &Option<String>, k: usize, rows: usize, cols: usize| {
        name.as_ref()
            .and_then(|t| m.params[t].at(k).cloned())
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    };
    Ok((0..m.horizon)
        .map(|k| (at(&terms.state, k, mm, mm), at(&terms.input, k, mm, l), at(&terms.bias, k, mm, 1)))
        .collect())
}

/// Fused blocks of `j + 1` consecutive steps.
pub fn linear_blocks(m: &StateSpaceModel, j: usize) -> Result<Vec<LinearBlock>, PassError> {
    if j == 0 {
        return Err(PassError::ZeroSpan);
    }
    let steps = linear_steps(m)?;
    let (mm, l) = (m.state_dim, m.input_dim);
    let mut blocks = Vec::new();
    for start in (0..m.horizon).step_by(j + 1) {
        let end = (start + j + 1).min(m.horizon);
        let (mut phi, mut gamma, mut beta) = (Matrix::identity(mm), Matrix::zeros(mm, l), Matrix::zeros(mm, 1));
        for (a, b, c) in &steps[start..end] {
            phi = a.matmul(&phi);
            gamma = a.matmul(&gamma).add(b);
            beta = a.matmul(&beta).add(c);
        }
        blocks.push(LinearBlock { start, span: end - start, phi, gamma, beta });
    }
    Ok(blocks)
}

/// Replaces every `j + 1` consecutive updates with one application of the
/// precomputed state transition matrix. A trailing block covers whatever
/// steps remain.
pub fn fuse_state_transition(m: &StateSpaceModel, j: usize) -> Result<StateSpaceModel, PassError> {
    if let Some(d) = validate_model(m).first() {
        return Err(PassError::Invalid(d.to_string()));
    }
    let blocks = linear_blocks(m, j)?;
    let (mm, l) = (m.state_dim, m.input_dim);
    let horizon = blocks.len();
    let per_step = |f: &dyn Fn(&LinearBlock) -> &Matrix, rows, cols| {
        ParamTable::per_step(
            rows,
            cols,
            blocks.iter().map(|b| Some(f(b)).filter(|x| !x.is_zero()).cloned()).collect(),
        )
    };
    let mut params = BTreeMap::new();
    params.insert("Phi".to_string(), per_step(&|b| &b.phi, mm, mm));
    params.insert("Gamma".to_string(), per_step(&|b| &b.gamma, mm, l));
    params.insert("beta".to_string(), per_step(&|b| &b.beta, mm, 1));

    let mut g = DataflowGraph::new();
    let x = g.add(DfOp::StateIn, &[]);
    let u = g.add(DfOp::Input, &[]);
    let ax = g.add(DfOp::MatVec("Phi".into()), &[x]);
    let bu = g.add(DfOp::MatVec("Gamma".into()), &[u]);
    let s = g.add(DfOp::VecAdd, &[ax, bu]);
    let c = g.add(DfOp::Param("beta".into()), &[]);
    let out = g.add(DfOp::VecAdd, &[s, c]);
    g.set_output(out);

    // output tables are read at the new horizon
    for node in &m.output_graph.nodes {
        if let DfOp::Param(t) | DfOp::MatVec(t) = &node.op {
            let old = &m.params[t];
            let at_end = old.at(m.horizon).cloned();
            let steps = match &old.steps {
                TableSteps::Static(_) => old.steps.clone(),
                TableSteps::PerStep(_) => TableSteps::PerStep(vec![at_end; horizon + 1]),
            };
            let name = if params.contains_key(t) { format!("{t}_out") } else { t.clone() };
            params.insert(name, ParamTable { steps, ..old.clone() });
        }
    }
    let mut output_graph = m.output_graph.clone();
    for node in &mut output_graph.nodes {
        if let DfOp::Param(t) | DfOp::MatVec(t) = &mut node.op {
            if ["Phi", "Gamma", "beta"].contains(&t.as_str()) {
                *t = format!("{t}_out");
            }
        }
    }
    Ok(StateSpaceModel {
        name: format!("{}_fused{}", m.name, j),
        horizon,
        update_graph: g,
        output_graph,
        params,
        ..m.clone()
    })
}

/// Original step index reached after each fused step.
pub fn fused_sample_steps(horizon: usize, j: usize) -> Vec<usize> {
    (0..=horizon.div_ceil(j + 1)).map(|i| (i * (j + 1)).min(horizon)).collect()
}

fn redirect(n: &mut Netlist, from: NodeIdx, to: NodeIdx) {
    for (d, node) in n.nodes.iter_mut().enumerate() {
        if d == to {
            continue;
        }
        for w in &mut node.inputs {
            if w.src == from {
                w.src = to;
            }
        }
    }
}

/// Adds `stages` register ranks after multiplier `node`.
pub fn pipeline_multiplier(n: &Netlist, node: NodeIdx, stages: usize) -> Result<Netlist, PassError> {
    if !matches!(n.nodes.get(node).map(|x| &x.kind), Some(NodeKind::Mul)) {
        return Err(PassError::NotMultiplier(node));
    }
    let mut out = n.clone();
    if stages == 0 {
        return Ok(out);
    }
    let ty = n.nodes[node].ty;
    let name = format!("{}_pipe", n.nodes[node].name);
    let buf = out.add(name, NodeKind::Buf, ty, vec![Wire { src: node, regs: vec![0; stages] }], Role::Datapath);
    redirect(&mut out, node, buf);
    Ok(out)
}

/// Pipelines every output-layer multiplier and delays data_valid_out to
/// match, so the ports stay aligned. On a C-slowed netlist each stage is C
/// registers deep.
pub fn pipeline_output_multipliers(n: &Netlist, stages: usize) -> Netlist {
    let mut out = n.clone();
    if stages == 0 {
        return out;
    }
    let depth = stages * n.meta.slow;
    let muls: Vec<NodeIdx> =
        (0..n.nodes.len()).filter(|&i| n.nodes[i].role == Role::OutputProduct && matches!(n.nodes[i].kind, NodeKind::Mul)).collect();
    for m in muls {
        out = pipeline_multiplier(&out, m, depth).expect("selected multipliers");
    }
    if let Some(dv) = out.find_port("data_valid_out") {
        out.nodes[dv].inputs[0].regs.extend(std::iter::repeat_n(0, depth));
    }
    out.meta.out_pipeline += stages;
    out
}

/// Each register becomes a chain of `c` registers with the same reset
/// value, so the circuit serves `c` interleaved streams.
pub fn c_slow(n: &Netlist, c: usize) -> Netlist {
    let mut out = n.clone();
    if c <= 1 {
        return out;
    }
    for node in &mut out.nodes {
        for w in &mut node.inputs {
            w.regs = w.regs.iter().flat_map(|&r| std::iter::repeat_n(r, c)).collect();
        }
    }
    out.meta.slow *= c;
    out
}

fn is_fixed_point(kind: &NodeKind) -> bool {
    matches!(kind, NodeKind::Input { .. } | NodeKind::Output { .. } | NodeKind::Const(_))
}

fn is_const_wire(n: &Netlist, w: &Wire) -> bool {
    w.regs.is_empty() && matches!(n.nodes[w.src].kind, NodeKind::Const(_))
}

/// Moves one register from every input of `v` to every output of `v`.
fn move_forward(n: &Netlist, v: NodeIdx, fanout: &[Vec<(NodeIdx, usize)>]) -> Option<Netlist> {
    let node = &n.nodes[v];
    if is_fixed_point(&node.kind) || fanout[v].is_empty() {
        return None;
    }
    let mut any = false;
    let mut args = Vec::with_capacity(node.inputs.len());
    for w in &node.inputs {
        if let Some(&last) = w.regs.last() {
            any = true;
            args.push(last);
        } else if let NodeKind::Const(c) = n.nodes[w.src].kind {
            args.push(c);
        } else {
            return None;
        }
    }
    if !any {
        return None;
    }
    let init = n.eval_node(v, &args);
    let mut out = n.clone();
    for w in &mut out.nodes[v].inputs {
        w.regs.pop();
    }
    for &(d, slot) in &fanout[v] {
        out.nodes[d].inputs[slot].regs.insert(0, init);
    }
    Some(out)
}

/// Moves one register from every output of `v` to every non-constant input.
fn move_backward(n: &Netlist, v: NodeIdx, fanout: &[Vec<(NodeIdx, usize)>]) -> Option<Netlist> {
    let node = &n.nodes[v];
    if is_fixed_point(&node.kind) || fanout[v].is_empty() {
        return None;
    }
    let mut y0 = None;
    for &(d, slot) in &fanout[v] {
        let first = *n.nodes[d].inputs[slot].regs.first()?;
        if y0.is_some_and(|y| y != first) {
            return None;
        }
        y0 = Some(first);
    }
    let args: Vec<i128> = node
        .inputs
        .iter()
        .map(|w| match n.nodes[w.src].kind {
            NodeKind::Const(c) if w.regs.is_empty() => c,
            _ => 0,
        })
        .collect();
    // new registers reset to zero; legal only if that reproduces y0
    if n.eval_node(v, &args) != y0? {
        return None;
    }
    let mut out = n.clone();
    for &(d, slot) in &fanout[v] {
        out.nodes[d].inputs[slot].regs.remove(0);
    }
    for k in 0..node.inputs.len() {
        if !is_const_wire(n, &node.inputs[k]) {
            out.nodes[v].inputs[k].regs.push(0);
        }
    }
    Some(out)
}

/// `(critical path, nodes ending a critical path)`.
fn score(n: &Netlist, dm: &DelayModel) -> (u32, usize) {
    let at = arrival_times(n, dm).expect("retiming keeps the netlist acyclic");
    let crit = at.iter().copied().max().unwrap_or(0);
    (crit, at.iter().filter(|&&a| a == crit).count())
}

/// Nodes lying on some critical path.
fn critical_nodes(n: &Netlist, dm: &DelayModel) -> Vec<NodeIdx> {
    let at = arrival_times(n, dm).expect("acyclic");
    let crit = at.iter().copied().max().unwrap_or(0);
    let mut on = vec![false; n.nodes.len()];
    let mut queue: VecDeque<NodeIdx> = (0..n.nodes.len()).filter(|&i| at[i] == crit).collect();
    while let Some(i) = queue.pop_front() {
        if std::mem::replace(&mut on[i], true) {
            continue;
        }
        let base = at[i] - dm.delay(&n.nodes[i].kind);
        for w in n.nodes[i].inputs.iter().filter(|w| w.regs.is_empty()) {
            if at[w.src] == base {
                queue.push_back(w.src);
            }
        }
    }
    (0..n.nodes.len()).filter(|&i| on[i]).collect()
}

fn greedy(n: &Netlist, dm: &DelayModel) -> Netlist {
    let mut cur = n.clone();
    let mut best = score(&cur, dm);
    let fanout = n.fanout();
    for _ in 0..4 * n.nodes.len() + 16 {
        let mut pick: Option<((u32, usize), Netlist)> = None;
        for v in critical_nodes(&cur, dm) {
            for cand in [move_forward(&cur, v, &fanout), move_backward(&cur, v, &fanout)].into_iter().flatten() {
                let s = score(&cand, dm);
                if s < best && pick.as_ref().is_none_or(|(ps, _)| s < *ps) {
                    pick = Some((s, cand));
                }
            }
        }
        match pick {
            Some((s, next)) => {
                best = s;
                cur = next;
            }
            None => break,
        }
    }
    cur
}

struct Edge {
    src: NodeIdx,
    dst: NodeIdx,
    w: i64,
}

fn timing_edges(n: &Netlist) -> Vec<Edge> {
    let mut out = Vec::new();
    for (d, node) in n.nodes.iter().enumerate() {
        for w in node.inputs.iter().filter(|w| !is_const_wire(n, w)) {
            out.push(Edge { src: w.src, dst: d, w: w.regs.len() as i64 });
        }
    }
    out
}

/// Arrival times (or, with `reverse`, departure times) over the edges whose
/// retimed weight is zero. `None` on a register-free cycle.
fn path_times(n: &Netlist, dm: &DelayModel, edges: &[Edge], wr: &[i64], reverse: bool) -> Option<Vec<u32>> {
    let nv = n.nodes.len();
    let mut pred: Vec<Vec<NodeIdx>> = vec![Vec::new(); nv];
    let mut indeg = vec![0usize; nv];
    let mut succ: Vec<Vec<NodeIdx>> = vec![Vec::new(); nv];
    for (e, &w) in edges.iter().zip(wr) {
        if w == 0 {
            let (a, b) = if reverse { (e.dst, e.src) } else { (e.src, e.dst) };
            pred[b].push(a);
            succ[a].push(b);
            indeg[b] += 1;
        }
    }
    let mut t = vec![0u32; nv];
    let mut ready: Vec<NodeIdx> = (0..nv).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        t[i] = dm.delay(&n.nodes[i].kind) + pred[i].iter().map(|&p| t[p]).max().unwrap_or(0);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    (seen == nv).then_some(t)
}

/// Leiserson–Saxe FEAS for target period `c`. Lags count backward moves,
/// or forward moves with `forward`. Ports and constants stay put.
fn feas(n: &Netlist, dm: &DelayModel, edges: &[Edge], c: u32, forward: bool) -> Option<Vec<i64>> {
    let nv = n.nodes.len();
    let bound = edges.iter().map(|e| e.w).sum::<i64>() + 1;
    let mut k = vec![0i64; nv];
    for _ in 0..nv {
        let wr: Vec<i64> = edges
            .iter()
            .map(|e| e.w + if forward { k[e.src] - k[e.dst] } else { k[e.dst] - k[e.src] })
            .collect();
        if wr.iter().any(|&w| w < 0) {
            return None;
        }
        let t = path_times(n, dm, edges, &wr, forward)?;
        let late: Vec<NodeIdx> = (0..nv).filter(|&v| t[v] > c).collect();
        if late.is_empty() {
            return Some(k);
        }
        for v in late {
            if is_fixed_point(&n.nodes[v].kind) {
                return None;
            }
            k[v] += 1;
            if k[v] > bound {
                return None;
            }
        }
    }
    None
}

/// Applies the lags one legal elementary move at a time.
fn realize(n: &Netlist, lags: &[i64], forward: bool) -> Option<Netlist> {
    let fanout = n.fanout();
    let mut cur = n.clone();
    let mut left = lags.to_vec();
    while left.iter().any(|&k| k > 0) {
        let mut moved = false;
        for v in 0..left.len() {
            if left[v] == 0 {
                continue;
            }
            let next = if forward { move_forward(&cur, v, &fanout) } else { move_backward(&cur, v, &fanout) };
            if let Some(next) = next {
                cur = next;
                left[v] -= 1;
                moved = true;
            }
        }
        if !moved {
            return None;
        }
    }
    Some(cur)
}

/// Shortest period reachable by moving registers in one direction only.
fn min_period(n: &Netlist, dm: &DelayModel, forward: bool) -> Option<Netlist> {
    let edges = timing_edges(n);
    let floor = n.nodes.iter().map(|x| dm.delay(&x.kind)).max().unwrap_or(0);
    let start = critical_path(n, dm).ok()?;
    let mut best = None;
    for c in (floor..start).rev() {
        let Some(r) = feas(n, dm, &edges, c, forward).and_then(|lags| realize(n, &lags, forward)) else { break };
        if critical_path(&r, dm).ok()? > c {
            break;
        }
        best = Some(r);
    }
    best
}

/// Retiming under `dm`: Leiserson–Saxe feasibility search with backward-only
/// and forward-only register motion (forward moves recompute reset values
/// by evaluating the node; backward moves are taken only when all-zero
/// resets reproduce the old value), each followed by a greedy pass over
/// single moves on the critical path. The best result is kept; the
/// critical path never grows and registers never cross ports.
pub fn retime(n: &Netlist, dm: &DelayModel) -> Netlist {
    let mut best = greedy(n, dm);
    for forward in [false, true] {
        if let Some(r) = min_period(n, dm, forward) {
            let r = greedy(&r, dm);
            if score(&r, dm) < score(&best, dm) {
                best = r;
            }
        }
    }
    best
}

/// Lag `r(v)` with `w'(e) = w(e) + r(dst) − r(src)` on every non-constant
/// wire and `r = 0` at every port, if one exists. Its existence means every
/// path and cycle keeps its register count.
pub fn retiming_lags(before: &Netlist, after: &Netlist) -> Option<Vec<i64>> {
    if before.nodes.len() != after.nodes.len() {
        return None;
    }
    let n = before.nodes.len();
    let mut adj: Vec<Vec<(NodeIdx, i64)>> = vec![Vec::new(); n];
    for d in 0..n {
        let (a, b) = (&before.nodes[d].inputs, &after.nodes[d].inputs);
        if a.len() != b.len() {
            return None;
        }
        for (wa, wb) in a.iter().zip(b) {
            if wa.src != wb.src {
                return None;
            }
            if is_const_wire(before, wa) && wb.regs.is_empty() {
                continue;
            }
            // r(dst) − r(src) = w' − w
            let delta = wb.regs.len() as i64 - wa.regs.len() as i64;
            adj[wa.src].push((d, delta));
            adj[d].push((wa.src, -delta));
        }
    }
    let mut lag: Vec<Option<i64>> = vec![None; n];
    let ports = (0..n).filter(|&i| before.port_name(i).is_some());
    let roots: Vec<NodeIdx> = ports.chain(0..n).collect();
    for root in roots {
        if lag[root].is_some() {
            continue;
        }
        lag[root] = Some(0);
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            let li = lag[i]?;
            for &(j, delta) in &adj[i] {
                let want = li + delta;
                match lag[j] {
                    None => {
                        lag[j] = Some(want);
                        queue.push_back(j);
                    }
                    Some(x) if x != want => return None,
                    Some(_) => {}
                }
            }
        }
    }
    let lag: Vec<i64> = lag.into_iter().collect::<Option<_>>()?;
    (0..n).filter(|&i| before.port_name(i).is_some()).all(|i| lag[i] == 0).then_some(lag)
}

/// Register counts of every input→output port path. `None` when a cycle
/// is reachable between ports (path sets would be infinite).
pub fn io_path_register_counts(n: &Netlist) -> Option<BTreeMap<(String, String), BTreeSet<usize>>> {
    let fanout = n.fanout();
    let mut out: BTreeMap<(String, String), BTreeSet<usize>> = BTreeMap::new();
    fn walk(
        n: &Netlist,
        fanout: &[Vec<(NodeIdx, usize)>],
        at: NodeIdx,
        regs: usize,
        on_path: &mut Vec<bool>,
        from: &str,
        out: &mut BTreeMap<(String, String), BTreeSet<usize>>,
    ) -> bool {
        if let NodeKind::Output { port } = &n.nodes[at].kind {
            out.entry((from.to_string(), port.clone())).or_default().insert(regs);
        }
        if on_path[at] {
            return false;
        }
        on_path[at] = true;
        for &(d, slot) in &fanout[at] {
            if on_path[d] {
                return false;
            }
            if !walk(n, fanout, d, regs + n.nodes[d].inputs[slot].regs.len(), on_path, from, out) {
                return false;
            }
        }
        on_path[at] = false;
        true
    }
    for i in n.inputs() {
        let port = n.port_name(i)?.to_string();
        let mut on_path = vec![false; n.nodes.len()];
        if !walk(n, &fanout, i, 0, &mut on_path, &port, &mut out) {
            return None;
        }
    }
    Some(out)
}

/// One entry of a pass pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassSpec {
    Fuse(usize),
    PipelineMult(usize),
    Retime,
    CSlow(usize),
}

impl PassSpec {
    /// Whether the pass rewrites the model rather than the netlist.
    pub fn is_model_pass(&self) -> bool {
        matches!(self, PassSpec::Fuse(_))
    }
}

impl FromStr for PassSpec {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = || arg.and_then(|a| a.trim().parse::<usize>().ok()).ok_or_else(|| PassError::Unknown(s.to_string()));
        match name.trim() {
            "fuse" => Ok(PassSpec::Fuse(num()?)),
            "pipeline_mult" => Ok(PassSpec::PipelineMult(num()?)),
            "c_slow" => Ok(PassSpec::CSlow(num()?)),
            "retime" if arg.is_none() => Ok(PassSpec::Retime),
            _ => Err(PassError::Unknown(s.to_string())),
        }
    }
}

impl fmt::Display for PassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassSpec::Fuse(j) => write!(f, "fuse:{j}"),
            PassSpec::PipelineMult(s) => write!(f, "pipeline_mult:{s}"),
            PassSpec::Retime => write!(f, "retime"),
            PassSpec::CSlow(c) => write!(f, "c_slow:{c}"),
        }
    }
}

/// Applies the netlist-level passes of a pipeline in order.
pub fn run_netlist_passes(n: &Netlist, passes: &[PassSpec], dm: &DelayModel) -> Netlist {
    let mut cur = n.clone();
    for p in passes {
        cur = match *p {
            PassSpec::Fuse(_) => cur,
            PassSpec::PipelineMult(s) => pipeline_output_multipliers(&cur, s),
            PassSpec::Retime => retime(&cur, dm),
            PassSpec::CSlow(c) => c_slow(&cur, c),
        };
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::FixedPointFormat;
    use crate::model::ActivationKind;
    use crate::netlist::tests::bare_meta;
    use crate::netlist::SigType;
    use crate::rtlsim::RtlSim;
    use crate::sim::reference::reference_trajectory;

    fn linear_model(steps: Vec<Option<Matrix>>, b: Matrix) -> StateSpaceModel {
        let mm = b.rows();
        let horizon = steps.len();
        let mut g = DataflowGraph::new();
        let x = g.add(DfOp::StateIn, &[]);
        let u = g.add(DfOp::Input, &[]);
        let ax = g.add(DfOp::MatVec("A".into()), &[x]);
        let bu = g.add(DfOp::MatVec("B".into()), &[u]);
        let s = g.add(DfOp::VecAdd, &[ax, bu]);
        g.set_output(s);
        let mut og = DataflowGraph::new();
        let x = og.add(DfOp::StateIn, &[]);
        let y = og.add(DfOp::MatVec("C".into()), &[x]);
        og.set_output(y);
        let mut params = BTreeMap::new();
        params.insert("A".into(), ParamTable::per_step(mm, mm, steps));
        params.insert("B".into(), ParamTable::constant(b.clone()));
        params.insert("C".into(), ParamTable::constant(Matrix::identity(mm)));
        StateSpaceModel {
            name: "lin".into(),
            state_dim: mm,
            input_dim: b.cols(),
            output_dim: mm,
            horizon,
            initial_state: vec![0.5; mm],
            update_graph: g,
            output_graph: og,
            params,
        }
    }

    #[test]
    fn identity_dynamics_fuse_to_identity() {
        let m = linear_model(vec![Some(Matrix::identity(3)); 6], Matrix::zeros(3, 1));
        for j in 1..4 {
            for b in linear_blocks(&m, j).unwrap() {
                assert_eq!(b.phi, Matrix::identity(3));
            }
        }
    }

    #[test]
    fn four_rotations_fuse_to_identity() {
        let r = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let m = linear_model(vec![Some(r); 8], Matrix::zeros(2, 1));
        let blocks = linear_blocks(&m, 3).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].phi, Matrix::identity(2));
    }

    #[test]
    fn fused_trajectory_matches_samples() {
        let mats: Vec<Option<Matrix>> = (0..7)
            .map(|k| Some(Matrix::from_vec(2, 2, vec![0.9, 0.1 * k as f64, -0.2, 0.5])))
            .collect();
        let m = linear_model(mats, Matrix::from_vec(2, 1, vec![1.0, -0.5]));
        let fused = fuse_state_transition(&m, 2).unwrap();
        assert_eq!(fused.horizon, 3);
        let u = [0.3];
        let seq = reference_trajectory(&m, &u).unwrap();
        let fz = reference_trajectory(&fused, &u).unwrap();
        for (i, step) in fused_sample_steps(7, 2).into_iter().enumerate() {
            for (a, b) in fz[i].iter().zip(&seq[step]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn nonlinear_update_is_rejected_by_node() {
        let m = crate::nn::build_state_space(&crate::nn::random_nn(2, 3, 3, 1, 0)).unwrap();
        match fuse_state_transition(&m, 1) {
            Err(PassError::Nonlinear { node, op }) => {
                assert_eq!(m.update_graph.nodes[node].op, DfOp::Activation(ActivationKind::Tanh));
                assert!(op.contains("Tanh"));
            }
            other => panic!("{other:?}"),
        }
    }

    fn q() -> SigType {
        SigType::Fixed(FixedPointFormat::new(16, 8).unwrap())
    }

    /// in → add → mul → add → (reg) → out, with the second operand of each
    /// node from a second input.
    fn add_mul_add() -> Netlist {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(), vec![], Role::Port);
        let b = n.add("b", NodeKind::Input { port: "b".into() }, q(), vec![], Role::Port);
        let s1 = n.add("s1", NodeKind::Add, q(), vec![Wire::comb(a), Wire::comb(b)], Role::Datapath);
        let m = n.add("m", NodeKind::Mul, q(), vec![Wire::comb(s1), Wire::comb(b)], Role::Datapath);
        let s2 = n.add("s2", NodeKind::Add, q(), vec![Wire::comb(m), Wire::comb(a)], Role::Datapath);
        n.add("y", NodeKind::Output { port: "y".into() }, q(), vec![Wire::reg(s2, 0)], Role::Port);
        n
    }

    #[test]
    fn retiming_moves_register_before_final_add() {
        let n = add_mul_add();
        let dm = DelayModel::default();
        assert_eq!(critical_path(&n, &dm).unwrap(), 5);
        let r = retime(&n, &dm);
        assert!(critical_path(&r, &dm).unwrap() <= 4);
        assert!(r.nodes[4].inputs.iter().all(|w| w.regs.len() == 1));
        assert!(r.nodes[5].inputs[0].regs.is_empty());
        assert_eq!(io_path_register_counts(&n), io_path_register_counts(&r));
        assert!(retiming_lags(&n, &r).is_some());
    }

    #[test]
    fn balanced_netlist_is_a_fixed_point() {
        let mut n = add_mul_add();
        n.nodes[5].inputs[0].regs.clear();
        let dm = DelayModel::default();
        let r = retime(&n, &dm);
        assert_eq!(critical_path(&r, &dm).unwrap(), critical_path(&n, &dm).unwrap());
        assert_eq!(r.register_count(), 0);
    }

    #[test]
    fn pipelining_adds_registers_on_every_path() {
        let n = add_mul_add();
        assert_eq!(pipeline_multiplier(&n, 3, 0).unwrap().nodes.len(), n.nodes.len());
        let p = pipeline_multiplier(&n, 3, 2).unwrap();
        let before = io_path_register_counts(&n).unwrap();
        let after = io_path_register_counts(&p).unwrap();
        // paths through the multiplier gain 2, the a → s2 bypass does not
        assert_eq!(before[&("b".into(), "y".into())], BTreeSet::from([1]));
        assert_eq!(after[&("b".into(), "y".into())], BTreeSet::from([3]));
        assert_eq!(after[&("a".into(), "y".into())], BTreeSet::from([1, 3]));
        assert!(matches!(pipeline_multiplier(&n, 2, 1), Err(PassError::NotMultiplier(2))));
    }

    #[test]
    fn pipelined_stream_is_delayed_copy() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q(), vec![], Role::Port);
        let m = n.add("m", NodeKind::Mul, q(), vec![Wire::comb(a), Wire::comb(a)], Role::Datapath);
        n.add("y", NodeKind::Output { port: "y".into() }, q(), vec![Wire::comb(m)], Role::Port);
        let p = pipeline_multiplier(&n, m, 2).unwrap();
        let mut sa = RtlSim::new(&n).unwrap();
        let mut sb = RtlSim::new(&p).unwrap();
        let ins: Vec<i128> = (0..20).map(|k| k * 37 % 200 - 100).collect();
        let ya: Vec<i128> = ins.iter().map(|&v| sa.step(&[v], false)[0]).collect();
        let yb: Vec<i128> = ins.iter().map(|&v| sb.step(&[v], false)[0]).collect();
        assert_eq!(&yb[2..], &ya[..18]);
        assert_eq!(&yb[..2], &[0, 0]);
    }

    #[test]
    fn c_slow_doubles_registers() {
        let n = add_mul_add();
        assert_eq!(c_slow(&n, 1).register_count(), n.register_count());
        let c = c_slow(&n, 2);
        assert_eq!(c.register_count(), 2 * n.register_count());
        assert_eq!(c.meta.slow, 2);
    }

    #[test]
    fn pass_specs_parse() {
        let specs: Vec<PassSpec> = ["fuse:3", "pipeline_mult:2", "retime", "c_slow:2"].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(specs, vec![PassSpec::Fuse(3), PassSpec::PipelineMult(2), PassSpec::Retime, PassSpec::CSlow(2)]);
        assert_eq!(specs.iter().map(ToString::to_string).collect::<Vec<_>>(), ["fuse:3", "pipeline_mult:2", "retime", "c_slow:2"]);
        for bad in ["fuse", "retime:1", "unroll:2", "c_slow:x"] {
            assert!(bad.parse::<PassSpec>().is_err(), "{bad}");
        }
    }

    fn nn_netlist(p: usize) -> (StateSpaceModel, Netlist) {
        use crate::elaborate::{elaborate, Schedule};
        use crate::sim::fixed::FormatAssignment;
        use crate::sim::lut::{gen_activation_lut, DEFAULT_RANGE};
        let m = crate::nn::build_state_space(&crate::nn::random_nn(3, 4, 4, 2, 21)).unwrap();
        let f = FixedPointFormat::new(16, 12).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        let s = Schedule { multipliers_per_node: p, clock_ratio: 2 + 4 * (4usize.div_ceil(p) + 2) };
        let n = elaborate(&m, &s, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        (m, n)
    }

    fn measured_latency(n: &Netlist) -> usize {
        use crate::rtlsim::{run, sample_stimulus};
        let stim = sample_stimulus(n, &[vec![0.25; n.meta.input_dim]]);
        let trace = run(n, &stim, crate::elaborate::latency(n) + 8).unwrap();
        trace.column("data_valid_out").unwrap().iter().position(|&v| v != 0).unwrap()
    }

    #[test]
    fn netlist_passes_keep_the_gate_green() {
        use crate::elaborate::latency;
        use crate::rtlsim::compare_with_functional;
        let (m, n) = nn_netlist(2);
        let samples = crate::nn::random_inputs(3, 30, 8);
        let dm = DelayModel::default();
        for passes in [
            vec![PassSpec::CSlow(2)],
            vec![PassSpec::CSlow(3)],
            vec![PassSpec::Retime],
            vec![PassSpec::PipelineMult(2)],
            vec![PassSpec::PipelineMult(1), PassSpec::Retime, PassSpec::CSlow(2)],
            vec![PassSpec::CSlow(2), PassSpec::PipelineMult(1)],
        ] {
            let out = run_netlist_passes(&n, &passes, &dm);
            assert!(out.validate().is_empty());
            let rep = compare_with_functional(&m, &out, &samples).unwrap();
            assert!(rep.is_equivalent(), "{passes:?}: {rep}");
            assert!(critical_path(&out, &dm).unwrap() <= critical_path(&n, &dm).unwrap() || passes.contains(&PassSpec::CSlow(2)));
            assert_eq!(measured_latency(&out), latency(&out));
        }
        assert_eq!(latency(&c_slow(&n, 2)), 2 * latency(&n));
    }

    #[test]
    fn retiming_the_nn_netlist() {
        let (m, n) = nn_netlist(1);
        let dm = DelayModel::default();
        let r = retime(&n, &dm);
        assert!(critical_path(&r, &dm).unwrap() < critical_path(&n, &dm).unwrap());
        assert!(retiming_lags(&n, &r).is_some());
        assert_eq!(io_path_register_counts(&n), io_path_register_counts(&r));
        let samples = crate::nn::random_inputs(3, 20, 5);
        assert!(crate::rtlsim::compare_with_functional(&m, &r, &samples).unwrap().is_equivalent());
    }
}
