//! State-space intermediate representation.
//!
//! A model is `x[k+1] = f(x[k], u, k)`, `y = g(x[N], u, N)`, where `f` and `g`
//! are small vector dataflow graphs. Anything that depends on `k` (weights,
//! biases, transition matrices) lives in named parameter tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fixed::FixedPointFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    /// Builds from nested rows; `None` when rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.get(k, c);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Values of one parameter across time steps. `PerStep` entries that are
/// `None` read as all-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSteps {
    Static(Matrix),
    PerStep(Vec<Option<Matrix>>),
}

/// A named parameter (matrix, or vector when `cols == 1`), possibly
/// time-varying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: usize,
    pub cols: usize,
    pub steps: TableSteps,
    /// Quantization grid override for this tensor. Values snap to this grid
    /// before being carried in the datapath weight format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<FixedPointFormat>,
}

impl ParamTable {
    pub fn constant(m: Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), steps: TableSteps::Static(m), format: None }
    }

    pub fn per_step(rows: usize, cols: usize, steps: Vec<Option<Matrix>>) -> Self {
        Self { rows, cols, steps: TableSteps::PerStep(steps), format: None }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::constant(Matrix::from_vec(n, 1, v))
    }

    /// The value at step `k`; `None` when it is identically zero.
    pub fn at(&self, k: usize) -> Option<&Matrix> {
        match &self.steps {
            TableSteps::Static(m) => Some(m),
            TableSteps::PerStep(v) => v.get(k).and_then(Option::as_ref),
        }
    }

    pub fn at_or_zero(&self, k: usize) -> Matrix {
        self.at(k).cloned().unwrap_or_else(|| Matrix::zeros(self.rows, self.cols))
    }

    pub fn is_zero_at(&self, k: usize) -> bool {
        self.at(k).is_none_or(Matrix::is_zero)
    }

    pub fn step_count(&self) -> Option<usize> {
        match &self.steps {
            TableSteps::Static(_) => None,
            TableSteps::PerStep(v) => Some(v.len()),
        }
    }

    pub fn is_time_varying(&self) -> bool {
        matches!(self.steps, TableSteps::PerStep(_))
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfOp {
    /// The input vector `u` (length L).
    Input,
    /// The current state `x[k]` (length M).
    StateIn,
    Const(Vec<f64>),
    /// Vector-valued table read at the current step.
    Param(String),
    /// Table matrix times the single operand.
    MatVec(String),
    VecAdd,
    /// Vector plus a length-1 operand, broadcast.
    ScalarAdd,
    /// Vector times a length-1 operand, broadcast.
    ScalarMul,
    Activation(ActivationKind),
    /// Value of the operand at the previous step (zero at k = 0).
    Delay,
}

impl DfOp {
    pub fn arity(&self) -> usize {
        match self {
            DfOp::Input | DfOp::StateIn | DfOp::Const(_) | DfOp::Param(_) => 0,
            DfOp::MatVec(_) | DfOp::Activation(_) | DfOp::Delay => 1,
            DfOp::VecAdd | DfOp::ScalarAdd | DfOp::ScalarMul => 2,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, DfOp::Activation(ActivationKind::Tanh) | DfOp::ScalarMul)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfNode {
    pub op: DfOp,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataflowGraph {
    pub nodes: Vec<DfNode>,
    pub output: NodeId,
}

impl DataflowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, op: DfOp, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(DfNode { op, inputs: inputs.to_vec() });
        self.nodes.len() - 1
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = id;
    }

    /// Evaluation order with `Delay` edges cut; `Err` names a node on a cycle.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, NodeId> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut users: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op == DfOp::Delay {
                continue;
            }
            for &src in &node.inputs {
                if src < n {
                    indeg[id] += 1;
                    users[src].push(id);
                }
            }
        }
        let mut ready: Vec<NodeId> = (0..n).filter(|&i| indeg[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(id) = ready.pop() {
            order.push(id);
            for &u in users[id].iter().rev() {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.push(u);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).find(|&i| indeg[i] > 0).unwrap_or(0))
        }
    }

    pub fn contains_op(&self, pred: impl Fn(&DfOp) -> bool) -> bool {
        self.nodes.iter().any(|n| pred(&n.op))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphRole {
    Update,
    Output,
}

impl fmt::Display for GraphRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphRole::Update => "update",
            GraphRole::Output => "output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Dimension,
    Arity,
    Cycle,
    Dangling,
    UnknownTable,
    Horizon,
    InitialState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub graph: Option<GraphRole>,
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.graph, self.node) {
            (Some(g), Some(n)) => write!(f, "{g} graph node {n}: {}", self.message),
            (Some(g), None) => write!(f, "{g} graph: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizon: usize,
    pub initial_state: Vec<f64>,
    pub update_graph: DataflowGraph,
    pub output_graph: DataflowGraph,
    pub params: BTreeMap<String, ParamTable>,
}

impl StateSpaceModel {
    pub fn param(&self, name: &str) -> Option<&ParamTable> {
        self.params.get(name)
    }

    /// Output dimension of every node, or `None` where it cannot be inferred.
    pub fn node_dims(&self, graph: &DataflowGraph) -> Vec<Option<usize>> {
        let mut dims = vec![None; graph.nodes.len()];
        let Ok(order) = graph.topo_order() else {
            return dims;
        };
        // Delay nodes take their operand's dim; operands may come later in
        // the order, so iterate to a fixed point.
        for _ in 0..2 {
            for &id in &order {
                let node = &graph.nodes[id];
                let arg = |i: usize| node.inputs.get(i).and_then(|&s| dims.get(s).copied().flatten());
                dims[id] = match &node.op {
                    DfOp::Input => Some(self.input_dim),
                    DfOp::StateIn => Some(self.state_dim),
                    DfOp::Const(v) => Some(v.len()),
                    DfOp::Param(t) => self.params.get(t).map(|p| p.rows),
                    DfOp::MatVec(t) => self.params.get(t).map(|p| p.rows),
                    DfOp::VecAdd | DfOp::ScalarAdd | DfOp::ScalarMul => arg(0),
                    DfOp::Activation(_) | DfOp::Delay => arg(0),
                };
            }
        }
        dims
    }
}

/// Checks every structural invariant of the model; an empty list means the
/// model is well formed.
pub fn validate_model(m: &StateSpaceModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if m.horizon == 0 {
        out.push(Diagnostic {
            kind: DiagnosticKind::Horizon,
            graph: None,
            node: None,
            message: "horizon must be at least 1".into(),
        });
    }
    if m.initial_state.len() != m.state_dim {
        out.push(Diagnostic {
            kind: DiagnosticKind::InitialState,
            graph: None,
            node: None,
            message: format!(
                "initial state has {} entries, state dimension is {}",
                m.initial_state.len(),
                m.state_dim
            ),
        });
    }
    validate_graph(m, &m.update_graph, GraphRole::Update, m.state_dim, &mut out);
    validate_graph(m, &m.output_graph, GraphRole::Output, m.output_dim, &mut out);
    out
}

fn validate_graph(
    m: &StateSpaceModel,
    g: &DataflowGraph,
    role: GraphRole,
    want_dim: usize,
    out: &mut Vec<Diagnostic>,
) {
    let diag = |kind, node: Option<NodeId>, message: String| Diagnostic {
        kind,
        graph: Some(role),
        node,
        message,
    };
    let n = g.nodes.len();
    if g.output >= n {
        out.push(diag(DiagnosticKind::Arity, None, format!("output node {} does not exist", g.output)));
        return;
    }
    let mut structural_ok = true;
    for (id, node) in g.nodes.iter().enumerate() {
        if node.inputs.len() != node.op.arity() {
            structural_ok = false;
            out.push(diag(
                DiagnosticKind::Arity,
                Some(id),
                format!("{:?} takes {} operands, has {}", node.op, node.op.arity(), node.inputs.len()),
            ));
        }
        if let Some(&bad) = node.inputs.iter().find(|&&s| s >= n) {
            structural_ok = false;
            out.push(diag(DiagnosticKind::Arity, Some(id), format!("operand {bad} does not exist")));
        }
        if let DfOp::Param(t) | DfOp::MatVec(t) = &node.op {
            match m.params.get(t) {
                None => out.push(diag(DiagnosticKind::UnknownTable, Some(id), format!("unknown table `{t}`"))),
                Some(p) => {
                    if let Some(steps) = p.step_count() {
                        let need = match role {
                            GraphRole::Update => m.horizon,
                            GraphRole::Output => m.horizon + 1,
                        };
                        if steps < need {
                            out.push(diag(
                                DiagnosticKind::Dimension,
                                Some(id),
                                format!("table `{t}` covers {steps} steps, needs {need}"),
                            ));
                        }
                    }
                    let shapes_ok = match &p.steps {
                        TableSteps::Static(mx) => mx.rows() == p.rows && mx.cols() == p.cols,
                        TableSteps::PerStep(v) => v
                            .iter()
                            .flatten()
                            .all(|mx| mx.rows() == p.rows && mx.cols() == p.cols),
                    };
                    if !shapes_ok {
                        out.push(diag(
                            DiagnosticKind::Dimension,
                            Some(id),
                            format!("table `{t}` has entries that are not {}x{}", p.rows, p.cols),
                        ));
                    }
                    if matches!(node.op, DfOp::Param(_)) && p.cols != 1 {
                        out.push(diag(
                            DiagnosticKind::Dimension,
                            Some(id),
                            format!("table `{t}` is read as a vector but has {} columns", p.cols),
                        ));
                    }
                }
            }
        }
    }
    if !structural_ok {
        return;
    }
    if let Err(on_cycle) = g.topo_order() {
        out.push(diag(
            DiagnosticKind::Cycle,
            Some(on_cycle),
            "combinational cycle not broken by a Delay".into(),
        ));
        return;
    }
    let dims = m.node_dims(g);
    for (id, node) in g.nodes.iter().enumerate() {
        let arg = |i: usize| dims[node.inputs[i]];
        match &node.op {
            DfOp::MatVec(t) => {
                if let (Some(p), Some(d)) = (m.params.get(t), arg(0)) {
                    if p.cols != d {
                        out.push(diag(
                            DiagnosticKind::Dimension,
                            Some(id),
                            format!("table `{t}` has {} columns, operand has {d} wires", p.cols),
                        ));
                    }
                }
            }
            DfOp::VecAdd => {
                if let (Some(a), Some(b)) = (arg(0), arg(1)) {
                    if a != b {
                        out.push(diag(DiagnosticKind::Dimension, Some(id), format!("adding {a} wires to {b} wires")));
                    }
                }
            }
            DfOp::ScalarAdd | DfOp::ScalarMul => {
                if let Some(b) = arg(1) {
                    if b != 1 {
                        out.push(diag(DiagnosticKind::Dimension, Some(id), format!("scalar operand has {b} wires")));
                    }
                }
            }
            _ => {}
        }
    }
    match dims[g.output] {
        Some(d) if d != want_dim => out.push(diag(
            DiagnosticKind::Arity,
            Some(g.output),
            format!("graph produces {d} wires, expected {want_dim}"),
        )),
        None => out.push(diag(
            DiagnosticKind::Dimension,
            Some(g.output),
            "output width cannot be inferred".into(),
        )),
        _ => {}
    }
    // every node must feed the graph output
    let mut live = HashSet::new();
    let mut stack = vec![g.output];
    while let Some(id) = stack.pop() {
        if live.insert(id) {
            stack.extend(g.nodes[id].inputs.iter().copied());
        }
    }
    for id in 0..n {
        if !live.contains(&id) {
            out.push(diag(DiagnosticKind::Dangling, Some(id), "result is never used".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(m: usize) -> StateSpaceModel {
        let mut upd = DataflowGraph::new();
        let x = upd.add(DfOp::StateIn, &[]);
        let ax = upd.add(DfOp::MatVec("A".into()), &[x]);
        upd.set_output(ax);
        let mut outg = DataflowGraph::new();
        let x = outg.add(DfOp::StateIn, &[]);
        let cx = outg.add(DfOp::MatVec("C".into()), &[x]);
        outg.set_output(cx);
        let mut params = BTreeMap::new();
        params.insert("A".into(), ParamTable::constant(Matrix::identity(m)));
        params.insert("C".into(), ParamTable::constant(Matrix::zeros(1, m)));
        StateSpaceModel {
            name: "lin".into(),
            state_dim: m,
            input_dim: 1,
            output_dim: 1,
            horizon: 3,
            initial_state: vec![0.0; m],
            update_graph: upd,
            output_graph: outg,
            params,
        }
    }

    #[test]
    fn well_formed_linear_model_has_no_diagnostics() {
        assert!(validate_model(&linear_model(3)).is_empty());
    }

    #[test]
    fn short_update_output_is_one_arity_diagnostic() {
        let mut m = linear_model(3);
        m.params.insert("A".into(), ParamTable::constant(Matrix::zeros(2, 3)));
        let d = validate_model(&m);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::Arity);
        assert_eq!(d[0].graph, Some(GraphRole::Update));
        assert_eq!(d[0].node, Some(1));
    }

    #[test]
    fn undelayed_cycle_is_one_cycle_diagnostic() {
        let mut m = linear_model(2);
        let g = &mut m.update_graph;
        // x -> add(x, self) loops through node 2 without a delay
        g.nodes.clear();
        g.add(DfOp::StateIn, &[]);
        g.add(DfOp::VecAdd, &[0, 1]);
        g.set_output(1);
        let d = validate_model(&m);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::Cycle);
        assert_eq!(d[0].node, Some(1));
    }

    #[test]
    fn delay_breaks_cycle() {
        let mut m = linear_model(2);
        let g = &mut m.update_graph;
        g.nodes.clear();
        g.add(DfOp::StateIn, &[]); // 0
        g.add(DfOp::VecAdd, &[0, 2]); // 1
        g.add(DfOp::Delay, &[1]); // 2
        g.set_output(1);
        assert!(validate_model(&m).is_empty());
    }

    #[test]
    fn dangling_and_unknown_table() {
        let mut m = linear_model(2);
        m.update_graph.add(DfOp::Param("nope".into()), &[]);
        let kinds: Vec<_> = validate_model(&m).iter().map(|d| d.kind).collect();
        assert!(kinds.contains(&DiagnosticKind::UnknownTable));
        assert!(kinds.contains(&DiagnosticKind::Dangling));
    }

    #[test]
    fn zero_horizon_rejected() {
        let mut m = linear_model(2);
        m.horizon = 0;
        assert_eq!(validate_model(&m)[0].kind, DiagnosticKind::Horizon);
    }

    #[test]
    fn matrix_ops() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let a2 = a.matmul(&a);
        let a4 = a2.matmul(&a2);
        assert_eq!(a4, Matrix::identity(2));
        assert_eq!(a.matvec(&[1.0, 2.0]), vec![2.0, -1.0]);
        assert_eq!(a.transpose().get(0, 1), -1.0);
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_none());
    }
}
