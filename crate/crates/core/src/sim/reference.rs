//! Double-precision reference simulation.

use crate::model::{DataflowGraph, DfOp, StateSpaceModel};

use super::SimError;

struct GraphEval<'a> {
    model: &'a StateSpaceModel,
    graph: &'a DataflowGraph,
    order: Vec<usize>,
    delays: Vec<Vec<f64>>,
}

impl<'a> GraphEval<'a> {
    fn new(model: &'a StateSpaceModel, graph: &'a DataflowGraph) -> Result<Self, SimError> {
        let order = graph.topo_order().map_err(|n| SimError::InvalidModel(format!("cycle at node {n}")))?;
        let dims = model.node_dims(graph);
        let delays = graph
            .nodes
            .iter()
            .zip(&dims)
            .map(|(n, d)| if n.op == DfOp::Delay { vec![0.0; d.unwrap_or(0)] } else { Vec::new() })
            .collect();
        Ok(Self { model, graph, order, delays })
    }

    fn eval(&mut self, x: &[f64], u: &[f64], k: usize) -> Vec<f64> {
        let mut vals: Vec<Vec<f64>> = vec![Vec::new(); self.graph.nodes.len()];
        for &id in &self.order {
            let node = &self.graph.nodes[id];
            let arg = |i: usize, vals: &Vec<Vec<f64>>| vals[node.inputs[i]].clone();
            vals[id] = match &node.op {
                DfOp::Input => u.to_vec(),
                DfOp::StateIn => x.to_vec(),
                DfOp::Const(v) => v.clone(),
                DfOp::Param(t) => self.model.params[t].at_or_zero(k).data().to_vec(),
                DfOp::MatVec(t) => {
                    let v = arg(0, &vals);
                    match self.model.params[t].at(k) {
                        Some(mx) => mx.matvec(&v),
                        None => vec![0.0; self.model.params[t].rows],
                    }
                }
                DfOp::VecAdd => {
                    let (a, b) = (arg(0, &vals), arg(1, &vals));
                    a.iter().zip(&b).map(|(p, q)| p + q).collect()
                }
                DfOp::ScalarAdd => {
                    let s = vals[node.inputs[1]][0];
                    vals[node.inputs[0]].iter().map(|v| v + s).collect()
                }
                DfOp::ScalarMul => {
                    let s = vals[node.inputs[1]][0];
                    vals[node.inputs[0]].iter().map(|v| v * s).collect()
                }
                DfOp::Activation(kind) => vals[node.inputs[0]].iter().map(|&v| kind.eval(v)).collect(),
                DfOp::Delay => self.delays[id].clone(),
            };
        }
        for (id, node) in self.graph.nodes.iter().enumerate() {
            if node.op == DfOp::Delay {
                self.delays[id] = vals[node.inputs[0]].clone();
            }
        }
        std::mem::take(&mut vals[self.graph.output])
    }
}

fn check(m: &StateSpaceModel, u: &[f64]) -> Result<(), SimError> {
    if u.len() != m.input_dim {
        return Err(SimError::InputDimension { expected: m.input_dim, found: u.len() });
    }
    let diags = crate::model::validate_model(m);
    if let Some(d) = diags.first() {
        return Err(SimError::InvalidModel(d.to_string()));
    }
    Ok(())
}

/// States `x[0] … x[N]` under exact double-precision application of the
/// update map.
pub fn reference_trajectory(m: &StateSpaceModel, u: &[f64]) -> Result<Vec<Vec<f64>>, SimError> {
    check(m, u)?;
    let mut upd = GraphEval::new(m, &m.update_graph)?;
    let mut traj = Vec::with_capacity(m.horizon + 1);
    traj.push(m.initial_state.clone());
    for k in 0..m.horizon {
        let next = upd.eval(&traj[k], u, k);
        traj.push(next);
    }
    Ok(traj)
}

/// Output `y = g(x[N], u, N)` after N updates from `x[0]`.
pub fn simulate_reference(m: &StateSpaceModel, u: &[f64]) -> Result<Vec<f64>, SimError> {
    let traj = reference_trajectory(m, u)?;
    let mut out = GraphEval::new(m, &m.output_graph)?;
    Ok(out.eval(&traj[m.horizon], u, m.horizon))
}
