//! Bit-accurate fixed-point simulation.
//!
//! Mirrors the elaborated datapath: inputs are quantized to the input format
//! and carried in the state format, parameters are quantized to the weight
//! format, matrix-vector products accumulate exactly in a widened
//! accumulator, and the only rounding on the way to an activation is the
//! single requantize at its input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fixed::{
    ceil_log2, quantize_raw, requantize_raw, rescale_raw, FixedPointFormat, FpValue,
};
use crate::model::{ActivationKind, DfOp, ParamTable, StateSpaceModel};

use super::lut::{lut_eval_raw, LutRom};
use super::SimError;

/// Format per edge class. `accumulator` is derived when absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatAssignment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<FixedPointFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<FixedPointFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<FixedPointFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<FixedPointFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulator: Option<FixedPointFormat>,
}

impl FormatAssignment {
    /// Same format on every class except the accumulator.
    pub fn uniform(fmt: FixedPointFormat) -> Self {
        Self { input: Some(fmt), weight: Some(fmt), state: Some(fmt), output: Some(fmt), accumulator: None }
    }

    pub fn resolve(&self, m: &StateSpaceModel) -> Result<ResolvedFormats, SimError> {
        let need = |f: Option<FixedPointFormat>, name| f.ok_or(SimError::MissingFormat(name));
        let input = need(self.input, "input")?;
        let weight = need(self.weight, "weight")?;
        let state = need(self.state, "state")?;
        let output = need(self.output, "output")?;
        let product = weight.product(&state);
        let accumulator = match self.accumulator {
            Some(acc) => {
                if acc.frac_length() != product.frac_length() || acc.word_length() < product.word_length() {
                    return Err(SimError::FormatMismatch(format!(
                        "accumulator {acc} cannot hold exact {product} products"
                    )));
                }
                acc
            }
            None => {
                let terms = m.state_dim.max(m.input_dim) as u64 + 1;
                FixedPointFormat::widened(product.word_length() + ceil_log2(terms), product.frac_length())
            }
        };
        Ok(ResolvedFormats { input, weight, state, output, accumulator })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedFormats {
    pub input: FixedPointFormat,
    pub weight: FixedPointFormat,
    pub state: FixedPointFormat,
    pub output: FixedPointFormat,
    pub accumulator: FixedPointFormat,
}

/// Quantizes one parameter value, honoring a per-tensor grid override.
pub fn quantize_param(v: f64, table: &ParamTable, weight: FixedPointFormat) -> i128 {
    match table.format {
        Some(grid) => {
            let coarse = quantize_raw(v, grid);
            requantize_raw(coarse, grid.frac_length(), weight).raw()
        }
        None => quantize_raw(v, weight),
    }
}

#[derive(Debug, Clone)]
struct Vals {
    fmt: FixedPointFormat,
    raw: Vec<i128>,
}

impl Vals {
    fn to(&self, fmt: FixedPointFormat) -> Vec<i128> {
        if fmt == self.fmt {
            return self.raw.clone();
        }
        self.raw
            .iter()
            .map(|&r| fmt.saturate(rescale_raw(r, self.fmt.frac_length(), fmt.frac_length())))
            .collect()
    }
}

/// A model with every parameter quantized, ready to run many samples.
#[derive(Debug, Clone)]
pub struct FixedProgram<'a> {
    model: &'a StateSpaceModel,
    fmts: ResolvedFormats,
    lut: Option<&'a LutRom>,
    /// Quantized parameter tables: name -> per-step raw matrices (row-major).
    tables: BTreeMap<String, Vec<Option<Vec<i128>>>>,
    update_order: Vec<usize>,
    output_order: Vec<usize>,
}

impl<'a> FixedProgram<'a> {
    pub fn new(
        model: &'a StateSpaceModel,
        fmts: &FormatAssignment,
        lut: Option<&'a LutRom>,
    ) -> Result<Self, SimError> {
        if let Some(d) = crate::model::validate_model(model).first() {
            return Err(SimError::InvalidModel(d.to_string()));
        }
        let fmts = fmts.resolve(model)?;
        let uses_tanh = [&model.update_graph, &model.output_graph]
            .iter()
            .any(|g| g.contains_op(|op| *op == DfOp::Activation(ActivationKind::Tanh)));
        if uses_tanh {
            let lut = lut.ok_or_else(|| SimError::LutMismatch("model uses tanh but no table was given".into()))?;
            if lut.kind() != ActivationKind::Tanh {
                return Err(SimError::LutMismatch(format!("table computes {}, model needs tanh", lut.kind().name())));
            }
            if lut.in_fmt() != fmts.state || lut.out_fmt() != fmts.state {
                return Err(SimError::LutMismatch(format!(
                    "table maps {} -> {}, datapath state format is {}",
                    lut.in_fmt(),
                    lut.out_fmt(),
                    fmts.state
                )));
            }
        }
        let steps = model.horizon + 1;
        let tables = model
            .params
            .iter()
            .map(|(name, t)| {
                let per_step = (0..steps)
                    .map(|k| {
                        t.at(k).map(|mx| mx.data().iter().map(|&v| quantize_param(v, t, fmts.weight)).collect())
                    })
                    .collect();
                (name.clone(), per_step)
            })
            .collect();
        let order = |g: &crate::model::DataflowGraph| {
            g.topo_order().map_err(|n| SimError::InvalidModel(format!("cycle at node {n}")))
        };
        Ok(Self {
            model,
            fmts,
            lut: if uses_tanh { lut } else { None },
            tables,
            update_order: order(&model.update_graph)?,
            output_order: order(&model.output_graph)?,
        })
    }

    pub fn formats(&self) -> &ResolvedFormats {
        &self.fmts
    }

    pub fn model(&self) -> &StateSpaceModel {
        self.model
    }

    pub fn lut(&self) -> Option<&LutRom> {
        self.lut
    }

    /// Quantized table at step `k` in the weight format (`None` = zero).
    pub fn table(&self, name: &str, k: usize) -> Option<&[i128]> {
        self.tables.get(name)?.get(k)?.as_deref()
    }

    /// Input vector as carried in the datapath (input format, then state
    /// format).
    pub fn load_input(&self, u: &[f64]) -> Vec<i128> {
        u.iter()
            .map(|&v| {
                let raw = quantize_raw(v, self.fmts.input);
                requantize_raw(raw, self.fmts.input.frac_length(), self.fmts.state).raw()
            })
            .collect()
    }

    fn activate(&self, kind: ActivationKind, v: &Vals) -> Vals {
        let state = self.fmts.state;
        let x = v.to(state);
        let raw = match kind {
            ActivationKind::Identity => x,
            ActivationKind::Tanh => {
                let lut = self.lut.expect("checked at construction");
                x.iter().map(|&r| lut_eval_raw(lut, r).raw()).collect()
            }
        };
        Vals { fmt: state, raw }
    }

    fn eval_graph(
        &self,
        graph: &crate::model::DataflowGraph,
        order: &[usize],
        x: &[i128],
        u: &[i128],
        k: usize,
        delays: &mut [Option<Vals>],
    ) -> Vals {
        let f = &self.fmts;
        let acc = f.accumulator;
        let mut vals: Vec<Option<Vals>> = vec![None; graph.nodes.len()];
        for &id in order {
            let node = &graph.nodes[id];
            let arg = |i: usize| vals[node.inputs[i]].as_ref().expect("topological order");
            let v = match &node.op {
                DfOp::Input => Vals { fmt: f.state, raw: u.to_vec() },
                DfOp::StateIn => Vals { fmt: f.state, raw: x.to_vec() },
                DfOp::Const(c) => Vals { fmt: f.weight, raw: c.iter().map(|&v| quantize_raw(v, f.weight)).collect() },
                DfOp::Param(t) => {
                    let rows = self.model.params[t].rows;
                    let raw = self.table(t, k).map_or_else(|| vec![0; rows], <[i128]>::to_vec);
                    Vals { fmt: f.weight, raw }
                }
                DfOp::MatVec(t) => {
                    let p = &self.model.params[t];
                    let operand = arg(0).to(f.state);
                    let raw = match self.table(t, k) {
                        None => vec![0; p.rows],
                        Some(w) => (0..p.rows)
                            .map(|r| {
                                w[r * p.cols..(r + 1) * p.cols].iter().zip(&operand).fold(0i128, |s, (a, b)| {
                                    acc.saturate(s.saturating_add(acc.saturate(a.saturating_mul(*b))))
                                })
                            })
                            .collect(),
                    };
                    Vals { fmt: acc, raw }
                }
                DfOp::VecAdd => {
                    let (a, b) = (arg(0).to(acc), arg(1).to(acc));
                    Vals { fmt: acc, raw: a.iter().zip(&b).map(|(p, q)| acc.saturate(p.saturating_add(*q))).collect() }
                }
                DfOp::ScalarAdd => {
                    let (a, s) = (arg(0).to(acc), arg(1).to(acc)[0]);
                    Vals { fmt: acc, raw: a.iter().map(|p| acc.saturate(p.saturating_add(s))).collect() }
                }
                DfOp::ScalarMul => {
                    let (a, s) = (arg(0).to(f.state), arg(1).to(f.weight)[0]);
                    Vals { fmt: acc, raw: a.iter().map(|p| acc.saturate(p.saturating_mul(s))).collect() }
                }
                DfOp::Activation(kind) => self.activate(*kind, arg(0)),
                DfOp::Delay => delays[id].clone().unwrap_or_else(|| {
                    // first step: zeros shaped like the operand
                    let dims = self.model.node_dims(graph);
                    Vals { fmt: f.state, raw: vec![0; dims[id].unwrap_or(0)] }
                }),
            };
            vals[id] = Some(v);
        }
        for (id, node) in graph.nodes.iter().enumerate() {
            if node.op == DfOp::Delay {
                delays[id] = vals[node.inputs[0]].clone();
            }
        }
        vals[graph.output].take().expect("output evaluated")
    }

    /// Raw states `x[0] … x[N]` in the state format.
    pub fn trajectory(&self, u: &[f64]) -> Result<Vec<Vec<i128>>, SimError> {
        if u.len() != self.model.input_dim {
            return Err(SimError::InputDimension { expected: self.model.input_dim, found: u.len() });
        }
        let uq = self.load_input(u);
        let mut x: Vec<i128> = self.model.initial_state.iter().map(|&v| quantize_raw(v, self.fmts.state)).collect();
        let g = &self.model.update_graph;
        let mut delays = vec![None; g.nodes.len()];
        let mut traj = vec![x.clone()];
        for k in 0..self.model.horizon {
            let next = self.eval_graph(g, &self.update_order, &x, &uq, k, &mut delays);
            x = next.to(self.fmts.state);
            traj.push(x.clone());
        }
        Ok(traj)
    }

    /// Raw outputs in the output format.
    pub fn run_raw(&self, u: &[f64]) -> Result<Vec<i128>, SimError> {
        let traj = self.trajectory(u)?;
        let uq = self.load_input(u);
        let g = &self.model.output_graph;
        let mut delays = vec![None; g.nodes.len()];
        let y = self.eval_graph(g, &self.output_order, &traj[self.model.horizon], &uq, self.model.horizon, &mut delays);
        Ok(y.to(self.fmts.output))
    }

    pub fn run(&self, u: &[f64]) -> Result<Vec<FpValue>, SimError> {
        let out = self.fmts.output;
        Ok(self.run_raw(u)?.into_iter().map(|r| FpValue::from_raw(r, out)).collect())
    }
}

/// One-shot fixed-point simulation of a single input vector.
pub fn simulate_fixed(
    m: &StateSpaceModel,
    u: &[f64],
    fmts: &FormatAssignment,
    lut: Option<&LutRom>,
) -> Result<Vec<FpValue>, SimError> {
    FixedProgram::new(m, fmts, lut)?.run(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use crate::nn::{build_state_space, random_inputs, random_nn};
    use crate::sim::lut::{gen_activation_lut, gen_activation_lut_with, Interpolation, LutConfig, DEFAULT_RANGE};
    use crate::sim::reference::simulate_reference;

    fn q(w: u32, n: u32) -> FixedPointFormat {
        FixedPointFormat::new(w, n).unwrap()
    }

    fn tanh_lut(f: FixedPointFormat) -> LutRom {
        gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap()
    }

    #[test]
    fn zero_network_is_all_zero() {
        let mut nn = random_nn(3, 4, 4, 2, 1);
        nn.input_weights = Matrix::zeros(3, 4);
        nn.hidden_weights.iter_mut().for_each(|w| *w = Matrix::zeros(4, 4));
        nn.biases.iter_mut().for_each(|b| b.fill(0.0));
        let m = build_state_space(&nn).unwrap();
        let f = q(16, 12);
        let lut = tanh_lut(f);
        let y = simulate_fixed(&m, &[0.5, -0.25, 1.0], &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        assert!(y.iter().all(|v| v.raw() == 0));
    }

    #[test]
    fn wide_formats_converge_to_reference() {
        let f = q(64, 60);
        let cfg = LutConfig { interpolation: Interpolation::Auto, ..LutConfig::default() };
        let lut = gen_activation_lut_with(ActivationKind::Tanh, f, f, &cfg).unwrap();
        let nn = random_nn(3, 4, 4, 2, 3);
        let m = build_state_space(&nn).unwrap();
        let prog = FixedProgram::new(&m, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        for u in random_inputs(3, 200, 8) {
            let y = prog.run(&u).unwrap();
            let r = simulate_reference(&m, &u).unwrap();
            for (a, b) in y.iter().zip(&r) {
                assert!((a.to_f64() - b).abs() <= 1e-6 * b.abs().max(1e-3), "{} vs {b}", a.to_f64());
            }
        }
    }

    #[test]
    fn eight_bit_differs_from_reference() {
        let f = q(8, 4);
        let lut = tanh_lut(f);
        let nn = random_nn(3, 4, 4, 2, 3);
        let m = build_state_space(&nn).unwrap();
        let prog = FixedProgram::new(&m, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        let differs = random_inputs(3, 20, 1).iter().any(|u| {
            let y = prog.run(u).unwrap();
            let r = simulate_reference(&m, u).unwrap();
            y.iter().zip(&r).any(|(a, b)| a.to_f64() != *b)
        });
        assert!(differs);
    }

    #[test]
    fn deterministic_bit_for_bit() {
        let f = q(16, 12);
        let lut = tanh_lut(f);
        let m = build_state_space(&random_nn(3, 4, 4, 2, 9)).unwrap();
        let u = [0.1, -0.7, 0.33];
        let a = simulate_fixed(&m, &u, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        let b = simulate_fixed(&m, &u, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_format_and_lut_mismatch() {
        let m = build_state_space(&random_nn(3, 2, 4, 2, 9)).unwrap();
        let f = q(16, 12);
        let mut fa = FormatAssignment::uniform(f);
        fa.weight = None;
        let lut = tanh_lut(f);
        assert!(matches!(simulate_fixed(&m, &[0.0; 3], &fa, Some(&lut)), Err(SimError::MissingFormat("weight"))));
        let other = tanh_lut(q(12, 8));
        assert!(matches!(
            simulate_fixed(&m, &[0.0; 3], &FormatAssignment::uniform(f), Some(&other)),
            Err(SimError::LutMismatch(_))
        ));
        assert!(matches!(
            simulate_fixed(&m, &[0.0; 3], &FormatAssignment::uniform(f), None),
            Err(SimError::LutMismatch(_))
        ));
    }

    #[test]
    fn derived_accumulator_has_guard_bits() {
        let m = build_state_space(&random_nn(3, 2, 4, 2, 9)).unwrap();
        let r = FormatAssignment::uniform(q(8, 4)).resolve(&m).unwrap();
        // 16-bit products plus ceil(log2(4 + 1)) = 3 guard bits
        assert_eq!(r.accumulator, q(19, 8));
    }

    #[test]
    fn identity_network_with_exact_weights_is_exact() {
        let mut nn = random_nn(2, 3, 2, 1, 0);
        nn.activation = ActivationKind::Identity;
        nn.input_weights = Matrix::from_rows(&[vec![0.5, -0.25], vec![0.125, 1.0]]).unwrap();
        nn.hidden_weights = vec![Matrix::identity(2), Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.5]]).unwrap()];
        nn.biases = vec![vec![0.25, 0.0], vec![0.0, -0.125], vec![0.5, 0.5]];
        nn.output_weights = Matrix::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let m = build_state_space(&nn).unwrap();
        let u = [0.75, -0.5];
        let y = simulate_fixed(&m, &u, &FormatAssignment::uniform(q(16, 10)), None).unwrap();
        assert_eq!(y[0].to_f64(), simulate_reference(&m, &u).unwrap()[0]);
    }

    #[test]
    fn grid_override_snaps_weights() {
        let mut nn = random_nn(1, 1, 1, 1, 0);
        nn.activation = ActivationKind::Identity;
        nn.input_weights = Matrix::from_vec(1, 1, vec![0.3]);
        nn.biases = vec![vec![0.0]];
        nn.output_weights = Matrix::from_vec(1, 1, vec![1.0]);
        nn.formats.insert("beta".into(), q(4, 2));
        let m = build_state_space(&nn).unwrap();
        let y = simulate_fixed(&m, &[1.0], &FormatAssignment::uniform(q(16, 12)), None).unwrap();
        // 0.3 snaps to 0.25 on the 2-fraction-bit grid
        assert_eq!(y[0].to_f64(), 0.25);
    }
}
