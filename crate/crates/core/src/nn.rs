//! Multilayer perceptron front end.
//!
//! A network with N hidden layers of M nodes is rewritten as a state-space
//! model whose state is the activation vector of the current layer and whose
//! step index is the layer index:
//!
//! ```text
//! x[0]   = 0
//! x[1]   = f(βᵀ·u + b[0])
//! x[k+1] = f(W[k]·x[k] + b[k])     k = 1 … N-1
//! y      = g(C·x[N])
//! ```
//!
//! The input is injected through a table that is βᵀ at k = 0 and zero
//! afterwards, so one shared update graph covers every layer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::FixedPointFormat;
use crate::model::{ActivationKind, DataflowGraph, DfOp, Matrix, ParamTable, StateSpaceModel};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Parameter-table names used by NN-derived models.
pub mod tables {
    pub const HIDDEN: &str = "W";
    pub const INPUT: &str = "B";
    pub const BIAS: &str = "b";
    pub const OUTPUT: &str = "C";
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("weights file line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported weights file version {0}")]
    Version(u32),
    #[error("tensor {tensor}: expected {expected}, found {found}")]
    Dimension { tensor: String, expected: String, found: String },
    #[error("dimension {name} must be at least 1")]
    ZeroDim { name: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub nodes_per_layer: usize,
    pub output_dim: usize,
    pub activation: ActivationKind,
    pub output_activation: ActivationKind,
    /// L×M; `beta[j][i]` weights input j into node i of the first layer.
    pub input_weights: Matrix,
    /// N-1 matrices, M×M; `W[k][i][j]` weights node j of layer k into node i.
    pub hidden_weights: Vec<Matrix>,
    /// N vectors of length M.
    pub biases: Vec<Vec<f64>>,
    /// P×M.
    pub output_weights: Matrix,
    /// Optional per-tensor quantization grids, keyed `beta`, `W`, `b`, `C`.
    pub formats: BTreeMap<String, FixedPointFormat>,
}

impl NnSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        for (name, v) in [
            ("L", self.input_dim),
            ("N", self.hidden_layers),
            ("M", self.nodes_per_layer),
            ("P", self.output_dim),
        ] {
            if v == 0 {
                return Err(NnError::ZeroDim { name });
            }
        }
        let (l, n, m, p) = (self.input_dim, self.hidden_layers, self.nodes_per_layer, self.output_dim);
        check_shape("beta", &self.input_weights, l, m)?;
        if self.hidden_weights.len() != n - 1 {
            return Err(NnError::Dimension {
                tensor: "W".into(),
                expected: format!("{} matrices", n - 1),
                found: format!("{} matrices", self.hidden_weights.len()),
            });
        }
        for (i, w) in self.hidden_weights.iter().enumerate() {
            check_shape(&format!("W[{}]", i + 1), w, m, m)?;
        }
        if self.biases.len() != n {
            return Err(NnError::Dimension {
                tensor: "b".into(),
                expected: format!("{n} vectors"),
                found: format!("{} vectors", self.biases.len()),
            });
        }
        for (k, b) in self.biases.iter().enumerate() {
            if b.len() != m {
                return Err(NnError::Dimension {
                    tensor: format!("b[{k}]"),
                    expected: format!("length {m}"),
                    found: format!("length {}", b.len()),
                });
            }
        }
        check_shape("C", &self.output_weights, p, m)?;
        Ok(())
    }

    /// Plain layer-by-layer forward pass in double precision.
    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        let m = self.nodes_per_layer;
        let act = self.activation;
        let mut h: Vec<f64> = (0..m)
            .map(|i| {
                let s: f64 = (0..self.input_dim).map(|j| self.input_weights.get(j, i) * u[j]).sum();
                act.eval(s + self.biases[0][i])
            })
            .collect();
        for (k, w) in self.hidden_weights.iter().enumerate() {
            h = (0..m)
                .map(|i| {
                    let s: f64 = (0..m).map(|j| w.get(i, j) * h[j]).sum();
                    act.eval(s + self.biases[k + 1][i])
                })
                .collect();
        }
        (0..self.output_dim)
            .map(|r| {
                let s: f64 = (0..m).map(|i| self.output_weights.get(r, i) * h[i]).sum();
                self.output_activation.eval(s)
            })
            .collect()
    }
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<(), NnError> {
    if m.rows() != rows || m.cols() != cols {
        return Err(NnError::Dimension {
            tensor: name.into(),
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    Ok(())
}

/// Rewrites the network as a state-space model (horizon N, state dim M).
pub fn build_state_space(nn: &NnSpec) -> Result<StateSpaceModel, NnError> {
    nn.validate()?;
    let (l, n, m) = (nn.input_dim, nn.hidden_layers, nn.nodes_per_layer);

    let mut hidden = vec![None];
    hidden.extend(nn.hidden_weights.iter().cloned().map(Some));
    let mut input = vec![Some(nn.input_weights.transpose())];
    input.resize(n, None);
    let bias = nn.biases.iter().map(|b| Some(Matrix::from_vec(m, 1, b.clone()))).collect();

    let mut params = BTreeMap::new();
    let with_fmt = |mut t: ParamTable, key: &str| {
        t.format = nn.formats.get(key).copied();
        t
    };
    params.insert(tables::HIDDEN.to_string(), with_fmt(ParamTable::per_step(m, m, hidden), "W"));
    params.insert(tables::INPUT.to_string(), with_fmt(ParamTable::per_step(m, l, input), "beta"));
    params.insert(tables::BIAS.to_string(), with_fmt(ParamTable::per_step(m, 1, bias), "b"));
    params.insert(
        tables::OUTPUT.to_string(),
        with_fmt(ParamTable::constant(nn.output_weights.clone()), "C"),
    );

    let mut upd = DataflowGraph::new();
    let x = upd.add(DfOp::StateIn, &[]);
    let u = upd.add(DfOp::Input, &[]);
    let wx = upd.add(DfOp::MatVec(tables::HIDDEN.into()), &[x]);
    let bu = upd.add(DfOp::MatVec(tables::INPUT.into()), &[u]);
    let sum = upd.add(DfOp::VecAdd, &[wx, bu]);
    let b = upd.add(DfOp::Param(tables::BIAS.into()), &[]);
    let pre = upd.add(DfOp::VecAdd, &[sum, b]);
    let act = upd.add(DfOp::Activation(nn.activation), &[pre]);
    upd.set_output(act);

    let mut outg = DataflowGraph::new();
    let x = outg.add(DfOp::StateIn, &[]);
    let mut y = outg.add(DfOp::MatVec(tables::OUTPUT.into()), &[x]);
    if nn.output_activation != ActivationKind::Identity {
        y = outg.add(DfOp::Activation(nn.output_activation), &[y]);
    }
    outg.set_output(y);

    Ok(StateSpaceModel {
        name: format!("mlp_l{}_n{}_m{}_p{}", l, n, m, nn.output_dim),
        state_dim: m,
        input_dim: l,
        output_dim: nn.output_dim,
        horizon: n,
        initial_state: vec![0.0; m],
        update_graph: upd,
        output_graph: outg,
        params,
    })
}

/// JSON weights document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub version: u32,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub activation: ActivationKind,
    #[serde(default = "identity", skip_serializing_if = "is_identity")]
    pub output_activation: ActivationKind,
    pub beta: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub formats: BTreeMap<String, FixedPointFormat>,
}

fn identity() -> ActivationKind {
    ActivationKind::Identity
}

fn is_identity(a: &ActivationKind) -> bool {
    *a == ActivationKind::Identity
}

fn matrix(name: &str, rows: &[Vec<f64>], want_rows: usize, want_cols: usize) -> Result<Matrix, NnError> {
    let mx = Matrix::from_rows(rows).ok_or_else(|| NnError::Dimension {
        tensor: name.into(),
        expected: format!("{want_rows}x{want_cols}"),
        found: "ragged rows".into(),
    })?;
    // an empty row list has no column count of its own
    if rows.is_empty() {
        return Err(NnError::Dimension {
            tensor: name.into(),
            expected: format!("{want_rows}x{want_cols}"),
            found: "0 rows".into(),
        });
    }
    check_shape(name, &mx, want_rows, want_cols)?;
    Ok(mx)
}

impl WeightsFile {
    pub fn to_spec(&self) -> Result<NnSpec, NnError> {
        if self.version != WEIGHTS_FORMAT_VERSION {
            return Err(NnError::Version(self.version));
        }
        for (name, v) in [("L", self.l), ("N", self.n), ("M", self.m), ("P", self.p)] {
            if v == 0 {
                return Err(NnError::ZeroDim { name });
            }
        }
        let beta = matrix("beta", &self.beta, self.l, self.m)?;
        if self.w.len() != self.n - 1 {
            return Err(NnError::Dimension {
                tensor: "W".into(),
                expected: format!("{} matrices", self.n - 1),
                found: format!("{} matrices", self.w.len()),
            });
        }
        let hidden = self
            .w
            .iter()
            .enumerate()
            .map(|(i, w)| matrix(&format!("W[{}]", i + 1), w, self.m, self.m))
            .collect::<Result<Vec<_>, _>>()?;
        let c = matrix("C", &self.c, self.p, self.m)?;
        let spec = NnSpec {
            input_dim: self.l,
            hidden_layers: self.n,
            nodes_per_layer: self.m,
            output_dim: self.p,
            activation: self.activation,
            output_activation: self.output_activation,
            input_weights: beta,
            hidden_weights: hidden,
            biases: self.b.clone(),
            output_weights: c,
            formats: self.formats.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_spec(nn: &NnSpec) -> Self {
        WeightsFile {
            version: WEIGHTS_FORMAT_VERSION,
            l: nn.input_dim,
            n: nn.hidden_layers,
            m: nn.nodes_per_layer,
            p: nn.output_dim,
            activation: nn.activation,
            output_activation: nn.output_activation,
            beta: nn.input_weights.to_rows(),
            w: nn.hidden_weights.iter().map(Matrix::to_rows).collect(),
            b: nn.biases.clone(),
            c: nn.output_weights.to_rows(),
            formats: nn.formats.clone(),
        }
    }
}

/// Parses a weights document. Syntax errors carry line and column.
pub fn load_weights(text: &str) -> Result<NnSpec, NnError> {
    let doc: WeightsFile = serde_json::from_str(text).map_err(|e| NnError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.to_spec()
}

pub fn save_weights(nn: &NnSpec) -> String {
    let mut s = serde_json::to_string_pretty(&WeightsFile::from_spec(nn)).expect("weights serialize");
    s.push('\n');
    s
}

/// Network with every weight and bias uniform in [-1, 1], deterministic in
/// `seed`.
pub fn random_nn(l: usize, n: usize, m: usize, p: usize, seed: u64) -> NnSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    };
    let beta = mat(l, m);
    let hidden = (1..n).map(|_| mat(m, m)).collect();
    let biases = (0..n).map(|_| mat(m, 1).data().to_vec()).collect();
    let c = mat(p, m);
    NnSpec {
        input_dim: l,
        hidden_layers: n,
        nodes_per_layer: m,
        output_dim: p,
        activation: ActivationKind::Tanh,
        output_activation: ActivationKind::Identity,
        input_weights: beta,
        hidden_weights: hidden,
        biases,
        output_weights: c,
        formats: BTreeMap::new(),
    }
}

/// Uniform [-1, 1] input vectors, deterministic in `seed`.
pub fn random_inputs(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;

    #[test]
    fn fig5_shape_builds() {
        let nn = random_nn(3, 4, 4, 2, 1);
        let m = build_state_space(&nn).unwrap();
        assert_eq!((m.state_dim, m.horizon, m.output_dim, m.input_dim), (4, 4, 2, 3));
        assert!(validate_model(&m).is_empty(), "{:?}", validate_model(&m));
        assert_eq!(m.initial_state, vec![0.0; 4]);
    }

    #[test]
    fn single_layer_network_builds() {
        let nn = random_nn(2, 1, 3, 1, 9);
        let m = build_state_space(&nn).unwrap();
        assert!(validate_model(&m).is_empty());
        assert!(m.param(tables::HIDDEN).unwrap().is_zero_at(0));
    }

    #[test]
    fn random_is_deterministic_and_seed_sensitive() {
        assert_eq!(random_nn(3, 4, 4, 2, 5), random_nn(3, 4, 4, 2, 5));
        assert_ne!(random_nn(3, 4, 4, 2, 5).input_weights, random_nn(3, 4, 4, 2, 6).input_weights);
        let nn = random_nn(3, 4, 4, 2, 5);
        let all = nn
            .input_weights
            .data()
            .iter()
            .chain(nn.hidden_weights.iter().flat_map(|w| w.data()))
            .chain(nn.biases.iter().flatten())
            .chain(nn.output_weights.data());
        assert!(all.into_iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn weights_round_trip() {
        let nn = random_nn(3, 4, 4, 2, 11);
        let text = save_weights(&nn);
        let back = load_weights(&text).unwrap();
        assert_eq!(back, nn);
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        assert_eq!(strip(&save_weights(&back)), strip(&text));
        assert_eq!((back.input_dim, back.hidden_layers, back.nodes_per_layer, back.output_dim), (3, 4, 4, 2));
    }

    #[test]
    fn misshapen_hidden_matrix_is_named() {
        let nn = random_nn(3, 4, 4, 2, 11);
        let mut doc = WeightsFile::from_spec(&nn);
        doc.w[0].pop();
        let err = load_weights(&serde_json::to_string(&doc).unwrap()).unwrap_err();
        match err {
            NnError::Dimension { tensor, .. } => assert_eq!(tensor, "W[1]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn syntax_error_is_positional() {
        let err = load_weights("{\n  \"version\": 1,\n  \"L\": oops\n}").unwrap_err();
        match err {
            NnError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bias_length_mismatch_is_named() {
        let mut nn = random_nn(3, 2, 4, 2, 1);
        nn.biases[1].pop();
        match build_state_space(&nn).unwrap_err() {
            NnError::Dimension { tensor, .. } => assert_eq!(tensor, "b[1]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn forward_of_zero_network_is_zero() {
        let mut nn = random_nn(3, 4, 4, 2, 1);
        nn.input_weights = Matrix::zeros(3, 4);
        nn.hidden_weights.iter_mut().for_each(|w| *w = Matrix::zeros(4, 4));
        nn.biases.iter_mut().for_each(|b| b.fill(0.0));
        assert_eq!(nn.forward(&[0.3, -0.9, 1.0]), vec![0.0, 0.0]);
    }
}
