//! Cycle-accurate two-state simulation of a [`Netlist`].

use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::elaborate::latency;
use crate::fixed::quantize_raw;
use crate::model::StateSpaceModel;
use crate::netlist::{eval_node, Netlist, NetlistError, NodeIdx, NodeKind};
use crate::sim::fixed::{FixedProgram, FormatAssignment};
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum RtlError {
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error("evaluation order is not a topological order of the register-free wires")]
    BadOrder,
    #[error("stimulus needs {needed} cycles, limit is {max_cycles}")]
    Timeout { needed: usize, max_cycles: usize },
    #[error("unknown port {0}")]
    UnknownPort(String),
    #[error("stimulus row has {found} values for {expected} ports")]
    StimulusWidth { expected: usize, found: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy)]
enum Src {
    Node(NodeIdx),
    /// Index into the register chain table.
    Chain(usize),
}

#[derive(Clone, Copy)]
struct Chain {
    src: NodeIdx,
    offset: usize,
    len: usize,
}

/// Register contents, node values and the cycle counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimState {
    pub cycle: u64,
    regs: Vec<i128>,
    heads: Vec<usize>,
}

pub struct RtlSim<'a> {
    n: &'a Netlist,
    order: Vec<NodeIdx>,
    srcs: Vec<Vec<Src>>,
    chains: Vec<Chain>,
    init: Vec<i128>,
    inputs: Vec<NodeIdx>,
    outputs: Vec<NodeIdx>,
    values: Vec<i128>,
    args: Vec<i128>,
    state: SimState,
}

impl<'a> RtlSim<'a> {
    pub fn new(n: &'a Netlist) -> Result<Self, RtlError> {
        let order = n.topo_order()?;
        Self::with_order(n, order)
    }

    /// Simulation under a caller-chosen evaluation order, which must be
    /// topological over register-free wires.
    pub fn with_order(n: &'a Netlist, order: Vec<NodeIdx>) -> Result<Self, RtlError> {
        let mut pos = vec![usize::MAX; n.nodes.len()];
        for (k, &i) in order.iter().enumerate() {
            if i >= n.nodes.len() || pos[i] != usize::MAX {
                return Err(RtlError::BadOrder);
            }
            pos[i] = k;
        }
        if pos.contains(&usize::MAX) {
            return Err(RtlError::BadOrder);
        }
        let mut chains = Vec::new();
        let mut init = Vec::new();
        let mut srcs = Vec::with_capacity(n.nodes.len());
        for (d, node) in n.nodes.iter().enumerate() {
            let mut row = Vec::with_capacity(node.inputs.len());
            for w in &node.inputs {
                if w.regs.is_empty() {
                    if pos[w.src] >= pos[d] {
                        return Err(RtlError::BadOrder);
                    }
                    row.push(Src::Node(w.src));
                } else {
                    // head starts at the register feeding the consumer
                    chains.push(Chain { src: w.src, offset: init.len(), len: w.regs.len() });
                    init.extend(w.regs.iter().rev());
                    row.push(Src::Chain(chains.len() - 1));
                }
            }
            srcs.push(row);
        }
        let heads = vec![0; chains.len()];
        Ok(Self {
            n,
            order,
            srcs,
            chains,
            state: SimState { cycle: 0, regs: init.clone(), heads },
            init,
            inputs: n.inputs(),
            outputs: n.outputs(),
            values: vec![0; n.nodes.len()],
            args: Vec::with_capacity(8),
        })
    }

    pub fn input_ports(&self) -> Vec<String> {
        self.inputs.iter().map(|&i| self.n.port_name(i).unwrap_or_default().to_string()).collect()
    }

    pub fn output_ports(&self) -> Vec<String> {
        self.outputs.iter().map(|&i| self.n.port_name(i).unwrap_or_default().to_string()).collect()
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn set_state(&mut self, s: SimState) {
        self.state = s;
    }

    /// Every register back to its reset value.
    pub fn reset(&mut self) {
        self.state.regs.copy_from_slice(&self.init);
        self.state.heads.fill(0);
        self.state.cycle = 0;
    }

    fn read(&self, s: Src) -> i128 {
        match s {
            Src::Node(i) => self.values[i],
            Src::Chain(c) => {
                let ch = self.chains[c];
                self.state.regs[ch.offset + self.state.heads[c]]
            }
        }
    }

    /// Evaluates one cycle with `inputs` (one value per input port, in
    /// [`RtlSim::input_ports`] order), returns the output ports sampled
    /// before the clock edge, then clocks every register. With `reset`
    /// the registers load their reset values instead.
    pub fn step(&mut self, inputs: &[i128], reset: bool) -> Vec<i128> {
        assert_eq!(inputs.len(), self.inputs.len(), "one value per input port");
        for (k, &i) in self.inputs.iter().enumerate() {
            self.values[i] = inputs[k];
        }
        for idx in 0..self.order.len() {
            let i = self.order[idx];
            if matches!(self.n.nodes[i].kind, NodeKind::Input { .. }) {
                continue;
            }
            let mut args = std::mem::take(&mut self.args);
            args.clear();
            args.extend(self.srcs[i].iter().map(|&s| self.read(s)));
            self.values[i] = eval_node(&self.n.nodes, i, &args);
            self.args = args;
        }
        let out = self.outputs.iter().map(|&i| self.values[i]).collect();
        if reset {
            self.reset();
        } else {
            for (c, ch) in self.chains.iter().enumerate() {
                let h = self.state.heads[c];
                self.state.regs[ch.offset + h] = self.values[ch.src];
                self.state.heads[c] = if h + 1 == ch.len { 0 } else { h + 1 };
            }
        }
        self.state.cycle += 1;
        out
    }
}

/// Input values per cycle, columns in port order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stimulus {
    pub ports: Vec<String>,
    pub cycles: Vec<Vec<i128>>,
}

/// Output values per cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub ports: Vec<String>,
    pub cycles: Vec<Vec<i128>>,
}

impl Trace {
    pub fn column(&self, port: &str) -> Option<Vec<i128>> {
        let k = self.ports.iter().position(|p| p == port)?;
        Some(self.cycles.iter().map(|r| r[k]).collect())
    }

    /// `cycle,port,raw`, one line per port per cycle.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,port,raw\n");
        for (c, row) in self.cycles.iter().enumerate() {
            for (p, v) in self.ports.iter().zip(row) {
                let _ = writeln!(s, "{c},{p},{v}");
            }
        }
        s
    }
}

/// Runs `stimulus` (padded with zero inputs) for `max_cycles` cycles.
pub fn run(n: &Netlist, stimulus: &Stimulus, max_cycles: usize) -> Result<Trace, RtlError> {
    if stimulus.cycles.len() > max_cycles {
        return Err(RtlError::Timeout { needed: stimulus.cycles.len(), max_cycles });
    }
    let mut sim = RtlSim::new(n)?;
    let ports = sim.input_ports();
    let map: Vec<usize> = stimulus
        .ports
        .iter()
        .map(|p| ports.iter().position(|q| q == p).ok_or_else(|| RtlError::UnknownPort(p.clone())))
        .collect::<Result<_, _>>()?;
    let mut row = vec![0; ports.len()];
    let mut cycles = Vec::with_capacity(max_cycles);
    for c in 0..max_cycles {
        row.fill(0);
        if let Some(vals) = stimulus.cycles.get(c) {
            if vals.len() != map.len() {
                return Err(RtlError::StimulusWidth { expected: map.len(), found: vals.len() });
            }
            for (&k, &v) in map.iter().zip(vals) {
                row[k] = v;
            }
        }
        cycles.push(sim.step(&row, false));
    }
    Ok(Trace { ports: sim.output_ports(), cycles })
}

/// Cycle on which sample `i` is presented: samples go round-robin to the
/// `slow` interleaved streams, each stream paced by `clock_ratio`.
pub fn feed_cycle(n: &Netlist, i: usize) -> usize {
    let c = n.meta.slow;
    (i / c) * n.meta.clock_ratio * c + i % c
}

/// Stimulus presenting each sample with data_valid_in for one cycle.
pub fn sample_stimulus(n: &Netlist, samples: &[Vec<f64>]) -> Stimulus {
    let l = n.meta.input_dim;
    let mut ports = vec!["data_valid_in".to_string()];
    ports.extend((0..l).map(|j| format!("u{j}")));
    let len = samples.len().checked_sub(1).map_or(0, |last| feed_cycle(n, last) + 1);
    let mut cycles = vec![vec![0; l + 1]; len];
    for (i, u) in samples.iter().enumerate() {
        let row = &mut cycles[feed_cycle(n, i)];
        row[0] = 1;
        for (j, &v) in u.iter().enumerate() {
            row[1 + j] = quantize_raw(v, n.meta.formats.input);
        }
    }
    Stimulus { ports, cycles }
}

/// Cycles needed to drain every sample of a stimulus.
pub fn cycles_for(n: &Netlist, samples: usize) -> usize {
    samples.checked_sub(1).map_or(0, |last| feed_cycle(n, last)) + latency(n) + n.meta.slow + 1
}

/// Output vectors at each data_valid_out pulse, grouped per stream in
/// arrival order and re-merged into sample order, with the pulse cycle.
pub fn collect_outputs(n: &Netlist, trace: &Trace) -> Vec<(usize, Vec<i128>)> {
    let dv = trace.ports.iter().position(|p| p == "data_valid_out").expect("netlist has data_valid_out");
    let ys: Vec<usize> = (0..n.meta.output_dim)
        .map(|r| trace.ports.iter().position(|p| *p == format!("y{r}")).expect("output port"))
        .collect();
    let c = n.meta.slow;
    let mut per_stream: Vec<Vec<(usize, Vec<i128>)>> = vec![Vec::new(); c];
    for (cycle, row) in trace.cycles.iter().enumerate() {
        if row[dv] != 0 {
            per_stream[cycle % c].push((cycle, ys.iter().map(|&k| row[k]).collect()));
        }
    }
    let total: usize = per_stream.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut cursors = vec![0; c];
    for i in 0..total {
        let s = i % c;
        match per_stream[s].get(cursors[s]) {
            Some(v) => out.push(v.clone()),
            None => break,
        }
        cursors[s] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateReport {
    Equivalent { samples: usize },
    Diverged { sample: usize, output: usize, cycle: usize, expected: i128, got: i128 },
    /// The hardware produced fewer output pulses than samples.
    Missing { sample: usize, produced: usize },
}

impl GateReport {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, GateReport::Equivalent { .. })
    }
}

impl fmt::Display for GateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateReport::Equivalent { samples } => write!(f, "equivalent ({samples} samples)"),
            GateReport::Diverged { sample, output, cycle, expected, got } => write!(
                f,
                "diverged at sample {sample}, output {output}, cycle {cycle}: expected raw {expected}, got {got}"
            ),
            GateReport::Missing { sample, produced } => {
                write!(f, "no output for sample {sample}: only {produced} data_valid_out pulses")
            }
        }
    }
}

fn assignment(n: &Netlist) -> FormatAssignment {
    let f = n.meta.formats;
    FormatAssignment {
        input: Some(f.input),
        weight: Some(f.weight),
        state: Some(f.state),
        output: Some(f.output),
        accumulator: Some(f.accumulator),
    }
}

/// Raw fixed-point outputs of the functional model for each sample, in the
/// formats the netlist was elaborated with.
pub fn functional_outputs(m: &StateSpaceModel, n: &Netlist, samples: &[Vec<f64>]) -> Result<Vec<Vec<i128>>, RtlError> {
    let prog = FixedProgram::new(m, &assignment(n), n.meta.lut.as_deref())?;
    Ok(samples.par_iter().map(|u| prog.run_raw(u)).collect::<Result<_, _>>()?)
}

/// Runs `samples` through the netlist and compares every output raw value
/// with the bit-accurate functional model.
pub fn compare_with_functional(m: &StateSpaceModel, n: &Netlist, samples: &[Vec<f64>]) -> Result<GateReport, RtlError> {
    let expected = functional_outputs(m, n, samples)?;
    let stim = sample_stimulus(n, samples);
    let trace = run(n, &stim, cycles_for(n, samples.len()))?;
    let got = collect_outputs(n, &trace);
    for (i, want) in expected.iter().enumerate() {
        let Some((cycle, y)) = got.get(i) else {
            return Ok(GateReport::Missing { sample: i, produced: got.len() });
        };
        if let Some(r) = (0..want.len()).find(|&r| want[r] != y[r]) {
            return Ok(GateReport::Diverged { sample: i, output: r, cycle: *cycle, expected: want[r], got: y[r] });
        }
    }
    Ok(GateReport::Equivalent { samples: samples.len() })
}

/// Two's complement hex of `raw` in `width` bits.
pub fn hex_word(raw: i128, width: u32) -> String {
    let digits = width.div_ceil(4) as usize;
    let mask = if width >= 128 { u128::MAX } else { (1u128 << width) - 1 };
    format!("{:0digits$x}", (raw as u128) & mask)
}

/// Concatenation `{w[n-1], …, w[0]}` as one hex word.
pub fn hex_bus(words: &[i128], width: u32) -> String {
    let mut bits = String::new();
    for &w in words.iter().rev() {
        let mask = if width >= 128 { u128::MAX } else { (1u128 << width) - 1 };
        let v = (w as u128) & mask;
        for b in (0..width).rev() {
            bits.push(if (v >> b) & 1 == 1 { '1' } else { '0' });
        }
    }
    let pad = (4 - bits.len() % 4) % 4;
    let bits = "0".repeat(pad) + &bits;
    bits.as_bytes()
        .chunks(4)
        .map(|c| {
            let nib = c.iter().fold(0u32, |a, &b| a * 2 + u32::from(b == b'1'));
            char::from_digit(nib, 16).expect("nibble")
        })
        .collect()
}

/// Testbench stimulus: one `{u[L-1], …, u[0]}` word per sample.
pub fn stimulus_hex(n: &Netlist, samples: &[Vec<f64>]) -> String {
    let w = n.meta.formats.input.word_length();
    samples
        .iter()
        .map(|u| {
            let raw: Vec<i128> = u.iter().map(|&v| quantize_raw(v, n.meta.formats.input)).collect();
            hex_bus(&raw, w) + "\n"
        })
        .collect()
}

/// Testbench expectations: one `{y[P-1], …, y[0]}` word per sample.
pub fn expected_hex(n: &Netlist, outputs: &[Vec<i128>]) -> String {
    let w = n.meta.formats.output.word_length();
    outputs.iter().map(|y| hex_bus(y, w) + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::FixedPointFormat;
    use crate::netlist::tests::bare_meta;
    use crate::netlist::{Role, SigType, Wire};

    fn q8() -> SigType {
        SigType::Fixed(FixedPointFormat::new(8, 4).unwrap())
    }

    fn one_reg() -> Netlist {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q8(), vec![], Role::Port);
        n.add("y", NodeKind::Output { port: "y".into() }, q8(), vec![Wire::reg(a, 0)], Role::Port);
        n
    }

    #[test]
    fn register_delays_one_cycle() {
        let n = one_reg();
        let mut sim = RtlSim::new(&n).unwrap();
        assert_eq!(sim.step(&[5], false), vec![0]);
        assert_eq!(sim.step(&[7], false), vec![5]);
        assert_eq!(sim.step(&[0], true), vec![7]);
        // reset loaded the init value
        assert_eq!(sim.step(&[0], false), vec![0]);
    }

    #[test]
    fn chain_of_three_with_inits() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q8(), vec![], Role::Port);
        n.add("y", NodeKind::Output { port: "y".into() }, q8(), vec![Wire { src: a, regs: vec![1, 2, 3] }], Role::Port);
        let mut sim = RtlSim::new(&n).unwrap();
        let outs: Vec<i128> = (10..16).map(|v| sim.step(&[v], false)[0]).collect();
        assert_eq!(outs, vec![3, 2, 1, 10, 11, 12]);
    }

    #[test]
    fn empty_stimulus_gives_idle_trace() {
        let n = one_reg();
        let t = run(&n, &Stimulus { ports: vec!["a".into()], cycles: vec![] }, 4).unwrap();
        assert_eq!(t.cycles, vec![vec![0]; 4]);
        assert!(t.to_csv().starts_with("cycle,port,raw\n0,y,0\n"));
    }

    #[test]
    fn stimulus_longer_than_limit_times_out() {
        let n = one_reg();
        let s = Stimulus { ports: vec!["a".into()], cycles: vec![vec![1]; 5] };
        assert!(matches!(run(&n, &s, 3), Err(RtlError::Timeout { needed: 5, max_cycles: 3 })));
    }

    #[test]
    fn order_must_be_topological() {
        let mut n = Netlist::new(bare_meta());
        let a = n.add("a", NodeKind::Input { port: "a".into() }, q8(), vec![], Role::Port);
        n.add("y", NodeKind::Output { port: "y".into() }, q8(), vec![Wire::comb(a)], Role::Port);
        assert!(matches!(RtlSim::with_order(&n, vec![1, 0]), Err(RtlError::BadOrder)));
        assert!(RtlSim::with_order(&n, vec![0, 1]).is_ok());
    }

    #[test]
    fn hex_formatting() {
        assert_eq!(hex_word(-1, 8), "ff");
        assert_eq!(hex_word(5, 12), "005");
        assert_eq!(hex_bus(&[1, -1], 4), "f1");
        assert_eq!(hex_bus(&[1, 2, 3], 6), "03081");
    }

    fn fig5(p: usize, w: u32, seed: u64) -> (StateSpaceModel, Netlist) {
        use crate::elaborate::{elaborate, Schedule};
        use crate::model::ActivationKind;
        use crate::nn::{build_state_space, random_nn};
        use crate::sim::lut::{gen_activation_lut, DEFAULT_RANGE};
        let m = build_state_space(&random_nn(3, 4, 4, 2, seed)).unwrap();
        let f = FixedPointFormat::new(w, w - 4).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 10, DEFAULT_RANGE).unwrap();
        let lat = 2 + 4 * (4usize.div_ceil(p) + 2);
        let n = elaborate(&m, &Schedule { multipliers_per_node: p, clock_ratio: lat }, &FormatAssignment::uniform(f), Some(&lut))
            .unwrap();
        (m, n)
    }

    #[test]
    fn elaborated_network_matches_functional_model() {
        for (p, w) in [(4, 8), (2, 12), (1, 16), (3, 24)] {
            let (m, n) = fig5(p, w, 9);
            let samples = crate::nn::random_inputs(3, 60, 11);
            let rep = compare_with_functional(&m, &n, &samples).unwrap();
            assert_eq!(rep, GateReport::Equivalent { samples: 60 }, "p={p} w={w}");
        }
    }

    #[test]
    fn corrupted_rom_entry_is_located() {
        let (m, mut n) = fig5(4, 16, 2);
        let samples = crate::nn::random_inputs(3, 40, 3);
        let w = n.nodes.iter().position(|x| x.name == "node1_macc2_weight").unwrap();
        if let NodeKind::Rom { table } = &mut n.nodes[w].kind {
            let t = std::sync::Arc::make_mut(table);
            t[0] = t[0].wrapping_add(1000);
        }
        match compare_with_functional(&m, &n, &samples).unwrap() {
            GateReport::Diverged { sample, cycle, .. } => {
                assert_eq!(sample, 0);
                assert_eq!(cycle, 14);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn one_sample_arrives_after_latency() {
        let (_, n) = fig5(4, 12, 0);
        let stim = sample_stimulus(&n, &[vec![0.1, 0.2, 0.3]]);
        let t = run(&n, &stim, 40).unwrap();
        let dv = t.column("data_valid_out").unwrap();
        let pulses: Vec<usize> = (0..dv.len()).filter(|&c| dv[c] == 1).collect();
        assert_eq!(pulses, vec![14]);
    }

    #[test]
    fn evaluation_order_does_not_matter() {
        let (_, n) = fig5(2, 12, 4);
        let fwd = n.topo_order().unwrap();
        // a different valid order: Kahn's algorithm taking the highest ready index first
        let mut indeg = vec![0; n.nodes.len()];
        let mut succ = vec![Vec::new(); n.nodes.len()];
        for (d, node) in n.nodes.iter().enumerate() {
            for w in node.inputs.iter().filter(|w| w.regs.is_empty()) {
                indeg[d] += 1;
                succ[w.src].push(d);
            }
        }
        let mut ready: std::collections::BinaryHeap<usize> = (0..n.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut alt = Vec::new();
        while let Some(i) = ready.pop() {
            alt.push(i);
            for &d in &succ[i] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(d);
                }
            }
        }
        assert_ne!(fwd, alt);
        let mut a = RtlSim::with_order(&n, fwd).unwrap();
        let mut b = RtlSim::with_order(&n, alt).unwrap();
        let stim = sample_stimulus(&n, &crate::nn::random_inputs(3, 5, 1));
        for c in 0..cycles_for(&n, 5) {
            let row = stim.cycles.get(c).cloned().unwrap_or_else(|| vec![0; 4]);
            assert_eq!(a.step(&row, false), b.step(&row, false));
        }
        assert_eq!(a.state(), b.state());
    }
}
