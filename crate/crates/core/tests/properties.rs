use proptest::prelude::*;

use statesynth::elaborate::{elaborate, latency, Schedule};
use statesynth::fixed::FixedPointFormat;
use statesynth::model::ActivationKind;
use statesynth::netlist::{critical_path, DelayModel, Netlist, NodeKind, Role, SigType, Wire};
use statesynth::nn::{build_state_space, load_weights, random_inputs, random_nn, save_weights};
use statesynth::passes::{c_slow, io_path_register_counts, pipeline_output_multipliers, retime};
use statesynth::rtlsim::{compare_with_functional, RtlSim};
use statesynth::sim::fixed::FormatAssignment;
use statesynth::sim::lut::gen_activation_lut;

fn q() -> SigType {
    SigType::Fixed(FixedPointFormat::new(16, 8).unwrap())
}

fn meta_source() -> Netlist {
    let m = build_state_space(&random_nn(1, 1, 1, 1, 0)).unwrap();
    let f = FixedPointFormat::new(16, 8).unwrap();
    let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 6, (-4.0, 4.0)).unwrap();
    elaborate(&m, &Schedule { multipliers_per_node: 1, clock_ratio: 5 }, &FormatAssignment::uniform(f), Some(&lut))
        .unwrap()
}

/// (is_mul, operand a, regs a, operand b, regs b) per node; operands index
/// into the nodes built so far, inputs first.
type Shape = Vec<(bool, usize, usize, usize, usize)>;

fn build(shape: &Shape, out_regs: usize, src: &Netlist) -> Netlist {
    let mut n = Netlist::new(src.meta.clone());
    let mut pool = vec![
        n.add("a", NodeKind::Input { port: "a".into() }, q(), vec![], Role::Port),
        n.add("b", NodeKind::Input { port: "b".into() }, q(), vec![], Role::Port),
    ];
    for (i, &(mul, x, rx, y, ry)) in shape.iter().enumerate() {
        let kind = if mul { NodeKind::Mul } else { NodeKind::Add };
        let ins = vec![
            Wire { src: pool[x % pool.len()], regs: vec![0; rx] },
            Wire { src: pool[y % pool.len()], regs: vec![0; ry] },
        ];
        pool.push(n.add(format!("n{i}"), kind, q(), ins, Role::Datapath));
    }
    let last = *pool.last().unwrap();
    n.add("y", NodeKind::Output { port: "y".into() }, q(), vec![Wire { src: last, regs: vec![0; out_regs] }], Role::Port);
    n
}

fn outputs(n: &Netlist, ins: &[(i128, i128)]) -> Vec<i128> {
    let mut s = RtlSim::new(n).unwrap();
    ins.iter().map(|&(a, b)| s.step(&[a, b], false)[0]).collect()
}

fn shape() -> impl Strategy<Value = Shape> {
    prop::collection::vec((any::<bool>(), 0usize..16, 0usize..3, 0usize..16, 0usize..3), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retime_keeps_behaviour(s in shape(), out_regs in 0usize..3, ins in prop::collection::vec((-300i128..300, -300i128..300), 40)) {
        let src = meta_source();
        let n = build(&s, out_regs, &src);
        let dm = DelayModel::default();
        let r = retime(&n, &dm);
        prop_assert!(critical_path(&r, &dm).unwrap() <= critical_path(&n, &dm).unwrap());
        prop_assert_eq!(io_path_register_counts(&r), io_path_register_counts(&n));
        prop_assert_eq!(outputs(&r, &ins), outputs(&n, &ins));
    }

    #[test]
    fn c_slow_multiplies_every_edge(s in shape(), out_regs in 0usize..3, c in 1usize..4) {
        let src = meta_source();
        let n = build(&s, out_regs, &src);
        let cs = c_slow(&n, c);
        prop_assert_eq!(cs.register_count(), c * n.register_count());
        for (a, b) in n.nodes.iter().zip(&cs.nodes) {
            for (wa, wb) in a.inputs.iter().zip(&b.inputs) {
                prop_assert_eq!(wb.regs.len(), c * wa.regs.len());
            }
        }
    }

    #[test]
    fn weights_file_round_trips(l in 1usize..5, n in 1usize..4, m in 1usize..6, p in 1usize..4, seed in any::<u64>()) {
        let nn = random_nn(l, n, m, p, seed);
        let text = save_weights(&nn);
        let back = load_weights(&text).unwrap();
        prop_assert_eq!(&back, &nn);
        prop_assert_eq!(save_weights(&back), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn passes_keep_the_gate_and_latency(
        layers in 1usize..4,
        p in 1usize..4,
        slow in 1usize..4,
        pipe in 0usize..3,
        seed in 0u64..1000,
    ) {
        let m = build_state_space(&random_nn(2, layers, 3, 2, seed)).unwrap();
        let f = FixedPointFormat::new(14, 10).unwrap();
        let lut = gen_activation_lut(ActivationKind::Tanh, f, f, 8, (-4.0, 4.0)).unwrap();
        let s = Schedule { multipliers_per_node: p, clock_ratio: 2 + layers * (3usize.div_ceil(p) + 2) };
        let n = elaborate(&m, &s, &FormatAssignment::uniform(f), Some(&lut)).unwrap();
        let out = c_slow(&pipeline_output_multipliers(&n, pipe), slow);
        // independent of pass order
        prop_assert_eq!(latency(&out), slow * (1 + layers * (3usize.div_ceil(p) + 2) + 1 + pipe));
        let samples = random_inputs(2, 12, seed);
        let rep = compare_with_functional(&m, &out, &samples).unwrap();
        prop_assert!(rep.is_equivalent(), "{}", rep);
    }
}
