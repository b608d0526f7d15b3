//! Moore-machine timing controller for the shared layer datapath.

use std::fmt;

use crate::fixed::ceil_log2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// MACC cycle `c` of `macc_cycles`.
    Macc(usize),
    Requant,
    Activate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CtrlState {
    Idle,
    Load,
    Compute { layer: usize, phase: Phase },
    WriteOut,
}

impl fmt::Display for CtrlState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CtrlState::Idle => write!(f, "IDLE"),
            CtrlState::Load => write!(f, "LOAD"),
            CtrlState::Compute { layer, phase: Phase::Macc(c) } => write!(f, "L{layer}_MACC{c}"),
            CtrlState::Compute { layer, phase: Phase::Requant } => write!(f, "L{layer}_REQ"),
            CtrlState::Compute { layer, phase: Phase::Activate } => write!(f, "L{layer}_ACT"),
            CtrlState::WriteOut => write!(f, "WRITE_OUT"),
        }
    }
}

/// Control word decoded from the current state only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CtrlOutputs {
    /// A sample arriving with data_valid_in in this state is captured.
    pub accept: bool,
    /// First MACC cycle of a layer: accumulators restart from the bias.
    pub first: bool,
    pub acc_en: bool,
    pub req_en: bool,
    pub act_en: bool,
    pub dv_out: bool,
    pub layer: usize,
    pub macc_cycle: usize,
    /// Weight ROM address, `layer * macc_cycles + macc_cycle`.
    pub wsel: usize,
}

/// Binary-encoded controller: IDLE, LOAD, N × (macc_cycles MACC phases,
/// requantize, activate), WRITE_OUT.
///
/// A sample is accepted from IDLE or WRITE_OUT, so back-to-back samples
/// spaced exactly `latency()` cycles apart never stall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControllerFsm {
    layers: usize,
    macc_cycles: usize,
}

impl ControllerFsm {
    pub fn new(layers: usize, macc_cycles: usize) -> Self {
        assert!(layers >= 1 && macc_cycles >= 1, "controller needs at least one layer and one MACC cycle");
        Self { layers, macc_cycles }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn macc_cycles(&self) -> usize {
        self.macc_cycles
    }

    pub fn state_count(&self) -> usize {
        3 + self.layers * (self.macc_cycles + 2)
    }

    pub fn state_width(&self) -> u32 {
        ceil_log2(self.state_count() as u64).max(1)
    }

    /// data_valid_in to data_valid_out distance in cycles.
    pub fn latency(&self) -> usize {
        2 + self.layers * (self.macc_cycles + 2)
    }

    pub fn encode(&self, s: CtrlState) -> usize {
        let per = self.macc_cycles + 2;
        match s {
            CtrlState::Idle => 0,
            CtrlState::Load => 1,
            CtrlState::Compute { layer, phase } => {
                let ph = match phase {
                    Phase::Macc(c) => c,
                    Phase::Requant => self.macc_cycles,
                    Phase::Activate => self.macc_cycles + 1,
                };
                2 + layer * per + ph
            }
            CtrlState::WriteOut => self.state_count() - 1,
        }
    }

    pub fn decode(&self, code: usize) -> Option<CtrlState> {
        let per = self.macc_cycles + 2;
        match code {
            0 => Some(CtrlState::Idle),
            1 => Some(CtrlState::Load),
            c if c == self.state_count() - 1 => Some(CtrlState::WriteOut),
            c if c < self.state_count() => {
                let (layer, ph) = ((c - 2) / per, (c - 2) % per);
                let phase = match ph {
                    p if p < self.macc_cycles => Phase::Macc(p),
                    p if p == self.macc_cycles => Phase::Requant,
                    _ => Phase::Activate,
                };
                Some(CtrlState::Compute { layer, phase })
            }
            _ => None,
        }
    }

    /// Next-state function. Unused codes fall back to IDLE.
    pub fn next(&self, code: usize, dv_in: bool) -> usize {
        let Some(s) = self.decode(code) else { return 0 };
        let next = match s {
            CtrlState::Idle | CtrlState::WriteOut if dv_in => CtrlState::Load,
            CtrlState::Idle | CtrlState::WriteOut => CtrlState::Idle,
            CtrlState::Load => CtrlState::Compute { layer: 0, phase: Phase::Macc(0) },
            CtrlState::Compute { layer, phase } => match phase {
                Phase::Macc(c) if c + 1 < self.macc_cycles => CtrlState::Compute { layer, phase: Phase::Macc(c + 1) },
                Phase::Macc(_) => CtrlState::Compute { layer, phase: Phase::Requant },
                Phase::Requant => CtrlState::Compute { layer, phase: Phase::Activate },
                Phase::Activate if layer + 1 < self.layers => {
                    CtrlState::Compute { layer: layer + 1, phase: Phase::Macc(0) }
                }
                Phase::Activate => CtrlState::WriteOut,
            },
        };
        self.encode(next)
    }

    pub fn outputs(&self, code: usize) -> CtrlOutputs {
        let mut o = CtrlOutputs::default();
        match self.decode(code) {
            None | Some(CtrlState::Load) => {}
            Some(CtrlState::Idle) => o.accept = true,
            Some(CtrlState::WriteOut) => {
                o.accept = true;
                o.dv_out = true;
            }
            Some(CtrlState::Compute { layer, phase }) => {
                o.layer = layer;
                match phase {
                    Phase::Macc(c) => {
                        o.acc_en = true;
                        o.first = c == 0;
                        o.macc_cycle = c;
                        o.wsel = layer * self.macc_cycles + c;
                    }
                    Phase::Requant => o.req_en = true,
                    Phase::Activate => o.act_en = true,
                }
            }
        }
        o
    }

    /// One decoder table over every code of the state register.
    pub fn decoder(&self, f: impl Fn(&CtrlOutputs) -> usize) -> Vec<i128> {
        (0..1usize << self.state_width()).map(|c| f(&self.outputs(c)) as i128).collect()
    }

    /// States reachable from IDLE under any input sequence.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.state_count()];
        let mut stack = vec![0];
        while let Some(s) = stack.pop() {
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            for dv in [false, true] {
                stack.push(self.next(s, dv));
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig5_controller_counts() {
        let fsm = ControllerFsm::new(4, 1);
        assert_eq!(fsm.latency(), 14);
        assert_eq!(fsm.state_count(), 15);
        assert_eq!(fsm.state_width(), 4);
        // 4 layers × (macc, requantize, activate)
        let compute = (0..fsm.state_count())
            .filter(|&c| matches!(fsm.decode(c), Some(CtrlState::Compute { .. })))
            .count();
        assert_eq!(compute, 12);
    }

    #[test]
    fn single_layer_latency() {
        assert_eq!(ControllerFsm::new(1, 1).latency(), 5);
    }

    #[test]
    fn encode_decode_round_trip() {
        let fsm = ControllerFsm::new(3, 4);
        for c in 0..fsm.state_count() {
            assert_eq!(fsm.encode(fsm.decode(c).unwrap()), c);
        }
        assert_eq!(fsm.decode(fsm.state_count()), None);
    }

    #[test]
    fn all_states_reachable() {
        for (n, mc) in [(1, 1), (4, 1), (3, 4), (8, 2)] {
            assert!(ControllerFsm::new(n, mc).reachable().iter().all(|&r| r));
        }
    }

    #[test]
    fn walk_one_sample() {
        let fsm = ControllerFsm::new(2, 3);
        let mut s = 0;
        assert_eq!(fsm.next(s, false), 0);
        s = fsm.next(s, true);
        let mut cycles = 1;
        let mut layers_seen = 0;
        while !fsm.outputs(s).dv_out {
            if fsm.outputs(s).act_en {
                layers_seen += 1;
            }
            s = fsm.next(s, false);
            cycles += 1;
        }
        assert_eq!(cycles, fsm.latency());
        assert_eq!(layers_seen, 2);
        // dv_out lasts one cycle
        assert_eq!(fsm.next(s, false), 0);
        assert!(!fsm.outputs(0).dv_out);
    }

    #[test]
    fn weight_addresses_cover_each_layer_cycle_once() {
        let fsm = ControllerFsm::new(3, 2);
        let mut addrs: Vec<usize> =
            (0..fsm.state_count()).filter(|&c| fsm.outputs(c).acc_en).map(|c| fsm.outputs(c).wsel).collect();
        addrs.sort_unstable();
        assert_eq!(addrs, (0..6).collect::<Vec<_>>());
    }
}
