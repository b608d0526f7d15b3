//! Command-line front end: `compile`, `sweep-bits`, `simulate`, `gen-nn`.
//!
//! Exit codes: 0 success, 1 validation, 2 infeasible schedule, 3 gate
//! mismatch, 4 I/O, 64 usage.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::elaborate::{elaborate, ElabError, Schedule};
use crate::fixed::FixedPointFormat;
use crate::model::{validate_model, ActivationKind, DfOp, StateSpaceModel};
use crate::netlist::{critical_path, DelayModel, Netlist};
use crate::nn::{build_state_space, load_weights, random_inputs, random_nn, save_weights};
use crate::passes::{fuse_state_transition, run_netlist_passes, PassSpec};
use crate::rtlsim::{self, collect_outputs, compare_with_functional, cycles_for, sample_stimulus};
use crate::sim::fixed::{FixedProgram, FormatAssignment};
use crate::sim::lut::{gen_activation_lut_with, Interpolation, LutConfig, LutRom, DEFAULT_ADDR_BITS, DEFAULT_RANGE};
use crate::sim::reference::simulate_reference;
use crate::sim::snr::{bit_sweep, FracPolicy, SweepConfig};
use crate::verilog::{emit_project, EmitConfig, TestVectors};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_GATE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Infeasible(String),
    Gate(String),
    Io(String),
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Gate(_) => EXIT_GATE,
            CliError::Io(_) => EXIT_IO,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m)
            | CliError::Infeasible(m)
            | CliError::Gate(m)
            | CliError::Io(m)
            | CliError::Usage(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "statesynth", version, about = "State-space model to Verilog compiler")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    Reference,
    Fixed,
    Rtl,
}

#[derive(Debug, clap::Args)]
struct ProjectArgs {
    /// Project configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file; overrides the config entry.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Elaborate, optimize, check and emit Verilog.
    Compile {
        #[command(flatten)]
        project: ProjectArgs,
        /// Output directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Gate samples; overrides `gate_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Output SNR of the fixed-point model against the reference per word length.
    SweepBits {
        #[command(flatten)]
        project: ProjectArgs,
        /// Comma-separated word lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<u32>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run input vectors through one of the simulators.
    Simulate {
        #[command(flatten)]
        project: ProjectArgs,
        /// CSV (one vector per line) or a JSON array of vectors.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        engine: Engine,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a random network in the weights-file format.
    GenNn {
        /// L,N,M,P
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Per-class formats; `uniform` fills any class left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatsConfig {
    #[serde(default)]
    pub uniform: Option<FixedPointFormat>,
    #[serde(default)]
    pub input: Option<FixedPointFormat>,
    #[serde(default)]
    pub weight: Option<FixedPointFormat>,
    #[serde(default)]
    pub state: Option<FixedPointFormat>,
    #[serde(default)]
    pub output: Option<FixedPointFormat>,
    #[serde(default)]
    pub accumulator: Option<FixedPointFormat>,
}

impl FormatsConfig {
    pub fn assignment(&self) -> FormatAssignment {
        let u = self.uniform.or_else(|| {
            let all = [self.input, self.weight, self.state, self.output];
            all.iter().all(Option::is_none).then(default_format)
        });
        FormatAssignment {
            input: self.input.or(u),
            weight: self.weight.or(u),
            state: self.state.or(u),
            output: self.output.or(u),
            accumulator: self.accumulator,
        }
    }
}

fn default_format() -> FixedPointFormat {
    FixedPointFormat::new(16, 12).expect("static format")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Defaults to one MACC per state element.
    #[serde(default)]
    pub multipliers_per_node: Option<usize>,
    /// Defaults to the controller latency.
    #[serde(default)]
    pub clock_ratio: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    #[serde(default = "default_addr_bits")]
    pub addr_bits: u32,
    #[serde(default = "default_range")]
    pub range: (f64, f64),
    #[serde(default = "default_interp")]
    pub interpolation: Interpolation,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self { addr_bits: DEFAULT_ADDR_BITS, range: DEFAULT_RANGE, interpolation: Interpolation::Auto }
    }
}

impl ActivationConfig {
    pub fn lut_config(&self) -> LutConfig {
        LutConfig { addr_bits: self.addr_bits, range: self.range, interpolation: self.interpolation }
    }
}

fn default_addr_bits() -> u32 {
    DEFAULT_ADDR_BITS
}
fn default_range() -> (f64, f64) {
    DEFAULT_RANGE
}
fn default_interp() -> Interpolation {
    Interpolation::Auto
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("build")
}
fn default_gate_samples() -> usize {
    1000
}

/// One JSON document per project. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Weights file or serialized state-space model.
    pub model: PathBuf,
    #[serde(default)]
    pub formats: FormatsConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub activation: ActivationConfig,
    /// Pass pipeline, e.g. `["fuse:2", "pipeline_mult:1", "retime"]`.
    #[serde(default)]
    pub passes: Vec<String>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gate_samples")]
    pub gate_samples: usize,
    /// Activation tables as `$readmemh` images.
    #[serde(default)]
    pub rom_files: bool,
}

impl ProjectConfig {
    pub fn with_model(model: PathBuf) -> Self {
        Self {
            model,
            formats: FormatsConfig::default(),
            schedule: ScheduleConfig::default(),
            activation: ActivationConfig::default(),
            passes: Vec::new(),
            out_dir: default_out_dir(),
            seed: 0,
            gate_samples: default_gate_samples(),
            rom_files: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| {
            CliError::Validation(format!("config line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn pass_specs(&self) -> Result<Vec<PassSpec>, CliError> {
        self.passes
            .iter()
            .map(|s| {
                let p: PassSpec = s.parse().map_err(|e| CliError::Validation(format!("{e}")))?;
                match p {
                    PassSpec::Fuse(0) | PassSpec::CSlow(0) => {
                        Err(CliError::Validation(format!("pass `{s}` needs an argument of at least 1")))
                    }
                    _ => Ok(p),
                }
            })
            .collect()
    }
}

fn load_project(args: &ProjectArgs) -> Result<ProjectConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let mut cfg = ProjectConfig::parse(&text)?;
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.model = base.join(&cfg.model);
            cfg.out_dir = base.join(&cfg.out_dir);
            cfg
        }
        None => match &args.model {
            Some(m) => ProjectConfig::with_model(m.clone()),
            None => return Err(CliError::Usage("either --config or --model is required".into())),
        },
    };
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Reads a weights file or a serialized [`StateSpaceModel`], told apart by
/// their top-level keys.
pub fn load_model(path: &Path) -> Result<StateSpaceModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_model = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.as_object().map(|o| o.contains_key("update_graph")))
        .unwrap_or(false);
    let m = if is_model {
        serde_json::from_str::<StateSpaceModel>(&text).map_err(|e| {
            CliError::Validation(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
        })?
    } else {
        let nn = load_weights(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        build_state_space(&nn).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
    };
    let diags = validate_model(&m);
    if !diags.is_empty() {
        let list: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(CliError::Validation(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(m)
}

fn uses_tanh(m: &StateSpaceModel) -> bool {
    [&m.update_graph, &m.output_graph]
        .iter()
        .any(|g| g.contains_op(|op| *op == DfOp::Activation(ActivationKind::Tanh)))
}

/// Activation table in the datapath state format, if the model needs one.
pub fn model_lut(
    m: &StateSpaceModel,
    fmts: &FormatAssignment,
    act: &ActivationConfig,
) -> Result<Option<LutRom>, CliError> {
    if !uses_tanh(m) {
        return Ok(None);
    }
    let r = fmts.resolve(m).map_err(|e| CliError::Validation(e.to_string()))?;
    gen_activation_lut_with(ActivationKind::Tanh, r.state, r.state, &act.lut_config())
        .map(Some)
        .map_err(|e| CliError::Validation(format!("activation table: {e}")))
}

/// Applies the model-level passes in list order.
pub fn apply_model_passes(m: StateSpaceModel, passes: &[PassSpec]) -> Result<StateSpaceModel, CliError> {
    let mut m = m;
    for p in passes.iter().filter(|p| p.is_model_pass()) {
        if let PassSpec::Fuse(j) = *p {
            m = fuse_state_transition(&m, j).map_err(|e| CliError::Validation(format!("{p}: {e}")))?;
        }
    }
    Ok(m)
}

fn elab_err(e: ElabError) -> CliError {
    match e {
        ElabError::Infeasible { .. } | ElabError::Multipliers { .. } => CliError::Infeasible(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

/// Elaborates with the configured schedule; an absent clock ratio becomes
/// the controller latency.
pub fn elaborate_project(
    m: &StateSpaceModel,
    cfg: &ProjectConfig,
    lut: Option<&LutRom>,
) -> Result<Netlist, CliError> {
    let fmts = cfg.formats.assignment();
    let p = cfg.schedule.multipliers_per_node.unwrap_or(m.state_dim);
    let ratio = cfg.schedule.clock_ratio.unwrap_or(usize::MAX);
    let s = Schedule { multipliers_per_node: p, clock_ratio: ratio };
    let mut n = elaborate(m, &s, &fmts, lut).map_err(elab_err)?;
    if cfg.schedule.clock_ratio.is_none() {
        n.meta.clock_ratio = n.meta.fsm.latency();
    }
    Ok(n)
}

/// Everything `compile` produces before files are written.
pub struct Compiled {
    pub model: StateSpaceModel,
    pub netlist: Netlist,
    pub gate_samples: usize,
    pub project: crate::verilog::VerilogProject,
}

/// Model passes, elaboration, netlist passes, the equivalence gate, then
/// emission. Nothing is emitted when the gate fails.
pub fn compile(cfg: &ProjectConfig) -> Result<Compiled, CliError> {
    let passes = cfg.pass_specs()?;
    let m = apply_model_passes(load_model(&cfg.model)?, &passes)?;
    let fmts = cfg.formats.assignment();
    let lut = model_lut(&m, &fmts, &cfg.activation)?;
    let base = elaborate_project(&m, cfg, lut.as_ref())?;
    let n = run_netlist_passes(&base, &passes, &DelayModel::default());
    let samples = random_inputs(m.input_dim, cfg.gate_samples, cfg.seed);
    let report = compare_with_functional(&m, &n, &samples).map_err(|e| CliError::Validation(e.to_string()))?;
    if !report.is_equivalent() {
        return Err(CliError::Gate(format!("netlist does not match the functional model: {report}")));
    }
    let vectors = TestVectors::from_functional(&m, &n, &samples).map_err(|e| CliError::Validation(e.to_string()))?;
    let ecfg = EmitConfig { rom_files: cfg.rom_files, prefix: None, vectors };
    let project = emit_project(&n, &ecfg).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(Compiled { model: m, netlist: n, gate_samples: samples.len(), project })
}

/// Parses input vectors from CSV lines or a JSON array of arrays.
pub fn parse_inputs(text: &str, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let rows: Vec<Vec<f64>> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text)
            .map_err(|e| CliError::Validation(format!("inputs line {}, column {}: {e}", e.line(), e.column())))?
    } else {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(format!("inputs line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        rows
    };
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(CliError::Validation(format!("input vector {i} has {} entries, model expects {dim}", r.len())));
    }
    Ok(rows)
}

fn simulate_csv(cfg: &ProjectConfig, inputs: &[Vec<f64>], engine: Engine) -> Result<String, CliError> {
    let passes = cfg.pass_specs()?;
    let m = apply_model_passes(load_model(&cfg.model)?, &passes)?;
    let fmts = cfg.formats.assignment();
    let sim_err = |e: crate::sim::SimError| CliError::Validation(e.to_string());
    let mut s = String::new();
    match engine {
        Engine::Reference => {
            s.push_str("sample,output,value\n");
            for (i, u) in inputs.iter().enumerate() {
                for (r, v) in simulate_reference(&m, u).map_err(sim_err)?.iter().enumerate() {
                    let _ = writeln!(s, "{i},{r},{v}");
                }
            }
        }
        Engine::Fixed => {
            let lut = model_lut(&m, &fmts, &cfg.activation)?;
            let prog = FixedProgram::new(&m, &fmts, lut.as_ref()).map_err(sim_err)?;
            s.push_str("sample,output,raw,value\n");
            for (i, u) in inputs.iter().enumerate() {
                for (r, v) in prog.run(u).map_err(sim_err)?.iter().enumerate() {
                    let _ = writeln!(s, "{i},{r},{},{}", v.raw(), v.to_f64());
                }
            }
        }
        Engine::Rtl => {
            let lut = model_lut(&m, &fmts, &cfg.activation)?;
            let base = elaborate_project(&m, cfg, lut.as_ref())?;
            let n = run_netlist_passes(&base, &passes, &DelayModel::default());
            let trace = rtlsim::run(&n, &sample_stimulus(&n, inputs), cycles_for(&n, inputs.len()))
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let res = n.meta.formats.output.resolution();
            s.push_str("sample,output,raw,value\n");
            for (i, (_, y)) in collect_outputs(&n, &trace).iter().enumerate().take(inputs.len()) {
                for (r, &raw) in y.iter().enumerate() {
                    let _ = writeln!(s, "{i},{r},{raw},{}", raw as f64 * res);
                }
            }
        }
    }
    Ok(s)
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| io_err(p, e))
        }
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Compile { project, out: dir, samples } => {
            let mut cfg = load_project(&project)?;
            if let Some(d) = dir {
                cfg.out_dir = d;
            }
            if let Some(s) = samples {
                cfg.gate_samples = s;
            }
            let c = compile(&cfg)?;
            let files = c.project.write(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
            let n = &c.netlist;
            let cp = critical_path(n, &DelayModel::default()).map_err(|e| CliError::Validation(e.to_string()))?;
            let _ = writeln!(out, "model      {}", c.model.name);
            let _ = writeln!(out, "latency    {} cycles", crate::elaborate::latency(n));
            let _ = writeln!(out, "ratio      {} cycles per sample", n.meta.clock_ratio);
            let _ = writeln!(out, "registers  {}", n.register_count());
            let _ = writeln!(out, "critical   {cp}");
            let _ = writeln!(out, "gate       equivalent ({} samples)", c.gate_samples);
            let _ = writeln!(out, "wrote {} files to {}", files.len(), cfg.out_dir.display());
            Ok(())
        }
        Command::SweepBits { project, widths, samples, out: path } => {
            let cfg = load_project(&project)?;
            if samples == 0 {
                return Err(CliError::Usage("--samples must be at least 1".into()));
            }
            let m = apply_model_passes(load_model(&cfg.model)?, &cfg.pass_specs()?)?;
            let inputs = random_inputs(m.input_dim, samples, cfg.seed);
            let sc = SweepConfig { frac_policy: FracPolicy::default(), lut: cfg.activation.lut_config() };
            let mut report = bit_sweep(&m, &inputs, &widths, &sc).map_err(|e| CliError::Validation(e.to_string()))?;
            report.seed = Some(cfg.seed);
            write_or_print(path.as_deref(), &report.to_csv(), out)?;
            if path.is_some() {
                for (bits, snr) in report.mean_snr() {
                    let _ = writeln!(out, "{bits:>3} bits  mean SNR {snr:.2} dB");
                }
            }
            Ok(())
        }
        Command::Simulate { project, inputs, engine, out: path } => {
            let cfg = load_project(&project)?;
            let m = load_model(&cfg.model)?;
            let text = std::fs::read_to_string(&inputs).map_err(|e| io_err(&inputs, e))?;
            let rows = parse_inputs(&text, m.input_dim)?;
            let csv = simulate_csv(&cfg, &rows, engine)?;
            write_or_print(path.as_deref(), &csv, out)
        }
        Command::GenNn { dims, seed, out: path } => {
            let &[l, n, m, p] = dims.as_slice() else {
                return Err(CliError::Usage(format!("--dims takes L,N,M,P, got {} values", dims.len())));
            };
            if [l, n, m, p].contains(&0) {
                return Err(CliError::Usage("--dims entries must be at least 1".into()));
            }
            write_or_print(path.as_deref(), &save_weights(&random_nn(l, n, m, p, seed)), out)
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.cmd, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
