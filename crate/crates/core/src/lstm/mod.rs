//! Masked-gate LSTM networks.
//!
//! A [`Network`] stacks one (Architectures I and II) or two (Architecture III)
//! layers of M1 cells and one layer of M2 cells over a window of `T` time
//! steps. Every time step owns its own cells; weights are not shared across
//! time. The M2 outputs are either combined by a learned `T`-vector
//! (Architectures I and III) or averaged (Architecture II).
//!
//! All gates, including the cell input, use the logistic sigmoid, and the
//! cell output is `a_t = o_t * sigmoid(c_t)`.

mod cell;
mod format;
mod mesh;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use cell::{cell_forward, sigmoid, Cell, CellKind, CellState, Connectivity, Gate, GateWeights};
pub use format::{
    deserialize_mesh, deserialize_network, serialize_mesh, serialize_network, InputSpec, FORMAT_VERSION, MAGIC,
};
pub use mesh::{Mesh, MESH_BYTES};

pub(crate) use cell::{backward_raw, forward_raw, Sink};

/// Input width of every cell: 15 parameters plus the bias input.
pub const N_INPUTS: usize = 16;
/// Width of an M1 layer.
pub const HIDDEN: usize = 16;

/// Half-width of the uniform weight initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("truncated file")]
    TruncatedFile,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    I,
    II,
    III,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::I, Arch::II, Arch::III];

    /// Window length `T`.
    pub const fn window_len(self) -> usize {
        match self {
            Arch::I | Arch::II => 10,
            Arch::III => 20,
        }
    }

    pub const fn m1_layers(self) -> usize {
        match self {
            Arch::I | Arch::II => 1,
            Arch::III => 2,
        }
    }

    pub const fn has_combiner(self) -> bool {
        !matches!(self, Arch::II)
    }

    pub const fn id(self) -> u8 {
        match self {
            Arch::I => 1,
            Arch::II => 2,
            Arch::III => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Arch::I),
            2 => Some(Arch::II),
            3 => Some(Arch::III),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::I => "I",
            Arch::II => "II",
            Arch::III => "III",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "I" | "1" => Ok(Arch::I),
            "II" | "2" => Ok(Arch::II),
            "III" | "3" => Ok(Arch::III),
            other => Err(format!("unknown architecture {other:?} (expected I, II or III)")),
        }
    }
}

/// Number of enabled connection weights (gate biases excluded).
///
/// Per time step: `8 * m1_count` per M1 layer, `4 * m2_count + 4` for the M2
/// cell (its scalar recurrent weights are never masked), plus one combiner
/// weight for architectures that have one.
pub fn count_weights(arch: Arch, mesh: &Mesh) -> usize {
    let t = arch.window_len();
    let per_step = arch.m1_layers() * 8 * mesh.m1_count() + 4 * mesh.m2_count() + 4;
    t * per_step + if arch.has_combiner() { t } else { 0 }
}

/// Where a parameter lives in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Combiner,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerLayout {
    kind: CellKind,
    /// Offset of the first cell; cell `t` starts at `offset + t * kind.param_len()`.
    offset: usize,
}

/// A masked-gate LSTM network of one of the three architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Arch,
    horizon: usize,
    mesh: Mesh,
    seed: u64,
    params: Vec<f64>,
    layers: Vec<LayerLayout>,
    combiner_offset: usize,
    trainable: Vec<bool>,
    conn_m1: Connectivity,
    conn_m2: Connectivity,
    /// Channel binding and normalization used to build this network's inputs.
    pub inputs: Option<InputSpec>,
}

impl Network {
    /// Builds a network with weights drawn uniformly from
    /// `[-INIT_SCALE, INIT_SCALE]`. Every parameter is drawn in layout order
    /// before masking, so networks that share a seed share the values of
    /// every connection they both enable.
    pub fn new(arch: Arch, mesh: Mesh, horizon: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(arch, mesh, horizon, seed);
        for p in &mut net.params {
            *p = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        net.enforce_mask();
        net
    }

    /// A network with every parameter zero.
    pub fn zeros(arch: Arch, mesh: Mesh, horizon: usize, seed: u64) -> Self {
        let t = arch.window_len();
        let mut layers = Vec::new();
        let mut offset = 0;
        for _ in 0..arch.m1_layers() {
            layers.push(LayerLayout { kind: CellKind::M1, offset });
            offset += t * CellKind::M1.param_len();
        }
        layers.push(LayerLayout { kind: CellKind::M2, offset });
        offset += t * CellKind::M2.param_len();
        let combiner_offset = offset;
        if arch.has_combiner() {
            offset += t;
        }
        let mut net = Self {
            arch,
            horizon,
            conn_m1: Connectivity::new(CellKind::M1, &mesh),
            conn_m2: Connectivity::new(CellKind::M2, &mesh),
            mesh,
            seed,
            params: vec![0.0; offset],
            layers,
            combiner_offset,
            trainable: Vec::new(),
            inputs: None,
        };
        net.trainable = net.compute_trainable();
        net
    }

    fn compute_trainable(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for layer in &self.layers {
            let conn = self.conn(layer.kind);
            let k = layer.kind;
            let out = k.out_dim();
            for t in 0..self.window_len() {
                let base = layer.offset + t * k.param_len();
                for g in 0..4 {
                    let gb = base + g * k.gate_len();
                    for i in 0..k.in_dim() {
                        for j in 0..out {
                            mask[gb + i * out + j] = conn.w_enabled(i, j);
                        }
                    }
                    for r in 0..out {
                        for j in 0..out {
                            mask[gb + k.w_len() + r * out + j] = conn.u_enabled(r, j);
                        }
                    }
                }
            }
        }
        mask
    }

    fn conn(&self, kind: CellKind) -> &Connectivity {
        match kind {
            CellKind::M1 => &self.conn_m1,
            CellKind::M2 => &self.conn_m2,
        }
    }

    /// Forces every disabled connection weight to exactly zero.
    pub fn enforce_mask(&mut self) {
        for (p, &on) in self.params.iter_mut().zip(&self.trainable) {
            if !on {
                *p = 0.0;
            }
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn window_len(&self) -> usize {
        self.arch.window_len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the raw parameters. Writes to masked entries are
    /// visible to [`Network::params`] but ignored by the forward pass.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Whether parameter `idx` is an enabled connection, bias or combiner weight.
    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn param_role(&self, idx: usize) -> ParamRole {
        if idx >= self.combiner_offset {
            return ParamRole::Combiner;
        }
        let layer = self.layers.iter().rev().find(|l| l.offset <= idx).expect("layer 0 starts at 0");
        let k = layer.kind;
        let within_gate = (idx - layer.offset) % k.param_len() % k.gate_len();
        if within_gate >= k.w_len() + k.u_len() {
            ParamRole::Bias
        } else {
            ParamRole::Weight
        }
    }

    /// Number of enabled connection weights actually present in this network.
    pub fn connection_count(&self) -> usize {
        (0..self.params.len())
            .filter(|&i| self.trainable[i] && self.param_role(i) != ParamRole::Bias)
            .count()
    }

    /// Number of cell layers (M1 layers followed by the M2 layer).
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cell_kind(&self, layer: usize) -> CellKind {
        self.layers[layer].kind
    }

    fn cell_range(&self, layer: usize, t: usize) -> std::ops::Range<usize> {
        let l = &self.layers[layer];
        let start = l.offset + t * l.kind.param_len();
        start..start + l.kind.param_len()
    }

    /// Copy of the cell of `layer` at time step `t`.
    pub fn cell(&self, layer: usize, t: usize) -> Cell {
        Cell { kind: self.layers[layer].kind, params: self.params[self.cell_range(layer, t)].to_vec() }
    }

    pub fn cell_params_mut(&mut self, layer: usize, t: usize) -> &mut [f64] {
        let r = self.cell_range(layer, t);
        &mut self.params[r]
    }

    /// The output combiner (empty for Architecture II).
    pub fn combiner(&self) -> &[f64] {
        let n = if self.arch.has_combiner() { self.window_len() } else { 0 };
        &self.params[self.combiner_offset..self.combiner_offset + n]
    }

    pub fn combiner_mut(&mut self) -> &mut [f64] {
        let n = if self.arch.has_combiner() { self.window_len() } else { 0 };
        &mut self.params[self.combiner_offset..self.combiner_offset + n]
    }

    /// Replaces all parameters; masked entries are zeroed.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), LstmError> {
        if params.len() != self.params.len() {
            return Err(LstmError::DimensionMismatch { expected: self.params.len(), found: params.len() });
        }
        self.params = params;
        self.enforce_mask();
        Ok(())
    }

    /// Predicts the target for one window of `T` rows of [`N_INPUTS`] values.
    pub fn forward(&self, x: &[f64]) -> Result<f64, LstmError> {
        let mut ws = Workspace::new(self);
        self.forward_ws(x, &mut ws)
    }

    pub(crate) fn forward_ws(&self, x: &[f64], ws: &mut Workspace) -> Result<f64, LstmError> {
        let want = self.window_len() * N_INPUTS;
        if x.len() != want {
            return Err(LstmError::DimensionMismatch { expected: want, found: x.len() });
        }
        let t_len = self.window_len();
        for (l, layer) in self.layers.iter().enumerate() {
            let conn = self.conn(layer.kind);
            let n = layer.kind.out_dim();
            for t in 0..t_len {
                let (lower, upper) = ws.states.split_at_mut(l);
                let (prev, cur) = upper[0].split_at_mut(t);
                let input: &[f64] = if l == 0 { &x[t * N_INPUTS..(t + 1) * N_INPUTS] } else { &lower[l - 1][t].a };
                let (a_prev, c_prev) = match prev.last() {
                    Some(p) => (&p.a[..], &p.c[..]),
                    None => (&ws.zeros[..n], &ws.zeros[..n]),
                };
                forward_raw(layer.kind, &self.params[self.cell_range(l, t)], conn, input, a_prev, c_prev, &mut cur[0]);
            }
        }
        let top = ws.states.last().expect("at least one layer");
        let pred = if self.arch.has_combiner() {
            self.combiner().iter().zip(top).map(|(v, s)| v * s.a[0]).sum()
        } else {
            top.iter().map(|s| s.a[0]).sum::<f64>() / t_len as f64
        };
        Ok(pred)
    }

    /// Backpropagates `dpred` (d loss / d prediction) through the states left
    /// in `ws` by the last [`Network::forward_ws`] on the same window, adding
    /// the parameter gradient into `grad`. Returns false if a non-finite
    /// gradient appeared.
    pub(crate) fn backward_ws(&self, x: &[f64], ws: &mut Workspace, dpred: f64, grad: &mut [f64]) -> bool {
        let view = self.view();
        backward(&view, x, ws, dpred, Sink::Accumulate { params: &self.params, grad })
    }

    /// Like [`Network::backward_ws`], but applies `p -= lr * gradient` to each
    /// trainable parameter directly instead of collecting the gradient.
    pub(crate) fn sgd_step_ws(&mut self, x: &[f64], ws: &mut Workspace, dpred: f64, lr: f64) -> bool {
        let view = View {
            arch: self.arch,
            layers: &self.layers,
            conn_m1: &self.conn_m1,
            conn_m2: &self.conn_m2,
            combiner_offset: self.combiner_offset,
        };
        backward(&view, x, ws, dpred, Sink::Step { params: &mut self.params, lr })
    }

    fn view(&self) -> View<'_> {
        View {
            arch: self.arch,
            layers: &self.layers,
            conn_m1: &self.conn_m1,
            conn_m2: &self.conn_m2,
            combiner_offset: self.combiner_offset,
        }
    }

    /// States of every cell from the last forward pass through `ws`.
    pub fn trace(&self, x: &[f64]) -> Result<Vec<Vec<CellState>>, LstmError> {
        let mut ws = Workspace::new(self);
        self.forward_ws(x, &mut ws)?;
        Ok(ws.states)
    }
}

/// The parts of a [`Network`] a backward pass reads, borrowed apart from the parameters.
struct View<'a> {
    arch: Arch,
    layers: &'a [LayerLayout],
    conn_m1: &'a Connectivity,
    conn_m2: &'a Connectivity,
    combiner_offset: usize,
}

fn backward(net: &View<'_>, x: &[f64], ws: &mut Workspace, dpred: f64, mut sink: Sink<'_>) -> bool {
    let t_len = net.arch.window_len();
    let n_layers = net.layers.len();
    let top = n_layers - 1;
    for buf in ws.da_in.iter_mut().flatten() {
        buf.iter_mut().for_each(|v| *v = 0.0);
    }
    for (l, layer) in net.layers.iter().enumerate() {
        let n = layer.kind.out_dim();
        ws.da_rec[l][..n].iter_mut().for_each(|v| *v = 0.0);
        ws.dc_rec[l][..n].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut finite = dpred.is_finite();
    if net.arch.has_combiner() {
        for t in 0..t_len {
            let k = net.combiner_offset + t;
            ws.da_in[top][t][0] = dpred * sink.param(k);
            sink.apply(k, dpred * ws.states[top][t].a[0]);
        }
    } else {
        for t in 0..t_len {
            ws.da_in[top][t][0] = dpred / t_len as f64;
        }
    }

    let mut da = [0.0; HIDDEN];
    let mut dc_next = [0.0; HIDDEN];
    for t in (0..t_len).rev() {
        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            let kind = layer.kind;
            let n = kind.out_dim();
            for j in 0..n {
                da[j] = ws.da_in[l][t][j] + ws.da_rec[l][j];
                dc_next[j] = ws.dc_rec[l][j];
            }
            let (a_prev, c_prev) = if t > 0 {
                (&ws.states[l][t - 1].a[..], &ws.states[l][t - 1].c[..])
            } else {
                (&ws.zeros[..n], &ws.zeros[..n])
            };
            let input: &[f64] = if l == 0 { &x[t * N_INPUTS..(t + 1) * N_INPUTS] } else { &ws.states[l - 1][t].a };
            let dx = if l > 0 { Some(&mut ws.da_in[l - 1][t][..]) } else { None };
            let start = layer.offset + t * kind.param_len();
            let conn = match kind {
                CellKind::M1 => net.conn_m1,
                CellKind::M2 => net.conn_m2,
            };
            finite &= backward_raw(
                kind,
                sink.sub(start..start + kind.param_len()),
                conn,
                input,
                a_prev,
                c_prev,
                &ws.states[l][t],
                &da[..n],
                &dc_next[..n],
                dx,
                &mut ws.da_rec[l][..n],
                &mut ws.dc_rec[l][..n],
                &mut ws.dz,
            );
        }
    }
    finite
}

/// Reusable buffers for forward and backward passes of one network shape.
#[derive(Clone, Debug)]
pub(crate) struct Workspace {
    /// `states[layer][t]`
    pub states: Vec<Vec<CellState>>,
    da_in: Vec<Vec<Vec<f64>>>,
    da_rec: Vec<Vec<f64>>,
    dc_rec: Vec<Vec<f64>>,
    dz: [[f64; HIDDEN]; 4],
    zeros: Vec<f64>,
}

impl Workspace {
    pub fn new(net: &Network) -> Self {
        let t = net.window_len();
        let dims: Vec<usize> = net.layers.iter().map(|l| l.kind.out_dim()).collect();
        Self {
            states: dims.iter().map(|&n| vec![CellState::zeros(n); t]).collect(),
            da_in: dims.iter().map(|&n| vec![vec![0.0; n]; t]).collect(),
            da_rec: dims.iter().map(|&n| vec![0.0; n]).collect(),
            dc_rec: dims.iter().map(|&n| vec![0.0; n]).collect(),
            dz: [[0.0; HIDDEN]; 4],
            zeros: vec![0.0; HIDDEN],
        }
    }
}
