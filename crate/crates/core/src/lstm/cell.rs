//! M1 and M2 cells.
//!
//! Both cell kinds share one parameter layout: four gates in the order
//! `g, i, f, o`, each stored as `w` (`in_dim x out_dim`, row-major), then `u`
//! (`out_dim x out_dim`, row-major), then the bias (`out_dim`). Gate `j`'s
//! pre-activation is `bias[j] + sum_i x[i] * w[i][j] + sum_k a_prev[k] * u[k][j]`
//! over the connections the mesh leaves enabled.

use rand::Rng;

use super::{LstmError, Mesh, HIDDEN, N_INPUTS};

pub fn sigmoid(alpha: f64) -> f64 {
    1.0 / (1.0 + (-alpha).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// 16 inputs to 16 outputs, all gate matrices masked by `m1`.
    M1,
    /// 16 inputs reduced to a single output; `w` masked by `m2`, scalar `u` unmasked.
    M2,
}

impl CellKind {
    pub const fn in_dim(self) -> usize {
        N_INPUTS
    }

    pub const fn out_dim(self) -> usize {
        match self {
            CellKind::M1 => HIDDEN,
            CellKind::M2 => 1,
        }
    }

    pub const fn w_len(self) -> usize {
        self.in_dim() * self.out_dim()
    }

    pub const fn u_len(self) -> usize {
        self.out_dim() * self.out_dim()
    }

    pub const fn gate_len(self) -> usize {
        self.w_len() + self.u_len() + self.out_dim()
    }

    pub const fn param_len(self) -> usize {
        4 * self.gate_len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    /// Cell input.
    G = 0,
    I = 1,
    F = 2,
    O = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::G, Gate::I, Gate::F, Gate::O];
}

/// Borrowed view of one gate's weights.
#[derive(Clone, Copy, Debug)]
pub struct GateWeights<'a> {
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub bias: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub kind: CellKind,
    pub params: Vec<f64>,
}

impl Cell {
    pub fn zeros(kind: CellKind) -> Self {
        Self { kind, params: vec![0.0; kind.param_len()] }
    }

    pub fn random(kind: CellKind, scale: f64, rng: &mut impl Rng) -> Self {
        let params = (0..kind.param_len()).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { kind, params }
    }

    pub fn from_params(kind: CellKind, params: Vec<f64>) -> Result<Self, LstmError> {
        if params.len() != kind.param_len() {
            return Err(LstmError::DimensionMismatch { expected: kind.param_len(), found: params.len() });
        }
        Ok(Self { kind, params })
    }

    pub fn gate(&self, gate: Gate) -> GateWeights<'_> {
        let k = self.kind;
        let p = &self.params[gate as usize * k.gate_len()..(gate as usize + 1) * k.gate_len()];
        GateWeights { w: &p[..k.w_len()], u: &p[k.w_len()..k.w_len() + k.u_len()], bias: &p[k.w_len() + k.u_len()..] }
    }

    pub fn w_mut(&mut self, gate: Gate) -> &mut [f64] {
        let k = self.kind;
        let off = gate as usize * k.gate_len();
        &mut self.params[off..off + k.w_len()]
    }

    pub fn u_mut(&mut self, gate: Gate) -> &mut [f64] {
        let k = self.kind;
        let off = gate as usize * k.gate_len() + k.w_len();
        &mut self.params[off..off + k.u_len()]
    }

    pub fn bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let k = self.kind;
        let off = gate as usize * k.gate_len() + k.w_len() + k.u_len();
        &mut self.params[off..off + k.out_dim()]
    }

    /// Zeroes every weight the mesh disables.
    pub fn apply_mask(&mut self, mesh: &Mesh) {
        let conn = Connectivity::new(self.kind, mesh);
        let k = self.kind;
        let out = k.out_dim();
        for g in 0..4 {
            let base = g * k.gate_len();
            for i in 0..k.in_dim() {
                for j in 0..out {
                    if !conn.w_enabled(i, j) {
                        self.params[base + i * out + j] = 0.0;
                    }
                }
            }
            for r in 0..out {
                for j in 0..out {
                    if !conn.u_enabled(r, j) {
                        self.params[base + k.w_len() + r * out + j] = 0.0;
                    }
                }
            }
        }
    }
}

/// Enabled connections of one cell kind under a mesh, as adjacency lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Connectivity {
    /// For each input row, the enabled output columns of `w`.
    pub w_rows: Vec<Vec<usize>>,
    /// For each recurrent row, the enabled output columns of `u`.
    pub u_rows: Vec<Vec<usize>>,
    w_active: Vec<usize>,
    u_active: Vec<usize>,
}

impl Connectivity {
    pub fn new(kind: CellKind, mesh: &Mesh) -> Self {
        let (w_rows, u_rows): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match kind {
            CellKind::M1 => {
                let rows: Vec<Vec<usize>> = mesh
                    .m1
                    .iter()
                    .map(|r| (0..HIDDEN).filter(|&j| r[j]).collect())
                    .collect();
                (rows.clone(), rows)
            }
            CellKind::M2 => (mesh.m2.iter().map(|&b| if b { vec![0] } else { Vec::new() }).collect(), vec![vec![0]]),
        };
        let active = |rows: &[Vec<usize>]| (0..rows.len()).filter(|&r| !rows[r].is_empty()).collect();
        Self { w_active: active(&w_rows), u_active: active(&u_rows), w_rows, u_rows }
    }

    pub fn w_enabled(&self, i: usize, j: usize) -> bool {
        self.w_rows[i].contains(&j)
    }

    pub fn u_enabled(&self, r: usize, j: usize) -> bool {
        self.u_rows[r].contains(&j)
    }
}

/// Activations of one cell at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    /// `sigmoid(c)`, kept for the backward pass.
    pub sc: Vec<f64>,
}

impl CellState {
    pub fn zeros(n: usize) -> Self {
        Self { a: vec![0.0; n], c: vec![0.0; n], g: vec![0.0; n], i: vec![0.0; n], f: vec![0.0; n], o: vec![0.0; n], sc: vec![0.0; n] }
    }

    fn gate_mut(&mut self, g: usize) -> &mut [f64] {
        match g {
            0 => &mut self.g,
            1 => &mut self.i,
            2 => &mut self.f,
            _ => &mut self.o,
        }
    }
}

/// One forward step of a cell. Weights the mesh disables are ignored, exactly
/// as if they were zero.
pub fn cell_forward(cell: &Cell, x: &[f64], a_prev: &[f64], c_prev: &[f64], mesh: &Mesh) -> Result<CellState, LstmError> {
    let k = cell.kind;
    for (len, want) in [(x.len(), k.in_dim()), (a_prev.len(), k.out_dim()), (c_prev.len(), k.out_dim())] {
        if len != want {
            return Err(LstmError::DimensionMismatch { expected: want, found: len });
        }
    }
    let conn = Connectivity::new(k, mesh);
    let mut st = CellState::zeros(k.out_dim());
    forward_raw(k, &cell.params, &conn, x, a_prev, c_prev, &mut st);
    Ok(st)
}

/// `z[g][j] += v * m[g][r][j]` for each gate and every enabled column of row `r`.
#[inline]
fn spread(z: &mut [[f64; HIDDEN]; 4], params: &[f64], offset: usize, gl: usize, out: usize, cols: &[usize], v: f64) {
    for (g, zg) in z.iter_mut().enumerate() {
        let row = &params[g * gl + offset..g * gl + offset + out];
        if cols.len() == out {
            for (zj, w) in zg[..out].iter_mut().zip(row) {
                *zj += v * w;
            }
        } else {
            for &j in cols {
                zg[j] += v * row[j];
            }
        }
    }
}

/// Forward step over a raw parameter slice; `st` is overwritten.
pub(crate) fn forward_raw(
    kind: CellKind,
    params: &[f64],
    conn: &Connectivity,
    x: &[f64],
    a_prev: &[f64],
    c_prev: &[f64],
    st: &mut CellState,
) {
    let out = kind.out_dim();
    let gl = kind.gate_len();
    let (wl, ul) = (kind.w_len(), kind.u_len());
    let mut z = [[0.0; HIDDEN]; 4];
    for (g, zg) in z.iter_mut().enumerate() {
        zg[..out].copy_from_slice(&params[g * gl + wl + ul..(g + 1) * gl]);
    }
    for &i in &conn.w_active {
        if x[i] != 0.0 {
            spread(&mut z, params, i * out, gl, out, &conn.w_rows[i], x[i]);
        }
    }
    for &r in &conn.u_active {
        if a_prev[r] != 0.0 {
            spread(&mut z, params, wl + r * out, gl, out, &conn.u_rows[r], a_prev[r]);
        }
    }
    for (g, zg) in z.iter().enumerate() {
        for (dst, v) in st.gate_mut(g).iter_mut().zip(&zg[..out]) {
            *dst = sigmoid(*v);
        }
    }
    for j in 0..out {
        st.c[j] = st.f[j] * c_prev[j] + st.i[j] * st.g[j];
        st.sc[j] = sigmoid(st.c[j]);
        st.a[j] = st.o[j] * st.sc[j];
    }
}

/// Where a backward pass sends parameter gradients.
pub(crate) enum Sink<'a> {
    /// Add gradients into `grad`, which has the layout of `params`.
    Accumulate { params: &'a [f64], grad: &'a mut [f64] },
    /// Apply `p -= lr * gradient` in place. Each parameter is used by one cell
    /// only, so updating it right after that cell's backward step is the same
    /// as updating after the whole pass.
    Step { params: &'a mut [f64], lr: f64 },
}

impl Sink<'_> {
    pub(crate) fn sub(&mut self, range: std::ops::Range<usize>) -> Sink<'_> {
        match self {
            Sink::Accumulate { params, grad } => Sink::Accumulate { params: &params[range.clone()], grad: &mut grad[range] },
            Sink::Step { params, lr } => Sink::Step { params: &mut params[range], lr: *lr },
        }
    }

    pub(crate) fn param(&self, k: usize) -> f64 {
        match self {
            Sink::Accumulate { params, .. } => params[k],
            Sink::Step { params, .. } => params[k],
        }
    }

    /// Reads parameter `k`, then applies gradient `d` to it.
    pub(crate) fn apply(&mut self, k: usize, d: f64) {
        match self {
            Sink::Accumulate { grad, .. } => grad[k] += d,
            Sink::Step { params, lr } => params[k] -= *lr * d,
        }
    }
}

/// Gradients of row `r` (at `offset` within each gate) for input value `v`;
/// returns `sum_g sum_j m[g][r][j] * dz[g][j]`, the gradient for `v`, using
/// the weights as they were before any update.
#[inline]
fn gather(dz: &[[f64; HIDDEN]; 4], sink: &mut Sink<'_>, offset: usize, gl: usize, out: usize, cols: &[usize], v: f64) -> f64 {
    let mut acc = 0.0;
    match sink {
        Sink::Accumulate { params, grad } => {
            for (g, dzg) in dz.iter().enumerate() {
                let base = g * gl + offset;
                let row = &params[base..base + out];
                let grow = &mut grad[base..base + out];
                if cols.len() == out {
                    for j in 0..out {
                        grow[j] += v * dzg[j];
                        acc += row[j] * dzg[j];
                    }
                } else {
                    for &j in cols {
                        grow[j] += v * dzg[j];
                        acc += row[j] * dzg[j];
                    }
                }
            }
        }
        Sink::Step { params, lr } => {
            let s = *lr * v;
            for (g, dzg) in dz.iter().enumerate() {
                let base = g * gl + offset;
                let row = &mut params[base..base + out];
                if cols.len() == out {
                    for j in 0..out {
                        acc += row[j] * dzg[j];
                        row[j] -= s * dzg[j];
                    }
                } else {
                    for &j in cols {
                        acc += row[j] * dzg[j];
                        row[j] -= s * dzg[j];
                    }
                }
            }
        }
    }
    acc
}

/// Reverse-mode step for one cell.
///
/// `da` is the loss gradient with respect to this step's output `a` and
/// `dc_next` the gradient flowing into `c` from the following step. Parameter
/// gradients go to `sink` (same layout as the cell's parameters); `dx`, if
/// given, accumulates the input gradient; `da_prev` and `dc_prev` are
/// overwritten with the gradients for the previous step's `a` and `c`.
/// Returns false if any pre-activation gradient is not finite.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_raw(
    kind: CellKind,
    mut sink: Sink<'_>,
    conn: &Connectivity,
    x: &[f64],
    a_prev: &[f64],
    c_prev: &[f64],
    st: &CellState,
    da: &[f64],
    dc_next: &[f64],
    mut dx: Option<&mut [f64]>,
    da_prev: &mut [f64],
    dc_prev: &mut [f64],
    dz: &mut [[f64; HIDDEN]; 4],
) -> bool {
    let out = kind.out_dim();
    let gl = kind.gate_len();
    let (wl, ul) = (kind.w_len(), kind.u_len());
    let mut finite = true;
    for j in 0..out {
        let s = st.sc[j];
        let d_o = da[j] * s;
        let dc = da[j] * st.o[j] * s * (1.0 - s) + dc_next[j];
        let (g, i, f, o) = (st.g[j], st.i[j], st.f[j], st.o[j]);
        dz[0][j] = dc * i * g * (1.0 - g);
        dz[1][j] = dc * g * i * (1.0 - i);
        dz[2][j] = dc * c_prev[j] * f * (1.0 - f);
        dz[3][j] = d_o * o * (1.0 - o);
        dc_prev[j] = dc * f;
        finite &= (dz[0][j] + dz[1][j] + dz[2][j] + dz[3][j]).is_finite();
    }
    for &i in &conn.w_active {
        if x[i] == 0.0 && dx.is_none() {
            continue;
        }
        let acc = gather(dz, &mut sink, i * out, gl, out, &conn.w_rows[i], x[i]);
        if let Some(dx) = dx.as_deref_mut() {
            dx[i] += acc;
        }
    }
    da_prev.iter_mut().for_each(|v| *v = 0.0);
    for &r in &conn.u_active {
        da_prev[r] = gather(dz, &mut sink, wl + r * out, gl, out, &conn.u_rows[r], a_prev[r]);
    }
    for (g, dzg) in dz.iter().enumerate() {
        let base = g * gl + wl + ul;
        for (j, &d) in dzg[..out].iter().enumerate() {
            sink.apply(base + j, d);
        }
    }
    finite
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // e^-40 is below half an ulp of 1.0, so the f64 result rounds to 1
        let s = sigmoid(40.0);
        assert!(1.0 - s < 1e-17 && s <= 1.0);
        for a in [-3.0, -0.25, 0.7, 12.0] {
            assert!((sigmoid(-a) - (1.0 - sigmoid(a))).abs() < 1e-15);
        }
        assert!(sigmoid(-1.0) < sigmoid(1.0));
    }

    #[test]
    fn zero_weights_closed_form() {
        for kind in [CellKind::M1, CellKind::M2] {
            let cell = Cell::zeros(kind);
            let n = kind.out_dim();
            let st = cell_forward(&cell, &[0.3; N_INPUTS], &vec![0.2; n], &vec![0.0; n], &Mesh::full()).unwrap();
            for j in 0..n {
                assert_eq!(st.g[j], 0.5);
                assert_eq!(st.i[j], 0.5);
                assert_eq!(st.f[j], 0.5);
                assert_eq!(st.o[j], 0.5);
                assert_eq!(st.c[j], 0.25);
                assert_eq!(st.a[j], 0.5 * sigmoid(0.25));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let cell = Cell::zeros(CellKind::M2);
        let err = cell_forward(&cell, &[0.0; 3], &[0.0], &[0.0], &Mesh::full()).unwrap_err();
        assert!(matches!(err, LstmError::DimensionMismatch { expected: 16, found: 3 }));
        assert!(cell_forward(&cell, &[0.0; 16], &[0.0; 16], &[0.0], &Mesh::full()).is_err());
    }

    #[test]
    fn single_edge_isolates_one_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = Cell::random(CellKind::M1, 0.5, &mut rng);
        let mut mesh = Mesh::empty();
        mesh.mark(4, 9);
        let x: Vec<f64> = (0..N_INPUTS).map(|_| rng.random::<f64>()).collect();
        let a_prev: Vec<f64> = (0..HIDDEN).map(|_| rng.random::<f64>()).collect();
        let c_prev = vec![0.1; HIDDEN];
        let base = cell_forward(&cell, &x, &a_prev, &c_prev, &mesh).unwrap();
        for k in (0..N_INPUTS).filter(|&k| k != 4) {
            let mut xp = x.clone();
            xp[k] += 0.37;
            let st = cell_forward(&cell, &xp, &a_prev, &c_prev, &mesh).unwrap();
            for j in 0..HIDDEN {
                assert!((st.a[j] - base.a[j]).abs() <= 1e-15);
            }
        }
        let mut xp = x.clone();
        xp[4] += 0.37;
        let st = cell_forward(&cell, &xp, &a_prev, &c_prev, &mesh).unwrap();
        assert!((st.a[9] - base.a[9]).abs() > 1e-6);
    }

    #[test]
    fn masking_equals_zeroing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [CellKind::M1, CellKind::M2] {
            let cell = Cell::random(kind, 0.3, &mut rng);
            let mut mesh = Mesh::empty();
            for _ in 0..40 {
                mesh.mark(rng.random_range(0..16), rng.random_range(0..16));
            }
            let mut zeroed = cell.clone();
            zeroed.apply_mask(&mesh);
            let n = kind.out_dim();
            let x: Vec<f64> = (0..N_INPUTS).map(|_| rng.random::<f64>()).collect();
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let masked = cell_forward(&cell, &x, &a, &c, &mesh).unwrap();
            let full = cell_forward(&zeroed, &x, &a, &c, &Mesh::full()).unwrap();
            assert_eq!(masked, full);
        }
    }
}
