use std::fmt;

use super::{LstmError, HIDDEN, N_INPUTS};

/// Bytes needed for the packed mesh bitmap (16 + 256 + 16 bits).
pub const MESH_BYTES: usize = (N_INPUTS + N_INPUTS * HIDDEN + HIDDEN).div_ceil(8);

/// Binary gate connectivity shared by every gate of every cell.
///
/// `m1[i][j]` enables the connection from input (or previous output) `i` to
/// hidden node `j` in all eight M1 gate matrices; `m2[j]` enables hidden node
/// `j` in the four M2 input matrices.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mesh {
    pub input: [bool; N_INPUTS],
    pub m1: [[bool; HIDDEN]; N_INPUTS],
    pub m2: [bool; HIDDEN],
}

impl Default for Mesh {
    fn default() -> Self {
        Self::empty()
    }
}

impl Mesh {
    pub fn empty() -> Self {
        Self { input: [false; N_INPUTS], m1: [[false; HIDDEN]; N_INPUTS], m2: [false; HIDDEN] }
    }

    /// Fully connected mesh.
    pub fn full() -> Self {
        Self { input: [true; N_INPUTS], m1: [[true; HIDDEN]; N_INPUTS], m2: [true; HIDDEN] }
    }

    /// Marks one ant path: input `i` through hidden node `j`.
    pub fn mark(&mut self, i: usize, j: usize) {
        self.input[i] = true;
        self.m1[i][j] = true;
        self.m2[j] = true;
    }

    pub fn m1_count(&self) -> usize {
        self.m1.iter().flatten().filter(|&&b| b).count()
    }

    pub fn m2_count(&self) -> usize {
        self.m2.iter().filter(|&&b| b).count()
    }

    pub fn input_count(&self) -> usize {
        self.input.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.input_count() == 0 && self.m1_count() == 0 && self.m2_count() == 0
    }

    /// Every m1 edge has its input and hidden node marked.
    pub fn is_valid(&self) -> bool {
        (0..N_INPUTS).all(|i| (0..HIDDEN).all(|j| !self.m1[i][j] || (self.input[i] && self.m2[j])))
    }

    /// Packs the mesh into [`MESH_BYTES`] bytes: input flags, m1 row-major,
    /// then m2, least significant bit first.
    pub fn to_bits(&self) -> [u8; MESH_BYTES] {
        let mut out = [0u8; MESH_BYTES];
        for (k, bit) in self.bit_iter().enumerate() {
            if bit {
                out[k / 8] |= 1 << (k % 8);
            }
        }
        out
    }

    pub fn from_bits(bytes: &[u8]) -> Result<Self, LstmError> {
        if bytes.len() < MESH_BYTES {
            return Err(LstmError::TruncatedFile);
        }
        let bit = |k: usize| bytes[k / 8] & (1 << (k % 8)) != 0;
        let mut mesh = Self::empty();
        for i in 0..N_INPUTS {
            mesh.input[i] = bit(i);
        }
        for i in 0..N_INPUTS {
            for j in 0..HIDDEN {
                mesh.m1[i][j] = bit(N_INPUTS + i * HIDDEN + j);
            }
        }
        for j in 0..HIDDEN {
            mesh.m2[j] = bit(N_INPUTS + N_INPUTS * HIDDEN + j);
        }
        Ok(mesh)
    }

    fn bit_iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.input
            .iter()
            .chain(self.m1.iter().flatten())
            .chain(self.m2.iter())
            .copied()
    }

    /// Parses a whitespace (or `&`) separated 0/1 matrix: 16 rows of m1,
    /// optionally followed by one m2 row. Lines starting with `#` are ignored.
    /// Input flags are derived from the m1 rows; a missing m2 row is derived
    /// from the m1 columns.
    pub fn from_text(text: &str) -> Result<Self, LstmError> {
        let rows: Vec<Vec<bool>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split(|c: char| c.is_whitespace() || c == '&' || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| match t {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(LstmError::InvalidMesh(format!("unexpected token {other:?}"))),
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        if rows.len() != N_INPUTS && rows.len() != N_INPUTS + 1 {
            return Err(LstmError::InvalidMesh(format!("expected {N_INPUTS} or {} rows, got {}", N_INPUTS + 1, rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != HIDDEN) {
            return Err(LstmError::InvalidMesh(format!("expected {HIDDEN} columns, got {}", r.len())));
        }
        let mut mesh = Self::empty();
        for i in 0..N_INPUTS {
            for j in 0..HIDDEN {
                if rows[i][j] {
                    mesh.mark(i, j);
                }
            }
        }
        if let Some(m2) = rows.get(N_INPUTS) {
            for (j, &b) in m2.iter().enumerate() {
                mesh.m2[j] |= b;
            }
        }
        Ok(mesh)
    }

    /// Inverse of [`Mesh::from_text`], always including the m2 row.
    pub fn to_text(&self) -> String {
        let row = |r: &[bool]| r.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        for r in &self.m1 {
            s.push_str(&row(r));
            s.push('\n');
        }
        s.push_str(&row(&self.m2));
        s.push('\n');
        s
    }
}

impl fmt::Debug for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mesh {{ inputs: {}, m1: {}, m2: {} }}", self.input_count(), self.m1_count(), self.m2_count())
    }
}
