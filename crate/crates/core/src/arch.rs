//! The extended architecture matrix 𝛂 = [α; α_F] and the cell topology it
//! parameterizes.
//!
//! Learnable rows (one per candidate connection) hold logits over the
//! candidate operation columns; appended fixed rows are one-hot over
//! fixed-operation columns and never change after construction. Zero
//! padding columns exist only to square the matrix: the valid mask keeps
//! them out of every softmax.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

pub const N_INTERMEDIATE: usize = 4;
pub const N_CELL_EDGES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// One candidate connection inside a cell: `source` feeds intermediate
/// node `dest`. Sources 0 and 1 are the two cell inputs; source k+2 is
/// intermediate node k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellEdge {
    pub index: usize,
    pub dest: usize,
    pub source: usize,
}

/// Seven-node cell: two inputs, four intermediate nodes, one output that
/// concatenates the intermediates channel-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
}

impl CellSpec {
    pub fn new(kind: CellKind) -> Self {
        CellSpec { kind }
    }

    /// All candidate connections in matrix row order: node k has k+2
    /// incoming edges (2+3+4+5 = 14).
    pub fn edges(&self) -> Vec<CellEdge> {
        let mut out = Vec::with_capacity(N_CELL_EDGES);
        let mut index = 0;
        for dest in 0..N_INTERMEDIATE {
            for source in 0..dest + 2 {
                out.push(CellEdge { index, dest, source });
                index += 1;
            }
        }
        out
    }
}

/// A fixed (hand-designed) connection appended below the learnable block;
/// each names exactly one operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedConnection {
    pub op: String,
}

impl FixedConnection {
    pub fn new(op: impl Into<String>) -> Self {
        FixedConnection { op: op.into() }
    }
}

/// The squeeze-excitation attention chain as fixed rows: 2 nodes, 3
/// connections (squeeze → excitation → scale), 3 operations.
pub fn attention_fixed_spec() -> Vec<FixedConnection> {
    vec![
        FixedConnection::new("global_avgpool"),
        FixedConnection::new("fc_excitation"),
        FixedConnection::new("channel_scale"),
    ]
}

/// N′ = N + |O(α_F) \ O(α)|.
pub fn extended_dims(n: usize, ops_learnable: &[String], ops_fixed: &[String]) -> Result<usize> {
    let mut learn: Vec<&str> = ops_learnable.iter().map(|s| s.as_str()).collect();
    learn.sort_unstable();
    learn.dedup();
    if learn.len() != n {
        return Err(Error::contract(format!(
            "extended_dims: N = {n} but learnable op set has {} distinct entries",
            learn.len()
        )));
    }
    let mut extra: Vec<&str> = ops_fixed
        .iter()
        .map(|s| s.as_str())
        .filter(|op| !learn.contains(op))
        .collect();
    extra.sort_unstable();
    extra.dedup();
    Ok(n + extra.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    m_learn: usize,
    n_learn: usize,
    column_ops: Vec<String>,
    valid: Vec<bool>,
    learnable: Vec<bool>,
}

/// Build the extended matrix for one cell: `m_learn` learnable connection
/// rows over `learnable_ops` columns (initialized to 1e-3 · standard
/// normal noise), plus one appended one-hot row per fixed connection.
pub fn build_arch_matrix(
    cell: &CellSpec,
    learnable_ops: &[String],
    fixed: &[FixedConnection],
    rng: &mut ChaCha8Rng,
) -> Result<ArchMatrix> {
    let m_learn = cell.edges().len();
    ArchMatrix::with_dims(m_learn, learnable_ops, fixed, rng)
}

impl ArchMatrix {
    /// As `build_arch_matrix` but with an explicit learnable row count
    /// (toy problems and tests use matrices smaller than a full cell).
    pub fn with_dims(
        m_learn: usize,
        learnable_ops: &[String],
        fixed: &[FixedConnection],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n_learn = learnable_ops.len();
        if n_learn == 0 || m_learn == 0 {
            return Err(Error::contract("arch matrix needs at least one learnable row and op"));
        }
        let fixed_ops: Vec<String> = fixed.iter().map(|f| f.op.clone()).collect();
        let cols = extended_dims(n_learn, learnable_ops, &fixed_ops)?;
        let mut column_ops: Vec<String> = learnable_ops.to_vec();
        for f in &fixed_ops {
            if !column_ops.contains(f) {
                column_ops.push(f.clone());
            }
        }
        debug_assert_eq!(column_ops.len(), cols);
        let rows = m_learn + fixed.len();
        let mut values = vec![0.0; rows * cols];
        let mut valid = vec![false; rows * cols];
        let mut learnable = vec![false; rows * cols];
        for r in 0..m_learn {
            for c in 0..n_learn {
                values[r * cols + c] = 1e-3 * normal(rng);
                valid[r * cols + c] = true;
                learnable[r * cols + c] = true;
            }
        }
        for (k, conn) in fixed.iter().enumerate() {
            let col = column_ops
                .iter()
                .position(|op| *op == conn.op)
                .ok_or_else(|| {
                    Error::contract(format!(
                        "fixed connection names op {:?} absent from column ops {:?}",
                        conn.op, column_ops
                    ))
                })?;
            let r = m_learn + k;
            values[r * cols + col] = 1.0;
            valid[r * cols + col] = true;
        }
        Ok(ArchMatrix { values, rows, cols, m_learn, n_learn, column_ops, valid, learnable })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn m_learn(&self) -> usize {
        self.m_learn
    }

    pub fn n_learn(&self) -> usize {
        self.n_learn
    }

    pub fn column_ops(&self) -> &[String] {
        &self.column_ops
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_learnable(&self, row: usize, col: usize) -> bool {
        self.learnable[row * self.cols + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.cols + col]
    }

    /// Logits of one learnable row (exactly the N valid columns).
    pub fn learnable_row_logits(&self, row: usize) -> Result<&[f64]> {
        if row >= self.m_learn {
            return Err(Error::contract(format!(
                "row {row} is not learnable (M = {})",
                self.m_learn
            )));
        }
        let base = row * self.cols;
        Ok(&self.values[base..base + self.n_learn])
    }

    /// Softmax over the valid columns of a learnable row.
    pub fn row_softmax(&self, row: usize) -> Result<Vec<f64>> {
        let logits = self.learnable_row_logits(row)?;
        if logits.is_empty() {
            return Err(Error::contract("row has no valid columns"));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }

    /// Mean softmax entropy over all learnable rows (nats).
    pub fn mean_row_entropy(&self) -> f64 {
        let mut total = 0.0;
        for r in 0..self.m_learn {
            let p = self.row_softmax(r).expect("learnable row");
            total -= p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        }
        total / self.m_learn as f64
    }

    /// Mutable iterator over exactly the learnable entries, in row-major
    /// order. Fixed and padding entries are structurally unreachable here.
    pub fn learnable_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let cols = self.cols;
        let n = self.n_learn;
        let m = self.m_learn;
        self.values
            .iter_mut()
            .enumerate()
            .filter(move |(i, _)| i / cols < m && i % cols < n)
            .map(|(_, v)| v)
    }

    /// Indices (row, col) of learnable entries in the same order as
    /// `learnable_values_mut`.
    pub fn learnable_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.m_learn).flat_map(move |r| (0..self.n_learn).map(move |c| (r, c)))
    }

    pub fn learnable_len(&self) -> usize {
        self.m_learn * self.n_learn
    }

    /// Operation selected by each fixed row, in row order.
    pub fn fixed_row_ops(&self) -> Vec<&str> {
        (self.m_learn..self.rows)
            .map(|r| {
                let col = (0..self.cols)
                    .find(|&c| self.values[r * self.cols + c] != 0.0)
                    .expect("fixed rows are one-hot");
                self.column_ops[col].as_str()
            })
            .collect()
    }

    /// Row-major CSV with op-name header; first column tags the row kind.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_kind");
        for op in &self.column_ops {
            out.push(',');
            out.push_str(op);
        }
        out.push('\n');
        for r in 0..self.rows {
            out.push_str(if r < self.m_learn { "learnable" } else { "fixed" });
            for c in 0..self.cols {
                out.push(',');
                out.push_str(&format!("{:.17e}", self.values[r * self.cols + c]));
            }
            out.push('\n');
        }
        out
    }

    /// Rebuild from `to_csv` output. `n_learn` tells how many columns of
    /// the learnable rows carry logits (not recoverable from values alone).
    pub fn from_csv(text: &str, n_learn: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let column_ops: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
        let cols = column_ops.len();
        if n_learn == 0 || n_learn > cols {
            return Err(Error::Format(format!("n_learn {n_learn} out of range for {cols} columns")));
        }
        let mut values = Vec::new();
        let mut kinds = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let kind = parts.next().unwrap_or("");
            if kind != "learnable" && kind != "fixed" {
                return Err(Error::Format(format!("line {}: bad row kind {kind:?}", i + 2)));
            }
            kinds.push(kind == "learnable");
            let row: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", i + 2))))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(Error::Format(format!(
                    "line {}: {} values for {} columns",
                    i + 2,
                    row.len(),
                    cols
                )));
            }
            values.extend(row);
        }
        let rows = kinds.len();
        let m_learn = kinds.iter().filter(|&&k| k).count();
        if kinds[..m_learn].iter().any(|&k| !k) {
            return Err(Error::Format("learnable rows must precede fixed rows".into()));
        }
        let mut valid = vec![false; rows * cols];
        let mut learnable = vec![false; rows * cols];
        for r in 0..rows {
            if r < m_learn {
                for c in 0..n_learn {
                    valid[r * cols + c] = true;
                    learnable[r * cols + c] = true;
                }
            } else {
                for c in 0..cols {
                    if values[r * cols + c] != 0.0 {
                        valid[r * cols + c] = true;
                    }
                }
            }
        }
        Ok(ArchMatrix { values, rows, cols, m_learn, n_learn, column_ops, valid, learnable })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::CANDIDATE_CATALOG;
    use crate::rng::derive_rng;

    pub(crate) fn catalog_names() -> Vec<String> {
        CANDIDATE_CATALOG.iter().map(|o| o.name().to_string()).collect()
    }

    #[test]
    fn cell_has_fourteen_edges_with_triangular_fan_in() {
        let spec = CellSpec::new(CellKind::Normal);
        let edges = spec.edges();
        assert_eq!(edges.len(), 14);
        for k in 0..4 {
            let incoming: Vec<_> = edges.iter().filter(|e| e.dest == k).collect();
            assert_eq!(incoming.len(), k + 2);
            for e in incoming {
                assert!(e.source < e.dest + 2);
            }
        }
    }

    #[test]
    fn extended_dims_attention_case() {
        let fixed: Vec<String> = attention_fixed_spec().iter().map(|f| f.op.clone()).collect();
        assert_eq!(extended_dims(8, &catalog_names(), &fixed).unwrap(), 11);
    }

    #[test]
    fn extended_dims_subset_case() {
        let names = catalog_names();
        assert_eq!(extended_dims(8, &names, &names[..3].to_vec()).unwrap(), 8);
        // one op shared, one new
        let fixed = vec!["skip_connect".to_string(), "global_avgpool".to_string()];
        assert_eq!(extended_dims(8, &names, &fixed).unwrap(), 9);
    }

    #[test]
    fn extended_dims_monotone_in_fixed_ops() {
        let names = catalog_names();
        let mut fixed: Vec<String> = Vec::new();
        let mut prev = extended_dims(8, &names, &fixed).unwrap();
        for op in ["a", "skip_connect", "b", "zero", "c"] {
            fixed.push(op.to_string());
            let next = extended_dims(8, &names, &fixed).unwrap();
            assert!(next >= prev);
            assert!(next >= 8 && next <= 8 + fixed.len());
            prev = next;
        }
    }

    #[test]
    fn attention_matrix_is_17_by_11() {
        let mut rng = derive_rng(1, "arch", 0);
        let m = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &attention_fixed_spec(),
            &mut rng,
        )
        .unwrap();
        assert_eq!((m.rows(), m.cols()), (17, 11));
        assert_eq!((m.m_learn(), m.n_learn()), (14, 8));
        // learnable sub-block is 14x8
        for (r, c) in m.learnable_indices() {
            assert!(r < 14 && c < 8);
        }
        assert_eq!(m.fixed_row_ops(), vec!["global_avgpool", "fc_excitation", "channel_scale"]);
        // fixed rows one-hot at weight exactly 1.0
        for r in 14..17 {
            let nonzero: Vec<f64> =
                (0..11).map(|c| m.get(r, c)).filter(|&v| v != 0.0).collect();
            assert_eq!(nonzero, vec![1.0]);
        }
        // padding columns of learnable rows are invalid and zero
        for r in 0..14 {
            for c in 8..11 {
                assert!(!m.is_valid(r, c));
                assert_eq!(m.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn empty_fixed_spec_gives_plain_matrix() {
        let mut rng = derive_rng(2, "arch", 0);
        let m = build_arch_matrix(&CellSpec::new(CellKind::Reduction), &catalog_names(), &[], &mut rng)
            .unwrap();
        assert_eq!((m.rows(), m.cols()), (14, 8));
    }

    #[test]
    fn single_known_op_connection_gives_15_by_8() {
        let mut rng = derive_rng(3, "arch", 0);
        let m = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &[FixedConnection::new("skip_connect")],
            &mut rng,
        )
        .unwrap();
        assert_eq!((m.rows(), m.cols()), (15, 8));
        assert_eq!(m.fixed_row_ops(), vec!["skip_connect"]);
    }

    #[test]
    fn row_softmax_is_probability_over_n() {
        let mut rng = derive_rng(4, "arch", 0);
        let m = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &attention_fixed_spec(),
            &mut rng,
        )
        .unwrap();
        for r in 0..m.m_learn() {
            let p = m.row_softmax(r).unwrap();
            assert_eq!(p.len(), 8);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
        }
        assert!(m.row_softmax(14).is_err());
    }

    #[test]
    fn learnable_values_mut_cannot_reach_fixed_rows() {
        let mut rng = derive_rng(5, "arch", 0);
        let mut m = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &attention_fixed_spec(),
            &mut rng,
        )
        .unwrap();
        let before: Vec<f64> =
            (14..17).flat_map(|r| (0..11).map(move |c| (r, c))).map(|(r, c)| m.get(r, c)).collect();
        for v in m.learnable_values_mut() {
            *v = 99.0;
        }
        let after: Vec<f64> =
            (14..17).flat_map(|r| (0..11).map(move |c| (r, c))).map(|(r, c)| m.get(r, c)).collect();
        assert_eq!(before, after);
        // and padding columns too
        for r in 0..14 {
            for c in 8..11 {
                assert_eq!(m.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn csv_roundtrip_preserves_everything() {
        let mut rng = derive_rng(6, "arch", 0);
        let m = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &attention_fixed_spec(),
            &mut rng,
        )
        .unwrap();
        let csv = m.to_csv();
        let back = ArchMatrix::from_csv(&csv, m.n_learn()).unwrap();
        assert_eq!(m, back);
    }
}
