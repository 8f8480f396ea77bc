//! Discrete cell descriptions: derivation from a searched architecture
//! matrix, a line-oriented text format, and Graphviz rendering.

use crate::arch::{ArchMatrix, CellKind, N_INTERMEDIATE};
use crate::error::{Error, Result};
use crate::ops::OpName;

/// One chosen connection: `op` applied to `source` (0 and 1 are the cell
/// inputs; k+2 is intermediate node k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenotypeEntry {
    pub op: OpName,
    pub source: usize,
}

/// Discretized cell pair. Each intermediate node keeps exactly two
/// incoming operations from distinct, strictly earlier nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub normal: Vec<[GenotypeEntry; 2]>,
    pub reduce: Vec<[GenotypeEntry; 2]>,
    pub concat_nodes: Vec<usize>,
}

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &[[GenotypeEntry; 2]] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.len() != N_INTERMEDIATE {
                return Err(Error::Validation(format!(
                    "{kind} cell has {} nodes, expected {N_INTERMEDIATE}",
                    cell.len()
                )));
            }
            for (node, slots) in cell.iter().enumerate() {
                for entry in slots {
                    if entry.op == OpName::Zero {
                        return Err(Error::Validation(format!(
                            "{kind} node {node}: the zero op cannot appear in a genotype"
                        )));
                    }
                    if entry.source == node + 2 {
                        return Err(Error::Validation(format!(
                            "{kind} node {node}: self-edge (source {})",
                            entry.source
                        )));
                    }
                    if entry.source > node + 2 {
                        return Err(Error::Validation(format!(
                            "{kind} node {node}: forward reference to source {}",
                            entry.source
                        )));
                    }
                }
                if slots[0].source == slots[1].source {
                    return Err(Error::Validation(format!(
                        "{kind} node {node}: both slots source node {}",
                        slots[0].source
                    )));
                }
            }
        }
        for &k in &self.concat_nodes {
            if k >= N_INTERMEDIATE {
                return Err(Error::Validation(format!("concat node {k} out of range")));
            }
        }
        Ok(())
    }
}

fn edge_row(node: usize, source: usize) -> usize {
    // node k's incoming edges start at row 2+3+...+(k+1) = k(k+3)/2
    node * (node + 3) / 2 + source
}

/// Discretize one matrix: per intermediate node keep the two incoming
/// edges whose strongest non-zero op has maximal softmax weight, and on
/// each kept edge keep that op. Ties break toward the lower edge index,
/// then the earlier catalog column.
fn derive_cell(arch: &ArchMatrix) -> Result<Vec<[GenotypeEntry; 2]>> {
    let catalog: Vec<OpName> = arch.column_ops()[..arch.n_learn()]
        .iter()
        .map(|s| OpName::parse(s))
        .collect::<Result<_>>()?;
    if catalog.iter().all(|&op| op == OpName::Zero) {
        return Err(Error::contract("catalog contains only the zero op"));
    }
    let mut cells = Vec::with_capacity(N_INTERMEDIATE);
    for node in 0..N_INTERMEDIATE {
        // (strength, source, op) per incoming edge
        let mut ranked: Vec<(f64, usize, OpName)> = Vec::new();
        for source in 0..node + 2 {
            let weights = arch.row_softmax(edge_row(node, source))?;
            let mut best: Option<(f64, OpName)> = None;
            for (j, &op) in catalog.iter().enumerate() {
                if op == OpName::Zero {
                    continue;
                }
                // strict > keeps the earliest catalog column on ties
                if best.map_or(true, |(w, _)| weights[j] > w) {
                    best = Some((weights[j], op));
                }
            }
            let (strength, op) = best.expect("non-zero op exists");
            ranked.push((strength, source, op));
        }
        // stable sort keeps lower edge index first among equal strengths
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite weights"));
        let mut picked = [
            GenotypeEntry { op: ranked[0].2, source: ranked[0].1 },
            GenotypeEntry { op: ranked[1].2, source: ranked[1].1 },
        ];
        // report slots in source order for a canonical form
        if picked[0].source > picked[1].source {
            picked.swap(0, 1);
        }
        cells.push(picked);
    }
    Ok(cells)
}

pub fn derive_genotype(arch_normal: &ArchMatrix, arch_reduce: &ArchMatrix) -> Result<Genotype> {
    let g = Genotype {
        normal: derive_cell(arch_normal)?,
        reduce: derive_cell(arch_reduce)?,
        concat_nodes: (0..N_INTERMEDIATE).collect(),
    };
    g.validate()?;
    Ok(g)
}

/// One line per (cell kind, node, slot):
/// `normal n0 s1 <- 1 sep_conv_3x3`.
pub fn serialize_genotype(g: &Genotype) -> String {
    let mut out = String::new();
    for (kind, cell) in [("normal", &g.normal), ("reduce", &g.reduce)] {
        for (node, slots) in cell.iter().enumerate() {
            for (slot, entry) in slots.iter().enumerate() {
                out.push_str(&format!(
                    "{kind} n{node} s{slot} <- {} {}\n",
                    entry.source,
                    entry.op.name()
                ));
            }
        }
    }
    out
}

struct LineCursor<'a> {
    line: &'a str,
    lineno: usize,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.line.len() && self.line.as_bytes()[self.pos] == b' ' {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Option<(&'a str, usize)> {
        self.skip_ws();
        if self.pos >= self.line.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.line.len() && self.line.as_bytes()[self.pos] != b' ' {
            self.pos += 1;
        }
        Some((&self.line[start..self.pos], start + 1))
    }

    fn err(&self, col: usize, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.lineno, col, msg: msg.into() }
    }
}

/// Parse the text format back into a genotype. Malformed text yields a
/// parse error with line/column; well-formed text violating a structural
/// invariant yields a validation error naming the line.
pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let mut slots: Vec<Vec<Option<(GenotypeEntry, usize)>>> =
        vec![vec![None; 2 * N_INTERMEDIATE]; 2];
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let mut cur = LineCursor { line: raw, lineno, pos: 0 };
        let (kind_tok, kind_col) = cur.token().expect("nonempty");
        let kind = match kind_tok {
            "normal" => 0usize,
            "reduce" => 1,
            other => return Err(cur.err(kind_col, format!("expected normal|reduce, got {other:?}"))),
        };
        let (node_tok, node_col) =
            cur.token().ok_or_else(|| cur.err(raw.len() + 1, "missing node field"))?;
        let node: usize = node_tok
            .strip_prefix('n')
            .and_then(|s| s.parse().ok())
            .filter(|&n| n < N_INTERMEDIATE)
            .ok_or_else(|| cur.err(node_col, format!("expected n0..n3, got {node_tok:?}")))?;
        let (slot_tok, slot_col) =
            cur.token().ok_or_else(|| cur.err(raw.len() + 1, "missing slot field"))?;
        let slot: usize = slot_tok
            .strip_prefix('s')
            .and_then(|s| s.parse().ok())
            .filter(|&s| s < 2)
            .ok_or_else(|| cur.err(slot_col, format!("expected s0|s1, got {slot_tok:?}")))?;
        let (arrow_tok, arrow_col) =
            cur.token().ok_or_else(|| cur.err(raw.len() + 1, "missing `<-`"))?;
        if arrow_tok != "<-" {
            return Err(cur.err(arrow_col, format!("expected `<-`, got {arrow_tok:?}")));
        }
        let (src_tok, src_col) =
            cur.token().ok_or_else(|| cur.err(raw.len() + 1, "missing source node"))?;
        let source: usize = src_tok
            .parse()
            .map_err(|_| cur.err(src_col, format!("expected source index, got {src_tok:?}")))?;
        let (op_tok, op_col) =
            cur.token().ok_or_else(|| cur.err(raw.len() + 1, "missing op name"))?;
        let op = OpName::parse(op_tok).map_err(|_| cur.err(op_col, format!("unknown op {op_tok:?}")))?;
        if let Some((extra, extra_col)) = cur.token() {
            return Err(cur.err(extra_col, format!("unexpected trailing token {extra:?}")));
        }
        let cell_slot = &mut slots[kind][node * 2 + slot];
        if cell_slot.is_some() {
            return Err(Error::Validation(format!(
                "line {lineno}: duplicate entry for {} n{node} s{slot}",
                if kind == 0 { "normal" } else { "reduce" }
            )));
        }
        *cell_slot = Some((GenotypeEntry { op, source }, lineno));
    }

    let mut cells: Vec<Vec<[GenotypeEntry; 2]>> = Vec::new();
    for (kind_idx, kind_name) in ["normal", "reduce"].iter().enumerate() {
        let mut cell = Vec::with_capacity(N_INTERMEDIATE);
        for node in 0..N_INTERMEDIATE {
            let mut pair = [GenotypeEntry { op: OpName::SkipConnect, source: 0 }; 2];
            for slot in 0..2 {
                let Some((entry, lineno)) = slots[kind_idx][node * 2 + slot] else {
                    return Err(Error::Validation(format!(
                        "line {last_line}: missing entry for {kind_name} n{node} s{slot}"
                    )));
                };
                if entry.op == OpName::Zero {
                    return Err(Error::Validation(format!(
                        "line {lineno}: the zero op cannot appear in a genotype"
                    )));
                }
                if entry.source == node + 2 {
                    return Err(Error::Validation(format!(
                        "line {lineno}: self-edge: {kind_name} n{node} sources itself"
                    )));
                }
                if entry.source > node + 2 {
                    return Err(Error::Validation(format!(
                        "line {lineno}: forward reference: {kind_name} n{node} sources node {}",
                        entry.source
                    )));
                }
                pair[slot] = entry;
            }
            if pair[0].source == pair[1].source {
                return Err(Error::Validation(format!(
                    "{kind_name} n{node}: both slots source node {}",
                    pair[0].source
                )));
            }
            cell.push(pair);
        }
        cells.push(cell);
    }
    let reduce = cells.pop().expect("two cells");
    let normal = cells.pop().expect("two cells");
    Ok(Genotype { normal, reduce, concat_nodes: (0..N_INTERMEDIATE).collect() })
}

fn source_label(source: usize) -> String {
    match source {
        0 => "P1".to_string(),
        1 => "P2".to_string(),
        k => format!("{}", k - 2),
    }
}

/// Graphviz digraph for one cell kind: inputs P1/P2 and the output as
/// boxes, intermediate nodes 0–3 as ellipses, op-labeled edges, and
/// unlabeled concat edges into Out.
pub fn genotype_to_dot(g: &Genotype, kind: CellKind) -> String {
    let (name, cell) = match kind {
        CellKind::Normal => ("normal_cell", &g.normal),
        CellKind::Reduction => ("reduction_cell", &g.reduce),
    };
    let mut out = String::new();
    out.push_str(&format!("digraph {name} {{\n"));
    out.push_str("  rankdir=LR;\n");
    for n in ["P1", "P2", "Out"] {
        out.push_str(&format!("  \"{n}\" [shape=box];\n"));
    }
    for k in 0..N_INTERMEDIATE {
        out.push_str(&format!("  \"{k}\" [shape=ellipse];\n"));
    }
    for (node, slots) in cell.iter().enumerate() {
        for entry in slots {
            out.push_str(&format!(
                "  \"{}\" -> \"{node}\" [label=\"{}\"];\n",
                source_label(entry.source),
                entry.op.name()
            ));
        }
    }
    for &k in &g.concat_nodes {
        out.push_str(&format!("  \"{k}\" -> \"Out\";\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch_matrix, CellSpec};
    use crate::ops::CANDIDATE_CATALOG;
    use crate::rng::derive_rng;

    fn catalog_names() -> Vec<String> {
        CANDIDATE_CATALOG.iter().map(|o| o.name().to_string()).collect()
    }

    fn all_skip() -> Genotype {
        let cell: Vec<[GenotypeEntry; 2]> = (0..4)
            .map(|_| {
                [
                    GenotypeEntry { op: OpName::SkipConnect, source: 0 },
                    GenotypeEntry { op: OpName::SkipConnect, source: 1 },
                ]
            })
            .collect();
        Genotype { normal: cell.clone(), reduce: cell, concat_nodes: vec![0, 1, 2, 3] }
    }

    #[test]
    fn all_equal_logits_select_lowest_sources_and_first_op() {
        let mut rng = derive_rng(20, "geno", 0);
        let mut normal = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &[],
            &mut rng,
        )
        .unwrap();
        let mut reduce = normal.clone();
        for v in normal.learnable_values_mut() {
            *v = 0.0;
        }
        for v in reduce.learnable_values_mut() {
            *v = 0.0;
        }
        let g = derive_genotype(&normal, &reduce).unwrap();
        for cell in [&g.normal, &g.reduce] {
            for slots in cell {
                assert_eq!(slots[0].source, 0);
                assert_eq!(slots[1].source, 1);
                assert_eq!(slots[0].op, OpName::SepConv3x3);
                assert_eq!(slots[1].op, OpName::SepConv3x3);
            }
        }
    }

    #[test]
    fn dominant_logits_win_verified_by_enumeration() {
        let mut rng = derive_rng(21, "geno", 0);
        let mut arch = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &[],
            &mut rng,
        )
        .unwrap();
        // +10 logit on a chosen (edge, op) per edge, op varying
        let n = arch.n_learn();
        {
            let vals: Vec<&mut f64> = arch.learnable_values_mut().collect();
            for (i, v) in vals.into_iter().enumerate() {
                let edge = i / n;
                let col = i % n;
                *v = if col == edge % 6 { 10.0 } else { 0.0 }; // 6 avoids skip/zero cols
            }
        }
        let g = derive_genotype(&arch, &arch).unwrap();
        // brute-force row argmax over all (edge, op) weights
        for (node, slots) in g.normal.iter().enumerate() {
            for entry in slots {
                let row = edge_row(node, entry.source);
                let weights = arch.row_softmax(row).unwrap();
                let mut best_col = 0;
                for c in 0..n {
                    if arch.column_ops()[c] != "zero" && weights[c] > weights[best_col] {
                        best_col = c;
                    }
                }
                assert_eq!(entry.op.name(), arch.column_ops()[best_col]);
            }
        }
    }

    #[test]
    fn zero_never_selected_even_when_dominant() {
        let mut rng = derive_rng(22, "geno", 0);
        let mut arch = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &[],
            &mut rng,
        )
        .unwrap();
        let n = arch.n_learn();
        {
            let vals: Vec<&mut f64> = arch.learnable_values_mut().collect();
            for (i, v) in vals.into_iter().enumerate() {
                *v = if i % n == 7 { 100.0 } else { 0.0 }; // column 7 is zero
            }
        }
        let g = derive_genotype(&arch, &arch).unwrap();
        for cell in [&g.normal, &g.reduce] {
            for slots in cell {
                for entry in slots {
                    assert_ne!(entry.op, OpName::Zero);
                }
            }
        }
    }

    #[test]
    fn derive_is_shift_invariant_per_row() {
        let mut rng = derive_rng(23, "geno", 0);
        let mut arch = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &catalog_names(),
            &[],
            &mut rng,
        )
        .unwrap();
        for (i, v) in arch.learnable_values_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 * 0.13;
        }
        let base = derive_genotype(&arch, &arch).unwrap();
        let mut shifted = arch.clone();
        let n = shifted.n_learn();
        for (i, v) in shifted.learnable_values_mut().enumerate() {
            *v += ((i / n) as f64) * 3.7 - 11.0; // constant per row
        }
        let g = derive_genotype(&shifted, &shifted).unwrap();
        assert_eq!(base, g);
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let g = all_skip();
        let text = serialize_genotype(&g);
        assert_eq!(text.lines().count(), 16);
        let back = parse_genotype(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn forward_reference_rejected() {
        let mut text = serialize_genotype(&all_skip());
        text = text.replace("normal n2 s0 <- 0 skip_connect", "normal n2 s0 <- 5 skip_connect");
        let err = parse_genotype(&text).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("forward reference"), "{msg}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_genotype("normal n0 s0 <- 0 warp_conv\n").unwrap_err();
        match err {
            Error::Parse { line, col, .. } => {
                assert_eq!(line, 1);
                assert_eq!(col, 19);
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn fig_style_op_multiset_roundtrips() {
        // reduction cell built from 5x5 separable, 5x5 dilated separable
        // and 3x3 max pooling entries
        let mut g = all_skip();
        g.reduce = vec![
            [
                GenotypeEntry { op: OpName::SepConv5x5, source: 0 },
                GenotypeEntry { op: OpName::MaxPool3x3, source: 1 },
            ],
            [
                GenotypeEntry { op: OpName::DilConv5x5, source: 2 },
                GenotypeEntry { op: OpName::MaxPool3x3, source: 0 },
            ],
            [
                GenotypeEntry { op: OpName::SepConv5x5, source: 3 },
                GenotypeEntry { op: OpName::DilConv5x5, source: 1 },
            ],
            [
                GenotypeEntry { op: OpName::MaxPool3x3, source: 4 },
                GenotypeEntry { op: OpName::SepConv5x5, source: 2 },
            ],
        ];
        let text = serialize_genotype(&g);
        let back = parse_genotype(&text).unwrap();
        assert_eq!(back.reduce, g.reduce);
        for want in ["sep_conv_5x5", "dil_conv_5x5", "max_pool_3x3"] {
            assert!(text.contains(want));
        }
    }

    #[test]
    fn dot_output_structure() {
        let g = all_skip();
        for kind in [CellKind::Normal, CellKind::Reduction] {
            let dot = genotype_to_dot(&g, kind);
            assert!(dot.starts_with("digraph"));
            assert!(dot.trim_end().ends_with('}'));
            let op_edges = dot.matches("[label=\"skip_connect\"]").count();
            assert_eq!(op_edges, 8);
            let concat_edges = dot.matches("-> \"Out\"").count();
            assert_eq!(concat_edges, 4);
        }
    }
}
