//! Token-level LCS diff and the security masks derived from it.
//!
//! Ties between equally long alignments are broken deterministically: the
//! pair is oriented so the lexicographically smaller sequence comes first,
//! then matches are taken as early as possible in that sequence (and then in
//! the other). Orienting first makes `token_diff(b, a)` the exact mirror of
//! `token_diff(a, b)`, so mask symmetry and diff coverage hold together.

use std::ops::Range;

use crate::data::{MaskVec, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Equal,
    Replace,
    /// Tokens present only in `b`.
    Insert,
    /// Tokens present only in `a`.
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiffOp {
    pub kind: OpKind,
    pub a: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditScript {
    pub ops: Vec<DiffOp>,
}

impl EditScript {
    /// Number of tokens covered by `Equal` ops (the common-subsequence length).
    pub fn lcs_len(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| op.kind == OpKind::Equal)
            .map(|op| op.a.len())
            .sum()
    }

    /// Rebuilds `b` from `a` plus the non-equal regions of `b`.
    pub fn apply<T: Clone>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(b.len());
        for op in &self.ops {
            match op.kind {
                OpKind::Equal => out.extend_from_slice(&a[op.a.clone()]),
                OpKind::Replace | OpKind::Insert => out.extend_from_slice(&b[op.b.clone()]),
                OpKind::Delete => {}
            }
        }
        out
    }

    /// The same script seen from the other side.
    pub fn mirrored(&self) -> EditScript {
        let ops = self
            .ops
            .iter()
            .map(|op| DiffOp {
                kind: match op.kind {
                    OpKind::Insert => OpKind::Delete,
                    OpKind::Delete => OpKind::Insert,
                    k => k,
                },
                a: op.b.clone(),
                b: op.a.clone(),
            })
            .collect();
        EditScript { ops }
    }
}

/// Diffs two sequences. Works on any comparable element type; the pipeline
/// also uses it on lines.
pub fn token_diff<T: Ord>(a: &[T], b: &[T]) -> EditScript {
    if a <= b {
        script_from_matches(&leftmost_matches(a, b), a.len(), b.len())
    } else {
        script_from_matches(&leftmost_matches(b, a), b.len(), a.len()).mirrored()
    }
}

/// Matched index pairs of the LCS alignment that takes every match as early
/// as possible in `a`, then in `b`.
fn leftmost_matches<T: Eq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    // A common prefix is always matched first; trimming it keeps the table
    // small for the usual near-identical inputs.
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let (ca, cb) = (&a[prefix..], &b[prefix..]);
    let (cn, cm) = (ca.len(), cb.len());

    // suffix_lcs[i][j] = LCS(ca[i..], cb[j..])
    let w = cm + 1;
    let mut table = vec![0u32; (cn + 1) * w];
    for i in (0..cn).rev() {
        for j in (0..cm).rev() {
            table[i * w + j] = if ca[i] == cb[j] {
                table[(i + 1) * w + j + 1] + 1
            } else {
                table[(i + 1) * w + j].max(table[i * w + j + 1])
            };
        }
    }

    let mut matches: Vec<(usize, usize)> = (0..prefix).map(|k| (k, k)).collect();
    let (mut i, mut j) = (0, 0);
    while i < cn && j < cm {
        let here = table[i * w + j];
        if ca[i] == cb[j] && here == table[(i + 1) * w + j + 1] + 1 {
            matches.push((prefix + i, prefix + j));
            i += 1;
            j += 1;
        } else if table[i * w + j + 1] == here {
            j += 1;
        } else {
            i += 1;
        }
    }
    matches
}

fn script_from_matches(matches: &[(usize, usize)], n: usize, m: usize) -> EditScript {
    let mut ops: Vec<DiffOp> = Vec::new();
    let (mut i, mut j) = (0, 0);
    let gap = |ops: &mut Vec<DiffOp>, a: Range<usize>, b: Range<usize>| {
        let kind = match (a.is_empty(), b.is_empty()) {
            (true, true) => return,
            (false, false) => OpKind::Replace,
            (false, true) => OpKind::Delete,
            (true, false) => OpKind::Insert,
        };
        ops.push(DiffOp { kind, a, b });
    };
    for &(mi, mj) in matches {
        gap(&mut ops, i..mi, j..mj);
        match ops.last_mut() {
            Some(op) if op.kind == OpKind::Equal && op.a.end == mi && op.b.end == mj => {
                op.a.end += 1;
                op.b.end += 1;
            }
            _ => ops.push(DiffOp {
                kind: OpKind::Equal,
                a: mi..mi + 1,
                b: mj..mj + 1,
            }),
        }
        i = mi + 1;
        j = mj + 1;
    }
    gap(&mut ops, i..n, j..m);
    EditScript { ops }
}

/// Marks every token of `o_sec` (resp. `o_vul`) outside the equal regions of
/// their diff.
pub fn build_masks(o_sec: &TokenSeq, o_vul: &TokenSeq) -> (MaskVec, MaskVec) {
    masks_from_script(&token_diff(o_sec, o_vul), o_sec.len(), o_vul.len())
}

pub fn masks_from_script(script: &EditScript, a_len: usize, b_len: usize) -> (MaskVec, MaskVec) {
    let mut a_bits = vec![false; a_len];
    let mut b_bits = vec![false; b_len];
    for op in &script.ops {
        if op.kind != OpKind::Equal {
            a_bits[op.a.clone()].iter_mut().for_each(|x| *x = true);
            b_bits[op.b.clone()].iter_mut().for_each(|x| *x = true);
        }
    }
    (MaskVec::new(a_bits), MaskVec::new(b_bits))
}
