//! Grouped top-k̂ selection on the compressed attention matrix and its
//! sparse nearest-neighbour expansion to a full-width mask.
//!
//! Compressed column `j` of a row of width `W` covers the destination
//! cells that nearest-neighbour resizing maps back to it:
//! `[⌈jW/K⌉, ⌈(j+1)W/K⌉)`, or the single cell `⌊jW/K⌋` when that range is
//! empty (only possible for `W < K`). A selected cell is duplicated at
//! most `p` times, spaced evenly through its span, where `p` is the
//! largest value up to `min(k, ⌈T/K⌉)` that keeps the group within its
//! budget of `k` entries per query row.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeaError};
use crate::flatcsr::FlatCsr;
use crate::tensor::Tensor;
use crate::work;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    /// One group per query row.
    PerQuery,
    /// One group per head.
    PerHead,
    /// A single group over all heads and rows.
    PerBatch,
    /// One group per time step across heads.
    CausalPerBatch,
}

impl TopKMode {
    pub const ALL: [TopKMode; 4] = [
        TopKMode::PerQuery,
        TopKMode::PerHead,
        TopKMode::PerBatch,
        TopKMode::CausalPerBatch,
    ];

    /// Number of query rows `(h, t)` a group spans.
    pub fn rows_per_group(self, heads: usize, seq_len: usize) -> usize {
        match self {
            TopKMode::PerQuery => 1,
            TopKMode::PerHead => seq_len,
            TopKMode::PerBatch => heads * seq_len,
            TopKMode::CausalPerBatch => heads,
        }
    }

    /// Group id of query row `(h, t)`.
    pub fn group_of(self, h: usize, t: usize, seq_len: usize) -> usize {
        match self {
            TopKMode::PerQuery => h * seq_len + t,
            TopKMode::PerHead => h,
            TopKMode::PerBatch => 0,
            TopKMode::CausalPerBatch => t,
        }
    }

    pub fn group_count(self, heads: usize, seq_len: usize) -> usize {
        heads * seq_len / self.rows_per_group(heads, seq_len)
    }

    fn name(self) -> &'static str {
        match self {
            TopKMode::PerQuery => "per_query",
            TopKMode::PerHead => "per_head",
            TopKMode::PerBatch => "per_batch",
            TopKMode::CausalPerBatch => "causal_per_batch",
        }
    }
}

impl fmt::Display for TopKMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopKMode {
    type Err = SeaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        TopKMode::ALL
            .into_iter()
            .find(|m| m.name().replace('_', "") == norm)
            .ok_or_else(|| SeaError::Config(format!("unknown top-k mode `{s}`")))
    }
}

/// `max(1, round(k·K/T))`, rounding halves away from zero.
pub fn compress_k(k: usize, compressed_len: usize, seq_len: usize) -> usize {
    ((2 * k * compressed_len + seq_len) / (2 * seq_len)).max(1)
}

/// Selected cells of the compressed `[H, T, K]` grid, row by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedMask {
    heads: usize,
    seq_len: usize,
    width: usize,
    mode: TopKMode,
    k_hat: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl CompressedMask {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> TopKMode {
        self.mode
    }

    pub fn k_hat(&self) -> usize {
        self.k_hat
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Selected compressed columns of query row `(h, t)`, ascending.
    pub fn row(&self, h: usize, t: usize) -> &[usize] {
        let r = h * self.seq_len + t;
        &self.cols[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Selection budget of one group in compressed cells.
    pub fn group_budget(&self) -> usize {
        self.k_hat * self.mode.rows_per_group(self.heads, self.seq_len)
    }

    /// Cells per group.
    pub fn group_size(&self) -> usize {
        self.width * self.mode.rows_per_group(self.heads, self.seq_len)
    }

    /// Selected cells per group.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.mode.group_count(self.heads, self.seq_len)];
        for h in 0..self.heads {
            for t in 0..self.seq_len {
                counts[self.mode.group_of(h, t, self.seq_len)] += self.row(h, t).len();
            }
        }
        counts
    }

    /// Dense 0/1 view `[H, T, K]`.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros([self.heads, self.seq_len, self.width]);
        for h in 0..self.heads {
            for t in 0..self.seq_len {
                for &j in self.row(h, t) {
                    out.data_mut()[(h * self.seq_len + t) * self.width + j] = 1.0;
                }
            }
        }
        out
    }
}

/// Marks the largest entries of each group of `a_hat` (`[H, T, K]`).
///
/// Each group keeps `min(budget, group size)` cells; ties go to the lowest
/// flat index.
pub fn grouped_topk(a_hat: &Tensor, mode: TopKMode, k_hat: usize) -> Result<CompressedMask> {
    if a_hat.rank() != 3 || a_hat.is_empty() {
        return Err(SeaError::dim("grouped_topk", format!("expected non-empty [H,T,K], got {:?}", a_hat.shape())));
    }
    if k_hat == 0 {
        return Err(SeaError::Config("k_hat must be at least 1".into()));
    }
    let (heads, seq_len, width) = (a_hat.dim(0), a_hat.dim(1), a_hat.dim(2));
    let data = a_hat.data();
    let rows = mode.rows_per_group(heads, seq_len);
    let budget = k_hat * rows;
    let mut selected = vec![false; data.len()];
    let mut members: Vec<usize> = Vec::with_capacity(rows * width);
    let order = |a: &usize, b: &usize| data[*b].total_cmp(&data[*a]).then(a.cmp(b));
    for g in 0..mode.group_count(heads, seq_len) {
        members.clear();
        match mode {
            TopKMode::PerQuery => members.extend(g * width..(g + 1) * width),
            TopKMode::PerHead => members.extend(g * seq_len * width..(g + 1) * seq_len * width),
            TopKMode::PerBatch => members.extend(0..data.len()),
            TopKMode::CausalPerBatch => {
                for h in 0..heads {
                    let base = (h * seq_len + g) * width;
                    members.extend(base..base + width);
                }
            }
        }
        let n = budget.min(members.len());
        if n < members.len() {
            members.select_nth_unstable_by(n - 1, order);
        }
        for &i in &members[..n] {
            selected[i] = true;
        }
    }
    let mut offsets = Vec::with_capacity(heads * seq_len + 1);
    let mut cols = Vec::new();
    offsets.push(0);
    for row in selected.chunks(width) {
        cols.extend(row.iter().enumerate().filter(|(_, &s)| s).map(|(j, _)| j));
        offsets.push(cols.len());
    }
    work::add_touches(data.len() as u64);
    Ok(CompressedMask {
        heads,
        seq_len,
        width,
        mode,
        k_hat,
        offsets,
        cols,
    })
}

/// Destination cells `(start, width)` of compressed column `j` in a row of width `row_width`.
pub fn column_span(j: usize, row_width: usize, width: usize) -> (usize, usize) {
    let start = (j * row_width).div_ceil(width);
    let end = ((j + 1) * row_width).div_ceil(width);
    if end > start {
        (start, end - start)
    } else {
        (j * row_width / width, 1)
    }
}

/// Width of query row `t` in the full mask.
pub fn row_width(t: usize, seq_len: usize, causal: bool) -> usize {
    if causal {
        t + 1
    } else {
        seq_len
    }
}

thread_local! {
    static OFF_BY_ONE: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection used by the verification suite to prove that the
/// equivalence checks can fail. Affects the current thread only.
#[doc(hidden)]
pub fn inject_off_by_one(on: bool) {
    OFF_BY_ONE.with(|f| f.set(on));
}

/// Duplications per selected cell for every group, as described in the module docs.
pub fn duplications(m: &CompressedMask, k: usize, causal: bool) -> Vec<usize> {
    let (heads, seq_len, width) = (m.heads, m.seq_len, m.width);
    let cap = k.min(seq_len.div_ceil(width)).max(1);
    let rows = m.mode.rows_per_group(heads, seq_len);
    let budget = k * rows;
    let mut spans: Vec<Vec<usize>> = vec![Vec::new(); m.mode.group_count(heads, seq_len)];
    for h in 0..heads {
        for t in 0..seq_len {
            let w = row_width(t, seq_len, causal);
            let g = m.mode.group_of(h, t, seq_len);
            spans[g].extend(m.row(h, t).iter().map(|&j| column_span(j, w, width).1));
        }
    }
    spans
        .iter()
        .map(|ws| {
            let cost = |p: usize| ws.iter().map(|&w| w.min(p)).sum::<usize>();
            let (mut lo, mut hi) = (1, cap);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if cost(mid) <= budget {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            lo
        })
        .collect()
}

/// Expands `m` to the binary full mask for a budget of `k` keys per query.
///
/// Only selected cells are visited. Rows are sorted and deduplicated.
pub fn interpolate_mask(m: &CompressedMask, k: usize, causal: bool) -> Result<FlatCsr> {
    if k == 0 || k > m.seq_len {
        return Err(SeaError::Config(format!("k = {k} must lie in 1..={}", m.seq_len)));
    }
    let (heads, seq_len, width) = (m.heads, m.seq_len, m.width);
    let dup = duplications(m, k, causal);
    let shift = OFF_BY_ONE.with(|f| f.get()) as usize;
    let mut offsets = Vec::with_capacity(seq_len + 1);
    let mut cols = Vec::new();
    let mut row_buf = Vec::new();
    let mut emitted = 0u64;
    offsets.push(0);
    for t in 0..seq_len {
        let w_row = row_width(t, seq_len, causal);
        for h in 0..heads {
            let p = dup[m.mode.group_of(h, t, seq_len)];
            row_buf.clear();
            for &j in m.row(h, t) {
                let (start, w) = column_span(j, w_row, width);
                let n = w.min(p);
                row_buf.extend((0..n).map(|i| (start + i * w / n + shift).min(w_row - 1)));
            }
            emitted += row_buf.len() as u64;
            row_buf.sort_unstable();
            row_buf.dedup();
            cols.extend(row_buf.iter().map(|&s| h * seq_len + s));
        }
        offsets.push(cols.len());
    }
    work::add_nnz(emitted);
    work::add_touches(emitted);
    FlatCsr::new(seq_len, heads, offsets, cols, None, m.mode)
}
