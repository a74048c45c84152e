//! Memory-based virtual classes: bounded FIFO queues of past class weights
//! and embeddings, a warm-up / step-pacing schedule for when those snapshots
//! join the loss, and the relabeling + concatenation that turns them into
//! extra classes.
//!
//! Naming follows the MemVir(N, M) convention: N is the number of past
//! steps used simultaneously, M the gap in steps between selected
//! snapshots. Both queues hold at most N(M+1) entries, newest first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemVirMode {
    /// Warm-up, then one more virtual step every M+1 steps up to N.
    Full,
    /// Queue management starts at step 0; pacing as in Full.
    NoWarmup,
    /// Warm-up, then all N virtual steps at once when the queue fills.
    NoStepPacing,
    /// Queues stay empty; the loss sees only actual classes.
    Baseline,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemVirConfig {
    pub mode: MemVirMode,
    /// N: number of past steps used as virtual classes once saturated.
    pub n_steps: usize,
    /// M: margin in steps between selected snapshots.
    pub margin: usize,
    /// U: warm-up in steps (ignored by NoWarmup, everything by Baseline).
    pub warmup_steps: usize,
}

impl MemVirConfig {
    pub fn baseline() -> Self {
        MemVirConfig {
            mode: MemVirMode::Baseline,
            n_steps: 0,
            margin: 0,
            warmup_steps: 0,
        }
    }

    /// Queue capacity N(M+1).
    pub fn capacity(&self) -> usize {
        self.n_steps * (self.margin + 1)
    }

    /// Warm-up actually applied for the mode.
    pub fn effective_warmup(&self) -> usize {
        match self.mode {
            MemVirMode::NoWarmup => 0,
            _ => self.warmup_steps,
        }
    }

    /// Whether queues are managed (and virtual classes considered) at `step`.
    pub fn active_at(&self, step: usize) -> bool {
        self.mode != MemVirMode::Baseline && step >= self.effective_warmup()
    }
}

/// The two snapshot queues plus the training-step counter. Snapshots are
/// deep copies taken before the extended batch is assembled, so later
/// parameter updates never leak into queued state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemVirState {
    weight_queue: VecDeque<Matrix>,
    embed_queue: VecDeque<(Matrix, Vec<usize>)>,
    step: usize,
}

impl MemVirState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Training steps taken so far (0-based index of the next step).
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn queue_len(&self) -> usize {
        self.weight_queue.len()
    }

    pub fn weight_snapshot(&self, idx: usize) -> Option<&Matrix> {
        self.weight_queue.get(idx)
    }

    pub fn embed_snapshot(&self, idx: usize) -> Option<&(Matrix, Vec<usize>)> {
        self.embed_queue.get(idx)
    }

    /// Pushes copies of the current weights and batch (newest first), drops
    /// the oldest entries past `capacity`, and advances the step counter.
    pub fn enqueue_step(&mut self, capacity: usize, w: &Matrix, x: &Matrix, y: &[usize]) {
        self.weight_queue.push_front(w.clone());
        self.embed_queue.push_front((x.clone(), y.to_vec()));
        while self.weight_queue.len() > capacity {
            self.weight_queue.pop_back();
            self.embed_queue.pop_back();
        }
        debug_assert_eq!(self.weight_queue.len(), self.embed_queue.len());
        self.step += 1;
    }

    /// Advances the step counter without touching the queues (warm-up and
    /// baseline steps).
    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Staircase class-count schedule: C before warm-up, then one extra C-sized
/// block every M+1 steps, saturating at (N+1)C.
pub fn schedule_class_count(step: usize, c: usize, u: usize, n: usize, m: usize) -> usize {
    if step < u {
        c
    } else {
        c * (((step - u) / (m + 1)).min(n) + 1)
    }
}

/// Snapshots chosen for the loss at the current queue length, as
/// newest-first queue indices: M, M + (M+1), M + 2(M+1), ... up to N picks.
pub fn selection_indices(queue_len: usize, cfg: &MemVirConfig) -> Vec<usize> {
    match cfg.mode {
        MemVirMode::Baseline => Vec::new(),
        MemVirMode::NoStepPacing => {
            if queue_len < cfg.capacity() {
                Vec::new()
            } else {
                paced_indices(queue_len, cfg.margin, cfg.n_steps)
            }
        }
        MemVirMode::Full | MemVirMode::NoWarmup => {
            paced_indices(queue_len, cfg.margin, cfg.n_steps)
        }
    }
}

fn paced_indices(queue_len: usize, margin: usize, n_steps: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut idx = margin;
    while idx < queue_len && out.len() < n_steps {
        out.push(idx);
        idx += margin + 1;
    }
    out
}

/// Selected past snapshots, relabeled and ready to concatenate.
#[derive(Debug, Clone)]
pub struct VirtualBatch {
    /// Rows of all selected embedding snapshots, selection order.
    pub embeddings: Matrix,
    /// Columns of all selected weight snapshots, selection order (D x kC).
    pub weights: Matrix,
    /// Snapshot labels remapped by slot: slot n (1-based) maps y to y + nC.
    pub labels: Vec<usize>,
    /// Number of past steps selected.
    pub k: usize,
    /// Newest-first queue indices that were selected.
    pub selected_indices: Vec<usize>,
}

impl VirtualBatch {
    pub fn empty(embed_dim: usize) -> Self {
        VirtualBatch {
            embeddings: Matrix::zeros(0, embed_dim),
            weights: Matrix::zeros(embed_dim, 0),
            labels: Vec::new(),
            k: 0,
            selected_indices: Vec::new(),
        }
    }
}

/// Builds the virtual-class batch for the current step. `num_classes` is the
/// actual class count C used for relabeling; snapshot labels must lie in
/// [0, C).
pub fn select_virtual(
    state: &MemVirState,
    cfg: &MemVirConfig,
    num_classes: usize,
) -> Result<VirtualBatch> {
    let indices = selection_indices(state.queue_len(), cfg);
    if indices.is_empty() {
        let dim = state
            .weight_snapshot(0)
            .map(|w| w.rows())
            .unwrap_or_default();
        return Ok(VirtualBatch::empty(dim));
    }
    let first_w = state.weight_snapshot(indices[0]).expect("index in range");
    let dim = first_w.rows();
    let mut embeddings = Matrix::zeros(0, dim);
    let mut weights = Matrix::zeros(dim, 0);
    let mut labels = Vec::new();
    for (slot, &idx) in indices.iter().enumerate() {
        let w = state.weight_snapshot(idx).expect("index in range");
        let (x, y) = state.embed_snapshot(idx).expect("queues equal length");
        if w.rows() != dim || x.cols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "queued snapshot {idx} has embedding dim {} / weight dim {}, expected {dim}",
                x.cols(),
                w.rows()
            )));
        }
        let offset = (slot + 1) * num_classes;
        for &label in y {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                });
            }
            labels.push(label + offset);
        }
        embeddings = embeddings.concat_rows(x)?;
        weights = weights.concat_cols(w)?;
    }
    Ok(VirtualBatch {
        embeddings,
        weights,
        labels,
        k: indices.len(),
        selected_indices: indices,
    })
}

/// Concatenates the current batch with the virtual one: actual rows/columns
/// first, then selection slots 1..k in order. With k = 0 the inputs pass
/// through untouched.
pub fn assemble_extended_batch(
    x: &Matrix,
    y: &[usize],
    w: &Matrix,
    virt: &VirtualBatch,
) -> Result<(Matrix, Matrix, Vec<usize>)> {
    if virt.k == 0 {
        return Ok((x.clone(), w.clone(), y.to_vec()));
    }
    if virt.embeddings.cols() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "virtual embeddings are {}-dim, batch is {}-dim",
            virt.embeddings.cols(),
            x.cols()
        )));
    }
    if virt.weights.rows() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "virtual weights are {}-dim, current weights are {}-dim",
            virt.weights.rows(),
            w.rows()
        )));
    }
    let x_ext = x.concat_rows(&virt.embeddings)?;
    let w_ext = w.concat_cols(&virt.weights)?;
    let mut labels = y.to_vec();
    labels.extend_from_slice(&virt.labels);
    Ok((x_ext, w_ext, labels))
}
