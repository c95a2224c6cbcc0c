//! Spatial summaries of a trained traffic policy: how often agents brake in
//! each grid cell and how large the messages they broadcast there are.

use crate::env::traffic::BRAKE;
use crate::train::{Decision, RolloutObserver};

/// Per-cell accumulators over evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisGrid {
    pub rows: usize,
    pub cols: usize,
    pub visits: Vec<u64>,
    pub brakes: Vec<u64>,
    pub norm_sum: Vec<f64>,
}

impl AnalysisGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        AnalysisGrid {
            rows,
            cols,
            visits: vec![0; rows * cols],
            brakes: vec![0; rows * cols],
            norm_sum: vec![0.0; rows * cols],
        }
    }

    pub fn record(&mut self, cell: (usize, usize), braked: bool, message_norm: f64) {
        let i = cell.0 * self.cols + cell.1;
        self.visits[i] += 1;
        if braked {
            self.brakes[i] += 1;
        }
        self.norm_sum[i] += message_norm;
    }

    /// Brake count over visit count; `None` for unvisited cells.
    pub fn brake_probability(&self) -> Vec<Option<f64>> {
        self.ratio(|i| self.brakes[i] as f64)
    }

    pub fn mean_message_norm(&self) -> Vec<Option<f64>> {
        self.ratio(|i| self.norm_sum[i])
    }

    fn ratio(&self, num: impl Fn(usize) -> f64) -> Vec<Option<f64>> {
        (0..self.visits.len())
            .map(|i| (self.visits[i] > 0).then(|| num(i) / self.visits[i] as f64))
            .collect()
    }

    /// Row-major CSV with a header of column indices; unvisited cells are empty.
    pub fn to_csv(&self, values: &[Option<f64>]) -> String {
        let header: Vec<String> = (0..self.cols).map(|c| c.to_string()).collect();
        let mut out = header.join(",");
        out.push('\n');
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| values[r * self.cols + c].map_or(String::new(), |v| v.to_string()))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

impl RolloutObserver for AnalysisGrid {
    fn on_decision(&mut self, d: &Decision) {
        if let Some(cell) = d.cell {
            self.record(cell, d.action == BRAKE, d.message_norm);
        }
    }
}
