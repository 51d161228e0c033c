//! ADWIN adaptive windowing change detector.
//!
//! The window is stored as an exponential histogram: row `i` holds buckets
//! that each summarize `2^i` consecutive values, with at most
//! `max_buckets` buckets per row. Every `clock` insertions all bucket
//! boundaries are tested as cut points; while some cut splits the window
//! into two sub-windows with significantly different means, the oldest
//! bucket is dropped.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftStatus {
    Stable,
    Drift,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct BucketRow {
    totals: VecDeque<f64>,
    variances: VecDeque<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adwin {
    delta: f64,
    clock: u64,
    max_buckets: usize,
    min_window_length: u64,
    grace_period: u64,
    rows: Vec<BucketRow>,
    total: f64,
    variance: f64,
    width: u64,
    tick: u64,
    detections: u64,
}

impl Default for Adwin {
    fn default() -> Self {
        Self::new(0.002)
    }
}

impl Adwin {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            clock: 32,
            max_buckets: 5,
            min_window_length: 5,
            grace_period: 10,
            rows: vec![BucketRow::default()],
            total: 0.0,
            variance: 0.0,
            width: 0,
            tick: 0,
            detections: 0,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of values currently in the window.
    pub fn width(&self) -> u64 {
        self.width
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Mean of the current window (0 when empty).
    pub fn estimation(&self) -> f64 {
        if self.width == 0 {
            0.0
        } else {
            self.total / self.width as f64
        }
    }

    pub fn detections(&self) -> u64 {
        self.detections
    }

    /// Inserts a value and reports whether the window was cut.
    pub fn update(&mut self, value: f64) -> DriftStatus {
        self.insert(value);
        self.compress();
        self.tick += 1;
        if self.tick % self.clock == 0 && self.width > self.grace_period && self.detect_change() {
            self.detections += 1;
            DriftStatus::Drift
        } else {
            DriftStatus::Stable
        }
    }

    fn insert(&mut self, value: f64) {
        self.width += 1;
        if self.width > 1 {
            let prev = (self.width - 1) as f64;
            let diff = value - self.total / prev;
            self.variance += prev * diff * diff / self.width as f64;
        }
        self.total += value;
        let row = &mut self.rows[0];
        row.totals.push_back(value);
        row.variances.push_back(0.0);
    }

    fn compress(&mut self) {
        let mut i = 0;
        while i < self.rows.len() {
            if self.rows[i].totals.len() <= self.max_buckets {
                break;
            }
            let size = (1u64 << i) as f64;
            let row = &mut self.rows[i];
            let (t1, v1) = (row.totals.pop_front().unwrap(), row.variances.pop_front().unwrap());
            let (t2, v2) = (row.totals.pop_front().unwrap(), row.variances.pop_front().unwrap());
            let (u1, u2) = (t1 / size, t2 / size);
            let merged_variance = v1 + v2 + size * size * (u1 - u2) * (u1 - u2) / (2.0 * size);
            if i + 1 == self.rows.len() {
                self.rows.push(BucketRow::default());
            }
            let next = &mut self.rows[i + 1];
            next.totals.push_back(t1 + t2);
            next.variances.push_back(merged_variance);
            i += 1;
        }
    }

    fn delete_oldest(&mut self) {
        let last = self.rows.len() - 1;
        let size = (1u64 << last) as f64;
        let row = &mut self.rows[last];
        let t = row.totals.pop_front().expect("oldest row is never empty");
        let v = row.variances.pop_front().expect("oldest row is never empty");
        if row.totals.is_empty() && last > 0 {
            self.rows.pop();
        }
        self.width -= size as u64;
        self.total -= t;
        if self.width == 0 {
            self.total = 0.0;
            self.variance = 0.0;
            return;
        }
        let w = self.width as f64;
        let u = t / size;
        let diff = u - self.total / w;
        self.variance -= v + size * w * diff * diff / (size + w);
        if self.variance < 0.0 {
            self.variance = 0.0;
        }
    }

    fn cut_expression(&self, n0: f64, n1: f64, abs_mean_diff: f64) -> bool {
        let n = self.width as f64;
        let delta_prime = (2.0 * n.ln() / self.delta).ln();
        let min_len = self.min_window_length as f64;
        let m_recip = 1.0 / (n0 - min_len + 1.0) + 1.0 / (n1 - min_len + 1.0);
        let window_variance = self.variance / n;
        let epsilon = (2.0 * m_recip * window_variance * delta_prime).sqrt() + 2.0 / 3.0 * delta_prime * m_recip;
        abs_mean_diff > epsilon
    }

    fn detect_change(&mut self) -> bool {
        let mut changed = false;
        let min_len = self.min_window_length as f64;
        loop {
            let mut cut = false;
            let mut n0 = 0.0;
            let mut n1 = self.width as f64;
            let mut u0 = 0.0;
            let mut u1 = self.total;
            'scan: for k in (0..self.rows.len()).rev() {
                let size = (1u64 << k) as f64;
                let row = &self.rows[k];
                for &t in row.totals.iter() {
                    n0 += size;
                    n1 -= size;
                    u0 += t;
                    u1 -= t;
                    if n1 < min_len {
                        break 'scan;
                    }
                    if n0 >= min_len && self.cut_expression(n0, n1, (u0 / n0 - u1 / n1).abs()) {
                        cut = true;
                        break 'scan;
                    }
                }
            }
            if !cut || self.width <= self.min_window_length {
                break;
            }
            changed = true;
            self.delete_oldest();
        }
        changed
    }
}
