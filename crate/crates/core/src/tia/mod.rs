//! Temporal interval adjustment: per-segment positional-gradient statistics
//! shrink the segments that carry the most motion.

use std::fmt::Write as _;

use thiserror::Error;

use crate::deform::CanonicalTimes;

#[derive(Debug, Error)]
pub enum TiaError {
    #[error("interval log line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Iteration window and period of the adjustment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiaSchedule {
    pub from: u64,
    pub until: u64,
    pub period: u64,
}

impl Default for TiaSchedule {
    fn default() -> Self {
        Self {
            from: 500,
            until: 10_000,
            period: 1000,
        }
    }
}

/// One executed adjustment: iteration and the boundaries afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRecord {
    pub iter: u64,
    pub boundaries: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiaState {
    pub times: CanonicalTimes,
    pub g_acc: Vec<f64>,
    pub nu_acc: Vec<u64>,
    pub schedule: TiaSchedule,
    pub tau: f64,
    pub step: f64,
    /// Compare per-segment means instead of raw sums against the threshold.
    pub compare_normalized: bool,
    pub log: Vec<IntervalRecord>,
}

impl TiaState {
    pub fn new(times: CanonicalTimes, schedule: TiaSchedule, tau: f64, step: f64) -> Self {
        let l = times.segments();
        Self {
            times,
            g_acc: vec![0.0; l],
            nu_acc: vec![0; l],
            schedule,
            tau,
            step,
            compare_normalized: false,
            log: Vec::new(),
        }
    }

    pub fn in_window(&self, iter: u64) -> bool {
        (self.schedule.from..=self.schedule.until).contains(&iter)
    }

    pub fn accumulate(&mut self, t: f64, grad_norm: f64) {
        let c = self.times.segment_of(t);
        self.g_acc[c] += grad_norm;
        self.nu_acc[c] += 1;
    }

    fn reset(&mut self) {
        self.g_acc.iter_mut().for_each(|g| *g = 0.0);
        self.nu_acc.iter_mut().for_each(|n| *n = 0);
    }

    /// Runs one adjustment when `iter` is inside the window and on the
    /// period; returns whether it ran.
    pub fn adjust(&mut self, iter: u64) -> bool {
        if !self.in_window(iter) || self.schedule.period == 0 || iter % self.schedule.period != 0 {
            return false;
        }
        if self.nu_acc.iter().any(|&n| n > 0) {
            self.shrink();
        }
        self.reset();
        self.log.push(IntervalRecord {
            iter,
            boundaries: self.times.boundaries().to_vec(),
        });
        true
    }

    fn shrink(&mut self) {
        let l = self.g_acc.len();
        let means: Vec<f64> = self
            .g_acc
            .iter()
            .zip(&self.nu_acc)
            .map(|(&g, &n)| if n == 0 { 0.0 } else { g / n as f64 })
            .collect();
        let mu = means.iter().sum::<f64>() / l as f64;
        let sigma = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / l as f64).sqrt();
        let threshold = mu + self.tau * sigma;
        let s = self.step;
        // Full list t_0 = 0, t_1 … t_{l−1}, t_l = 1.
        let mut t = Vec::with_capacity(l + 1);
        t.push(0.0);
        t.extend_from_slice(self.times.boundaries());
        t.push(1.0);
        for j in 0..l {
            let stat = if self.compare_normalized { means[j] } else { self.g_acc[j] };
            if stat < threshold {
                continue;
            }
            // The extra strict check keeps every segment non-empty.
            if j != 0 && t[j] <= t[j + 1] - s && t[j] + s < t[j + 1] {
                t[j] += s;
            }
            if j != l - 1 && t[j] <= t[j + 1] - s && t[j + 1] - s > t[j] {
                t[j + 1] -= s;
            }
        }
        let b = self.times.boundaries_mut();
        b.copy_from_slice(&t[1..l]);
    }

    /// Tab-separated `iter  t_1 … t_{l−1}`, one line per executed adjustment.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            write!(s, "{}", r.iter).expect("string write");
            for b in &r.boundaries {
                write!(s, "\t{b}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

pub fn parse_interval_log(text: &str) -> Result<Vec<IntervalRecord>, TiaError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| TiaError::Parse { line: i + 1, msg };
        let mut it = line.split('\t');
        let iter = it
            .next()
            .unwrap_or("")
            .trim()
            .parse::<u64>()
            .map_err(|e| err(format!("iteration: {e}")))?;
        let boundaries = it
            .map(|v| v.trim().parse::<f64>().map_err(|e| err(format!("boundary: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(IntervalRecord { iter, boundaries });
    }
    Ok(out)
}
