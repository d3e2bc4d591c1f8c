//! Queue accounting over predicted matches, supply-gradient fields, and the
//! three relocation heuristics (queue-based QS, gradient-based GS, combined
//! CS): target selection, supply revision, and before/after evaluation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::gp::{self, TrainedModel};
use crate::kernels::{INPUT_DIM, SUPPLY_DIM};
use crate::market::ObservationGrid;
use crate::{Error, Result};

/// One evaluation day as a design matrix, rows ordered (r, c, t) with row
/// index `z * intervals + (t - 1)` for zone index `z = (r-1)*cols + (c-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPanel {
    pub rows: usize,
    pub cols: usize,
    pub intervals: usize,
    pub x: DMatrix<f64>,
}

impl DayPanel {
    pub fn from_grid(grid: &ObservationGrid, day_idx: usize) -> Result<Self> {
        if day_idx >= grid.days.len() {
            return Err(Error::Data(format!("day index {day_idx} out of range")));
        }
        Ok(DayPanel {
            rows: grid.config.rows,
            cols: grid.config.cols,
            intervals: grid.intervals(),
            x: grid.inputs_for_days(&[day_idx]),
        })
    }

    pub fn new(rows: usize, cols: usize, intervals: usize, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != rows * cols * intervals || x.ncols() != INPUT_DIM {
            return Err(Error::Dimension(format!(
                "panel matrix is {}x{}, expected {}x{INPUT_DIM}",
                x.nrows(),
                x.ncols(),
                rows * cols * intervals
            )));
        }
        Ok(DayPanel {
            rows,
            cols,
            intervals,
            x,
        })
    }

    pub fn n_zones(&self) -> usize {
        self.rows * self.cols
    }

    fn row_index(&self, z: usize, t: usize) -> usize {
        z * self.intervals + t
    }

    /// Zone-major, interval-minor copy of one covariate column.
    fn column_series(&self, dim: usize) -> Vec<Vec<f64>> {
        (0..self.n_zones())
            .map(|z| {
                (0..self.intervals)
                    .map(|t| self.x[(self.row_index(z, t), dim)])
                    .collect()
            })
            .collect()
    }

    pub fn demand_series(&self) -> Vec<Vec<f64>> {
        self.column_series(3)
    }

    pub fn supply_series(&self) -> Vec<Vec<f64>> {
        self.column_series(SUPPLY_DIM)
    }

    /// Replace the supply column from a zone-major series.
    pub fn with_supply(&self, supply: &[Vec<f64>]) -> Result<DayPanel> {
        if supply.len() != self.n_zones() || supply.iter().any(|s| s.len() != self.intervals) {
            return Err(Error::Dimension("supply series shape mismatch".into()));
        }
        let mut out = self.clone();
        for (z, series) in supply.iter().enumerate() {
            for (t, v) in series.iter().enumerate() {
                let idx = out.row_index(z, t);
                out.x[(idx, SUPPLY_DIM)] = *v;
            }
        }
        Ok(out)
    }

    pub fn zone_rc(&self, z: usize) -> (usize, usize) {
        (z / self.cols + 1, z % self.cols + 1)
    }
}

fn windows_of(intervals: usize, window_intervals: usize) -> Vec<std::ops::Range<usize>> {
    (0..intervals)
        .step_by(window_intervals)
        .map(|a| a..(a + window_intervals).min(intervals))
        .collect()
}

/// Queue accounting for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueReport {
    /// q\[zone\]\[interval\]: passengers still awaiting a match.
    pub q: Vec<Vec<f64>>,
    /// Per-zone cumulative queue, summed over all intervals.
    pub q_zone: Vec<f64>,
    pub q_total: f64,
    /// Per-zone per-window cumulative queue.
    pub per_window_q: Vec<Vec<f64>>,
    pub q0: Vec<f64>,
}

/// Running queue: q_t = q0 + Σ_{t'≤t} (demand - matches), per zone; the
/// cumulative measures sum q over intervals. No clamping unless requested.
pub fn queue_lengths(
    demand: &[Vec<f64>],
    matches: &[Vec<f64>],
    q0: &[f64],
    window_intervals: usize,
    clamp_at_zero: bool,
) -> Result<QueueReport> {
    let zones = demand.len();
    if matches.len() != zones || q0.len() != zones || zones == 0 {
        return Err(Error::Dimension("queue panels must align over zones".into()));
    }
    let intervals = demand[0].len();
    if intervals == 0
        || demand.iter().any(|d| d.len() != intervals)
        || matches.iter().any(|m| m.len() != intervals)
    {
        return Err(Error::Dimension("queue panels must align over intervals".into()));
    }
    if window_intervals == 0 {
        return Err(Error::Config("window_intervals must be positive".into()));
    }
    if q0.iter().any(|v| *v < 0.0) {
        return Err(Error::Data("initial queues must be non-negative".into()));
    }

    let windows = windows_of(intervals, window_intervals);
    let mut q = vec![vec![0.0; intervals]; zones];
    let mut q_zone = vec![0.0; zones];
    let mut per_window_q = vec![vec![0.0; windows.len()]; zones];
    for z in 0..zones {
        let mut running = q0[z];
        for t in 0..intervals {
            running += demand[z][t] - matches[z][t];
            if clamp_at_zero {
                running = running.max(0.0);
            }
            q[z][t] = running;
        }
        q_zone[z] = q[z].iter().sum();
        for (w, range) in windows.iter().enumerate() {
            per_window_q[z][w] = q[z][range.clone()].iter().sum();
        }
    }
    let q_total = q_zone.iter().sum();
    Ok(QueueReport {
        q,
        q_zone,
        q_total,
        per_window_q,
        q0: q0.to_vec(),
    })
}

/// Per-(zone, window) sums of the predictive-mean gradients with respect to
/// the supply covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub per_window: Vec<Vec<f64>>,
    pub window_intervals: usize,
}

pub fn supply_gradient_field(
    model: &TrainedModel,
    panel: &DayPanel,
    window_intervals: usize,
) -> Result<GradientField> {
    if window_intervals == 0 {
        return Err(Error::Config("window_intervals must be positive".into()));
    }
    let grads = gp::predictive_mean_gradients(model, &panel.x, SUPPLY_DIM)?;
    let windows = windows_of(panel.intervals, window_intervals);
    let mut per_window = vec![vec![0.0; windows.len()]; panel.n_zones()];
    for z in 0..panel.n_zones() {
        for (w, range) in windows.iter().enumerate() {
            per_window[z][w] = range
                .clone()
                .map(|t| grads[panel.row_index(z, t)])
                .sum();
        }
    }
    Ok(GradientField {
        per_window,
        window_intervals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StrategyKind {
    Qs,
    Gs,
    Cs,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "QS" => Ok(StrategyKind::Qs),
            "GS" => Ok(StrategyKind::Gs),
            "CS" => Ok(StrategyKind::Cs),
            other => Err(Error::Config(format!("unknown strategy kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Intervals per decision window (10 three-minute intervals = 30 min).
    pub window_intervals: usize,
    /// Share of a donor zone's supply moved at each interval.
    pub fraction: f64,
    pub qs_threshold: f64,
    pub gs_threshold: f64,
    /// Donors with a window gradient inside this closed band keep their
    /// vehicles under GS.
    pub gs_no_donate_band: (f64, f64),
    pub cs_threshold: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            window_intervals: 10,
            fraction: 0.10,
            qs_threshold: 100.0,
            gs_threshold: 1.2,
            gs_no_donate_band: (1.0, 1.2),
            cs_threshold: 100.0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_intervals == 0 {
            return Err(Error::Config("window_intervals must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config("fraction must lie in (0, 1)".into()));
        }
        if self.qs_threshold < 0.0 || self.gs_threshold < 0.0 || self.cs_threshold < 0.0 {
            return Err(Error::Config("thresholds must be non-negative".into()));
        }
        let (lo, hi) = self.gs_no_donate_band;
        if !(lo <= hi && hi <= self.gs_threshold) {
            return Err(Error::Config(
                "no-donate band must satisfy low <= high <= gs_threshold".into(),
            ));
        }
        Ok(())
    }
}

/// Zones (by flat index) exceeding the strategy metric, per window; strict
/// inequality, so boundary cases are never selected.
pub fn select_targets(
    kind: StrategyKind,
    queue: &QueueReport,
    gradient: Option<&GradientField>,
    config: &StrategyConfig,
) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let zones = queue.per_window_q.len();
    let n_windows = queue.per_window_q.first().map_or(0, |w| w.len());
    let grad = match kind {
        StrategyKind::Qs => None,
        StrategyKind::Gs | StrategyKind::Cs => Some(gradient.ok_or_else(|| {
            Error::Config("GS/CS target selection needs a gradient field".into())
        })?),
    };
    if let Some(g) = grad {
        if g.per_window.len() != zones
            || g.per_window.first().map_or(0, |w| w.len()) != n_windows
        {
            return Err(Error::Dimension(
                "gradient field does not cover the queue report's zones/windows".into(),
            ));
        }
    }
    let mut out = vec![Vec::new(); n_windows];
    for (w, targets) in out.iter_mut().enumerate() {
        for z in 0..zones {
            let selected = match kind {
                StrategyKind::Qs => queue.per_window_q[z][w] > config.qs_threshold,
                StrategyKind::Gs => grad.unwrap().per_window[z][w] > config.gs_threshold,
                StrategyKind::Cs => {
                    queue.per_window_q[z][w] * grad.unwrap().per_window[z][w]
                        > config.cs_threshold
                }
            };
            if selected {
                targets.push(z);
            }
        }
    }
    Ok(out)
}

/// One donor-to-target flow within a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub window: usize,
    pub donor: usize,
    pub target: usize,
    /// Amount moved at each interval of the window.
    pub amounts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocationPlan {
    pub targets_per_window: Vec<Vec<usize>>,
    pub transfers: Vec<Transfer>,
    /// Zone-major revised supply series.
    pub revised_supply: Vec<Vec<f64>>,
}

/// Move `fraction` of each eligible donor's pre-revision supply to its
/// adjacent targets, equally split, at every interval of each window.
/// Donors are zones adjacent to at least one target that are not targets
/// themselves; under GS a donor whose window gradient lies in the no-donate
/// band is skipped. All revisions within a window read pre-revision supply.
pub fn apply_relocation(
    supply: &[Vec<f64>],
    targets_per_window: &[Vec<usize>],
    adjacency: &[Vec<usize>],
    config: &StrategyConfig,
    kind: StrategyKind,
    gradient: Option<&GradientField>,
) -> Result<RelocationPlan> {
    config.validate()?;
    let zones = supply.len();
    if adjacency.len() != zones {
        return Err(Error::Dimension("adjacency does not cover all zones".into()));
    }
    let intervals = supply.first().map_or(0, |s| s.len());
    if supply.iter().any(|s| s.len() != intervals) {
        return Err(Error::Dimension("supply series must align over intervals".into()));
    }
    if kind == StrategyKind::Gs && gradient.is_none() {
        return Err(Error::Config("GS relocation needs a gradient field".into()));
    }
    let windows = windows_of(intervals, config.window_intervals);
    if targets_per_window.len() != windows.len() {
        return Err(Error::Dimension(format!(
            "{} target sets for {} windows",
            targets_per_window.len(),
            windows.len()
        )));
    }
    for targets in targets_per_window {
        if targets.iter().any(|z| *z >= zones) {
            return Err(Error::Data("target zone outside grid".into()));
        }
    }

    let mut revised: Vec<Vec<f64>> = supply.to_vec();
    let mut transfers = Vec::new();
    for (w, range) in windows.iter().enumerate() {
        let targets = &targets_per_window[w];
        if targets.is_empty() {
            continue;
        }
        for donor in 0..zones {
            if targets.contains(&donor) {
                continue;
            }
            let adj_targets: Vec<usize> = adjacency[donor]
                .iter()
                .copied()
                .filter(|z| targets.contains(z))
                .collect();
            if adj_targets.is_empty() {
                continue;
            }
            if kind == StrategyKind::Gs {
                let g = gradient.unwrap().per_window[donor][w];
                let (lo, hi) = config.gs_no_donate_band;
                if g >= lo && g <= hi {
                    continue;
                }
            }
            let share = 1.0 / adj_targets.len() as f64;
            let outflow: Vec<f64> = range
                .clone()
                .map(|t| config.fraction * supply[donor][t])
                .collect();
            for t in range.clone() {
                revised[donor][t] -= outflow[t - range.start];
                debug_assert!(revised[donor][t] >= 0.0, "donor supply went negative");
            }
            for &target in &adj_targets {
                let amounts: Vec<f64> = outflow.iter().map(|v| v * share).collect();
                for t in range.clone() {
                    revised[target][t] += amounts[t - range.start];
                }
                transfers.push(Transfer {
                    window: w,
                    donor,
                    target,
                    amounts,
                });
            }
        }
    }

    // mass conservation per interval
    for t in 0..intervals {
        let before: f64 = supply.iter().map(|s| s[t]).sum();
        let after: f64 = revised.iter().map(|s| s[t]).sum();
        debug_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0));
    }

    Ok(RelocationPlan {
        targets_per_window: targets_per_window.to_vec(),
        transfers,
        revised_supply: revised,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneDelta {
    pub r: usize,
    pub c: usize,
    pub q_before: f64,
    pub q_after: f64,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    pub config: StrategyConfig,
    pub plan: RelocationPlan,
    pub queue_before: QueueReport,
    pub queue_after: QueueReport,
    pub gradient: Option<GradientField>,
    pub per_zone: Vec<ZoneDelta>,
}

/// Full pipeline for one day: baseline queue from predicted matches, target
/// selection, relocation, re-prediction on the revised panel, and the
/// after-relocation queue. The model is never mutated.
pub fn evaluate_strategy(
    model: &TrainedModel,
    panel: &DayPanel,
    q0: &[f64],
    kind: StrategyKind,
    config: &StrategyConfig,
    adjacency: &[Vec<usize>],
) -> Result<StrategyOutcome> {
    config.validate()?;
    if q0.len() != panel.n_zones() {
        return Err(Error::Dimension("q0 must cover every zone".into()));
    }

    let demand = panel.demand_series();
    let supply = panel.supply_series();
    let predict_series = |p: &DayPanel| -> Result<Vec<Vec<f64>>> {
        let y = gp::predict_mean(model, &p.x)?;
        Ok((0..p.n_zones())
            .map(|z| (0..p.intervals).map(|t| y[p.row_index(z, t)]).collect())
            .collect())
    };

    let matches_before = predict_series(panel)?;
    let queue_before = queue_lengths(&demand, &matches_before, q0, config.window_intervals, false)?;

    let gradient = match kind {
        StrategyKind::Qs => None,
        StrategyKind::Gs | StrategyKind::Cs => {
            Some(supply_gradient_field(model, panel, config.window_intervals)?)
        }
    };

    let targets = select_targets(kind, &queue_before, gradient.as_ref(), config)?;
    let plan = apply_relocation(&supply, &targets, adjacency, config, kind, gradient.as_ref())?;
    let revised_panel = panel.with_supply(&plan.revised_supply)?;
    let matches_after = predict_series(&revised_panel)?;
    let queue_after = queue_lengths(&demand, &matches_after, q0, config.window_intervals, false)?;

    let per_zone = (0..panel.n_zones())
        .map(|z| {
            let (r, c) = panel.zone_rc(z);
            ZoneDelta {
                r,
                c,
                q_before: queue_before.q_zone[z],
                q_after: queue_after.q_zone[z],
            }
        })
        .collect();

    Ok(StrategyOutcome {
        kind,
        config: config.clone(),
        plan,
        queue_before,
        queue_after,
        gradient,
        per_zone,
    })
}

/// Serializable strategy report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub kind: StrategyKind,
    pub config: StrategyConfig,
    pub targets_per_window: Vec<Vec<usize>>,
    pub transfers: Vec<Transfer>,
    pub q_before: f64,
    pub q_after: f64,
    pub per_zone: Vec<ZoneDelta>,
}

impl StrategyOutcome {
    pub fn report(&self) -> StrategyReport {
        StrategyReport {
            kind: self.kind,
            config: self.config.clone(),
            targets_per_window: self.plan.targets_per_window.clone(),
            transfers: self.plan.transfers.clone(),
            q_before: self.queue_before.q_total,
            q_after: self.queue_after.q_total,
            per_zone: self.per_zone.clone(),
        }
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &self.report())?;
        Ok(())
    }

    /// Per-zone per-window metric CSV for heat-map plotting:
    /// r,c,window,queue_before,queue_after,gradient (empty when absent).
    pub fn write_window_metrics(&self, rows: usize, cols: usize, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["r", "c", "window", "queue_before", "queue_after", "gradient"])?;
        let n_windows = self
            .queue_before
            .per_window_q
            .first()
            .map_or(0, |v| v.len());
        for z in 0..rows * cols {
            let (r, c) = (z / cols + 1, z % cols + 1);
            for win in 0..n_windows {
                let grad = self
                    .gradient
                    .as_ref()
                    .map(|g| g.per_window[z][win].to_string())
                    .unwrap_or_default();
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    (win + 1).to_string(),
                    self.queue_before.per_window_q[z][win].to_string(),
                    self.queue_after.per_window_q[z][win].to_string(),
                    grad,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
