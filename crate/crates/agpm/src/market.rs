//! Order-record ingestion, hexagon-grid spatial-temporal aggregation into
//! demand/supply panels, zone adjacency, seeded synthetic-market generation,
//! and CSV persistence.
//!
//! Hex layout: pointy-top, odd rows shifted east by half a column-spacing,
//! anchored at the center of zone (1, 1). Rows grow southward, columns
//! eastward. Counts are stored as reals because relocation strategies produce
//! fractional supply.

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Timelike, Utc};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::kernels::{self, ThetaVector};
use crate::{Error, Result};

const M_PER_DEG_LAT: f64 = 111_132.0;
const M_PER_DEG_LON_EQUATOR: f64 = 111_320.0;

/// A raw ride-sourcing order event.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OrderRecord {
    pub create_time: DateTime<Utc>,
    pub match_time: DateTime<Utc>,
    pub pickup_time: DateTime<Utc>,
    pub finish_time: DateTime<Utc>,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub dest_lat: f64,
    pub dest_lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatch_lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatch_lon: Option<f64>,
}

impl OrderRecord {
    pub fn check_ordering(&self) -> Result<()> {
        if self.create_time <= self.match_time
            && self.match_time <= self.pickup_time
            && self.pickup_time <= self.finish_time
        {
            Ok(())
        } else {
            Err(Error::Data("order timestamps out of order".into()))
        }
    }
}

fn default_hex_radius() -> f64 {
    1000.0
}

fn default_interval_s() -> u32 {
    180
}

fn default_adjacency() -> String {
    "odd-row-east".to_string()
}

/// Spatial-temporal grid definition: hexagon zones plus a daily time window
/// repeated over the dates spanned by the horizon.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    /// Center of zone (1, 1).
    pub origin_lat: f64,
    pub origin_lon: f64,
    #[serde(default = "default_hex_radius")]
    pub hex_radius_m: f64,
    #[serde(default = "default_interval_s")]
    pub interval_s: u32,
    pub horizon_start: DateTime<Utc>,
    pub horizon_end: DateTime<Utc>,
    #[serde(default = "default_adjacency")]
    pub adjacency_convention: String,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs rows, cols >= 1".into()));
        }
        if self.interval_s == 0 {
            return Err(Error::Config("interval_s must be positive".into()));
        }
        if self.hex_radius_m <= 0.0 {
            return Err(Error::Config("hex_radius_m must be positive".into()));
        }
        if self.horizon_start >= self.horizon_end {
            return Err(Error::Config("horizon start must precede end".into()));
        }
        let (a, b) = (self.window_start_s(), self.window_end_s());
        if a >= b {
            return Err(Error::Config(
                "daily window start must precede window end".into(),
            ));
        }
        if (b - a) % self.interval_s != 0 {
            return Err(Error::Config(
                "daily window must be a whole number of intervals".into(),
            ));
        }
        if self.adjacency_convention != "odd-row-east" {
            return Err(Error::Config(format!(
                "unknown adjacency convention '{}'",
                self.adjacency_convention
            )));
        }
        Ok(())
    }

    fn window_start_s(&self) -> u32 {
        self.horizon_start.time().num_seconds_from_midnight()
    }

    fn window_end_s(&self) -> u32 {
        self.horizon_end.time().num_seconds_from_midnight()
    }

    /// Number of 3-minute-style intervals in the daily window.
    pub fn intervals(&self) -> usize {
        ((self.window_end_s() - self.window_start_s()) / self.interval_s) as usize
    }

    /// Dates covered by the horizon, one panel day each.
    pub fn days(&self) -> Vec<NaiveDate> {
        let mut days = Vec::new();
        let mut d = self.horizon_start.date_naive();
        let last = self.horizon_end.date_naive();
        while d <= last {
            days.push(d);
            d = d.succ_opt().expect("date overflow");
        }
        days
    }

    fn col_spacing(&self) -> f64 {
        3f64.sqrt() * self.hex_radius_m
    }

    fn row_spacing(&self) -> f64 {
        1.5 * self.hex_radius_m
    }

    fn m_per_deg_lon(&self) -> f64 {
        M_PER_DEG_LON_EQUATOR * self.origin_lat.to_radians().cos()
    }

    /// Local east/south meters of a point relative to the (1, 1) center.
    fn to_local_m(&self, lat: f64, lon: f64) -> (f64, f64) {
        let east = (lon - self.origin_lon) * self.m_per_deg_lon();
        let south = (self.origin_lat - lat) * M_PER_DEG_LAT;
        (east, south)
    }

    /// Center of zone (r, c) in local east/south meters.
    pub fn zone_center_m(&self, r: usize, c: usize) -> (f64, f64) {
        let shift = if r % 2 == 0 { self.col_spacing() / 2.0 } else { 0.0 };
        (
            (c as f64 - 1.0) * self.col_spacing() - shift,
            (r as f64 - 1.0) * self.row_spacing(),
        )
    }

    /// Center of zone (r, c) as lat/lon degrees.
    pub fn zone_center_deg(&self, r: usize, c: usize) -> (f64, f64) {
        let (east, south) = self.zone_center_m(r, c);
        (
            self.origin_lat - south / M_PER_DEG_LAT,
            self.origin_lon + east / self.m_per_deg_lon(),
        )
    }

    /// Map a timestamp to (day index, interval index 1..=intervals).
    pub fn time_slot(&self, t: DateTime<Utc>) -> Option<(usize, usize)> {
        let date = t.date_naive();
        let days = self.days();
        let day_idx = days.iter().position(|d| *d == date)?;
        let tod = t.time().num_seconds_from_midnight();
        let (a, b) = (self.window_start_s(), self.window_end_s());
        if tod < a || tod >= b {
            return None;
        }
        Some((day_idx, ((tod - a) / self.interval_s) as usize + 1))
    }
}

/// Map a point to its zone under the hex tessellation, or `None` when the
/// nearest lattice center falls outside the grid.
pub fn hex_zone_of(lat: f64, lon: f64, config: &GridConfig) -> Option<(usize, usize)> {
    let (x, y) = config.to_local_m(lat, lon);
    let s = config.col_spacing();
    // axial coordinates of the pointy-top lattice
    let frac_r = y / config.row_spacing();
    let frac_q = x / s - frac_r / 2.0;
    let (q, r_ax) = cube_round(frac_q, frac_r);
    let i = r_ax;
    let j = q + (i as f64 / 2.0).ceil() as i64;
    let (row, col) = (i + 1, j + 1);
    if row >= 1 && row <= config.rows as i64 && col >= 1 && col <= config.cols as i64 {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

fn cube_round(q: f64, r: f64) -> (i64, i64) {
    let s = -q - r;
    let mut rq = q.round();
    let mut rr = r.round();
    let rs = s.round();
    let dq = (rq - q).abs();
    let dr = (rr - r).abs();
    let ds = (rs - s).abs();
    if dq > dr && dq > ds {
        rq = -rr - rs;
    } else if dr > ds {
        rr = -rq - rs;
    }
    (rq as i64, rr as i64)
}

/// Neighbors of (r, c): odd rows shifted east, interior zones have exactly 6.
pub fn hex_neighbors(r: usize, c: usize, config: &GridConfig) -> Result<Vec<(usize, usize)>> {
    if r < 1 || r > config.rows || c < 1 || c > config.cols {
        return Err(Error::Data(format!("zone ({r}, {c}) outside grid")));
    }
    Ok(hex_neighbors_unchecked(r, c, config.rows, config.cols))
}

pub(crate) fn hex_neighbors_unchecked(
    r: usize,
    c: usize,
    rows: usize,
    cols: usize,
) -> Vec<(usize, usize)> {
    let (ri, ci) = (r as i64, c as i64);
    let delta: i64 = if r % 2 == 1 { 1 } else { -1 };
    [
        (ri, ci - 1),
        (ri, ci + 1),
        (ri - 1, ci),
        (ri + 1, ci),
        (ri - 1, ci + delta),
        (ri + 1, ci + delta),
    ]
    .into_iter()
    .filter(|(nr, nc)| *nr >= 1 && *nr <= rows as i64 && *nc >= 1 && *nc <= cols as i64)
    .map(|(nr, nc)| (nr as usize, nc as usize))
    .collect()
}

/// One panel cell: per-zone per-interval counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellObs {
    pub demand: f64,
    pub supply: f64,
    pub matches: f64,
    pub pickups: f64,
}

/// The full panel: one record per (day, r, c, t), zeros filled.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGrid {
    pub config: GridConfig,
    pub days: Vec<NaiveDate>,
    data: Vec<CellObs>,
}

impl ObservationGrid {
    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let days = config.days();
        let per_day = config.rows * config.cols * config.intervals();
        Ok(ObservationGrid {
            data: vec![CellObs::default(); days.len() * per_day],
            days,
            config,
        })
    }

    pub fn intervals(&self) -> usize {
        self.config.intervals()
    }

    fn index(&self, day_idx: usize, r: usize, c: usize, t: usize) -> usize {
        debug_assert!(r >= 1 && r <= self.config.rows);
        debug_assert!(c >= 1 && c <= self.config.cols);
        debug_assert!(t >= 1 && t <= self.intervals());
        ((day_idx * self.config.rows + (r - 1)) * self.config.cols + (c - 1)) * self.intervals()
            + (t - 1)
    }

    pub fn cell(&self, day_idx: usize, r: usize, c: usize, t: usize) -> &CellObs {
        &self.data[self.index(day_idx, r, c, t)]
    }

    pub fn cell_mut(&mut self, day_idx: usize, r: usize, c: usize, t: usize) -> &mut CellObs {
        let i = self.index(day_idx, r, c, t);
        &mut self.data[i]
    }

    /// Design matrix `[r, c, t, d, s]` for the given days, row-major over
    /// (day, r, c, t).
    pub fn inputs_for_days(&self, day_indices: &[usize]) -> DMatrix<f64> {
        let per_day = self.config.rows * self.config.cols * self.intervals();
        let mut m = DMatrix::zeros(day_indices.len() * per_day, kernels::INPUT_DIM);
        let mut row = 0;
        for &d in day_indices {
            for r in 1..=self.config.rows {
                for c in 1..=self.config.cols {
                    for t in 1..=self.intervals() {
                        let cell = self.cell(d, r, c, t);
                        m[(row, 0)] = r as f64;
                        m[(row, 1)] = c as f64;
                        m[(row, 2)] = t as f64;
                        m[(row, 3)] = cell.demand;
                        m[(row, 4)] = cell.supply;
                        row += 1;
                    }
                }
            }
        }
        m
    }

    /// Target vector aligned with `inputs_for_days`.
    pub fn targets_for_days(&self, day_indices: &[usize], target: Target) -> DVector<f64> {
        let per_day = self.config.rows * self.config.cols * self.intervals();
        let mut v = DVector::zeros(day_indices.len() * per_day);
        let mut row = 0;
        for &d in day_indices {
            for r in 1..=self.config.rows {
                for c in 1..=self.config.cols {
                    for t in 1..=self.intervals() {
                        let cell = self.cell(d, r, c, t);
                        v[row] = match target {
                            Target::Matches => cell.matches,
                            Target::Pickups => cell.pickups,
                        };
                        row += 1;
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Matches,
    Pickups,
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matches" => Ok(Target::Matches),
            "pickups" => Ok(Target::Pickups),
            other => Err(Error::Config(format!("unknown target '{other}'"))),
        }
    }
}

/// Aggregation output: the panel plus dropped/malformed accounting.
#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub grid: ObservationGrid,
    pub dropped_out_of_grid: usize,
    pub dropped_out_of_horizon: usize,
    /// (record index, diagnostic) for records whose timestamps are out of order.
    pub malformed: Vec<(usize, String)>,
}

/// Counting rules: demand by create time and origin; supply by finish time
/// and destination; matches by match time and origin; pickups by pickup time
/// and origin. Each event increments exactly one cell or one drop counter.
pub fn aggregate_orders(records: &[OrderRecord], config: &GridConfig) -> Result<AggregateReport> {
    let mut grid = ObservationGrid::zeros(config.clone())?;
    let mut dropped_out_of_grid = 0;
    let mut dropped_out_of_horizon = 0;
    let mut malformed = Vec::new();

    for (idx, rec) in records.iter().enumerate() {
        if let Err(e) = rec.check_ordering() {
            malformed.push((idx, e.to_string()));
            continue;
        }
        let events = [
            (rec.create_time, rec.origin_lat, rec.origin_lon, 0usize),
            (rec.finish_time, rec.dest_lat, rec.dest_lon, 1),
            (rec.match_time, rec.origin_lat, rec.origin_lon, 2),
            (rec.pickup_time, rec.origin_lat, rec.origin_lon, 3),
        ];
        for (when, lat, lon, kind) in events {
            let Some((day_idx, t)) = config.time_slot(when) else {
                dropped_out_of_horizon += 1;
                continue;
            };
            let Some((r, c)) = hex_zone_of(lat, lon, config) else {
                dropped_out_of_grid += 1;
                continue;
            };
            let cell = grid.cell_mut(day_idx, r, c, t);
            match kind {
                0 => cell.demand += 1.0,
                1 => cell.supply += 1.0,
                2 => cell.matches += 1.0,
                _ => cell.pickups += 1.0,
            }
        }
    }
    Ok(AggregateReport {
        grid,
        dropped_out_of_grid,
        dropped_out_of_horizon,
        malformed,
    })
}

// ---------------------------------------------------------------------------
// Synthetic market generation
// ---------------------------------------------------------------------------

/// A smooth intensity bump in (row, col, interval) space, shared across days.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Bump {
    pub r: f64,
    pub c: f64,
    pub t: f64,
    pub amplitude: f64,
    pub spatial_scale: f64,
    pub temporal_scale: f64,
}

impl Bump {
    fn eval(&self, r: f64, c: f64, t: f64) -> f64 {
        let ds = (r - self.r).powi(2) + (c - self.c).powi(2);
        let dt = (t - self.t).powi(2);
        self.amplitude
            * (-ds / (2.0 * self.spatial_scale * self.spatial_scale)).exp()
            * (-dt / (2.0 * self.temporal_scale * self.temporal_scale)).exp()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorKind {
    /// Joint GP sample over all cells plus a mean offset.
    Agpm {
        kernel: String,
        theta: Vec<f64>,
        mean_offset: f64,
    },
    Cdmf {
        params: crate::baselines::CdmfParams,
    },
    Spmq {
        params: crate::baselines::SpmqParams,
    },
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 12, 3).expect("valid date")
}

fn default_base_rate() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub intervals: usize,
    pub n_days: usize,
    pub generator: GeneratorKind,
    /// Variance of the additive Gaussian observation noise on the targets.
    pub noise_var: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
    #[serde(default = "default_base_rate")]
    pub base_demand: f64,
    #[serde(default = "default_base_rate")]
    pub base_supply: f64,
    /// Empty bump lists are filled from the seed.
    #[serde(default)]
    pub demand_bumps: Vec<Bump>,
    #[serde(default)]
    pub supply_bumps: Vec<Bump>,
    /// Round targets to whole counts so emitted order records tally exactly.
    #[serde(default)]
    pub integer_counts: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub records: Vec<OrderRecord>,
    pub grid: ObservationGrid,
    /// The spec with seeded bump surfaces resolved.
    pub resolved_spec: SyntheticSpec,
}

fn grid_config_for(spec: &SyntheticSpec) -> GridConfig {
    let start = spec
        .start_date
        .and_time(NaiveTime::from_hms_opt(7, 30, 0).expect("valid time"))
        .and_utc();
    let last_day = spec.start_date + Duration::days(spec.n_days as i64 - 1);
    let end = last_day
        .and_time(NaiveTime::from_hms_opt(7, 30, 0).expect("valid time"))
        .and_utc()
        + Duration::seconds(spec.intervals as i64 * 180);
    GridConfig {
        rows: spec.rows,
        cols: spec.cols,
        origin_lat: 30.25,
        origin_lon: 120.15,
        hex_radius_m: 1000.0,
        interval_s: 180,
        horizon_start: start,
        horizon_end: end,
        adjacency_convention: "odd-row-east".into(),
    }
}

fn seeded_bumps(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, amplitude: f64) -> Vec<Bump> {
    (0..4)
        .map(|_| Bump {
            r: rng.gen_range(1.0..=spec.rows as f64),
            c: rng.gen_range(1.0..=spec.cols as f64),
            t: rng.gen_range(1.0..=spec.intervals as f64),
            amplitude: amplitude * rng.gen_range(0.5..1.5),
            spatial_scale: rng.gen_range(1.0..2.5),
            temporal_scale: rng.gen_range(3.0..8.0),
        })
        .collect()
}

fn intensity(base: f64, bumps: &[Bump], r: f64, c: f64, t: f64) -> f64 {
    base + bumps.iter().map(|b| b.eval(r, c, t)).sum::<f64>()
}

/// Deterministic synthetic market: demand/supply Poisson draws from smooth
/// intensity surfaces, targets from the named ground-truth model plus
/// truncated Gaussian noise, and single-purpose order records whose
/// aggregation reproduces the panel when `integer_counts` is set.
pub fn synthesize_market(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticMarket> {
    if spec.rows == 0 || spec.cols == 0 || spec.intervals == 0 || spec.n_days == 0 {
        return Err(Error::Config("synthetic spec dimensions must be positive".into()));
    }
    if spec.noise_var < 0.0 {
        return Err(Error::Config("noise variance must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resolved = spec.clone();
    if resolved.demand_bumps.is_empty() {
        resolved.demand_bumps = seeded_bumps(&mut rng, spec, 6.0);
    }
    if resolved.supply_bumps.is_empty() {
        resolved.supply_bumps = seeded_bumps(&mut rng, spec, 6.0);
    }

    let config = grid_config_for(spec);
    let mut grid = ObservationGrid::zeros(config.clone())?;

    // demand and supply draws, fixed iteration order
    for d in 0..spec.n_days {
        for r in 1..=spec.rows {
            for c in 1..=spec.cols {
                for t in 1..=spec.intervals {
                    let lam_d = intensity(
                        resolved.base_demand,
                        &resolved.demand_bumps,
                        r as f64,
                        c as f64,
                        t as f64,
                    )
                    .max(1e-9);
                    let lam_s = intensity(
                        resolved.base_supply,
                        &resolved.supply_bumps,
                        r as f64,
                        c as f64,
                        t as f64,
                    )
                    .max(1e-9);
                    let cell = grid.cell_mut(d, r, c, t);
                    cell.demand = Poisson::new(lam_d).expect("positive rate").sample(&mut rng);
                    cell.supply = Poisson::new(lam_s).expect("positive rate").sample(&mut rng);
                }
            }
        }
    }

    // targets from the ground-truth model
    let noise_sd = spec.noise_var.sqrt();
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
    let draw_noise = |rng: &mut ChaCha8Rng| -> f64 {
        if noise_sd == 0.0 {
            0.0
        } else {
            noise.sample(rng)
        }
    };

    match &spec.generator {
        GeneratorKind::Cdmf { params } => {
            for d in 0..spec.n_days {
                for r in 1..=spec.rows {
                    for c in 1..=spec.cols {
                        for t in 1..=spec.intervals {
                            let (dem, sup) = {
                                let cell = grid.cell(d, r, c, t);
                                (cell.demand, cell.supply)
                            };
                            let base = crate::baselines::cdmf_predict(dem, sup, params)?;
                            let m = (base + draw_noise(&mut rng)).max(0.0);
                            let p = (base + draw_noise(&mut rng)).max(0.0);
                            let cell = grid.cell_mut(d, r, c, t);
                            cell.matches = m;
                            cell.pickups = p;
                        }
                    }
                }
            }
        }
        GeneratorKind::Spmq { params } => {
            let adjacency = crate::baselines::adjacency_index_lists(spec.rows, spec.cols);
            for d in 0..spec.n_days {
                let mut demand = vec![vec![0.0; spec.intervals]; spec.rows * spec.cols];
                let mut supply = vec![vec![0.0; spec.intervals]; spec.rows * spec.cols];
                for r in 1..=spec.rows {
                    for c in 1..=spec.cols {
                        for t in 1..=spec.intervals {
                            let z = (r - 1) * spec.cols + (c - 1);
                            let cell = grid.cell(d, r, c, t);
                            demand[z][t - 1] = cell.demand;
                            supply[z][t - 1] = cell.supply;
                        }
                    }
                }
                let day = crate::baselines::DaySeries { demand, supply };
                let zeros = vec![0.0; spec.rows * spec.cols];
                let pred = crate::baselines::spmq_predict(&day, params, &adjacency, &zeros)?;
                for r in 1..=spec.rows {
                    for c in 1..=spec.cols {
                        let z = (r - 1) * spec.cols + (c - 1);
                        for t in 1..=spec.intervals {
                            let m = (pred[z][t - 1] + draw_noise(&mut rng)).max(0.0);
                            grid.cell_mut(d, r, c, t).matches = m;
                        }
                    }
                }
            }
        }
        GeneratorKind::Agpm {
            kernel,
            theta,
            mean_offset,
        } => {
            let expr = kernels::parse_kernel_spec(kernel)?;
            let theta = ThetaVector::for_expr(&expr, theta.clone())?;
            let day_indices: Vec<usize> = (0..spec.n_days).collect();
            let x = grid.inputs_for_days(&day_indices);
            let n = x.nrows();
            let mut k = kernels::gram_symmetric(&expr, &theta, &x)?;
            for i in 0..n {
                k[(i, i)] += 1e-8;
            }
            let chol = k.cholesky().ok_or(Error::CholeskyFailed)?;
            let sample_field = |rng: &mut ChaCha8Rng| -> DVector<f64> {
                let z = DVector::from_fn(n, |_, _| {
                    let v: f64 = StandardNormal.sample(rng);
                    v
                });
                chol.l() * z
            };
            let f_match = sample_field(&mut rng);
            let f_pickup = sample_field(&mut rng);
            let mut row = 0;
            for d in 0..spec.n_days {
                for r in 1..=spec.rows {
                    for c in 1..=spec.cols {
                        for t in 1..=spec.intervals {
                            let m =
                                (mean_offset + f_match[row] + draw_noise(&mut rng)).max(0.0);
                            let p =
                                (mean_offset + f_pickup[row] + draw_noise(&mut rng)).max(0.0);
                            let cell = grid.cell_mut(d, r, c, t);
                            cell.matches = m;
                            cell.pickups = p;
                            row += 1;
                        }
                    }
                }
            }
        }
    }

    if spec.integer_counts {
        for d in 0..spec.n_days {
            for r in 1..=spec.rows {
                for c in 1..=spec.cols {
                    for t in 1..=spec.intervals {
                        let cell = grid.cell_mut(d, r, c, t);
                        cell.matches = cell.matches.round();
                        cell.pickups = cell.pickups.round();
                    }
                }
            }
        }
    }

    let records = emit_records(&grid)?;
    Ok(SyntheticMarket {
        records,
        grid,
        resolved_spec: resolved,
    })
}

/// Emit single-purpose order records: each record contributes exactly one
/// in-horizon event under the counting rules; its other timestamps fall
/// outside the horizon and its unused endpoint falls outside the grid.
fn emit_records(grid: &ObservationGrid) -> Result<Vec<OrderRecord>> {
    let config = &grid.config;
    let before = config.horizon_start - Duration::hours(3);
    let after = config.horizon_end + Duration::hours(3);
    let (far_lat, far_lon) = (config.origin_lat + 5.0, config.origin_lon + 5.0);
    let mut records = Vec::new();

    for (d, day) in grid.days.iter().enumerate() {
        let day_window_start = day
            .and_time(config.horizon_start.time())
            .and_utc();
        for r in 1..=config.rows {
            for c in 1..=config.cols {
                let (lat, lon) = config.zone_center_deg(r, c);
                for t in 1..=grid.intervals() {
                    let cell = grid.cell(d, r, c, t);
                    let slot_start = day_window_start
                        + Duration::seconds(((t - 1) as i64) * config.interval_s as i64);
                    let stamp = |k: usize| {
                        slot_start + Duration::seconds((k % config.interval_s as usize) as i64)
                    };
                    for k in 0..cell.demand.round() as usize {
                        records.push(OrderRecord {
                            create_time: stamp(k),
                            match_time: after,
                            pickup_time: after,
                            finish_time: after,
                            origin_lat: lat,
                            origin_lon: lon,
                            dest_lat: far_lat,
                            dest_lon: far_lon,
                            dispatch_lat: None,
                            dispatch_lon: None,
                        });
                    }
                    for k in 0..cell.supply.round() as usize {
                        records.push(OrderRecord {
                            create_time: before,
                            match_time: before,
                            pickup_time: before,
                            finish_time: stamp(k),
                            origin_lat: far_lat,
                            origin_lon: far_lon,
                            dest_lat: lat,
                            dest_lon: lon,
                            dispatch_lat: None,
                            dispatch_lon: None,
                        });
                    }
                    for k in 0..cell.matches.round() as usize {
                        records.push(OrderRecord {
                            create_time: before,
                            match_time: stamp(k),
                            pickup_time: after,
                            finish_time: after,
                            origin_lat: lat,
                            origin_lon: lon,
                            dest_lat: far_lat,
                            dest_lon: far_lon,
                            dispatch_lat: None,
                            dispatch_lon: None,
                        });
                    }
                    for k in 0..cell.pickups.round() as usize {
                        records.push(OrderRecord {
                            create_time: before,
                            match_time: before,
                            pickup_time: stamp(k),
                            finish_time: after,
                            origin_lat: lat,
                            origin_lon: lon,
                            dest_lat: far_lat,
                            dest_lon: far_lon,
                            dispatch_lat: None,
                            dispatch_lon: None,
                        });
                    }
                }
            }
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

const PANEL_HEADER: [&str; 8] = ["day", "r", "c", "t", "demand", "supply", "matches", "pickups"];

/// Write the panel CSV, rows sorted by (day, r, c, t); floats print in their
/// shortest round-trip form.
pub fn save_grid(grid: &ObservationGrid, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PANEL_HEADER)?;
    for (d, day) in grid.days.iter().enumerate() {
        for r in 1..=grid.config.rows {
            for c in 1..=grid.config.cols {
                for t in 1..=grid.intervals() {
                    let cell = grid.cell(d, r, c, t);
                    w.write_record([
                        day.to_string(),
                        r.to_string(),
                        c.to_string(),
                        t.to_string(),
                        cell.demand.to_string(),
                        cell.supply.to_string(),
                        cell.matches.to_string(),
                        cell.pickups.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a panel CSV written by [`save_grid`], validating shape and keys.
/// The grid geometry (anchor, radius, horizon window) is reconstructed from
/// `config`; pass `None` to use a default geometry inferred from the file.
pub fn load_grid(path: &Path, config: Option<GridConfig>) -> Result<ObservationGrid> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for col in PANEL_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Data(format!("panel file missing column '{col}'")));
        }
    }
    let col_idx: Vec<usize> = PANEL_HEADER
        .iter()
        .map(|col| headers.iter().position(|h| h == *col).expect("checked"))
        .collect();

    struct RawRow {
        day: NaiveDate,
        r: usize,
        c: usize,
        t: usize,
        vals: [f64; 4],
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(col_idx[i]).unwrap_or("");
        let day: NaiveDate = get(0)
            .parse()
            .map_err(|_| Error::Data(format!("non-date day cell '{}'", get(0))))?;
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Data(format!("non-numeric cell '{s}'")))
        };
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("non-numeric cell '{s}'")))
        };
        rows.push(RawRow {
            day,
            r: parse_usize(get(1))?,
            c: parse_usize(get(2))?,
            t: parse_usize(get(3))?,
            vals: [
                parse_f64(get(4))?,
                parse_f64(get(5))?,
                parse_f64(get(6))?,
                parse_f64(get(7))?,
            ],
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("empty panel file".into()));
    }

    let mut days: Vec<NaiveDate> = rows.iter().map(|r| r.day).collect();
    days.sort_unstable();
    days.dedup();
    let rows_max = rows.iter().map(|r| r.r).max().unwrap();
    let cols_max = rows.iter().map(|r| r.c).max().unwrap();
    let t_max = rows.iter().map(|r| r.t).max().unwrap();

    let config = match config {
        Some(c) => c,
        None => {
            let start = days[0]
                .and_time(NaiveTime::from_hms_opt(7, 30, 0).expect("valid time"))
                .and_utc();
            let end = (*days.last().unwrap())
                .and_time(NaiveTime::from_hms_opt(7, 30, 0).expect("valid time"))
                .and_utc()
                + Duration::seconds(t_max as i64 * 180);
            GridConfig {
                rows: rows_max,
                cols: cols_max,
                origin_lat: 30.25,
                origin_lon: 120.15,
                hex_radius_m: 1000.0,
                interval_s: 180,
                horizon_start: start,
                horizon_end: end,
                adjacency_convention: "odd-row-east".into(),
            }
        }
    };
    let mut grid = ObservationGrid::zeros(config)?;
    if grid.days != days {
        return Err(Error::Data(format!(
            "panel days {:?} do not match grid horizon {:?}",
            days, grid.days
        )));
    }
    if rows_max != grid.config.rows || cols_max != grid.config.cols || t_max != grid.intervals() {
        return Err(Error::Data(format!(
            "panel shape ({rows_max}x{cols_max}x{t_max}) does not match grid ({}x{}x{})",
            grid.config.rows,
            grid.config.cols,
            grid.intervals()
        )));
    }

    let mut seen: BTreeMap<(usize, usize, usize, usize), ()> = BTreeMap::new();
    for row in &rows {
        if row.r < 1 || row.r > grid.config.rows || row.c < 1 || row.c > grid.config.cols {
            return Err(Error::Data(format!("zone ({}, {}) outside grid", row.r, row.c)));
        }
        if row.t < 1 || row.t > grid.intervals() {
            return Err(Error::Data(format!("interval {} outside window", row.t)));
        }
        let day_idx = days.iter().position(|d| *d == row.day).expect("deduped");
        let key = (day_idx, row.r, row.c, row.t);
        if seen.insert(key, ()).is_some() {
            return Err(Error::Data(format!(
                "duplicated row for (day {}, r {}, c {}, t {})",
                row.day, row.r, row.c, row.t
            )));
        }
        let cell = grid.cell_mut(day_idx, row.r, row.c, row.t);
        cell.demand = row.vals[0];
        cell.supply = row.vals[1];
        cell.matches = row.vals[2];
        cell.pickups = row.vals[3];
    }
    let expected = days.len() * grid.config.rows * grid.config.cols * grid.intervals();
    if seen.len() != expected {
        return Err(Error::Data(format!(
            "panel has {} rows, expected the full {} (zeros must be filled)",
            seen.len(),
            expected
        )));
    }
    Ok(grid)
}

const ORDER_HEADER: [&str; 8] = [
    "create_time",
    "match_time",
    "pickup_time",
    "finish_time",
    "origin_lat",
    "origin_lon",
    "dest_lat",
    "dest_lon",
];

pub fn save_orders(records: &[OrderRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ORDER_HEADER)?;
    for r in records {
        w.write_record([
            r.create_time.to_rfc3339(),
            r.match_time.to_rfc3339(),
            r.pickup_time.to_rfc3339(),
            r.finish_time.to_rfc3339(),
            r.origin_lat.to_string(),
            r.origin_lon.to_string(),
            r.dest_lat.to_string(),
            r.dest_lon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_orders(path: &Path) -> Result<Vec<OrderRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for col in ORDER_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Data(format!("order file missing column '{col}'")));
        }
    }
    let idx: Vec<usize> = ORDER_HEADER
        .iter()
        .map(|col| headers.iter().position(|h| h == *col).expect("checked"))
        .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let parse_time = |s: &str| -> Result<DateTime<Utc>> {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| Error::Data(format!("bad timestamp '{s}'")))
        };
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("non-numeric cell '{s}'")))
        };
        out.push(OrderRecord {
            create_time: parse_time(get(0))?,
            match_time: parse_time(get(1))?,
            pickup_time: parse_time(get(2))?,
            finish_time: parse_time(get(3))?,
            origin_lat: parse_f64(get(4))?,
            origin_lon: parse_f64(get(5))?,
            dest_lat: parse_f64(get(6))?,
            dest_lon: parse_f64(get(7))?,
            dispatch_lat: None,
            dispatch_lon: None,
        });
    }
    Ok(out)
}
