//! UAV positions and transmit power per aerial cell.
//!
//! Stations are handled in local metres (see [`crate::data::Projection`]).
//! A station with rate requirement `alpha` pulls its UAV with weight
//! `2^(alpha/W) - 1`, the factor its single-link minimum power scales with.
//! With the excess loss held constant and `n = 2`, total single-link power is
//! `sum A_j d_j^2` up to a constant and the weighted centroid minimises it
//! exactly. With the elevation-dependent excess loss it is only a heuristic,
//! which the tests check against the unweighted mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::access::{self, Scheme, UserDemand};
use crate::channel::{self, exp2_m1, ExcessLoss, Point3, RadioParams};
use crate::data::{Projection, SLOT_SECONDS};
use crate::error::{Error, Result};

/// `2^(alpha/W) - 1`.
pub fn traffic_weight(alpha: f64, bandwidth: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("rate must be >= 0, got {alpha}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::domain(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    Ok(exp2_m1(alpha / bandwidth))
}

/// Average rate (bit/s) needed to move `bytes` within one hourly slot.
pub fn rate_from_bytes(bytes: f64) -> f64 {
    8.0 * bytes / SLOT_SECONDS
}

/// A base station in local metres with its rate requirement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStation {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    /// bit/s
    pub rate: f64,
}

impl CellStation {
    pub fn new(id: u32, x: f64, y: f64, rate: f64) -> Self {
        CellStation { id, x, y, rate }
    }

    pub fn ground(&self) -> Point3 {
        Point3::ground(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AerialCell {
    pub cluster_id: usize,
    pub stations: Vec<CellStation>,
}

impl AerialCell {
    pub fn new(cluster_id: usize, stations: Vec<CellStation>) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::domain(format!("cell {cluster_id} has no stations")));
        }
        if let Some(s) = stations.iter().find(|s| !(s.rate >= 0.0) || !s.rate.is_finite()) {
            return Err(Error::domain(format!("station {} has invalid rate {}", s.id, s.rate)));
        }
        Ok(AerialCell { cluster_id, stations })
    }

    pub fn unweighted_mean(&self, altitude: f64) -> Point3 {
        let n = self.stations.len() as f64;
        Point3::new(
            self.stations.iter().map(|s| s.x).sum::<f64>() / n,
            self.stations.iter().map(|s| s.y).sum::<f64>() / n,
            altitude,
        )
    }
}

/// Traffic-weighted centroid at the common altitude; the unweighted mean
/// when no station has demand.
pub fn optimal_position(cell: &AerialCell, params: &RadioParams) -> Result<Point3> {
    let mut total = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for s in &cell.stations {
        let a = traffic_weight(s.rate, params.bandwidth)?;
        total += a;
        sx += a * s.x;
        sy += a * s.y;
    }
    if total > 0.0 && total.is_finite() {
        Ok(Point3::new(sx / total, sy / total, params.altitude))
    } else {
        Ok(cell.unweighted_mean(params.altitude))
    }
}

pub fn cell_users(cell: &AerialCell, uav: Point3, params: &RadioParams, excess: ExcessLoss) -> Result<Vec<UserDemand>> {
    cell.stations
        .iter()
        .map(|s| Ok(UserDemand::new(channel::link_gain_with(params, uav, s.ground(), excess)?, s.rate)))
        .collect()
}

/// Minimum total power of the cell under `scheme` with the UAV at `uav`.
pub fn cell_power(cell: &AerialCell, uav: Point3, params: &RadioParams, scheme: Scheme) -> Result<f64> {
    cell_power_with(cell, uav, params, scheme, ExcessLoss::Expected)
}

pub fn cell_power_with(
    cell: &AerialCell,
    uav: Point3,
    params: &RadioParams,
    scheme: Scheme,
    excess: ExcessLoss,
) -> Result<f64> {
    let users = cell_users(cell, uav, params, excess)?;
    Ok(access::solve(scheme, &users, params.bandwidth, params.noise_density)?.total_power)
}

/// Sum of single-link minimum powers, each station alone on the full band.
/// This is the objective the centroid rule minimises.
pub fn separable_power(cell: &AerialCell, uav: Point3, params: &RadioParams, excess: ExcessLoss) -> Result<f64> {
    let mut total = 0.0;
    for s in &cell.stations {
        let g = channel::link_gain_with(params, uav, s.ground(), excess)?;
        total += channel::min_power_for_rate(params, s.rate, g)?;
    }
    Ok(total)
}

/// `h^2 / mean(d_h^2)`, where `d_h` is the horizontal UAV-station distance.
/// Large values mean the cell is small compared to the altitude.
pub fn altitude_ratio(cell: &AerialCell, uav: Point3) -> f64 {
    let n = cell.stations.len() as f64;
    let spread = cell
        .stations
        .iter()
        .map(|s| (s.x - uav.x).powi(2) + (s.y - uav.y).powi(2))
        .sum::<f64>()
        / n;
    if spread > 0.0 {
        uav.z * uav.z / spread
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionMode {
    #[default]
    WeightedCentroid,
    UnweightedMean,
}

impl PositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionMode::WeightedCentroid => "weighted-centroid",
            PositionMode::UnweightedMean => "unweighted-mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    pub scheme: Scheme,
    pub position: PositionMode,
    /// Also evaluate every access scheme at the chosen positions.
    pub all_schemes: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            scheme: Scheme::Rsma,
            position: PositionMode::WeightedCentroid,
            all_schemes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellPlan {
    pub cell: AerialCell,
    pub uav: Point3,
    /// Power under the plan's scheme, W.
    pub power: f64,
    /// Power under each of [`Scheme::ALL`] when requested.
    pub scheme_powers: Option<[f64; 3]>,
    pub altitude_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    pub cells: Vec<CellPlan>,
    pub scheme: Scheme,
    pub position: PositionMode,
    pub total_power: f64,
    pub warnings: Vec<String>,
}

impl DeploymentPlan {
    pub fn total_for(&self, scheme: Scheme) -> Option<f64> {
        let idx = Scheme::ALL.iter().position(|&s| s == scheme)?;
        self.cells
            .iter()
            .map(|c| c.scheme_powers.map(|p| p[idx]))
            .sum()
    }

    /// Structured text: one `uav` line per cell, warnings, then the total.
    /// With a projection each UAV also gets lon/lat.
    pub fn to_text(&self, projection: Option<&Projection>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# skyplan deployment plan");
        let _ = writeln!(out, "scheme {}", self.scheme);
        let _ = writeln!(out, "positions {}", self.position.as_str());
        let _ = writeln!(out, "uavs {}", self.cells.len());
        for c in &self.cells {
            let _ = write!(
                out,
                "uav cluster={} x_m={:?} y_m={:?} h_m={:?}",
                c.cell.cluster_id, c.uav.x, c.uav.y, c.uav.z
            );
            if let Some(p) = projection {
                let (lon, lat) = p.inverse(c.uav.x, c.uav.y);
                let _ = write!(out, " lon={lon:?} lat={lat:?}");
            }
            let _ = write!(out, " scheme={} power_w={:?}", self.scheme, c.power);
            if let Some(p) = c.scheme_powers {
                for (s, v) in Scheme::ALL.iter().zip(p) {
                    let _ = write!(out, " power_{s}_w={v:?}");
                }
            }
            let ids: Vec<String> = c.cell.stations.iter().map(|s| s.id.to_string()).collect();
            let _ = writeln!(out, " altitude_ratio={:?} stations={}", c.altitude_ratio, ids.join(","));
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning {w}");
        }
        let _ = writeln!(out, "total_power_w {:?}", self.total_power);
        out
    }

    pub fn save(&self, path: &Path, projection: Option<&Projection>) -> Result<()> {
        std::fs::write(path, self.to_text(projection)).map_err(|e| Error::io(path, e))
    }
}

/// Groups stations by label, positions a UAV per group and solves the
/// access scheme in each cell. Labels that are skipped (no station carries
/// them) are reported as warnings.
pub fn plan_deployment(
    labels: &[usize],
    stations: &[CellStation],
    params: &RadioParams,
    options: &PlanOptions,
) -> Result<DeploymentPlan> {
    params.validate()?;
    if labels.len() != stations.len() {
        return Err(Error::domain(format!(
            "{} labels for {} stations",
            labels.len(),
            stations.len()
        )));
    }
    if stations.is_empty() {
        return Err(Error::domain("no stations to deploy"));
    }
    let mut groups: BTreeMap<usize, Vec<CellStation>> = BTreeMap::new();
    for (&l, s) in labels.iter().zip(stations) {
        groups.entry(l).or_default().push(*s);
    }
    let max_label = *groups.keys().next_back().expect("nonempty");
    let warnings: Vec<String> = (0..max_label)
        .filter(|l| !groups.contains_key(l))
        .map(|l| format!("cluster {l} has no stations and was dropped"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }

    let cells: Vec<CellPlan> = groups
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(id, mut members)| {
            // plans must not depend on the input order of stations
            members.sort_by_key(|s| s.id);
            let cell = AerialCell::new(id, members)?;
            let uav = match options.position {
                PositionMode::WeightedCentroid => optimal_position(&cell, params)?,
                PositionMode::UnweightedMean => cell.unweighted_mean(params.altitude),
            };
            let power = cell_power(&cell, uav, params, options.scheme)?;
            let scheme_powers = if options.all_schemes {
                let mut p = [0.0; 3];
                for (slot, &s) in p.iter_mut().zip(Scheme::ALL.iter()) {
                    *slot = if s == options.scheme { power } else { cell_power(&cell, uav, params, s)? };
                }
                Some(p)
            } else {
                None
            };
            let altitude_ratio = altitude_ratio(&cell, uav);
            Ok(CellPlan {
                cell,
                uav,
                power,
                scheme_powers,
                altitude_ratio,
            })
        })
        .collect::<Result<_>>()?;
    let total_power = cells.iter().map(|c| c.power).sum();
    Ok(DeploymentPlan {
        cells,
        scheme: options.scheme,
        position: options.position,
        total_power,
        warnings,
    })
}

/// Rows and columns of a `k`-cell grid whose cells are as square as
/// possible over a `width x height` box.
pub fn grid_shape(k: usize, width: f64, height: f64) -> (usize, usize) {
    let aspect = if width > 0.0 && height > 0.0 { width / height } else { 1.0 };
    (1..=k)
        .filter(|r| k % r == 0)
        .map(|r| (r, k / r))
        .min_by(|a, b| {
            let score = |(r, c): (usize, usize)| ((c as f64 / r as f64) / aspect).ln().abs();
            score(*a).total_cmp(&score(*b))
        })
        .expect("k >= 1 has a divisor")
}

/// Uniform rectangular partition of the points' bounding box into `k`
/// cells, labelled row-major from the south-west corner. This is the
/// baseline partition used when no clustering is done.
pub fn grid_partition(points: &[(f64, f64)], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::domain("grid needs at least one cell"));
    }
    if points.is_empty() {
        return Err(Error::domain("no points to partition"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (rows, cols) = grid_shape(k, x1 - x0, y1 - y0);
    let bin = |v: f64, lo: f64, hi: f64, n: usize| -> usize {
        if hi > lo {
            (((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1)
        } else {
            0
        }
    };
    Ok(points
        .iter()
        .map(|&(x, y)| bin(y, y0, y1, rows) * cols + bin(x, x0, x1, cols))
        .collect())
}

/// Totals of the four combinations of partition (clustered or grid) and
/// position rule (weighted centroid or unweighted mean).
#[derive(Debug, Clone, PartialEq)]
pub struct FourSchemeReport {
    pub clustered_optimized: DeploymentPlan,
    pub clustered_mean: DeploymentPlan,
    pub grid_optimized: DeploymentPlan,
    pub grid_mean: DeploymentPlan,
}

impl FourSchemeReport {
    /// `(name, total power)` in a fixed order.
    pub fn totals(&self) -> [(&'static str, f64); 4] {
        [
            ("keg+location", self.clustered_optimized.total_power),
            ("keg-only", self.clustered_mean.total_power),
            ("location-only", self.grid_optimized.total_power),
            ("neither", self.grid_mean.total_power),
        ]
    }

    /// Saving of the full scheme over the worst of the four, percent.
    pub fn saving_vs_worst_pct(&self) -> f64 {
        let worst = self.totals().iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
        access::percent_saving(self.clustered_optimized.total_power, worst)
    }

    pub fn saving_vs_neither_pct(&self) -> f64 {
        access::percent_saving(self.clustered_optimized.total_power, self.grid_mean.total_power)
    }
}

pub fn four_scheme_comparison(
    stations: &[CellStation],
    cluster_labels: &[usize],
    grid_cells: usize,
    params: &RadioParams,
    scheme: Scheme,
) -> Result<FourSchemeReport> {
    let points: Vec<(f64, f64)> = stations.iter().map(|s| (s.x, s.y)).collect();
    let grid = grid_partition(&points, grid_cells)?;
    let plan = |labels: &[usize], position| {
        plan_deployment(
            labels,
            stations,
            params,
            &PlanOptions {
                scheme,
                position,
                all_schemes: false,
            },
        )
    };
    Ok(FourSchemeReport {
        clustered_optimized: plan(cluster_labels, PositionMode::WeightedCentroid)?,
        clustered_mean: plan(cluster_labels, PositionMode::UnweightedMean)?,
        grid_optimized: plan(&grid, PositionMode::WeightedCentroid)?,
        grid_mean: plan(&grid, PositionMode::UnweightedMean)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: f64 = 1e6;

    fn params() -> RadioParams {
        RadioParams::default()
    }

    fn cell(stations: &[(f64, f64, f64)]) -> AerialCell {
        let members = stations
            .iter()
            .enumerate()
            .map(|(i, &(x, y, r))| CellStation::new(i as u32 + 1, x, y, r))
            .collect();
        AerialCell::new(0, members).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(traffic_weight(0.0, W).unwrap(), 0.0);
        assert_relative_eq!(traffic_weight(W, W).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(traffic_weight(2.0 * W, W).unwrap(), 3.0, max_relative = 1e-15);
        assert!(traffic_weight(-1.0, W).is_err());
        assert!(traffic_weight(1.0, 0.0).is_err());
    }

    #[test]
    fn rate_conversion() {
        assert_eq!(rate_from_bytes(450.0), 1.0);
    }

    #[test]
    fn position_examples() {
        let p = params();
        let one = optimal_position(&cell(&[(3.0, 4.0, 1e5)]), &p).unwrap();
        assert_eq!(one, Point3::new(3.0, 4.0, 200.0));
        let mid = optimal_position(&cell(&[(0.0, 0.0, 1e5), (10.0, 2.0, 1e5)]), &p).unwrap();
        assert_relative_eq!(mid.x, 5.0, max_relative = 1e-12);
        assert_relative_eq!(mid.y, 1.0, max_relative = 1e-12);
        // weights 3 and 1
        let w = optimal_position(&cell(&[(0.0, 0.0, 2.0 * W), (4.0, 0.0, W)]), &p).unwrap();
        assert_relative_eq!(w.x, 1.0, max_relative = 1e-12);
        let idle = optimal_position(&cell(&[(0.0, 0.0, 0.0), (4.0, 2.0, 0.0)]), &p).unwrap();
        assert_eq!((idle.x, idle.y), (2.0, 1.0));
    }

    #[test]
    fn power_examples() {
        let p = params();
        let idle = cell(&[(0.0, 0.0, 0.0), (50.0, 0.0, 0.0)]);
        for s in Scheme::ALL {
            assert_eq!(cell_power(&idle, Point3::new(10.0, 0.0, 200.0), &p, s).unwrap(), 0.0);
        }
        let single = cell(&[(0.0, 0.0, 3e5)]);
        let uav = Point3::new(0.0, 0.0, 200.0);
        let g = channel::link_gain(&p, uav, Point3::ground(0.0, 0.0)).unwrap();
        let expect = channel::min_power_for_rate(&p, 3e5, g).unwrap();
        for s in Scheme::ALL {
            assert_relative_eq!(cell_power(&single, uav, &p, s).unwrap(), expect, max_relative = 1e-9);
        }
        let pair = cell(&[(-100.0, 0.0, 4e5), (100.0, 0.0, 4e5)]);
        let uav = optimal_position(&pair, &p).unwrap();
        let rsma = cell_power(&pair, uav, &p, Scheme::Rsma).unwrap();
        let fdma = cell_power(&pair, uav, &p, Scheme::Fdma).unwrap();
        assert!(rsma <= fdma * (1.0 + 1e-9));
    }

    #[test]
    fn single_station_plan() {
        let p = params();
        let st = [CellStation::new(9, 12.0, -7.0, 2e5)];
        let plan = plan_deployment(&[0], &st, &p, &PlanOptions::default()).unwrap();
        let g = channel::link_gain(&p, Point3::new(12.0, -7.0, 200.0), st[0].ground()).unwrap();
        assert_relative_eq!(plan.total_power, channel::min_power_for_rate(&p, 2e5, g).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn splitting_symmetric_cell_helps() {
        let p = params();
        let half: Vec<(f64, f64, f64)> = vec![(-400.0, 20.0, 3e5), (-380.0, -30.0, 2e5), (-420.0, 0.0, 1e5)];
        let mut all: Vec<CellStation> = Vec::new();
        for (i, &(x, y, r)) in half.iter().enumerate() {
            all.push(CellStation::new(i as u32, x, y, r));
            all.push(CellStation::new(100 + i as u32, -x, y, r));
        }
        let joined = plan_deployment(&vec![0; all.len()], &all, &p, &PlanOptions::default()).unwrap();
        let labels: Vec<usize> = all.iter().map(|s| usize::from(s.id >= 100)).collect();
        let split = plan_deployment(&labels, &all, &p, &PlanOptions::default()).unwrap();
        assert!(split.total_power <= joined.total_power);
        assert_relative_eq!(split.cells[0].power, split.cells[1].power, max_relative = 1e-9);
    }

    #[test]
    fn skipped_labels_warn() {
        let p = params();
        let st = [CellStation::new(1, 0.0, 0.0, 1e5), CellStation::new(2, 10.0, 0.0, 1e5)];
        let plan = plan_deployment(&[0, 2], &st, &p, &PlanOptions::default()).unwrap();
        assert_eq!(plan.cells.len(), 2);
        assert_eq!(plan.warnings, vec!["cluster 1 has no stations and was dropped".to_string()]);
        assert!(plan_deployment(&[0], &st, &p, &PlanOptions::default()).is_err());
    }

    #[test]
    fn all_schemes_and_text() {
        let p = params();
        let st = [CellStation::new(1, 0.0, 0.0, 3e5), CellStation::new(2, 60.0, 10.0, 2e5)];
        let opts = PlanOptions { all_schemes: true, ..Default::default() };
        let plan = plan_deployment(&[0, 0], &st, &p, &opts).unwrap();
        let [r, f, t] = plan.cells[0].scheme_powers.unwrap();
        assert!(r <= f * (1.0 + 1e-9) && f <= t * (1.0 + 1e-9));
        assert_eq!(plan.total_for(Scheme::Rsma), Some(plan.total_power));
        let text = plan.to_text(Some(&Projection::new(111.06, 13.04)));
        assert!(text.contains("stations=1,2"));
        assert!(text.lines().last().unwrap().starts_with("total_power_w "));
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_shape(8, 1.0, 1.0), (2, 4));
        assert_eq!(grid_shape(8, 1.0, 4.0), (4, 2));
        assert_eq!(grid_shape(7, 1.0, 1.0), (1, 7));
        assert_eq!(grid_shape(1, 3.0, 1.0), (1, 1));
        let pts = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0), (2.0, 7.0)];
        assert_eq!(grid_partition(&pts, 4).unwrap(), vec![0, 1, 2, 3, 2]);
        assert!(grid_partition(&pts, 0).is_err());
    }

    #[test]
    fn frozen_loss_centroid_beats_grid() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stations: Vec<(f64, f64, f64)> = (0..12)
            .map(|_| (rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(0.0..5e5)))
            .collect();
        let c = cell(&stations);
        let frozen = ExcessLoss::Frozen(13.0);
        let at = |x: f64, y: f64| separable_power(&c, Point3::new(x, y, 200.0), &p, frozen).unwrap();
        let opt = optimal_position(&c, &p).unwrap();
        let best = at(opt.x, opt.y);
        for i in 0..=40 {
            for j in 0..=40 {
                assert!(best <= at(-300.0 + 15.0 * i as f64, -300.0 + 15.0 * j as f64) * (1.0 + 1e-12));
            }
        }
    }

    fn random_stations(seed: u64, n: usize) -> Vec<CellStation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| CellStation::new(i as u32, rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(1e4..2e5)))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn station_order_does_not_matter(seed in 0u64..1000) {
            let p = params();
            let st = random_stations(seed, 10);
            let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
            let a = plan_deployment(&labels, &st, &p, &PlanOptions::default()).unwrap();
            let mut order: Vec<usize> = (0..10).collect();
            order.reverse();
            order.swap(2, 7);
            let st2: Vec<CellStation> = order.iter().map(|&i| st[i]).collect();
            let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let b = plan_deployment(&l2, &st2, &p, &PlanOptions::default()).unwrap();
            prop_assert_eq!(a.to_text(None), b.to_text(None));
        }

        #[test]
        fn relabeling_keeps_total(seed in 0u64..1000) {
            let p = params();
            let st = random_stations(seed, 9);
            let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
            let relabeled: Vec<usize> = labels.iter().map(|l| 2 - l).collect();
            let a = plan_deployment(&labels, &st, &p, &PlanOptions::default()).unwrap();
            let b = plan_deployment(&relabeled, &st, &p, &PlanOptions::default()).unwrap();
            prop_assert!((a.total_power - b.total_power).abs() <= 1e-12 * a.total_power);
        }

        #[test]
        fn zero_rate_station_is_inert(seed in 0u64..1000, x in -500.0f64..500.0, y in -500.0f64..500.0) {
            let p = params();
            let st = random_stations(seed, 6);
            let base = cell(&st.iter().map(|s| (s.x, s.y, s.rate)).collect::<Vec<_>>());
            let mut more = base.clone();
            more.stations.push(CellStation::new(99, x, y, 0.0));
            let (u1, u2) = (optimal_position(&base, &p).unwrap(), optimal_position(&more, &p).unwrap());
            prop_assert_eq!(u1, u2);
            for s in Scheme::ALL {
                let (a, b) = (cell_power(&base, u1, &p, s).unwrap(), cell_power(&more, u2, &p, s).unwrap());
                prop_assert!((a - b).abs() <= 1e-9 * a, "{s}: {a} vs {b}");
            }
        }
    }
}
