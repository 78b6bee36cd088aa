use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::svg;
use super::*;
use crate::access::{self, Scheme};
use crate::channel::RadioParams;
use crate::clustering::{self, EmptyClusters, KegOptions, KegResult};
use crate::data::{self, BaseStation, Bounds, GapReport, Projection, TrafficMatrix, HOURS_PER_DAY};
use crate::error::Error;
use crate::placement::{self, CellStation, PlanOptions, PositionMode};
use crate::predictor::{self, PredictConfig, Prediction, TrainConfig, TrainMethod};

fn out_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn radio(path: Option<&PathBuf>) -> Result<RadioParams> {
    match path {
        Some(p) => RadioParams::load(p),
        None => Ok(RadioParams::default()),
    }
}

struct Stations {
    stations: Vec<BaseStation>,
    projection: Projection,
    points: Vec<(f64, f64)>,
}

fn load_stations(args: &TopologyArgs) -> Result<Stations> {
    let mut stations = data::load_topology(&args.topology)?;
    if let Some(b) = &args.bounds {
        stations = data::filter_area(&stations, &Bounds::parse(b)?);
    }
    if stations.is_empty() {
        return Err(Error::validation(format!("{}: no stations to plan for", args.topology.display())));
    }
    let projection = Projection::centered_on(&stations)?;
    let points = data::project_to_meters(&stations, &projection);
    Ok(Stations {
        stations,
        projection,
        points,
    })
}

fn load_traffic(args: &TrafficArgs, stations: Option<&[BaseStation]>, dir: &Path) -> Result<TrafficMatrix> {
    let (matrix, gaps) = match stations {
        Some(s) => data::load_traffic_for(&args.traffic, args.baseline, s)?,
        None => data::load_traffic(&args.traffic, args.baseline)?,
    };
    write_gaps(dir, &gaps)?;
    if matrix.days() == 0 {
        return Err(Error::validation(format!("{}: no traffic rows", args.traffic.display())));
    }
    Ok(matrix)
}

fn write_gaps(dir: &Path, gaps: &GapReport) -> Result<()> {
    if gaps.missing_cells > 0 || gaps.unknown_station_rows > 0 {
        log::warn!(
            "traffic gaps: {} missing cells, {} rows for unknown stations",
            gaps.missing_cells,
            gaps.unknown_station_rows
        );
    }
    write(dir, "gaps.txt", &gaps.to_string())
}

/// Day and hour to plan for; the hour defaults to the busiest of the day.
fn choose_slot(traffic: &TrafficMatrix, day: Option<usize>, hour: Option<usize>) -> Result<(usize, usize)> {
    let day = day.unwrap_or(traffic.days());
    if day == 0 || day > traffic.days() {
        return Err(Error::validation(format!("day {day} outside 1..={}", traffic.days())));
    }
    let hour = match hour {
        Some(h) if (1..=HOURS_PER_DAY).contains(&h) => h,
        Some(h) => return Err(Error::validation(format!("hour {h} outside 1..=24"))),
        None => busiest_hour(&traffic.hourly_totals(day)),
    };
    Ok((day, hour))
}

fn busiest_hour(totals: &[f64; HOURS_PER_DAY]) -> usize {
    let mut best = 0;
    for (h, &v) in totals.iter().enumerate() {
        if v > totals[best] {
            best = h;
        }
    }
    best + 1
}

fn cell_stations(st: &Stations, rate_of: impl Fn(u32) -> Result<f64>) -> Result<Vec<CellStation>> {
    st.stations
        .iter()
        .zip(&st.points)
        .map(|(s, &(x, y))| Ok(CellStation::new(s.id, x, y, rate_of(s.id)?)))
        .collect()
}

fn slot_rates(traffic: &TrafficMatrix, day: usize, hour: usize) -> impl Fn(u32) -> Result<f64> + '_ {
    move |id| {
        let s = traffic
            .station_index(id)
            .ok_or_else(|| Error::validation(format!("no traffic for station {id}")))?;
        Ok(placement::rate_from_bytes(traffic.get(s, day, hour)))
    }
}

fn run_keg(points: &[Vec<f64>], opts: &ClusterOpts, seed: u64) -> Result<KegResult> {
    if opts.k == 0 {
        return Err(Error::validation("--k must be >= 1"));
    }
    let keg_opts = KegOptions {
        tol: opts.tol,
        max_iters: opts.max_iters,
        restarts: opts.restarts,
        empty: if opts.reseed_empty { EmptyClusters::Reseed } else { EmptyClusters::Drop },
    };
    let fit = clustering::keg_with(points, opts.k, seed, &keg_opts)?;
    if fit.model.k() < opts.k {
        log::warn!("{} of {} requested clusters came out empty and were dropped", opts.k - fit.model.k(), opts.k);
    }
    info!(
        "KEG: {} components, {} EM iterations, log-likelihood {}",
        fit.model.k(),
        fit.iterations,
        fit.log_likelihood()
    );
    Ok(fit)
}

fn position_rows(st: &Stations) -> Vec<Vec<f64>> {
    st.points.iter().map(|&(x, y)| vec![x, y]).collect()
}

fn write_cluster_outputs(dir: &Path, st: &Stations, fit: &KegResult) -> Result<()> {
    let mut labels = String::from("bs_id,cluster\n");
    for (s, l) in st.stations.iter().zip(&fit.labels) {
        let _ = writeln!(labels, "{},{l}", s.id);
    }
    write(dir, "labels.csv", &labels)?;
    write(dir, "gmm.model", &fit.model.to_text())?;
    let mut trace = String::from("iteration,log_likelihood\n");
    for (i, ll) in fit.log_likelihood_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{ll:?}");
    }
    write(dir, "loglik.csv", &trace)
}

/// Reads a `bs_id,cluster` file.
pub fn read_labels(path: &Path) -> Result<BTreeMap<u32, usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::validation(format!("{}: {other:?}", path.display())),
        })?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["bs_id", "cluster"] {
        return Err(parse_err(1, "expected header bs_id,cluster".into()));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u32 = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| parse_err(line, "invalid bs_id".into()))?;
        let c: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| parse_err(line, "invalid cluster".into()))?;
        if out.insert(id, c).is_some() {
            return Err(parse_err(line, format!("station {id} labelled twice")));
        }
    }
    Ok(out)
}

fn labels_for(st: &Stations, labels: Option<&PathBuf>, opts: &ClusterOpts, seed: u64) -> Result<Vec<usize>> {
    match labels {
        Some(path) => {
            let map = read_labels(path)?;
            st.stations
                .iter()
                .map(|s| {
                    map.get(&s.id)
                        .copied()
                        .ok_or_else(|| Error::validation(format!("{}: station {} has no label", path.display(), s.id)))
                })
                .collect()
        }
        None => Ok(run_keg(&position_rows(st), opts, seed)?.labels),
    }
}

/// `lo:hi:steps`, evenly spaced and inclusive.
pub fn parse_bandwidth_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::validation(format!("bandwidth grid must be lo:hi:steps, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() || steps == 0 {
        return Err(Error::validation(format!("bandwidth grid needs 0 < lo <= hi and steps >= 1, got {text:?}")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

pub(super) fn synth(a: &SynthArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let cfg = data::SynthConfig {
        seed: a.out.seed,
        components: a.components,
        stations: a.stations,
        days: a.days,
        noise: a.noise,
        ..Default::default()
    };
    let sc = data::synth_scenario(&cfg)?;
    data::save_topology(&dir.join("topology.csv"), &sc.stations)?;
    data::save_traffic(&dir.join("traffic.csv"), &sc.traffic)?;
    let mut truth = String::from("bs_id,component,mean_lon,mean_lat\n");
    for (s, &k) in sc.stations.iter().zip(&sc.truth_labels) {
        let _ = writeln!(truth, "{},{k},{:?},{:?}", s.id, sc.truth_means[k].0, sc.truth_means[k].1);
    }
    write(&dir, "truth.csv", &truth)
}

pub(super) fn convert(a: &ConvertArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let input = std::fs::File::open(&a.raw).map_err(|e| Error::io(&a.raw, e))?;
    let path = dir.join("traffic.csv");
    let output = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let n = data::convert_raw_records(input, output, a.start_ts)?;
    info!("binned {n} station-hours");
    Ok(())
}

fn parse_hidden(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| Error::validation(format!("invalid hidden layer width {s:?}")))
        })
        .collect()
}

fn predict_config(seed: u64, history_days: usize, epochs: usize) -> PredictConfig {
    PredictConfig {
        history_days: (history_days > 0).then_some(history_days),
        train: TrainConfig {
            seed,
            max_epochs: epochs,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn write_prediction_outputs(dir: &Path, p: &Prediction) -> Result<()> {
    let mut csv = String::from("bs_id,day,hour,bytes\n");
    for (id, row) in p.station_ids.iter().zip(&p.values) {
        for (h, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{id},{},{},{v:?}", p.day, h + 1);
        }
    }
    write(dir, "predictions.csv", &csv)?;
    write(dir, "predictor.model", &p.model.to_text())
}

pub(super) fn predict(a: &PredictArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let traffic = load_traffic(&a.traffic, None, &dir)?;
    let mut cfg = predict_config(a.out.seed, a.history_days, a.epochs);
    cfg.hidden = parse_hidden(&a.hidden)?;
    cfg.per_station = a.per_station;
    cfg.train.learning_rate = a.learning_rate;
    if a.rprop {
        cfg.train.method = TrainMethod::Rprop;
    }
    let p = predictor::predict_next_day(&traffic, &cfg)?;
    let tested: Vec<f64> = p.reports.iter().map(|r| r.test_mse).filter(|v| v.is_finite()).collect();
    if !tested.is_empty() {
        info!("mean held-out MSE (normalised) {:.3e}", tested.iter().sum::<f64>() / tested.len() as f64);
    }
    write_prediction_outputs(&dir, &p)
}

pub(super) fn cluster(a: &ClusterArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let st = load_stations(&a.topology)?;
    let mut points = position_rows(&st);
    if let Some(weight) = a.traffic_feature {
        let path = a
            .traffic
            .as_ref()
            .ok_or_else(|| Error::validation("--traffic-feature needs --traffic"))?;
        let targs = TrafficArgs {
            traffic: path.clone(),
            baseline: data::DEFAULT_BASELINE_BYTES,
        };
        let traffic = load_traffic(&targs, Some(&st.stations), &dir)?;
        let (day, _) = choose_slot(&traffic, a.slot.day, Some(1))?;
        let feature: Vec<f64> = st
            .stations
            .iter()
            .map(|s| {
                let i = traffic.station_index(s.id).expect("matrix built for these stations");
                traffic.day_profile(i, day).iter().sum()
            })
            .collect();
        points = clustering::append_feature(&points, &feature, weight)?;
    }
    let fit = run_keg(&points, &a.cluster, a.out.seed)?;
    write_cluster_outputs(&dir, &st, &fit)
}

fn plan_text_and_summary(
    dir: &Path,
    plan: &placement::DeploymentPlan,
    projection: &Projection,
    all_schemes: bool,
) -> Result<()> {
    write(dir, "plan.txt", &plan.to_text(Some(projection)))?;
    let mut csv = String::from("scheme,positions,uavs,total_power_w\n");
    let schemes: Vec<Scheme> = if all_schemes { Scheme::ALL.to_vec() } else { vec![plan.scheme] };
    for s in schemes {
        let total = plan.total_for(s).unwrap_or(plan.total_power);
        let _ = writeln!(csv, "{s},{},{},{total:?}", plan.position.as_str(), plan.cells.len());
    }
    write(dir, "deploy_summary.csv", &csv)
}

pub(super) fn deploy(a: &DeployArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let params = radio(a.radio.as_ref())?;
    let st = load_stations(&a.topology)?;
    let traffic = load_traffic(&a.traffic, Some(&st.stations), &dir)?;
    let (day, hour) = choose_slot(&traffic, a.slot.day, a.slot.hour)?;
    info!("planning for day {day}, hour {hour}");
    let cells = cell_stations(&st, slot_rates(&traffic, day, hour))?;
    let labels = labels_for(&st, a.labels.as_ref(), &a.cluster, a.out.seed)?;
    let opts = PlanOptions {
        scheme: a.scheme,
        position: if a.mean_positions { PositionMode::UnweightedMean } else { PositionMode::WeightedCentroid },
        all_schemes: a.all_schemes,
    };
    let plan = placement::plan_deployment(&labels, &cells, &params, &opts)?;
    info!("{} UAVs, total power {:.6e} W", plan.cells.len(), plan.total_power);
    plan_text_and_summary(&dir, &plan, &st.projection, a.all_schemes)
}

pub(super) fn compare_access(a: &CompareAccessArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let params = radio(a.radio.as_ref())?;
    let grid = parse_bandwidth_grid(&a.bandwidth_grid)?;
    let st = load_stations(&a.topology)?;
    let traffic = load_traffic(&a.traffic, Some(&st.stations), &dir)?;
    let (day, hour) = choose_slot(&traffic, a.slot.day, a.slot.hour)?;
    let cells = cell_stations(&st, slot_rates(&traffic, day, hour))?;
    let labels = labels_for(&st, a.labels.as_ref(), &a.cluster, a.out.seed)?;

    // UAV positions are fixed from the configured bandwidth so only W varies.
    let base = placement::plan_deployment(&labels, &cells, &params, &PlanOptions::default())?;
    let mut rows: Vec<(f64, [f64; 3])> = Vec::with_capacity(grid.len());
    for &w in &grid {
        let p = params.with_bandwidth(w);
        p.validate()?;
        let mut totals = [0.0; 3];
        for c in &base.cells {
            for (t, &s) in totals.iter_mut().zip(Scheme::ALL.iter()) {
                *t += placement::cell_power(&c.cell, c.uav, &p, s)?;
            }
        }
        rows.push((w, totals));
    }
    for pair in rows.windows(2) {
        for (i, s) in Scheme::ALL.iter().enumerate() {
            let (prev, next) = (pair[0].1[i], pair[1].1[i]);
            if next > prev * (1.0 + 1e-9) {
                return Err(Error::validation(format!(
                    "{s} total power rises from {prev:e} W to {next:e} W at W = {} Hz",
                    pair[1].0
                )));
            }
        }
    }

    let mut csv = String::from("bandwidth_hz,rsma_w,fdma_w,tdma_w,rsma_vs_fdma_pct,rsma_vs_tdma_pct\n");
    let mut sums = [0.0; 3];
    for (w, t) in &rows {
        let _ = writeln!(
            csv,
            "{w:?},{:?},{:?},{:?},{:.4},{:.4}",
            t[0],
            t[1],
            t[2],
            access::percent_saving(t[0], t[1]),
            access::percent_saving(t[0], t[2])
        );
        for (s, v) in sums.iter_mut().zip(t) {
            *s += v;
        }
    }
    let _ = writeln!(
        csv,
        "all,{:?},{:?},{:?},{:.4},{:.4}",
        sums[0],
        sums[1],
        sums[2],
        access::percent_saving(sums[0], sums[1]),
        access::percent_saving(sums[0], sums[2])
    );
    write(&dir, "access_compare.csv", &csv)?;

    let series: Vec<(String, Vec<(f64, f64)>)> = Scheme::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string().to_uppercase(), rows.iter().map(|(w, t)| (*w, t[i])).collect()))
        .collect();
    let chart = svg::line_chart("Total transmit power vs bandwidth", "bandwidth (Hz)", "power (W)", &series, true);
    write(&dir, "access_compare.svg", &chart)
}

fn write_scheme_comparison(dir: &Path, report: &placement::FourSchemeReport) -> Result<()> {
    let worst = report.totals().iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let mut csv = String::from("scheme,uavs,total_power_w,saving_vs_worst_pct\n");
    let plans = [
        &report.clustered_optimized,
        &report.clustered_mean,
        &report.grid_optimized,
        &report.grid_mean,
    ];
    for ((name, total), plan) in report.totals().iter().zip(plans) {
        let _ = writeln!(
            csv,
            "{name},{},{total:?},{:.4}",
            plan.cells.len(),
            access::percent_saving(*total, worst)
        );
    }
    write(dir, "schemes_compare.csv", &csv)?;
    let bars: Vec<(String, f64)> = report.totals().iter().map(|(n, t)| (n.to_string(), *t)).collect();
    write(dir, "schemes_compare.svg", &svg::bar_chart("Total transmit power by scheme", "power (W)", &bars))?;
    info!(
        "full scheme saves {:.2}% against the worst and {:.2}% against neither",
        report.saving_vs_worst_pct(),
        report.saving_vs_neither_pct()
    );
    Ok(())
}

fn four_schemes(st: &Stations, cells: &[CellStation], opts: &ClusterOpts, seed: u64, params: &RadioParams, scheme: Scheme) -> Result<placement::FourSchemeReport> {
    let fit = run_keg(&position_rows(st), opts, seed)?;
    // the grid baseline gets as many cells as KEG actually produced
    placement::four_scheme_comparison(cells, &fit.labels, fit.model.k(), params, scheme)
}

pub(super) fn compare_schemes(a: &CompareSchemesArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let params = radio(a.radio.as_ref())?;
    let st = load_stations(&a.topology)?;
    let traffic = load_traffic(&a.traffic, Some(&st.stations), &dir)?;
    let (day, hour) = choose_slot(&traffic, a.slot.day, a.slot.hour)?;
    let cells = cell_stations(&st, slot_rates(&traffic, day, hour))?;
    let report = four_schemes(&st, &cells, &a.cluster, a.out.seed, &params, a.scheme)?;
    write_scheme_comparison(&dir, &report)
}

pub(super) fn pipeline(a: &PipelineArgs) -> Result<()> {
    let dir = out_dir(&a.out.out)?;
    let params = radio(a.radio.as_ref())?;
    let st = load_stations(&a.topology)?;
    let traffic = load_traffic(&a.traffic, Some(&st.stations), &dir)?;

    let p = predictor::predict_next_day(&traffic, &predict_config(a.out.seed, a.history_days, a.epochs))?;
    write_prediction_outputs(&dir, &p)?;

    let fit = run_keg(&position_rows(&st), &a.cluster, a.out.seed)?;
    write_cluster_outputs(&dir, &st, &fit)?;

    let mut totals = [0.0; HOURS_PER_DAY];
    for row in &p.values {
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    let hour = match a.hour {
        Some(h) if (1..=HOURS_PER_DAY).contains(&h) => h,
        Some(h) => return Err(Error::validation(format!("hour {h} outside 1..=24"))),
        None => busiest_hour(&totals),
    };
    info!("planning for forecast day {}, hour {hour}", p.day);
    let forecast: BTreeMap<u32, f64> = p.station_ids.iter().zip(&p.values).map(|(&id, row)| (id, row[hour - 1])).collect();
    let cells = cell_stations(&st, |id| Ok(placement::rate_from_bytes(forecast[&id])))?;

    let opts = PlanOptions {
        scheme: a.scheme,
        all_schemes: true,
        ..Default::default()
    };
    let plan = placement::plan_deployment(&fit.labels, &cells, &params, &opts)?;
    plan_text_and_summary(&dir, &plan, &st.projection, true)?;

    let report = placement::four_scheme_comparison(&cells, &fit.labels, fit.model.k(), &params, a.scheme)?;
    write_scheme_comparison(&dir, &report)
}
