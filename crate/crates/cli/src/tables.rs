//! Offline `analyze` and `report` output.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use ews_core::alert::{evaluate, load_alert_history, observe, rain_events, AnalysisSettings};
use ews_core::analytics::{caine_threshold, ArPredictor, Predictor};
use ews_core::config::Config;
use ews_core::domain::SensorKind;
use ews_core::ingest::Repository;

use crate::Format;

const DEFAULT_HORIZON: usize = 3;

/// Opens `store` read-only, printing row-level warnings. Fails only when
/// there were rows but none of them parsed.
fn open_store(store: &Path) -> Result<Repository> {
    let (repo, warnings) = Repository::open_read_only(store)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if repo.is_empty() && !warnings.is_empty() {
        bail!("no parseable readings in {}", store.display());
    }
    Ok(repo)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn text_opt(v: Option<f64>, precision: usize) -> String {
    v.map(|x| format!("{x:.precision$}")).unwrap_or_else(|| "-".into())
}

pub const EVENTS_HEADER: &str =
    "event,start,end,duration_h,total_mm,mean_intensity_mm_per_h,caine_threshold_mm_per_h,exceeds_caine";

pub fn analyze(store: &Path, config: Option<&Config>, format: Format, out: &mut dyn Write) -> Result<()> {
    let repo = open_store(store)?;
    let settings = config.map(|c| c.analysis).unwrap_or_default();
    let events = rain_events(&repo, &settings);
    match format {
        Format::Csv => {
            writeln!(out, "{EVENTS_HEADER}")?;
            for (i, e) in events.iter().enumerate() {
                let limit = caine_threshold(e.duration_h).ok();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    i + 1,
                    e.start,
                    e.end,
                    e.duration_h,
                    e.total_mm,
                    e.mean_intensity_mm_per_h,
                    opt(limit),
                    limit.map(|l| (e.mean_intensity_mm_per_h >= l).to_string()).unwrap_or_default()
                )?;
            }
        }
        Format::Text => {
            writeln!(out, "rain events: {}", events.len())?;
            if events.is_empty() {
                return Ok(());
            }
            writeln!(
                out,
                "{:>4} {:>11} {:>11} {:>9} {:>9} {:>10} {:>10} {:>7}",
                "#", "start", "end", "dur_h", "total_mm", "mean_mm/h", "caine_mm/h", "exceeds"
            )?;
            let mut exceeding = 0;
            for (i, e) in events.iter().enumerate() {
                let limit = caine_threshold(e.duration_h).ok();
                let hit = limit.map(|l| e.mean_intensity_mm_per_h >= l);
                exceeding += usize::from(hit == Some(true));
                writeln!(
                    out,
                    "{:>4} {:>11} {:>11} {:>9.2} {:>9.2} {:>10.3} {:>10} {:>7}",
                    i + 1,
                    e.start,
                    e.end,
                    e.duration_h,
                    e.total_mm,
                    e.mean_intensity_mm_per_h,
                    text_opt(limit, 3),
                    hit.map_or("n/a", |h| if h { "yes" } else { "no" })
                )?;
            }
            writeln!(out, "events at or above the intensity-duration curve: {exceeding}")?;
        }
    }
    Ok(())
}

struct SensorRow {
    sensor: SensorKind,
    count: usize,
    first: Option<u64>,
    last: Option<u64>,
    min: Option<f64>,
    max: Option<f64>,
    latest: Option<f64>,
    forecast: Vec<f64>,
}

fn sensor_rows(repo: &Repository, settings: &AnalysisSettings, horizon: usize) -> Vec<SensorRow> {
    let predictor = ArPredictor {
        order: settings.ar_order,
        window: settings.ar_window,
    };
    SensorKind::ALL
        .into_iter()
        .map(|sensor| {
            let series = repo.series(sensor);
            let values: Vec<f64> = series.iter().map(|(_, v)| *v).collect();
            SensorRow {
                sensor,
                count: series.len(),
                first: series.first().map(|s| s.0),
                last: series.last().map(|s| s.0),
                min: values.iter().copied().reduce(f64::min),
                max: values.iter().copied().reduce(f64::max),
                latest: values.last().copied(),
                forecast: predictor.forecast(&values, horizon).unwrap_or_default(),
            }
        })
        .collect()
}

pub fn report(store: &Path, config: Option<&Config>, format: Format, out: &mut dyn Write) -> Result<()> {
    let repo = open_store(store)?;
    let settings = config.map(|c| c.analysis).unwrap_or_default();
    let horizon = config.map_or(DEFAULT_HORIZON, |c| c.thresholds.prediction_horizon);
    let rows = sensor_rows(&repo, &settings, horizon);
    let (history, warnings) = load_alert_history(store)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let assessment = config.zip(repo.max_timestamp()).map(|(c, now)| {
        let obs = observe(&repo, now, &c.analysis, c.thresholds.prediction_horizon);
        evaluate(&obs, &c.thresholds, now)
    });

    let join = |f: &[f64], sep: &str| f.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
    match format {
        Format::Csv => {
            writeln!(out, "sensor,unit,count,first_ts,last_ts,min,max,latest,forecast")?;
            for r in &rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.sensor,
                    r.sensor.unit(),
                    r.count,
                    r.first.map(|t| t.to_string()).unwrap_or_default(),
                    r.last.map(|t| t.to_string()).unwrap_or_default(),
                    opt(r.min),
                    opt(r.max),
                    opt(r.latest),
                    join(&r.forecast, ";")
                )?;
            }
            if let Some(decisions) = &assessment {
                writeln!(out)?;
                writeln!(out, "ts,source,mode,level,exceedances")?;
                for d in decisions {
                    writeln!(
                        out,
                        "{},{:?},{:?},{},{}",
                        d.timestamp,
                        d.source,
                        d.mode,
                        d.level,
                        d.exceedances.to_string().replace(',', ";")
                    )?;
                }
            }
            writeln!(out)?;
            writeln!(out, "ts,level,mode,source,exceedances,message")?;
            for n in &history {
                writeln!(
                    out,
                    "{},{},{:?},{:?},{},{}",
                    n.ts,
                    n.level,
                    n.mode,
                    n.source,
                    n.exceedances.to_string().replace(',', ";"),
                    n.message.replace(',', ";")
                )?;
            }
        }
        Format::Text => {
            writeln!(out, "sensors ({} readings in store)", repo.len())?;
            writeln!(
                out,
                "  {:<13} {:>6} {:>7} {:>11} {:>11} {:>10} {:>10} {:>10}  forecast (+{horizon})",
                "sensor", "unit", "count", "first", "last", "min", "max", "latest"
            )?;
            for r in &rows {
                writeln!(
                    out,
                    "  {:<13} {:>6} {:>7} {:>11} {:>11} {:>10} {:>10} {:>10}  {}",
                    r.sensor.to_string(),
                    r.sensor.unit(),
                    r.count,
                    r.first.map_or("-".into(), |t| t.to_string()),
                    r.last.map_or("-".into(), |t| t.to_string()),
                    text_opt(r.min, 3),
                    text_opt(r.max, 3),
                    text_opt(r.latest, 3),
                    if r.forecast.is_empty() {
                        "-".to_string()
                    } else {
                        r.forecast.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
                    }
                )?;
            }
            writeln!(out)?;
            match &assessment {
                Some(decisions) => {
                    writeln!(out, "assessment at {}", decisions[0].timestamp)?;
                    for d in decisions {
                        writeln!(
                            out,
                            "  {:<9} {:<5} {:<6} [{}]",
                            format!("{:?}", d.source),
                            format!("{:?}", d.mode),
                            d.level,
                            d.exceedances
                        )?;
                    }
                }
                None if config.is_none() => writeln!(out, "assessment: no thresholds configured")?,
                None => writeln!(out, "assessment: store is empty")?,
            }
            writeln!(out)?;
            writeln!(out, "alert history ({} notifications)", history.len())?;
            for n in &history {
                writeln!(out, "  {:>11} {:<6} {}", n.ts, n.level, n.message)?;
            }
        }
    }
    Ok(())
}
