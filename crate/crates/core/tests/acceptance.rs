//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

// `!(x < tol)` is deliberate: a NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ews_core::alert::{
    evaluate, multi_level, uni_level, ExceedanceSet, Mode, Observation, ParameterValues, Source,
    Thresholds, ALERTS_FILE, SMS_OUTBOX_FILE,
};
use ews_core::analytics::{ar_fit, ar_forecast, caine_threshold, AnalyticsError, RainEvent};
use ews_core::config::Config;
use ews_core::domain::{AlertLevel, NodeId, SensorKind};
use ews_core::ingest::{Repository, READINGS_FILE};
use ews_core::nodesim::load_scenario;
use ews_core::replay::{Replay, ReplayOptions};
use ews_core::wire::{crc16, Packet};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Option<Duration>, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn caine_fidelity() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/caine_oracle.csv");
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let (d, want) = line.split_once(',').ok_or("bad oracle row")?;
        let d: f64 = d.parse().map_err(|e| format!("{e}"))?;
        let want: f64 = want.parse().map_err(|e| format!("{e}"))?;
        let got = caine_threshold(d).map_err(|e| e.to_string())?;
        worst = worst.max(((got - want) / want).abs());
        n += 1;
    }
    ensure!(n == 1000, "oracle has {n} points, expected 1000");
    ensure!(worst < 1e-9, "max relative error {worst:e}");
    ensure!(caine_threshold(1.0) == Ok(14.82), "D=1 gave {:?}", caine_threshold(1.0));
    for d in [0.1, 0.167, 500.0, 600.0, f64::NAN, -1.0] {
        ensure!(
            matches!(caine_threshold(d), Err(AnalyticsError::OutOfDomain(_))),
            "D={d} accepted"
        );
    }
    Ok(format!("{n} points, max rel err {worst:.1e}"))
}

fn ladder_conformance() -> Check {
    use AlertLevel::*;
    // (rain, pore, displacement, inclination) -> level
    let table: [(bool, bool, bool, bool, AlertLevel); 16] = [
        (false, false, false, false, Green),
        (false, false, false, true, Green),
        (false, false, true, false, Green),
        (false, false, true, true, Green),
        (false, true, false, false, Green),
        (false, true, false, true, Green),
        (false, true, true, false, Green),
        (false, true, true, true, Green),
        (true, false, false, false, Yellow),
        (true, false, false, true, Yellow),
        (true, false, true, false, Yellow),
        (true, false, true, true, Yellow),
        (true, true, false, false, Orange),
        (true, true, false, true, Red),
        (true, true, true, false, Red),
        (true, true, true, true, Red),
    ];
    for (rain, pore, displacement, inclination, want) in table {
        let e = ExceedanceSet {
            rain,
            pore,
            displacement,
            inclination,
        };
        ensure!(multi_level(&e) == want, "{e:?}: got {:?}, want {want:?}", multi_level(&e));
    }
    let mut pairs = 0;
    for a in 0..16u8 {
        for b in 0..16u8 {
            let (ea, eb) = (ExceedanceSet::from_bits(a), ExceedanceSet::from_bits(b));
            if ea.is_subset(&eb) {
                pairs += 1;
                ensure!(multi_level(&ea) <= multi_level(&eb), "not monotone: {ea:?} vs {eb:?}");
            }
        }
    }
    Ok(format!("16/16 rows, {pairs} comparable pairs monotone"))
}

fn four_way_matrix() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let maybe = |rng: &mut ChaCha8Rng, hi: f64| rng.random_bool(0.8).then(|| rng.random_range(0.0..hi));
    for i in 0..1000 {
        let th = Thresholds {
            mt_rain_mm_per_h: rng.random_range(1.0..50.0),
            mt_pore_kpa: rng.random_range(1.0..100.0),
            mt_displacement_mm: rng.random_range(0.5..20.0),
            mt_inclination_deg: rng.random_range(0.5..10.0),
            prediction_horizon: 3,
            hold_period_s: 1800,
        };
        let mut values = || ParameterValues {
            rain_intensity_mm_per_h: maybe(&mut rng, 60.0),
            pore_kpa: maybe(&mut rng, 120.0),
            displacement_mm: maybe(&mut rng, 25.0),
            inclinometer_deg: maybe(&mut rng, 12.0),
            tiltmeter_deg: maybe(&mut rng, 12.0),
        };
        let current = values();
        let predicted = values();
        let active_rain_event = rng.random_bool(0.5).then(|| {
            let d = rng.random_range(0.2..400.0);
            let i = rng.random_range(0.0..30.0);
            RainEvent {
                start: 0,
                end: (d * 3600.0) as u64,
                total_mm: d * i,
                duration_h: d,
                mean_intensity_mm_per_h: i,
            }
        });
        let obs = Observation {
            current,
            predicted,
            active_rain_event,
        };
        let now = 1_000_000 + i;
        let decisions = evaluate(&obs, &th, now);
        let pairs: HashSet<(Mode, Source)> = decisions.iter().map(|d| (d.mode, d.source)).collect();
        ensure!(decisions.len() == 4 && pairs.len() == 4, "snapshot {i}: {pairs:?}");

        let caine = active_rain_event
            .map(|e| e.mean_intensity_mm_per_h >= 14.82 * e.duration_h.powf(-0.39))
            .unwrap_or(false);
        let hits = |v: &ParameterValues| ExceedanceSet {
            rain: caine || v.rain_intensity_mm_per_h.is_some_and(|x| x >= th.mt_rain_mm_per_h),
            pore: v.pore_kpa.is_some_and(|x| x >= th.mt_pore_kpa),
            displacement: v.displacement_mm.is_some_and(|x| x >= th.mt_displacement_mm),
            inclination: v.inclinometer_deg.is_some_and(|x| x >= th.mt_inclination_deg)
                || v.tiltmeter_deg.is_some_and(|x| x >= th.mt_inclination_deg),
        };
        for d in &decisions {
            let want = match d.source {
                Source::Current => hits(&current),
                Source::Predicted => hits(&predicted),
            };
            ensure!(d.exceedances == want, "snapshot {i} {:?}/{:?}: exceedances", d.source, d.mode);
            let level = match d.mode {
                Mode::Uni => uni_level(&want),
                Mode::Multi => multi_level(&want),
            };
            ensure!(d.level == level && d.timestamp == now, "snapshot {i}: level");
        }
    }
    Ok("1000 snapshots, 4 distinct (mode, source) decisions each".into())
}

fn exactly_once_in_store() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // 2000 sample times x 5 sensors, 10 s apart.
    let scenario = common::quiet_scenario(2000, 10);
    ensure!(scenario.steps.len() == 10_000, "scenario size");
    let end_ms = scenario.end_offset() * 1000;
    let opts = ReplayOptions {
        seed: 42,
        forced_disconnects: vec![end_ms / 4, end_ms / 2, 3 * end_ms / 4],
        ..Default::default()
    };
    let summary = Replay::new(common::config(0.2), scenario, dir.path(), opts)
        .and_then(Replay::run_to_completion)
        .map_err(|e| e.to_string())?;
    let (repo, warnings) = Repository::open_read_only(dir.path()).map_err(|e| e.to_string())?;
    ensure!(warnings.is_empty(), "store warnings {warnings:?}");
    let all = repo.all();
    let keys: BTreeSet<(NodeId, u32)> = all.iter().map(|r| (r.node_id, r.seq)).collect();
    let lines = fs::read_to_string(dir.path().join(READINGS_FILE))
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    ensure!(summary.complete, "replay did not finish:\n{summary}");
    ensure!(all.len() == 10_000, "{} records stored", all.len());
    ensure!(lines == 10_001, "{lines} lines in readings.csv");
    ensure!(keys.len() == 10_000, "{} distinct (node, seq)", keys.len());
    ensure!(
        keys.iter().map(|k| k.1).eq(1..=10_000),
        "seq set is not 1..=10000"
    );
    ensure!(summary.reconnects >= 1, "no Backoff->Connecting->Streaming recovery");
    ensure!(summary.forced_disconnects == 3, "{} forced disconnects", summary.forced_disconnects);
    Ok(format!(
        "10000 stored, {} frames dropped of {}, {} batch retransmits, {} recoveries",
        summary.frames_dropped, summary.data_frames_sent, summary.retransmitted_batches, summary.reconnects
    ))
}

fn codec_robustness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let p = common::random_packet(&mut rng);
        let bytes = p.encode().map_err(|e| format!("encode {i}: {e}"))?;
        let back = Packet::decode(&bytes).map_err(|e| format!("decode {i}: {e}"))?;
        ensure!(back == p, "round trip {i} changed the packet");
    }
    let reference = Packet::SendData(ews_core::wire::SendDataPayload {
        session_id: 0x0102_0304,
        seq: 77,
        timestamp: 1_270_080_000,
        readings: SensorKind::ALL.iter().map(|s| (*s, -1234)).collect(),
    })
    .encode()
    .map_err(|e| e.to_string())?;
    let mut flips = 0;
    for bit in 0..reference.len() * 8 {
        let mut b = reference.clone();
        b[bit / 8] ^= 1 << (bit % 8);
        ensure!(Packet::decode(&b).is_err(), "bit {bit} flip accepted");
        flips += 1;
    }
    let oracle = common::crc16_bitwise(b"123456789");
    ensure!(oracle == 0x29B1, "bitwise oracle gave {oracle:#06x}");
    ensure!(crc16(b"123456789") == oracle, "crc16 = {:#06x}", crc16(b"123456789"));
    Ok(format!("10000 round trips, {flips} single-bit flips rejected, check value {oracle:#06X}"))
}

fn ar_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (c, a1, a2) = (0.5, 1.2, -0.45);
    let mut x = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    while x.len() < 205 {
        let k = x.len();
        x.push(c + a1 * x[k - 1] + a2 * x[k - 2]);
    }
    let m = ar_fit(&x[..200], 2).map_err(|e| e.to_string())?;
    let errs = [
        (m.coefficients[0] - a1).abs(),
        (m.coefficients[1] - a2).abs(),
        (m.intercept - c).abs(),
    ];
    ensure!(errs.iter().all(|e| *e < 1e-6), "parameter errors {errs:?}");
    let f = ar_forecast(&m, &x[..200], 5).map_err(|e| e.to_string())?;
    let ferr = f.iter().zip(&x[200..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(ferr < 1e-6, "forecast error {ferr:e}");
    let k = vec![3.25; 50];
    let mk = ar_fit(&k, 2).map_err(|e| e.to_string())?;
    let fk = ar_forecast(&mk, &k, 10).map_err(|e| e.to_string())?;
    ensure!(fk.iter().all(|v| *v == 3.25), "constant forecast {fk:?}");
    Ok(format!(
        "param err {:.1e}, forecast err {ferr:.1e}, constant exact",
        errs.iter().fold(0.0f64, |a, b| a.max(*b))
    ))
}

static CONSOLE: Mutex<Vec<u8>> = Mutex::new(Vec::new());

struct SharedConsole;

impl Write for SharedConsole {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        CONSOLE.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn storm_escalation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/seven_day_rain.csv");
    let scenario = load_scenario(&fixture).map_err(|e| e.to_string())?;
    let config = Config::from_toml(&common::config_toml(0.0, "[sinks]\nfile = true\nsms = true\n"))
        .map_err(|e| e.to_string())?;
    let hold = config.thresholds.hold_period_s;
    CONSOLE.lock().unwrap().clear();
    let opts = ReplayOptions {
        speedup: Some(2.0e6),
        console: || Box::new(SharedConsole),
        ..Default::default()
    };
    let s = Replay::new(config, scenario, dir.path(), opts)
        .and_then(Replay::run_to_completion)
        .map_err(|e| e.to_string())?;

    let mut escalations = Vec::new();
    let mut active = AlertLevel::Green;
    let mut last_change = 0;
    for n in &s.alert_timeline {
        if n.level > active {
            escalations.push(n.level);
        } else {
            ensure!(
                n.ts >= last_change + hold,
                "de-escalation to {} at {} only {} s after the previous change",
                n.level,
                n.ts,
                n.ts - last_change
            );
        }
        active = n.level;
        last_change = n.ts;
    }
    ensure!(
        escalations == [AlertLevel::Yellow, AlertLevel::Orange, AlertLevel::Red],
        "escalations {escalations:?}"
    );
    let count = |name: &str| {
        fs::read_to_string(dir.path().join(name))
            .map(|t| t.lines().count())
            .unwrap_or(0)
    };
    let console = String::from_utf8(CONSOLE.lock().unwrap().clone()).map_err(|e| e.to_string())?;
    let n = s.alert_timeline.len();
    ensure!(count(ALERTS_FILE) == n, "alerts.ndjson has {} lines for {n} notifications", count(ALERTS_FILE));
    ensure!(count(SMS_OUTBOX_FILE) == n, "sms outbox has {} lines", count(SMS_OUTBOX_FILE));
    ensure!(console.lines().count() == n, "console printed {} lines", console.lines().count());
    ensure!(s.sink_failures == 0, "{} sink failures", s.sink_failures);
    let seq: Vec<String> = s.level_sequence().iter().map(|l| l.to_string()).collect();
    Ok(seq.join("->"))
}

fn durability() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = common::quiet_scenario(600, 30);
    let total = scenario.steps.len();
    let mid = scenario.end_offset() * 1000 / 2;
    let opts = ReplayOptions {
        seed: 5,
        ..Default::default()
    };
    let mut replay = Replay::new(common::config(0.2), scenario, dir.path(), opts).map_err(|e| e.to_string())?;
    replay.run_until(mid).map_err(|e| e.to_string())?;
    let station = replay.station().ok_or("station not running")?;
    let pre = station.repo().query_range(0, u64::MAX, None).map_err(|e| e.to_string())?;
    let acked_pre = replay.acked_batches().clone();
    ensure!(!pre.is_empty() && !acked_pre.is_empty(), "nothing stored before the kill");
    replay.kill_server();

    // A crash mid-append leaves a partial row behind.
    let mut f = OpenOptions::new()
        .append(true)
        .open(dir.path().join(READINGS_FILE))
        .map_err(|e| e.to_string())?;
    f.write_all(b"1270095000,1,piezome").map_err(|e| e.to_string())?;
    drop(f);

    // Let the node notice the outage before the station comes back.
    replay.run_until(mid + 90_000).map_err(|e| e.to_string())?;
    let warnings = replay.restart_server().map_err(|e| e.to_string())?;
    ensure!(warnings.iter().any(|w| w.contains("torn")), "torn row not reported: {warnings:?}");
    let restored = replay
        .station()
        .ok_or("station not running")?
        .repo()
        .query_range(0, u64::MAX, None)
        .map_err(|e| e.to_string())?;
    ensure!(restored == pre, "reopened store differs from the pre-kill store");

    let summary = replay.run_to_completion().map_err(|e| e.to_string())?;
    let (repo, _) = Repository::open_read_only(dir.path()).map_err(|e| e.to_string())?;
    let post = repo.query_range(0, u64::MAX, None).map_err(|e| e.to_string())?;
    let post_keys: HashSet<(NodeId, u32)> = post.iter().map(|r| (r.node_id, r.seq)).collect();
    for seq in &acked_pre {
        ensure!(post_keys.contains(&(NodeId(1), *seq)), "acked batch {seq} lost");
    }
    let pre_set: HashSet<_> = pre.iter().map(|r| (r.node_id, r.seq)).collect();
    let mut expected: Vec<_> = pre.clone();
    expected.extend(post.iter().filter(|r| !pre_set.contains(&(r.node_id, r.seq))).copied());
    expected.sort_by_key(|r| (r.timestamp, r.node_id, r.seq));
    ensure!(post == expected, "post-restart store is not pre-kill store plus new ingest");
    for r in &pre {
        ensure!(post.contains(r), "pre-kill record {r:?} changed or vanished");
    }
    ensure!(post_keys.len() == post.len(), "duplicates after restart");
    ensure!(summary.complete && post.len() == total, "{} of {total} stored", post.len());
    Ok(format!(
        "{} before kill ({} acked batches), {} after restart, torn row discarded",
        pre.len(),
        acked_pre.len(),
        post.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "caine curve fidelity", Some(Duration::from_secs(1)), caine_fidelity),
        (2, "alert ladder conformance", Some(Duration::from_secs(1)), ladder_conformance),
        (3, "four-way alarm matrix", Some(Duration::from_secs(5)), four_way_matrix),
        (4, "exactly-once in store", Some(Duration::from_secs(60)), exactly_once_in_store),
        (5, "codec robustness", Some(Duration::from_secs(10)), codec_robustness),
        (6, "AR predictor recovery", Some(Duration::from_secs(5)), ar_recovery),
        (7, "storm escalation", Some(Duration::from_secs(30)), storm_escalation),
        (8, "durability", None, durability),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f));
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(Ok(d)) => match limit {
                Some(l) if took > l => (false, format!("{d}; exceeded {l:?}")),
                _ => (true, d),
            },
            Ok(Err(e)) => (false, e),
            Err(_) => (false, "panicked".to_string()),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n} {name:<26} {} {:>8.2?}  {detail}",
            if ok { "PASS" } else { "FAIL" },
            took
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
