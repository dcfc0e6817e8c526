//! Station configuration file (TOML).
//!
//! ```toml
//! store = "store"
//!
//! [thresholds]
//! mt_rain_mm_per_h = 20.0
//! mt_pore_kpa = 40.0
//! mt_displacement_mm = 5.0
//! mt_inclination_deg = 2.0
//! # hold_period_s = 1800, prediction_horizon = 3, ar_order = 2,
//! # ar_window = 48, dry_gap_h = 6, antecedent_lookback_h = 72
//!
//! [calibration]
//! rain_gauge = { gain = 0.2, offset = 0.0 }
//! piezometer = { gain = 0.1, offset = 0.0 }
//! extensometer = { gain = 0.01, offset = 0.0 }
//! inclinometer = { gain = 0.001, offset = 0.0 }
//! tiltmeter = { gain = 0.001, offset = 0.0 }
//!
//! [link]
//! drop_probability = 0.0
//!
//! [sinks]
//! file = true
//! sms = false
//! # webhook_url = "http://localhost:8080/alerts"
//! ```
//!
//! The four monitoring thresholds and calibration for every sensor have no
//! defaults. All missing keys are reported together.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;
use toml::{Table, Value};

use crate::alert::{
    AnalysisSettings, ConsoleSink, Dispatcher, FileSink, Sink, SmsOutboxSink, Thresholds,
    WebhookSink,
};
use crate::domain::{CalibrationConstants, SensorKind};
use crate::ingest::CalibrationTable;
use crate::session::LinkConfig;

pub const CONFIG_ENV: &str = "EWS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing mandatory configuration keys: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkSettings {
    pub file: bool,
    pub sms: bool,
    pub webhook_url: Option<String>,
    pub webhook_timeout: Duration,
}

impl Default for SinkSettings {
    fn default() -> Self {
        SinkSettings {
            file: true,
            sms: false,
            webhook_url: None,
            webhook_timeout: Duration::from_secs(5),
        }
    }
}

impl SinkSettings {
    /// Console first, then the optional sinks writing into `store`.
    pub fn dispatcher(&self, store: &Path, console: ConsoleSink) -> Dispatcher {
        let mut sinks: Vec<Box<dyn Sink>> = vec![Box::new(console)];
        if self.file {
            sinks.push(Box::new(FileSink::in_dir(store)));
        }
        if self.sms {
            sinks.push(Box::new(SmsOutboxSink::in_dir(store)));
        }
        if let Some(url) = &self.webhook_url {
            sinks.push(Box::new(WebhookSink::new(url.clone(), self.webhook_timeout)));
        }
        Dispatcher::new(sinks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub thresholds: Thresholds,
    pub analysis: AnalysisSettings,
    pub calibration: CalibrationTable,
    pub link: LinkConfig,
    pub store: PathBuf,
    pub sinks: SinkSettings,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let root: Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        let mut cx = Collector::default();

        cx.check_keys(&root, "", &["store", "thresholds", "calibration", "link", "sinks"]);
        let store = match root.get("store") {
            None => PathBuf::from("store"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(v) => {
                cx.invalid.push(format!("store must be a string, got {v}"));
                PathBuf::new()
            }
        };

        let empty = Table::new();
        let th = cx.section(&root, "thresholds").unwrap_or(&empty);
        cx.check_keys(
            th,
            "thresholds",
            &[
                "mt_rain_mm_per_h",
                "mt_pore_kpa",
                "mt_displacement_mm",
                "mt_inclination_deg",
                "hold_period_s",
                "prediction_horizon",
                "ar_order",
                "ar_window",
                "dry_gap_h",
                "antecedent_lookback_h",
            ],
        );
        let defaults = AnalysisSettings::default();
        let thresholds = Thresholds {
            mt_rain_mm_per_h: cx.float(th, "thresholds", "mt_rain_mm_per_h", None),
            mt_pore_kpa: cx.float(th, "thresholds", "mt_pore_kpa", None),
            mt_displacement_mm: cx.float(th, "thresholds", "mt_displacement_mm", None),
            mt_inclination_deg: cx.float(th, "thresholds", "mt_inclination_deg", None),
            hold_period_s: cx.uint(th, "thresholds", "hold_period_s", Thresholds::DEFAULT_HOLD_PERIOD_S),
            prediction_horizon: cx.uint(
                th,
                "thresholds",
                "prediction_horizon",
                Thresholds::DEFAULT_PREDICTION_HORIZON as u64,
            ) as usize,
        };
        let hours = |cx: &mut Collector, key, default_s: u64| {
            let h = cx.float(th, "thresholds", key, Some(default_s as f64 / 3600.0));
            if h > 0.0 && h.is_finite() {
                (h * 3600.0).round() as u64
            } else {
                cx.invalid.push(format!("thresholds.{key} must be positive, got {h}"));
                default_s
            }
        };
        let analysis = AnalysisSettings {
            ar_order: cx.uint(th, "thresholds", "ar_order", defaults.ar_order as u64) as usize,
            ar_window: cx.uint(th, "thresholds", "ar_window", defaults.ar_window as u64) as usize,
            dry_gap_s: hours(&mut cx, "dry_gap_h", defaults.dry_gap_s),
            antecedent_lookback_s: hours(&mut cx, "antecedent_lookback_h", defaults.antecedent_lookback_s),
        };

        let cal = cx.section(&root, "calibration").unwrap_or(&empty);
        let mut calibration = CalibrationTable::new();
        for key in cal.keys() {
            if key.parse::<SensorKind>().is_err() {
                cx.invalid.push(format!("calibration.{key}: unknown sensor"));
            }
        }
        for sensor in SensorKind::ALL {
            let name = sensor.name();
            let entry = cal.iter().find(|(k, _)| k.parse::<SensorKind>().ok() == Some(sensor));
            let Some((key, value)) = entry else {
                cx.missing.push(format!("calibration.{name}"));
                continue;
            };
            let Value::Table(t) = value else {
                cx.invalid.push(format!("calibration.{key} must be a table with gain and offset"));
                continue;
            };
            let section = format!("calibration.{key}");
            cx.check_keys(t, &section, &["gain", "offset"]);
            let gain = cx.float(t, &section, "gain", None);
            let offset = cx.float(t, &section, "offset", Some(0.0));
            if cx.missing.is_empty() && cx.invalid.is_empty() {
                match CalibrationConstants::new(sensor, gain, offset) {
                    Ok(c) => calibration.insert(c),
                    Err(e) => cx.invalid.push(e.to_string()),
                }
            }
        }

        let link = match root.get("link") {
            None => LinkConfig::default(),
            Some(v) => match v.clone().try_into::<LinkConfig>() {
                Ok(l) => {
                    if let Err(e) = l.validate() {
                        cx.invalid.push(format!("link: {e}"));
                    }
                    l
                }
                Err(e) => {
                    cx.invalid.push(format!("link: {}", e.message()));
                    LinkConfig::default()
                }
            },
        };

        let mut sinks = SinkSettings::default();
        if let Some(s) = cx.section(&root, "sinks") {
            cx.check_keys(s, "sinks", &["console", "file", "sms", "webhook_url", "webhook_timeout_s"]);
            if !cx.boolean(s, "sinks", "console", true) {
                cx.invalid.push("sinks.console cannot be disabled".into());
            }
            sinks.file = cx.boolean(s, "sinks", "file", true);
            sinks.sms = cx.boolean(s, "sinks", "sms", false);
            match s.get("webhook_url") {
                None => {}
                Some(Value::String(u)) => sinks.webhook_url = Some(u.clone()),
                Some(v) => cx.invalid.push(format!("sinks.webhook_url must be a string, got {v}")),
            }
            sinks.webhook_timeout = Duration::from_secs(cx.uint(s, "sinks", "webhook_timeout_s", 5));
        }

        if !cx.missing.is_empty() {
            return Err(ConfigError::Missing(cx.missing));
        }
        if let Err(e) = thresholds.validate() {
            cx.invalid.push(e.0);
        }
        if analysis.ar_order == 0 {
            cx.invalid.push("thresholds.ar_order must be at least 1".into());
        } else if analysis.ar_window < 2 * analysis.ar_order + 2 {
            cx.invalid.push(format!(
                "thresholds.ar_window must be at least {} for ar_order {}",
                2 * analysis.ar_order + 2,
                analysis.ar_order
            ));
        }
        if !cx.invalid.is_empty() {
            return Err(ConfigError::Invalid(cx.invalid));
        }
        Ok(Config {
            thresholds,
            analysis,
            calibration,
            link,
            store,
            sinks,
        })
    }
}

#[derive(Default)]
struct Collector {
    missing: Vec<String>,
    invalid: Vec<String>,
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl Collector {
    fn section<'a>(&mut self, root: &'a Table, name: &str) -> Option<&'a Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.invalid.push(format!("[{name}] must be a table"));
                None
            }
            None => None,
        }
    }

    fn check_keys(&mut self, t: &Table, section: &str, known: &[&str]) {
        for k in t.keys() {
            if !known.contains(&k.as_str()) {
                self.invalid.push(format!("unknown key {}", qualified(section, k)));
            }
        }
    }

    fn float(&mut self, t: &Table, section: &str, key: &str, default: Option<f64>) -> f64 {
        match (t.get(key), default) {
            (Some(Value::Float(f)), _) => *f,
            (Some(Value::Integer(i)), _) => *i as f64,
            (Some(v), _) => {
                self.invalid.push(format!("{} must be a number, got {v}", qualified(section, key)));
                f64::NAN
            }
            (None, Some(d)) => d,
            (None, None) => {
                self.missing.push(qualified(section, key));
                f64::NAN
            }
        }
    }

    fn uint(&mut self, t: &Table, section: &str, key: &str, default: u64) -> u64 {
        match t.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => {
                self.invalid.push(format!(
                    "{} must be a non-negative integer, got {v}",
                    qualified(section, key)
                ));
                default
            }
        }
    }

    fn boolean(&mut self, t: &Table, section: &str, key: &str, default: bool) -> bool {
        match t.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.invalid.push(format!("{} must be true or false, got {v}", qualified(section, key)));
                default
            }
        }
    }
}

/// Explicit path, else `$EWS_CONFIG`.
pub fn resolve_config_path(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}
