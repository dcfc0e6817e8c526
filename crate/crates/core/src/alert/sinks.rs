use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use super::Notification;
use crate::domain::{AlertLevel, Timestamp};

pub const ALERTS_FILE: &str = "alerts.ndjson";
pub const SMS_OUTBOX_FILE: &str = "sms_outbox.txt";

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("console: {0}")]
    Console(#[source] io::Error),
    #[error("webhook {url}: {reason}")]
    Webhook { url: String, reason: String },
}

pub trait Sink: Send {
    fn name(&self) -> &str;
    fn deliver(&mut self, n: &Notification) -> Result<(), SinkError>;
}

/// Human-readable line per notification on any writer (stdout by default).
pub struct ConsoleSink {
    out: Box<dyn Write + Send>,
}

impl ConsoleSink {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        ConsoleSink { out }
    }

    pub fn stdout() -> Self {
        Self::new(Box::new(io::stdout()))
    }
}

impl Sink for ConsoleSink {
    fn name(&self) -> &str {
        "console"
    }

    fn deliver(&mut self, n: &Notification) -> Result<(), SinkError> {
        writeln!(self.out, "[{}] {:<6} {}", n.ts, n.level, n.message)
            .and_then(|_| self.out.flush())
            .map_err(SinkError::Console)
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), SinkError> {
    let io = |source| SinkError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(format!("{line}\n").as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

/// Appends the JSON record to `alerts.ndjson`.
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink { path: path.into() }
    }

    pub fn in_dir(dir: &Path) -> Self {
        Self::new(dir.join(ALERTS_FILE))
    }
}

impl Sink for FileSink {
    fn name(&self) -> &str {
        "file"
    }

    fn deliver(&mut self, n: &Notification) -> Result<(), SinkError> {
        append_line(&self.path, &n.to_json())
    }
}

/// Reads the notification history written by [`FileSink`] in `dir`,
/// oldest first. Unparseable lines are skipped with a warning; a missing
/// file is an empty history.
pub fn load_alert_history(dir: &Path) -> Result<(Vec<Notification>, Vec<String>), SinkError> {
    let path = dir.join(ALERTS_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), Vec::new())),
        Err(source) => return Err(SinkError::Io { path, source }),
    };
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<Notification>(line) {
            Ok(n) => history.push(n),
            Err(e) => warnings.push(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    Ok((history, warnings))
}

/// Stand-in for an SMS gateway: one rendered message per line in an outbox
/// file.
pub struct SmsOutboxSink {
    path: PathBuf,
}

impl SmsOutboxSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        SmsOutboxSink { path: path.into() }
    }

    pub fn in_dir(dir: &Path) -> Self {
        Self::new(dir.join(SMS_OUTBOX_FILE))
    }
}

impl Sink for SmsOutboxSink {
    fn name(&self) -> &str {
        "sms"
    }

    fn deliver(&mut self, n: &Notification) -> Result<(), SinkError> {
        let text = n.message.replace(['\n', '\r'], " ");
        append_line(&self.path, &format!("{} {}: {}", n.ts, n.level.name().to_uppercase(), text))
    }
}

/// POSTs the JSON record to a URL.
pub struct WebhookSink {
    url: String,
    agent: ureq::Agent,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        WebhookSink {
            url: url.into(),
            agent,
        }
    }
}

impl Sink for WebhookSink {
    fn name(&self) -> &str {
        "webhook"
    }

    fn deliver(&mut self, n: &Notification) -> Result<(), SinkError> {
        let fail = |reason: String| SinkError::Webhook {
            url: self.url.clone(),
            reason,
        };
        let resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(n.to_json())
            .map_err(|e| fail(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(fail(format!("HTTP {}", resp.status())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered,
    /// Same `(level, ts)` already delivered to this sink.
    Suppressed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkResult {
    pub sink: String,
    pub outcome: DeliveryOutcome,
    pub attempts: u32,
}

/// Notification keys a sink has already accepted.
type DeliveredKeys = HashSet<(AlertLevel, Timestamp)>;

/// Fans notifications out to every configured sink. A failing sink is
/// retried once and never prevents delivery to the others.
pub struct Dispatcher {
    sinks: Vec<(Box<dyn Sink>, DeliveredKeys)>,
}

impl Dispatcher {
    pub fn new(sinks: Vec<Box<dyn Sink>>) -> Self {
        Dispatcher {
            sinks: sinks.into_iter().map(|s| (s, HashSet::new())).collect(),
        }
    }

    pub fn sink_names(&self) -> Vec<String> {
        self.sinks.iter().map(|(s, _)| s.name().to_string()).collect()
    }

    pub fn dispatch(&mut self, n: &Notification) -> Vec<SinkResult> {
        self.sinks
            .iter_mut()
            .map(|(sink, sent)| {
                let name = sink.name().to_string();
                if sent.contains(&n.key()) {
                    return SinkResult {
                        sink: name,
                        outcome: DeliveryOutcome::Suppressed,
                        attempts: 0,
                    };
                }
                let mut attempts = 0;
                let mut last_err = None;
                while attempts < 2 {
                    attempts += 1;
                    match sink.deliver(n) {
                        Ok(()) => {
                            last_err = None;
                            break;
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                let outcome = match last_err {
                    None => {
                        sent.insert(n.key());
                        DeliveryOutcome::Delivered
                    }
                    Some(e) => {
                        log::error!("sink {name} failed after {attempts} attempts: {e}");
                        DeliveryOutcome::Failed(e.to_string())
                    }
                };
                SinkResult {
                    sink: name,
                    outcome,
                    attempts,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alert::{ExceedanceSet, Mode, Source};
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    fn note(level: AlertLevel, ts: Timestamp) -> Notification {
        Notification {
            ts,
            level,
            mode: Mode::Multi,
            source: Source::Current,
            exceedances: ExceedanceSet::from_bits(1),
            message: format!("Alert raised to {level}"),
        }
    }

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    struct Flaky {
        fails_left: u32,
    }

    impl Sink for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn deliver(&mut self, _: &Notification) -> Result<(), SinkError> {
            if self.fails_left > 0 {
                self.fails_left -= 1;
                Err(SinkError::Console(io::Error::other("boom")))
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn console_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let console = Shared::default();
        let mut d = Dispatcher::new(vec![
            Box::new(ConsoleSink::new(Box::new(console.clone()))),
            Box::new(FileSink::in_dir(dir.path())),
        ]);
        let n = note(AlertLevel::Yellow, 10);
        let r = d.dispatch(&n);
        assert!(r.iter().all(|r| r.outcome == DeliveryOutcome::Delivered));
        let text = std::fs::read_to_string(dir.path().join(ALERTS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: Notification = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, n);
        assert!(String::from_utf8(console.0.lock().unwrap().clone()).unwrap().contains("Yellow"));
    }

    #[test]
    fn history_skips_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_alert_history(dir.path()).unwrap().0.is_empty());
        let mut f = FileSink::in_dir(dir.path());
        f.deliver(&note(AlertLevel::Yellow, 10)).unwrap();
        append_line(&dir.path().join(ALERTS_FILE), "{not json").unwrap();
        f.deliver(&note(AlertLevel::Orange, 20)).unwrap();
        let (h, w) = load_alert_history(dir.path()).unwrap();
        assert_eq!(h.iter().map(|n| n.ts).collect::<Vec<_>>(), [10, 20]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn duplicate_dispatch_suppressed() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = Dispatcher::new(vec![Box::new(FileSink::in_dir(dir.path()))]);
        let n = note(AlertLevel::Red, 5);
        d.dispatch(&n);
        let r = d.dispatch(&n);
        assert_eq!(r[0].outcome, DeliveryOutcome::Suppressed);
        d.dispatch(&note(AlertLevel::Red, 6));
        let text = std::fs::read_to_string(dir.path().join(ALERTS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn webhook_down_does_not_block_file() {
        let dir = tempfile::tempdir().unwrap();
        // Bind then drop to get a port nobody listens on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut d = Dispatcher::new(vec![
            Box::new(WebhookSink::new(format!("http://127.0.0.1:{port}/hook"), Duration::from_secs(2))),
            Box::new(FileSink::in_dir(dir.path())),
        ]);
        let r = d.dispatch(&note(AlertLevel::Orange, 1));
        assert!(matches!(r[0].outcome, DeliveryOutcome::Failed(_)));
        assert_eq!(r[0].attempts, 2);
        assert_eq!(r[1].outcome, DeliveryOutcome::Delivered);
    }

    #[test]
    fn webhook_posts_the_ndjson_record() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            stream
                .write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
                .unwrap();
            (request_line, String::from_utf8(body).unwrap())
        });
        let mut sink = WebhookSink::new(format!("http://{addr}/alerts"), Duration::from_secs(5));
        let n = note(AlertLevel::Red, 99);
        sink.deliver(&n).unwrap();
        let (request_line, body) = server.join().unwrap();
        assert!(request_line.starts_with("POST /alerts"));
        assert_eq!(body, n.to_json());
    }

    #[test]
    fn transient_failure_retried_once() {
        let mut d = Dispatcher::new(vec![Box::new(Flaky { fails_left: 1 })]);
        let r = d.dispatch(&note(AlertLevel::Yellow, 1));
        assert_eq!(r[0].outcome, DeliveryOutcome::Delivered);
        assert_eq!(r[0].attempts, 2);
        let mut d = Dispatcher::new(vec![Box::new(Flaky { fails_left: 5 })]);
        let r = d.dispatch(&note(AlertLevel::Yellow, 1));
        assert!(matches!(r[0].outcome, DeliveryOutcome::Failed(_)));
    }

    #[test]
    fn sms_outbox_one_line_per_message() {
        let dir = tempfile::tempdir().unwrap();
        let mut sms = SmsOutboxSink::in_dir(dir.path());
        sms.deliver(&note(AlertLevel::Orange, 3)).unwrap();
        sms.deliver(&note(AlertLevel::Red, 4)).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SMS_OUTBOX_FILE)).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("4 RED:"));
    }
}
