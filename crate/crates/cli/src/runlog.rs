use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::json;

/// Line-delimited JSON logger: every record goes to the run log and
/// warnings are mirrored to stderr.
pub struct JsonLog {
    file: Mutex<Option<BufWriter<File>>>,
}

static LOGGER: JsonLog = JsonLog { file: Mutex::new(None) };

pub fn install(file: File, verbose: bool) {
    *LOGGER.file.lock().unwrap() = Some(BufWriter::new(file));
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(if verbose { LevelFilter::Debug } else { LevelFilter::Info });
    }
}

pub fn flush() {
    if let Some(w) = LOGGER.file.lock().unwrap().as_mut() {
        let _ = w.flush();
    }
}

fn line(record: &Record) -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    json!({
        "t": t,
        "level": record.level().as_str().to_ascii_lowercase(),
        "target": record.target(),
        "msg": record.args().to_string(),
    })
    .to_string()
}

impl Log for JsonLog {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let text = line(record);
        if record.level() == Level::Warn {
            eprintln!("{text}");
        }
        if let Some(w) = self.file.lock().unwrap().as_mut() {
            let _ = writeln!(w, "{text}");
        }
    }

    fn flush(&self) {
        flush();
    }
}
