use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;

use super::StepMetrics;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,l_moco,l_tlm,l_total,lr";

/// CSV row; disabled objectives leave their column empty. Floats use the
/// shortest representation that round-trips exactly.
pub fn metrics_csv_line(m: &StepMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "{},{},{},{},{}",
        m.step,
        opt(m.l_moco),
        opt(m.l_tlm),
        m.l_total,
        m.lr
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(err(1, format!("expected header {METRICS_HEADER}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| err(i + 1, format!("bad number {s:?}"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        out.push(StepMetrics {
            step: f[0].parse().map_err(|_| err(i + 1, format!("bad step {:?}", f[0])))?,
            l_moco: opt(f[1])?,
            l_tlm: opt(f[2])?,
            l_total: num(f[3])?,
            lr: f[4].parse().map_err(|_| err(i + 1, format!("bad lr {:?}", f[4])))?,
        });
    }
    Ok(out)
}

/// Writes metrics rows from a background thread that owns the file.
pub struct MetricsWriter {
    path: PathBuf,
    tx: Option<Sender<String>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl MetricsWriter {
    /// Truncates `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::spawn(path, f, true)
    }

    /// Appends to an existing metrics file, for resumed runs.
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Self::spawn(path, f, false)
    }

    fn spawn(path: &Path, file: File, header: bool) -> Result<Self> {
        let (tx, rx) = channel::<String>();
        let handle = std::thread::spawn(move || -> std::io::Result<()> {
            let mut w = BufWriter::new(file);
            if header {
                writeln!(w, "{METRICS_HEADER}")?;
            }
            for line in rx {
                writeln!(w, "{line}")?;
            }
            w.flush()
        });
        Ok(Self {
            path: path.to_path_buf(),
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn send(&self, m: &StepMetrics) {
        if let Some(tx) = &self.tx {
            // A send only fails if the writer thread died; finish() reports it.
            let _ = tx.send(metrics_csv_line(m));
        }
    }

    /// Closes the channel and waits for every row to reach the file.
    pub fn finish(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        self.tx.take();
        match self.handle.take() {
            None => Ok(()),
            Some(h) => match h.join() {
                Ok(r) => r.map_err(|e| Error::io(&self.path, e)),
                Err(_) => Err(Error::Data(format!("metrics writer for {} panicked", self.path.display()))),
            },
        }
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
