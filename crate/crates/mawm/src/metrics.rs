//! Line-delimited JSON metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mawm_core::trainer::Metric;

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?) })
    }

    pub fn write(&mut self, m: &Metric) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read(path: &Path) -> anyhow::Result<Vec<Metric>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
