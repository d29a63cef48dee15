//! Append-only training records written as CSV, and the summary written as
//! TOML.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,loss,success,recon_mse,valid_fraction";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    pub step: usize,
    pub loss: Option<f64>,
    pub success: Option<f64>,
    pub recon_mse: Option<f64>,
    pub valid_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Record>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("metrics line {line}: bad number {s:?}")))
}

impl MetricsLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    /// Last recorded value of a column.
    pub fn last<F: Fn(&Record) -> Option<f64>>(&self, f: F) -> Option<f64> {
        self.records.iter().rev().find_map(f)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.step,
                cell(r.loss),
                cell(r.success),
                cell(r.recon_mse),
                cell(r.valid_fraction)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Parse(
                "metrics file lacks the expected header".into(),
            ));
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!(
                    "metrics line {}: expected 5 fields",
                    i + 2
                )));
            }
            log.push(Record {
                step: f[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("metrics line {}: bad step", i + 2)))?,
                loss: parse_cell(f[1], i + 2)?,
                success: parse_cell(f[2], i + 2)?,
                recon_mse: parse_cell(f[3], i + 2)?,
                valid_fraction: parse_cell(f[4], i + 2)?,
            });
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Key-value summary of one command, serialized as TOML with sorted keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub table: toml::Table,
}

impl Summary {
    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) -> &mut Self {
        self.table.insert(key.to_string(), value.into());
        self
    }

    pub fn section(&mut self, key: &str, sub: Summary) -> &mut Self {
        self.table
            .insert(key.to_string(), toml::Value::Table(sub.table));
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        match self.table.get(key)? {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.table).expect("summary serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Self {
            table: text
                .parse()
                .map_err(|e: toml::de::Error| Error::Parse(e.message().to_string()))?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
