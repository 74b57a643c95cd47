//! Line-delimited metrics: one self-describing JSON object per line.

use std::fs;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Serialize one record; keys serialize in sorted order, so identical
    /// runs produce identical byte streams.
    pub fn record(&mut self, value: serde_json::Value) {
        self.lines.push(value.to_string());
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
