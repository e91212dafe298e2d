use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use persona_core::config::OutputFormat;
use serde::Serialize;

pub fn write_json<T: Serialize>(dir: &Path, file: &str, value: &T, format: OutputFormat) -> Result<()> {
    let mut text = match format {
        OutputFormat::Json => serde_json::to_string(value)?,
        OutputFormat::JsonPretty => serde_json::to_string_pretty(value)?,
    };
    text.push('\n');
    write(dir, file, &text)
}

/// Header-first, comma-separated, LF-terminated rows.
pub fn write_csv(dir: &Path, file: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write(dir, file, &text)
}

fn write(dir: &Path, file: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(file);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
