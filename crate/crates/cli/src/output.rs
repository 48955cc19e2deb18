//! Report emission in `kv` (one `key=value` per line) or aligned `text` form.

use std::fmt::Display;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Kv,
    Text,
}

#[derive(Debug, Default)]
pub struct Report {
    fields: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn field(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Kv => {
                for (k, v) in &self.fields {
                    out.push_str(&format!("{k}={v}\n"));
                }
            }
            Format::Text => {
                let width = self.fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &self.fields {
                    out.push_str(&format!("{k:<width$}  {v}\n"));
                }
            }
        }
        out
    }
}

/// `Some(x)` prints `x`, `None` prints `none`.
pub fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}
