use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A rectangular table of preformatted cells with `#` header comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub title: String,
    /// Written as `# key=value` lines before the CSV header.
    pub meta: Vec<(String, String)>,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Table {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "row width");
        self.rows.push(row);
    }

    pub fn meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.push((key.to_string(), value.into()));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            writeln!(s, "# {k}={v}").unwrap();
        }
        let line = |cells: &[String]| cells.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",");
        writeln!(s, "{}", line(&self.headers)).unwrap();
        for r in &self.rows {
            writeln!(s, "{}", line(r)).unwrap();
        }
        s
    }

    /// Left-aligned first column, right-aligned others.
    pub fn to_text(&self) -> String {
        let n = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let render = |cells: &[String]| {
            let mut line = String::new();
            for (i, c) in cells.iter().enumerate() {
                let pad = width[i] - c.chars().count();
                if i == 0 {
                    line += c;
                    line += &" ".repeat(pad);
                } else {
                    line += "  ";
                    line += &" ".repeat(pad);
                    line += c;
                }
            }
            line.trim_end().to_string()
        };
        let mut s = String::new();
        if !self.title.is_empty() {
            writeln!(s, "{}", self.title).unwrap();
        }
        for (k, v) in &self.meta {
            writeln!(s, "{k}: {v}").unwrap();
        }
        let header = render(&self.headers);
        writeln!(s, "{header}").unwrap();
        let total: usize = width.iter().sum::<usize>() + 2 * (n.saturating_sub(1));
        writeln!(s, "{}", "-".repeat(total)).unwrap();
        for r in &self.rows {
            writeln!(s, "{}", render(r)).unwrap();
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.txt` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        Ok(vec![csv, txt])
    }
}

pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}
