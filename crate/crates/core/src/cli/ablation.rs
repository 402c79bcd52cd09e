//! Ablation grids: `"T=1..4; undirected; no-master; no-renorm;
//! neighbors-only; no-skip"`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MpadConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub name: String,
    pub config: MpadConfig,
}

fn bad(message: String) -> Error {
    Error::InvalidArgument(format!("ablation grid: {message}"))
}

fn parse_iterations(value: &str) -> Result<Vec<usize>> {
    let num = |s: &str| -> Result<usize> {
        let v: usize = s
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid iteration count {s:?}")))?;
        if v == 0 {
            return Err(bad("iteration count must be at least 1".into()));
        }
        Ok(v)
    };
    match value.split_once("..") {
        Some((lo, hi)) => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if lo > hi {
                return Err(bad(format!("empty range {value:?}")));
            }
            Ok((lo..=hi).collect())
        }
        None => Ok(vec![num(value)?]),
    }
}

/// Expands a grid into one configuration per row, applied on top of
/// `base`. Rows keep grid order; duplicates are dropped.
pub fn parse_grid(grid: &str, base: &MpadConfig) -> Result<Vec<GridEntry>> {
    let mut rows: Vec<GridEntry> = Vec::new();
    let mut push = |name: String, config: MpadConfig| {
        if !rows.iter().any(|r| r.config == config) {
            rows.push(GridEntry { name, config });
        }
    };
    for token in grid.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let mut config = base.clone();
        if let Some(value) = token.strip_prefix("T=") {
            for t in parse_iterations(value)? {
                push(
                    format!("T={t}"),
                    MpadConfig {
                        iterations: t,
                        ..base.clone()
                    },
                );
            }
            continue;
        }
        match token {
            "undirected" => config.directed = false,
            "no-master" => config.master_node = false,
            "no-renorm" => config.renormalize = false,
            "neighbors-only" => config.gru_combine = false,
            "no-skip" => config.master_skip = false,
            other => return Err(bad(format!("unknown token {other:?}"))),
        }
        push(token.to_owned(), config);
    }
    if rows.is_empty() {
        return Err(bad("no configurations".into()));
    }
    Ok(rows)
}

/// Grid rows with the unablated configuration marked, prepended when the
/// grid does not already contain it.
pub fn with_vanilla(entries: Vec<GridEntry>, vanilla: &MpadConfig) -> Vec<(GridEntry, bool)> {
    let mut out: Vec<(GridEntry, bool)> = Vec::with_capacity(entries.len() + 1);
    if !entries.iter().any(|e| &e.config == vanilla) {
        out.push((
            GridEntry {
                name: "vanilla".into(),
                config: vanilla.clone(),
            },
            true,
        ));
    }
    out.extend(entries.into_iter().map(|e| {
        let is_vanilla = &e.config == vanilla;
        (e, is_vanilla)
    }));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub vanilla: bool,
    pub best_epoch: usize,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Aligned text table; the vanilla row is starred.
pub fn format_table(rows: &[AblationResult]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |a| format!("{:.2}", 100.0 * a));
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            let mark = if r.vanilla { "*" } else { " " };
            [
                format!("{mark}{}", r.name),
                r.best_epoch.to_string(),
                fmt(r.val_acc),
                fmt(r.test_acc),
            ]
        })
        .collect();
    let header = [
        " configuration".to_owned(),
        "epoch".to_owned(),
        "val acc".to_owned(),
        "test acc".to_owned(),
    ];
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String; 4]| {
        let mut s = format!("{:<w$}", row[0], w = widths[0]);
        for (c, w) in row.iter().zip(widths).skip(1) {
            s.push_str(&format!("  {c:>w$}"));
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    for row in &cells {
        out.push_str(&line(row));
    }
    out.push_str("(* vanilla model)\n");
    out
}
