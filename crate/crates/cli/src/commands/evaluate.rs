//! Merges the per-step metric tables (`rmse*.csv`) of several result
//! directories into one comparison of per-method means.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{create_dir, read_csv, write_csv};
use crate::error::{CliError, Result};

/// One metric table of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub input: String,
    pub name: String,
    pub index: String,
    pub methods: Vec<String>,
    /// Rows of `(index value, cells)`; `None` marks an empty cell.
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    /// Mean of each method over the non-empty cells.
    pub fn means(&self) -> Vec<Option<f64>> {
        (0..self.methods.len())
            .map(|j| {
                let vals: Vec<f64> = self.rows.iter().filter_map(|(_, r)| r[j]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub methods: Vec<String>,
    /// `(input, table, mean per method in `methods` order)`.
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read_table(input: &str, path: &Path) -> Result<Table> {
    let (header, records) = read_csv(path)?;
    if header.len() < 2 {
        return Err(CliError::format(path, "metric table needs an index and at least one method"));
    }
    let mut rows = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        let cells = rec[1..]
            .iter()
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse()
                        .map(Some)
                        .map_err(|_| CliError::format(path, format!("row {}: `{c}` is not a number", k + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].clone(), cells));
    }
    Ok(Table {
        input: input.to_string(),
        name: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        index: header[0].clone(),
        methods: header[1..].to_vec(),
        rows,
    })
}

/// Metric tables of every input, in input order then file-name order.
pub fn collect(inputs: &[PathBuf]) -> Result<Vec<Table>> {
    let missing: Vec<PathBuf> = inputs
        .iter()
        .filter(|d| !d.join("summary.json").is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut tables = Vec::new();
    for dir in inputs {
        let base = sanitize(&dir.file_name().unwrap_or(dir.as_os_str()).to_string_lossy());
        let mut label = base.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{base}-{k}");
            k += 1;
        }
        labels.push(label.clone());
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().is_some_and(|x| x == "csv")
                    && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("rmse"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::format(dir, "no rmse*.csv metric tables"));
        }
        for f in files {
            tables.push(read_table(&label, &f)?);
        }
    }
    Ok(tables)
}

pub fn compare(tables: &[Table]) -> Comparison {
    let mut methods: Vec<String> = Vec::new();
    for t in tables {
        for m in &t.methods {
            if !methods.contains(m) {
                methods.push(m.clone());
            }
        }
    }
    let rows = tables
        .iter()
        .map(|t| {
            let means = t.means();
            let cells = methods
                .iter()
                .map(|m| t.methods.iter().position(|x| x == m).and_then(|j| means[j]))
                .collect();
            (t.input.clone(), t.name.clone(), cells)
        })
        .collect();
    Comparison { methods, rows }
}

fn render_text(c: &Comparison) -> String {
    let mut header = vec!["input".to_string(), "table".to_string()];
    header.extend(c.methods.iter().cloned());
    let mut grid = vec![header];
    for (input, table, cells) in &c.rows {
        let mut row = vec![input.clone(), table.clone()];
        row.extend(cells.iter().map(|v| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into())));
        grid.push(row);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out += line.join("  ").trim_end();
        out.push('\n');
    }
    out
}

fn render_dat(t: &Table) -> String {
    let mut out = format!("# {} {}\n", t.index, t.methods.join(" "));
    for (idx, cells) in &t.rows {
        let vals: Vec<String> = cells
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "NaN".into()))
            .collect();
        out += &format!("{idx} {}\n", vals.join(" "));
    }
    out
}

pub fn run(inputs: &[PathBuf], out: &Path) -> Result<(Comparison, String)> {
    if inputs.is_empty() {
        return Err(CliError::Config("evaluate needs at least one result directory".into()));
    }
    let tables = collect(inputs)?;
    let cmp = compare(&tables);
    create_dir(out)?;
    let mut header = vec!["input".to_string(), "table".to_string()];
    header.extend(cmp.methods.iter().cloned());
    write_csv(
        &out.join("comparison.csv"),
        &header,
        cmp.rows.iter().map(|(i, t, cells)| {
            let mut row = vec![i.clone(), t.clone()];
            row.extend(cells.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            row
        }),
    )?;
    let text = render_text(&cmp);
    let path = out.join("comparison.txt");
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    for t in &tables {
        let path = out.join(format!("{}_{}.dat", t.input, sanitize(&t.name)));
        fs::write(&path, render_dat(t)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok((cmp, text.trim_end().to_string()))
}
