//! CSV files with `# key = value` header comments.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! file back gives bit-identical values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::adrc::TraceRow;
use crate::error::{Error, Result};
use crate::kinematics::{ChainGeometry, Pose};
use crate::learner::LearningRecord;
use crate::mass::{BetaEnsemble, BetaVector};
use crate::metalearn::{FilteredPoses, PosePool};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_parsed<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_error(path, format!("missing or bad header `{key}`")))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn parse_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in &table.meta {
        writeln!(out, "# {k} = {v}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&table.columns)?;
        for row in &table.rows {
            if row.len() != table.columns.len() {
                return Err(Error::dims("csv row width", table.columns.len(), row.len()));
            }
            w.write_record(row.iter().map(|v| format_float(*v)))?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.trim_start_matches('#').split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let columns = reader.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(Table { meta, columns, rows })
}

fn angle_columns(links: usize) -> Vec<String> {
    (1..=links).map(|i| format!("q{i}")).collect()
}

fn beta_columns(links: usize) -> Vec<String> {
    (1..=links)
        .flat_map(|i| ["mx", "my", "mz", "m"].map(|p| format!("{p}{i}")))
        .collect()
}

pub fn write_pool(path: &Path, pool: &PosePool) -> Result<()> {
    let mut t = Table::new(angle_columns(pool.poses.nrows()))
        .with_meta("seed", pool.seed)
        .with_meta("acceptance_rate", format_float(pool.acceptance_rate));
    t.rows = pool.poses.column_iter().map(|c| c.iter().copied().collect()).collect();
    write_table(path, &t)
}

pub fn read_pool(path: &Path, geom: &ChainGeometry) -> Result<PosePool> {
    let t = read_table(path)?;
    if t.columns.len() != geom.link_count() {
        return Err(parse_error(
            path,
            format!("expected {} angle columns", geom.link_count()),
        ));
    }
    let poses: Vec<Pose> = t.rows.iter().map(|r| Pose::new(r.clone())).collect();
    let mut pool = PosePool::from_poses(geom, &poses, t.meta_parsed("seed", path)?)?;
    pool.acceptance_rate = t.meta_parsed("acceptance_rate", path)?;
    Ok(pool)
}

pub fn write_ensemble(path: &Path, ens: &BetaEnsemble) -> Result<()> {
    let links = ens.betas.nrows() / 4;
    let mut columns = beta_columns(links);
    columns.push("probe_error".into());
    let mut t = Table::new(columns)
        .with_meta("seed", ens.seed)
        .with_meta("noise_fraction", format_float(ens.noise_fraction))
        .with_meta("target_error", format_float(ens.target_error));
    t.rows = ens
        .betas
        .column_iter()
        .zip(&ens.probe_errors)
        .map(|(c, e)| c.iter().copied().chain([*e]).collect())
        .collect();
    write_table(path, &t)
}

pub fn read_ensemble(path: &Path) -> Result<BetaEnsemble> {
    let t = read_table(path)?;
    let width = t.columns.len();
    if width < 2 || (width - 1) % 4 != 0 || t.rows.is_empty() {
        return Err(parse_error(path, "not an ensemble table"));
    }
    let dim = width - 1;
    let betas = DMatrix::from_fn(dim, t.rows.len(), |i, k| t.rows[k][i]);
    Ok(BetaEnsemble {
        betas,
        seed: t.meta_parsed("seed", path)?,
        noise_fraction: t.meta_parsed("noise_fraction", path)?,
        target_error: t.meta_parsed("target_error", path)?,
        probe_errors: t.rows.iter().map(|r| r[dim]).collect(),
    })
}

pub fn write_beta(path: &Path, beta: &BetaVector, meta: &[(&str, String)]) -> Result<()> {
    let mut t = Table::new(beta_columns(beta.link_count()));
    for (k, v) in meta {
        t = t.with_meta(k, v);
    }
    t.rows = vec![beta.as_vector().iter().copied().collect()];
    write_table(path, &t)
}

pub fn read_beta(path: &Path) -> Result<BetaVector> {
    let t = read_table(path)?;
    match t.rows.as_slice() {
        [row] if !row.is_empty() && row.len() % 4 == 0 => Ok(BetaVector::from_slice(row)),
        _ => Err(parse_error(path, "expected one row of 4L values")),
    }
}

pub fn write_filtered(path: &Path, filtered: &FilteredPoses, meta: &[(&str, String)]) -> Result<()> {
    let links = filtered.selections.first().map_or(0, |s| s.pose.len());
    let mut columns = vec!["order".to_string(), "pool_index".to_string()];
    columns.extend(angle_columns(links));
    columns.extend(["aggregate_error".into(), "max_error".into()]);
    let mut t = Table::new(columns);
    for (k, v) in meta {
        t = t.with_meta(k, v);
    }
    t.rows = filtered
        .selections
        .iter()
        .enumerate()
        .map(|(i, s)| {
            [i as f64, s.index as f64]
                .into_iter()
                .chain(s.pose.angles().iter().copied())
                .chain([s.aggregate_error, s.max_error])
                .collect()
        })
        .collect();
    write_table(path, &t)
}

/// Poses of a filtered-poses file with their pool indices, in order.
pub fn read_filtered(path: &Path, geom: &ChainGeometry) -> Result<Vec<(usize, Pose)>> {
    let t = read_table(path)?;
    let links = geom.link_count();
    if t.columns.len() != links + 4 {
        return Err(parse_error(path, format!("expected {} columns", links + 4)));
    }
    Ok(t.rows
        .iter()
        .map(|r| (r[1] as usize, Pose::new(r[2..2 + links].to_vec())))
        .collect())
}

pub fn write_learning_curve(path: &Path, trace: &[LearningRecord], meta: &[(&str, String)]) -> Result<()> {
    let columns = ["iteration", "pose_id", "abs_error_pre", "abs_error_post", "mass_sum"]
        .map(String::from)
        .to_vec();
    let mut t = Table::new(columns);
    for (k, v) in meta {
        t = t.with_meta(k, v);
    }
    t.rows = trace
        .iter()
        .map(|r| {
            vec![
                r.iteration as f64,
                r.pose_id as f64,
                r.pre_error.abs(),
                r.post_error.abs(),
                r.mass_sum,
            ]
        })
        .collect();
    write_table(path, &t)
}

pub fn write_trace(path: &Path, trace: &[TraceRow], meta: &[(&str, String)]) -> Result<()> {
    let columns = [
        "t",
        "x",
        "x_dot",
        "theta",
        "theta_dot",
        "tau_w",
        "f_x_hat",
        "f_theta_hat",
        "saturated",
    ]
    .map(String::from)
    .to_vec();
    let mut t = Table::new(columns);
    for (k, v) in meta {
        t = t.with_meta(k, v);
    }
    t.rows = trace
        .iter()
        .map(|r| {
            vec![
                r.t,
                r.state.x,
                r.state.x_dot,
                r.state.theta,
                r.state.theta_dot,
                r.tau,
                r.f_x_hat,
                r.f_theta_hat,
                if r.saturated { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    write_table(path, &t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let values = vec![0.1 + 0.2, -1e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0, 1.0 / 3.0];
        let mut t = Table::new((0..values.len()).map(|i| format!("c{i}")).collect()).with_meta("seed", 42);
        t.rows = vec![values.clone(), values.iter().map(|v| v * 7.0).collect()];
        write_table(&path, &t).unwrap();
        let back = read_table(&path).unwrap();
        assert_eq!(back.meta("seed"), Some("42"));
        for (a, b) in back.rows.iter().flatten().zip(t.rows.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ragged_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.rows = vec![vec![1.0]];
        assert!(write_table(&dir.path().join("x.csv"), &t).is_err());
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,zebra\n").unwrap();
        assert!(matches!(read_table(&path), Err(Error::Parse { .. })));
    }
}
