//! CSV and JSON artifacts. Floats are written in the shortest form that
//! parses back to the same value, so files are byte-identical across runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::kernels::{AtomRow, DensityRow};
use crate::pde::PdeSolution;
use crate::scalar::Scalar;
use crate::simulator::PathEnsemble;
use crate::skew::SkewPath;

/// Shortest round-trip decimal form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    Ok(w)
}

/// `path_id,t,x,branch,l`, one row per stored node.
pub fn write_ensemble<S: Scalar>(path: &Path, ens: &PathEnsemble<S>) -> Result<()> {
    let mut w = writer(path, &["path_id", "t", "x", "branch", "l"])?;
    for (p, &id) in ens.paths.iter().zip(&ens.ids) {
        let id = id.to_string();
        for k in 0..p.len() {
            w.write_record([
                id.as_str(),
                &fmt_f64(p.times[k].to_f64_lossy()),
                &fmt_f64(p.x[k].to_f64_lossy()),
                &p.branch[k].to_string(),
                &fmt_f64(p.l[k].to_f64_lossy()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `path_id,t,y,branch,l` for signed skew paths.
pub fn write_skew_paths<S: Scalar>(path: &Path, paths: &[SkewPath<S>]) -> Result<()> {
    let mut w = writer(path, &["path_id", "t", "y", "branch", "l"])?;
    for (id, p) in paths.iter().enumerate() {
        let id = id.to_string();
        for k in 0..p.y.len() {
            w.write_record([
                id.as_str(),
                &fmt_f64(p.times[k].to_f64_lossy()),
                &fmt_f64(p.y[k].to_f64_lossy()),
                &p.branch[k].to_string(),
                &fmt_f64(p.l[k].to_f64_lossy()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `y,j,ell,density`.
pub fn write_density(path: &Path, rows: &[DensityRow]) -> Result<()> {
    let mut w = writer(path, &["y", "j", "ell", "density"])?;
    for r in rows {
        w.write_record([fmt_f64(r.y), r.j.to_string(), fmt_f64(r.ell), fmt_f64(r.density)])?;
    }
    w.flush()?;
    Ok(())
}

/// `y,j,density` for the atom at `ℓ = 0`.
pub fn write_atom(path: &Path, rows: &[AtomRow]) -> Result<()> {
    let mut w = writer(path, &["y", "j", "density"])?;
    for r in rows {
        w.write_record([fmt_f64(r.y), r.j.to_string(), fmt_f64(r.density)])?;
    }
    w.flush()?;
    Ok(())
}

/// `t,x,branch,l,u` at the given time indices.
pub fn write_pde<S: Scalar>(path: &Path, sol: &PdeSolution<S>, time_indices: &[usize]) -> Result<()> {
    let mut w = writer(path, &["t", "x", "branch", "l", "u"])?;
    for &n in time_indices {
        for (t, x, i, l, u) in sol.slice(n) {
            w.write_record([fmt_f64(t), fmt_f64(x), i.to_string(), fmt_f64(l), fmt_f64(u)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic CSV with a header and pre-formatted rows.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path, header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientPreset;
    use crate::junction::SpiderState;
    use crate::simulator::{simulate_ensemble, SchemeConfig};

    #[test]
    fn floats_round_trip() {
        for &x in &[0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 5e-324] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn ensemble_csv_round_trips() {
        let cs = CoefficientPreset::brownian_constant(vec![0.5, 0.5]).build::<f64>().unwrap();
        let init = SpiderState::at(0.0, 1, 0.2, 0.0).unwrap();
        let ens = simulate_ensemble(&cs, &init, &SchemeConfig::new(4, 4, 1.0, 9), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("paths.csv");
        write_ensemble(&file, &ens).unwrap();
        let mut r = csv::Reader::from_path(&file).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["path_id", "t", "x", "branch", "l"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 3 * 17);
        let x: f64 = rows[20][2].parse().unwrap();
        assert_eq!(x, ens.paths[1].x[3]);
    }
}
