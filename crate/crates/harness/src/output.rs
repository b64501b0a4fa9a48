//! Legacy VTK field dumps and CSV tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use hyflux_core::fr::Discretization;
use hyflux_core::partition::PartitionReport;

use crate::HarnessError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// ASCII unstructured grid: the solution points of each element form a
/// lattice of `p^2` quads, with nodal values as point data.
pub fn write_vtk(d: &Discretization, u: &[f64], names: &[&str], path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let (ns, nv, n1) = (d.n_solution(), d.n_vars(), d.re.n1d());
    let ne = d.n_elements();
    let p = n1 - 1;
    let n_cells = ne * p * p;
    let mut out = String::new();
    out += "# vtk DataFile Version 3.0\nhyflux solution\nASCII\nDATASET UNSTRUCTURED_GRID\n";
    out += &format!("POINTS {} double\n", ne * ns);
    for g in &d.geom.elements {
        for x in &g.coords {
            out += &format!("{:.17e} {:.17e} 0\n", x[0], x[1]);
        }
    }
    out += &format!("CELLS {} {}\n", n_cells, 5 * n_cells);
    for e in 0..ne {
        let base = e * ns;
        for b in 0..p {
            for a in 0..p {
                let i = base + a + n1 * b;
                out += &format!("4 {} {} {} {}\n", i, i + 1, i + 1 + n1, i + n1);
            }
        }
    }
    out += &format!("CELL_TYPES {n_cells}\n");
    for _ in 0..n_cells {
        out += "9\n";
    }
    out += &format!("POINT_DATA {}\n", ne * ns);
    for v in 0..nv {
        let name = names.get(v).copied().unwrap_or("var");
        out += &format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n");
        for k in 0..ne * ns {
            out += &format!("{:.17e}\n", u[k * nv + v]);
        }
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Header row from the field names, one row per record.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    flag_breakdown: String,
}

pub fn write_partition_histogram(report: &PartitionReport, path: &Path) -> Result<(), HarnessError> {
    let rows: Vec<HistogramRow> = report
        .bins
        .iter()
        .map(|b| HistogramRow {
            bin_lo: b.lo,
            bin_hi: b.hi,
            count: b.count(),
            flag_breakdown: format!("implicit:{};explicit:{}", b.implicit, b.explicit),
        })
        .collect();
    write_csv(&rows, path)
}
