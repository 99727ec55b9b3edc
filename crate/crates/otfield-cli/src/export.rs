//! Prediction export writers: a tab-separated point table and the
//! legacy-ASCII unstructured-grid format (vertex cells with point data).
//! Both are byte-deterministic for identical inputs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use otfield::util::format_f64;

/// One exportable prediction: node coordinates (one row per node), the
/// optional truth signal, the predicted signal, and its deviations.
pub struct ExportData<'a> {
    pub coords: &'a DMatrix<f64>,
    pub truth: Option<&'a DVector<f64>>,
    pub signal: &'a DVector<f64>,
    pub std: &'a DVector<f64>,
}

impl ExportData<'_> {
    fn check(&self) {
        let n = self.coords.nrows();
        assert_eq!(self.signal.len(), n, "prediction length mismatch");
        assert_eq!(self.std.len(), n, "std length mismatch");
        if let Some(t) = self.truth {
            assert_eq!(t.len(), n, "truth length mismatch");
        }
    }
}

/// Column layout: node id, coordinates, truth?, prediction, abs error?,
/// per-node standard deviation. Truth columns appear only when a truth
/// signal is supplied. An empty prediction yields the header line alone.
pub fn tabular(data: &ExportData<'_>) -> String {
    data.check();
    let d = data.coords.ncols();
    let mut out = String::new();
    let mut header = vec!["node".to_string()];
    header.extend((0..d).map(|c| format!("x{c}")));
    if data.truth.is_some() {
        header.push("truth".into());
    }
    header.push("prediction".into());
    if data.truth.is_some() {
        header.push("abs_error".into());
    }
    header.push("std".into());
    let _ = writeln!(out, "{}", header.join("\t"));
    for i in 0..data.coords.nrows() {
        let mut row = vec![i.to_string()];
        row.extend((0..d).map(|c| format_f64(data.coords[(i, c)])));
        if let Some(t) = data.truth {
            row.push(format_f64(t[i]));
        }
        row.push(format_f64(data.signal[i]));
        if let Some(t) = data.truth {
            row.push(format_f64((t[i] - data.signal[i]).abs()));
        }
        row.push(format_f64(data.std[i]));
        let _ = writeln!(out, "{}", row.join("\t"));
    }
    out
}

/// Legacy-ASCII unstructured grid: every node is a vertex cell and each
/// exported quantity is a scalar point-data block. Coordinates use the
/// first three attribute columns, zero-padded.
pub fn grid_legacy(data: &ExportData<'_>, title: &str) -> String {
    data.check();
    let n = data.coords.nrows();
    let d = data.coords.ncols();
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(out, "POINTS {n} double");
    for i in 0..n {
        let coords: Vec<String> = (0..3)
            .map(|c| {
                if c < d {
                    format_f64(data.coords[(i, c)])
                } else {
                    "0.0".into()
                }
            })
            .collect();
        let _ = writeln!(out, "{}", coords.join(" "));
    }
    let _ = writeln!(out, "CELLS {n} {}", 2 * n);
    for i in 0..n {
        let _ = writeln!(out, "1 {i}");
    }
    let _ = writeln!(out, "CELL_TYPES {n}");
    for _ in 0..n {
        let _ = writeln!(out, "1");
    }
    let _ = writeln!(out, "POINT_DATA {n}");
    let scalar_block = |out: &mut String, name: &str, values: &mut dyn Iterator<Item = f64>| {
        let _ = writeln!(out, "SCALARS {name} double 1");
        let _ = writeln!(out, "LOOKUP_TABLE default");
        for v in values {
            let _ = writeln!(out, "{}", format_f64(v));
        }
    };
    if let Some(t) = data.truth {
        scalar_block(&mut out, "truth", &mut t.iter().copied());
        scalar_block(
            &mut out,
            "abs_error",
            &mut (0..n).map(|i| (t[i] - data.signal[i]).abs()),
        );
    }
    scalar_block(&mut out, "prediction", &mut data.signal.iter().copied());
    scalar_block(&mut out, "std", &mut data.std.iter().copied());
    out
}
