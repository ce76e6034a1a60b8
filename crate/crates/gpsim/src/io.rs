//! CSV artifacts: trajectory batches, moment sequences, covariance dumps,
//! training/input data, and basis-expansion persistence.
//!
//! Floats are written with Rust's shortest round-trip formatting, so emitted
//! files are byte-stable across runs and loading reproduces the exact values.
//! All writers go through a temp-file-plus-rename so readers never observe a
//! partial file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisExpansion, Provenance};
use crate::error::{Error, Result};
use crate::kernel::ScalarKernel;
use crate::linalg::{GaussianDist, SymMatrix};
use crate::sampler::TrajectoryBatch;

/// Writes `contents` atomically (temp file in the same directory + rename).
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Trajectory CSV: header `traj,step,x1..xn`, one row per (trajectory, step).
pub fn trajectories_to_csv(batch: &TrajectoryBatch) -> String {
    let n = batch.state_dim();
    let mut out = String::from("traj,step");
    for c in 1..=n {
        let _ = write!(out, ",x{c}");
    }
    out.push('\n');
    for traj in 0..batch.sample_count() {
        for step in 0..=batch.steps() {
            let _ = write!(out, "{traj},{step}");
            let x = batch.state(traj, step);
            for c in 0..n {
                let _ = write!(out, ",{}", x[c]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_trajectories_csv(path: &Path, batch: &TrajectoryBatch) -> Result<()> {
    atomic_write(path, &trajectories_to_csv(batch))
}

/// Moment CSV: header `step,mean_1..mean_n,var_11,var_12,..,var_nn` with the
/// marginal covariance blocks row-major; one row per step including step 0.
pub fn moments_to_csv(state_dim: usize, rows: &[(DVector<f64>, SymMatrix)]) -> String {
    let n = state_dim;
    let mut out = String::from("step");
    for c in 1..=n {
        let _ = write!(out, ",mean_{c}");
    }
    for r in 1..=n {
        for c in 1..=n {
            let _ = write!(out, ",var_{r}{c}");
        }
    }
    out.push('\n');
    for (step, (mean, var)) in rows.iter().enumerate() {
        let _ = write!(out, "{step}");
        for c in 0..n {
            let _ = write!(out, ",{}", mean[c]);
        }
        for r in 0..n {
            for c in 0..n {
                let _ = write!(out, ",{}", var.entries()[(r, c)]);
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_moments_csv(
    path: &Path,
    state_dim: usize,
    rows: &[(DVector<f64>, SymMatrix)],
) -> Result<()> {
    atomic_write(path, &moments_to_csv(state_dim, rows))
}

/// Plain square CSV dump of a matrix (no header).
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(r, c)]);
        }
        out.push('\n');
    }
    out
}

fn parse_float(field: &str, location: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::ConfigInvalid {
        location: location.to_string(),
        message: format!("expected a decimal number, got '{}'", field.trim()),
    })
}

/// Reads training transitions: one row per point, `x` components then `y`
/// components (`2n` columns). A leading header row is skipped when its first
/// cell is not numeric.
pub fn read_training_csv(path: &Path, state_dim: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if lineno == 0 && cells[0].trim().parse::<f64>().is_err() {
            continue; // header
        }
        let loc = format!("{}:{}", path.display(), lineno + 1);
        if cells.len() != 2 * state_dim {
            return Err(Error::ConfigInvalid {
                location: loc,
                message: format!(
                    "expected {} columns (x then y components), got {}",
                    2 * state_dim,
                    cells.len()
                ),
            });
        }
        let vals: Vec<f64> = cells
            .iter()
            .map(|c| parse_float(c, &loc))
            .collect::<Result<_>>()?;
        xs.push(DVector::from_row_slice(&vals[..state_dim]));
        ys.push(DVector::from_row_slice(&vals[state_dim..]));
    }
    Ok((xs, ys))
}

/// Reads a control-input sequence: one row per step, one column per input
/// component. A leading non-numeric header row is skipped.
pub fn read_inputs_csv(path: &Path) -> Result<Vec<DVector<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if lineno == 0 && cells[0].trim().parse::<f64>().is_err() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), lineno + 1);
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::ConfigInvalid {
                    location: loc,
                    message: format!("inconsistent column count: {} vs {}", cells.len(), w),
                })
            }
            _ => {}
        }
        let vals: Vec<f64> = cells
            .iter()
            .map(|c| parse_float(c, &loc))
            .collect::<Result<_>>()?;
        rows.push(DVector::from_row_slice(&vals));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Basis expansion persistence
//
// Long-format CSV with header `field,i,j,value`. Numeric fields use the
// shortest round-trip float formatting; `kind` rows carry a string token.
// Nested constructions (the linear-gain wrapper, product kernels) repeat
// with an `inner.` / `left.` / `right.` prefix on the field name.
// ---------------------------------------------------------------------------

fn push_row(out: &mut String, prefix: &str, field: &str, i: usize, j: usize, value: &str) {
    let _ = writeln!(out, "{prefix}{field},{i},{j},{value}");
}

fn kernel_rows(out: &mut String, prefix: &str, kernel: &ScalarKernel) {
    match kernel {
        ScalarKernel::SquaredExponential {
            signal_std,
            lengthscale,
        } => {
            push_row(out, prefix, "kernel.kind", 0, 0, "se");
            push_row(out, prefix, "kernel.signal_std", 0, 0, &signal_std.to_string());
            push_row(out, prefix, "kernel.lengthscale", 0, 0, &lengthscale.to_string());
        }
        ScalarKernel::Linear { signal_std } => {
            push_row(out, prefix, "kernel.kind", 0, 0, "linear");
            push_row(out, prefix, "kernel.signal_std", 0, 0, &signal_std.to_string());
        }
        ScalarKernel::Product(l, r) => {
            push_row(out, prefix, "kernel.kind", 0, 0, "product");
            kernel_rows(out, &format!("{prefix}kernel.left."), l);
            kernel_rows(out, &format!("{prefix}kernel.right."), r);
        }
    }
}

fn expansion_rows(out: &mut String, prefix: &str, e: &BasisExpansion) {
    push_row(out, prefix, "input_dim", 0, 0, &e.input_dim().to_string());
    push_row(out, prefix, "basis_count", 0, 0, &e.basis_count().to_string());
    match e.provenance() {
        Provenance::RandomFourier {
            frequencies,
            phases,
            signal_std,
        } => {
            push_row(out, prefix, "kind", 0, 0, "rff");
            push_row(out, prefix, "signal_std", 0, 0, &signal_std.to_string());
            for (i, f) in frequencies.iter().enumerate() {
                for j in 0..f.len() {
                    push_row(out, prefix, "freq", i, j, &f[j].to_string());
                }
            }
            for (i, b) in phases.iter().enumerate() {
                push_row(out, prefix, "phase", i, 0, &b.to_string());
            }
        }
        Provenance::Nystrom {
            kernel,
            landmarks,
            eigenvalues,
            eigenvectors,
        } => {
            push_row(out, prefix, "kind", 0, 0, "nystrom");
            kernel_rows(out, prefix, kernel);
            for (i, lm) in landmarks.iter().enumerate() {
                for j in 0..lm.len() {
                    push_row(out, prefix, "landmark", i, j, &lm[j].to_string());
                }
            }
            for i in 0..eigenvalues.len() {
                push_row(out, prefix, "eigval", i, 0, &eigenvalues[i].to_string());
            }
            for i in 0..eigenvectors.nrows() {
                for j in 0..eigenvectors.ncols() {
                    push_row(out, prefix, "eigvec", i, j, &eigenvectors[(i, j)].to_string());
                }
            }
        }
        Provenance::LinearExact { signal_std } => {
            push_row(out, prefix, "kind", 0, 0, "linear_exact");
            push_row(out, prefix, "signal_std", 0, 0, &signal_std.to_string());
        }
        Provenance::LinearTimesBase { inner } => {
            push_row(out, prefix, "kind", 0, 0, "linear_times_base");
            expansion_rows(out, &format!("{prefix}inner."), inner);
        }
    }
    let dist = e.weight_dist();
    for i in 0..dist.dim() {
        push_row(out, prefix, "weight_mean", i, 0, &dist.mean()[i].to_string());
    }
    for i in 0..dist.dim() {
        for j in 0..dist.dim() {
            push_row(out, prefix, "weight_cov", i, j, &dist.cov().entries()[(i, j)].to_string());
        }
    }
}

/// Serializes an expansion (and optionally one drawn weight vector) so a
/// function sample can be persisted and replayed.
pub fn expansion_to_csv(e: &BasisExpansion, theta: Option<&DVector<f64>>) -> String {
    let mut out = String::from("field,i,j,value\n");
    expansion_rows(&mut out, "", e);
    if let Some(t) = theta {
        for i in 0..t.len() {
            push_row(&mut out, "", "theta", i, 0, &t[i].to_string());
        }
    }
    out
}

pub fn write_expansion_csv(path: &Path, e: &BasisExpansion, theta: Option<&DVector<f64>>) -> Result<()> {
    atomic_write(path, &expansion_to_csv(e, theta))
}

struct FieldTable {
    rows: Vec<(String, usize, usize, String)>,
    location: String,
}

impl FieldTable {
    fn scalar(&self, name: &str) -> Result<&str> {
        self.rows
            .iter()
            .find(|(f, _, _, _)| f == name)
            .map(|(_, _, _, v)| v.as_str())
            .ok_or_else(|| Error::ConfigInvalid {
                location: self.location.clone(),
                message: format!("missing field '{name}'"),
            })
    }

    fn scalar_f64(&self, name: &str) -> Result<f64> {
        parse_float(self.scalar(name)?, &self.location)
    }

    fn scalar_usize(&self, name: &str) -> Result<usize> {
        self.scalar(name)?
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::ConfigInvalid {
                location: self.location.clone(),
                message: format!("field '{name}' must be a nonnegative integer"),
            })
    }

    fn indexed(&self, name: &str) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .filter(|(f, _, _, _)| f == name)
            .filter_map(|(_, i, j, v)| v.trim().parse::<f64>().ok().map(|x| (*i, *j, x)))
            .collect()
    }

    fn strip_prefix(&self, prefix: &str) -> FieldTable {
        FieldTable {
            rows: self
                .rows
                .iter()
                .filter_map(|(f, i, j, v)| {
                    f.strip_prefix(prefix)
                        .map(|rest| (rest.to_string(), *i, *j, v.clone()))
                })
                .collect(),
            location: self.location.clone(),
        }
    }
}

fn vectors_from_rows(rows: &[(usize, usize, f64)], count: usize, dim: usize) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(dim); count];
    for &(i, j, v) in rows {
        if i < count && j < dim {
            out[i][j] = v;
        }
    }
    out
}

fn kernel_from_table(t: &FieldTable) -> Result<ScalarKernel> {
    match t.scalar("kernel.kind")? {
        "se" => ScalarKernel::squared_exponential(
            t.scalar_f64("kernel.signal_std")?,
            t.scalar_f64("kernel.lengthscale")?,
        ),
        "linear" => ScalarKernel::linear(t.scalar_f64("kernel.signal_std")?),
        "product" => Ok(ScalarKernel::product(
            kernel_from_table(&t.strip_prefix("kernel.left."))?,
            kernel_from_table(&t.strip_prefix("kernel.right."))?,
        )),
        other => Err(Error::ConfigInvalid {
            location: t.location.clone(),
            message: format!("unknown kernel kind '{other}'"),
        }),
    }
}

fn expansion_from_table(t: &FieldTable) -> Result<BasisExpansion> {
    let input_dim = t.scalar_usize("input_dim")?;
    let m = t.scalar_usize("basis_count")?;
    let base = match t.scalar("kind")? {
        "rff" => {
            let signal_std = t.scalar_f64("signal_std")?;
            let frequencies = vectors_from_rows(&t.indexed("freq"), m, input_dim);
            let phases: Vec<f64> = {
                let rows = t.indexed("phase");
                let mut p = vec![0.0; m];
                for (i, _, v) in rows {
                    if i < m {
                        p[i] = v;
                    }
                }
                p
            };
            BasisExpansion::from_random_fourier_parts(input_dim, frequencies, phases, signal_std)?
        }
        "nystrom" => {
            let kernel = kernel_from_table(t)?;
            let ev_rows = t.indexed("eigval");
            let landmark_rows = t.indexed("landmark");
            let p = landmark_rows.iter().map(|&(i, _, _)| i + 1).max().unwrap_or(0);
            let landmarks = vectors_from_rows(&landmark_rows, p, input_dim);
            let mut eigenvalues = DVector::zeros(m);
            for (i, _, v) in ev_rows {
                if i < m {
                    eigenvalues[i] = v;
                }
            }
            let mut eigenvectors = DMatrix::zeros(p, m);
            for (i, j, v) in t.indexed("eigvec") {
                if i < p && j < m {
                    eigenvectors[(i, j)] = v;
                }
            }
            BasisExpansion::from_nystrom_parts(kernel, landmarks, eigenvalues, eigenvectors)?
        }
        "linear_exact" => BasisExpansion::linear_exact(
            &ScalarKernel::linear(t.scalar_f64("signal_std")?)?,
            input_dim,
        )?,
        "linear_times_base" => {
            let inner = expansion_from_table(&t.strip_prefix("inner."))?;
            BasisExpansion::linear_times_base(inner)?
        }
        other => {
            return Err(Error::ConfigInvalid {
                location: t.location.clone(),
                message: format!("unknown expansion kind '{other}'"),
            })
        }
    };
    // Restore the weight distribution.
    let mut mean = DVector::zeros(base.basis_count());
    for (i, _, v) in t.indexed("weight_mean") {
        if i < mean.len() {
            mean[i] = v;
        }
    }
    let mut cov = DMatrix::zeros(base.basis_count(), base.basis_count());
    for (i, j, v) in t.indexed("weight_cov") {
        if i < cov.nrows() && j < cov.ncols() {
            cov[(i, j)] = v;
        }
    }
    base.with_weight_dist(GaussianDist::new(mean, SymMatrix::symmetrized(cov))?)
}

/// Parses an expansion CSV produced by [`expansion_to_csv`]; returns the
/// expansion and the persisted weight draw when present.
pub fn expansion_from_csv(text: &str, origin: &str) -> Result<(BasisExpansion, Option<DVector<f64>>)> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "field,i,j,value" || line.starts_with('#') {
            continue;
        }
        let loc = format!("{origin}:{}", lineno + 1);
        let mut parts = line.splitn(4, ',');
        let (Some(f), Some(i), Some(j), Some(v)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::ConfigInvalid {
                location: loc,
                message: "expected 'field,i,j,value'".into(),
            });
        };
        let parse_idx = |s: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|_| Error::ConfigInvalid {
                location: loc.clone(),
                message: format!("bad index '{s}'"),
            })
        };
        rows.push((f.trim().to_string(), parse_idx(i)?, parse_idx(j)?, v.trim().to_string()));
    }
    let table = FieldTable {
        rows,
        location: origin.to_string(),
    };
    let expansion = expansion_from_table(&table)?;
    let theta_rows = table.indexed("theta");
    let theta = if theta_rows.is_empty() {
        None
    } else {
        let mut t = DVector::zeros(expansion.basis_count());
        for (i, _, v) in theta_rows {
            if i < t.len() {
                t[i] = v;
            }
        }
        Some(t)
    };
    Ok((expansion, theta))
}

pub fn read_expansion_csv(path: &Path) -> Result<(BasisExpansion, Option<DVector<f64>>)> {
    let text = fs::read_to_string(path)?;
    expansion_from_csv(&text, &path.display().to_string())
}
