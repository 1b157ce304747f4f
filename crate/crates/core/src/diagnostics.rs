//! Per-step analysis of the projection layers: volatility traces, the norm and
//! spectrum of the projection matrix, and activation histograms.
//!
//! [`DiagnosticsRecorder`] plugs into the training loop as a
//! [`StepObserver`](crate::train::StepObserver). It only reads model state, so
//! a run with diagnostics produces the same losses as one without.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::projection::ProjectionState;
use crate::tensor::Tensor;
use crate::train::{EpochRecord, StepInfo, StepObserver};

pub const DEFAULT_INTERVAL: u64 = 500;
pub const DEFAULT_BINS: usize = 100;
/// Neurons kept in the heatmap view of a volatility trace.
pub const HEATMAP_NEURONS: usize = 128;

/// One layer at one step. Layers are numbered from 1, input side first.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagSnapshot {
    pub step: u64,
    pub layer: usize,
    /// Untransformed volatility `v`, one entry per feature.
    pub volatility: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `‖R‖_F` of the last drawn matrix, if one has been drawn.
    pub frobenius_norm: Option<f64>,
    pub singular_values: Option<Vec<f64>>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Volatility summary of a projection layer, plus the norm of its last matrix.
pub fn record_volatility(state: &ProjectionState, layer: usize, step: u64) -> DiagSnapshot {
    let volatility = state.stats().volatility();
    let (mean, std) = mean_std(&volatility);
    DiagSnapshot {
        step,
        layer,
        volatility,
        mean,
        std,
        frobenius_norm: state.last_projection().map(frobenius_norm),
        singular_values: None,
    }
}

pub fn frobenius_norm(r: &Tensor) -> f64 {
    r.sum_of_squares().sqrt()
}

fn svd_iteration_cap(d: usize) -> usize {
    (200 * d).max(1000)
}

/// All singular values of a square or rectangular matrix, descending.
pub fn singular_values(r: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = r.dims2()?;
    if !r.is_finite() {
        return Err(Error::InvalidParameter(
            "singular values of a non-finite matrix".into(),
        ));
    }
    let cap = svd_iteration_cap(rows.max(cols));
    let m = DMatrix::from_row_slice(rows, cols, r.data());
    let svd = m
        .try_svd(false, false, f64::EPSILON, cap)
        .ok_or(Error::ConvergenceFailure { max_iterations: cap })?;
    let mut s: Vec<f64> = svd.singular_values.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.6},{:.6},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Equal-width histogram over `[min, max]` of the data. A constant sample is
/// centred in a unit-wide range. The top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "histogram needs a non-empty, finite sample".into(),
        ));
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Histograms of the outputs of the named affine layers (`fc1`, `conv2`, …)
/// over a probe batch, computed in inference mode.
pub fn activation_histograms(
    model: &Model,
    probe: &Tensor,
    layer_ids: &[&str],
    bins: usize,
) -> Result<Vec<(String, Histogram)>> {
    let (_, taps) = model.infer_with_taps(probe, layer_ids)?;
    layer_ids
        .iter()
        .zip(taps)
        .map(|(id, t)| Ok((id.to_string(), histogram(t.data(), bins)?)))
        .collect()
}

/// Writes `acthist_<model>_<layer>.csv` for every histogram.
pub fn write_activation_histograms(dir: &Path, model_name: &str, hists: &[(String, Histogram)]) -> Result<()> {
    for (layer, h) in hists {
        let path = dir.join(format!("acthist_{model_name}_{layer}.csv"));
        std::fs::write(&path, h.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `HEATMAP_NEURONS` evenly spaced indices into `0..d`, or all of them.
pub fn heatmap_indices(d: usize) -> Vec<usize> {
    if d <= HEATMAP_NEURONS {
        return (0..d).collect();
    }
    let last = (d - 1) as f64;
    (0..HEATMAP_NEURONS)
        .map(|i| (i as f64 * last / (HEATMAP_NEURONS - 1) as f64).round() as usize)
        .collect()
}

struct LayerFiles {
    trace: BufWriter<File>,
    heatmap: BufWriter<File>,
    columns: Vec<usize>,
}

struct Sinks {
    dir: PathBuf,
    summary: BufWriter<File>,
    frobenius: BufWriter<File>,
    layers: Vec<LayerFiles>,
}

/// Opens a CSV for writing. In append mode an existing non-empty file keeps
/// its content and no header is written.
fn create(path: PathBuf, header: &str, append: bool) -> Result<BufWriter<File>> {
    let existing = append && std::fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false);
    let file = if append {
        std::fs::OpenOptions::new().create(true).append(true).open(&path)
    } else {
        File::create(&path)
    };
    let mut w = file.map(BufWriter::new).map_err(|e| Error::io(&path, e))?;
    if !existing {
        writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

fn io_at(dir: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(dir, e)
}

/// Snapshots every projection layer at steps `≡ 0 (mod interval)` and at the
/// final step, keeping the results in memory and, with an output directory,
/// streaming them to CSV.
pub struct DiagnosticsRecorder {
    interval: u64,
    singular_values: bool,
    keep_vectors: bool,
    snapshots: Vec<DiagSnapshot>,
    sinks: Option<Sinks>,
    out_dir: Option<PathBuf>,
    append: bool,
}

impl DiagnosticsRecorder {
    pub fn new(interval: u64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidParameter("diagnostic interval must be at least 1".into()));
        }
        Ok(DiagnosticsRecorder {
            interval,
            singular_values: true,
            keep_vectors: true,
            snapshots: Vec::new(),
            sinks: None,
            out_dir: None,
            append: false,
        })
    }

    /// Also write CSV files into `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Continue existing CSV files instead of replacing them, e.g. when a run
    /// is resumed.
    pub fn with_append(mut self, append: bool) -> Self {
        self.append = append;
        self
    }

    /// Turn singular value computation on or off (on by default).
    pub fn with_singular_values(mut self, on: bool) -> Self {
        self.singular_values = on;
        self
    }

    /// Drop per-neuron vectors from the in-memory snapshots once written.
    pub fn with_vectors_in_memory(mut self, keep: bool) -> Self {
        self.keep_vectors = keep;
        self
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn snapshots(&self) -> &[DiagSnapshot] {
        &self.snapshots
    }

    pub fn is_scheduled(&self, info: StepInfo) -> bool {
        info.step.is_multiple_of(self.interval) || info.is_final
    }

    /// Writes `metadata.txt` with one `key = value` line per entry.
    pub fn write_metadata(dir: &Path, model: &Model, interval: u64, extra: &[(String, String)]) -> Result<()> {
        let mut s = format!("diag_interval = {interval}\n");
        if let Some(spec) = model.spec() {
            s.push_str(&format!("dataset = {}\nvariant = {}\nmodel_seed = {}\n", spec.dataset, spec.variant(), spec.seed));
        }
        for (k, p) in model.projections().enumerate() {
            let st = p.stats();
            s.push_str(&format!(
                "layer{}_dim = {}\nlayer{}_alpha = {}\nlayer{}_beta = {}\nlayer{}_epsilon = {}\n",
                k + 1,
                p.dim(),
                k + 1,
                st.alpha(),
                k + 1,
                st.beta(),
                k + 1,
                st.epsilon()
            ));
        }
        for (k, v) in extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        let path = dir.join("metadata.txt");
        std::fs::write(&path, s).map_err(|e| Error::io(path, e))
    }

    fn open_sinks(dir: &Path, model: &Model, append: bool) -> Result<Sinks> {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        let summary = create(dir.join("volatility_summary.csv"), "step,layer,mean,std", append)?;
        let frobenius = create(dir.join("frobenius.csv"), "step,layer,norm", append)?;
        let mut layers = Vec::new();
        for (k, p) in model.projections().enumerate() {
            let trace = create(
                dir.join(format!("volatility_layer{}.csv", k + 1)),
                "step,neuron_index,v",
                append,
            )?;
            let columns = heatmap_indices(p.dim());
            let names: Vec<String> = columns.iter().map(|i| format!("n{i}")).collect();
            let heatmap = create(
                dir.join(format!("volatility_heatmap_layer{}.csv", k + 1)),
                &format!("step,{}", names.join(",")),
                append,
            )?;
            layers.push(LayerFiles { trace, heatmap, columns });
        }
        Ok(Sinks {
            dir: dir.to_path_buf(),
            summary,
            frobenius,
            layers,
        })
    }

    fn write(sinks: &mut Sinks, snap: &DiagSnapshot) -> Result<()> {
        let dir = sinks.dir.clone();
        let err = io_at(&dir);
        let (step, k) = (snap.step, snap.layer);
        writeln!(sinks.summary, "{step},{k},{:.9},{:.9}", snap.mean, snap.std).map_err(&err)?;
        if let Some(norm) = snap.frobenius_norm {
            writeln!(sinks.frobenius, "{step},{k},{norm:.9}").map_err(&err)?;
        }
        let files = &mut sinks.layers[k - 1];
        for (i, v) in snap.volatility.iter().enumerate() {
            writeln!(files.trace, "{step},{i},{v:.9}").map_err(&err)?;
        }
        let row: Vec<String> = files.columns.iter().map(|&i| format!("{:.6}", snap.volatility[i])).collect();
        writeln!(files.heatmap, "{step},{}", row.join(",")).map_err(&err)?;
        if let Some(s) = &snap.singular_values {
            let path = dir.join(format!("singvals_step{step}_layer{k}.csv"));
            let mut body = String::from("index,singular_value\n");
            for (i, v) in s.iter().enumerate() {
                body.push_str(&format!("{i},{v:.12e}\n"));
            }
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Takes a snapshot of every projection layer now.
    pub fn capture(&mut self, step: u64, model: &Model) -> Result<()> {
        if self.sinks.is_none() {
            if let Some(dir) = &self.out_dir {
                self.sinks = Some(Self::open_sinks(dir, model, self.append)?);
            }
        }
        for (k, p) in model.projections().enumerate() {
            let mut snap = record_volatility(p, k + 1, step);
            if self.singular_values {
                if let Some(r) = p.last_projection() {
                    snap.singular_values = Some(singular_values(r)?);
                }
            }
            if let Some(sinks) = &mut self.sinks {
                Self::write(sinks, &snap)?;
            }
            if !self.keep_vectors {
                snap.volatility = Vec::new();
                if let Some(s) = &mut snap.singular_values {
                    s.clear();
                }
            }
            self.snapshots.push(snap);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(s) = &mut self.sinks {
            let dir = s.dir.clone();
            s.summary.flush().map_err(io_at(&dir))?;
            s.frobenius.flush().map_err(io_at(&dir))?;
            for l in &mut s.layers {
                l.trace.flush().map_err(io_at(&dir))?;
                l.heatmap.flush().map_err(io_at(&dir))?;
            }
        }
        Ok(())
    }
}

impl StepObserver for DiagnosticsRecorder {
    fn after_forward(&mut self, info: StepInfo, model: &Model) -> Result<()> {
        if self.is_scheduled(info) {
            self.capture(info.step, model)?;
        }
        Ok(())
    }

    fn after_epoch(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        self.flush()
    }
}

impl Drop for DiagnosticsRecorder {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
