//! Calibration measurement and post-hoc calibrators.
//!
//! Expected calibration error is computed per class: all per-class
//! confidences are partitioned into B equal-width half-open bins
//! [i/B, (i+1)/B), confidence 1.0 landing in the top bin, and
//! ECE = (1/|Y|) Σ_y Σ_b (|B_yb|/n) |acc(B_yb) − conf(B_yb)| with n the
//! number of samples. Post-hoc calibrators cover temperature scaling
//! (golden-section search for the NLL-minimizing T) and a simplified
//! scaling-binning calibrator (temperature step, equal-mass bins over dev
//! confidences, bin-mean outputs). Energy-vs-entropy scatter data and the
//! confidence-shift table link the learned energy to predictive uncertainty.

use crate::encoder::EncoderModel;
use crate::energy::{energy_hat, EnergyVariant};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("record set is empty")]
    EmptyRecords,
    #[error("number of bins must be >= 1")]
    ZeroBins,
    #[error("sample {sample_id}: {msg}")]
    InconsistentRecords { sample_id: usize, msg: String },
    #[error("not a probability vector: {0}")]
    NotProbability(String),
    #[error("temperature must be positive, got {0}")]
    NonpositiveT(f64),
    #[error("{b} bins exceed the {n} dev samples")]
    BinsExceedDev { b: usize, n: usize },
    #[error("dev set is empty")]
    EmptyDev,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("wrong calibrator kind for this operation")]
    WrongKind,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// One (sample, class) confidence entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub is_true_label: bool,
}

/// Aggregates of one (class, bin) cell of the reliability diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub class_id: usize,
    pub bin_index: usize,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

struct Grouped {
    n_samples: usize,
    n_classes: usize,
    /// per class: (confidence, class is the true label) in sample order
    per_class: Vec<Vec<(f64, bool)>>,
}

fn group(records: &[PredictionRecord]) -> Result<Grouped, CalibError> {
    if records.is_empty() {
        return Err(CalibError::EmptyRecords);
    }
    let mut by_sample: BTreeMap<usize, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_sample.entry(r.sample_id).or_default().push(r);
    }
    let n_classes = by_sample.values().next().expect("nonempty").len();
    let mut per_class = vec![Vec::with_capacity(by_sample.len()); n_classes];
    for (&sid, rs) in &by_sample {
        let fail = |msg: String| CalibError::InconsistentRecords {
            sample_id: sid,
            msg,
        };
        if rs.len() != n_classes {
            return Err(fail(format!("{} records, expected {n_classes}", rs.len())));
        }
        let mut seen = vec![false; n_classes];
        let mut sum = 0.0;
        let mut trues = 0usize;
        for r in rs {
            if r.class_id >= n_classes || seen[r.class_id] {
                return Err(fail(format!("bad or duplicate class {}", r.class_id)));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(fail(format!("confidence {} outside [0,1]", r.confidence)));
            }
            seen[r.class_id] = true;
            sum += r.confidence;
            trues += usize::from(r.is_true_label);
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(fail(format!("confidences sum to {sum}")));
        }
        if trues != 1 {
            return Err(fail(format!("{trues} true labels, expected exactly 1")));
        }
        for r in rs {
            per_class[r.class_id].push((r.confidence, r.is_true_label));
        }
    }
    Ok(Grouped {
        n_samples: by_sample.len(),
        n_classes,
        per_class,
    })
}

fn bin_of(confidence: f64, b: usize) -> usize {
    ((confidence * b as f64).floor() as usize).min(b - 1)
}

/// Per-class, per-bin counts, mean confidence, and accuracy. Cells are
/// emitted for every (class, bin) including empty ones, in class-major
/// order.
pub fn reliability_data(
    records: &[PredictionRecord],
    b: usize,
) -> Result<Vec<BinStats>, CalibError> {
    if b == 0 {
        return Err(CalibError::ZeroBins);
    }
    let g = group(records)?;
    let mut out = Vec::with_capacity(g.n_classes * b);
    for (class_id, entries) in g.per_class.iter().enumerate() {
        let mut count = vec![0usize; b];
        let mut conf_sum = vec![0.0; b];
        let mut hit_sum = vec![0usize; b];
        for &(c, is_true) in entries {
            let bin = bin_of(c, b);
            count[bin] += 1;
            conf_sum[bin] += c;
            hit_sum[bin] += usize::from(is_true);
        }
        for bin_index in 0..b {
            let n = count[bin_index];
            out.push(BinStats {
                class_id,
                bin_index,
                count: n,
                mean_confidence: if n > 0 { conf_sum[bin_index] / n as f64 } else { 0.0 },
                accuracy: if n > 0 {
                    hit_sum[bin_index] as f64 / n as f64
                } else {
                    0.0
                },
            });
        }
    }
    Ok(out)
}

/// Expected calibration error over B equal-width per-class bins.
pub fn ece(records: &[PredictionRecord], b: usize) -> Result<f64, CalibError> {
    let g = group(records)?;
    let stats = reliability_data(records, b)?;
    let n = g.n_samples as f64;
    let mut total = 0.0;
    for s in &stats {
        if s.count > 0 {
            total += (s.count as f64 / n) * (s.accuracy - s.mean_confidence).abs();
        }
    }
    Ok(total / g.n_classes as f64)
}

/// Expand posteriors and labels into per-class prediction records.
pub fn records_from_posteriors(
    posteriors: &[Vec<f64>],
    labels: &[usize],
) -> Vec<PredictionRecord> {
    assert_eq!(posteriors.len(), labels.len());
    let mut out = Vec::with_capacity(posteriors.len() * posteriors.first().map_or(0, Vec::len));
    for (sid, (p, &label)) in posteriors.iter().zip(labels).enumerate() {
        for (class_id, &confidence) in p.iter().enumerate() {
            out.push(PredictionRecord {
                sample_id: sid,
                class_id,
                confidence,
                is_true_label: class_id == label,
            });
        }
    }
    out
}

/// Fitted post-hoc calibrator.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibratorParams {
    Temperature {
        t: f64,
    },
    /// Temperature step plus an equal-mass piecewise-constant confidence map.
    ScalingBinning {
        t: f64,
        /// Interior bin boundaries (length B-1); a confidence equal to a
        /// boundary goes to the upper bin.
        edges: Vec<f64>,
        /// Output value per bin (length B).
        values: Vec<f64>,
    },
}

/// Result of temperature fitting; `degenerate` flags a single-class dev set
/// (T falls back to 1).
#[derive(Debug, Clone)]
pub struct TemperatureFit {
    pub params: CalibratorParams,
    pub degenerate: bool,
}

fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        total += crate::autodiff::logsumexp_row(&scaled) - scaled[y];
    }
    total / logits.len() as f64
}

/// Golden-section minimization of a unimodal function on [lo, hi].
fn golden_section(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fit T minimizing dev NLL of softmax(logits / T), searching log T in
/// [-3, 3] with tolerance 1e-4.
pub fn fit_temperature(
    dev_logits: &[Vec<f64>],
    dev_labels: &[usize],
) -> Result<TemperatureFit, CalibError> {
    if dev_logits.is_empty() || dev_logits.len() != dev_labels.len() {
        return Err(CalibError::EmptyDev);
    }
    let first = dev_labels[0];
    if dev_labels.iter().all(|&y| y == first) {
        return Ok(TemperatureFit {
            params: CalibratorParams::Temperature { t: 1.0 },
            degenerate: true,
        });
    }
    let u = golden_section(
        |u| nll(dev_logits, dev_labels, u.exp()),
        -3.0,
        3.0,
        1e-4,
    );
    Ok(TemperatureFit {
        params: CalibratorParams::Temperature { t: u.exp() },
        degenerate: false,
    })
}

/// softmax(logits / T).
pub fn apply_temperature(
    params: &CalibratorParams,
    logits: &[f64],
) -> Result<Vec<f64>, CalibError> {
    let t = match params {
        CalibratorParams::Temperature { t } | CalibratorParams::ScalingBinning { t, .. } => *t,
    };
    if t <= 0.0 {
        return Err(CalibError::NonpositiveT(t));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
    let mut out = vec![0.0; scaled.len()];
    crate::autodiff::softmax_row(&scaled, &mut out);
    Ok(out)
}

/// Fit the scaling-binning calibrator: temperature step, then B equal-mass
/// bins over all dev per-class scaled confidences, each bin outputting the
/// mean dev confidence it contains.
pub fn fit_scaling_binning(
    dev_logits: &[Vec<f64>],
    dev_labels: &[usize],
    b: usize,
) -> Result<CalibratorParams, CalibError> {
    if b == 0 {
        return Err(CalibError::ZeroBins);
    }
    if dev_logits.is_empty() || dev_logits.len() != dev_labels.len() {
        return Err(CalibError::EmptyDev);
    }
    if b > dev_logits.len() {
        return Err(CalibError::BinsExceedDev {
            b,
            n: dev_logits.len(),
        });
    }
    let fit = fit_temperature(dev_logits, dev_labels)?;
    let t = match fit.params {
        CalibratorParams::Temperature { t } => t,
        CalibratorParams::ScalingBinning { .. } => unreachable!("fit returns temperature"),
    };
    let mut confs = Vec::with_capacity(dev_logits.len() * dev_logits[0].len());
    for z in dev_logits {
        confs.extend(apply_temperature(&CalibratorParams::Temperature { t }, z)?);
    }
    let mut sorted = confs.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let edges: Vec<f64> = (1..b).map(|i| sorted[i * m / b]).collect();

    let mut sums = vec![0.0; b];
    let mut counts = vec![0usize; b];
    for &c in &confs {
        let bin = edges.iter().filter(|&&e| e <= c).count();
        sums[bin] += c;
        counts[bin] += 1;
    }
    let overall = confs.iter().sum::<f64>() / m as f64;
    let values: Vec<f64> = (0..b)
        .map(|i| {
            if counts[i] > 0 {
                sums[i] / counts[i] as f64
            } else {
                // duplicate boundaries can starve a bin; fall back to the
                // global mean so the map stays total
                overall
            }
        })
        .collect();
    Ok(CalibratorParams::ScalingBinning { t, edges, values })
}

/// The raw piecewise-constant confidence map of a fitted scaling-binning
/// calibrator (no renormalization).
pub fn map_confidence(params: &CalibratorParams, c: f64) -> Result<f64, CalibError> {
    match params {
        CalibratorParams::ScalingBinning { edges, values, .. } => {
            let bin = edges.iter().filter(|&&e| e <= c).count();
            Ok(values[bin])
        }
        CalibratorParams::Temperature { .. } => Err(CalibError::WrongKind),
    }
}

/// Temperature-scale, bin-map each class confidence, then renormalize.
pub fn apply_scaling_binning(
    params: &CalibratorParams,
    logits: &[f64],
) -> Result<Vec<f64>, CalibError> {
    match params {
        CalibratorParams::ScalingBinning { .. } => {}
        CalibratorParams::Temperature { .. } => return Err(CalibError::WrongKind),
    }
    let scaled = apply_temperature(params, logits)?;
    let mut mapped = Vec::with_capacity(scaled.len());
    for c in scaled {
        mapped.push(map_confidence(params, c)?);
    }
    let sum: f64 = mapped.iter().sum();
    if sum <= 0.0 {
        let u = 1.0 / mapped.len() as f64;
        return Ok(vec![u; mapped.len()]);
    }
    Ok(mapped.into_iter().map(|v| v / sum).collect())
}

/// Natural-log Shannon entropy with 0 log 0 := 0.
pub fn entropy(p: &[f64]) -> Result<f64, CalibError> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CalibError::NotProbability(format!("sums to {sum}")));
    }
    if let Some(&bad) = p.iter().find(|&&v| v < 0.0) {
        return Err(CalibError::NotProbability(format!("negative entry {bad}")));
    }
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; tied values share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// One test sample's energy, posterior entropy, and histogram bin.
#[derive(Debug, Clone)]
pub struct ScatterRow {
    pub sample_id: usize,
    pub energy: f64,
    pub entropy: f64,
    pub hist_bin: usize,
}

#[derive(Debug, Clone)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ScatterReport {
    pub rows: Vec<ScatterRow>,
    pub spearman: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Default bin count of the fixed-width energy histogram.
pub const ENERGY_HIST_BINS: usize = 20;

/// Per-sample energy vs posterior entropy, their rank correlation, and a
/// fixed-width energy histogram.
pub fn energy_entropy_scatter(
    model: &EncoderModel,
    variant: EnergyVariant,
    test: &[Vec<u32>],
    hist_bins: usize,
) -> Result<ScatterReport, CalibError> {
    if test.is_empty() {
        return Err(CalibError::EmptyTestSet);
    }
    let mut energies = Vec::with_capacity(test.len());
    let mut entropies = Vec::with_capacity(test.len());
    for x in test {
        energies.push(energy_hat(model, variant, x)?);
        entropies.push(entropy(&model.posterior_vec(x)?)?);
    }
    let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / hist_bins as f64;
    let bin_of = |e: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((e - lo) / width).floor() as usize).min(hist_bins - 1)
        }
    };
    let mut counts = vec![0usize; hist_bins];
    let rows: Vec<ScatterRow> = energies
        .iter()
        .zip(&entropies)
        .enumerate()
        .map(|(sample_id, (&energy, &entropy))| {
            let hist_bin = bin_of(energy);
            counts[hist_bin] += 1;
            ScatterRow {
                sample_id,
                energy,
                entropy,
                hist_bin,
            }
        })
        .collect();
    let histogram = (0..hist_bins)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: lo + width * (i + 1) as f64,
            count: counts[i],
        })
        .collect();
    Ok(ScatterReport {
        spearman: spearman(&energies, &entropies),
        rows,
        histogram,
    })
}

/// One row of the confidence-shift table, sorted by energy descending.
#[derive(Debug, Clone)]
pub struct ShiftRow {
    pub sample_id: usize,
    pub energy: f64,
    pub baseline_posterior: Vec<f64>,
    pub ebm_posterior: Vec<f64>,
}

/// Compare baseline vs EBM posteriors per sample, ordered from the highest
/// EBM energy (most out-of-distribution) down.
pub fn confidence_shift_report(
    baseline: &EncoderModel,
    ebm: &EncoderModel,
    variant: EnergyVariant,
    test: &[Vec<u32>],
) -> Result<Vec<ShiftRow>, CalibError> {
    if test.is_empty() {
        return Err(CalibError::EmptyTestSet);
    }
    if baseline.cfg.vocab_size != ebm.cfg.vocab_size
        || baseline.cfg.n_classes != ebm.cfg.n_classes
    {
        return Err(CalibError::ModelMismatch(format!(
            "vocab {} vs {}, classes {} vs {}",
            baseline.cfg.vocab_size, ebm.cfg.vocab_size, baseline.cfg.n_classes, ebm.cfg.n_classes
        )));
    }
    let mut rows = Vec::with_capacity(test.len());
    for (sample_id, x) in test.iter().enumerate() {
        rows.push(ShiftRow {
            sample_id,
            energy: energy_hat(ebm, variant, x)?,
            baseline_posterior: baseline.posterior_vec(x)?,
            ebm_posterior: ebm.posterior_vec(x)?,
        });
    }
    rows.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.sample_id.cmp(&b.sample_id)));
    Ok(rows)
}

// ---- CSV interfaces ----

pub fn save_records_csv(path: &Path, records: &[PredictionRecord]) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,class_id,confidence,is_true_label")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.sample_id, r.class_id, r.confidence, r.is_true_label
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records_csv(path: &Path) -> Result<Vec<PredictionRecord>, CalibError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "sample_id,class_id,confidence,is_true_label" {
                return Err(CalibError::Malformed {
                    line: 1,
                    msg: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let fail = |msg: String| CalibError::Malformed { line: i + 1, msg };
        if fields.len() != 4 {
            return Err(fail(format!("{} fields, expected 4", fields.len())));
        }
        out.push(PredictionRecord {
            sample_id: fields[0]
                .parse()
                .map_err(|e| fail(format!("sample_id: {e}")))?,
            class_id: fields[1]
                .parse()
                .map_err(|e| fail(format!("class_id: {e}")))?,
            confidence: fields[2]
                .parse()
                .map_err(|e| fail(format!("confidence: {e}")))?,
            is_true_label: fields[3]
                .parse()
                .map_err(|e| fail(format!("is_true_label: {e}")))?,
        });
    }
    Ok(out)
}

pub fn save_reliability_csv(path: &Path, stats: &[BinStats]) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "class_id,bin_index,count,mean_confidence,accuracy")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.class_id, s.bin_index, s.count, s.mean_confidence, s.accuracy
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_scatter_csv(path: &Path, report: &ScatterReport) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,energy,entropy,hist_bin")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{}", r.sample_id, r.energy, r.entropy, r.hist_bin)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_energy_histogram_csv(path: &Path, report: &ScatterReport) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,count")?;
    for h in &report.histogram {
        writeln!(w, "{},{},{}", h.lo, h.hi, h.count)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_shift_csv(path: &Path, rows: &[ShiftRow]) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,energy,baseline_posterior,ebm_posterior")?;
    for r in rows {
        let fmt = |p: &[f64]| {
            p.iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(
            w,
            "{},{},{},{}",
            r.sample_id,
            r.energy,
            fmt(&r.baseline_posterior),
            fmt(&r.ebm_posterior)
        )?;
    }
    w.flush()?;
    Ok(())
}
