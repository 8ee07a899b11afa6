//! Dataset ingestion, synthesis, windowing, splitting and metrics.
//!
//! The pipeline is: load (or synthesize) a raw flow series, cut it into
//! sliding input/target windows, split the windows chronologically 6:2:2,
//! and z-score the inputs with statistics taken from the training split
//! only. Targets always stay in original units; predictions are
//! denormalized before any metric is computed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Raw multivariate flow record: `values[t * n_nodes + n]` is node n at
/// step t.
#[derive(Clone, Debug)]
pub struct TrafficSeries {
    pub values: Vec<f64>,
    pub len: usize,
    pub n_nodes: usize,
    pub interval_minutes: u32,
    pub node_ids: Vec<String>,
}

impl TrafficSeries {
    pub fn new(
        values: Vec<f64>,
        len: usize,
        n_nodes: usize,
        interval_minutes: u32,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        if len == 0 || n_nodes == 0 {
            return Err(Error::Config("series must be non-empty".into()));
        }
        if values.len() != len * n_nodes {
            return Err(Error::Shape {
                op: "TrafficSeries::new",
                detail: format!("{} values for {len} x {n_nodes}", values.len()),
            });
        }
        if node_ids.len() != n_nodes {
            return Err(Error::Shape {
                op: "TrafficSeries::new",
                detail: format!("{} node ids for {n_nodes} nodes", node_ids.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "traffic series".into(),
            });
        }
        Ok(Self {
            values,
            len,
            n_nodes,
            interval_minutes,
            node_ids,
        })
    }

    pub fn at(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.n_nodes + node]
    }
}

/// Global mean and population standard deviation, floored away from zero so
/// constant series normalize to zeros instead of dividing by zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-8))
}

/// Z-score normalization of a whole series; returns the normalized copy and
/// the statistics used.
pub fn zscore(series: &TrafficSeries) -> (TrafficSeries, f64, f64) {
    let (mean, std) = mean_std(&series.values);
    let mut out = series.clone();
    for v in &mut out.values {
        *v = (*v - mean) / std;
    }
    (out, mean, std)
}

pub fn denormalize(value: f64, mean: f64, std: f64) -> f64 {
    value * std + mean
}

/// Windowed samples. Inputs are stored in normalized units once a split has
/// assigned statistics (mean 0 / std 1 before that); targets are always in
/// original units.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// m x input_len x n_nodes values (innermost feature dim is 1)
    pub inputs: Vec<f64>,
    /// m x horizon x n_nodes values, original units
    pub targets: Vec<f64>,
    pub m: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub n_nodes: usize,
    pub mean: f64,
    pub std: f64,
    pub node_ids: Vec<String>,
}

impl SampleSet {
    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn input_stride(&self) -> usize {
        self.input_len * self.n_nodes
    }

    fn target_stride(&self) -> usize {
        self.horizon * self.n_nodes
    }

    /// One input sample as [input_len, n_nodes, 1].
    pub fn input_item(&self, i: usize) -> DenseArray {
        let s = self.input_stride();
        DenseArray::new(
            vec![self.input_len, self.n_nodes, 1],
            self.inputs[i * s..(i + 1) * s].to_vec(),
        )
        .expect("sample shape")
    }

    /// One target sample transposed to [n_nodes, horizon], normalized with
    /// the set's statistics (the layout the model's loss consumes).
    pub fn target_norm_matrix(&self, i: usize) -> DenseArray {
        let s = self.target_stride();
        let raw = &self.targets[i * s..(i + 1) * s];
        let mut data = vec![0.0; s];
        for step in 0..self.horizon {
            for node in 0..self.n_nodes {
                data[node * self.horizon + step] =
                    (raw[step * self.n_nodes + node] - self.mean) / self.std;
            }
        }
        DenseArray::new(vec![self.n_nodes, self.horizon], data).expect("target shape")
    }

    /// Original-unit target value for (sample, horizon step, node).
    pub fn target_at(&self, i: usize, step: usize, node: usize) -> f64 {
        self.targets[i * self.target_stride() + step * self.n_nodes + node]
    }
}

/// Cuts sliding windows of `input_len` history and `horizon` future with
/// stride 1. A series shorter than `input_len + horizon` yields an empty
/// (not erroneous) set.
pub fn window_split(series: &TrafficSeries, input_len: usize, horizon: usize) -> Result<SampleSet> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::Config("window sizes must be >= 1".into()));
    }
    let n = series.n_nodes;
    let m = (series.len + 1).saturating_sub(input_len + horizon);
    let mut inputs = Vec::with_capacity(m * input_len * n);
    let mut targets = Vec::with_capacity(m * horizon * n);
    for start in 0..m {
        inputs.extend_from_slice(
            &series.values[start * n..(start + input_len) * n],
        );
        targets.extend_from_slice(
            &series.values[(start + input_len) * n..(start + input_len + horizon) * n],
        );
    }
    Ok(SampleSet {
        inputs,
        targets,
        m,
        input_len,
        horizon,
        n_nodes: n,
        mean: 0.0,
        std: 1.0,
        node_ids: series.node_ids.clone(),
    })
}

/// Contiguous chronological split with floor sizing: the first ratio gets
/// floor(m * r1) samples, the second floor(m * r2), the rest go to the third.
/// Inputs of all three splits are normalized with statistics computed from
/// the training inputs only.
pub fn chrono_split(
    samples: &SampleSet,
    ratios: (f64, f64, f64),
) -> Result<(SampleSet, SampleSet, SampleSet)> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    if samples.m < 3 {
        return Err(Error::Config(format!(
            "need at least 3 samples to split, got {}",
            samples.m
        )));
    }
    let m = samples.m;
    let m_train = (m as f64 * r1).floor() as usize;
    let m_val = (m as f64 * r2).floor() as usize;
    let m_test = m - m_train - m_val;

    let take = |from: usize, count: usize| -> SampleSet {
        let is = samples.input_stride();
        let ts = samples.target_stride();
        SampleSet {
            inputs: samples.inputs[from * is..(from + count) * is].to_vec(),
            targets: samples.targets[from * ts..(from + count) * ts].to_vec(),
            m: count,
            input_len: samples.input_len,
            horizon: samples.horizon,
            n_nodes: samples.n_nodes,
            mean: 0.0,
            std: 1.0,
            node_ids: samples.node_ids.clone(),
        }
    };
    let mut train = take(0, m_train);
    let mut val = take(m_train, m_val);
    let mut test = take(m_train + m_val, m_test);

    let (mean, std) = mean_std(&train.inputs);
    for set in [&mut train, &mut val, &mut test] {
        for v in &mut set.inputs {
            *v = (*v - mean) / std;
        }
        set.mean = mean;
        set.std = std;
    }
    Ok((train, val, test))
}

/// Parses the CSV flow format: a header line of node ids, then one line per
/// time step with one value per node. Line numbers in errors are 1-based.
pub fn load_series(path: &std::path::Path) -> Result<TrafficSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_series_csv(&text)
}

pub fn parse_series_csv(text: &str) -> Result<TrafficSeries> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        detail: "empty file".into(),
    })?;
    let node_ids: Vec<String> = header
        .trim_end_matches('\r')
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if node_ids.is_empty() || node_ids.iter().any(String::is_empty) {
        return Err(Error::Parse {
            line: 1,
            detail: "header must list node ids".into(),
        });
    }
    let n = node_ids.len();
    let mut values = Vec::new();
    let mut len = 0usize;
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("{} values, expected {n}", cells.len()),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                detail: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: idx + 1,
                    detail: format!("non-finite value '{}'", cell.trim()),
                });
            }
            values.push(v);
        }
        len += 1;
    }
    if len == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "no data rows".into(),
        });
    }
    TrafficSeries::new(values, len, n, 5, node_ids)
}

pub fn write_series_csv(series: &TrafficSeries, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let write_err = |e| Error::io(format!("write {}", path.display()), e);
    writeln!(w, "{}", series.node_ids.join(",")).map_err(write_err)?;
    for t in 0..series.len {
        let row: Vec<String> = (0..series.n_nodes)
            .map(|n| format!("{}", series.at(t, n)))
            .collect();
        writeln!(w, "{}", row.join(",")).map_err(write_err)?;
    }
    Ok(())
}

pub const SYNTH_PERIOD_STEPS: f64 = 288.0;
pub const SYNTH_BASE_LEVEL: f64 = 100.0;
pub const SYNTH_AMPLITUDE: f64 = 50.0;

/// Closed-form diurnal component of the synthetic generator for one node.
pub fn synth_sinusoid(step: usize, node: usize, n_nodes: usize) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * node as f64 / n_nodes as f64;
    SYNTH_BASE_LEVEL
        + SYNTH_AMPLITUDE
            * (2.0 * std::f64::consts::PI * step as f64 / SYNTH_PERIOD_STEPS + phase).sin()
}

/// Deterministic synthetic flow: a per-node diurnal sinusoid plus a coupling
/// term pulling each node toward the lag-1 mean of its ring neighbors, plus
/// Gaussian noise.
pub fn synth_generate(
    n_nodes: usize,
    length: usize,
    coupling: f64,
    noise_std: f64,
    seed: u64,
) -> Result<TrafficSeries> {
    if n_nodes == 0 || length == 0 {
        return Err(Error::Config("synthetic series must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| {
        Error::Config(format!("invalid noise_std {noise_std}: {e}"))
    })?;
    let mut values = vec![0.0; length * n_nodes];
    for t in 0..length {
        for node in 0..n_nodes {
            let mut v = synth_sinusoid(t, node, n_nodes);
            if t > 0 && coupling != 0.0 {
                let left = values[(t - 1) * n_nodes + (node + n_nodes - 1) % n_nodes];
                let right = values[(t - 1) * n_nodes + (node + 1) % n_nodes];
                v += coupling * 0.5 * (left + right);
            }
            if noise_std > 0.0 {
                v += normal.sample(&mut rng);
            }
            values[t * n_nodes + node] = v;
        }
    }
    let node_ids = (0..n_nodes).map(|n| format!("n{n}")).collect();
    TrafficSeries::new(values, length, n_nodes, 5, node_ids)
}

/// Forecast quality metrics. MAPE masks entries whose ground truth is
/// within `mask_eps` of zero and is `None` when nothing survives the mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

pub fn metrics(pred: &[f64], truth: &[f64], mask_eps: f64) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_count = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p - t;
        abs_sum += d.abs();
        sq_sum += d * d;
        if t.abs() >= mask_eps {
            pct_sum += (d / t).abs();
            pct_count += 1;
        }
    }
    Ok(Metrics {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        mape: if pct_count > 0 {
            Some(100.0 * pct_sum / pct_count as f64)
        } else {
            None
        },
    })
}

pub const MAPE_MASK_EPS: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &[&[f64]]) -> TrafficSeries {
        let n = rows[0].len();
        let values: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let ids = (0..n).map(|i| format!("n{i}")).collect();
        TrafficSeries::new(values, rows.len(), n, 5, ids).unwrap()
    }

    #[test]
    fn zscore_two_values() {
        let s = series(&[&[0.0], &[2.0]]);
        let (norm, mean, std) = zscore(&s);
        assert_eq!(mean, 1.0);
        assert_eq!(std, 1.0);
        assert_eq!(norm.values, vec![-1.0, 1.0]);
    }

    #[test]
    fn zscore_constant_series_is_zero() {
        let s = series(&[&[4.0], &[4.0], &[4.0]]);
        let (norm, _, std) = zscore(&s);
        assert_eq!(std, 1e-8);
        assert!(norm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_roundtrip() {
        let s = series(&[&[3.0, -1.0], &[7.5, 2.25], &[0.125, 9.0]]);
        let (norm, mean, std) = zscore(&s);
        for (orig, n) in s.values.iter().zip(&norm.values) {
            assert!((denormalize(*n, mean, std) - orig).abs() < 1e-9);
        }
    }

    #[test]
    fn window_counts() {
        let make = |len: usize| {
            let rows: Vec<Vec<f64>> = (0..len).map(|t| vec![t as f64]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            series(&refs)
        };
        assert_eq!(window_split(&make(24), 12, 12).unwrap().m, 1);
        assert_eq!(window_split(&make(30), 12, 12).unwrap().m, 7);
        assert_eq!(window_split(&make(23), 12, 12).unwrap().m, 0);
    }

    #[test]
    fn window_contents_are_contiguous() {
        let s = series(&[&[0.0, 10.0], &[1.0, 11.0], &[2.0, 12.0], &[3.0, 13.0]]);
        let set = window_split(&s, 2, 1).unwrap();
        assert_eq!(set.m, 2);
        // first sample: inputs rows 0..2, target row 2
        assert_eq!(&set.inputs[0..4], &[0.0, 10.0, 1.0, 11.0]);
        assert_eq!(&set.targets[0..2], &[2.0, 12.0]);
    }

    #[test]
    fn chrono_split_sizes() {
        let split_of = |m: usize| {
            let rows: Vec<Vec<f64>> = (0..m + 1).map(|t| vec![t as f64]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let set = window_split(&series(&refs), 1, 1).unwrap();
            assert_eq!(set.m, m);
            let (a, b, c) = chrono_split(&set, (0.6, 0.2, 0.2)).unwrap();
            (a.m, b.m, c.m)
        };
        assert_eq!(split_of(10), (6, 2, 2));
        assert_eq!(split_of(5), (3, 1, 1));
        assert_eq!(split_of(16992), (10195, 3398, 3399));
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let s = series(&[&[1.0], &[2.0], &[3.0]]);
        let set = window_split(&s, 1, 1).unwrap();
        assert_eq!(set.m, 2);
        assert!(chrono_split(&set, (0.6, 0.2, 0.2)).is_err());
    }

    #[test]
    fn train_stats_do_not_leak_from_test() {
        let rows: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let set = window_split(&series(&refs), 1, 1).unwrap();
        let (train_a, _, _) = chrono_split(&set, (0.6, 0.2, 0.2)).unwrap();

        // perturb the tail (test region) of the raw series and re-split
        let mut rows2 = rows.clone();
        for r in rows2.iter_mut().skip(16) {
            r[0] += 1000.0;
        }
        let refs2: Vec<&[f64]> = rows2.iter().map(|r| r.as_slice()).collect();
        let set2 = window_split(&series(&refs2), 1, 1).unwrap();
        let (train_b, _, _) = chrono_split(&set2, (0.6, 0.2, 0.2)).unwrap();

        assert_eq!(train_a.mean, train_b.mean);
        assert_eq!(train_a.std, train_b.std);
    }

    #[test]
    fn csv_parse_basic_and_errors() {
        let ok = parse_series_csv("a,b,c\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(ok.len, 2);
        assert_eq!(ok.n_nodes, 3);
        assert_eq!(ok.node_ids, vec!["a", "b", "c"]);
        assert_eq!(ok.at(1, 2), 6.0);

        let ragged = parse_series_csv("a,b,c\n1,2,3\n4,5\n");
        match ragged {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(parse_series_csv("").is_err());
        assert!(parse_series_csv("a,b\n1,x\n").is_err());
    }

    #[test]
    fn csv_handles_crlf() {
        let ok = parse_series_csv("a,b\r\n1.5,2.5\r\n").unwrap();
        assert_eq!(ok.values, vec![1.5, 2.5]);
    }

    #[test]
    fn synth_deterministic_and_shaped() {
        let a = synth_generate(8, 50, 0.5, 0.05, 42).unwrap();
        let b = synth_generate(8, 50, 0.5, 0.05, 42).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.len, 50);
        assert_eq!(a.n_nodes, 8);
        let c = synth_generate(8, 2000, 0.5, 0.05, 42).unwrap();
        assert_eq!(c.len, 2000);
        assert_eq!(c.values.len(), 2000 * 8);
    }

    #[test]
    fn synth_clean_matches_closed_form() {
        let s = synth_generate(5, 600, 0.0, 0.0, 3).unwrap();
        for t in 0..600 {
            for node in 0..5 {
                let expect = synth_sinusoid(t, node, 5);
                assert!((s.at(t, node) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metric_hand_values() {
        let m = metrics(&[1.0, 5.0], &[2.0, 4.0], MAPE_MASK_EPS).unwrap();
        assert_eq!(m.mae, 1.0);
        assert_eq!(m.rmse, 1.0);
        assert_eq!(m.mape, Some(37.5));

        let exact = metrics(&[3.0, 4.0], &[3.0, 4.0], MAPE_MASK_EPS).unwrap();
        assert_eq!(exact.mae, 0.0);
        assert_eq!(exact.rmse, 0.0);
        assert_eq!(exact.mape, Some(0.0));
    }

    #[test]
    fn mape_masking() {
        // zero-truth entry is skipped; remaining entry is exact
        let m = metrics(&[1.0, 2.0], &[0.0, 2.0], MAPE_MASK_EPS).unwrap();
        assert_eq!(m.mape, Some(0.0));
        // everything masked -> undefined
        let all_masked = metrics(&[1.0], &[0.0], MAPE_MASK_EPS).unwrap();
        assert_eq!(all_masked.mape, None);
        assert_eq!(all_masked.mae, 1.0);
    }
}
