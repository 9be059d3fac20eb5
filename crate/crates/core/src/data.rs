//! Dataset types: raw series, z-score scaling, sliding windows and splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const SECONDS_PER_DAY: u64 = 86_400;
const STD_FLOOR: f64 = 1e-8;

/// Timestamped speed matrix over `N` roads. Zero encodes a missing reading.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignalSeries {
    values: Vec<f32>,
    timestamps: Vec<u64>,
    node_ids: Vec<String>,
    interval_minutes: u32,
}

impl GraphSignalSeries {
    /// `values` is row-major `[timestamps.len(), node_ids.len()]`.
    pub fn new(
        values: Vec<f32>,
        timestamps: Vec<u64>,
        node_ids: Vec<String>,
        interval_minutes: u32,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Shape("series needs at least one node".into()));
        }
        if values.len() != timestamps.len() * n {
            return Err(Error::Shape(format!(
                "{} values for {} steps x {} nodes",
                values.len(),
                timestamps.len(),
                n
            )));
        }
        if interval_minutes == 0 || 1440 % interval_minutes != 0 {
            return Err(Error::config(
                "interval_minutes",
                format!("{interval_minutes} must be positive and divide a day"),
            ));
        }
        let step = u64::from(interval_minutes) * 60;
        for (row, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] || w[1] - w[0] != step {
                return Err(Error::NonUniformInterval {
                    row: row + 1,
                    expected: step as i64,
                    found: w[1] as i64 - w[0] as i64,
                });
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: pos / n,
                column: pos % n + 1,
                reason: "non-finite speed".into(),
            });
        }
        Ok(Self {
            values,
            timestamps,
            node_ids,
            interval_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    #[inline]
    pub fn value(&self, t: usize, n: usize) -> f32 {
        self.values[t * self.n_nodes() + n]
    }

    /// Time-of-day index of step `t`, in `0..steps_per_day`.
    pub fn tau(&self, t: usize) -> usize {
        ((self.timestamps[t] % SECONDS_PER_DAY) / (u64::from(self.interval_minutes) * 60)) as usize
    }

    /// Day of week of step `t`, Monday = 0.
    pub fn day_of_week(&self, t: usize) -> usize {
        // 1970-01-01 was a Thursday
        ((self.timestamps[t] / SECONDS_PER_DAY + 3) % 7) as usize
    }

    /// Steps `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let n = self.n_nodes();
        Self {
            values: self.values[start * n..end * n].to_vec(),
            timestamps: self.timestamps[start..end].to_vec(),
            node_ids: self.node_ids.clone(),
            interval_minutes: self.interval_minutes,
        }
    }
}

/// Z-score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Population mean and standard deviation of every value of `series`,
/// skipping exact zeros when `mask_zero` is set. The standard deviation is
/// floored at `1e-8`.
pub fn fit_scaler(series: &GraphSignalSeries, mask_zero: bool) -> Result<Scaler> {
    let keep = |v: &&f32| !mask_zero || **v != 0.0;
    let (mut count, mut sum) = (0usize, 0.0f64);
    for v in series.values.iter().filter(keep) {
        count += 1;
        sum += f64::from(*v);
    }
    if count == 0 {
        return Err(Error::EmptySeries);
    }
    let mean = sum / count as f64;
    let var = series
        .values
        .iter()
        .filter(keep)
        .map(|v| (f64::from(*v) - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    Ok(Scaler {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

/// One input/target window. Tensors are flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// Series index of the first input step.
    pub start: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub n_nodes: usize,
    pub channels: usize,
    /// `[t_in, n_nodes, channels]`; channel 0 is normalized speed, channel 1
    /// the time of day as a fraction of a day, channel 2 (optional) the day
    /// of week as a fraction of a week.
    pub x: Vec<f64>,
    /// `[t_out, n_nodes]` in original units.
    pub y: Vec<f64>,
    pub tau_in: Vec<usize>,
    pub tau_out: Vec<usize>,
}

impl WindowedSample {
    /// Series index one past the last target step.
    pub fn end(&self) -> usize {
        self.start + self.t_in + self.t_out
    }

    pub fn x_at(&self, t: usize, n: usize, c: usize) -> f64 {
        self.x[(t * self.n_nodes + n) * self.channels + c]
    }

    pub fn y_at(&self, t: usize, n: usize) -> f64 {
        self.y[t * self.n_nodes + n]
    }
}

/// Sliding windows with stride one: `len - t_in - t_out + 1` samples.
pub fn make_windows(
    series: &GraphSignalSeries,
    t_in: usize,
    t_out: usize,
    scaler: &Scaler,
) -> Result<Vec<WindowedSample>> {
    make_windows_with_features(series, t_in, t_out, scaler, false)
}

pub fn make_windows_with_features(
    series: &GraphSignalSeries,
    t_in: usize,
    t_out: usize,
    scaler: &Scaler,
    day_of_week: bool,
) -> Result<Vec<WindowedSample>> {
    if t_in == 0 || t_out == 0 {
        return Err(Error::config("t_in/t_out", "window lengths must be positive"));
    }
    let needed = t_in + t_out;
    if series.len() < needed {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed,
        });
    }
    let n = series.n_nodes();
    let channels = if day_of_week { 3 } else { 2 };
    let spd = series.steps_per_day() as f64;
    let mut out = Vec::with_capacity(series.len() - needed + 1);
    for start in 0..=series.len() - needed {
        let mut x = Vec::with_capacity(t_in * n * channels);
        for t in start..start + t_in {
            let tod = series.tau(t) as f64 / spd;
            let dow = series.day_of_week(t) as f64 / 7.0;
            for node in 0..n {
                x.push(scaler.apply(f64::from(series.value(t, node))));
                x.push(tod);
                if day_of_week {
                    x.push(dow);
                }
            }
        }
        let mut y = Vec::with_capacity(t_out * n);
        for t in start + t_in..start + needed {
            y.extend((0..n).map(|node| f64::from(series.value(t, node))));
        }
        out.push(WindowedSample {
            start,
            t_in,
            t_out,
            n_nodes: n,
            channels,
            x,
            y,
            tau_in: (start..start + t_in).map(|t| series.tau(t)).collect(),
            tau_out: (start + t_in..start + needed).map(|t| series.tau(t)).collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

fn split_counts(total: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!(
            "({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let train = (total as f64 * a + 1e-9).floor() as usize;
    let val = (total as f64 * b + 1e-9).floor() as usize;
    let test = total.saturating_sub(train + val);
    for (name, count) in [("train", train), ("val", val), ("test", test)] {
        if count == 0 {
            return Err(Error::EmptySplit(format!("{name} split would be empty")));
        }
    }
    Ok((train, val, test))
}

/// Contiguous chronological blocks of an already-windowed sample list.
/// Counts are floored; the remainder goes to the test block.
pub fn chronological_split(
    samples: Vec<WindowedSample>,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit> {
    let (train, val, _) = split_counts(samples.len(), ratios)?;
    let mut it = samples.into_iter();
    Ok(DatasetSplit {
        train: it.by_ref().take(train).collect(),
        val: it.by_ref().take(val).collect(),
        test: it.collect(),
    })
}

/// A dataset ready for training: splits whose windows never share a time
/// step across blocks, and the scaler fitted on the training block.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub scaler: Scaler,
    pub steps_per_day: usize,
}

/// Splits the time axis into chronological blocks, fits the scaler on the
/// training block (zeros masked) and windows each block separately.
pub fn prepare_dataset(
    series: &GraphSignalSeries,
    t_in: usize,
    t_out: usize,
    ratios: (f64, f64, f64),
    day_of_week: bool,
) -> Result<PreparedData> {
    let (train, _, _) = split_counts(series.len(), ratios)?;
    let scaler = fit_scaler(&series.slice(0, train), true)?;
    let split = window_blocks(series, t_in, t_out, ratios, day_of_week, &scaler)?;
    Ok(PreparedData {
        split,
        scaler,
        steps_per_day: series.steps_per_day(),
    })
}

/// Windows the chronological blocks of `series` with a given scaler, e.g.
/// the one stored with a trained model.
pub fn window_blocks(
    series: &GraphSignalSeries,
    t_in: usize,
    t_out: usize,
    ratios: (f64, f64, f64),
    day_of_week: bool,
    scaler: &Scaler,
) -> Result<DatasetSplit> {
    let (train, val, _) = split_counts(series.len(), ratios)?;
    let blocks = [
        (0, train),
        (train, train + val),
        (train + val, series.len()),
    ];
    let mut parts = Vec::with_capacity(3);
    for (name, (s, e)) in ["train", "val", "test"].iter().zip(blocks) {
        let block = series.slice(s, e);
        let mut w = make_windows_with_features(&block, t_in, t_out, scaler, day_of_week)
            .map_err(|err| match err {
                Error::SeriesTooShort { .. } => {
                    Error::EmptySplit(format!("{name} block of {} steps is shorter than one window", e - s))
                }
                other => other,
            })?;
        for sample in &mut w {
            sample.start += s;
        }
        parts.push(w);
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(DatasetSplit { train, val, test })
}

/// A mini-batch stacked into the row layout used by the model:
/// rows ordered `(b, t, n)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub n_nodes: usize,
    /// `[B * t_in * N, C]`
    pub x: Matrix,
    /// `[B * t_out * N]`, original units, zero = missing.
    pub y: Vec<f64>,
    /// `[B * t_in]`
    pub tau_in: Vec<usize>,
    /// `[B * t_out]`
    pub tau_out: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&WindowedSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (t_in, t_out, n, c) = (first.t_in, first.t_out, first.n_nodes, first.channels);
        let mut x = Vec::with_capacity(samples.len() * first.x.len());
        let mut y = Vec::with_capacity(samples.len() * first.y.len());
        let mut tau_in = Vec::with_capacity(samples.len() * t_in);
        let mut tau_out = Vec::with_capacity(samples.len() * t_out);
        for s in samples {
            if (s.t_in, s.t_out, s.n_nodes, s.channels) != (t_in, t_out, n, c) {
                return Err(Error::Shape("samples in a batch differ in shape".into()));
            }
            x.extend_from_slice(&s.x);
            y.extend_from_slice(&s.y);
            tau_in.extend_from_slice(&s.tau_in);
            tau_out.extend_from_slice(&s.tau_out);
        }
        Ok(Self {
            size: samples.len(),
            t_in,
            t_out,
            n_nodes: n,
            x: Matrix::from_vec(samples.len() * t_in * n, c, x),
            y,
            tau_in,
            tau_out,
        })
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    /// Input features of the last observed step, `[B * N, C]`.
    pub fn last_step_features(&self) -> Matrix {
        let n = self.n_nodes;
        let idx: Vec<usize> = (0..self.size)
            .flat_map(|b| (0..n).map(move |node| (b * self.t_in + self.t_in - 1) * n + node))
            .collect();
        self.x.gather_rows(&idx)
    }

    /// Input features averaged over the input window, `[B * N, C]`.
    pub fn mean_features(&self) -> Matrix {
        let n = self.n_nodes;
        let c = self.channels();
        let mut out = Matrix::zeros(self.size * n, c);
        for b in 0..self.size {
            for t in 0..self.t_in {
                for node in 0..n {
                    let src = self.x.row((b * self.t_in + t) * n + node);
                    for (o, v) in out.row_mut(b * n + node).iter_mut().zip(src) {
                        *o += v / self.t_in as f64;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f32>, n: usize, interval: u32) -> GraphSignalSeries {
        let t = values.len() / n;
        let ts = (0..t as u64).map(|i| i * u64::from(interval) * 60).collect();
        let ids = (0..n).map(|i| format!("n{i}")).collect();
        GraphSignalSeries::new(values, ts, ids, interval).unwrap()
    }

    #[test]
    fn constant_series_floors_std() {
        let s = series(vec![5.0; 10], 2, 5);
        let sc = fit_scaler(&s, false).unwrap();
        assert_eq!(sc.mean, 5.0);
        assert_eq!(sc.std, 1e-8);
    }

    #[test]
    fn masked_fit_skips_zeros() {
        let s = series(vec![0.0, 10.0, 20.0], 1, 5);
        let sc = fit_scaler(&s, true).unwrap();
        assert_eq!(sc.mean, 15.0);
        // population std of {10, 20}
        assert!((sc.std - 5.0).abs() < 1e-12);
        let unmasked = fit_scaler(&s, false).unwrap();
        assert_eq!(unmasked.mean, 10.0);
    }

    #[test]
    fn all_masked_is_empty() {
        let s = series(vec![0.0; 4], 2, 5);
        assert!(matches!(fit_scaler(&s, true), Err(Error::EmptySeries)));
    }

    #[test]
    fn scaler_roundtrip() {
        let sc = Scaler { mean: 43.2, std: 7.5 };
        for x in [-3.0, 0.0, 12.5, 80.0, 1e4] {
            let back = sc.invert(sc.apply(x));
            assert!((back - x).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn window_counts_at_boundary() {
        let sc = Scaler { mean: 0.0, std: 1.0 };
        let s = series((0..24).map(|v| v as f32).collect(), 1, 5);
        assert_eq!(make_windows(&s, 12, 12, &sc).unwrap().len(), 1);
        let s = series((0..25).map(|v| v as f32).collect(), 1, 5);
        let w = make_windows(&s, 12, 12, &sc).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].x_at(0, 0, 0), 1.0);
        assert_eq!(w[1].y_at(0, 0), 13.0);
        let s = series((0..23).map(|v| v as f32).collect(), 1, 5);
        assert!(matches!(
            make_windows(&s, 12, 12, &sc),
            Err(Error::SeriesTooShort { len: 23, needed: 24 })
        ));
    }

    #[test]
    fn tau_from_timestamp() {
        // 00:05 on 5-minute data is slot 1 of 288
        let s = GraphSignalSeries::new(vec![1.0, 2.0], vec![86_400 * 3, 86_400 * 3 + 300], vec!["a".into()], 5)
            .unwrap();
        assert_eq!(s.steps_per_day(), 288);
        assert_eq!(s.tau(1), 1);
        assert_eq!(s.tau(0), 0);
    }

    #[test]
    fn tau_out_continues_tau_in() {
        let sc = Scaler { mean: 0.0, std: 1.0 };
        // start near midnight so the index wraps
        let start = 86_400 - 5 * 300;
        let ts: Vec<u64> = (0..30).map(|i| start + i * 300).collect();
        let s = GraphSignalSeries::new(vec![1.0; 30], ts, vec!["a".into()], 5).unwrap();
        for w in make_windows(&s, 4, 3, &sc).unwrap() {
            for k in 0..3 {
                assert_eq!(w.tau_out[k], (w.tau_in[3] + k + 1) % 288);
            }
        }
    }

    #[test]
    fn split_counts_follow_floor() {
        let sc = Scaler { mean: 0.0, std: 1.0 };
        let s = series(vec![1.0; 101], 1, 5);
        let w = make_windows(&s, 1, 1, &sc).unwrap();
        assert_eq!(w.len(), 100);
        let sp = chronological_split(w, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (70, 10, 20));
        let s = series(vec![1.0; 11], 1, 5);
        let sp = chronological_split(make_windows(&s, 1, 1, &sc).unwrap(), (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (7, 1, 2));
        let s = series(vec![1.0; 11], 1, 5);
        let err = chronological_split(make_windows(&s, 1, 1, &sc).unwrap(), (1.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::EmptySplit(_))));
        let err = chronological_split(make_windows(&s, 1, 1, &sc).unwrap(), (0.7, 0.1, 0.3));
        assert!(matches!(err, Err(Error::InvalidRatios(_))));
    }

    #[test]
    fn prepared_blocks_are_disjoint() {
        let s = series((0..400).map(|v| 10.0 + (v % 17) as f32).collect(), 2, 5);
        let p = prepare_dataset(&s, 6, 6, (0.7, 0.1, 0.2), false).unwrap();
        let max_end = |v: &[WindowedSample]| v.iter().map(|w| w.end()).max().unwrap();
        let min_start = |v: &[WindowedSample]| v.iter().map(|w| w.start).min().unwrap();
        assert!(max_end(&p.split.train) <= min_start(&p.split.val));
        assert!(max_end(&p.split.val) <= min_start(&p.split.test));
        // scaler is fitted on the first 70% of steps only
        let train_only = fit_scaler(&s.slice(0, 140), true).unwrap();
        assert_eq!(p.scaler, train_only);
    }

    #[test]
    fn batch_layout_is_b_t_n() {
        let sc = Scaler { mean: 0.0, std: 1.0 };
        let s = series((0..40).map(|v| v as f32).collect(), 2, 5);
        let w = make_windows(&s, 3, 2, &sc).unwrap();
        let b = Batch::from_samples(&[&w[0], &w[4]]).unwrap();
        assert_eq!(b.x.shape(), (2 * 3 * 2, 2));
        // sample 1, t = 2, node 1 -> series step 6, node 1 -> value 13
        assert_eq!(b.x.get((3 + 2) * 2 + 1, 0), 13.0);
        let last = b.last_step_features();
        assert_eq!(last.get(3, 0), 13.0);
        assert_eq!(b.y[2 * 2], 14.0);
    }

    #[test]
    fn non_uniform_timestamps_rejected() {
        let r = GraphSignalSeries::new(vec![1.0; 3], vec![0, 300, 900], vec!["a".into()], 5);
        assert!(matches!(r, Err(Error::NonUniformInterval { row: 2, .. })));
    }
}
