//! Disjoint windowing and the per-window feature vector.
//!
//! Each axis of a window contributes six values: the 10th, 25th, 50th, 75th
//! and 90th percentile points followed by the lag-1 autocorrelation. Axes are
//! laid out one after another, so a three-axis window yields
//!
//! ```text
//! [a1.p10 a1.p25 a1.p50 a1.p75 a1.p90 a1.ac1  a2.p10 ... a2.ac1  a3.p10 ... a3.ac1]
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Bout, Corpus, Signal};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Percent levels of the five percentile features, in output order.
pub const PERCENTILES: [usize; 5] = [10, 25, 50, 75, 90];

/// Features emitted per axis.
pub const FEATURES_PER_AXIS: usize = 6;

/// A borrowed window of `length` consecutive samples across all axes.
#[derive(Debug, Clone, Copy)]
pub struct RawWindow<'a> {
    pub index: usize,
    axes: usize,
    data: &'a [f64],
}

impl<'a> RawWindow<'a> {
    pub fn len(&self) -> usize {
        self.data.len() / self.axes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(axis)
            .step_by(self.axes)
            .copied()
            .collect()
    }
}

/// Splits a signal into `floor(T / window_length)` disjoint windows in time
/// order. Trailing samples that do not fill a window are dropped.
pub fn segment(signal: &Signal, window_length: usize) -> Result<Vec<RawWindow<'_>>> {
    if window_length < 2 {
        return Err(Error::InvalidInput("window_length must be at least 2".into()));
    }
    if signal.samples() < window_length {
        return Err(Error::InvalidInput(format!(
            "bout shorter than one window ({} < {window_length} samples)",
            signal.samples()
        )));
    }
    Ok((0..signal.samples() / window_length)
        .map(|w| RawWindow {
            index: w,
            axes: signal.axes(),
            data: signal.rows(w * window_length, (w + 1) * window_length),
        })
        .collect())
}

/// 1-based sorted position used for percent level `percent` in a window of
/// `n` samples: the nearest-rank rule `ceil(percent * n / 100)`, clamped to
/// `1..=n`. For `n = 12` this gives positions 2, 3, 6, 9 and 11.
pub fn percentile_rank(percent: usize, n: usize) -> usize {
    (percent * n).div_ceil(100).clamp(1, n)
}

/// The five percentile points of one axis of a window, read off the sorted
/// samples without interpolation.
pub fn percentile_points(values: &[f64]) -> Result<[f64; 5]> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "percentile window needs at least 2 samples, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(PERCENTILES.map(|p| sorted[percentile_rank(p, n) - 1]))
}

/// Sample lag-1 autocorrelation with the full-length denominator. Constant
/// input returns 0.
pub fn lag1_autocorrelation(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "autocorrelation needs at least 2 samples, got {n}"
        )));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Ok(0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let numer: f64 = values
        .windows(2)
        .map(|pair| (pair[0] - mean) * (pair[1] - mean))
        .sum();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Feature vector of one window, axis-major.
pub fn window_feature_values(window: &RawWindow<'_>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(window.axes() * FEATURES_PER_AXIS);
    for axis in 0..window.axes() {
        let values = window.axis(axis);
        out.extend_from_slice(&percentile_points(&values)?);
        out.push(lag1_autocorrelation(&values)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub bout_id: String,
    pub window_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoutFeatures {
    pub bout_id: String,
    pub windows: Vec<WindowFeatures>,
}

impl BoutFeatures {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.windows.iter().map(|w| w.values.as_slice())
    }
}

/// Window features for every bout of a corpus, in corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub dim: usize,
    pub bouts: Vec<BoutFeatures>,
}

impl FeatureTable {
    pub fn window_count(&self) -> usize {
        self.bouts.iter().map(|b| b.windows.len()).sum()
    }

    /// All window vectors of the bouts at `indices`, flattened in order.
    pub fn rows_for(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices
            .iter()
            .flat_map(|&i| self.bouts[i].windows.iter().map(|w| w.values.clone()))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["bout_id".to_string(), "window_index".to_string()];
        header.extend((1..=self.dim).map(|i| format!("f{i}")));
        out.write_record(&header)?;
        for bout in &self.bouts {
            for w in &bout.windows {
                let mut record = vec![w.bout_id.clone(), w.window_index.to_string()];
                record.extend(w.values.iter().map(|v| v.to_string()));
                out.write_record(&record)?;
            }
        }
        out.flush().map_err(|e| Error::io("feature table", e))?;
        Ok(())
    }
}

pub fn featurize_bout(bout: &Bout, window_length: usize) -> Result<BoutFeatures> {
    let windows = segment(&bout.signal, window_length)?
        .iter()
        .map(|w| {
            Ok(WindowFeatures {
                bout_id: bout.bout_id.clone(),
                window_index: w.index,
                values: window_feature_values(w)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoutFeatures {
        bout_id: bout.bout_id.clone(),
        windows,
    })
}

pub fn featurize(corpus: &Corpus, window_length: usize, exec: Execution) -> Result<FeatureTable> {
    let bouts = par::try_map(exec, corpus.bouts(), |b| featurize_bout(b, window_length))?;
    Ok(FeatureTable {
        dim: corpus.axis_count() * FEATURES_PER_AXIS,
        bouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CategoryLabel;

    fn signal_1d(values: &[f64]) -> Signal {
        Signal::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment(&signal_1d(&[0.0; 60]), 12).unwrap().len(), 5);
        assert_eq!(segment(&signal_1d(&[0.0; 12]), 12).unwrap().len(), 1);
        let values: Vec<f64> = (0..25).map(f64::from).collect();
        let signal = signal_1d(&values);
        let windows = segment(&signal, 12).unwrap();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[1].axis(0).last(), Some(&23.0));
        assert!(segment(&signal_1d(&[0.0; 11]), 12).is_err());
    }

    #[test]
    fn nearest_rank_positions_for_twelve() {
        let ranks: Vec<usize> = PERCENTILES.iter().map(|&p| percentile_rank(p, 12)).collect();
        assert_eq!(ranks, [2, 3, 6, 9, 11]);
        assert_eq!(percentile_rank(10, 2), 1);
        assert_eq!(percentile_rank(90, 2), 2);
    }

    #[test]
    fn percentile_points_of_ramp_and_constant() {
        let ramp: Vec<f64> = (1..=12).map(f64::from).collect();
        assert_eq!(percentile_points(&ramp).unwrap(), [2.0, 3.0, 6.0, 9.0, 11.0]);
        assert_eq!(percentile_points(&[4.5; 12]).unwrap(), [4.5; 5]);
    }

    #[test]
    fn autocorrelation_closed_forms() {
        assert_eq!(lag1_autocorrelation(&[3.0; 12]).unwrap(), 0.0);
        let alt: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 2.5 } else { -2.5 }).collect();
        let r = lag1_autocorrelation(&alt).unwrap();
        assert!((r + 11.0 / 12.0).abs() < 1e-15, "{r}");
        assert!(lag1_autocorrelation(&[1.0]).is_err());
    }

    #[test]
    fn near_constant_float_window_is_zero() {
        // 0.1 repeated: the mean is not exactly 0.1 in binary, the window is
        // still constant.
        assert_eq!(lag1_autocorrelation(&[0.1; 12]).unwrap(), 0.0);
    }

    #[test]
    fn featurize_shapes() {
        let data: Vec<f64> = (0..180).map(|i| (i * 7 % 13) as f64).collect();
        let bout = Bout::new("b", "s", CategoryLabel::new("Sed"), Signal::new(60, 3, data).unwrap(), None, 12)
            .unwrap();
        let features = featurize_bout(&bout, 12).unwrap();
        assert_eq!(features.windows.len(), 5);
        assert!(features.windows.iter().all(|w| w.values.len() == 18));

        let one = Bout::new("c", "s", CategoryLabel::new("Sed"), signal_1d(&[1.0; 30]), None, 12).unwrap();
        let features = featurize_bout(&one, 12).unwrap();
        assert_eq!(features.windows[0].values.len(), 6);
    }

    #[test]
    fn axis_major_layout() {
        // axis 1 is a ramp, axis 2 a constant
        let mut data = Vec::new();
        for t in 0..12 {
            data.push(t as f64 + 1.0);
            data.push(7.0);
        }
        let signal = Signal::new(12, 2, data).unwrap();
        let windows = segment(&signal, 12).unwrap();
        let values = window_feature_values(&windows[0]).unwrap();
        assert_eq!(&values[..5], &[2.0, 3.0, 6.0, 9.0, 11.0]);
        assert_eq!(&values[6..], &[7.0, 7.0, 7.0, 7.0, 7.0, 0.0]);
    }
}
