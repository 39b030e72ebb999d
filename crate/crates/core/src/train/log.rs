use std::path::Path;

use super::TrainError;

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's couples.
    pub loss: f64,
    pub l_xy: f64,
    pub l_yx: f64,
    pub l_sep: f64,
    pub sigmas: Vec<f64>,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Everything except wall-clock timing, for run-to-run comparison.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.epoch, a.loss, a.l_xy, a.l_yx, a.l_sep, a.lr) == (b.epoch, b.loss, b.l_xy, b.l_yx, b.l_sep, b.lr)
                    && a.sigmas == b.sigmas
            })
    }

    /// Per-epoch losses and σ values. Wall time is left out so that reruns
    /// produce identical files.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::csv(path, e))?;
        let sigmas = self.records.first().map_or(0, |r| r.sigmas.len());
        let mut header = vec!["epoch".to_string(), "loss".into(), "l_xy".into(), "l_yx".into(), "l_sep".into(), "lr".into()];
        header.extend((0..sigmas).map(|i| format!("sigma_{i}")));
        w.write_record(&header).map_err(|e| TrainError::csv(path, e))?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.l_xy.to_string(),
                r.l_yx.to_string(),
                r.l_sep.to_string(),
                r.lr.to_string(),
            ];
            row.extend(r.sigmas.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| TrainError::csv(path, e))?;
        }
        w.flush().map_err(|e| TrainError::io(path, e))
    }
}

/// Trailing moving average; the first `window - 1` entries average over
/// what is available. A window of equal values returns that value exactly.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let slice = &values[(i + 1).saturating_sub(window)..=i];
            if slice.iter().all(|&v| v == slice[0]) {
                slice[0]
            } else {
                slice.iter().sum::<f64>() / slice.len() as f64
            }
        })
        .collect()
}

/// First epoch whose smoothed loss is at or below `target`.
pub fn first_epoch_reaching(smoothed: &[f64], target: f64) -> Option<usize> {
    smoothed.iter().position(|&v| v <= target)
}

/// CSV with `epoch,raw,smoothed` rows.
pub fn emit_loss_curve(log: &TrainLog, path: &Path, window: usize) -> Result<(), TrainError> {
    if log.records.is_empty() {
        return Err(TrainError::Invalid("loss curve needs at least one epoch".into()));
    }
    let raw = log.losses();
    let smooth = moving_average(&raw, window);
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::csv(path, e))?;
    w.write_record(["epoch", "raw", "smoothed"]).map_err(|e| TrainError::csv(path, e))?;
    for (r, (a, b)) in log.records.iter().zip(raw.iter().zip(&smooth)) {
        w.write_record([r.epoch.to_string(), a.to_string(), b.to_string()])
            .map_err(|e| TrainError::csv(path, e))?;
    }
    w.flush().map_err(|e| TrainError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log(losses: &[f64]) -> TrainLog {
        TrainLog {
            records: losses
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| EpochRecord {
                    epoch,
                    loss,
                    l_xy: loss / 2.0,
                    l_yx: loss / 2.0,
                    l_sep: 0.0,
                    sigmas: vec![0.1],
                    lr: 1e-3,
                    wall_secs: 0.5,
                })
                .collect(),
        }
    }

    fn read_rows(path: &Path) -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(path).unwrap();
        r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
    }

    #[test]
    fn one_epoch_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        emit_loss_curve(&log(&[2.0]), &p, 10).unwrap();
        assert_eq!(read_rows(&p), vec![vec!["0", "2", "2"]]);
        assert!(emit_loss_curve(&TrainLog::default(), &p, 10).is_err());
    }

    #[test]
    fn constant_loss_is_unchanged_by_smoothing() {
        let v = vec![0.1; 25];
        assert_eq!(moving_average(&v, 10), v);
    }

    #[test]
    fn train_log_csv_has_sigma_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log(&[3.0, 1.0]).write_csv(&p).unwrap();
        let mut r = csv::Reader::from_path(&p).unwrap();
        assert_eq!(r.headers().unwrap().iter().next_back(), Some("sigma_0"));
        assert_eq!(read_rows(&p).len(), 2);
    }

    #[test]
    fn reaching_epoch() {
        assert_eq!(first_epoch_reaching(&[3.0, 2.0, 1.0], 2.0), Some(1));
        assert_eq!(first_epoch_reaching(&[3.0], 2.0), None);
    }

    proptest! {
        #[test]
        fn smoothing_matches_direct_window_means(
            v in prop::collection::vec(0.0f64..10.0, 1..60),
            window in 1usize..15,
        ) {
            let got = moving_average(&v, window);
            for i in 0..v.len() {
                let lo = i.saturating_sub(window - 1);
                let want = v[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
                prop_assert!((got[i] - want).abs() < 1e-9);
            }
        }
    }
}
