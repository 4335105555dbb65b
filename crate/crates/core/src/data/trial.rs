use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// One EEG epoch: a `channels × time` matrix with task and user labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub signal: Tensor,
    /// Task label in `1..=K`.
    pub label: u16,
    /// User identity in `1..=U`.
    pub user: u16,
    pub sample_rate_hz: f32,
}

impl Trial {
    pub fn new(signal: Tensor, label: u16, user: u16, sample_rate_hz: f32) -> Result<Self> {
        ensure!(
            signal.ndim() == 2,
            Dimension,
            "trial signal must be channels x time, got {:?}",
            signal.shape()
        );
        ensure!(signal.is_finite(), Validation, "trial signal has non-finite values");
        ensure!(
            sample_rate_hz > 0.0 && sample_rate_hz.is_finite(),
            Validation,
            "sample rate must be positive, got {sample_rate_hz}"
        );
        Ok(Trial {
            signal,
            label,
            user,
            sample_rate_hz,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn n_timepoints(&self) -> usize {
        self.signal.shape()[1]
    }

    /// Same labels, new signal.
    pub fn with_signal(&self, signal: Tensor) -> Trial {
        Trial {
            signal,
            label: self.label,
            user: self.user,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Ordered collection of trials sharing `(channels, timepoints)`.
///
/// Order is chronological and meaningful: calibration splits take a prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    name: String,
    n_channels: usize,
    n_timepoints: usize,
    n_classes: usize,
    n_users: usize,
    trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(
        name: impl Into<String>,
        trials: Vec<Trial>,
        n_classes: usize,
        n_users: usize,
    ) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::Validation("trial set must not be empty".into()))?;
        let (c, t) = (first.n_channels(), first.n_timepoints());
        Self::with_shape(name, trials, c, t, n_classes, n_users)
    }

    /// Like [`TrialSet::new`] but allows an empty collection of a known shape.
    pub fn with_shape(
        name: impl Into<String>,
        trials: Vec<Trial>,
        n_channels: usize,
        n_timepoints: usize,
        n_classes: usize,
        n_users: usize,
    ) -> Result<Self> {
        ensure!(n_classes >= 1 && n_users >= 1, Validation, "K and U must be >= 1");
        for (i, tr) in trials.iter().enumerate() {
            ensure!(
                tr.n_channels() == n_channels && tr.n_timepoints() == n_timepoints,
                Dimension,
                "trial {i} is {}x{}, expected {n_channels}x{n_timepoints}",
                tr.n_channels(),
                tr.n_timepoints()
            );
            ensure!(
                tr.label >= 1 && usize::from(tr.label) <= n_classes,
                Validation,
                "trial {i} label {} outside 1..={n_classes}",
                tr.label
            );
            ensure!(
                tr.user >= 1 && usize::from(tr.user) <= n_users,
                Validation,
                "trial {i} user {} outside 1..={n_users}",
                tr.user
            );
        }
        Ok(TrialSet {
            name: name.into(),
            n_channels,
            n_timepoints,
            n_classes,
            n_users,
            trials,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn into_trials(self) -> Vec<Trial> {
        self.trials
    }

    pub fn sample_rate_hz(&self) -> Option<f32> {
        self.trials.first().map(|t| t.sample_rate_hz)
    }

    /// Distinct user ids, ascending.
    pub fn users(&self) -> Vec<u16> {
        let mut u: Vec<u16> = self.trials.iter().map(|t| t.user).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// New set with the same metadata and different trials.
    pub fn derive(&self, name: impl Into<String>, trials: Vec<Trial>) -> Result<TrialSet> {
        Self::with_shape(
            name,
            trials,
            self.n_channels,
            self.n_timepoints,
            self.n_classes,
            self.n_users,
        )
    }

    /// Same trials, labels reinterpreted with a different class count.
    pub fn relabel(&self, name: impl Into<String>, f: impl Fn(&Trial) -> u16, n_classes: usize) -> Result<TrialSet> {
        let trials = self
            .trials
            .iter()
            .map(|t| Trial {
                label: f(t),
                ..t.clone()
            })
            .collect();
        Self::with_shape(
            name,
            trials,
            self.n_channels,
            self.n_timepoints,
            n_classes,
            self.n_users,
        )
    }

    /// Concatenates sets with identical shapes; metadata of the first wins
    /// except that `K`/`U` take the maximum.
    pub fn concat(name: impl Into<String>, parts: &[&TrialSet]) -> Result<TrialSet> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
        let mut trials = Vec::new();
        let (mut k, mut u) = (first.n_classes, first.n_users);
        for p in parts {
            ensure!(
                p.n_channels == first.n_channels && p.n_timepoints == first.n_timepoints,
                Dimension,
                "cannot concatenate {}x{} with {}x{}",
                p.n_channels,
                p.n_timepoints,
                first.n_channels,
                first.n_timepoints
            );
            k = k.max(p.n_classes);
            u = u.max(p.n_users);
            trials.extend(p.trials.iter().cloned());
        }
        Self::with_shape(name, trials, first.n_channels, first.n_timepoints, k, u)
    }

    /// Stacks the selected trials into a `(b, c, t)` batch and zero-based labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.n_channels * self.n_timepoints;
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let tr = self
                .trials
                .get(i)
                .ok_or_else(|| Error::Validation(format!("trial index {i} out of range")))?;
            data.extend_from_slice(tr.signal.data());
            labels.push(usize::from(tr.label) - 1);
        }
        let t = Tensor::from_parts(vec![indices.len(), self.n_channels, self.n_timepoints], data)?;
        Ok((t, labels))
    }

    pub fn full_batch(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Chronological calibration/test split: the first `⌊fraction·N⌋` trials
/// become calibration data, the rest test data.
pub fn split_calibration(ts: &TrialSet, fraction: f64) -> Result<(TrialSet, TrialSet)> {
    ensure!(
        fraction > 0.0 && fraction < 1.0,
        Validation,
        "calibration fraction must lie in (0, 1), got {fraction}"
    );
    let n = ts.len();
    let k = (fraction * n as f64).floor() as usize;
    ensure!(
        k >= 1 && k < n,
        Validation,
        "split of {n} trials at fraction {fraction} leaves an empty side"
    );
    let cal = ts.derive(format!("{}-calibration", ts.name), ts.trials[..k].to_vec())?;
    let test = ts.derive(format!("{}-test", ts.name), ts.trials[k..].to_vec())?;
    Ok((cal, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> TrialSet {
        let trials = (0..n)
            .map(|i| {
                Trial::new(
                    Tensor::full(&[2, 3], i as f32),
                    (i % 2 + 1) as u16,
                    1,
                    128.0,
                )
                .unwrap()
            })
            .collect();
        TrialSet::new("toy", trials, 2, 1).unwrap()
    }

    #[test]
    fn split_preserves_order() {
        let ts = toy(10);
        let (cal, test) = split_calibration(&ts, 0.2).unwrap();
        assert_eq!((cal.len(), test.len()), (2, 8));
        assert_eq!(cal.trials()[1].signal.data()[0], 1.0);
        assert_eq!(test.trials()[0].signal.data()[0], 2.0);
        let joined = TrialSet::concat("toy", &[&cal, &test]).unwrap();
        assert_eq!(joined.trials(), ts.trials());
    }

    #[test]
    fn split_half_of_160() {
        let (cal, test) = split_calibration(&toy(160), 0.5).unwrap();
        assert_eq!((cal.len(), test.len()), (80, 80));
    }

    #[test]
    fn split_rejects_empty_side() {
        assert!(matches!(split_calibration(&toy(3), 0.2), Err(Error::Validation(_))));
        assert!(matches!(split_calibration(&toy(3), 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_out_of_range_labels_and_ragged_shapes() {
        let bad = Trial::new(Tensor::zeros(&[2, 3]), 3, 1, 128.0).unwrap();
        assert!(TrialSet::new("x", vec![bad], 2, 1).is_err());
        let a = Trial::new(Tensor::zeros(&[2, 3]), 1, 1, 128.0).unwrap();
        let b = Trial::new(Tensor::zeros(&[2, 4]), 1, 1, 128.0).unwrap();
        assert!(matches!(TrialSet::new("x", vec![a, b], 2, 1), Err(Error::Dimension(_))));
    }
}
