//! Euclidean alignment: whiten a trial collection by the inverse square root
//! of its mean spatial covariance.

use serde::{Deserialize, Serialize};

use crate::data::{Trial, TrialSet};
use crate::error::{ensure, Result};
use crate::numerics::{inv_sqrt_psd_report, Tensor};

/// Mean spatial covariance `r_bar` and its whitening matrix `w = r_bar^{-1/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    pub r_bar: Tensor,
    pub w: Tensor,
    pub n_trials_used: usize,
}

impl AlignmentState {
    pub fn identity(c: usize) -> Self {
        AlignmentState {
            r_bar: Tensor::eye(c),
            w: Tensor::eye(c),
            n_trials_used: 0,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.w.shape()[0]
    }

    /// `w · x` for one `c × t` signal.
    pub fn whiten(&self, x: &Tensor) -> Result<Tensor> {
        let (c, t) = x.dims2()?;
        ensure!(
            c == self.n_channels(),
            Validation,
            "alignment fitted on {} channels applied to {c}",
            self.n_channels()
        );
        let w = self.w.data();
        let mut out = vec![0.0f32; c * t];
        let mut acc = vec![0.0f64; t];
        for i in 0..c {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..c {
                let wij = f64::from(w[i * c + j]);
                if wij == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(x.row(j)) {
                    *a += wij * f64::from(v);
                }
            }
            for (o, a) in out[i * t..(i + 1) * t].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Tensor::from_parts(vec![c, t], out)
    }
}

/// `(1/N) Σ X Xᵀ` with `f64` accumulation.
pub fn mean_covariance(ts: &TrialSet) -> Result<Tensor> {
    ensure!(!ts.is_empty(), Validation, "cannot estimate covariance of an empty set");
    let (c, t) = (ts.n_channels(), ts.n_timepoints());
    let mut acc = vec![0.0f64; c * c];
    for tr in ts.trials() {
        let x = tr.signal.data();
        for i in 0..c {
            let ri = &x[i * t..(i + 1) * t];
            for j in i..c {
                let rj = &x[j * t..(j + 1) * t];
                let s: f64 = ri.iter().zip(rj).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                acc[i * c + j] += s;
            }
        }
    }
    let n = ts.len() as f64;
    let mut r = vec![0.0f32; c * c];
    for i in 0..c {
        for j in i..c {
            let v = (acc[i * c + j] / n) as f32;
            r[i * c + j] = v;
            r[j * c + i] = v;
        }
    }
    Tensor::from_parts(vec![c, c], r)
}

pub fn fit_alignment(ts: &TrialSet) -> Result<AlignmentState> {
    let r_bar = mean_covariance(ts)?;
    let inv = inv_sqrt_psd_report(&r_bar)?;
    Ok(AlignmentState {
        r_bar,
        w: inv.matrix,
        n_trials_used: ts.len(),
    })
}

pub fn apply_alignment(state: &AlignmentState, ts: &TrialSet) -> Result<TrialSet> {
    ensure!(
        ts.n_channels() == state.n_channels(),
        Validation,
        "alignment fitted on {} channels applied to a {}-channel set",
        state.n_channels(),
        ts.n_channels()
    );
    let trials: Vec<Trial> = ts
        .trials()
        .iter()
        .map(|tr| Ok(tr.with_signal(state.whiten(&tr.signal)?)))
        .collect::<Result<_>>()?;
    ts.derive(ts.name().to_string(), trials)
}

/// Fits and applies a separate alignment for each user, preserving order.
pub fn align_per_user(ts: &TrialSet) -> Result<TrialSet> {
    let mut out = ts.trials().to_vec();
    for u in ts.users() {
        let idx: Vec<usize> = (0..ts.len()).filter(|&i| ts.trials()[i].user == u).collect();
        let part = ts.derive("user", idx.iter().map(|&i| ts.trials()[i].clone()).collect())?;
        let state = fit_alignment(&part)?;
        for &i in &idx {
            out[i] = out[i].with_signal(state.whiten(&out[i].signal)?);
        }
    }
    ts.derive(ts.name().to_string(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(signals: Vec<Tensor>) -> TrialSet {
        let trials = signals
            .into_iter()
            .map(|s| Trial::new(s, 1, 1, 128.0).unwrap())
            .collect();
        TrialSet::new("t", trials, 1, 1).unwrap()
    }

    #[test]
    fn analytic_four_identity() {
        // rows orthogonal with squared norm 4 → X Xᵀ = 4 I
        let x = Tensor::from_rows(&[&[1.0, 1.0, 1.0, 1.0], &[1.0, -1.0, 1.0, -1.0]]);
        let st = fit_alignment(&set_of(vec![x])).unwrap();
        assert_eq!(st.r_bar, Tensor::from_diag(&[4.0, 4.0]));
        assert!((st.w.at2(0, 0) - 0.5).abs() < 1e-7 && (st.w.at2(1, 1) - 0.5).abs() < 1e-7);
        assert_eq!(st.n_trials_used, 1);
    }

    #[test]
    fn identity_state_is_noop() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let ts = set_of(vec![x]);
        assert_eq!(apply_alignment(&AlignmentState::identity(2), &ts).unwrap(), ts);
    }

    #[test]
    fn diagonal_whitener_scales_rows() {
        let st = AlignmentState {
            r_bar: Tensor::from_diag(&[4.0, 9.0]),
            w: Tensor::from_diag(&[0.5, 1.0 / 3.0]),
            n_trials_used: 1,
        };
        let x = Tensor::from_rows(&[&[2.0, 4.0], &[3.0, 6.0]]);
        let out = st.whiten(&x).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert!((out.row(1)[0] - 1.0).abs() < 1e-7 && (out.row(1)[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn channel_mismatch_and_empty() {
        let ts = set_of(vec![Tensor::zeros(&[3, 4])]);
        assert!(apply_alignment(&AlignmentState::identity(2), &ts).is_err());
        let empty = TrialSet::with_shape("e", vec![], 2, 4, 1, 1).unwrap();
        assert!(fit_alignment(&empty).is_err());
    }
}
