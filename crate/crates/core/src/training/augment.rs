use rand::Rng;

use crate::data::TrialSet;
use crate::error::{ensure, Result};
use crate::seed::SeedKey;

/// Each trial followed by one copy scaled by `1 ± beta`, the sign drawn per
/// trial from `seed`. Output has twice the input size.
pub fn augment_scale(ts: &TrialSet, beta: f32, seed: u64) -> Result<TrialSet> {
    ensure!(
        beta.is_finite() && (0.0..1.0).contains(&beta),
        Validation,
        "scale augmentation beta {beta} outside [0, 1)"
    );
    let mut rng = SeedKey::new(seed).with_str("scale").rng();
    let mut out = Vec::with_capacity(2 * ts.len());
    for tr in ts.trials() {
        let s = if rng.gen::<bool>() { 1.0 + beta } else { 1.0 - beta };
        out.push(tr.clone());
        out.push(tr.with_signal(tr.signal.scale(s)));
    }
    ts.derive(format!("{}+scale", ts.name()), out)
}
