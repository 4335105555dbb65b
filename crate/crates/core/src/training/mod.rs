//! Training objectives (clean cross-entropy, adversarial min-max, and
//! adversarial target plus clean perturbed source), scale augmentation and
//! seed ensembles.

mod augment;
mod ensemble;
mod optim;
mod train;

pub use augment::augment_scale;
pub use ensemble::{ensemble_predict, train_ensemble, EnsembleModel};
pub use optim::{Adam, AdamConfig};
pub use train::{
    fine_tune, train, train_model, Augmentation, EpochLog, Objective, Start, TrainConfig, TrainOutcome,
};
