//! Base inverter `p(x⁰ | e)` and corrector `p(x^{t+1} | e, x^t, ê^t)`.

mod decode;
mod inverter;
mod params;
mod projection;
mod tasks;
mod train;
pub mod transformer;

pub use decode::{beam_search, greedy, nucleus, DecodeStrategy, Decoded};
pub use inverter::{Conditioning, Encoded, InverterConfig, InverterModel, LossOutput};
pub use params::{Adam, Init, ParamStore};
pub use projection::ProjectionHead;
pub use train::{
    evaluate_pairs, learning_rate_at, load_inverter, EvalResult, Inverter, ModelRole, StepRecord,
    TrainHyperparams, TrainState, Trainer, TrainingPair,
};
pub use tasks::{
    augment_hypotheses, perturb, AugmentConfig, base_generate, base_pairs, corrector_pairs, empty_embedding, train_base, train_corrector,
    GeneratedCandidate,
};
