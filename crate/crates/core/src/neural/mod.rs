//! Multilayer perceptrons trained with Adam, and the two training schemes
//! for robust value and action networks: sampled-measure minimax and the
//! Wasserstein dual.

mod mlp;
mod train;

pub use mlp::{AdamState, Mlp, Trace};
pub use train::{
    dual_inner_value, dual_objective, log_to_csv, minimax_objective, regression_loss,
    squash_action, substream, train_algorithm1, train_algorithm2, DualSample, Featurizer, LogRow,
    MinimaxSample, ModelDump, NetworkValue, NeuralPolicy, RawFeatures, Sampling, StageValue,
    StateSampler, TerminalValue, TrainConfig, TrainedModel, Weighted, ZGrid,
};
