//! Toy transformer forecasters: a token encoder-decoder and a patch
//! decoder-only model, with full-precision weights, seeded init, a
//! versioned on-disk format, plan-driven zero ablation, and traced inference.

pub mod ablation;
pub mod blocks;
pub mod config;
pub mod forward;
pub mod trace;
pub mod weights;

pub use ablation::{AblationPlan, Component};
pub use config::{Arch, HeadKind, ModelConfig, NormKind, QUANTILE_LEVELS};
pub use forward::{
    decode_tokens, forecast, DecodePolicy, ForecastOutput, ForwardOptions, QuantileForecast,
    TokenDecodeOutput,
};
pub use trace::{cross_head_contribution, head_contribution, ForecastTrace, StepTrace};
pub use weights::{
    init_weights, load_bundle, save_bundle, AttnWeights, EmbedWeights, HeadWeights, LayerWeights,
    MlpWeights, ModelBundle, ModelWeights, FORMAT_VERSION,
};
