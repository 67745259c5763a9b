//! LG-Net keyword-spotting model.

mod config;
mod lgnet;

pub use config::{LgBlockConfig, LgNetConfig, ModelPreset};
pub use lgnet::{
    argmax, positional_encoding, self_attention, AttentionVars, Bound, Buffer, Inference, LgNet, Mode, Param,
    ParamGroup, PendingStats,
};
