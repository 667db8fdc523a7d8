//! The TSViT backbone and its multi-modal fusion variants.

pub mod fusion;
pub mod tsvit;

pub use fusion::{
    caf_forward, early_fusion_concat, mm_forward, sctf_forward, sctf_sync, FusionMode, MmParams, Model,
    ModelConfig,
};
pub use tsvit::{
    check_grid, new_class_tokens, patchify, sm_tsvit_forward, unpatchify, SpatialStage, TemporalBranch, TokenizerConfig, TsvitConfig,
    TsvitParams,
};
