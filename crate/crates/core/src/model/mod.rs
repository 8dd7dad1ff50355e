//! The rendering model: architectures, parameters, bottom-up inference,
//! top-down rendering, sampling and checkpoints.

mod arch;
mod checkpoint;
mod generate;
mod infer;
mod params;
mod paths;
#[cfg(test)]
mod tests;

pub use arch::{conv_large, conv_small, conv_tiny, ArchitectureSpec, Layer, Preset, PresetDefaults};
pub use checkpoint::{write_atomic, Checkpoint, MAGIC, VERSION};
pub use generate::{sample, GenerativeConfig, Sample};
pub use infer::{
    argmax_rows, bottom_up, bottom_up_pass, drmm_layer_render, one_hot, top_down, top_down_pass, BottomUpPass, LatentTrace, LayerLatents, Phase,
    Placement, TopDownOptions, TopDownPass, Unpool,
};
pub use params::{ConvParams, ConvVars, ModelParams, ParamVars};
pub use paths::{sum_over_paths, MAX_PATH_CONVS, MAX_PATH_EXTENT};
