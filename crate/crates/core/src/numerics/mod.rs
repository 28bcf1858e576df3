//! Dense kernels shared by every stage of the pipeline, each paired with a
//! hand-derived backward pass.

pub mod attention;
pub mod gradcheck;
pub mod matrix;
pub mod ops;

pub use attention::{multi_head_attention, multi_head_attention_backward, MhaCache, MhaGrads, MhaWeights};
pub use gradcheck::{grad_check, GradCheckReport, ParamSet};
pub use matrix::Matrix;
pub use ops::{
    cosine_sim_backward, cosine_sim_matrix, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, relu, relu_backward, softmax_rows, softmax_rows_backward, LayerNormCache,
};
