//! Frozen toy teacher, trainable student, span masking and negative sampling.

mod layers;
mod mask;
mod student;
mod teacher;

pub use layers::{sinusoidal_positions, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use mask::{apply_span_mask, sample_negative_indices, sample_negatives, MaskSpec};
pub use student::{
    param_group, ParamGroup, StudentConfig, StudentModel, StudentSize, StudentTrace,
    STUDENT_LAYERS,
};
pub use teacher::{argmax, TeacherConfig, TeacherModel, TeacherOutputs, TeacherTrace};
