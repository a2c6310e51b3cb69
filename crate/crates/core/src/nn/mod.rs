//! Block definitions, parameter storage, initialization and the `DYNW`
//! weight file format.

mod blocks;
mod params;

pub use blocks::{
    forward_block, init_backbone, init_block, init_tuning, main_prefix, tuning_prefix, BackboneSpec, BlockSpec,
    NORM_EPS,
};
pub use params::{Bound, Param, ParamStore};
