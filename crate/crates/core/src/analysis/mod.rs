//! Cost formulas, instrumented cost measurement, parameter counting and
//! gradient checking.

pub mod flops;
pub mod gradcheck;
pub mod measure;

pub use flops::{flops_ad, flops_wad, mem_ad, mem_wad};
pub use gradcheck::{gradcheck, GradcheckReport, Location};
pub use measure::{measure, CostConfig, CostReport, OpKind};

use crate::attention::AttentionDecoder;
use crate::conv::{Conv2d, TransposedUpsample};
use crate::params::{ParamId, ParamStore};
use crate::wau::{UpsampleStack, Upsampler, WauStage};

/// Anything that owns parameters in a [`ParamStore`].
pub trait Parameterized {
    fn param_ids(&self) -> Vec<ParamId>;
}

macro_rules! parameterized {
    ($($t:ty),*) => {
        $(impl Parameterized for $t {
            fn param_ids(&self) -> Vec<ParamId> {
                <$t>::param_ids(self)
            }
        })*
    };
}

parameterized!(Conv2d, TransposedUpsample, AttentionDecoder, WauStage, Upsampler, UpsampleStack);

/// Number of trainable scalars owned by `model`.
pub fn count_params<T: crate::scalar::Scalar>(store: &ParamStore<T>, model: &impl Parameterized) -> usize {
    store.count(&model.param_ids())
}
