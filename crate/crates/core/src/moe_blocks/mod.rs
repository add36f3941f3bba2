//! Layers specific to the imputation network: the receptive-field adaptive
//! MoE block, the FiLM bridge, the Fusion MoE head, and the step embedding.

mod bridge;
mod embedding;
mod fusion;
mod params;
mod rfamoe;
mod router;

pub use bridge::{bridge_forward, BridgeParams};
pub use embedding::{step_embedding, step_embeddings};
pub use fusion::{fusion_moe_forward, fusion_moe_forward_with, FusionMoeParams, HeadGates};
pub use params::{param_gradcheck, ConvParams, GateMode, LinearParams, Params};
pub use rfamoe::{rfamoe_forward, RfamoeParams};
pub use router::{argmax, route_top1, router_logits, Routing};

pub(crate) use params::join;
