//! Function-preserving architecture obfuscation for convolutional networks,
//! with a FLOPs-constrained search over obfuscation plans.

pub mod arch;
pub mod flops;
pub mod network;
pub mod oracle;
pub mod search;
pub mod tensor;
pub mod transforms;
