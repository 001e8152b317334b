//! Comparison methods adapted to several data holders.

mod adassp;
mod bs;

pub use adassp::{adassp_combine, adassp_estimate, adassp_node_release, AdaSspConfig, AdaSspRelease, LambdaMinVariant};
pub use bs::{
    bs_conditional_ss, bs_nig_update, bs_ss_moments, run_mcmc_bs, ss_dim, ExtendedNoisyStats, NigPosterior, NigPrior,
};
