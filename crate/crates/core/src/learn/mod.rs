//! Parameter learning: likelihood ascent, EM variants and particle MCMC.

pub mod conjugate;
pub mod em;
pub mod gradient;
pub mod mcmc;

pub use conjugate::{conjugate_beta_binomial_update, conjugate_invgamma_variance_update};
pub use em::{particle_em, pem_lgss, psaem, EmConfig, EmModel, EmRecord, LgssEmTrace};
pub use gradient::{gradient_search, Direction, SearchConfig, SearchRecord, SearchState};
pub use mcmc::{
    exact_mh_lgss, gibbs_sweep, mh_accept, mh_chain, particle_gibbs, pmmh, ChainTrace, GibbsBlock, McmcConfig,
    ParamConditional, RandomWalkProposal,
};
