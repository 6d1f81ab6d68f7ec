//! Decoupling of the PNLSS polynomial into parallel univariate branches.
//!
//! The Jacobian of the multivariate polynomial is sampled at random points
//! and stacked into a third-order tensor whose CPD supplies the input and
//! output transformations `V`, `W`; the third factor `H` holds branch
//! derivatives, which are fitted by univariate polynomials and integrated.

mod branches;
mod cpd;
mod model;
mod sweep;
mod tensor;

pub use branches::{fit_branches, fit_derivative, integrate, BranchFit, CONDITION_LIMIT};
pub use cpd::{check_uniqueness, cpd, estimate_rank, CpdFactors, CpdOptions, CpdStop, RankEstimate};
pub use model::{assemble_decoupled, train_decoupled, DecoupledModel};
pub use sweep::{derive_seed, sweep_and_select, trial_seed, SweepConfig, SweepData, SweepReport, SweepRow};
pub use tensor::{build_jacobian_tensor, trajectory_scales, JacobianTensor, Tensor3};
