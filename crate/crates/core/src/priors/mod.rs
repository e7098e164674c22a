//! Geometric priors: Gaussians over log aspect ratio and log half-perimeter,
//! and pose-relative mixtures over the box center.

mod gaussian;
pub mod gmm;
mod model;

pub use gaussian::Gaussian1D;
pub use gmm::{bic, gmm_em_fit, select_components, BicRow, ComponentSelection, EmConfig, EmFit, Gmm2D, GmmComponent};
pub use model::{
    fit_class_priors, log_prior, select_joints, CandidateSummary, ClassPriorModel, JointPrior, JointPriorCandidate,
    JointTerm, MissingJointPolicy, PriorConfig, PriorFitMetadata, PriorFitReport, PriorSample, PriorTerms,
    SkippedClass, SELECTED_JOINTS,
};
