pub mod kinematics;
pub mod polling;
pub mod mdp;
pub mod nn;
pub mod md_rl;
pub mod metrics;
pub mod baselines;
pub mod intersection;
pub mod harness;
pub mod verify;
