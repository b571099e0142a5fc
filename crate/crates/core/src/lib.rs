//! Desk-scale laboratory for cloning deterministic first-person maze
//! environments with a world model.
//!
//! The pipeline: a raycast maze environment produces deterministic
//! trajectories; a temporally-contextualized variational autoencoder learns
//! frame representations under slowness and uniformity regularization on a
//! projected hypersphere; latent dynamics backends roll the world forward;
//! the evaluation kit measures rollout fidelity, latent probing accuracy,
//! and cluster coherence.

pub mod evalkit;
pub mod geomloss;
pub mod latdyn;
pub mod mazeworld;
pub mod numcore;
pub mod presets;
pub mod repmodel;
pub mod trajectories;
