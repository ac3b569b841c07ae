//! Associative partial domain adaptation.
//!
//! Source samples are weighted by a learned commonness score, features are
//! propagated through a graph built from label vectors, and a signed centroid
//! loss pulls common classes together across domains while pushing the least
//! common ones apart.

pub mod autodiff;
pub mod data;
pub mod crg;
pub mod networks;
pub mod objectives;
pub mod trainer;
