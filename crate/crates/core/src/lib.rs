//! Review-augmented contrastive collaborative filtering.
//!
//! A collaborative backbone (matrix factorization or LightGCN) trained with
//! the pairwise BPR loss, jointly with two InfoNCE objectives built from
//! review text embeddings:
//!
//! * agreement between two disjoint review views of the same user (or item),
//! * alignment of each collaborative embedding with a review view of the same entity.
//!
//! Entities without reviews simply drop out of both contrastive sums.
//!
//! The crate also covers the surrounding protocol: K-core filtering and
//! random splits ([`corpus`]), view sampling and review masking ([`views`]),
//! ranking metrics, the missing-review sweep and the view-similarity analysis ([`eval`]).

pub mod backbone;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
