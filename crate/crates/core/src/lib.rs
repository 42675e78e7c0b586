//! Multi-resolution neural ranking with duplex attention.
//!
//! Query and document token sequences are embedded ([`embeddings`]), turned
//! into densely connected n-gram feature maps ([`ngram`]), matched through two
//! attention stages into a scalar distance ([`attention`]), trained with
//! hard-mined triplet loss ([`training`]) and evaluated with recall@k, MRR and
//! MAP ([`evalrank`]). [`diffcore`] is the small autodiff engine underneath.

pub mod attention;
pub mod config;
pub mod dataset;
pub mod diffcore;
pub mod embeddings;
pub mod error;
pub mod evalrank;
pub mod gradsuite;
pub mod model;
pub mod ngram;
pub mod params;
pub mod training;

pub use error::{Error, Result};
