//! Stain-aware domain alignment for imbalanced multi-domain cell classification.
//!
//! The pipeline decomposes RGB images into stain colour bases and density maps
//! ([`stain_separation`]), clusters the bases into pseudo-domains
//! ([`stain_clustering`]), re-stains each image with bases drawn from the other
//! clusters ([`augmentation`]), and trains an encoder so that raw and re-stained
//! views agree ([`losses`], [`toy_train`]).

pub mod augmentation;
pub mod imaging;
pub mod layers;
pub mod losses;
pub mod matrix_csv;
pub mod stain_clustering;
pub mod stain_separation;
pub mod toy_train;
