//! Orientation recognition and standardization for 2D cardiac MR slices.
//!
//! The eight in-plane orientation classes are the elements of the dihedral
//! group of order 8 ([`orient`]). A small CNN, either standalone or as the
//! orientation branch of a multi-task U-Net ([`nets`]), predicts the class of
//! each slice; [`standardize`] then applies the inverse operation to voxels
//! and header geometry.

pub mod datagen;
pub mod nets;
pub mod orient;
pub mod preprocess;
pub mod standardize;
pub mod tensor;
pub mod train;
pub mod volume;
