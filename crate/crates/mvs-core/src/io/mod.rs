//! File formats: PFM depth maps, PLY point clouds, MVSNet-style camera
//! text files, flat key-value configuration, and weight bundles.

pub mod camera_txt;
pub mod kv;
pub mod manifest;
pub mod pfm;
pub mod ply;
pub mod weights;
