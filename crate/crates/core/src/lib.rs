//! Static mining of container image repositories.
//!
//! The crate fetches images layer by layer from a registry, keeps layer blobs
//! in a content-addressed store, composes layer diffs into a filesystem view
//! without running anything, and mines Dockerfiles, configuration files and
//! compose files into aggregate reports.

pub mod confmine;
pub mod digest;
pub mod dockerfile;
pub mod kb;
pub mod layerfs;
pub mod pipeline;
pub mod reference;
pub mod registry;
pub mod store;
pub mod testkit;
pub mod version;

pub use digest::Digest;
pub use reference::ImageRef;
