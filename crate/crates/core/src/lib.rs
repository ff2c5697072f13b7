//! Extraction of normalized image-caption datasets from scientific paper
//! archives: arXiv LaTeX source tarballs and PMC Open Access packages.
//!
//! The pipeline stages are archive ingestion ([`ingest`]), figure-caption
//! matching ([`tex`] for LaTeX sources, [`jats`] for PMC markup), caption
//! plaintext conversion ([`caption`]), image normalization
//! ([`imageproc`]), near-duplicate decontamination against evaluation
//! sets ([`decontam`]), and dataset persistence with CommonPool-style
//! shards ([`dataset`]). [`pipeline`] wires them into batch runs;
//! [`fetch`] acquires source archives.

pub mod caption;
pub mod dataset;
pub mod decontam;
pub mod fetch;
pub mod imageproc;
pub mod ingest;
pub mod jats;
pub mod pipeline;
pub mod tex;
