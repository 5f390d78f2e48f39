#![allow(dead_code)]

pub mod configs;
pub mod corpus;
pub mod dockerfiles;
pub mod kbfix;
pub mod oracle;
pub mod server;
pub mod sharing;

use layerminer::layerfs::{compose, scan_layer, ImageFs};
use layerminer::Digest;

/// Scans and composes a stack of layer tarballs, base first.
pub fn image_fs(layers: &[Vec<u8>]) -> ImageFs {
    let diffs: Vec<_> = layers
        .iter()
        .map(|l| scan_layer(std::io::Cursor::new(l.clone()), &Digest::of(l)).unwrap())
        .collect();
    compose(&diffs).unwrap()
}

use std::collections::BTreeMap;
use std::io::Read;

use layerminer::confmine::{locate_configs, parse_config, ParamObservation, SoftwareProfile};
use layerminer::layerfs::{extract_files, LayerSource};
use layerminer::ImageRef;

/// Layer blobs held in memory, keyed by digest.
pub struct MemLayers(pub BTreeMap<Digest, Vec<u8>>);

impl MemLayers {
    pub fn new(layers: &[Vec<u8>]) -> Self {
        MemLayers(layers.iter().map(|l| (Digest::of(l), l.clone())).collect())
    }
}

impl LayerSource for MemLayers {
    fn open_layer(&self, digest: &Digest) -> Option<Box<dyn Read + Send>> {
        let bytes = self.0.get(digest)?.clone();
        Some(Box::new(std::io::Cursor::new(bytes)))
    }
}

/// Locates, extracts and parses every configuration file of one image.
pub fn mine_image(image: &ImageRef, layers: &[Vec<u8>], profile: &SoftwareProfile) -> Vec<ParamObservation> {
    let fs = image_fs(layers);
    let configs = locate_configs(&fs, profile);
    let wanted: Vec<&str> = configs.iter().map(|c| c.path.as_str()).collect();
    let files = extract_files(&fs, &|p| wanted.contains(&p), &MemLayers::new(layers)).unwrap();
    let mut out = Vec::new();
    for (cfg, f) in configs.iter().zip(files) {
        assert_eq!(cfg.path, f.record.path);
        out.extend(parse_config(cfg, &f.content.unwrap(), image).observations);
    }
    out
}
