//! Manifest-only fixtures whose layer sharing is known in closed form.

use layerminer::registry::{LayerDescriptor, Manifest, MEDIA_DOCKER_LAYER, MEDIA_DOCKER_MANIFEST};
use layerminer::{Digest, ImageRef};

/// Per repository: images, layers shared by all its images, layers unique to each image.
pub const SHAPES: [(usize, usize, usize); 10] = [
    (4, 3, 1),
    (2, 2, 1),
    (5, 2, 1),
    (1, 2, 1),
    (3, 1, 1),
    (3, 3, 1),
    (2, 1, 2),
    (4, 1, 1),
    (2, 3, 1),
    (3, 4, 1),
];

/// Distinct over total layers for each shape: (s + k u) / (k (s + u)).
pub fn expected_fraction((k, s, u): (usize, usize, usize)) -> f64 {
    (s + k * u) as f64 / (k * (s + u)) as f64
}

fn layer(name: &str, size: u64) -> LayerDescriptor {
    LayerDescriptor {
        digest: Digest::of(name.as_bytes()),
        size_bytes: size,
        media_type: MEDIA_DOCKER_LAYER.into(),
    }
}

pub fn manifest(name: &str, layers: Vec<LayerDescriptor>) -> Manifest {
    Manifest {
        digest: Digest::of(format!("manifest {name}").as_bytes()),
        schema_version: 2,
        media_type: MEDIA_DOCKER_MANIFEST.into(),
        config_digest: Digest::of(format!("config {name}").as_bytes()),
        layers,
    }
}

/// Ten repositories shaped by [`SHAPES`].
pub fn sharing_corpus() -> Vec<(ImageRef, Manifest)> {
    let mut out = Vec::new();
    for (r, &(k, s, u)) in SHAPES.iter().enumerate() {
        let repo = format!("shared/repo{r}");
        for i in 0..k {
            let mut layers: Vec<_> = (0..s)
                .map(|j| layer(&format!("{repo} shared {j}"), 100 + j as u64))
                .collect();
            layers.extend((0..u).map(|j| layer(&format!("{repo} image {i} own {j}"), 10 + j as u64)));
            let image = ImageRef::new(&repo, &format!("v{i}")).unwrap();
            out.push((image, manifest(&format!("{repo}:{i}"), layers)));
        }
    }
    out
}

/// Ten images over three common base layers, each with one layer of its own.
/// Returns the images and the base size.
pub fn common_base_images() -> (Vec<(ImageRef, Manifest)>, u64) {
    let base = [layer("base 0", 30_000), layer("base 1", 7_000), layer("base 2", 512)];
    let base_size = base.iter().map(|l| l.size_bytes).sum();
    let images = (0..10)
        .map(|i| {
            let mut layers = base.to_vec();
            layers.push(layer(&format!("app {i}"), 1_000 + i));
            (
                ImageRef::new(&format!("app/a{i}"), "1").unwrap(),
                manifest(&format!("app {i}"), layers),
            )
        })
        .collect();
    (images, base_size)
}
