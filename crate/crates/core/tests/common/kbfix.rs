//! Knowledge base fixtures: an eight-tool base image and random images drawn
//! from a small pool of shared layers.

use layerminer::testkit::TarBuilder;
use rand::rngs::StdRng;
use rand::Rng;

/// Eight regular files and a symlink.
pub fn base_layer() -> Vec<u8> {
    let mut b = TarBuilder::new().dir("etc").dir("bin");
    for i in 0..8 {
        b = b.file(&format!("bin/tool{i}"), format!("tool {i}").as_bytes());
    }
    b.symlink("bin/sh", "tool0").finish()
}

/// One to three layers, each either from `pool` or freshly made from a
/// small name and content space.
pub fn random_image(rng: &mut StdRng, pool: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                pool[rng.gen_range(0..pool.len())].clone()
            } else {
                let mut b = TarBuilder::new();
                for _ in 0..rng.gen_range(1..6) {
                    let name = format!("d{}/f{}", rng.gen_range(0..3), rng.gen_range(0..6));
                    let body = format!("c{}", rng.gen_range(0..12));
                    b = b.file(&name, body.as_bytes());
                }
                b.finish()
            }
        })
        .collect()
}
