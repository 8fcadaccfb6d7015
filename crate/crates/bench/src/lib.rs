//! Shared setup for the benchmarks in `benches/`.

use in2n_core::field::{FieldConfig, RadianceFieldParams};
use in2n_core::fixtures::SyntheticScene;
use in2n_core::scene_io::SceneDataset;

/// The desk-scale field used by the command-line defaults.
pub fn desk_field() -> RadianceFieldParams {
    RadianceFieldParams::init(FieldConfig {
        pe_position_freqs: 6,
        pe_direction_freqs: 2,
        hidden_layers: 2,
        hidden_width: 64,
        init_seed: 0,
    })
    .expect("valid field config")
}

/// The 20-view, 64x64 sphere fixture.
pub fn desk_scene() -> (SyntheticScene, SceneDataset) {
    let scene = SyntheticScene::sphere_scene(0);
    let dataset = scene.dataset().expect("fixture renders");
    (scene, dataset)
}
