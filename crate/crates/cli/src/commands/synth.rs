use std::path::Path;

use log::info;
use stfm::data::io::write_dataset;
use stfm::data::synth::generate_named;
use stfm::data::tiling::REDUCED_BANDS;
use stfm::data::{pad_spectral_channels, split_dataset, tile_scene, GeneratorConfig};
use stfm::rng;
use stfm::{Error, Result};

use crate::config::Config;

/// Scenes of the generator size, a share of them seen by a four-band sensor
/// and padded, tiled, and split by scene so tiles never straddle splits.
pub fn synth_data(cfg: &Config, out: &Path) -> Result<()> {
    let d = &cfg.data;
    if d.scenes == 0 {
        return Err(Error::Config("data.scenes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&d.four_band_fraction) {
        return Err(Error::Config(format!("data.four_band_fraction {} outside [0, 1]", d.four_band_fraction)));
    }
    let four_band = (d.four_band_fraction * d.scenes as f64).round() as usize;
    let seed = rng::derive(cfg.seed, &[rng::label("synth-data")]);
    let mut scene_ids = Vec::with_capacity(d.scenes);
    let mut tiles = Vec::new();
    for i in 0..d.scenes {
        let id = format!("scene-{i:04}");
        let gen = if i < four_band {
            GeneratorConfig {
                channels: REDUCED_BANDS,
                ..d.generator.clone()
            }
        } else {
            d.generator.clone()
        };
        let mut scene = generate_named(id.clone(), rng::derive(seed, &[i as u64]), &gen)?;
        if gen.channels == REDUCED_BANDS {
            scene = pad_spectral_channels(scene)?;
        }
        tiles.extend(tile_scene(&scene, d.tile_size, d.tile_size)?);
        scene_ids.push(id);
    }
    let split = split_dataset(&scene_ids, d.ratios, rng::derive(seed, &[rng::label("split")]))?;
    let tile_ids: Vec<String> = tiles.iter().map(|t| t.sample_id.clone()).collect();
    let split = split.expand_to_tiles(&tile_ids);
    write_dataset(out, &tiles, &split)?;
    info!(
        "wrote {} tiles from {} scenes ({four_band} four-band): {} train, {} val, {} test",
        tiles.len(),
        d.scenes,
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len()
    );
    Ok(())
}
