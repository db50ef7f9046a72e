//! Synthetic labelled tasks built from the scene generator.

use rand::Rng as _;

use super::train::{Target, TaskSample};
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::rng;

/// Scenes with their per-pixel class maps as targets.
pub fn segmentation_task(gen: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    gen.validate()?;
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::label("segmentation"), i as u64]);
            let map = gen.draw_class_map(&mut r);
            let stamps = gen.draw_timestamps(&mut r);
            let id = format!("seg-{i:05}");
            let image = gen.render(id.clone(), &map, &stamps, &mut r)?;
            Ok(TaskSample {
                id,
                image,
                other: None,
                target: Target::Dense(map.iter().map(|&k| k as i32).collect()),
            })
        })
        .collect()
}

/// Tiles labelled with one class each. A fraction `purity` of the cells carry
/// the label class; the rest are drawn from the class distribution.
/// Labels cycle through the classes so every class is represented.
pub fn classification_task(gen: &GeneratorConfig, n: usize, purity: f64, seed: u64) -> Result<Vec<TaskSample>> {
    gen.validate()?;
    if !(0.0..=1.0).contains(&purity) {
        return Err(Error::Config(format!("purity {purity} outside [0, 1]")));
    }
    let k = gen.num_classes();
    let (ch, cw) = (gen.height / gen.cell_size, gen.width / gen.cell_size);
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::label("classification"), i as u64]);
            let label = i % k;
            let background = gen.draw_class_map(&mut r);
            let mut map = background.clone();
            for cy in 0..ch {
                for cx in 0..cw {
                    if r.random::<f64>() < purity {
                        for y in cy * gen.cell_size..(cy + 1) * gen.cell_size {
                            for x in cx * gen.cell_size..(cx + 1) * gen.cell_size {
                                map[y * gen.width + x] = label;
                            }
                        }
                    }
                }
            }
            let stamps = gen.draw_timestamps(&mut r);
            let id = format!("cls-{i:05}");
            let mut image = gen.render(id.clone(), &map, &stamps, &mut r)?;
            image.label_mask = None;
            Ok(TaskSample {
                id,
                image,
                other: None,
                target: Target::Class(label),
            })
        })
        .collect()
}

/// Before/after pairs where one rectangle changes class; the target marks it.
/// Rectangle edges lie on multiples of `align` pixels.
pub fn change_task(gen: &GeneratorConfig, n: usize, align: usize, seed: u64) -> Result<Vec<TaskSample>> {
    gen.validate()?;
    let (h, w) = (gen.height, gen.width);
    if align == 0 || h % align != 0 || w % align != 0 || h / align < 4 || w / align < 4 {
        return Err(Error::Config(format!("alignment {align} does not fit a {h}x{w} tile")));
    }
    let k = gen.num_classes();
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::label("change"), i as u64]);
            let before = gen.draw_class_map(&mut r);
            let stamps = gen.draw_timestamps(&mut r);
            let (gh, gw) = (h / align, w / align);
            let rh = r.random_range(gh / 4..=gh / 2);
            let rw = r.random_range(gw / 4..=gw / 2);
            let y0 = r.random_range(0..=gh - rh) * align;
            let x0 = r.random_range(0..=gw - rw) * align;
            let shift = r.random_range(1..k);
            let mut after = before.clone();
            let mut target = vec![0i32; h * w];
            for y in y0..y0 + rh * align {
                for x in x0..x0 + rw * align {
                    let j = y * w + x;
                    after[j] = (before[j] + shift) % k;
                    target[j] = 1;
                }
            }
            let id = format!("chg-{i:05}");
            let mut a = gen.render(format!("{id}-a"), &before, &stamps, &mut r)?;
            let mut b = gen.render(format!("{id}-b"), &after, &stamps, &mut r)?;
            a.label_mask = None;
            b.label_mask = None;
            Ok(TaskSample {
                id,
                image: a,
                other: Some(b),
                target: Target::Dense(target),
            })
        })
        .collect()
}
