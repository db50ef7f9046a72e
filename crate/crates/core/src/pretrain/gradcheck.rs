use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{forward_loss, prepare_batch, PreparedBatch, TrainConfig};
use crate::data::synth::{generate_named, GeneratorConfig};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::rng;

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose gradient magnitude exceeds [`REL_FLOOR`].
    pub significant: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub worst: Option<GradSample>,
}

impl GradCheckReport {
    /// `Err(GradientCheck)` unless the check passed.
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let worst = self
            .worst
            .as_ref()
            .map(|w| format!("{}[{}] analytic {:e} numeric {:e}", w.param, w.index, w.analytic, w.numeric))
            .unwrap_or_default();
        Err(Error::GradientCheck {
            max_rel: self.max_rel_error,
            worst,
        })
    }
}

/// Denominator floor. Below it the central difference of an O(1) loss is
/// dominated by rounding (about 1e-14 / 2h), so such coordinates are compared
/// on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x` for each coordinate in `indices`,
/// compared against `analytic` (indexed like `x`).
pub fn finite_difference_check(
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<(usize, f64, f64, f64)> {
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            (i, analytic[i], numeric, relative_error(analytic[i], numeric))
        })
        .collect()
}

/// Two samples of standard-normal pixels (inputs in general position), the
/// second with its last band marked invalid.
fn check_batch(model_cfg: &ModelConfig, seed: u64) -> Result<PreparedBatch<f64>> {
    let gen = GeneratorConfig {
        height: model_cfg.image_size.0,
        width: model_cfg.image_size.1,
        channels: model_cfg.channels,
        frames: model_cfg.frames,
        ..GeneratorConfig::default()
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut r = rng::stream(seed, &[rng::label("gradcheck-input")]);
    let samples: Vec<SceneSample<f64>> = (0..2)
        .map(|i| {
            let mut s = generate_named(format!("gradcheck-{i}"), rng::derive(seed, &[i]), &gen)?.cast::<f64>();
            s.values.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut r));
            if i == 1 && model_cfg.channels > 1 {
                s.band_valid[model_cfg.channels - 1] = false;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&SceneSample<f64>> = samples.iter().collect();
    let grid = model_cfg.patch_grid()?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let plans = (0..refs.len()).map(|i| cfg.mask_plan(&grid, 0, i)).collect::<Result<Vec<_>>>()?;
    let filters: Vec<_> = (0..refs.len()).map(|i| cfg.frequency_spec(0, i)).collect();
    prepare_batch(&grid, &refs, &plans, &filters, false)
}

/// Compares analytic parameter gradients of the total pretraining loss with
/// central differences (step `h`) in `f64`, on `samples` random coordinates.
pub fn gradient_check(
    model_cfg: &ModelConfig,
    seed: u64,
    samples: usize,
    h: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    let mut model = HybridModel::<f64>::new(model_cfg.clone(), seed)?;
    let batch = check_batch(model_cfg, seed)?;
    let pass = forward_loss(&model, &batch, true)?;
    let grads = pass.graph.backward(pass.loss).for_params(&pass.params, &model.params);
    drop(pass);

    let mut r = rng::stream(seed, &[rng::label("gradcheck")]);
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut worst: Option<GradSample> = None;
    let mut max_rel: f64 = 0.0;
    let mut significant = 0;
    for _ in 0..samples {
        // Tensor first, then element, so small tensors are not starved.
        let t = r.random_range(0..grads.len());
        let i = r.random_range(0..grads[t].len());
        let analytic = grads[t].data()[i];
        let id = crate::autodiff::ParamId(t);
        let orig = model.params.get(id).data()[i];
        let eval = |v: f64, model: &mut HybridModel<f64>| -> Result<f64> {
            model.params.get_mut(id).data_mut()[i] = v;
            Ok(forward_loss(model, &batch, false)?.report.total)
        };
        let plus = eval(orig + h, &mut model)?;
        let minus = eval(orig - h, &mut model)?;
        model.params.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(analytic, numeric);
        if analytic.abs().max(numeric.abs()) > REL_FLOOR {
            significant += 1;
        }
        if worst.is_none() || rel > max_rel {
            max_rel = max_rel.max(rel);
            worst = Some(GradSample {
                param: names[t].clone(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: samples,
        significant,
        max_rel_error: max_rel,
        threshold,
        passed: samples > 0 && max_rel < threshold,
        worst,
    })
}
