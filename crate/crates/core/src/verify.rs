//! Finite-difference gradient checks of complete architectures on a fixed
//! tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMap, SitsSample};
use crate::error::Result;
use crate::model::{mm_forward, FusionMode, Model, ModelConfig, TsvitConfig};
use crate::params::Bound;
use crate::tensor::{grad_check, Fault, GradCheckReport, Objective, Tape, Tensor, Var};
use crate::train::cross_entropy_loss;

pub const GRAD_CHECK_TOL: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// `T=4, H=W=4, h=w=2, t=1, d=8, K=3, L_T=2, L_S=1, heads=2`; two
/// modalities except for SM.
pub fn tiny_config(mode: FusionMode) -> ModelConfig {
    let (modalities, channels) = match mode {
        FusionMode::Single => (vec!["a".to_string()], vec![2]),
        _ => (vec!["a".to_string(), "b".to_string()], vec![2, 3]),
    };
    ModelConfig {
        mode,
        tsvit: TsvitConfig {
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 4,
            temporal_depth: 2,
            spatial_depth: 1,
            num_classes: 3,
            height: 4,
            width: 4,
        },
        modalities,
        channels,
    }
}

struct ModelLoss<'a> {
    model: &'a Model<f64>,
    inputs: &'a [SitsSample<f64>],
    labels: &'a LabelMap,
}

impl Objective<f64> for ModelLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape<f64>, params: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let g = Bound::from_vars(tape, params.to_vec());
        let probs = mm_forward(&self.model.config, &self.model.arch, &g, self.inputs)?;
        cross_entropy_loss(probs, self.labels, &[])
    }
}

/// Random inputs and labels for a configuration.
pub fn random_inputs(config: &ModelConfig, seed: u64) -> Result<(Vec<SitsSample<f64>>, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &config.tsvit;
    let t = 4 * c.patch_t;
    let dates: Vec<u16> = (0..t as u16).map(|i| 10 + 37 * i).collect();
    let inputs = config
        .modalities
        .iter()
        .zip(&config.channels)
        .map(|(id, &ch)| {
            let x = Tensor::from_fn(&[t, c.height, c.width, ch], |_| rng.random_range(-1.0..1.0));
            SitsSample::new(id.clone(), x, dates.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..c.height * c.width)
        .map(|_| rng.random_range(0..c.num_classes as u16))
        .collect();
    Ok((inputs, LabelMap::new(c.height, c.width, labels)?))
}

/// Checks every parameter of `mode`'s tiny model against central
/// differences. `fault` corrupts the analytic pass to exercise the checker.
pub fn grad_check_architecture(mode: FusionMode, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(tiny_config(mode), seed)?;
    let (inputs, labels) = random_inputs(&model.config, seed.wrapping_add(1))?;
    let objective = ModelLoss {
        model: &model,
        inputs: &inputs,
        labels: &labels,
    };
    grad_check(&model.store.named_tensors(), GRAD_CHECK_STEP, GRAD_CHECK_TOL, fault, &objective)
}
