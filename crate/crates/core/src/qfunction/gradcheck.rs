//! Central finite-difference check of the analytic gradient, in f64.

use rand::Rng;

use super::{NetArch, NetError, QParams, Sample};
use crate::rng::{derive_indexed, stream};

const STEP: f64 = 1e-4;
/// Relative errors are measured against max(|analytic|, |numeric|, FLOOR).
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub draws: usize,
    pub coordinates: usize,
    /// Coordinates skipped because a ReLU switched inside ±step, where the
    /// loss is not differentiable.
    pub kinks: usize,
    pub max_rel_error: f64,
}

/// Compares backpropagation against central differences on `draws` random
/// (parameters, batch) pairs.
pub fn gradient_check(arch: &NetArch, seed: u64, draws: usize) -> Result<GradCheckReport, NetError> {
    let mut report = GradCheckReport { draws, coordinates: 0, kinks: 0, max_rel_error: 0.0 };
    for d in 0..draws {
        let mut rng = stream(derive_indexed(seed, "gradcheck", d as u64));
        let mut params = QParams::<f64>::init(arch, rng.gen())?;
        let plan = params.plan().clone();
        for (_, _, b_off, b_len) in plan.layers() {
            for b in &mut params.data_mut()[b_off..b_off + b_len] {
                *b = rng.gen_range(-0.1..0.1);
            }
        }
        let inputs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..arch.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<Sample<f64>> = inputs
            .iter()
            .map(|x| Sample { input: x, action: rng.gen_range(0..arch.num_actions), target: rng.gen_range(-2.0..2.0) })
            .collect();

        let mut grads = vec![0.0; params.len()];
        let mut ws = params.workspace();
        params.loss_and_grad(&batch, &mut grads, &mut ws)?;
        let base_patterns: Vec<Vec<bool>> =
            inputs.iter().map(|x| params.activation_pattern(x)).collect::<Result<_, _>>()?;

        for i in 0..params.len() {
            let orig = params.data()[i];
            let mut eval = |value: f64| -> Result<(f64, bool), NetError> {
                params.data_mut()[i] = value;
                let loss = params.loss(&batch)?;
                let mut same = true;
                for (x, base) in inputs.iter().zip(&base_patterns) {
                    same &= params.activation_pattern(x)? == *base;
                }
                Ok((loss, same))
            };
            let (plus, same_plus) = eval(orig + STEP)?;
            let (minus, same_minus) = eval(orig - STEP)?;
            params.data_mut()[i] = orig;
            if !(same_plus && same_minus) {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            report.coordinates += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}
