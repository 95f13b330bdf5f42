use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, Batch};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Denominator floor so that two near-zero gradients do not blow up.
    pub floor: f64,
    /// Negate the analytic gradient before comparing (fault injection).
    pub flip_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            n_samples: 256,
            seed: 0,
            floor: 1e-6,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Sampled parameters whose analytic or numeric gradient exceeds the floor.
    pub nonzero: usize,
    pub worst_index: usize,
}

/// Compare the analytic gradient of the mean masked NLL with central finite
/// differences on a random subset of parameters. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(params: &ModelParams<f64>, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let n = params.len();
    if opts.n_samples == 0 || opts.n_samples > n {
        return Err(Error::Config(format!("cannot sample {} of {n} parameters", opts.n_samples)));
    }
    let mut grad = vec![0.0; n];
    batch_loss(params, batch, Some(&mut grad), None)?;
    if opts.flip_sign {
        grad.iter_mut().for_each(|g| *g = -*g);
    }
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut idx = sample(&mut rng, n, opts.n_samples).into_vec();
    idx.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        nonzero: 0,
        worst_index: 0,
    };
    for i in idx {
        let orig = p.data[i];
        p.data[i] = orig + opts.epsilon;
        let up = batch_loss(&p, batch, None, None)?.loss;
        p.data[i] = orig - opts.epsilon;
        let down = batch_loss(&p, batch, None, None)?.loss;
        p.data[i] = orig;
        let numeric = (up - down) / (2.0 * opts.epsilon);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        if analytic.abs().max(numeric.abs()) > opts.floor {
            report.nonzero += 1;
        }
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
