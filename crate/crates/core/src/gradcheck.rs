//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bound, DType, ParamStore, Tensor};
use crate::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { max_rel_err: 0.0, checked: 0, worst: (0.0, 0.0) }
    }

    /// Records the better of two step sizes. A probe whose `h` window
    /// straddles a ReLU or max-pool kink disagrees wildly at `h` but not at
    /// `h / 10`, while a wrong analytic gradient disagrees at both.
    fn record(&mut self, analytic: f64, coarse: f64, fine: f64) {
        let (e, numeric) = [coarse, fine]
            .into_iter()
            .map(|n| (rel_err(analytic, n), n))
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        if e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = (analytic, numeric);
        }
        self.checked += 1;
    }
}

/// Denominator floor so that vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn pick(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks d loss / d input for free-standing f64 inputs. At most
/// `max_coords` coordinates per input are probed (chosen with `seed`).
pub fn check_inputs(
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    max_coords: usize,
    seed: u64,
    loss: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradCheck> {
    let build = |vals: &[Vec<f64>], grad: bool| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| {
                let t = Tensor::new(shape, v.clone(), DType::F64)?;
                Ok(if grad { t.requires_grad_() } else { t })
            })
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let leaves = build(&base, true)?;
    let grads = loss(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| grads.get_or_zeros(t)).collect();
    drop(leaves);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::new();
    for (which, (_, values)) in inputs.iter().enumerate() {
        for i in pick(values.len(), max_coords, &mut rng) {
            let central = |step: f64| -> Result<f64> {
                let mut vals = base.clone();
                vals[which][i] = values[i] + step;
                let plus = loss(&build(&vals, false)?)?.item()?;
                vals[which][i] = values[i] - step;
                let minus = loss(&build(&vals, false)?)?.item()?;
                Ok((plus - minus) / (2.0 * step))
            };
            let (coarse, fine) = (central(h)?, central(h / 10.0)?);
            report.record(analytic[which][i], coarse, fine);
        }
    }
    Ok(report)
}

/// Checks d loss / d parameter for a model held in an f64 [`ParamStore`].
pub fn check_params(
    store: &ParamStore,
    h: f64,
    max_coords: usize,
    seed: u64,
    loss: impl Fn(&Bound) -> Result<Tensor>,
) -> Result<GradCheck> {
    let bound = store.bind(true);
    let grads = loss(&bound)?.backward()?;
    let analytic = bound.grads(&grads);
    drop(bound);

    // flat coordinate space across all parameters
    let sizes: Vec<usize> = store.iter().map(|p| p.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::new();
    let ids: Vec<_> = store.ids().collect();
    for flat in pick(total, max_coords, &mut rng) {
        let (mut which, mut off) = (0, flat);
        while off >= sizes[which] {
            off -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let original = store.get(id).data[off];
        let eval_at = |v: f64| -> Result<f64> {
            let mut s = store.clone();
            s.update(id, |i, x| if i == off { v } else { x });
            loss(&s.bind(false))?.item().map_err(Into::into)
        };
        let central = |step: f64| -> Result<f64> {
            Ok((eval_at(original + step)? - eval_at(original - step)?) / (2.0 * step))
        };
        report.record(analytic[which][off], central(h)?, central(h / 10.0)?);
    }
    Ok(report)
}
