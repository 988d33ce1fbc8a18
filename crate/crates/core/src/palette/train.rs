use super::{align_loss, balance_loss, max_color_loss, reference_indices, LossWeights, PaletteConfig, PaletteNetParams, ProbabilityMap};
use crate::error::Result;
use crate::nn::{Graph, Optimizer, Real, Tensor};

/// One optimization step of [`fit_palette`].
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteStep {
    pub step: usize,
    pub l_m: f64,
    pub l_b: f64,
    pub l_a: f64,
    pub total: f64,
    /// Mean over images of the per-image active bucket count.
    pub active_buckets: f64,
}

/// Trains the palette network on fixed images with the auxiliary losses only.
/// The log has `steps + 1` rows: one per step plus the final state.
pub fn fit_palette<T: Real>(
    params: &mut PaletteNetParams<T>,
    images: &Tensor<T>,
    cfg: &PaletteConfig,
    weights: LossWeights,
    steps: usize,
) -> Result<Vec<PaletteStep>> {
    weights.validate()?;
    let reference = if weights.gamma > 0.0 {
        Some(reference_indices(images, params.k)?)
    } else {
        None
    };
    let mut opt = Optimizer::new(cfg.optimizer, &params.tensors(), cfg.lr, cfg.momentum);
    let mut log = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let m = vars.prob_map(&mut g, x)?;
        let l_m = max_color_loss(&mut g, m)?;
        let l_b = balance_loss(&mut g, m, cfg.balance_softmax)?;
        let l_a = match &reference {
            Some(r) => Some(align_loss(&mut g, m, r)?),
            None => None,
        };
        let mut total = g.scale(l_m, weights.alpha);
        let lb = g.scale(l_b, weights.beta);
        total = g.add(total, lb)?;
        if let Some(la) = l_a {
            let la = g.scale(la, weights.gamma);
            total = g.add(total, la)?;
        }
        let s = images.shape();
        let map = ProbabilityMap::new(g.value(m).clone(), s[2], s[3])?;
        let active = map.active_buckets();
        log.push(PaletteStep {
            step,
            l_m: g.value(l_m).item().f64(),
            l_b: g.value(l_b).item().f64(),
            l_a: l_a.map_or(0.0, |v| g.value(v).item().f64()),
            total: g.value(total).item().f64(),
            active_buckets: active.iter().sum::<f64>() / active.len().max(1) as f64,
        });
        if step == steps {
            break;
        }
        let mut grads = g.backward(total)?;
        let gs: Vec<Tensor<T>> = vars
            .all()
            .into_iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.take_or_zeros(v, t.shape()))
            .collect();
        opt.step_each(params.tensors_mut(), &gs)?;
    }
    Ok(log)
}
