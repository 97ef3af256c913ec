//! The three training losses: cross-entropy classification, the batch area
//! constraint, and the Gaussian-smoothed normalization penalty. The total is
//! their unweighted sum.

use crate::scalar::Scalar;
use crate::tensor::{Graph, Result, TensorId};

/// Standard deviation of the 3x3 smoothing kernel used by the
/// normalization loss.
pub const GAUSSIAN_SIGMA: f64 = 6.0;

/// Area prior presets: fine-grained datasets with one large centered object
/// vs. general datasets with smaller, varied objects.
pub const LAMBDA_FINE_GRAINED: f64 = 0.25;
pub const LAMBDA_GENERAL: f64 = 0.35;
/// Default for the synthetic shapes benchmark, matching its mean mask area.
pub const LAMBDA_SYNTH: f64 = 0.15;

/// Which spatial losses participate in the total; classification always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub area: bool,
    pub norm: bool,
    pub gaussian_filter: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            area: true,
            norm: true,
            gaussian_filter: true,
        }
    }
}

/// Scalar values of one loss evaluation. Disabled components report zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_ba: f64,
    pub l_norm: f64,
    pub total: f64,
}

impl LossReport {
    pub fn add(&mut self, other: &LossReport, weight: f64) {
        self.l_cls += other.l_cls * weight;
        self.l_ba += other.l_ba * weight;
        self.l_norm += other.l_norm * weight;
        self.total += other.total * weight;
    }
}

/// Graph handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossIds {
    pub l_cls: TensorId,
    pub l_ba: Option<TensorId>,
    pub l_norm: Option<TensorId>,
    pub total: TensorId,
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    g.cross_entropy(logits, labels)
}

/// `| lambda - mean(maps) |`: deviation of the batch-mean map activation
/// from the area prior. Subgradient zero exactly at the kink.
pub fn batch_area_loss<S: Scalar>(g: &mut Graph<S>, maps: TensorId, lambda: f64) -> TensorId {
    let mean = g.mean_all(maps);
    let neg = g.scale(mean, -1.0);
    let diff = g.add_scalar(neg, lambda);
    g.abs(diff)
}

/// Mean of `p (1 - p)` over the smoothed maps; pushes values toward 0 or 1
/// while the 3x3 filter couples neighboring patches.
pub fn normalization_loss<S: Scalar>(g: &mut Graph<S>, maps: TensorId) -> Result<TensorId> {
    normalization_loss_with(g, maps, true)
}

pub fn normalization_loss_with<S: Scalar>(g: &mut Graph<S>, maps: TensorId, gaussian_filter: bool) -> Result<TensorId> {
    let mstar = if gaussian_filter {
        g.gaussian_filter_2d(maps, GAUSSIAN_SIGMA)?
    } else {
        maps
    };
    let neg = g.scale(mstar, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let p1p = g.mul(mstar, one_minus)?;
    Ok(g.mean_all(p1p))
}

/// All enabled components and their unweighted sum.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    labels: &[usize],
    maps: TensorId,
    lambda: f64,
    toggles: LossToggles,
) -> Result<LossIds> {
    let l_cls = cross_entropy(g, logits, labels)?;
    let mut total = l_cls;
    let l_ba = if toggles.area {
        let l = batch_area_loss(g, maps, lambda);
        total = g.add(total, l)?;
        Some(l)
    } else {
        None
    };
    let l_norm = if toggles.norm {
        let l = normalization_loss_with(g, maps, toggles.gaussian_filter)?;
        total = g.add(total, l)?;
        Some(l)
    } else {
        None
    };
    Ok(LossIds {
        l_cls,
        l_ba,
        l_norm,
        total,
    })
}

/// Reads the component values out of the graph.
pub fn read_report<S: Scalar>(g: &Graph<S>, ids: &LossIds) -> LossReport {
    LossReport {
        l_cls: g.scalar_value(ids.l_cls),
        l_ba: ids.l_ba.map(|i| g.scalar_value(i)).unwrap_or(0.0),
        l_norm: ids.l_norm.map(|i| g.scalar_value(i)).unwrap_or(0.0),
        total: g.scalar_value(ids.total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_taps, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f32>::inference();
        let logits = g.constant(Tensor::zeros(vec![2, 4]));
        let l = cross_entropy(&mut g, logits, &[0, 3]).unwrap();
        assert!((g.scalar_value(l) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_double_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = 5;
        let c = 7;
        let data: Vec<f32> = (0..b * c).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut oracle = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = data[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[label].exp() / sum).ln();
        }
        oracle /= b as f64;
        let mut g = Graph::<f32>::inference();
        let logits = g.constant(Tensor::new(vec![b, c], data).unwrap());
        let l = cross_entropy(&mut g, logits, &labels).unwrap();
        assert!((g.scalar_value(l) - oracle).abs() < 1e-6);
    }

    #[test]
    fn batch_area_loss_satisfied_and_saturated() {
        let mut g = Graph::<f32>::inference();
        let at_prior = g.constant(Tensor::full(vec![2, 3, 3], 0.25f32));
        let l = batch_area_loss(&mut g, at_prior, 0.25);
        assert_eq!(g.scalar_value(l), 0.0);

        let ones = g.constant(Tensor::full(vec![2, 3, 3], 1.0f32));
        let l = batch_area_loss(&mut g, ones, 0.25);
        assert_eq!(g.scalar_value(l), 0.75);
    }

    #[test]
    fn batch_area_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut vals: Vec<f32> = (0..2 * 4 * 4).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let mut g = Graph::<f32>::inference();
        let a = g.constant(Tensor::new(vec![2, 4, 4], vals.clone()).unwrap());
        let la = batch_area_loss(&mut g, a, 0.3);
        // Shuffle across batch and pixels.
        for i in (1..vals.len()).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let b = g.constant(Tensor::new(vec![2, 4, 4], vals).unwrap());
        let lb = batch_area_loss(&mut g, b, 0.3);
        assert!((g.scalar_value(la) - g.scalar_value(lb)).abs() < 1e-9);
    }

    #[test]
    fn batch_area_loss_tracks_lambda_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        let mut g = Graph::<f32>::inference();
        let m = g.constant(Tensor::new(vec![1, 4, 4], vals).unwrap());
        for lambda in [0.0, 0.2, 0.5, 0.9] {
            let l = batch_area_loss(&mut g, m, lambda);
            assert!((g.scalar_value(l) - (lambda - mean).abs()) < 1e-6);
        }
    }

    #[test]
    fn normalization_loss_extremes() {
        let mut g = Graph::<f32>::inference();
        let ones = g.constant(Tensor::full(vec![1, 4, 4], 1.0f32));
        let l = normalization_loss(&mut g, ones).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let half = g.constant(Tensor::full(vec![1, 4, 4], 0.5f32));
        let l = normalization_loss(&mut g, half).unwrap();
        assert_eq!(g.scalar_value(l), 0.25);
    }

    #[test]
    fn normalization_loss_checkerboard_matches_tap_oracle() {
        let (h, w) = (4usize, 4usize);
        let vals: Vec<f32> = (0..h * w).map(|i| (((i / w) + (i % w)) % 2) as f32).collect();
        // Oracle: 9-tap normalized convolution in f64, then mean of p(1-p).
        let taps = gaussian_taps(GAUSSIAN_SIGMA);
        let mut expected = 0.0f64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let t = taps[((dy + 1) * 3 + (dx + 1)) as usize];
                        acc += t * vals[yy as usize * w + xx as usize] as f64;
                        wsum += t;
                    }
                }
                let p = acc / wsum;
                expected += p * (1.0 - p);
            }
        }
        expected /= (h * w) as f64;
        assert!(expected > 0.0);

        let mut g = Graph::<f32>::inference();
        let m = g.constant(Tensor::new(vec![1, h, w], vals).unwrap());
        let l = normalization_loss(&mut g, m).unwrap();
        assert!((g.scalar_value(l) - expected).abs() < 1e-6);
        assert!(g.scalar_value(l) > 0.0);
    }

    #[test]
    fn normalization_loss_bounded_and_monotone_on_constants() {
        let mut g = Graph::<f32>::inference();
        let mut prev = f64::INFINITY;
        // Moving a constant map from 0.5 toward 1 strictly lowers the loss.
        for p in [0.5f32, 0.6, 0.75, 0.9, 0.99] {
            let m = g.constant(Tensor::full(vec![1, 5, 5], p));
            let l = normalization_loss(&mut g, m).unwrap();
            let v = g.scalar_value(l);
            assert!((0.0..=0.25).contains(&v));
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let maps = Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
        let mut g = Graph::<f32>::inference();
        let (li, mi) = (g.constant(logits), g.constant(maps));
        let ids = total_loss(&mut g, li, &[0, 1, 2], mi, 0.25, LossToggles::default()).unwrap();
        let r = read_report(&g, &ids);
        assert!((r.total - (r.l_cls + r.l_ba + r.l_norm)).abs() < 1e-6);
        assert!(r.l_ba > 0.0 && r.l_norm > 0.0 && r.l_cls > 0.0);
    }

    #[test]
    fn total_zero_when_every_component_is_zero() {
        // Saturated correct logit, maps all ones, prior 1.0.
        let mut g = Graph::<f32>::inference();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let maps = g.constant(Tensor::full(vec![1, 4, 4], 1.0f32));
        let ids = total_loss(&mut g, logits, &[0], maps, 1.0, LossToggles::default()).unwrap();
        let r = read_report(&g, &ids);
        assert!(r.total.abs() < 1e-6);
    }

    #[test]
    fn toggles_disable_components() {
        let mut g = Graph::<f32>::inference();
        let logits = g.constant(Tensor::zeros(vec![1, 2]));
        let maps = g.constant(Tensor::full(vec![1, 2, 2], 0.5f32));
        let off = LossToggles {
            area: false,
            norm: false,
            gaussian_filter: true,
        };
        let ids = total_loss(&mut g, logits, &[0], maps, 0.25, off).unwrap();
        let r = read_report(&g, &ids);
        assert_eq!(r.l_ba, 0.0);
        assert_eq!(r.l_norm, 0.0);
        assert!((r.total - r.l_cls).abs() < 1e-9);
    }
}
