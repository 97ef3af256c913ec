//! Central finite-difference verification of the backward pass.
//!
//! [`finite_diff_check`] compares the tape gradient of a scalar-valued
//! function against `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate,
//! with differences taken in `f64`. [`run_suite`] covers every
//! differentiable op, the three losses, both block kinds, and an
//! end-to-end tiny model, instantiated at `f64` so the oracle itself is
//! trustworthy.

use crate::losses::{self, LossToggles};
use crate::model::{self, Bound, SatConfig, SatModel, SqaMode};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance for gradients of ordinary magnitude.
pub const REL_TOL: f64 = 1e-3;
/// Absolute tolerance where both gradients sit below [`ABS_FLOOR`].
pub const ABS_TOL: f64 = 1e-5;
/// Magnitude below which the relative error is meaningless.
pub const ABS_FLOOR: f64 = 1e-6;
/// Central-difference step for single-op checks.
pub const FD_STEP: f64 = 1e-3;
/// Smaller step for deep compositions, where the O(h^2) truncation term of
/// the central difference would otherwise dominate small gradient entries.
pub const FD_STEP_DEEP: f64 = 1e-4;

/// Worst-case disagreement between tape and finite-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdError {
    /// Max relative error over coordinates with magnitude >= [`ABS_FLOOR`].
    pub max_relative: f64,
    /// Max absolute error over coordinates below the floor.
    pub max_absolute_small: f64,
}

impl FdError {
    pub fn merge(&mut self, other: FdError) {
        self.max_relative = self.max_relative.max(other.max_relative);
        self.max_absolute_small = self.max_absolute_small.max(other.max_absolute_small);
    }

    /// The headline number: relative error, with the absolute fallback
    /// folded in for near-zero gradients.
    pub fn value(&self) -> f64 {
        self.max_relative.max(self.max_absolute_small)
    }

    pub fn passes(&self) -> bool {
        self.max_relative < REL_TOL && self.max_absolute_small < ABS_TOL
    }
}

/// Checks the tape gradient of `f` at `x` against central differences with
/// step `h`. `f` must deterministically build a scalar from its input id.
pub fn finite_diff_check<S: Scalar>(
    f: &dyn Fn(&mut Graph<S>, TensorId) -> TensorId,
    x: &Tensor<S>,
    h: f64,
) -> FdError {
    let mut g = Graph::recording();
    let mut x0 = x.clone();
    x0.requires_grad = true;
    let xid = g.value(x0);
    let loss = f(&mut g, xid);
    g.backward(loss).expect("gradcheck loss must be a differentiable scalar");
    let analytic: Vec<f64> = g.grad(xid).expect("grad populated").iter().map(|v| v.as_f64()).collect();

    let mut err = FdError::default();
    for i in 0..x.data.len() {
        let eval = |delta: f64| -> f64 {
            let mut gp = Graph::<S>::inference();
            let mut xt = x.clone();
            xt.requires_grad = false;
            xt.data[i] = S::cast(xt.data[i].as_f64() + delta);
            let id = gp.value(xt);
            let out = f(&mut gp, id);
            gp.scalar_value(out)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[i];
        let mag = fd.abs().max(a.abs());
        if mag < ABS_FLOOR {
            err.max_absolute_small = err.max_absolute_small.max((a - fd).abs());
        } else {
            err.max_relative = err.max_relative.max((a - fd).abs() / mag);
        }
    }
    err
}

/// One verified item of the suite.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub error: FdError,
    pub passed: bool,
}

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let salt: u64 = name.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ salt)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs every row of the gradient suite with `seeds` random draws each.
/// The engine is instantiated at `f64` here; `f32` is cross-checked against
/// it separately.
pub fn run_suite(seeds: u64) -> Vec<CheckRow> {
    let mut rows: Vec<CheckRow> = Vec::new();
    let mut push = |name: &'static str, err: FdError| {
        rows.push(CheckRow {
            name,
            error: err,
            passed: err.passes(),
        });
    };

    // Elementwise and structural ops. Each row weights the op output by a
    // random constant so the gradient actually depends on the input.
    let weighted = |name: &'static str,
                    in_shape: &'static [usize],
                    lo: f64,
                    hi: f64,
                    op: fn(&mut Graph<f64>, TensorId, &Tensor<f64>) -> TensorId,
                    seeds: u64|
     -> FdError {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for(name, seed);
            let x = rand_tensor(&mut rng, in_shape, lo, hi);
            let aux = rand_tensor(&mut rng, &[4096], -1.0, 1.0); // sliced by closures as needed
            let f = move |g: &mut Graph<f64>, xid: TensorId| -> TensorId {
                let y = op(g, xid, &aux);
                let w_shape = g.shape(y).to_vec();
                let n: usize = w_shape.iter().product();
                let w = g.constant(Tensor::new(w_shape, aux.data[..n].to_vec()).unwrap());
                let wy = g.mul(y, w).unwrap();
                g.sum_all(wy)
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    };

    push("add", weighted("add", &[2, 3], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![2, 3], aux.data[100..106].to_vec()).unwrap());
        let s = g.add(x, c).unwrap();
        g.mul(s, s).unwrap()
    }, seeds));
    push("sub", weighted("sub", &[2, 3], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![3], aux.data[200..203].to_vec()).unwrap());
        let s = g.sub(x, c).unwrap();
        g.mul(s, s).unwrap()
    }, seeds));
    push("mul_broadcast", weighted("mul_broadcast", &[3], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![2, 3], aux.data[300..306].to_vec()).unwrap());
        g.mul(x, c).unwrap()
    }, seeds));
    push("scale", weighted("scale", &[2, 4], -2.0, 2.0, |g, x, _| {
        let s = g.sigmoid(x);
        g.scale(s, 3.7)
    }, seeds));
    push("add_scalar", weighted("add_scalar", &[5], -1.0, 1.0, |g, x, _| {
        let y = g.add_scalar(x, 1.3);
        g.mul(y, x).unwrap()
    }, seeds));
    // The kink at 0 is excluded by sampling |x| >= 0.2.
    push("abs", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("abs", seed);
            let data: Vec<f64> = (0..8)
                .map(|_| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.2..1.5)
                })
                .collect();
            let x = Tensor::new(vec![8], data).unwrap();
            let f = |g: &mut Graph<f64>, xid: TensorId| -> TensorId {
                let a = g.abs(xid);
                g.sum_all(a)
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("matmul_lhs", weighted("matmul_lhs", &[3, 4], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![4, 2], aux.data[400..408].to_vec()).unwrap());
        let y = g.matmul(x, c).unwrap();
        g.mul(y, y).unwrap()
    }, seeds));
    push("matmul_rhs", weighted("matmul_rhs", &[4, 2], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![3, 4], aux.data[500..512].to_vec()).unwrap());
        let y = g.matmul(c, x).unwrap();
        g.mul(y, y).unwrap()
    }, seeds));
    push("matmul_batched", weighted("matmul_batched", &[2, 3, 4], -1.0, 1.0, |g, x, aux| {
        let shared = g.constant(Tensor::new(vec![4, 2], aux.data[600..608].to_vec()).unwrap());
        let batched = g.constant(Tensor::new(vec![2, 2, 3], aux.data[700..712].to_vec()).unwrap());
        let y = g.matmul(x, shared).unwrap(); // [2,3,2]
        g.matmul(batched, y).unwrap() // [2,2,2]
    }, seeds));
    push("softmax", weighted("softmax", &[3, 5], -2.0, 2.0, |g, x, _| {
        g.softmax(x, 1).unwrap()
    }, seeds));
    push("sigmoid", weighted("sigmoid", &[7], -3.0, 3.0, |g, x, _| g.sigmoid(x), seeds));
    push("gelu", weighted("gelu", &[7], -3.0, 3.0, |g, x, _| g.gelu(x), seeds));
    push("layer_norm_input", weighted("layer_norm_input", &[3, 5], -1.0, 1.0, |g, x, aux| {
        let gain = g.constant(Tensor::new(vec![5], aux.data[800..805].to_vec()).unwrap());
        let bias = g.constant(Tensor::new(vec![5], aux.data[810..815].to_vec()).unwrap());
        g.layer_norm(x, gain, bias, 1e-6).unwrap()
    }, seeds));
    push("layer_norm_gain", weighted("layer_norm_gain", &[5], -1.0, 1.0, |g, x, aux| {
        let input = g.constant(Tensor::new(vec![3, 5], aux.data[900..915].to_vec()).unwrap());
        let bias = g.constant(Tensor::new(vec![5], aux.data[920..925].to_vec()).unwrap());
        g.layer_norm(input, x, bias, 1e-6).unwrap()
    }, seeds));
    push("layer_norm_bias", weighted("layer_norm_bias", &[5], -1.0, 1.0, |g, x, aux| {
        let input = g.constant(Tensor::new(vec![3, 5], aux.data[1000..1015].to_vec()).unwrap());
        let gain = g.constant(Tensor::new(vec![5], aux.data[1020..1025].to_vec()).unwrap());
        g.layer_norm(input, gain, x, 1e-6).unwrap()
    }, seeds));
    push("gaussian_filter_2d", weighted("gaussian_filter_2d", &[5, 6], 0.0, 1.0, |g, x, _| {
        g.gaussian_filter_2d(x, losses::GAUSSIAN_SIGMA).unwrap()
    }, seeds));
    push("bilinear_resize", weighted("bilinear_resize", &[3, 4], 0.0, 1.0, |g, x, _| {
        g.bilinear_resize(x, 7, 9).unwrap()
    }, seeds));
    push("transpose", weighted("transpose", &[2, 3, 4], -1.0, 1.0, |g, x, _| {
        g.transpose(x, 0, 2).unwrap()
    }, seeds));
    push("reshape", weighted("reshape", &[3, 4], -1.0, 1.0, |g, x, _| {
        g.reshape(x, vec![6, 2]).unwrap()
    }, seeds));
    push("slice", weighted("slice", &[2, 4, 2], -1.0, 1.0, |g, x, _| {
        g.slice(x, 1, 1, 3).unwrap()
    }, seeds));
    push("concat", weighted("concat", &[2, 3], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![2, 2], aux.data[1100..1104].to_vec()).unwrap());
        g.concat(&[x, c, x], 1).unwrap() // x twice: exercises accumulation
    }, seeds));
    push("repeat", weighted("repeat", &[2, 2], -1.0, 1.0, |g, x, _| {
        g.repeat(x, 3).unwrap()
    }, seeds));
    push("sum_all", weighted("sum_all", &[3, 3], -1.0, 1.0, |g, x, _| {
        let s = g.sum_all(x);
        g.mul(s, s).unwrap()
    }, seeds));
    push("mean_all", weighted("mean_all", &[3, 3], -1.0, 1.0, |g, x, _| {
        let s = g.mean_all(x);
        g.mul(s, s).unwrap()
    }, seeds));
    push("sum_axis", weighted("sum_axis", &[2, 3, 2], -1.0, 1.0, |g, x, _| {
        g.sum_axis(x, 1).unwrap()
    }, seeds));
    push("fanout_accumulation", weighted("fanout_accumulation", &[6], -1.0, 1.0, |g, x, aux| {
        let c = g.constant(Tensor::new(vec![6], aux.data[1200..1206].to_vec()).unwrap());
        let a = g.sigmoid(x);
        let b = g.mul(x, x).unwrap();
        let wa = g.mul(a, c).unwrap();
        g.add(wa, b).unwrap()
    }, seeds));

    // Losses.
    push("cross_entropy", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("cross_entropy", seed);
            let x = rand_tensor(&mut rng, &[4, 5], -2.0, 2.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let f = move |g: &mut Graph<f64>, xid: TensorId| g.cross_entropy(xid, &labels).unwrap();
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("batch_area_loss", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("batch_area_loss", seed);
            // Values in (0.3, 0.9) keep the batch mean far from the 0.23
            // prior, away from the |.| kink.
            let x = rand_tensor(&mut rng, &[2, 4, 4], 0.3, 0.9);
            let f = |g: &mut Graph<f64>, xid: TensorId| losses::batch_area_loss(g, xid, 0.23);
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("normalization_loss", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("normalization_loss", seed);
            let x = rand_tensor(&mut rng, &[2, 6, 6], 0.05, 0.95);
            let f = |g: &mut Graph<f64>, xid: TensorId| losses::normalization_loss(g, xid).unwrap();
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("total_loss_maps", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("total_loss_maps", seed);
            let x = rand_tensor(&mut rng, &[2, 4, 4], 0.1, 0.9);
            let logits = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
            let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
            let f = move |g: &mut Graph<f64>, xid: TensorId| {
                let li = g.constant(logits.clone());
                losses::total_loss(g, li, &labels, xid, 0.31, LossToggles::default()).unwrap().total
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("total_loss_logits", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("total_loss_logits", seed);
            let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let maps = rand_tensor(&mut rng, &[3, 4, 4], 0.1, 0.9);
            let labels = vec![0, 2, 1];
            let f = move |g: &mut Graph<f64>, xid: TensorId| {
                let mi = g.constant(maps.clone());
                losses::total_loss(g, xid, &labels, mi, 0.31, LossToggles::default()).unwrap().total
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });

    // Blocks.
    let cfg = SatConfig::tiny();
    push("transformer_block", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("transformer_block", seed);
            let m = SatModel::<f64>::new(cfg, seed).unwrap();
            let s = cfg.seq_len();
            let d = cfg.embed_dim;
            let x = rand_tensor(&mut rng, &[1, s, d], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[1, s, d], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, xid: TensorId| {
                let bound = m.bind(g);
                let p = bound.block(&m.index, 0);
                let y = model::transformer_block(g, xid, &p, &cfg).unwrap();
                let wi = g.constant(w.clone());
                let wy = g.mul(y, wi).unwrap();
                g.sum_all(wy)
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });
    push("sqa_attention", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("sqa_attention", seed);
            let m = SatModel::<f64>::new(cfg, seed + 1000).unwrap();
            let s = cfg.seq_len();
            let d = cfg.embed_dim;
            let x = rand_tensor(&mut rng, &[1, s, d], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[1, s, d], -1.0, 1.0);
            let wm = rand_tensor(&mut rng, &[1, s], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, xid: TensorId| {
                let bound = m.bind(g);
                let p = bound.block(&m.index, 0);
                let out = model::sqa_attention(g, xid, &p, &cfg, SqaMode::Learned).unwrap();
                let wi = g.constant(w.clone());
                let wy = g.mul(out.out, wi).unwrap();
                let s1 = g.sum_all(wy);
                let wmi = g.constant(wm.clone());
                let wmap = g.mul(out.m_spa.unwrap(), wmi).unwrap();
                let s2 = g.sum_all(wmap);
                g.add(s1, s2).unwrap()
            };
            total.merge(finite_diff_check(&f, &x, FD_STEP));
        }
        total
    });

    // End to end: total-loss gradient w.r.t. every model parameter.
    push("model_end_to_end", {
        let mut total = FdError::default();
        for seed in 0..seeds {
            let mut rng = rng_for("model_end_to_end", seed);
            let m = SatModel::<f64>::new(cfg, seed + 2000).unwrap();
            let n = cfg.image_size;
            let images = rand_tensor(&mut rng, &[2, n, n, 3], 0.0, 1.0);
            let labels = vec![rng.gen_range(0..cfg.num_classes), rng.gen_range(0..cfg.num_classes)];
            for pi in 0..m.params.len() {
                let m2 = m.clone();
                let images2 = images.clone();
                let labels2 = labels.clone();
                let f = move |g: &mut Graph<f64>, xid: TensorId| {
                    let ids = m2
                        .params
                        .iter()
                        .enumerate()
                        .map(|(i, p)| if i == pi { xid } else { g.constant(p.tensor.clone()) })
                        .collect();
                    let fwd = m2.forward_bound(g, &images2, Bound { ids }).unwrap();
                    losses::total_loss(g, fwd.logits, &labels2, fwd.fused_map, 0.2, LossToggles::default())
                        .unwrap()
                        .total
                };
                total.merge(finite_diff_check(&f, &m.params[pi].tensor, FD_STEP_DEEP));
            }
        }
        total
    });

    rows
}
