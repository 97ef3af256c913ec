use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sat_core::gradcheck::finite_diff_check;
use sat_core::losses::{self, LossToggles};
use sat_core::model::{Bound, SatConfig, SatModel};
use sat_core::tensor::{Graph, Tensor, TensorId};

fn main() {
    let cfg = SatConfig::tiny();
    let seed = 0u64;
    let m = SatModel::<f64>::new(cfg, seed + 2000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = cfg.image_size;
    let images = Tensor::<f64>::new(
        vec![2, n, n, 3],
        (0..2 * n * n * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let labels = vec![rng.gen_range(0..cfg.num_classes), rng.gen_range(0..cfg.num_classes)];

    for pi in 0..m.params.len() {
        for h in [1e-3f64, 1e-4, 1e-5] {
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
            let err = finite_diff_check(&f, &m.params[pi].tensor, h);
            if h == 1e-3 && err.value() < 1e-4 { break; }
            println!("{:20} h={h:.0e} rel={:.3e} abs_small={:.3e}", m.params[pi].name, err.max_relative, err.max_absolute_small);
        }
    }
}
