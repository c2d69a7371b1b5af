use ndarray::Array3;
use rand::Rng as _;
use rand::SeedableRng;
use signstream::attention::{hard_tv_loss_grad, Neighborhood};
use signstream::nn::Rng;

fn main() {
    for lr in [0.5, 1.0, 2.0] {
        for seed in [1u64, 2, 3] {
            let mut rng = Rng::seed_from_u64(seed);
            let mut x = Array3::<f64>::from_shape_fn((4, 7, 7), |_| rng.random::<f64>());
            let nbhd = Neighborhood::cube26();
            let mut steps_needed = None;
            for step in 0..500 {
                let (_, g) = hard_tv_loss_grad(&x, &nbhd).unwrap();
                x.zip_mut_with(&g, |v, &gv| *v = (*v - lr * gv).clamp(0.0, 1.0));
                let sharp = x.iter().filter(|&&v| v <= 0.1 || v >= 0.9).count() as f64 / x.len() as f64;
                if sharp >= 0.9 && steps_needed.is_none() {
                    steps_needed = Some(step + 1);
                }
            }
            let sharp = x.iter().filter(|&&v| v <= 0.1 || v >= 0.9).count() as f64 / x.len() as f64;
            println!("lr {lr} seed {seed}: final sharp {:.3}, reached at {:?}", sharp, steps_needed);
        }
    }
}
