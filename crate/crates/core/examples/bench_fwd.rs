use std::time::Instant;
use rand::SeedableRng;
use signstream::backbone::BackboneConfig;
use signstream::model::Recognizer;
use signstream::nn::Rng;
use ndarray::Array5;

fn main() {
    let mut rng = Rng::seed_from_u64(1);
    let t0 = Instant::now();
    let model = Recognizer::build(BackboneConfig::table_default(), &mut rng).unwrap();
    println!("build: {:.2?}", t0.elapsed());
    let x = Array5::<f64>::from_elem((1, 3, 16, 224, 224), 0.3);
    let t1 = Instant::now();
    let feats = model.backbone.infer(&x).unwrap();
    println!("backbone infer: {:.2?}, out {:?}", t1.elapsed(), feats.dim());
    let t2 = Instant::now();
    let e = model.embed(&x).unwrap();
    println!("full embed: {:.2?}, {:?}", t2.elapsed(), e.dim());
}
