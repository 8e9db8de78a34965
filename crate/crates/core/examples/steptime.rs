use mrplab::nanomodel::*;
use mrplab::rng::substream;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut rng = substream(42, "model-init");
    let base = BaseModel::init(cfg.clone(), &mut rng).unwrap();
    let model = HookedModel::unhooked(base);
    // batch 32, seq len 16 like pretraining
    let b = 32; let l = 16;
    use rand::Rng;
    let tokens: Vec<u32> = (0..b*l).map(|_| rng.gen_range(0..512)).collect();
    let mut mask = vec![false; b*l];
    let mut labels = vec![0u32; b*l];
    for i in 0..b { mask[i*l + l-2] = true; labels[i*l + l-2] = rng.gen_range(0..512); }
    let batch = Batch::new(b, l, tokens, mask, labels).unwrap();

    let t = Instant::now();
    let out = forward(&model, &batch, &std::collections::BTreeSet::new()).unwrap();
    println!("forward only: {:.1} ms (logit sink {:.3})", t.elapsed().as_secs_f64()*1e3, out.logits[0]);

    let t = Instant::now();
    let n = 5;
    for _ in 0..n {
        let (_, g) = grads(&model, &batch, Scope::BaseWeights).unwrap();
        std::hint::black_box(g);
    }
    println!("fwd+bwd: {:.1} ms/step", t.elapsed().as_secs_f64()*1e3 / n as f64);
}
