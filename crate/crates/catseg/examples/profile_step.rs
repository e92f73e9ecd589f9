use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use catseg::config::TrainConfig;
use catseg::net::{catnet_forward, collect_vars, SegNet};
use catseg::tape::Tape;
use catseg::tensor::{LabelVolume, Tensor};
use std::sync::Arc;

fn main() {
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = SegNet::<f32>::init(config.network.clone(), &mut rng).unwrap();
    let n = 12*64*64;
    let input = Tensor::<f32>::from_vec(&[12,64,64,1], (0..n).map(|i| (i as f32 * 0.37).sin()*0.5+0.5).collect()).unwrap();
    let labels = Arc::new(LabelVolume::new([12,64,64], (0..n).map(|i| (i % 3) as u8).collect()).unwrap());

    // warmup
    for _ in 0..2 {
        let mut tape = Tape::new();
        let xv = tape.leaf(input.clone());
        let vars = net.bind(&mut tape);
        let (logits, _) = catnet_forward(&mut tape, xv, &vars, &config.network, false).unwrap();
        let loss = tape.cross_entropy(logits, labels.clone()).unwrap();
        let _ = tape.backward(loss).unwrap();
    }

    let t0 = Instant::now();
    let reps = 5;
    let mut fwd_time = 0.0; let mut bwd_time = 0.0; let mut grad_collect = 0.0;
    for _ in 0..reps {
        let tf = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.leaf(input.clone());
        let vars = net.bind(&mut tape);
        let (logits, _) = catnet_forward(&mut tape, xv, &vars, &config.network, false).unwrap();
        let loss = tape.cross_entropy(logits, labels.clone()).unwrap();
        fwd_time += tf.elapsed().as_secs_f64();
        let tb = Instant::now();
        let mut grads = tape.backward(loss).unwrap();
        bwd_time += tb.elapsed().as_secs_f64();
        let tc = Instant::now();
        let flat = collect_vars(&vars);
        let mut total = 0.0f32;
        for v in flat { if let Some(g) = grads.take(v) { total += g.iter().sum::<f32>(); } }
        grad_collect += tc.elapsed().as_secs_f64();
        std::hint::black_box(total);
    }
    println!("fwd {:.3}s bwd {:.3}s collect {:.3}s per step (total {:.3}s/step)",
        fwd_time/reps as f64, bwd_time/reps as f64, grad_collect/reps as f64, t0.elapsed().as_secs_f64()/reps as f64);
}
