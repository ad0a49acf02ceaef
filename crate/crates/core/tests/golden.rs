//! Forward output of a fixed model and input, recorded once from this implementation.

use ladabert::model::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn seed_zero_trace_matches_recording() {
    let m = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = m.forward(&[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
    let logits = [0.05731708012905822, -0.8223294070873457, 1.0255127370489459];
    let hidden = [0.19104992970365603, -1.5443172075810108, -0.7266195234471697, 0.6380611869313975];
    for (a, b) in t.logits.iter().zip(logits) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in t.hidden[1].data().iter().zip(hidden) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
