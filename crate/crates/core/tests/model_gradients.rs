use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsuggest::model::{Batch, EncodedInput, Flags, ModelConfig, Pair, SaTransformer};

fn random_pair(rng: &mut ChaCha8Rng, vocab: u32) -> Pair {
    let lens = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(0..3)];
    let mut input = EncodedInput { ids: vec![], segments: vec![], positions: vec![] };
    for (seg, &n) in lens.iter().enumerate() {
        for p in 0..n {
            input.ids.push(rng.random_range(6..vocab));
            input.segments.push(seg as u8);
            input.positions.push(p);
        }
    }
    let target = (0..rng.random_range(0..3)).map(|_| rng.random_range(6..vocab)).collect();
    Pair { input, target }
}

/// Below this both gradients are zero up to central-difference round-off.
const ZERO_FLOOR: f64 = 1e-8;

struct Report {
    worst_relative: f64,
    worst_name: String,
    /// Tensors whose gradient vanishes identically (key biases: softmax
    /// ignores a shift shared by all keys), with their largest absolute gap.
    zero: Vec<(String, f64)>,
}

/// Per-tensor relative error `|a - n|∞ / max(|a|∞, |n|∞)`.
fn check_gradients(model: &mut SaTransformer, batch: &Batch) -> Report {
    let (_, grads) = model.loss_and_gradients(batch, None).unwrap();
    let h = 1e-5;
    let mut report = Report { worst_relative: 0.0, worst_name: String::new(), zero: vec![] };
    for id in 0..model.params().len() {
        let shape = model.params().get(id).dim();
        let (mut diff, mut scale) = (0.0f64, 1e-300f64);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params().get(id)[[r, c]];
                model.params_mut().get_mut(id)[[r, c]] = orig + h;
                let up = model.evaluate_loss(batch).unwrap().0;
                model.params_mut().get_mut(id)[[r, c]] = orig - h;
                let down = model.evaluate_loss(batch).unwrap().0;
                model.params_mut().get_mut(id)[[r, c]] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.get(id)[[r, c]];
                diff = diff.max((num - ana).abs());
                scale = scale.max(num.abs()).max(ana.abs());
            }
        }
        let name = model.params().name(id).to_owned();
        if scale < ZERO_FLOOR {
            report.zero.push((name, diff));
        } else if diff / scale > report.worst_relative {
            report.worst_relative = diff / scale;
            report.worst_name = name;
        }
    }
    report
}

#[test]
fn full_model_matches_finite_differences() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        dropout: 0.0,
        max_positions: 16,
        vocab_size: 20,
        flags: Flags::ALL,
    };
    for (seed, flags) in [(11, Flags::ALL), (12, Flags::NONE)] {
        let mut model = SaTransformer::new(ModelConfig { flags, ..cfg }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<Pair> = (0..3).map(|_| random_pair(&mut rng, 20)).collect();
        let refs: Vec<&Pair> = pairs.iter().collect();
        let batch = Batch::new(&refs, 2, 3);
        let report = check_gradients(&mut model, &batch);
        assert!(report.worst_relative < 1e-5, "{}: {}", report.worst_name, report.worst_relative);
        for (name, gap) in &report.zero {
            let unused = flags == Flags::NONE && name == "seg_emb";
            assert!(name.ends_with(".bk") || unused, "unexpected zero gradient for {name}");
            assert!(*gap < ZERO_FLOOR, "{name}: {gap}");
        }
    }
}

#[test]
fn overfit_single_example() {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 32,
        dropout: 0.0,
        max_positions: 16,
        vocab_size: 20,
        flags: Flags::ALL,
    };
    let mut model = SaTransformer::new(cfg, 3).unwrap();
    let pair = Pair {
        input: EncodedInput { ids: vec![7, 8, 4, 5, 9], segments: vec![0, 0, 0, 1, 1], positions: vec![0, 1, 2, 0, 1] },
        target: vec![12, 13],
    };
    let batch = Batch::new(&[&pair], 2, 3);
    // plain gradient descent with momentum is enough for a single example
    let lr = 0.05;
    let mut velocity: Vec<_> = model.params().tensors().map(|t| t.clone() * 0.0).collect();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        let (l, g) = model.loss_and_gradients(&batch, None).unwrap();
        loss = l;
        for ((p, v), gr) in model.params_mut().tensors_mut().zip(&mut velocity).zip(&g.grads) {
            *v = &*v * 0.9 + gr;
            *p -= &(&*v * lr);
        }
    }
    assert!(loss < 0.01, "{loss}");
    let (_, grads) = model.loss_and_gradients(&batch, None).unwrap();
    assert!(grads.global_norm() < 1e-1, "{}", grads.global_norm());
}
