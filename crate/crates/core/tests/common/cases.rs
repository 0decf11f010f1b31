//! Finite-difference cases: every differentiable primitive, the attention
//! block under each perturbation variant, and the full training objective.

use attndrop::attention::{self_attention, AttentionConfig};
use attndrop::drop::{consistency_loss, BlurMode, DropConfig, Perturber};
use attndrop::harness::{build_model, evaluate_objective, Batch, Draws, Model, ModelConfig};
use attndrop::rng::RngStream;
use attndrop::tensor::{Graph, Var};
use attndrop::Result;

use super::{max_fd_error, random_inputs, rel_err, FD_STEP};

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub lo: f64,
    pub hi: f64,
    pub f: Op,
}

fn case(name: &'static str, shapes: &[&[usize]], lo: f64, hi: f64, f: Op) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        lo,
        hi,
        f,
    }
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], -2.0, 2.0, Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], -2.0, 2.0, Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", &[&[2, 3], &[2, 3]], -2.0, 2.0, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("add_broadcast_vector", &[&[2, 3, 4], &[4]], -2.0, 2.0, Box::new(|g, v| g.add_broadcast(v[0], v[1]))),
        case("add_broadcast_matrix", &[&[2, 3, 4], &[3, 4]], -2.0, 2.0, Box::new(|g, v| g.add_broadcast(v[0], v[1]))),
        case("scale", &[&[3, 2]], -2.0, 2.0, Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        case("exp", &[&[2, 3]], -2.0, 2.0, Box::new(|g, v| Ok(g.exp(v[0])))),
        case("ln", &[&[2, 3]], 0.5, 3.0, Box::new(|g, v| g.ln(v[0]))),
        case("relu", &[&[3, 4]], -1.0, 1.0, Box::new(|g, v| Ok(g.relu(v[0])))),
        case("sum", &[&[2, 3]], -2.0, 2.0, Box::new(|g, v| Ok(g.sum(v[0])))),
        case("mean", &[&[2, 3]], -2.0, 2.0, Box::new(|g, v| Ok(g.mean(v[0])))),
        case("mean_axis", &[&[2, 3, 4]], -2.0, 2.0, Box::new(|g, v| g.mean_axis(v[0], 1))),
        case("matmul_2d", &[&[3, 4], &[4, 2]], -1.0, 1.0, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], -1.0, 1.0, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_left_batched", &[&[2, 3, 4], &[4, 5]], -1.0, 1.0, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_right_batched", &[&[3, 4], &[2, 4, 5]], -1.0, 1.0, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("reshape", &[&[2, 3, 4]], -2.0, 2.0, Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        case("permute", &[&[2, 3, 4]], -2.0, 2.0, Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        case("transpose_last2", &[&[2, 3, 4]], -2.0, 2.0, Box::new(|g, v| g.transpose_last2(v[0]))),
        case("softmax_rows", &[&[3, 5]], -3.0, 3.0, Box::new(|g, v| g.softmax_rows(v[0]))),
        case("log_softmax_rows", &[&[3, 5]], -3.0, 3.0, Box::new(|g, v| g.log_softmax_rows(v[0]))),
        case(
            "gather_last_dim",
            &[&[2, 5]],
            -2.0,
            2.0,
            Box::new(|g, v| g.gather_last_dim(v[0], &[4, 1, 0, 3], 2)),
        ),
        case(
            "scatter_mul_last_dim",
            &[&[2, 5]],
            -2.0,
            2.0,
            Box::new(|g, v| g.scatter_mul_last_dim(v[0], &[4, 1, 0, 3], &[0.0, 1.0, 0.5, 0.0], 2)),
        ),
        case(
            "conv_rows_w3",
            &[&[2, 6]],
            -2.0,
            2.0,
            Box::new(|g, v| g.conv_rows(v[0], &[0.25, 0.5, 0.25])),
        ),
        case(
            "conv_rows_w5",
            &[&[2, 2, 6]],
            -2.0,
            2.0,
            Box::new(|g, v| g.conv_rows(v[0], &[0.1, 0.2, 0.4, 0.2, 0.1])),
        ),
        case(
            "cross_entropy",
            &[&[3, 4]],
            -2.0,
            2.0,
            Box::new(|g, v| g.cross_entropy_with_logits(v[0], &[0, 3, 1])),
        ),
        case(
            "layer_norm",
            &[&[2, 3, 4], &[4], &[4]],
            -2.0,
            2.0,
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        case(
            "embedding",
            &[&[5, 3]],
            -2.0,
            2.0,
            Box::new(|g, v| g.embedding(v[0], &[0, 4, 2, 2, 2, 1], &[2, 3])),
        ),
        case(
            "consistency_loss",
            &[&[3, 4], &[3, 4]],
            -2.0,
            2.0,
            Box::new(|g, v| consistency_loss(g, v[0], v[1])),
        ),
    ]
}

/// Attention-variant configurations checked by [`attention_variant_fd`].
pub fn variant_configs() -> Vec<(&'static str, DropConfig)> {
    let mut separable = DropConfig::blur(0.5, 3);
    separable.blur_mode = BlurMode::Separable;
    vec![
        ("baseline", DropConfig::baseline()),
        ("hard_mask p=0.5 k=3", DropConfig::hard_mask(0.5, 3)),
        ("blur_smooth row w=5", DropConfig::blur(0.5, 5)),
        ("blur_smooth separable w=3", separable),
    ]
}

/// One perturbed self-attention pass: `x, wq, wk, wv` are differentiated;
/// draws are sampled once per point and then replayed for every probe.
pub fn attention_variant_fd(drop: &DropConfig, points: usize, seed: u64) -> f64 {
    let cfg = AttentionConfig::new(4, 2, 6).unwrap();
    let table = drop.kernel_table().unwrap();
    let shapes: [&[usize]; 4] = [&[2, 6, 4], &[4, 4], &[4, 4], &[4, 4]];
    let mut rng = RngStream::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs = random_inputs(&shapes, &mut rng, -1.0, 1.0);
        let mut draw_rng = RngStream::new(rng.next_u64());
        let draws = {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let mut p = Perturber::sampling(drop, table.as_ref(), &mut draw_rng);
            self_attention(&mut g, v[0], v[1], v[2], v[3], &cfg, |g, l| p.weights(g, l)).unwrap();
            p.into_draws()
        };
        assert_eq!(draws.is_empty(), !drop.perturbs(), "draws for {drop:?}");
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let mut p = Perturber::replaying(drop, table.as_ref(), &draws);
            Ok(self_attention(g, v[0], v[1], v[2], v[3], &cfg, |g, l| p.weights(g, l))?.output)
        };
        worst = worst.max(max_fd_error(&inputs, f, &mut rng));
    }
    worst
}

pub fn tiny_model(seed: u64) -> (Model, Batch) {
    let mut model = build_model(&ModelConfig {
        vocab: 5,
        seq_len: 6,
        layers: 1,
        model_dim: 4,
        heads: 2,
        ffn_dim: 6,
        classes: 3,
        seed,
    })
    .unwrap();
    // Random head and biases so that every parameter receives gradient.
    let mut rng = RngStream::new(seed ^ 0xabc);
    for p in model.params_mut() {
        if p.name.starts_with("cls") || p.name.ends_with("_b") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
    }
    let batch = Batch {
        seq_len: 6,
        tokens: vec![0, 1, 2, 3, 4, 4, 1, 0, 2, 2, 2, 1, 3, 3, 0, 4, 1, 2],
        labels: vec![0, 2, 1],
    };
    (model, batch)
}

/// Gradient of the full training objective (with the recorded draws
/// replayed) against central differences in every parameter.
pub fn objective_fd(drop: &DropConfig, seed: u64) -> f64 {
    let (mut model, batch) = tiny_model(seed);
    let table = drop.kernel_table().unwrap();
    let mut rng = RngStream::new(seed ^ 0x55);
    let eval = evaluate_objective(
        &model,
        &batch,
        drop,
        table.as_ref(),
        Draws::Sample(&mut rng),
        drop.consistency,
        true,
    )
    .unwrap();
    let analytic: Vec<f64> = eval.grads.unwrap().concat();
    let draws = eval.draws;
    assert_eq!(draws.is_empty(), !drop.perturbs(), "draws for {drop:?}");
    let base = model.flat_params();
    let mut loss_at = |flat: &[f64]| {
        model.set_flat_params(flat).unwrap();
        evaluate_objective(&model, &batch, drop, table.as_ref(), Draws::Replay(&draws), drop.consistency, false)
            .unwrap()
            .loss
    };
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for (j, &a) in analytic.iter().enumerate() {
        probe[j] = base[j] + FD_STEP;
        let up = loss_at(&probe);
        probe[j] = base[j] - FD_STEP;
        let down = loss_at(&probe);
        probe[j] = base[j];
        worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}
