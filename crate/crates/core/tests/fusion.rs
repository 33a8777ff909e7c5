use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trimodal::autodiff::{Graph, VARIANCE_FLOOR};
use trimodal::data::{generate, Modality, ModalityWidths, SynthSpec};
use trimodal::nn::{Architecture, FusionConfig, FusionKind, FusionNet, ModalityEmbedding};
use trimodal::Tensor;

const WIDTHS: ModalityWidths = ModalityWidths {
    vision: 9,
    radiomics: 7,
    clinical: 5,
};

fn config() -> FusionConfig {
    FusionConfig {
        d_uniform: 12,
        n_heads: 3,
        n_tokens: 3,
        encoder_hidden: 6,
        head_hidden: 5,
        n_classes: 2,
        key_width: None,
    }
}

fn model(arch: Architecture) -> FusionNet {
    FusionNet::new(config(), WIDTHS, arch, 3).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn layer_norm_rows(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let sd = var.max(VARIANCE_FLOOR).sqrt();
            row.iter().map(move |v| (v - mean) / sd)
        })
        .collect()
}

fn zero_params(net: &mut FusionNet, prefix: &str) {
    let names: Vec<String> = net.params().names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    assert!(!names.is_empty(), "no params under {prefix}");
    for name in names {
        let shape = net.params().by_name(&name).unwrap().shape().to_vec();
        net.params_mut().set(&name, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn forward_shapes_for_the_full_model() {
    let spec = SynthSpec {
        n_samples: 10,
        n_positive: 5,
        widths: WIDTHS,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap().dataset;
    let net = model(Architecture::full());
    let batch = data.batch(&[0, 2, 4, 6, 8]);
    let mut g = Graph::new();
    let p = net.params().bind(&mut g);
    let out = net.forward(&mut g, &p, &batch).unwrap();
    assert_eq!(g.shape(out.logits), [5, 2]);
    assert_eq!(g.shape(out.f_global), [5, 36]);
    assert_eq!(out.aligned.len(), 3);
    for (m, v) in &out.aligned {
        assert_eq!(g.shape(*v), [5, 12], "{m}");
    }
    let probs = net.predict_proba(&batch).unwrap();
    for row in probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ima_with_zero_attention_is_a_token_layer_norm() {
    let mut net = model(Architecture::full());
    zero_params(&mut net, "ima.vision.query");
    zero_params(&mut net, "ima.vision.key");
    zero_params(&mut net, "ima.vision.value");
    zero_params(&mut net, "ima.vision.output");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[4, 3, 4]);
    let mut g = Graph::new();
    let p = net.params().bind_frozen(&mut g);
    let tokens = g.constant(x.clone());
    let out = net
        .ima_forward(
            &mut g,
            &p,
            ModalityEmbedding {
                tokens,
                modality: Modality::Vision,
            },
        )
        .unwrap();
    let expected = layer_norm_rows(x.data(), 4);
    let got = g.value(out.tokens).data();
    let err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn identity_mix_reduces_cross_attention_fusion_to_concatenation() {
    let mut net = model(Architecture::full());
    let d = 12;
    let mut mix = vec![0.0; 2 * d * d];
    for k in 0..d {
        mix[(d + k) * d + k] = 1.0;
    }
    for m in Modality::ALL {
        net.params_mut().set(&format!("tcaf.{m}.mix"), Tensor::new(&[2 * d, d], mix.clone()).unwrap()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let p = net.params().bind_frozen(&mut g);
    let embeddings: Vec<ModalityEmbedding> = Modality::ALL
        .iter()
        .map(|&modality| ModalityEmbedding {
            tokens: g.constant(random(&mut rng, &[3, 3, 4])),
            modality,
        })
        .collect();
    let fused = net.tcaf_fuse(&mut g, &p, &embeddings).unwrap();
    let concat = net.concat_fuse(&mut g, &embeddings).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(concat)) < 1e-12);
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut net = model(Architecture::full());
    zero_params(&mut net, "head.");
    let mut g = Graph::new();
    let p = net.params().bind_frozen(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = g.constant(random(&mut rng, &[4, 36]));
    let logits = net.classify(&mut g, &p, f).unwrap();
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    let wrong = g.constant(Tensor::zeros(&[4, 35]));
    assert!(net.classify(&mut g, &p, wrong).is_err());
}

#[test]
fn disabling_cross_attention_matches_the_concat_census() {
    let no_tcaf = model(Architecture::new(Modality::ALL.to_vec(), true, false).unwrap());
    assert_eq!(no_tcaf.architecture().fusion_kind(), FusionKind::Concat);
    assert!(no_tcaf.params().names().iter().all(|n| !n.starts_with("tcaf.")));
    assert_eq!(no_tcaf.fused_width(), 36);

    let bare = model(Architecture::new(Modality::ALL.to_vec(), false, false).unwrap());
    assert!(bare.params().names().iter().all(|n| !n.starts_with("ima.") && !n.starts_with("tcaf.")));
    let full = model(Architecture::full());
    assert!(full.params().num_scalars() > no_tcaf.params().num_scalars());
    assert!(no_tcaf.params().num_scalars() > bare.params().num_scalars());
}

#[test]
fn single_modality_has_only_encoder_and_head() {
    let net = model(Architecture::unimodal(Modality::Vision));
    assert_eq!(net.architecture().fusion_kind(), FusionKind::Direct);
    for name in net.params().names() {
        assert!(name.starts_with("encoder.vision") || name.starts_with("head."), "{name}");
    }
    assert_eq!(net.fused_width(), 12);
}

#[test]
fn bimodal_pairs_the_two_modalities() {
    let arch = Architecture::new(vec![Modality::Vision, Modality::Clinical], true, true).unwrap();
    assert_eq!(arch.partner(Modality::Vision).unwrap(), Modality::Clinical);
    assert_eq!(arch.partner(Modality::Clinical).unwrap(), Modality::Vision);
    let net = model(arch);
    assert_eq!(net.fused_width(), 24);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ima_is_token_permutation_equivariant(seed in 0u64..1000, perm_pick in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_pick];
        let net = model(Architecture::full());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 4]);
        let mut xp = vec![0.0; x.len()];
        for b in 0..2 {
            for (t, &src) in perm.iter().enumerate() {
                for c in 0..4 {
                    xp[(b * 3 + t) * 4 + c] = x.get(&[b, src, c]);
                }
            }
        }
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let p = net.params().bind_frozen(&mut g);
            let tokens = g.constant(t);
            let out = net.ima_forward(&mut g, &p, ModalityEmbedding { tokens, modality: Modality::Radiomics }).unwrap();
            g.value(out.tokens).clone()
        };
        let y = run(x.clone());
        let yp = run(Tensor::new(&[2, 3, 4], xp).unwrap());
        for b in 0..2 {
            for (t, &src) in perm.iter().enumerate() {
                for c in 0..4 {
                    prop_assert!((yp.get(&[b, t, c]) - y.get(&[b, src, c])).abs() < 1e-12);
                }
            }
        }
    }
}
