#![allow(clippy::needless_range_loop)]

use super::*;
use crate::verify::oracle::{self, Mat};
use crate::verify::random;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab: 11,
        layers: 2,
        hidden: 8,
        heads: 2,
        max_seq_len: 16,
        mixer: MixerConfig {
            variant,
            lambda_init: 0.1,
            ..MixerConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg).unwrap();
    let mut rng = random::rng(seed);
    for (name, p) in m.names.clone().iter().zip(m.params_mut()) {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
            *p = p.zip_map(&random::normal(p.shape(), 0.1, &mut rng), |a, b| a + b).unwrap();
        } else if !name.contains(".mixer.") || name.contains(".w_") {
            *p = random::normal(p.shape(), 0.3, &mut rng);
        }
    }
    m
}

#[test]
fn zero_output_projections_make_blocks_identities() {
    let cfg = tiny(Variant::Krr);
    let mut m = perturbed(&cfg, 1);
    for l in 0..cfg.layers {
        for s in ["w_o", "ffn.w2", "ffn.b2"] {
            let p = m.param_mut(&format!("blocks.{l}.{s}")).unwrap();
            *p = Tensor::zeros(p.shape());
        }
    }
    let h = random::normal::<f64>(&[5, 8], 1.0, &mut random::rng(2));
    for l in 0..cfg.layers {
        assert_eq!(m.block_forward(l, &h).unwrap(), h);
    }
}

#[test]
fn single_token_block_is_finite() {
    for v in Variant::ALL {
        let m = Model::<f64>::init(&tiny(v)).unwrap();
        let h = random::normal::<f64>(&[1, 8], 1.0, &mut random::rng(3));
        let out = m.block_forward(0, &h).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert!(out.is_finite());
    }
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &x.data[i * x.cols..(i + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for j in 0..x.cols {
            out.put(i, j, (x.at(i, j) - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add_row(m: &Mat, bias: &[f64]) -> Mat {
    let mut out = m.clone();
    for i in 0..m.rows {
        for j in 0..m.cols {
            out.put(i, j, m.at(i, j) + bias[j]);
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// Straight-line model for one sequence, written with the oracle matrices.
fn straight_line(m: &Model<f64>, tokens: &[usize]) -> Mat {
    let cfg = m.config();
    let p = |name: &str| m.param(name).unwrap();
    let pm = |name: &str| Mat::from_tensor(p(name));
    let embed = pm("embed");
    let mut x = Mat::zeros(tokens.len(), cfg.hidden);
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..cfg.hidden {
            x.put(i, j, embed.at(t, j));
        }
    }
    let mcfg = cfg.mixer_config();
    let dh = mcfg.head_dim();
    for l in 0..cfg.layers {
        let b = |s: &str| format!("blocks.{l}.{s}");
        let h = layer_norm(&x, p(&b("ln1.gamma")).data(), p(&b("ln1.beta")).data());
        let mixed = if mcfg.variant.is_krr() {
            oracle::cubit_oracle(&h, &m.mixer_weights(l).unwrap(), &mcfg).unwrap()
        } else {
            let w = m.mixer_weights(l).unwrap();
            let (q, k, v) = (
                h.mul(&Mat::from_tensor(&w.w_q)),
                h.mul(&Mat::from_tensor(&w.w_k)),
                h.mul(&Mat::from_tensor(&w.w_v)),
            );
            let mut out = Mat::zeros(h.rows, cfg.hidden);
            for head in 0..cfg.heads {
                let q = oracle::rotate_rows(&q.cols_slice(head * dh, dh));
                let k = oracle::rotate_rows(&k.cols_slice(head * dh, dh));
                let v = v.cols_slice(head * dh, dh);
                let z = match mcfg.variant {
                    Variant::Llr => oracle::llr_oracle(&q, &k, &v, &mcfg.mask(), mcfg.llr_reg).unwrap(),
                    _ => oracle::nw_oracle(&q, &k, &v, &mcfg.mask()),
                };
                for i in 0..h.rows {
                    for j in 0..dh {
                        out.put(i, head * dh + j, z.at(i, j));
                    }
                }
            }
            out
        };
        x = add(&x, &mixed.mul(&pm(&b("w_o"))));
        let h = layer_norm(&x, p(&b("ln2.gamma")).data(), p(&b("ln2.beta")).data());
        let mut f = add_row(&h.mul(&pm(&b("ffn.w1"))), p(&b("ffn.b1")).data());
        f.data.iter_mut().for_each(|v| *v = gelu(*v));
        let f = add_row(&f.mul(&pm(&b("ffn.w2"))), p(&b("ffn.b2")).data());
        x = add(&x, &f);
    }
    let x = layer_norm(&x, p("ln_f.gamma").data(), p("ln_f.beta").data());
    x.mul(&pm("head"))
}

#[test]
fn forward_matches_straight_line_model() {
    for v in Variant::ALL {
        let m = perturbed(&tiny(v), 10);
        let tokens = [3, 1, 4, 1, 5, 9, 2];
        let batch = Batch::new(1, tokens.len(), tokens.to_vec(), vec![None; tokens.len()]).unwrap();
        let got = m.logits(&batch).unwrap();
        let want = straight_line(&m, &tokens).to_tensor();
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-9, "{v}: {err:e}");
    }
}

#[test]
fn lm_loss_examples() {
    let uniform = Tensor::<f64>::zeros(&[4, 7]);
    assert!((lm_loss(&uniform, &[0, 3, 6, 2]).unwrap() - 7f64.ln()).abs() < 1e-12);

    let mut sharp = Tensor::<f64>::zeros(&[1, 5]);
    sharp.set(&[0, 2], 1e4);
    assert!(lm_loss(&sharp, &[2]).unwrap() < 1e-12);

    let logits = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.5, -1.0, 0.0]).unwrap();
    let row = |z: [f64; 3], t: usize| -(z[t].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
    let want = 0.5 * (row([1.0, 2.0, 3.0], 0) + row([0.5, -1.0, 0.0], 2));
    assert!((lm_loss(&logits, &[0, 2]).unwrap() - want).abs() < 1e-12);

    assert!(matches!(lm_loss(&logits, &[0, 3]), Err(Error::TargetOutOfRange { target: 3, vocab: 3 })));
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
    let before = p.clone();
    let mut st = OptimState::new(AdamConfig::default(), &p);
    adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_lr_against_the_sign() {
    let mut p = vec![Tensor::<f64>::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap()];
    let mut st = OptimState::new(AdamConfig::default(), &p);
    let g = Tensor::from_f64(&[3], &[3.0, -0.01, 250.0]).unwrap();
    adam_step(&mut p, &[g], &mut st).unwrap();
    for (v, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - s * 6e-4).abs() < 1e-9, "{v}");
    }
}

#[test]
fn adam_matches_scalar_trace() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut p = vec![Tensor::<f64>::scalar(1.0)];
    let mut st = OptimState::new(cfg, &p);
    let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
    for t in 1..=3 {
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st).unwrap();
        m = 0.9 * m + 0.1;
        v = 0.95 * v + 0.05;
        x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.95f64.powi(t))).sqrt() + 1e-8);
        assert!((p[0].data()[0] - x).abs() < 1e-15);
    }
    assert_eq!(st.step, 3);
}

fn closed_form(cfg: &ModelConfig) -> usize {
    let (v, d, h, l) = (cfg.vocab, cfg.hidden, cfg.heads, cfg.layers);
    let f = cfg.ffn_mult * d;
    let mixer = match cfg.mixer.variant {
        Variant::Nw | Variant::Llr => 3 * d * d,
        Variant::Krr => 4 * d * d + d * h + 4 * h,
        Variant::KrrShare => 3 * d * d + d * h + 4 * h,
        Variant::KrrNoLrr => 4 * d * d + 2 * h,
    };
    let block = 4 * d + mixer + d * d + d * f + f + f * d + d;
    let head = if cfg.tied_head { 0 } else { d * v };
    v * d + l * block + 2 * d + head
}

#[test]
fn parameter_counts_follow_closed_form() {
    for v in Variant::ALL {
        for tied in [false, true] {
            let cfg = ModelConfig {
                tied_head: tied,
                ..tiny(v)
            };
            assert_eq!(param_count(&cfg), closed_form(&cfg), "{v}");
            assert_eq!(Model::<f32>::init(&cfg).unwrap().count(), closed_form(&cfg));
        }
    }
}

#[test]
fn loss_at_init_is_near_uniform() {
    let cfg = ModelConfig {
        vocab: 64,
        layers: 2,
        hidden: 32,
        heads: 2,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let mut rng = random::rng(0);
    for v in Variant::ALL {
        let m = Model::<f64>::init(&cfg.with_variant(v)).unwrap();
        let inputs: Vec<usize> = (0..4 * 32).map(|_| rand::Rng::random_range(&mut rng, 0..64)).collect();
        let targets = inputs.iter().map(|&t| Some((t * 7 + 3) % 64)).collect();
        let e = m.evaluate(&Batch::new(4, 32, inputs, targets).unwrap()).unwrap();
        assert!((e.loss / 64f64.ln() - 1.0).abs() < 0.05, "{v}: {}", e.loss);
    }
}

#[test]
fn shared_parameters_initialize_identically_across_variants() {
    let nw = Model::<f32>::init(&tiny(Variant::Nw)).unwrap();
    let krr = Model::<f32>::init(&tiny(Variant::Krr)).unwrap();
    for name in nw.names() {
        assert_eq!(nw.param(name), krr.param(name), "{name}");
    }
    assert_eq!(Model::<f32>::init(&tiny(Variant::Nw)).unwrap().params(), nw.params());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = tiny(Variant::KrrShare);
    let m = perturbed(&cfg, 4);
    checkpoint::save(&path, &m).unwrap();
    let back = checkpoint::load::<f64>(&path, &cfg).unwrap();
    assert_eq!(back.params(), m.params());

    let text = std::fs::read(&path).unwrap();
    let head = String::from_utf8_lossy(&text[..200]);
    assert!(head.starts_with("krrmix-checkpoint 1\nconfig_digest "));
    assert!(head.contains("embed shape=11x8 offset=0 width=8"));

    assert!(checkpoint::load::<f64>(&path, &tiny(Variant::Krr)).is_err());
    assert!(checkpoint::read::<f32>(&path).is_err());
}

#[test]
fn gradients_flow_to_every_parameter() {
    let cfg = tiny(Variant::Krr);
    let m = perturbed(&cfg, 5);
    let batch = Batch::new(2, 4, vec![1, 2, 3, 4, 5, 6, 7, 8], (0..8).map(|i| Some(i % 11)).collect()).unwrap();
    let (_, grads) = m.loss_and_grads(&batch).unwrap();
    for (name, g) in m.names().iter().zip(&grads) {
        if name == "embed" {
            continue;
        }
        assert!(g.max_abs() > 0.0, "{name}");
    }
}
