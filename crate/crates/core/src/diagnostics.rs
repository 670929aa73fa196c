//! Gradient verification sweeps over every primitive, every layer, and the
//! full training loss of all three architectures. Shared by the `grad-check`
//! subcommand and the acceptance suite.

use crate::error::XmResult;
use crate::layers::{
    decoder_block, encoder_block, multi_head_attention, speech_embedding, text_embedding,
    AttentionMask, AttentionParams, DecoderBlockParams, EncoderBlockParams, ForwardCtx,
    LayerConfig, SpeechEmbeddingParams,
};
use crate::models::{Architecture, ModelConfig, Network, TokenId, Vocabulary, EOS_ID};
use crate::numerics::ops::{self, Primitive};
use crate::numerics::{
    grad_check, grad_check_params, ParamBuilder, ParamInit, ParameterRegistry, Rng, Tensor,
};
use crate::training::cross_entropy_loss;

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error < 1e-4
    }
}

/// Random values bounded away from zero, so kinked activations stay safely
/// on one side of their kink under the finite-difference step.
fn away_from_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform_in(0.15, 1.5);
            if rng.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn weighted_sum(out: &Tensor) -> XmResult<Tensor> {
    let w: Vec<f64> = (0..out.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
    let wt = Tensor::from_vec(out.shape().to_vec(), w);
    Ok(ops::reduce_sum(&ops::mul(out, &wt)?, None))
}

/// One grad check per (primitive, differentiated input) per trial.
pub fn primitive_grad_checks(trials: usize, seed: u64) -> XmResult<Vec<CheckOutcome>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for trial in 0..trials {
        let m = 1 + (trial % 3);
        let k = 2 + (trial % 2);
        let n = 2 + (trial % 3);
        let d = 2 * (1 + (trial % 3));
        let cases: Vec<(Primitive, Vec<Tensor>, usize)> = vec![
            (
                Primitive::Matmul,
                vec![
                    Tensor::from_vec(vec![m, k], away_from_zero(&mut rng, m * k)),
                    Tensor::from_vec(vec![k, n], away_from_zero(&mut rng, k * n)),
                ],
                trial % 2,
            ),
            (
                Primitive::Add,
                vec![
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                ],
                trial % 2,
            ),
            (
                Primitive::Mul,
                vec![
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                ],
                trial % 2,
            ),
            (
                Primitive::Scale { factor: -1.7 },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::BiasAdd,
                vec![
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                    Tensor::from_vec(vec![n], away_from_zero(&mut rng, n)),
                ],
                trial % 2,
            ),
            (
                Primitive::Concat { axis: 1 },
                vec![
                    Tensor::from_vec(vec![m, k], away_from_zero(&mut rng, m * k)),
                    Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n)),
                ],
                trial % 2,
            ),
            (
                Primitive::Split { axis: 1, offset: 1, len: n - 1 },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::Transpose { perm: None },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::Transpose { perm: Some(vec![1, 2, 0]) },
                vec![Tensor::from_vec(vec![m, k, n], away_from_zero(&mut rng, m * k * n))],
                0,
            ),
            (
                Primitive::Softmax,
                vec![Tensor::from_vec(vec![m, d], away_from_zero(&mut rng, m * d))],
                0,
            ),
            (
                Primitive::Log,
                vec![Tensor::from_vec(
                    vec![m, n],
                    (0..m * n).map(|_| rng.uniform_in(0.2, 3.0)).collect(),
                )],
                0,
            ),
            (
                Primitive::Relu,
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::LayerNorm { eps: 1e-5 },
                vec![
                    Tensor::from_vec(vec![m, d], away_from_zero(&mut rng, m * d)),
                    Tensor::from_vec(vec![d], away_from_zero(&mut rng, d)),
                    Tensor::from_vec(vec![d], away_from_zero(&mut rng, d)),
                ],
                trial % 3,
            ),
            (
                Primitive::EmbeddingLookup { ids: vec![0, 2, 1, 2] },
                vec![Tensor::from_vec(vec![3, d], away_from_zero(&mut rng, 3 * d))],
                0,
            ),
            (
                Primitive::Reshape { shape: vec![n, m] },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::MaskedFill {
                    mask: (0..m * n).map(|i| i % 3 == 0).collect(),
                    value: -2.5,
                },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::ReduceSum { axis: Some(1) },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::ReduceSum { axis: None },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::ReduceMean { axis: None },
                vec![Tensor::from_vec(vec![m, n], away_from_zero(&mut rng, m * n))],
                0,
            ),
            (
                Primitive::Conv2d,
                vec![
                    Tensor::from_vec(vec![2, 5, 4], away_from_zero(&mut rng, 40)),
                    Tensor::from_vec(vec![3, 2, 3, 3], away_from_zero(&mut rng, 54)),
                    Tensor::from_vec(vec![3], away_from_zero(&mut rng, 3)),
                ],
                trial % 3,
            ),
        ];
        for (prim, inputs, diff_idx) in cases {
            let prim2 = prim.clone();
            let fixed = inputs.clone();
            let f = move |x: &Tensor| -> XmResult<Tensor> {
                let slot: Vec<&Tensor> = fixed
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == diff_idx { x } else { t })
                    .collect();
                weighted_sum(&ops::apply_primitive(&prim2, &slot)?)
            };
            let err = grad_check(&f, &inputs[diff_idx], FD_STEP)?;
            let name = format!("primitive/{}[in{}]", prim.name(), diff_idx);
            let slot = worst.entry(name).or_insert(0.0);
            *slot = slot.max(err);
        }
    }
    Ok(worst.into_iter().map(|(name, max_error)| CheckOutcome { name, max_error }).collect())
}

fn registry_entries(reg: &ParameterRegistry) -> Vec<(String, Tensor)> {
    reg.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Grad checks through each layer in isolation.
pub fn layer_grad_checks(seed: u64) -> XmResult<Vec<CheckOutcome>> {
    let cfg = LayerConfig { d_model: 8, num_heads: 2, ffn_dim: 12, dropout_p: 0.0 };
    let mut out = Vec::new();
    let mut data_rng = Rng::seed_from_u64(seed ^ 0x5ca1ab1e);

    // multi-head attention
    {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        let params = AttentionParams::build(&mut pb, "attn", cfg.d_model)?;
        let x = Tensor::from_vec(vec![3, 8], away_from_zero(&mut data_rng, 24));
        let f = {
            let x = x.clone();
            let params = params.clone();
            move || -> XmResult<Tensor> {
                let (o, _) = multi_head_attention(
                    &x,
                    &x,
                    &x,
                    &AttentionMask::causal(3),
                    &params,
                    2,
                    &mut ForwardCtx::eval(),
                )?;
                weighted_sum(&o)
            }
        };
        let err = grad_check_params(&f, &registry_entries(&reg), FD_STEP)?;
        out.push(CheckOutcome { name: "layer/multi_head_attention".into(), max_error: err });
    }

    // encoder block
    {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        let mut pb = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        let params = EncoderBlockParams::build(&mut pb, "blk", &cfg)?;
        let x = Tensor::from_vec(vec![3, 8], away_from_zero(&mut data_rng, 24));
        let f = {
            let params = params.clone();
            move || -> XmResult<Tensor> {
                let (o, _) =
                    encoder_block(&x, &AttentionMask::full(3, 3), &params, 2, &mut ForwardCtx::eval())?;
                weighted_sum(&o)
            }
        };
        let err = grad_check_params(&f, &registry_entries(&reg), FD_STEP)?;
        out.push(CheckOutcome { name: "layer/encoder_block".into(), max_error: err });
    }

    // decoder block, single and dual memory
    for dual in [false, true] {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(seed ^ 2 ^ dual as u64);
        let mut pb = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        let params = DecoderBlockParams::build(&mut pb, "blk", &cfg, dual)?;
        let t = Tensor::from_vec(vec![3, 8], away_from_zero(&mut data_rng, 24));
        let ma = Tensor::from_vec(vec![2, 8], away_from_zero(&mut data_rng, 16));
        let mb = Tensor::from_vec(vec![4, 8], away_from_zero(&mut data_rng, 32));
        let f = {
            let params = params.clone();
            move || -> XmResult<Tensor> {
                let causal = AttentionMask::causal(3);
                let mask_a = AttentionMask::full(3, 2);
                let mask_b = AttentionMask::full(3, 4);
                let mems: Vec<(&Tensor, &AttentionMask)> = if dual {
                    vec![(&ma, &mask_a), (&mb, &mask_b)]
                } else {
                    vec![(&ma, &mask_a)]
                };
                let (o, _) = decoder_block(&t, &mems, &causal, &params, 2, &mut ForwardCtx::eval())?;
                weighted_sum(&o)
            }
        };
        let err = grad_check_params(&f, &registry_entries(&reg), FD_STEP)?;
        let name = if dual { "layer/decoder_block_dual" } else { "layer/decoder_block" };
        out.push(CheckOutcome { name: name.into(), max_error: err });
    }

    // speech embedding
    {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(seed ^ 3);
        let mut pb = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        let params = SpeechEmbeddingParams::build(&mut pb, "spe", 6, 8)?;
        let frames = Tensor::from_vec(vec![8, 6], away_from_zero(&mut data_rng, 48));
        let f = {
            let params = params.clone();
            move || -> XmResult<Tensor> { weighted_sum(&speech_embedding(&frames, &params)?) }
        };
        let err = grad_check_params(&f, &registry_entries(&reg), FD_STEP)?;
        out.push(CheckOutcome { name: "layer/speech_embedding".into(), max_error: err });
    }

    // text embedding
    {
        let mut reg = ParameterRegistry::new();
        let mut rng = Rng::seed_from_u64(seed ^ 4);
        let mut pb = ParamBuilder::new(&mut reg, ParamInit::Fresh(&mut rng));
        let table = pb.embedding("emb", 6, 8)?;
        let f = {
            let table = table.clone();
            move || -> XmResult<Tensor> {
                weighted_sum(&text_embedding(&[1, 3, 1, 5], &table, 8)?)
            }
        };
        let err = grad_check_params(&f, &registry_entries(&reg), FD_STEP)?;
        out.push(CheckOutcome { name: "layer/text_embedding".into(), max_error: err });
    }
    Ok(out)
}

/// Grad check of the full teacher-forced cross-entropy loss on a
/// two-utterance micro-batch, for each architecture.
pub fn model_loss_grad_checks(seed: u64) -> XmResult<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for arch in [Architecture::Asr, Architecture::CrossModal, Architecture::Separate] {
        let config = ModelConfig {
            arch,
            layer: LayerConfig { d_model: 8, num_heads: 2, ffn_dim: 16, dropout_p: 0.0 },
            encoder_blocks: 1,
            decoder_blocks: 1,
            speech_encoder_blocks: 1,
            vocab: Vocabulary::synthetic(4),
            feature_dim: 4,
            max_source_len: 64,
            max_target_len: 16,
        };
        let mut rng = Rng::seed_from_u64(seed ^ arch as u64);
        let model = Network::new(config, ParamInit::Fresh(&mut rng))?;
        let mut data_rng = Rng::seed_from_u64(seed ^ 0xfeed ^ arch as u64);
        let frames_a = Tensor::from_vec(vec![6, 4], away_from_zero(&mut data_rng, 24));
        let frames_b = Tensor::from_vec(vec![9, 4], away_from_zero(&mut data_rng, 36));
        let hyp_a: Vec<TokenId> = vec![4, 6];
        let hyp_b: Vec<TokenId> = vec![7, 5, 4];
        let w_a: Vec<TokenId> = vec![4, 5];
        let w_b: Vec<TokenId> = vec![6, 7, 4];
        let f = {
            let model = &model;
            move || -> XmResult<Tensor> {
                let mut ctx = ForwardCtx::eval();
                let (lp_a, lp_b) = match arch {
                    Architecture::Asr => (
                        model.asr_forward(&frames_a, &w_a, &mut ctx)?,
                        model.asr_forward(&frames_b, &w_b, &mut ctx)?,
                    ),
                    _ => (
                        model.corrector_forward(&frames_a, &hyp_a, &w_a, &mut ctx)?,
                        model.corrector_forward(&frames_b, &hyp_b, &w_b, &mut ctx)?,
                    ),
                };
                let mut ta = w_a.clone();
                ta.push(EOS_ID);
                let mut tb = w_b.clone();
                tb.push(EOS_ID);
                let la = cross_entropy_loss(&lp_a, &ta, crate::models::PAD_ID)?;
                let lb = cross_entropy_loss(&lp_b, &tb, crate::models::PAD_ID)?;
                Ok(ops::scale(&ops::add(&la, &lb)?, 0.5))
            }
        };
        let err = grad_check_params(&f, &registry_entries(&model.registry), FD_STEP)?;
        out.push(CheckOutcome { name: format!("model/{}_loss", arch.label()), max_error: err });
    }
    Ok(out)
}

/// Everything: primitives (each over `trials` random shapes), layers, and
/// full model losses.
pub fn run_all_grad_checks(trials: usize, seed: u64) -> XmResult<Vec<CheckOutcome>> {
    let mut out = primitive_grad_checks(trials, seed)?;
    out.extend(layer_grad_checks(seed)?);
    out.extend(model_loss_grad_checks(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_diagnostics_pass() {
        let outcomes = run_all_grad_checks(2, 99).unwrap();
        assert!(outcomes.len() >= 25);
        for o in &outcomes {
            assert!(o.passed(), "{} failed with {}", o.name, o.max_error);
        }
    }
}
