//! The network `F = C ∘ G`.
//!
//! `G` is a stack of per-location affine maps (1×1 convolutions, with an
//! optional leading 3×3 stage) that keeps the spatial grid intact. `C` is a
//! bias-free linear map applied after global average pooling, so the class
//! logits are exactly the spatial means of the class activation maps.
//! An optional two-layer discriminator reads pooled features for the
//! domain-adversarial regularizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub features: usize,
    pub classes: usize,
    /// Use a 3×3 kernel (zero padded) for the first stage instead of 1×1.
    pub local_mixing: bool,
    pub discriminator: bool,
    pub discriminator_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            hidden: 16,
            features: 8,
            classes: 4,
            local_mixing: true,
            discriminator: false,
            discriminator_hidden: 16,
        }
    }
}

/// One convolution stage; `weight` is `[out, in, k, k]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Stage {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub stages: Vec<Stage>,
}

/// `weight` is `[classes × features]`; there is deliberately no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

/// Gradient-reversal strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlCoefficient(pub f64);

impl Default for GrlCoefficient {
    fn default() -> Self {
        GrlCoefficient(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScdaModel {
    pub extractor: ExtractorParams,
    pub classifier: ClassifierParams,
    pub discriminator: Option<DiscriminatorParams>,
}

fn glorot(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-s, s)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, arch: &ArchConfig) -> ScdaModel {
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x4d4f_4445_4c]));
    let first_k = if arch.local_mixing { 3 } else { 1 };
    let widths = [
        (arch.in_channels, arch.hidden, first_k),
        (arch.hidden, arch.features, 1),
    ];
    let stages = widths
        .iter()
        .map(|&(i, o, k)| Stage {
            weight: glorot(&mut rng, &[o, i, k, k], i * k * k, o),
            bias: Tensor::zeros(&[o]),
        })
        .collect();
    let classifier = ClassifierParams {
        weight: glorot(
            &mut rng,
            &[arch.classes, arch.features],
            arch.features,
            arch.classes,
        ),
    };
    let discriminator = arch.discriminator.then(|| {
        let h = arch.discriminator_hidden;
        DiscriminatorParams {
            hidden_weight: glorot(&mut rng, &[h, arch.features], arch.features, h),
            hidden_bias: Tensor::zeros(&[h]),
            out_weight: glorot(&mut rng, &[1, h], h, 1),
            out_bias: Tensor::zeros(&[1]),
        }
    });
    ScdaModel {
        extractor: ExtractorParams { stages },
        classifier,
        discriminator,
    }
}

impl ScdaModel {
    pub fn classes(&self) -> usize {
        self.classifier.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.classifier.weight.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.extractor.stages[0].in_channels()
    }

    /// All parameter tensors with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.extractor.stages.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), ParamGroup::Extractor, &s.weight));
            out.push((format!("extractor.{i}.bias"), ParamGroup::Extractor, &s.bias));
        }
        out.push((
            "classifier.weight".to_string(),
            ParamGroup::Classifier,
            &self.classifier.weight,
        ));
        if let Some(d) = &self.discriminator {
            let g = ParamGroup::Discriminator;
            out.push(("discriminator.0.weight".to_string(), g, &d.hidden_weight));
            out.push(("discriminator.0.bias".to_string(), g, &d.hidden_bias));
            out.push(("discriminator.1.weight".to_string(), g, &d.out_weight));
            out.push(("discriminator.1.bias".to_string(), g, &d.out_bias));
        }
        out
    }

    /// Mutable parameter tensors in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.extractor.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.classifier.weight);
        if let Some(d) = &mut self.discriminator {
            out.push(&mut d.hidden_weight);
            out.push(&mut d.hidden_bias);
            out.push(&mut d.out_weight);
            out.push(&mut d.out_bias);
        }
        out
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut vars = Vec::new();
        let mut stages = Vec::new();
        for s in &self.extractor.stages {
            let w = tape.param(s.weight.clone());
            let b = tape.param(s.bias.clone());
            vars.extend([w, b]);
            stages.push(BoundStage {
                weight: w,
                bias: b,
                kernel: s.kernel(),
            });
        }
        let classifier = tape.param(self.classifier.weight.clone());
        vars.push(classifier);
        let discriminator = self.discriminator.as_ref().map(|d| {
            let bd = BoundDiscriminator {
                hidden_weight: tape.param(d.hidden_weight.clone()),
                hidden_bias: tape.param(d.hidden_bias.clone()),
                out_weight: tape.param(d.out_weight.clone()),
                out_bias: tape.param(d.out_bias.clone()),
            };
            vars.extend([bd.hidden_weight, bd.hidden_bias, bd.out_weight, bd.out_bias]);
            bd
        });
        BoundModel {
            stages,
            classifier,
            discriminator,
            vars,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundStage {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDiscriminator {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Tape handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub stages: Vec<BoundStage>,
    pub classifier: Var,
    pub discriminator: Option<BoundDiscriminator>,
    /// Same order as [`ScdaModel::named_params`].
    pub vars: Vec<Var>,
}

/// Runs `G` on `images [n × in_ch × h × w]`, giving `[n × features × h × w]`.
pub fn extract_on(tape: &mut Tape, model: &BoundModel, images: Var) -> Result<Var> {
    let c = match *tape.shape(images) {
        [_, c, _, _] => c,
        _ => {
            return Err(Error::InvalidShape {
                shape: tape.shape(images).to_vec(),
                reason: "images must be [n, c, h, w]".into(),
            })
        }
    };
    let expect_c = tape.shape(model.stages[0].weight)[1];
    if c != expect_c {
        return Err(Error::ShapeMismatch {
            op: "extract",
            left: tape.shape(images).to_vec(),
            right: tape.shape(model.stages[0].weight).to_vec(),
        });
    }
    let mut x = images;
    for stage in &model.stages {
        let z = tape.conv2d(x, stage.weight, stage.bias)?;
        x = tape.relu(z);
    }
    Ok(x)
}

/// Logits `f × Wᵀ` for pooled features `f [n × features]`.
pub fn classify_pooled_on(tape: &mut Tape, weight: Var, pooled: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    tape.matmul(pooled, wt)
}

/// `C(GAP(a))` for an activation volume.
pub fn classify_on(tape: &mut Tape, weight: Var, activations: Var) -> Result<Var> {
    let pooled = tape.global_average_pool(activations)?;
    classify_pooled_on(tape, weight, pooled)
}

/// Probability of "source" for pooled features `[n × features]`.
pub fn discriminate_on(tape: &mut Tape, d: &BoundDiscriminator, pooled: Var) -> Result<Var> {
    let w1 = tape.transpose(d.hidden_weight)?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_bias(h, d.hidden_bias)?;
    let h = tape.relu(h);
    let w2 = tape.transpose(d.out_weight)?;
    let z = tape.matmul(h, w2)?;
    let z = tape.add_bias(z, d.out_bias)?;
    Ok(tape.sigmoid(z))
}

pub fn grl_forward(tape: &mut Tape, x: Var, coeff: GrlCoefficient) -> Var {
    tape.grl(x, coeff.0)
}

/// Value-level `G`: activation volume for `images`.
pub fn extract(params: &ExtractorParams, images: &Tensor) -> Result<Tensor> {
    let model = ScdaModel {
        extractor: params.clone(),
        classifier: ClassifierParams {
            weight: Tensor::zeros(&[1, params.stages.last().map_or(0, Stage::out_channels)]),
        },
        discriminator: None,
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(images.clone());
    let a = extract_on(&mut tape, &bound, x)?;
    Ok(tape.value(a).clone())
}

/// Value-level `C`: logits for an activation volume.
pub fn classify(params: &ClassifierParams, activations: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.constant(params.weight.clone());
    let a = tape.constant(activations.clone());
    if activations.rank() != 4 || activations.shape()[1] != params.weight.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "classify",
            left: activations.shape().to_vec(),
            right: params.weight.shape().to_vec(),
        });
    }
    let z = classify_on(&mut tape, w, a)?;
    Ok(tape.value(z).clone())
}

/// Value-level discriminator.
pub fn discriminate(params: &DiscriminatorParams, pooled: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = BoundDiscriminator {
        hidden_weight: tape.constant(params.hidden_weight.clone()),
        hidden_bias: tape.constant(params.hidden_bias.clone()),
        out_weight: tape.constant(params.out_weight.clone()),
        out_bias: tape.constant(params.out_bias.clone()),
    };
    let f = tape.constant(pooled.clone());
    let out = discriminate_on(&mut tape, &d, f)?;
    Ok(tape.value(out).clone())
}

impl ScdaModel {
    /// Logits for a batch of images, without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, logits) = self.activations_and_logits(images)?;
        Ok(logits)
    }

    pub fn activations_and_logits(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(images.clone());
        let a = extract_on(&mut tape, &bound, x)?;
        let z = classify_on(&mut tape, bound.classifier, a)?;
        Ok((tape.value(a).clone(), tape.value(z).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            in_channels: 2,
            hidden: 3,
            features: 3,
            classes: 2,
            local_mixing: false,
            discriminator: true,
            discriminator_hidden: 4,
        }
    }

    #[test]
    fn zero_everything_gives_zero_activations() {
        let mut m = init_params(1, &tiny_arch());
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        let a = extract(&m.extractor, &Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        assert_eq!(a.shape(), &[2, 3, 3, 3]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_stage_passes_channels() {
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let params = ExtractorParams {
            stages: vec![Stage {
                weight: w,
                bias: Tensor::zeros(&[2]),
            }],
        };
        let img = Tensor::new(vec![1, 2, 2, 2], vec![0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = extract(&params, &img).unwrap();
        assert_eq!(a, img);
    }

    #[test]
    fn extract_rejects_wrong_channels() {
        let m = init_params(1, &tiny_arch());
        assert!(extract(&m.extractor, &Tensor::zeros(&[1, 3, 2, 2])).is_err());
        assert!(extract(&m.extractor, &Tensor::zeros(&[3, 2, 2])).is_err());
    }

    /// Direct per-pixel evaluation, written independently of the tape.
    fn direct_extract(m: &ScdaModel, img: &Tensor) -> Vec<f64> {
        let s = img.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut cur: Vec<Vec<f64>> = Vec::new(); // per (sample, pixel) channel vector
        for si in 0..n {
            for p in 0..h * w {
                cur.push((0..c).map(|ch| img.data()[(si * c + ch) * h * w + p]).collect());
            }
        }
        for st in &m.extractor.stages {
            let (o, i, k) = (st.out_channels(), st.in_channels(), st.kernel());
            let r = (k / 2) as isize;
            let mut next = Vec::new();
            for si in 0..n {
                for u in 0..h as isize {
                    for v in 0..w as isize {
                        let mut out = vec![0.0; o];
                        for (oc, slot) in out.iter_mut().enumerate() {
                            let mut acc = st.bias.data()[oc];
                            for ic in 0..i {
                                for du in -r..=r {
                                    for dv in -r..=r {
                                        let (uu, vv) = (u + du, v + dv);
                                        if uu < 0 || vv < 0 || uu >= h as isize || vv >= w as isize {
                                            continue;
                                        }
                                        let px = si * h * w + uu as usize * w + vv as usize;
                                        let widx = ((oc * i + ic) * k + (du + r) as usize) * k
                                            + (dv + r) as usize;
                                        acc += st.weight.data()[widx] * cur[px][ic];
                                    }
                                }
                            }
                            *slot = acc.max(0.0);
                        }
                        next.push(out);
                    }
                }
            }
            cur = next;
        }
        let f = cur[0].len();
        let mut out = vec![0.0; n * f * h * w];
        for si in 0..n {
            for p in 0..h * w {
                for ch in 0..f {
                    out[(si * f + ch) * h * w + p] = cur[si * h * w + p][ch];
                }
            }
        }
        out
    }

    #[test]
    fn extract_matches_direct_evaluation() {
        for (seed, local) in [(3u64, false), (4, true)] {
            let arch = ArchConfig {
                local_mixing: local,
                ..tiny_arch()
            };
            let mut m = init_params(seed, &arch);
            let mut rng = SplitMix64::new(seed);
            for s in &mut m.extractor.stages {
                s.bias.data_mut().iter_mut().for_each(|b| *b = rng.uniform_range(-0.3, 0.3));
            }
            let img = Tensor::new(
                vec![2, 2, 4, 5],
                (0..80).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let a = extract(&m.extractor, &img).unwrap();
            let want = direct_extract(&m, &img);
            for (x, y) in a.data().iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn classify_examples() {
        // uniform value v on channel 1, w^c = e_1
        let v = 0.7;
        let mut a = Tensor::zeros(&[1, 3, 2, 2]);
        a.data_mut()[4..8].fill(v);
        let w = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let z = classify(&ClassifierParams { weight: w }, &a).unwrap();
        assert!((z.data()[0] - v).abs() < 1e-15);
        assert_eq!(z.data()[1], 0.0);

        let z = classify(&ClassifierParams { weight: Tensor::zeros(&[2, 3]) }, &a).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));

        assert!(classify(&ClassifierParams { weight: Tensor::zeros(&[2, 4]) }, &a).is_err());
    }

    #[test]
    fn discriminator_examples() {
        let m = init_params(2, &tiny_arch());
        let mut d = m.discriminator.clone().unwrap();
        for t in [&mut d.hidden_weight, &mut d.hidden_bias, &mut d.out_weight, &mut d.out_bias] {
            t.data_mut().fill(0.0);
        }
        let f = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let out = discriminate(&d, &f).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert!(out.data().iter().all(|&p| p == 0.5));

        d.out_bias.data_mut()[0] = 10.0;
        let out = discriminate(&d, &f).unwrap();
        assert!(out.data().iter().all(|&p| p > 0.99));

        assert!(discriminate(&d, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = ArchConfig::default();
        assert_eq!(init_params(9, &arch), init_params(9, &arch));
        assert_ne!(init_params(9, &arch), init_params(10, &arch));
    }

    #[test]
    fn init_variance_matches_glorot() {
        let arch = ArchConfig {
            in_channels: 100,
            hidden: 100,
            features: 8,
            classes: 4,
            local_mixing: false,
            discriminator: false,
            discriminator_hidden: 1,
        };
        let m = init_params(5, &arch);
        let w = m.extractor.stages[0].weight.data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 200.0;
        assert!((var / want - 1.0).abs() < 0.2, "{var} vs {want}");
        assert!(m.extractor.stages[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn named_params_align_with_params_mut() {
        let mut m = init_params(1, &tiny_arch());
        let shapes: Vec<Vec<usize>> = m.named_params().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.len(), 9);
    }
}
