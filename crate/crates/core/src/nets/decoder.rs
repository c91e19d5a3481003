use jigwm_autograd::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, DwConv, Init, Linear, Norm};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Hardswish,
}

/// One inverted-residual stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub squeeze_excite: bool,
    pub act: Activation,
    pub stride: usize,
}

/// How the final feature map becomes a vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average; position-invariant.
    Average,
    /// Flattened map; the head sees where each feature sits.
    Flatten,
}

/// Mobile-class classifier with GroupNorm and a logistic head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub input_size: [usize; 2],
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub last_channels: usize,
    pub head_hidden: usize,
    pub norm_groups: usize,
    pub pooling: Pooling,
}

fn stage(kernel: usize, expand: usize, out: usize, squeeze_excite: bool, act: Activation, stride: usize) -> StageConfig {
    StageConfig {
        kernel,
        expand,
        out,
        squeeze_excite,
        act,
        stride,
    }
}

impl Default for DecoderConfig {
    /// MobileNetV3-Large layout.
    fn default() -> Self {
        use Activation::{Hardswish as HS, Relu as RE};
        Self {
            input_size: [256, 256],
            stem_channels: 16,
            stages: vec![
                stage(3, 16, 16, false, RE, 1),
                stage(3, 64, 24, false, RE, 2),
                stage(3, 72, 24, false, RE, 1),
                stage(5, 72, 40, true, RE, 2),
                stage(5, 120, 40, true, RE, 1),
                stage(5, 120, 40, true, RE, 1),
                stage(3, 240, 80, false, HS, 2),
                stage(3, 200, 80, false, HS, 1),
                stage(3, 184, 80, false, HS, 1),
                stage(3, 184, 80, false, HS, 1),
                stage(3, 480, 112, true, HS, 1),
                stage(3, 672, 112, true, HS, 1),
                stage(5, 672, 160, true, HS, 2),
                stage(5, 960, 160, true, HS, 1),
                stage(5, 960, 160, true, HS, 1),
            ],
            last_channels: 960,
            head_hidden: 1280,
            norm_groups: 8,
            pooling: Pooling::Average,
        }
    }
}

impl DecoderConfig {
    /// Reduced layout for 64×64 inputs; ends on a 4×4 map that is flattened.
    pub fn desk() -> Self {
        use Activation::{Hardswish as HS, Relu as RE};
        Self {
            input_size: [64, 64],
            stem_channels: 16,
            stages: vec![
                stage(3, 16, 16, false, RE, 1),
                stage(3, 48, 24, false, RE, 2),
                stage(3, 72, 24, false, RE, 1),
                stage(5, 72, 40, true, RE, 2),
                stage(3, 160, 64, false, HS, 2),
                stage(3, 192, 64, true, HS, 1),
            ],
            last_channels: 96,
            head_hidden: 128,
            norm_groups: 8,
            pooling: Pooling::Flatten,
        }
    }

    pub fn total_stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.total_stride();
        let [h, w] = self.input_size;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("decoder input {h}x{w} not divisible by total stride {s}")));
        }
        if self.stages.iter().any(|st| st.kernel % 2 == 0 || ![1, 2].contains(&st.stride)) {
            return Err(Error::Config("decoder stages need odd kernels and stride 1 or 2".into()));
        }
        Ok(())
    }

    fn pooled_features(&self) -> usize {
        let s = self.total_stride();
        match self.pooling {
            Pooling::Average => self.last_channels,
            Pooling::Flatten => self.last_channels * (self.input_size[0] / s) * (self.input_size[1] / s),
        }
    }
}

fn activate<'g, T: Scalar>(x: Var<'g, T>, act: Activation) -> Var<'g, T> {
    match act {
        Activation::Relu => x.relu(),
        Activation::Hardswish => x.hardswish(),
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    cfg: StageConfig,
    expand: Option<(Conv, Norm)>,
    dw: DwConv,
    dw_norm: Norm,
    se: Option<SqueezeExcite>,
    project: Conv,
    project_norm: Norm,
    residual: bool,
}

impl InvertedResidual {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cfg: &StageConfig, groups: usize) -> Self {
        let e = cfg.expand;
        let expand = (e != cin).then(|| {
            (
                Conv::new(init, &format!("{name}.expand"), cin, e, 1, 1, 0),
                Norm::group(init, &format!("{name}.expand_norm"), e, groups),
            )
        });
        let se = cfg.squeeze_excite.then(|| {
            let r = (e / 4).max(8);
            SqueezeExcite {
                reduce: Linear::new(init, &format!("{name}.se.reduce"), e, r),
                expand: Linear::new(init, &format!("{name}.se.expand"), r, e),
            }
        });
        Self {
            cfg: cfg.clone(),
            expand,
            dw: DwConv::new(init, &format!("{name}.dw"), e, cfg.kernel, cfg.stride),
            dw_norm: Norm::group(init, &format!("{name}.dw_norm"), e, groups),
            se,
            project: Conv::new(init, &format!("{name}.project"), e, cfg.out, 1, 1, 0),
            project_norm: Norm::group(init, &format!("{name}.project_norm"), cfg.out, groups),
            residual: cfg.stride == 1 && cin == cfg.out,
        }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        if let Some((conv, norm)) = &self.expand {
            h = activate(norm.forward(p, conv.forward(p, h)), self.cfg.act);
        }
        h = activate(self.dw_norm.forward(p, self.dw.forward(p, h)), self.cfg.act);
        if let Some(se) = &self.se {
            let s = se.reduce.forward(p, h.mean_spatial()).relu();
            h = h.mul_nc(se.expand.forward(p, s).hardsigmoid());
        }
        h = self.project_norm.forward(p, self.project.forward(p, h));
        if self.residual {
            x.add(h)
        } else {
            h
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar> {
    cfg: DecoderConfig,
    params: ParamStore<T>,
    stem: Conv,
    stem_norm: Norm,
    stages: Vec<InvertedResidual>,
    last: Conv,
    last_norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let g = cfg.norm_groups;
        let stem = Conv::new(&mut init, "dec.stem", 3, cfg.stem_channels, 3, 2, 1);
        let stem_norm = Norm::group(&mut init, "dec.stem_norm", cfg.stem_channels, g);
        let mut cin = cfg.stem_channels;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let b = InvertedResidual::new(&mut init, &format!("dec.stage{i}"), cin, s, g);
                cin = s.out;
                b
            })
            .collect();
        let last = Conv::new(&mut init, "dec.last", cin, cfg.last_channels, 1, 1, 0);
        let last_norm = Norm::group(&mut init, "dec.last_norm", cfg.last_channels, g);
        let fc1 = Linear::new(&mut init, "dec.fc1", cfg.pooled_features(), cfg.head_hidden);
        let fc2 = Linear::new(&mut init, "dec.fc2", cfg.head_hidden, 1);
        Ok(Self {
            cfg,
            params,
            stem,
            stem_norm,
            stages,
            last,
            last_norm,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.cfg.input_size;
        match shape {
            [_, 3, sh, sw] if *sh == h && *sw == w => Ok(()),
            _ => Err(Error::Dimension(format!("decoder expects [n, 3, {h}, {w}], got {shape:?}"))),
        }
    }

    /// Pre-squash score `[n, 1]`.
    pub fn logits<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem_norm.forward(p, self.stem.forward(p, x)).hardswish();
        for s in &self.stages {
            h = s.forward(p, h);
        }
        h = self.last_norm.forward(p, self.last.forward(p, h)).hardswish();
        let v = match self.cfg.pooling {
            Pooling::Average => h.mean_spatial(),
            Pooling::Flatten => h.flatten(),
        };
        self.fc2.forward(p, self.fc1.forward(p, v).hardswish())
    }

    /// Watermark score `k ∈ [0, 1]`, shape `[n, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.logits(p, x).sigmoid()
    }

    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        Ok(self.forward(&p, g.constant(x.clone())).value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            input_size: [16, 16],
            stem_channels: 8,
            stages: vec![
                stage(3, 8, 8, false, Activation::Relu, 1),
                stage(3, 16, 8, true, Activation::Hardswish, 2),
            ],
            last_channels: 16,
            head_hidden: 8,
            norm_groups: 4,
            pooling: Pooling::Flatten,
        }
    }

    #[test]
    fn scores_are_bounded_and_deterministic() {
        let dec = Decoder::<f64>::new(tiny(), 3).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0);
        let a = dec.scores(&x).unwrap();
        assert_eq!(a, dec.scores(&x).unwrap());
        assert!(a.iter().all(|&k| (0.0..=1.0).contains(&k)));
    }

    #[test]
    fn score_does_not_depend_on_batch_mates() {
        let dec = Decoder::<f64>::new(tiny(), 3).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 31) % 53) as f64 / 53.0);
        let all = dec.scores(&x).unwrap();
        let alone = dec.scores(&x.slice_batch(1, 1)).unwrap();
        assert!((all[1] - alone[0]).abs() < 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_a_dimension_error() {
        let dec = Decoder::<f32>::new(tiny(), 0).unwrap();
        assert!(matches!(dec.scores(&Tensor::zeros(&[1, 3, 32, 32])), Err(Error::Dimension(_))));
    }

    #[test]
    fn presets_validate() {
        DecoderConfig::default().validate().unwrap();
        DecoderConfig::desk().validate().unwrap();
        assert_eq!(DecoderConfig::desk().total_stride(), 16);
    }
}
