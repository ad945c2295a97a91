use super::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    /// `in x out`
    pub w: usize,
    /// `1 x out`
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderBlock {
    pub attn: Attention,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross_attn: Attention,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FusionSlots {
    pub u1: usize,
    pub u2: usize,
    pub p: usize,
    pub b: usize,
    pub v1: usize,
    pub v2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform(-s, s) with s = 1/sqrt(fan-in).
    FanIn(usize),
    Ones,
    Zeros,
}

/// Names, shapes and slots of every learnable tensor, derived from a
/// [`ModelConfig`]. The order is fixed, which makes it the checkpoint
/// manifest order as well.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    pub(crate) fusion: FusionSlots,
    pub(crate) encoder_in: Linear,
    pub(crate) decoder_in: Linear,
    pub(crate) begin: usize,
    pub(crate) encoder: Vec<EncoderBlock>,
    pub(crate) decoder: Vec<DecoderBlock>,
    pub(crate) head: Linear,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), input, output, Init::FanIn(input)),
            b: self.add(format!("{name}.bias"), 1, output, Init::FanIn(input)),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), 1, width, Init::Ones),
            bias: self.add(format!("{name}.bias"), 1, width, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.linear(&format!("{name}.key"), d, d),
            v: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.output"), d, d),
        }
    }
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
        let (q, r, o, d) = (c.feature_dim, c.fusion_rank, c.fusion_dim, c.model_dim);
        let fusion = FusionSlots {
            u1: b.add("fusion.u1".into(), q, r, Init::FanIn(q)),
            u2: b.add("fusion.u2".into(), q, r, Init::FanIn(q)),
            p: b.add("fusion.p".into(), o, r, Init::FanIn(r)),
            b: b.add("fusion.b".into(), 1, o, Init::FanIn(r)),
            v1: b.add("fusion.v1".into(), o, q, Init::FanIn(q)),
            v2: b.add("fusion.v2".into(), o, q, Init::FanIn(q)),
        };
        let encoder_in = b.linear("encoder.input", o, d);
        let decoder_in = b.linear("decoder.input", c.classes, d);
        let begin = b.add("decoder.begin".into(), 1, d, Init::FanIn(d));
        let encoder = (0..c.encoder_blocks)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderBlock {
                    attn: b.attention(&format!("{p}.attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ff1: b.linear(&format!("{p}.ff1"), d, c.feedforward_dim),
                    ff2: b.linear(&format!("{p}.ff2"), c.feedforward_dim, d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..c.decoder_blocks)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderBlock {
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    ff1: b.linear(&format!("{p}.ff1"), d, c.feedforward_dim),
                    ff2: b.linear(&format!("{p}.ff2"), c.feedforward_dim, d),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let head = b.linear("head", d, c.classes);
        ParamLayout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            fusion,
            encoder_in,
            decoder_in,
            begin,
            encoder,
            decoder,
            head,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// All learnable weights of fusion, Transformer and output head.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let tensors = (0..layout.len())
            .map(|i| {
                let (r, c) = layout.shapes[i];
                match layout.inits[i] {
                    Init::Ones => Tensor::filled(vec![r, c], 1.0),
                    Init::Zeros => Tensor::zeros(vec![r, c]),
                    Init::FanIn(n) => {
                        let s = 1.0 / (n as f64).sqrt();
                        Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(-s, s)).collect())
                    }
                }
            })
            .collect();
        Ok(ModelParams { config: config.clone(), layout, tensors })
    }

    /// Rebuilds parameters from tensors listed in layout order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if tensors.len() != layout.len() {
            return Err(Error::Usage(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.dims2() != layout.shapes[i] {
                return Err(Error::Usage(format!(
                    "{} has shape {:?}, expected {:?}",
                    layout.names[i],
                    t.shape(),
                    layout.shapes[i]
                )));
            }
        }
        Ok(ModelParams { config: config.clone(), layout, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layout.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layout.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copy of the fusion block as standalone parameters.
    pub fn fusion(&self) -> FusionParams {
        let f = self.layout.fusion;
        FusionParams {
            u1: self.tensors[f.u1].clone(),
            u2: self.tensors[f.u2].clone(),
            p: self.tensors[f.p].clone(),
            b: self.tensors[f.b].clone(),
            v1: self.tensors[f.v1].clone(),
            v2: self.tensors[f.v2].clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique() {
        let layout = ParamLayout::new(&ModelConfig::default());
        let mut names = layout.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::default();
        let a = ModelParams::init(&c, &mut RngStream::new(1)).unwrap();
        let b = ModelParams::init(&c, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(a.get("encoder.0.norm1.gain").unwrap().data(), &[1.0; 64]);
        a.fusion().validate().unwrap();
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let c = ModelConfig::default();
        let p = ModelParams::init(&c, &mut RngStream::new(1)).unwrap();
        let mut ts = p.tensors().to_vec();
        ts[0] = Tensor::zeros(vec![1, 1]);
        assert!(ModelParams::from_tensors(&c, ts).is_err());
    }
}
