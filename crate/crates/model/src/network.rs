//! Declarative network description, builder and forward pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{calibrate_alss, Alss, AlssConfig, ConvBnAct, HeadOutput, Msca, MscaConfig, SegmentHead, SegmentHeadConfig, Sppf};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor, Var};
use loopseg_core::{Error, Result};

pub const REFERENCE_YAML: &str = include_str!("../configs/reference.yaml");
pub const TINY_YAML: &str = include_str!("../configs/tiny.yaml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Conv,
    Alss,
    Sppf,
    Upsample,
    Concat,
    Msca,
    Segment,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv => "Conv",
            LayerKind::Alss => "ALSS",
            LayerKind::Sppf => "SPPF",
            LayerKind::Upsample => "Upsample",
            LayerKind::Concat => "Concat",
            LayerKind::Msca => "MSCA",
            LayerKind::Segment => "Segment",
        }
    }

    /// Rows whose counts follow closed-form formulas and must match exactly.
    pub fn is_exact(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Sppf)
    }
}

fn prev() -> Vec<i64> {
    vec![-1]
}

fn default_k() -> usize {
    3
}

fn default_s() -> usize {
    1
}

fn default_split() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    #[serde(default = "prev")]
    pub from: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_s")]
    pub s: usize,
    /// Bottleneck width; calibrated against `params` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msca: Option<MscaFlags>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gflops: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MscaFlags {
    pub dw_activation: bool,
    pub reduce_norm: bool,
    pub expand_bias: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub total_params: Option<usize>,
    pub fused_params: Option<usize>,
    pub gflops: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub head: SegmentHeadConfig,
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        Ok(serde_yaml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }

    pub fn reference() -> Self {
        Self::from_yaml(REFERENCE_YAML).expect("bundled config parses")
    }

    pub fn tiny() -> Self {
        Self::from_yaml(TINY_YAML).expect("bundled config parses")
    }

    /// Same layers at a different input size.
    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input = [self.input[0], h, w];
        self
    }
}

#[derive(Clone, Debug)]
pub enum Module {
    Input,
    Conv(ConvBnAct),
    Alss(Alss),
    Sppf(Sppf),
    Upsample,
    Concat,
    Msca(Msca),
    Segment(SegmentHead),
}

#[derive(Clone, Debug)]
pub struct BuiltLayer {
    pub spec: LayerSpec,
    pub module: Module,
    /// Absolute indices of the inputs.
    pub inputs: Vec<usize>,
    /// `[C, H, W]` at the configured input size; empty for the head.
    pub out_shape: [usize; 3],
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<BuiltLayer>,
    pub store: ParamStore,
}

pub fn layer_prefix(index: usize) -> String {
    format!("l{index:02}.")
}

/// Build every layer, checking that shapes chain through the graph.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    let mut store = ParamStore::new(seed);
    let [c0, h0, w0] = cfg.input;
    if c0 == 0 || h0 == 0 || w0 == 0 {
        return Err(Error::Config("input dimensions must be positive".into()));
    }
    let mut layers = vec![BuiltLayer {
        spec: LayerSpec {
            index: 0,
            kind: LayerKind::Input,
            from: vec![],
            out: Some(c0),
            k: 0,
            s: 1,
            hidden: None,
            split: default_split(),
            msca: None,
            params: None,
            gflops: None,
        },
        module: Module::Input,
        inputs: vec![],
        out_shape: cfg.input,
        macs: 0,
    }];
    for (pos, spec) in cfg.layers.iter().enumerate() {
        let i = pos + 1;
        let err = |m: String| Error::Config(format!("layer {i} ({}): {m}", spec.kind.label()));
        if spec.index != i {
            return Err(err(format!("index {} out of order", spec.index)));
        }
        let inputs = spec
            .from
            .iter()
            .map(|&f| {
                let a = if f < 0 { i as i64 + f } else { f };
                if a < 0 || a as usize >= i {
                    Err(err(format!("input {f} does not name an earlier layer")))
                } else {
                    Ok(a as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if inputs.is_empty() {
            return Err(err("no inputs".into()));
        }
        let shapes: Vec<[usize; 3]> = inputs.iter().map(|&j| layers[j].out_shape).collect();
        if shapes.iter().any(|s| s[0] == 0) {
            return Err(err("reads from the head".into()));
        }
        let [c, h, w] = shapes[0];
        let single = || {
            if inputs.len() == 1 {
                Ok(())
            } else {
                Err(err(format!("takes one input, got {}", inputs.len())))
            }
        };
        let need_out = || spec.out.ok_or_else(|| err("missing `out`".into()));
        let name = format!("l{i:02}");
        let (module, out_shape, macs) = match spec.kind {
            LayerKind::Input => return Err(err("input is implicit".into())),
            LayerKind::Conv => {
                single()?;
                let m = ConvBnAct::new(&mut store, &name, c, need_out()?, spec.k, spec.s);
                let (ho, wo) = m.out_hw(h, w);
                let macs = m.macs(h, w);
                let shape = [m.cout(), ho, wo];
                (Module::Conv(m), shape, macs)
            }
            LayerKind::Alss => {
                single()?;
                let out = need_out()?;
                let acfg = match (spec.hidden, spec.params) {
                    (Some(hd), _) => AlssConfig {
                        split: spec.split,
                        ..AlssConfig::new(c, out, spec.s, hd)
                    },
                    (None, Some(t)) => calibrate_alss(c, out, spec.s, spec.split, t)?,
                    (None, None) => return Err(err("needs `hidden` or a `params` target".into())),
                };
                let m = Alss::new(&mut store, &name, acfg).map_err(|e| err(e.to_string()))?;
                let (ho, wo) = m.out_hw(h, w);
                let macs = m.macs(h, w);
                (Module::Alss(m), [out, ho, wo], macs)
            }
            LayerKind::Sppf => {
                single()?;
                let out = need_out()?;
                let m = Sppf::new(&mut store, &name, c, out).map_err(|e| err(e.to_string()))?;
                let macs = m.macs(h, w);
                (Module::Sppf(m), [out, h, w], macs)
            }
            LayerKind::Upsample => {
                single()?;
                (Module::Upsample, [c, 2 * h, 2 * w], 0)
            }
            LayerKind::Concat => {
                if shapes.iter().any(|s| s[1] != h || s[2] != w) {
                    return Err(err(format!("spatial sizes differ: {shapes:?}")));
                }
                (Module::Concat, [shapes.iter().map(|s| s[0]).sum(), h, w], 0)
            }
            LayerKind::Msca => {
                single()?;
                let flags = spec.msca.clone().unwrap_or_default();
                let mcfg = MscaConfig {
                    dw_activation: flags.dw_activation,
                    reduce_norm: flags.reduce_norm,
                    expand_bias: flags.expand_bias,
                    ..MscaConfig::new(c)
                };
                if h < 5 || w < 5 {
                    return Err(err(format!("spatial size {h}×{w} below 5")));
                }
                let m = Msca::new(&mut store, &name, mcfg)?;
                let macs = m.macs(h, w);
                (Module::Msca(m), [c, h, w], macs)
            }
            LayerKind::Segment => {
                let chans: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
                for pair in shapes.windows(2) {
                    if pair[1][1] * 2 != pair[0][1] || pair[1][2] * 2 != pair[0][2] {
                        return Err(err(format!("scales must halve in order, got {shapes:?}")));
                    }
                }
                let m = SegmentHead::new(&mut store, &name, &chans, cfg.head.clone())?;
                let sizes: Vec<(usize, usize)> = shapes.iter().map(|s| (s[1], s[2])).collect();
                let macs = m.macs(&sizes);
                (Module::Segment(m), [0, 0, 0], macs)
            }
        };
        if out_shape[0] != 0 && (out_shape[1] == 0 || out_shape[2] == 0) {
            return Err(err("spatial size collapsed to zero".into()));
        }
        if let Some(o) = spec.out {
            if out_shape[0] != 0 && o != out_shape[0] {
                return Err(err(format!("declares {o} output channels but produces {}", out_shape[0])));
            }
        }
        layers.push(BuiltLayer {
            spec: spec.clone(),
            module,
            inputs,
            out_shape,
            macs,
        });
    }
    match layers.last() {
        Some(BuiltLayer {
            module: Module::Segment(_),
            ..
        }) => {}
        _ => return Err(Error::Config("last layer must be the segment head".into())),
    }
    Ok(Network {
        config: cfg.clone(),
        layers,
        store,
    })
}

impl Network {
    pub fn head(&self) -> &SegmentHead {
        match &self.layers.last().expect("built network has layers").module {
            Module::Segment(h) => h,
            _ => unreachable!("checked at build"),
        }
    }

    /// Downsampling factor of each head input.
    pub fn strides(&self) -> Vec<usize> {
        let last = self.layers.last().expect("layers");
        last.inputs.iter().map(|&j| self.config.input[1] / self.layers[j].out_shape[1]).collect()
    }

    /// Prototype grid downsampling factor.
    pub fn proto_stride(&self) -> usize {
        self.strides()[0] / 2
    }

    /// Run a `[B, C, H, W]` batch. `H` and `W` must be multiples of the
    /// coarsest stride.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<HeadOutput> {
        let s = x.shape().to_vec();
        let coarse = *self.strides().iter().max().expect("strides");
        if s.len() != 4 || s[1] != self.config.input[0] || s[2] % coarse != 0 || s[3] % coarse != 0 {
            return Err(Error::Config(format!(
                "input shape {s:?} needs {} channels and sides divisible by {coarse}",
                self.config.input[0]
            )));
        }
        let mut vals: Vec<Var> = Vec::with_capacity(self.layers.len());
        vals.push(tape.input(x));
        let store = &self.store;
        for layer in &self.layers[1..] {
            let a = vals[layer.inputs[0]];
            let v = match &layer.module {
                Module::Input => unreachable!(),
                Module::Conv(m) => m.forward(tape, store, a),
                Module::Alss(m) => m.forward(tape, store, a)?,
                Module::Sppf(m) => m.forward(tape, store, a),
                Module::Upsample => ops::upsample_nearest2x(tape, a),
                Module::Concat => {
                    let xs: Vec<Var> = layer.inputs.iter().map(|&j| vals[j]).collect();
                    ops::concat(tape, &xs)
                }
                Module::Msca(m) => m.forward(tape, store, a)?,
                Module::Segment(h) => {
                    let xs: Vec<Var> = layer.inputs.iter().map(|&j| vals[j]).collect();
                    return h.forward(tape, store, &xs);
                }
            };
            vals.push(v);
        }
        unreachable!("head is last")
    }
}
