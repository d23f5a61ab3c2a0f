use std::collections::HashMap;

use super::{LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::rng::Rng;

/// Gate/up/down projections of one gated feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFfnWeights {
    /// `hidden_width × d`
    pub gate: Matrix,
    pub gate_bias: Vec<f32>,
    /// `hidden_width × d`
    pub up: Matrix,
    pub up_bias: Vec<f32>,
    /// `d × hidden_width`
    pub down: Matrix,
    pub down_bias: Vec<f32>,
}

impl GatedFfnWeights {
    pub fn width(&self) -> usize {
        self.gate.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.gate.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForwardWeights {
    Dense(GatedFfnWeights),
    Moe {
        /// `E × d`
        router: Matrix,
        experts: Vec<GatedFfnWeights>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub ffn: FeedForwardWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

/// Name and shape of every tensor, in file directory order.
pub fn tensor_directory(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden;
    let mut out = vec![("embed".to_string(), vec![config.vocab, d])];
    let ffn = |prefix: String, width: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.gate.weight"), vec![width, d]));
        out.push((format!("{prefix}.gate.bias"), vec![width]));
        out.push((format!("{prefix}.up.weight"), vec![width, d]));
        out.push((format!("{prefix}.up.bias"), vec![width]));
        out.push((format!("{prefix}.down.weight"), vec![d, width]));
        out.push((format!("{prefix}.down.bias"), vec![d]));
    };
    for l in 0..config.num_layers {
        let p = format!("layers.{l}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        out.push((format!("{p}.wq"), vec![d, d]));
        out.push((format!("{p}.wk"), vec![config.kv_dim(), d]));
        out.push((format!("{p}.wv"), vec![config.kv_dim(), d]));
        out.push((format!("{p}.wo"), vec![d, d]));
        out.push((format!("{p}.ffn_norm"), vec![d]));
        match config.layer_kind(l) {
            LayerKind::Dense => ffn(format!("{p}.ffn"), config.ffn_hidden, &mut out),
            LayerKind::Moe => {
                out.push((format!("{p}.router"), vec![config.num_experts, d]));
                for e in 0..config.num_experts {
                    ffn(format!("{p}.experts.{e}"), config.expert_hidden, &mut out);
                }
            }
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![config.vocab, d]));
    out
}

struct TensorSource {
    dir: HashMap<String, Vec<usize>>,
    tensors: HashMap<String, Vec<f32>>,
}

impl TensorSource {
    fn vec(&mut self, name: &str) -> Result<Vec<f32>> {
        let data = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::weights(name, "missing tensor"))?;
        let expect: usize = self.dir[name].iter().product();
        if data.len() != expect {
            return Err(Error::weights(
                name,
                format!("expected {expect} values, found {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::weights(name, "non-finite value"));
        }
        Ok(data)
    }

    fn mat(&mut self, name: &str) -> Result<Matrix> {
        let data = self.vec(name)?;
        let shape = &self.dir[name];
        Matrix::from_vec(shape[0], shape[1], data)
    }

    fn ffn(&mut self, prefix: &str) -> Result<GatedFfnWeights> {
        Ok(GatedFfnWeights {
            gate: self.mat(&format!("{prefix}.gate.weight"))?,
            gate_bias: self.vec(&format!("{prefix}.gate.bias"))?,
            up: self.mat(&format!("{prefix}.up.weight"))?,
            up_bias: self.vec(&format!("{prefix}.up.bias"))?,
            down: self.mat(&format!("{prefix}.down.weight"))?,
            down_bias: self.vec(&format!("{prefix}.down.bias"))?,
        })
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

impl Weights {
    /// Tensors drawn in directory order from one stream; norm gains are 1.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let bound = 1.0 / (config.hidden as f32).sqrt();
        let mut map = HashMap::new();
        for (name, shape) in tensor_directory(config) {
            let n: usize = shape.iter().product();
            let data = if is_norm(&name) {
                vec![1.0; n]
            } else {
                (0..n).map(|_| rng.uniform_f32(-bound, bound)).collect()
            };
            map.insert(name, data);
        }
        Self::from_named(config, map).expect("seeded tensors follow the directory")
    }

    /// Assembles weights from named flat tensors. Shapes come from the
    /// directory; every tensor must be present with the right length.
    pub fn from_named(config: &ModelConfig, tensors: HashMap<String, Vec<f32>>) -> Result<Self> {
        let mut src = TensorSource {
            dir: tensor_directory(config).into_iter().collect(),
            tensors,
        };
        let embed = src.mat("embed")?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let attn_norm = src.vec(&format!("{p}.attn_norm"))?;
            let wq = src.mat(&format!("{p}.wq"))?;
            let wk = src.mat(&format!("{p}.wk"))?;
            let wv = src.mat(&format!("{p}.wv"))?;
            let wo = src.mat(&format!("{p}.wo"))?;
            let ffn_norm = src.vec(&format!("{p}.ffn_norm"))?;
            let ffn = match config.layer_kind(l) {
                LayerKind::Dense => FeedForwardWeights::Dense(src.ffn(&format!("{p}.ffn"))?),
                LayerKind::Moe => {
                    let router = src.mat(&format!("{p}.router"))?;
                    let experts = (0..config.num_experts)
                        .map(|e| src.ffn(&format!("{p}.experts.{e}")))
                        .collect::<Result<Vec<_>>>()?;
                    FeedForwardWeights::Moe { router, experts }
                }
            };
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = src.vec("final_norm")?;
        let lm_head = src.mat("lm_head")?;
        if let Some(extra) = src.tensors.keys().min() {
            return Err(Error::weights(
                extra.clone(),
                "tensor not part of this model configuration",
            ));
        }
        Ok(Self {
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Flat views of every tensor in directory order.
    pub fn named_tensors(&self, config: &ModelConfig) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut flat: Vec<&[f32]> = vec![self.embed.data()];
        fn push_ffn<'a>(f: &'a GatedFfnWeights, flat: &mut Vec<&'a [f32]>) {
            flat.push(f.gate.data());
            flat.push(&f.gate_bias);
            flat.push(f.up.data());
            flat.push(&f.up_bias);
            flat.push(f.down.data());
            flat.push(&f.down_bias);
        }
        for layer in &self.layers {
            flat.push(&layer.attn_norm);
            flat.push(layer.wq.data());
            flat.push(layer.wk.data());
            flat.push(layer.wv.data());
            flat.push(layer.wo.data());
            flat.push(&layer.ffn_norm);
            match &layer.ffn {
                FeedForwardWeights::Dense(f) => push_ffn(f, &mut flat),
                FeedForwardWeights::Moe { router, experts } => {
                    flat.push(router.data());
                    for e in experts {
                        push_ffn(e, &mut flat);
                    }
                }
            }
        }
        flat.push(&self.final_norm);
        flat.push(self.lm_head.data());
        tensor_directory(config)
            .into_iter()
            .zip(flat)
            .map(|((name, shape), data)| (name, shape, data))
            .collect()
    }

    pub(crate) fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let dir = tensor_directory(config);
        let named = self.named_tensors(config);
        if named.len() != dir.len() || self.layers.len() != config.num_layers {
            return Err(Error::weights("<model>", "tensor count does not match configuration"));
        }
        for ((name, shape), (_, _, data)) in dir.iter().zip(named.iter()) {
            let expect: usize = shape.iter().product();
            if data.len() != expect {
                return Err(Error::weights(
                    name.clone(),
                    format!("expected {expect} values, found {}", data.len()),
                ));
            }
        }
        Ok(())
    }
}
