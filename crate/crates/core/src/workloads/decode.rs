use serde::{Deserialize, Serialize};

use crate::graph::{GraphProgram, OpId, OpNode, TensorDecl, TensorId, TensorKind, Tier};

/// How decode steps see a layer's KV cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvReload {
    /// One KV tensor per layer, read by every decode step.
    #[default]
    OneShot,
    /// Each decode step reads the layer's cache and writes the next step's
    /// copy, so every step boundary is a separate idle window.
    PerStep,
}

/// Prefill over `prefill_tokens`, then `decode_steps` token steps through
/// every layer. KV tensors are sized for the prefill length and do not grow.
///
/// With `kv_blocks_per_layer = B > 1` each layer's tokens are split into B
/// contiguous blocks; prefill and decode then run one op per block, each
/// producing or reading only its own KV and workspace slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    pub layers: u32,
    pub kv_bytes_per_layer_per_token: u64,
    pub weight_bytes_per_layer: u64,
    pub prefill_tokens: u64,
    pub decode_steps: u32,
    pub prefill_cost_us_per_layer: u64,
    pub decode_cost_us_per_layer: u64,
    /// Per-layer activation state kept for the whole sequence.
    #[serde(default)]
    pub workspace_bytes_per_layer_per_token: u64,
    #[serde(default = "default_hidden")]
    pub hidden_bytes: u64,
    #[serde(default = "device")]
    pub weight_tier: Tier,
    #[serde(default)]
    pub kv_reload: KvReload,
    #[serde(default = "one")]
    pub kv_blocks_per_layer: u32,
}

fn one() -> u32 {
    1
}

fn default_hidden() -> u64 {
    16 << 10
}

fn device() -> Tier {
    Tier::Device
}

impl DecodeSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if self.layers == 0 {
            return Err(crate::Error::Parse(
                "decode spec needs at least one layer".into(),
            ));
        }
        if self.kv_blocks_per_layer == 0 {
            return Err(crate::Error::Parse(
                "kv_blocks_per_layer must be at least 1".into(),
            ));
        }
        if self
            .kv_bytes_per_layer_per_token
            .checked_mul(self.prefill_tokens)
            .is_none()
        {
            return Err(crate::Error::Parse("KV size overflows".into()));
        }
        Ok(())
    }

    pub fn kv_bytes_per_layer(&self) -> u64 {
        self.kv_bytes_per_layer_per_token * self.prefill_tokens
    }

    pub fn workspace_bytes_per_layer(&self) -> u64 {
        self.workspace_bytes_per_layer_per_token * self.prefill_tokens
    }
}

pub fn prefill_op(spec: &DecodeSpec, l: u32, block: u32) -> OpId {
    OpId(l * spec.kv_blocks_per_layer + block)
}

pub fn decode_op(spec: &DecodeSpec, step: u32, l: u32, block: u32) -> OpId {
    let per_pass = spec.layers * spec.kv_blocks_per_layer;
    OpId(per_pass + step * per_pass + l * spec.kv_blocks_per_layer + block)
}

/// Share `b` of `total` split into `n` near-equal integer parts.
fn share(total: u64, n: u32, b: u32) -> u64 {
    let n = u128::from(n);
    let at = |i: u128| (u128::from(total) * i / n) as u64;
    at(u128::from(b) + 1) - at(u128::from(b))
}

pub fn gen_llm_decode(spec: &DecodeSpec) -> crate::Result<GraphProgram> {
    spec.validate()?;
    let layers = spec.layers;
    let mut g = GraphProgram::default();
    let mut next = 0u32;
    let mut tensor = |g: &mut GraphProgram, bytes: u64, kind: TensorKind| {
        let id = next;
        next += 1;
        g.tensors.push(TensorDecl::new(id, bytes, kind));
        id
    };

    let x = tensor(&mut g, spec.hidden_bytes, TensorKind::Activation);
    let weights: Vec<u32> = (0..layers)
        .map(|_| tensor(&mut g, spec.weight_bytes_per_layer, TensorKind::Weight))
        .collect();
    for &w in &weights {
        g.tensors[w as usize].initial_tier = spec.weight_tier;
    }

    let nb = spec.kv_blocks_per_layer;
    let tokens = |b: u32| share(spec.prefill_tokens, nb, b);
    // kv[l][b], ws[l][b]
    let mut kv: Vec<Vec<u32>> = Vec::with_capacity(layers as usize);
    let mut ws: Vec<Vec<Option<u32>>> = Vec::with_capacity(layers as usize);
    let mut prev = x;
    for l in 0..layers {
        let (mut kl, mut wl) = (Vec::new(), Vec::new());
        for b in 0..nb {
            let k = tensor(
                &mut g,
                spec.kv_bytes_per_layer_per_token * tokens(b),
                TensorKind::KvBlock,
            );
            let h = tensor(&mut g, spec.hidden_bytes, TensorKind::Activation);
            let mut outputs = vec![k, h];
            let ws_bytes = spec.workspace_bytes_per_layer_per_token * tokens(b);
            if ws_bytes > 0 {
                let w = tensor(&mut g, ws_bytes, TensorKind::Workspace);
                outputs.push(w);
                wl.push(Some(w));
            } else {
                wl.push(None);
            }
            g.ops.push(OpNode::compute(
                prefill_op(spec, l, b).0,
                share(spec.prefill_cost_us_per_layer, nb, b),
                &[prev, weights[l as usize]],
                &outputs,
            ));
            kl.push(k);
            prev = h;
        }
        kv.push(kl);
        ws.push(wl);
    }

    for t in 0..spec.decode_steps {
        for l in 0..layers {
            let li = l as usize;
            for b in 0..nb {
                let bi = b as usize;
                let d = tensor(&mut g, spec.hidden_bytes, TensorKind::Activation);
                let mut inputs = vec![prev, weights[li], kv[li][bi]];
                inputs.extend(ws[li][bi]);
                let mut outputs = vec![d];
                if spec.kv_reload == KvReload::PerStep && t + 1 < spec.decode_steps {
                    let bytes = g.tensors[kv[li][bi] as usize].bytes;
                    let k = tensor(&mut g, bytes, TensorKind::KvBlock);
                    outputs.push(k);
                    kv[li][bi] = k;
                }
                g.ops.push(OpNode::compute(
                    decode_op(spec, t, l, b).0,
                    share(spec.decode_cost_us_per_layer, nb, b),
                    &inputs,
                    &outputs,
                ));
                prev = d;
            }
        }
    }
    Ok(g)
}

/// Total KV bytes declared by `g`.
pub fn kv_bytes(g: &GraphProgram) -> u64 {
    g.tensors
        .iter()
        .filter(|t| t.kind == TensorKind::KvBlock)
        .map(|t| t.bytes)
        .sum()
}

pub fn kv_tensors(g: &GraphProgram) -> impl Iterator<Item = TensorId> + '_ {
    g.tensors
        .iter()
        .filter(|t| t.kind == TensorKind::KvBlock)
        .map(|t| t.id)
}
