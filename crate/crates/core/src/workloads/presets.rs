//! Named workload + machine configurations. Sizes are synthetic; they are
//! proportioned to publicly known model shapes, not measured.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{topo_order, GraphProgram, Tier};
use crate::machine::{gbps_to_bytes_per_us, MachineModel};
use crate::sim::peak_memory_no_offload;

use super::decode::{gen_llm_decode, DecodeSpec, KvReload};
use super::train::{gen_transformer_train, TrainSpec};

/// Either workload family; spec files hold one of the two shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkloadSpec {
    Train(TrainSpec),
    Decode(DecodeSpec),
}

impl WorkloadSpec {
    pub fn generate(&self) -> Result<GraphProgram> {
        match self {
            WorkloadSpec::Train(s) => gen_transformer_train(s),
            WorkloadSpec::Decode(s) => gen_llm_decode(s),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("workload spec: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub workload: WorkloadSpec,
    pub machine: MachineModel,
}

pub const PRESET_NAMES: [&str; 4] = [
    "llama8b-like",
    "deepseekv3-like",
    "deepseekv3-long",
    "reactive-slowdown",
];

pub fn preset(name: &str) -> Result<Preset> {
    let (workload, machine) = match name {
        "llama8b-like" => (
            WorkloadSpec::Train(llama8b_train()),
            MachineModel::default(),
        ),
        "deepseekv3-like" => {
            let spec = deepseek_decode(CALIBRATION_TOKENS);
            let machine = MachineModel {
                device_capacity_bytes: deepseek_baseline_peak(&spec)?,
                ..MachineModel::default()
            };
            (WorkloadSpec::Decode(spec), machine)
        }
        "deepseekv3-long" => {
            let spec = long_decode();
            let machine = MachineModel {
                device_capacity_bytes: long_decode_capacity(&spec),
                ..MachineModel::default()
            };
            (WorkloadSpec::Decode(spec), machine)
        }
        "reactive-slowdown" => {
            let spec = long_decode();
            let machine = MachineModel {
                device_capacity_bytes: long_decode_capacity(&spec),
                reactive_orchestration_overhead_us: REACTIVE_OVERHEAD_US,
                compaction_bandwidth_bytes_per_us: REACTIVE_COMPACTION_BYTES_PER_US,
                ..MachineModel::default()
            };
            (WorkloadSpec::Decode(spec), machine)
        }
        other => {
            return Err(Error::Parse(format!(
                "unknown preset `{other}`; known: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        workload,
        machine,
    })
}

const MIB: u64 = 1 << 20;

/// 32 layers; per layer 256 MiB of activations, 416 MiB of weights and of
/// gradients, and 192 MiB of optimizer state held in the remote pool.
pub fn llama8b_train() -> TrainSpec {
    TrainSpec {
        layers: 32,
        bytes_per_activation: 256 * MIB,
        bytes_per_weight_per_layer: 416 * MIB,
        bytes_per_optimizer_state_per_layer: 192 * MIB,
        fwd_cost_us: 10_000,
        bwd_cost_us: 20_000,
        update_cost_us: 5_000,
        bytes_per_gradient: None,
        optimizer_state_tier: Tier::Remote,
    }
}

pub const CALIBRATION_TOKENS: u64 = 71_000;
/// KV and non-KV footprints at [`CALIBRATION_TOKENS`], in units of
/// [`deepseek_unit_bytes`].
pub const CALIBRATION_KV_UNITS: f64 = 16.2;
pub const CALIBRATION_NON_KV_UNITS: f64 = 45.0;
const DEEPSEEK_LAYERS: u32 = 61;
const DEEPSEEK_KV_PER_TOKEN: u64 = 3_740;
/// Per-layer, per-token activation state that stays on device.
pub const DEEPSEEK_WORKSPACE_PER_TOKEN: u64 = 5_092;
const DEEPSEEK_HIDDEN: u64 = 14_336;
/// Token blocks per layer; prefill and decode run one op per block.
pub const DEEPSEEK_KV_BLOCKS: u32 = 20;

/// Size of one footprint unit: the KV cache at [`CALIBRATION_TOKENS`] is exactly
/// [`CALIBRATION_KV_UNITS`] units.
pub fn deepseek_unit_bytes() -> f64 {
    (DEEPSEEK_KV_PER_TOKEN * DEEPSEEK_LAYERS as u64 * CALIBRATION_TOKENS) as f64
        / CALIBRATION_KV_UNITS
}

/// 61-layer decode. Weights are sized so that everything other than KV
/// comes to [`CALIBRATION_NON_KV_UNITS`] at [`CALIBRATION_TOKENS`]; they do not change
/// with `prefill_tokens`.
pub fn deepseek_decode(prefill_tokens: u64) -> DecodeSpec {
    let layers = DEEPSEEK_LAYERS as u64;
    let non_kv = (CALIBRATION_NON_KV_UNITS * deepseek_unit_bytes()).round() as u64;
    let fixed =
        non_kv - layers * DEEPSEEK_WORKSPACE_PER_TOKEN * CALIBRATION_TOKENS - 2 * DEEPSEEK_HIDDEN;
    DecodeSpec {
        layers: DEEPSEEK_LAYERS,
        kv_bytes_per_layer_per_token: DEEPSEEK_KV_PER_TOKEN,
        weight_bytes_per_layer: fixed / layers,
        prefill_tokens,
        decode_steps: 1,
        prefill_cost_us_per_layer: 120_000,
        decode_cost_us_per_layer: 16_000,
        workspace_bytes_per_layer_per_token: DEEPSEEK_WORKSPACE_PER_TOKEN,
        hidden_bytes: DEEPSEEK_HIDDEN,
        weight_tier: Tier::Device,
        kv_reload: KvReload::OneShot,
        kv_blocks_per_layer: DEEPSEEK_KV_BLOCKS,
    }
}

fn aligned(bytes: u64, alignment: u64) -> u64 {
    bytes.div_ceil(alignment) * alignment
}

/// Allocator-aligned no-offload peak of [`deepseek_decode`].
pub fn deepseek_baseline_peak(spec: &DecodeSpec) -> Result<u64> {
    let g = gen_llm_decode(spec)?;
    peak_memory_no_offload(&g, &topo_order(&g)?, &MachineModel::default().unbounded())
}

/// Long-sequence decode: every step rewrites the layer's cache, and
/// decode compute per layer is long enough to hide one KV transfer.
pub fn long_decode() -> DecodeSpec {
    DecodeSpec {
        layers: 61,
        kv_bytes_per_layer_per_token: 3_740,
        weight_bytes_per_layer: 700 * MIB,
        prefill_tokens: 128_000,
        decode_steps: 4,
        prefill_cost_us_per_layer: 200_000,
        decode_cost_us_per_layer: 16_000,
        workspace_bytes_per_layer_per_token: 0,
        hidden_bytes: DEEPSEEK_HIDDEN,
        weight_tier: Tier::Device,
        kv_reload: KvReload::PerStep,
        kv_blocks_per_layer: 1,
    }
}

/// 95% of the long-decode no-offload peak.
pub fn long_decode_capacity(spec: &DecodeSpec) -> u64 {
    let a = MachineModel::default().allocator_alignment_bytes;
    let layers = spec.layers as u64;
    let peak = layers
        * (aligned(spec.weight_bytes_per_layer, a) + aligned(spec.kv_bytes_per_layer(), a))
        + aligned(spec.kv_bytes_per_layer(), a)
        + 2 * aligned(spec.hidden_bytes, a);
    peak / 100 * 95
}

/// Per-transfer control-path cost used by the `reactive-slowdown` preset.
pub const REACTIVE_OVERHEAD_US: u64 = 2_000;
/// Device-local copy rate used by the `reactive-slowdown` preset.
pub const REACTIVE_COMPACTION_BYTES_PER_US: u64 = 250_000;

/// `machine` with both remote channels set to `gbps`.
pub fn at_bandwidth(machine: &MachineModel, gbps: f64) -> MachineModel {
    MachineModel {
        r2d_bandwidth_bytes_per_us: gbps_to_bytes_per_us(gbps),
        d2r_bandwidth_bytes_per_us: gbps_to_bytes_per_us(gbps),
        ..machine.clone()
    }
}
