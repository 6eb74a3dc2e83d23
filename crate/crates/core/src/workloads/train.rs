use serde::{Deserialize, Serialize};

use crate::graph::{GraphProgram, OpId, OpNode, TensorDecl, TensorId, TensorKind, Tier};

/// Layer-stacked training step: forward chain, backward chain in reverse,
/// then one optimizer update per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub layers: u32,
    pub bytes_per_activation: u64,
    pub bytes_per_weight_per_layer: u64,
    pub bytes_per_optimizer_state_per_layer: u64,
    pub fwd_cost_us: u64,
    pub bwd_cost_us: u64,
    pub update_cost_us: u64,
    /// Gradient size; defaults to the weight size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_per_gradient: Option<u64>,
    #[serde(default = "device")]
    pub optimizer_state_tier: Tier,
}

fn device() -> Tier {
    Tier::Device
}

impl TrainSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if self.layers == 0 {
            return Err(crate::Error::Parse(
                "train spec needs at least one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Tensor ids, for a model of `L` layers:
///
/// | tensor | ids |
/// |---|---|
/// | input `x` | 0 |
/// | activation `a_l` | 1 + l |
/// | weight `w_l` | 1 + L + l |
/// | gradient `g_l` | 1 + 2L + l |
/// | optimizer state `s_l` | 1 + 3L + l |
/// | updated state `s_l'` (alias of `s_l`) | 1 + 4L + l |
///
/// Op ids: `fwd_l` = l, `bwd_l` = 2L − 1 − l, `upd_l` = 2L + l, so the
/// smallest-id topological order runs all forwards, all backwards, then
/// all updates.
pub fn gen_transformer_train(spec: &TrainSpec) -> crate::Result<GraphProgram> {
    spec.validate()?;
    let l_count = spec.layers;
    let act = |l: u32| 1 + l;
    let weight = |l: u32| 1 + l_count + l;
    let grad = |l: u32| 1 + 2 * l_count + l;
    let state = |l: u32| 1 + 3 * l_count + l;
    let next_state = |l: u32| 1 + 4 * l_count + l;

    let mut g = GraphProgram::default();
    g.tensors.push(TensorDecl::new(
        0,
        spec.bytes_per_activation,
        TensorKind::Activation,
    ));
    for l in 0..l_count {
        g.tensors.push(TensorDecl::new(
            act(l),
            spec.bytes_per_activation,
            TensorKind::Activation,
        ));
    }
    for l in 0..l_count {
        g.tensors.push(TensorDecl::new(
            weight(l),
            spec.bytes_per_weight_per_layer,
            TensorKind::Weight,
        ));
    }
    let grad_bytes = spec
        .bytes_per_gradient
        .unwrap_or(spec.bytes_per_weight_per_layer);
    for l in 0..l_count {
        g.tensors
            .push(TensorDecl::new(grad(l), grad_bytes, TensorKind::Gradient));
    }
    for l in 0..l_count {
        let mut t = TensorDecl::new(
            state(l),
            spec.bytes_per_optimizer_state_per_layer,
            TensorKind::OptimizerState,
        );
        t.initial_tier = spec.optimizer_state_tier;
        g.tensors.push(t);
    }
    for l in 0..l_count {
        g.tensors.push(
            TensorDecl::new(
                next_state(l),
                spec.bytes_per_optimizer_state_per_layer,
                TensorKind::OptimizerState,
            )
            .alias_of(TensorId(state(l))),
        );
    }

    for l in 0..l_count {
        let input = if l == 0 { 0 } else { act(l - 1) };
        g.ops.push(OpNode::compute(
            l,
            spec.fwd_cost_us,
            &[input, weight(l)],
            &[act(l)],
        ));
    }
    for l in (0..l_count).rev() {
        let id = 2 * l_count - 1 - l;
        let mut inputs = vec![act(l), weight(l)];
        if l + 1 < l_count {
            inputs.push(grad(l + 1));
        }
        g.ops
            .push(OpNode::compute(id, spec.bwd_cost_us, &inputs, &[grad(l)]));
    }
    for l in 0..l_count {
        g.ops.push(OpNode::compute(
            2 * l_count + l,
            spec.update_cost_us,
            &[grad(l), state(l)],
            &[next_state(l)],
        ));
    }
    g.ops.sort_by_key(|o| o.id);
    Ok(g)
}

pub fn fwd_op(l: u32) -> OpId {
    OpId(l)
}

pub fn bwd_op(spec: &TrainSpec, l: u32) -> OpId {
    OpId(2 * spec.layers - 1 - l)
}

pub fn activation(l: u32) -> TensorId {
    TensorId(1 + l)
}
