use super::{names, GlucoseScaler, ModelConfig, ModelError, MultiViewInput, TrainedModel, Variant, CLASSES, VIEWS};
use crate::autonn::{multi_head_self_attention, softmax_rows, AttentionParams, Graph, NodeId, ParamStore, Tensor};

/// Handles to the nodes downstream code reads after a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[B, 3]`
    pub logits: NodeId,
    /// `[B, 1]` glucose z-score.
    pub glucose_z: NodeId,
    /// `[B, views · embed_dim]` before masking.
    pub embedding: NodeId,
    /// `feature_maps[view][block]`: `[B, C, H, W]` after the block's relu,
    /// before pooling.
    pub feature_maps: Vec<Vec<NodeId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub glucose_mgdl: f64,
}

fn view_batch(inputs: &[&MultiViewInput], view: usize, size: usize) -> Tensor {
    let mut data = Vec::with_capacity(inputs.len() * size * size);
    for x in inputs {
        data.extend_from_slice(x.view(view).data());
    }
    Tensor::new(vec![inputs.len(), 1, size, size], data).expect("batch shape")
}

fn dense(g: &mut Graph, p: &ParamStore, x: NodeId, w: &str, b: &str) -> Result<NodeId, ModelError> {
    let w = g.param(p, w)?;
    let b = g.param(p, b)?;
    Ok(g.affine(x, w, b)?)
}

fn layer_norm(g: &mut Graph, p: &ParamStore, x: NodeId, gamma: &str, beta: &str) -> Result<NodeId, ModelError> {
    let gm = g.param(p, gamma)?;
    let bt = g.param(p, beta)?;
    Ok(g.layer_norm(x, gm, bt, 1e-5)?)
}

/// Runs the network on a batch of participants.
///
/// `mask`, when given, multiplies the concatenated view embeddings
/// column-wise; it must have `5 · embed_dim` entries. The single-view
/// variant reads only the straight view and its embedding occupies the
/// first `embed_dim` mask entries.
pub fn forward(
    graph: &mut Graph,
    params: &ParamStore,
    config: &ModelConfig,
    inputs: &[&MultiViewInput],
    mask: Option<&[f64]>,
) -> Result<ForwardNodes, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::InvalidConfig("empty batch".into()));
    }
    let size = config.input_size;
    if inputs.iter().any(|x| x.size() != size) {
        return Err(crate::autonn::NnError::ShapeMismatch(format!("inputs must be {size}x{size}")).into());
    }
    if let Some(m) = mask {
        if m.len() != config.mask_len() {
            return Err(crate::autonn::NnError::ShapeMismatch(format!(
                "mask of length {} for {} embedding columns",
                m.len(),
                config.mask_len()
            ))
            .into());
        }
    }

    let views = config.variant.views();
    let mut embeds = Vec::with_capacity(views);
    let mut feature_maps = Vec::with_capacity(views);
    for v in 0..views {
        let mut x = graph.input(view_batch(inputs, v, size));
        let mut maps = Vec::with_capacity(config.branch_channels.len());
        for j in 0..config.branch_channels.len() {
            let k = graph.param(params, &names::conv_w(v, j))?;
            let b = graph.param(params, &names::conv_b(v, j))?;
            x = graph.conv2d(x, k, 1, 1)?;
            x = graph.channel_bias(x, b)?;
            x = graph.relu(x);
            maps.push(x);
            x = graph.max_pool2(x)?;
        }
        feature_maps.push(maps);
        let pooled = graph.global_avg_pool(x)?;
        embeds.push(dense(graph, params, pooled, &names::embed_w(v), &names::embed_b(v))?);
    }
    let embedding = if views == 1 { embeds[0] } else { graph.concat_cols(&embeds)? };

    let e = config.embed_dim;
    let masked = match mask {
        Some(m) => graph.mask_cols(embedding, &m[..views * e])?,
        None => embedding,
    };

    let fused = match config.variant {
        Variant::SingleView | Variant::Multiview | Variant::MultiviewMrfo => {
            let h = dense(graph, params, masked, names::FUSE_W, names::FUSE_B)?;
            graph.relu(h)
        }
        Variant::Full => {
            let mut tokens = Vec::with_capacity(VIEWS);
            for v in 0..VIEWS {
                let s = graph.slice_cols(masked, v * e, e)?;
                tokens.push(dense(graph, params, s, &names::token_w(v), &names::token_b(v))?);
            }
            let mut t = graph.interleave_rows(&tokens)?;
            for l in 0..config.fusion_layers {
                let n1 = layer_norm(graph, params, t, &names::layer(l, "ln1.gamma"), &names::layer(l, "ln1.beta"))?;
                let attn = AttentionParams::with_prefix(&names::layer(l, "attn"));
                let (a, _) = multi_head_self_attention(graph, params, n1, &attn, config.fusion_heads, VIEWS)?;
                t = graph.add(t, a)?;
                let n2 = layer_norm(graph, params, t, &names::layer(l, "ln2.gamma"), &names::layer(l, "ln2.beta"))?;
                let h = dense(graph, params, n2, &names::layer(l, "ff1.weight"), &names::layer(l, "ff1.bias"))?;
                let h = graph.relu(h);
                let h = dense(graph, params, h, &names::layer(l, "ff2.weight"), &names::layer(l, "ff2.bias"))?;
                t = graph.add(t, h)?;
            }
            let t = layer_norm(graph, params, t, names::FINAL_LN_G, names::FINAL_LN_B)?;
            graph.group_mean_rows(t, VIEWS)?
        }
    };
    let logits = dense(graph, params, fused, names::CLS_W, names::CLS_B)?;
    let glucose_z = dense(graph, params, fused, names::REG_W, names::REG_B)?;
    Ok(ForwardNodes { logits, glucose_z, embedding, feature_maps })
}

/// `CE(logits, labels) + lambda · MSE(glucose_z, z(fpg_true))`.
pub fn composite_loss(
    graph: &mut Graph,
    logits: NodeId,
    glucose_z: NodeId,
    labels: &[usize],
    fpg_true_mgdl: &[f64],
    scaler: &GlucoseScaler,
    lambda_reg: f64,
) -> Result<NodeId, ModelError> {
    if labels.len() != fpg_true_mgdl.len() {
        return Err(crate::autonn::NnError::ShapeMismatch(format!(
            "{} labels vs {} glucose targets",
            labels.len(),
            fpg_true_mgdl.len()
        ))
        .into());
    }
    let ce = graph.softmax_cross_entropy(logits, labels)?;
    let z: Vec<f64> = fpg_true_mgdl.iter().map(|&f| scaler.to_z(f)).collect();
    let mse = graph.mse(glucose_z, &z)?;
    Ok(graph.combine(ce, 1.0, mse, lambda_reg)?)
}

/// Class probabilities and de-normalized glucose for each input.
pub fn predict(model: &TrainedModel, inputs: &[&MultiViewInput]) -> Result<Vec<Prediction>, ModelError> {
    let mask = model.mask_weights();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(32) {
        let mut g = Graph::new();
        let nodes = forward(&mut g, &model.params, &model.config, chunk, mask.as_deref())?;
        let probs = softmax_rows(g.value(nodes.logits));
        for (i, p) in probs.data().chunks(CLASSES).enumerate() {
            out.push(Prediction {
                class_probs: p.to_vec(),
                glucose_mgdl: model.scaler.to_mgdl(g.value(nodes.glucose_z).data()[i]),
            });
        }
    }
    Ok(out)
}
